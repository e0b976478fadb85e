//! Trained models put together: priors for each conditioning mode,
//! super-resolution of single images, and scale sweeps with metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Phase};
use crate::config::{ConditionMode, RunConfig};
use crate::data::{make_pair, NamedImage};
use crate::denoiser::Denoiser;
use crate::diffusion::sample;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::metrics::MetricReport;
use crate::neural_operator::{scaled_size, NeuralOperator};
use crate::params::ParamStore;
use crate::schedule::NoiseSchedule;

/// A ChaCha8 generator on stream `stream` of `seed`, so independent
/// consumers never share draws.
pub fn child_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Operator network with its parameters.
#[derive(Clone, Debug)]
pub struct OperatorModel {
    pub net: NeuralOperator,
    pub store: ParamStore<f32>,
}

impl OperatorModel {
    /// Freshly initialised from the run seed.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = NeuralOperator::new(&cfg.operator, &mut store, &mut child_rng(cfg.seed, 1))?;
        Ok(Self { net, store })
    }

    /// Operator parameters stored in any checkpoint that carries them.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::init(&ckpt.meta.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.load_store(&mut model.store)?;
        Ok(model)
    }

    pub fn hash(&self) -> String {
        self.store.hash()
    }
}

/// The conditioning prior `y` at `out` resolution.
pub fn prior(mode: ConditionMode, operator: Option<&OperatorModel>, lr: &ImageGrid, out: (usize, usize)) -> Result<ImageGrid> {
    let need = || Error::Checkpoint(format!("condition mode {mode} needs a trained operator"));
    match mode {
        ConditionMode::Bicubic => Ok(lr.resize_bicubic(out.0, out.1)),
        ConditionMode::Encoder => {
            let op = operator.ok_or_else(need)?;
            let feats = op.net.encode(&op.store, lr);
            let mut imgs = ImageGrid::from_batch_tensor(&feats)?;
            Ok(imgs.remove(0).resize_bicubic(out.0, out.1))
        }
        ConditionMode::Neurop => {
            let op = operator.ok_or_else(need)?;
            op.net.apply_to_size(&op.store, lr, out)
        }
    }
}

/// A phase-two checkpoint ready for sampling.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub config: RunConfig,
    pub condition: ConditionMode,
    pub operator: Option<OperatorModel>,
    pub denoiser: Denoiser,
    pub store: ParamStore<f32>,
    pub schedule: NoiseSchedule,
}

impl DiffusionModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.phase != Phase::Diffusion {
            return Err(Error::Checkpoint("expected a diffusion checkpoint, got an operator checkpoint".into()));
        }
        let condition = ckpt.meta.condition.ok_or_else(|| Error::Checkpoint("diffusion checkpoint lacks a condition mode".into()))?;
        let config = ckpt.meta.config.clone();
        let operator = if condition.needs_operator() { Some(OperatorModel::from_checkpoint(ckpt)?) } else { None };
        let mut store = ParamStore::new();
        let denoiser =
            Denoiser::new(&config.denoiser, &mut store, &mut child_rng(config.seed, 3)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if config.denoiser.cond_channels != condition.prior_channels(&config.operator) {
            return Err(Error::Checkpoint(format!(
                "denoiser expects {} prior channels but mode {condition} provides {}",
                config.denoiser.cond_channels,
                condition.prior_channels(&config.operator)
            )));
        }
        ckpt.load_store(&mut store)?;
        let schedule = config.noise_schedule().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self { config, condition, operator, denoiser, store, schedule })
    }

    pub fn max_scale(&self) -> f64 {
        self.config.operator.max_scale
    }

    pub fn prior(&self, lr: &ImageGrid, out: (usize, usize)) -> Result<ImageGrid> {
        prior(self.condition, self.operator.as_ref(), lr, out)
    }

    /// Sample an HR image of size `out` with `steps` reverse steps. The
    /// prior is edge-padded to a multiple of the U-Net stride and the result
    /// cropped back.
    pub fn super_resolve_to(&self, lr: &ImageGrid, out: (usize, usize), steps: usize, rng: &mut ChaCha8Rng) -> Result<ImageGrid> {
        if lr.channels() != 3 {
            return Err(Error::Shape(format!("expected an RGB image, got {} channels", lr.channels())));
        }
        let plan = self.schedule.inference_subsequence(steps)?;
        let m = self.denoiser.config().size_multiple();
        let y = self.prior(lr, out)?;
        let (ph, pw) = (out.0.div_ceil(m) * m, out.1.div_ceil(m) * m);
        let y = y.pad_to(ph, pw);
        let z = sample(&self.denoiser.bind(&self.store), &y, &plan, rng)?;
        z.crop(0, 0, out.0, out.1)
    }

    /// Super-resolve by `s`: output is `round(lr_size * s)` per axis.
    pub fn super_resolve(&self, lr: &ImageGrid, s: f64, steps: usize, rng: &mut ChaCha8Rng) -> Result<ImageGrid> {
        if !(s >= 1.0) || !s.is_finite() {
            return Err(Error::InvalidArgument(format!("scale {s} must be >= 1")));
        }
        self.super_resolve_to(lr, (scaled_size(lr.height(), s), scaled_size(lr.width(), s)), steps, rng)
    }
}

/// Metrics at one scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub scale: f64,
    /// `hr_size / lr_size` after rounding the LR size.
    pub effective_scale: f64,
    pub lr_size: usize,
    /// Scale beyond the training range.
    pub out_of_distribution: bool,
    pub model: MetricReport,
    pub bicubic: MetricReport,
}

/// For every scale: degrade each HR image, super-resolve, score against
/// the HR image, and score plain bicubic upsampling alongside. Image `i` at
/// scale index `k` samples from stream `k * 2^32 + i` of `seed`.
pub fn evaluate(model: &DiffusionModel, images: &[NamedImage], scales: &[f64], steps: usize, seed: u64) -> Result<Vec<ScaleReport>> {
    if images.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut out = Vec::with_capacity(scales.len());
    for (k, &s) in scales.iter().enumerate() {
        let mut report = MetricReport::default();
        let mut bicubic = MetricReport::default();
        let mut pair_info = None;
        for (i, img) in images.iter().enumerate() {
            let pair = make_pair(&img.image, s)?;
            let out_size = (img.image.height(), img.image.width());
            let mut rng = child_rng(seed, ((k as u64) << 32) + i as u64);
            let sr = model.super_resolve_to(&pair.lr, out_size, steps, &mut rng)?;
            report.push(&img.name, &sr, &pair.hr)?;
            bicubic.push(&img.name, &pair.lr.resize_bicubic(out_size.0, out_size.1), &pair.hr)?;
            pair_info = Some((pair.s, pair.lr.height()));
        }
        let (effective_scale, lr_size) = pair_info.expect("non-empty image list");
        out.push(ScaleReport { scale: s, effective_scale, lr_size, out_of_distribution: s > model.max_scale(), model: report, bicubic });
    }
    Ok(out)
}
