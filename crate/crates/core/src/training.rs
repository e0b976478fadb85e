//! Two-phase training: the operator alone against HR targets, then the
//! denoiser with the operator frozen.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, CheckpointMeta, Phase, RngState};
use crate::config::{ConditionMode, RunConfig};
use crate::data::{make_pair, sample_scale, scale_cap};
use crate::denoiser::{Denoiser, Mode};
use crate::diffusion::noised_sample;
use crate::error::{invalid, Error, Result};
use crate::grid::ImageGrid;
use crate::metrics::psnr;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::pipeline::{child_rng, prior, OperatorModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iters: u64,
    pub lr_init: f64,
    pub lr_min: f64,
    /// Iterations held at `lr_init` before the cosine decay starts.
    pub warm_iters: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Log interval in iterations; 0 disables.
    pub log_every: u64,
    /// Checkpoint interval in iterations; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Held-out PSNR interval (operator phase only); 0 disables.
    pub eval_every: u64,
    /// Denoiser training on random square patches of this size instead of
    /// whole images (diffusion phase only).
    #[serde(default)]
    pub patch_size: Option<usize>,
}

impl TrainConfig {
    pub fn toy_operator() -> Self {
        Self {
            batch_size: 4,
            max_iters: 2000,
            lr_init: 1e-3,
            lr_min: 2e-6,
            warm_iters: 200,
            grad_clip: 1.0,
            log_every: 100,
            checkpoint_every: 0,
            eval_every: 500,
            patch_size: None,
        }
    }

    pub fn toy_diffusion() -> Self {
        Self { max_iters: 5000, warm_iters: 500, eval_every: 0, patch_size: Some(24), ..Self::toy_operator() }
    }

    pub fn paper_operator() -> Self {
        Self {
            batch_size: 64,
            max_iters: 13_200,
            lr_init: 1e-4,
            lr_min: 2e-6,
            warm_iters: 0,
            grad_clip: 1.0,
            log_every: 100,
            checkpoint_every: 1000,
            eval_every: 1000,
            patch_size: None,
        }
    }

    pub fn paper_diffusion() -> Self {
        Self {
            batch_size: 10,
            max_iters: 1_000_000,
            warm_iters: 100_000,
            checkpoint_every: 10_000,
            eval_every: 0,
            ..Self::paper_operator()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.max_iters < 1 {
            return Err(invalid("batch_size and max_iters must be >= 1"));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_init && self.lr_init.is_finite()) {
            return Err(invalid(format!("need 0 < lr_min < lr_init, got {} and {}", self.lr_min, self.lr_init)));
        }
        if self.warm_iters >= self.max_iters {
            return Err(invalid(format!("warm_iters {} must be below max_iters {}", self.warm_iters, self.max_iters)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(invalid("grad_clip must be >= 0"));
        }
        if self.patch_size == Some(0) {
            return Err(invalid("patch_size must be positive"));
        }
        Ok(())
    }
}

/// `lr_init` for `iter < warm_iters`, then cosine decay reaching `lr_min`
/// at `max_iters`.
pub fn lr_at(cfg: &TrainConfig, iter: u64) -> Result<f64> {
    if iter > cfg.max_iters {
        return Err(invalid(format!("iteration {iter} beyond max_iters {}", cfg.max_iters)));
    }
    if iter < cfg.warm_iters {
        return Ok(cfg.lr_init);
    }
    let frac = (iter - cfg.warm_iters) as f64 / (cfg.max_iters - cfg.warm_iters) as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Where output goes and how far to run.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Final (and periodic) checkpoint destination.
    pub checkpoint_path: Option<&'a Path>,
    /// JSON-lines training log.
    pub log: Option<&'a mut dyn Write>,
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<&'a Checkpoint>,
    /// Stop after this many completed iterations (the schedule still spans
    /// `max_iters`).
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss of every iteration run in this call.
    pub losses: Vec<f64>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    phase: &'a str,
    iter: u64,
    loss: f64,
    lr: f64,
    elapsed_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_psnr_db: Option<f64>,
}

fn write_log(log: &mut Option<&mut dyn Write>, line: &LogLine<'_>) -> Result<()> {
    if let Some(w) = log.as_mut() {
        serde_json::to_writer(&mut **w, line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn check_images(images: &[ImageGrid], hr_size: usize) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(img) = images.iter().find(|i| i.dims() != (3, hr_size, hr_size)) {
        return Err(Error::Data(format!("training image is {:?}, expected (3, {hr_size}, {hr_size})", img.dims())));
    }
    Ok(())
}

fn training_scale_cap(cfg: &RunConfig) -> Result<f64> {
    let cap = scale_cap(cfg.operator.max_scale, cfg.data.hr_size);
    if cap <= 1.0 {
        return Err(Error::Config(format!("hr_size {} leaves no usable scale above 1", cfg.data.hr_size)));
    }
    Ok(cap)
}

fn non_finite(phase: &str, iter: u64, batch: &[usize], seed: u64) -> Error {
    Error::Numeric(format!("{phase} loss became non-finite at iteration {iter} (batch images {batch:?}, seed {seed})"))
}

struct Progress {
    start_iter: u64,
    rng: ChaCha8Rng,
    adam: Adam<f32>,
}

fn resume_state(store: &ParamStore<f32>, seed: u64, resume: Option<&Checkpoint>, phase: Phase) -> Result<Progress> {
    match resume {
        None => Ok(Progress { start_iter: 0, rng: child_rng(seed, 2), adam: Adam::new(store) }),
        Some(ck) => {
            if ck.meta.phase != phase {
                return Err(Error::Checkpoint(format!("cannot resume {phase:?} training from a {:?} checkpoint", ck.meta.phase)));
            }
            let rng = ck.meta.rng.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint lacks an rng state".into()))?;
            let adam = Adam::restore(store, ck.meta.optimizer_steps, |k| ck.get(k).cloned())?;
            Ok(Progress { start_iter: ck.meta.iteration, rng: rng.restore()?, adam })
        }
    }
}

/// Phase one: minimise the L1 distance between the operator output and the
/// HR image, with a fresh scale per batch.
pub fn train_operator(cfg: &RunConfig, images: &[ImageGrid], eval: &[ImageGrid], mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train.operator;
    let hr = cfg.data.hr_size;
    check_images(images, hr)?;
    let cap = training_scale_cap(cfg)?;
    let mut model = OperatorModel::init(cfg)?;
    if let Some(ck) = opts.resume {
        ck.load_store(&mut model.store)?;
    }
    let Progress { start_iter, mut rng, mut adam } = resume_state(&model.store, cfg.seed, opts.resume, Phase::Operator)?;
    let end = opts.stop_at.unwrap_or(tc.max_iters).min(tc.max_iters);
    let clock = Instant::now();
    let mut losses = Vec::new();
    let snapshot = |model: &OperatorModel, adam: &Adam<f32>, rng: &ChaCha8Rng, iter: u64| {
        let mut ck = Checkpoint::new(CheckpointMeta {
            config: cfg.clone(),
            phase: Phase::Operator,
            iteration: iter,
            condition: None,
            rng: Some(RngState::capture(rng)),
            optimizer_steps: adam.steps_taken(),
            operator_hash: Some(model.hash()),
            denoiser_hash: None,
        });
        ck.insert_store(&model.store);
        for (k, t) in adam.state_tensors(&model.store) {
            ck.insert(k, t);
        }
        ck
    };
    for iter in start_iter..end {
        let lr = lr_at(tc, iter)?;
        let s = sample_scale(&mut rng, cap)?;
        let batch: Vec<usize> = (0..tc.batch_size).map(|_| rng.random_range(0..images.len())).collect();
        let pairs = batch.iter().map(|&i| make_pair(&images[i], s)).collect::<Result<Vec<_>>>()?;
        let lrs: Vec<ImageGrid> = pairs.iter().map(|p| p.lr.clone()).collect();
        let hrs: Vec<ImageGrid> = pairs.into_iter().map(|p| p.hr).collect();
        let (loss, mut grads) = {
            let mut g = Graph::new(&model.store);
            let x = g.constant(ImageGrid::batch_tensor::<f32>(&lrs)?);
            let target = g.constant(ImageGrid::batch_tensor::<f32>(&hrs)?);
            let pred = model.net.forward_to(&mut g, x, (hr, hr));
            let diff = g.sub(pred, target);
            let l = g.mean_abs(diff);
            (g.value(l).item() as f64, g.backward(l))
        };
        if !loss.is_finite() {
            return Err(non_finite("operator", iter, &batch, cfg.seed));
        }
        if tc.grad_clip > 0.0 {
            grads.clip_global_norm(tc.grad_clip);
        }
        adam.step(&mut model.store, &grads, lr);
        losses.push(loss);
        let done = iter + 1;
        let eval_psnr_db = if tc.eval_every > 0 && done % tc.eval_every == 0 && !eval.is_empty() {
            Some(operator_psnr(&model, eval, cap.min(4.0))?)
        } else {
            None
        };
        if (tc.log_every > 0 && done % tc.log_every == 0) || eval_psnr_db.is_some() {
            let line = LogLine { phase: "operator", iter: done, loss, lr, elapsed_s: clock.elapsed().as_secs_f64(), eval_psnr_db };
            write_log(&mut opts.log, &line)?;
        }
        if let (Some(path), true) = (opts.checkpoint_path, tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0) {
            snapshot(&model, &adam, &rng, done).save(path)?;
        }
    }
    let ck = snapshot(&model, &adam, &rng, end.max(start_iter));
    if let Some(path) = opts.checkpoint_path {
        ck.save(path)?;
    }
    Ok(TrainOutcome { checkpoint: ck, losses })
}

/// Mean PSNR of the operator output against `images` at scale `s`.
pub fn operator_psnr(model: &OperatorModel, images: &[ImageGrid], s: f64) -> Result<f64> {
    let mut total = 0.0;
    for img in images {
        let pair = make_pair(img, s)?;
        let out = model.net.apply_to_size(&model.store, &pair.lr, (img.height(), img.width()))?;
        total += psnr(&out.clamp(-1.0, 1.0), img)?;
    }
    Ok(total / images.len() as f64)
}

/// Phase two: train the denoiser on `(y, z_t, gamma)` with the operator
/// frozen. Priors are cached per image and LR size, which is exact because
/// the operator never changes here.
pub fn train_diffusion(
    cfg: &RunConfig,
    images: &[ImageGrid],
    mode: ConditionMode,
    operator: Option<&OperatorModel>,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if mode.needs_operator() && operator.is_none() {
        return Err(Error::Checkpoint(format!("condition mode {mode} needs an operator checkpoint")));
    }
    let operator = if mode.needs_operator() { operator } else { None };
    let tc = &cfg.train.diffusion;
    let hr = cfg.data.hr_size;
    check_images(images, hr)?;
    let cap = training_scale_cap(cfg)?;
    let schedule = cfg.noise_schedule()?;

    let mut run_cfg = cfg.clone();
    run_cfg.denoiser.cond_channels = mode.prior_channels(&cfg.operator);
    if let Some(op) = operator {
        if op.net.config() != &cfg.operator {
            return Err(Error::Checkpoint("operator checkpoint was trained with a different operator config".into()));
        }
    }
    let operator_hash = operator.map(|op| op.hash());

    let mut store = ParamStore::<f32>::new();
    let net = Denoiser::new(&run_cfg.denoiser, &mut store, &mut child_rng(cfg.seed, 3))?;
    if let Some(ck) = opts.resume {
        ck.load_store(&mut store)?;
        if ck.meta.condition != Some(mode) {
            return Err(Error::Checkpoint(format!("cannot resume {mode} training from a {:?} checkpoint", ck.meta.condition)));
        }
    }
    let Progress { start_iter, mut rng, mut adam } = resume_state(&store, cfg.seed, opts.resume, Phase::Diffusion)?;
    let end = opts.stop_at.unwrap_or(tc.max_iters).min(tc.max_iters);
    let clock = Instant::now();
    let mut losses = Vec::new();
    let mut cache: HashMap<(usize, usize), ImageGrid> = HashMap::new();

    let snapshot = |store: &ParamStore<f32>, adam: &Adam<f32>, rng: &ChaCha8Rng, iter: u64| {
        let mut ck = Checkpoint::new(CheckpointMeta {
            config: run_cfg.clone(),
            phase: Phase::Diffusion,
            iteration: iter,
            condition: Some(mode),
            rng: Some(RngState::capture(rng)),
            optimizer_steps: adam.steps_taken(),
            operator_hash: operator_hash.clone(),
            denoiser_hash: Some(store.hash()),
        });
        if let Some(op) = operator {
            ck.insert_store(&op.store);
        }
        ck.insert_store(store);
        for (k, t) in adam.state_tensors(store) {
            ck.insert(k, t);
        }
        ck
    };

    for iter in start_iter..end {
        let lr = lr_at(tc, iter)?;
        let mut batch = Vec::with_capacity(tc.batch_size);
        let (mut ys, mut zts, mut epss, mut gammas) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..tc.batch_size {
            let i = rng.random_range(0..images.len());
            let s = sample_scale(&mut rng, cap)?;
            let pair = make_pair(&images[i], s)?;
            let key = (i, pair.lr.height());
            let y = match cache.get(&key) {
                Some(y) => y.clone(),
                None => {
                    let y = prior(mode, operator, &pair.lr, (hr, hr))?;
                    cache.insert(key, y.clone());
                    y
                }
            };
            let (y, target) = match tc.patch_size {
                Some(p) if p < hr => {
                    let (top, left) = (rng.random_range(0..=hr - p), rng.random_range(0..=hr - p));
                    (y.crop(top, left, p, p)?, images[i].crop(top, left, p, p)?)
                }
                _ => (y, images[i].clone()),
            };
            let ns = noised_sample(&schedule, &target, &mut rng)?;
            batch.push(i);
            ys.push(y);
            zts.push(ns.zt);
            epss.push(ns.eps);
            gammas.push(ns.gamma);
        }
        let (loss, mut grads) = {
            let mut g = Graph::new(&store);
            let y = g.constant(ImageGrid::batch_tensor::<f32>(&ys)?);
            let zt = g.constant(ImageGrid::batch_tensor::<f32>(&zts)?);
            let eps = g.constant(ImageGrid::batch_tensor::<f32>(&epss)?);
            let pred = net.forward(&mut g, y, zt, &gammas, Mode::Train(&mut rng))?;
            let diff = g.sub(pred, eps);
            let l = g.mean_abs(diff);
            (g.value(l).item() as f64, g.backward(l))
        };
        if !loss.is_finite() {
            return Err(non_finite("diffusion", iter, &batch, cfg.seed));
        }
        if tc.grad_clip > 0.0 {
            grads.clip_global_norm(tc.grad_clip);
        }
        adam.step(&mut store, &grads, lr);
        losses.push(loss);
        let done = iter + 1;
        if tc.log_every > 0 && done % tc.log_every == 0 {
            let line = LogLine { phase: "diffusion", iter: done, loss, lr, elapsed_s: clock.elapsed().as_secs_f64(), eval_psnr_db: None };
            write_log(&mut opts.log, &line)?;
        }
        if let (Some(path), true) = (opts.checkpoint_path, tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0) {
            snapshot(&store, &adam, &rng, done).save(path)?;
        }
    }
    if operator.map(|op| op.hash()) != operator_hash {
        return Err(Error::Numeric("operator parameters changed during diffusion training".into()));
    }
    let ck = snapshot(&store, &adam, &rng, end.max(start_iter));
    if let Some(path) = opts.checkpoint_path {
        ck.save(path)?;
    }
    Ok(TrainOutcome { checkpoint: ck, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig { max_iters: 1000, warm_iters: 100, lr_init: 1e-4, lr_min: 2e-6, ..TrainConfig::toy_operator() };
        assert_eq!(lr_at(&cfg, 0).unwrap(), 1e-4);
        assert_eq!(lr_at(&cfg, 99).unwrap(), 1e-4);
        assert!((lr_at(&cfg, 1000).unwrap() - 2e-6).abs() < 1e-18);
        assert!((lr_at(&cfg, 550).unwrap() - 5.1e-5).abs() < 1e-15);
        assert!(lr_at(&cfg, 1001).is_err());
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let lr = lr_at(&cfg, i).unwrap();
            assert!(lr <= prev && (2e-6..=1e-4).contains(&lr));
            prev = lr;
        }
    }
}
