//! Noise-prediction U-Net `G(y, z_t, gamma)`.
//!
//! The prior `y` and the noisy image `z_t` are concatenated along channels.
//! The noise level enters as sinusoidal features of `ln(gamma)` passed
//! through a small MLP, and the resulting vector is added per channel inside
//! every residual block.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::diffusion::NoisePredictor;
use crate::error::{invalid, Error, Result};
use crate::grid::ImageGrid;
use crate::nn::{Conv2d, GroupNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Number of down/up-sampling levels; inputs must be divisible by `2^depth`.
    pub depth: usize,
    pub dropout: f64,
    /// Width of the sinusoidal noise-level features and of the embedding.
    pub gamma_embed_dim: usize,
    /// Channels of the conditioning prior `y`.
    pub cond_channels: usize,
}

impl DenoiserConfig {
    pub fn toy() -> Self {
        Self { base_channels: 16, depth: 3, dropout: 0.2, gamma_embed_dim: 32, cond_channels: 3 }
    }

    pub fn paper() -> Self {
        Self { base_channels: 64, depth: 4, dropout: 0.2, gamma_embed_dim: 128, cond_channels: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 1 || self.depth < 1 || self.cond_channels < 1 {
            return Err(Error::Config("denoiser: base_channels, depth and cond_channels must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("denoiser: dropout {} outside [0, 1)", self.dropout)));
        }
        if self.gamma_embed_dim < 2 || !self.gamma_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("denoiser: gamma_embed_dim must be even and >= 2".into()));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level.min(2)
    }
}

/// Sinusoidal features of `ln(gamma)` at geometrically spaced frequencies
/// from 1 down to 1/1000: `[sin(u f_0), .., sin(u f_{k-1}), cos(u f_0), ..]`.
pub fn gamma_features(gamma: f64, dim: usize) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid(format!("gamma {gamma} outside (0, 1]")));
    }
    let half = dim / 2;
    let u = gamma.ln();
    let freq = |k: usize| if half > 1 { (-(1000f64.ln()) * k as f64 / (half - 1) as f64).exp() } else { 1.0 };
    let mut out: Vec<f64> = (0..half).map(|k| (u * freq(k)).sin()).collect();
    out.extend((0..half).map(|k| (u * freq(k)).cos()));
    Ok(out)
}

/// Train mode enables dropout, drawing masks from the given source.
pub enum Mode<'r> {
    Train(&'r mut dyn RngCore),
    Eval,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
        rng: &mut R,
    ) -> Self {
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng);
        for v in store.get_mut(conv2.weight).data_mut() {
            *v *= F::of(0.1);
        }
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            emb: Linear::new(store, &format!("{name}.emb"), emb_dim, cout, true, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout),
            conv2,
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, emb: Var, dropout: f64, mode: &mut Mode<'_>) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, h);
        let e = self.emb.forward(g, emb);
        let h = g.add_channel_vec(h, e);
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let h = match mode {
            Mode::Train(rng) => g.dropout(h, dropout, &mut **rng),
            Mode::Eval => h,
        };
        let h = self.conv2.forward(g, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, x),
            None => x,
        };
        g.add(s, h)
    }
}

#[derive(Clone, Debug)]
struct UpLevel {
    up_conv: Conv2d,
    block: ResBlock,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    embed_in: Linear,
    embed_out: Linear,
    head: Conv2d,
    down: Vec<(ResBlock, Conv2d)>,
    mid: ResBlock,
    up: Vec<UpLevel>,
    tail_norm: GroupNorm,
    tail: Conv2d,
}

impl Denoiser {
    pub fn new<F: Scalar, R: Rng + ?Sized>(config: &DenoiserConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let e = c.gamma_embed_dim;
        let embed_in = Linear::new(store, "denoiser.embed.0", e, e, true, rng);
        let embed_out = Linear::new(store, "denoiser.embed.1", e, e, true, rng);
        let head = Conv2d::new(store, "denoiser.head", c.cond_channels + 3, c.base_channels, 3, 1, rng);
        let mut down = Vec::with_capacity(c.depth);
        let mut ch = c.base_channels;
        for i in 0..c.depth {
            let out = c.level_channels(i);
            let block = ResBlock::new(store, &format!("denoiser.down.{i}.block"), ch, out, e, rng);
            let pool = Conv2d::new(store, &format!("denoiser.down.{i}.pool"), out, out, 3, 2, rng);
            down.push((block, pool));
            ch = out;
        }
        let mid = ResBlock::new(store, "denoiser.mid", ch, ch, e, rng);
        let mut up = Vec::with_capacity(c.depth);
        for i in (0..c.depth).rev() {
            let out = c.level_channels(i);
            let up_conv = Conv2d::new(store, &format!("denoiser.up.{i}.conv"), ch, out, 3, 1, rng);
            let block = ResBlock::new(store, &format!("denoiser.up.{i}.block"), 2 * out, out, e, rng);
            up.push(UpLevel { up_conv, block });
            ch = out;
        }
        let tail_norm = GroupNorm::new(store, "denoiser.tail_norm", ch);
        let tail = Conv2d::new(store, "denoiser.tail", ch, 3, 3, 1, rng);
        Ok(Self { config: config.clone(), embed_in, embed_out, head, down, mid, up, tail_norm, tail })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Accept `[b, cond_channels, h, w]` priors with `[b, 3, h, w]` noisy images.
    pub fn check_inputs(&self, y: &[usize], zt: &[usize]) -> Result<()> {
        let c = &self.config;
        if y.len() != 4 || zt.len() != 4 || y[0] != zt[0] || y[2..] != zt[2..] {
            return Err(Error::Shape(format!("prior {y:?} and noisy image {zt:?} do not align")));
        }
        if y[1] != c.cond_channels || zt[1] != 3 {
            return Err(Error::Shape(format!(
                "expected {} prior channels and 3 image channels, got {} and {}",
                c.cond_channels, y[1], zt[1]
            )));
        }
        let m = c.size_multiple();
        if !zt[2].is_multiple_of(m) || !zt[3].is_multiple_of(m) {
            return Err(Error::Shape(format!("spatial size {}x{} is not a multiple of {m}", zt[2], zt[3])));
        }
        Ok(())
    }

    /// The embedding vector for each noise level, `[b, gamma_embed_dim]`.
    pub fn embed_graph<F: Scalar>(&self, g: &mut Graph<'_, F>, gammas: &[f64]) -> Result<Var> {
        let dim = self.config.gamma_embed_dim;
        let mut feats = Vec::with_capacity(gammas.len() * dim);
        for &gm in gammas {
            feats.extend(gamma_features(gm, dim)?.into_iter().map(F::of));
        }
        let x = g.constant(Tensor::from_vec(&[gammas.len(), dim], feats));
        let h = self.embed_in.forward(g, x);
        let h = g.silu(h);
        Ok(self.embed_out.forward(g, h))
    }

    /// Predicted noise `[b, 3, h, w]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, y: Var, zt: Var, gammas: &[f64], mut mode: Mode<'_>) -> Result<Var> {
        self.check_inputs(g.shape(y), g.shape(zt))?;
        if gammas.len() != g.shape(zt)[0] {
            return Err(Error::Shape(format!("{} noise levels for a batch of {}", gammas.len(), g.shape(zt)[0])));
        }
        let p = self.config.dropout;
        let emb = self.embed_graph(g, gammas)?;
        let emb = g.silu(emb);
        let x = g.concat_channels(y, zt);
        let mut h = self.head.forward(g, x);
        let mut skips = Vec::with_capacity(self.down.len());
        for (block, pool) in &self.down {
            h = block.forward(g, h, emb, p, &mut mode);
            skips.push(h);
            h = pool.forward(g, h);
        }
        h = self.mid.forward(g, h, emb, p, &mut mode);
        for level in &self.up {
            h = g.upsample_nearest2x(h);
            h = level.up_conv.forward(g, h);
            let skip = skips.pop().expect("one skip per level");
            h = g.concat_channels(h, skip);
            h = level.block.forward(g, h, emb, p, &mut mode);
        }
        let h = self.tail_norm.forward(g, h);
        let h = g.silu(h);
        Ok(self.tail.forward(g, h))
    }

    /// Learned noise-level embedding of a single `gamma`.
    pub fn embed_gamma<F: Scalar>(&self, store: &ParamStore<F>, gamma: f64) -> Result<Vec<f64>> {
        let mut g = Graph::inference(store);
        let v = self.embed_graph(&mut g, &[gamma])?;
        Ok(g.value(v).data().iter().map(|x| x.as_f64()).collect())
    }

    /// Single-image noise prediction.
    pub fn predict_noise<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        y: &ImageGrid,
        zt: &ImageGrid,
        gamma: f64,
        mode: Mode<'_>,
    ) -> Result<ImageGrid> {
        let mut g = Graph::inference(store);
        let yv = g.constant(y.to_tensor());
        let zv = g.constant(zt.to_tensor());
        let out = self.forward(&mut g, yv, zv, &[gamma], mode)?;
        let mut imgs = ImageGrid::from_batch_tensor(g.value(out))?;
        Ok(imgs.remove(0))
    }

    /// Eval-mode predictor bound to a parameter store.
    pub fn bind<'a, F: Scalar>(&'a self, store: &'a ParamStore<F>) -> BoundDenoiser<'a, F> {
        BoundDenoiser { net: self, store }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDenoiser<'a, F> {
    net: &'a Denoiser,
    store: &'a ParamStore<F>,
}

impl<F: Scalar> NoisePredictor for BoundDenoiser<'_, F> {
    fn predict_noise(&self, y: &ImageGrid, zt: &ImageGrid, gamma: f64) -> Result<ImageGrid> {
        self.net.predict_noise(self.store, y, zt, gamma, Mode::Eval)
    }
}
