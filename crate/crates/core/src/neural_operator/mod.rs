//! Continuous-scale prior network.
//!
//! An LR image is encoded at its own resolution, lifted onto the target grid
//! (nearest-cell feature lookup plus relative offset and cell size), refined
//! by a stack of Galerkin-attention layers and projected back to RGB. The
//! target grid is `round(lr_size * s)` per axis, so a single set of weights
//! serves every scale.

mod encoder;
mod galerkin;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use encoder::Encoder;
pub use galerkin::{
    galerkin_attention, operator_layer, softmax_kernel_integral, AttentionWeights, GalerkinAttention, LatentField, OperatorLayer,
};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::grid::ImageGrid;
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

use galerkin::cell_center;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    /// Latent feature dimension `d_r`.
    pub latent_dim: usize,
    pub num_layers: usize,
    /// Hidden width of each layer's feed-forward network.
    pub ffn_hidden: usize,
    pub encoder_blocks: usize,
    pub encoder_channels: usize,
    pub encoder_res_scale: f64,
    /// Hidden width of the per-pixel output MLP.
    pub projection_hidden: usize,
    /// Largest training scale `M`; scales are drawn from `(1, M]`.
    pub max_scale: f64,
}

impl OperatorConfig {
    pub fn toy() -> Self {
        Self {
            latent_dim: 32,
            num_layers: 2,
            ffn_hidden: 32,
            encoder_blocks: 4,
            encoder_channels: 32,
            encoder_res_scale: 1.0,
            projection_hidden: 64,
            max_scale: 8.0,
        }
    }

    pub fn paper() -> Self {
        Self {
            latent_dim: 256,
            num_layers: 2,
            ffn_hidden: 256,
            encoder_blocks: 16,
            encoder_channels: 64,
            encoder_res_scale: 1.0,
            projection_hidden: 256,
            max_scale: 8.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 || self.num_layers < 1 || self.ffn_hidden < 1 {
            return Err(Error::Config("operator: latent_dim, num_layers and ffn_hidden must be >= 1".into()));
        }
        if self.encoder_channels < 1 || self.projection_hidden < 1 {
            return Err(Error::Config("operator: encoder_channels and projection_hidden must be >= 1".into()));
        }
        if !(self.max_scale > 1.0) || !self.max_scale.is_finite() {
            return Err(Error::Config(format!("operator: max_scale {} must exceed 1", self.max_scale)));
        }
        if !self.encoder_res_scale.is_finite() {
            return Err(Error::Config("operator: encoder_res_scale must be finite".into()));
        }
        Ok(())
    }
}

/// `round(n * s)` with halves rounded up.
pub fn scaled_size(n: usize, s: f64) -> usize {
    (n as f64 * s + 0.5).floor() as usize
}

/// Geometry of the lift from an `lr_h x lr_w` grid to `out_h x out_w`.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftGeometry {
    pub lr: (usize, usize),
    pub out: (usize, usize),
    /// Nearest LR pixel of every target pixel.
    pub nearest: Rc<[u32]>,
    /// Per target pixel: offset to the nearest LR centre and the cell size,
    /// both in units of half an LR pixel. `[n_f, 4]`.
    pub coord_features: Vec<f64>,
}

impl LiftGeometry {
    pub fn new(lr_h: usize, lr_w: usize, out_h: usize, out_w: usize) -> Self {
        let nearest_1d = |n_in: usize, n_out: usize| -> Vec<(usize, f64)> {
            (0..n_out)
                .map(|o| {
                    let c = cell_center(o, n_out);
                    let i = (((c + 1.0) * 0.5 * n_in as f64).floor() as usize).min(n_in - 1);
                    (i, (c - cell_center(i, n_in)) * n_in as f64 * 0.5)
                })
                .collect()
        };
        let ys = nearest_1d(lr_h, out_h);
        let xs = nearest_1d(lr_w, out_w);
        let (cell_y, cell_x) = (2.0 / out_h as f64 * lr_h as f64 * 0.5, 2.0 / out_w as f64 * lr_w as f64 * 0.5);
        let mut nearest = Vec::with_capacity(out_h * out_w);
        let mut coord_features = Vec::with_capacity(out_h * out_w * 4);
        for &(iy, dy) in &ys {
            for &(ix, dx) in &xs {
                nearest.push((iy * lr_w + ix) as u32);
                coord_features.extend_from_slice(&[dy, dx, cell_y, cell_x]);
            }
        }
        Self { lr: (lr_h, lr_w), out: (out_h, out_w), nearest: Rc::from(nearest), coord_features }
    }
}

/// Encoder, lift, operator layers and output MLP, all registered in one
/// [`ParamStore`] under the `operator.` prefix.
#[derive(Clone, Debug)]
pub struct NeuralOperator {
    config: OperatorConfig,
    encoder: Encoder,
    lift_features: Linear,
    lift_coords: Linear,
    layers: Vec<OperatorLayer>,
    proj_in: Linear,
    proj_out: Linear,
}

impl NeuralOperator {
    pub fn new<F: Scalar, R: Rng + ?Sized>(config: &OperatorConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let encoder = Encoder::new(store, "operator.encoder", 3, c.encoder_channels, c.encoder_blocks, c.encoder_res_scale, rng);
        let lift_features = Linear::new(store, "operator.lift.features", c.encoder_channels, c.latent_dim, false, rng);
        let lift_coords = Linear::new(store, "operator.lift.coords", 4, c.latent_dim, true, rng);
        let layers = (0..c.num_layers)
            .map(|i| OperatorLayer::new(store, &format!("operator.layers.{i}"), c.latent_dim, c.ffn_hidden, rng))
            .collect();
        let proj_in = Linear::new(store, "operator.proj.0", c.latent_dim, c.projection_hidden, true, rng);
        let proj_out = Linear::new(store, "operator.proj.1", c.projection_hidden, 3, true, rng);
        Ok(Self { config: config.clone(), encoder, lift_features, lift_coords, layers, proj_in, proj_out })
    }

    pub fn config(&self) -> &OperatorConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn layers(&self) -> &[OperatorLayer] {
        &self.layers
    }

    /// LR features `[b, c, h, w]`.
    pub fn encode_graph<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        self.encoder.forward(g, x)
    }

    /// Latent tokens `[b, n_f, d_r]` on the target grid.
    pub fn lift_graph<F: Scalar>(&self, g: &mut Graph<'_, F>, features: Var, geo: &LiftGeometry) -> Var {
        let (b, _, h, w) = g.value(features).dims4();
        assert_eq!((h, w), geo.lr, "lift geometry does not match the feature map");
        // the lookup commutes with the per-pixel linear map, so project at LR
        let tokens = g.to_tokens(features);
        let projected = self.lift_features.forward(g, tokens);
        let projected = g.from_tokens(projected, h, w);
        let (oh, ow) = geo.out;
        let picked = g.gather_pixels(projected, geo.nearest.clone(), oh, ow);
        let picked = g.to_tokens(picked);
        let n = oh * ow;
        let mut coords = Vec::with_capacity(b * n * 4);
        for _ in 0..b {
            coords.extend(geo.coord_features.iter().map(|&v| F::of(v)));
        }
        let coords = g.constant(Tensor::from_vec(&[b, n, 4], coords));
        let coords = self.lift_coords.forward(g, coords);
        g.add(picked, coords)
    }

    /// Layers and projection: `[b, n_f, d_r]` tokens to a `[b, 3, h, w]` image.
    pub fn decode_graph<F: Scalar>(&self, g: &mut Graph<'_, F>, phi: Var, out: (usize, usize)) -> Var {
        let mut phi = phi;
        for layer in &self.layers {
            phi = layer.forward(g, phi);
        }
        let h = self.proj_in.forward(g, phi);
        let h = g.gelu(h);
        let rgb = self.proj_out.forward(g, h);
        g.from_tokens(rgb, out.0, out.1)
    }

    /// Full forward pass on a `[b, 3, h, w]` batch to an explicit grid.
    pub fn forward_to<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, out: (usize, usize)) -> Var {
        let (_, _, h, w) = g.value(x).dims4();
        let geo = LiftGeometry::new(h, w, out.0, out.1);
        let feats = self.encode_graph(g, x);
        let phi = self.lift_graph(g, feats, &geo);
        self.decode_graph(g, phi, out)
    }

    /// Check `s` against `(1, M]`.
    pub fn check_scale(&self, s: f64) -> Result<()> {
        if s > 1.0 && s <= self.config.max_scale {
            Ok(())
        } else {
            Err(invalid(format!("scale {s} outside (1, {}]", self.config.max_scale)))
        }
    }

    /// Evaluate the prior for one LR image at scale `s` (training range only).
    pub fn apply<F: Scalar>(&self, store: &ParamStore<F>, x: &ImageGrid, s: f64) -> Result<ImageGrid> {
        self.check_scale(s)?;
        self.apply_unchecked(store, x, s)
    }

    /// Same as [`NeuralOperator::apply`] for any `s >= 1`, including scales
    /// beyond the training range.
    pub fn apply_unchecked<F: Scalar>(&self, store: &ParamStore<F>, x: &ImageGrid, s: f64) -> Result<ImageGrid> {
        if !(s >= 1.0) || !s.is_finite() {
            return Err(invalid(format!("scale {s} must be >= 1")));
        }
        let out = (scaled_size(x.height(), s), scaled_size(x.width(), s));
        self.apply_to_size(store, x, out)
    }

    pub fn apply_to_size<F: Scalar>(&self, store: &ParamStore<F>, x: &ImageGrid, out: (usize, usize)) -> Result<ImageGrid> {
        if x.channels() != 3 {
            return Err(Error::Shape(format!("operator expects RGB input, got {} channels", x.channels())));
        }
        let mut g = Graph::inference(store);
        let xv = g.constant(x.to_tensor());
        let y = self.forward_to(&mut g, xv, out);
        let mut imgs = ImageGrid::from_batch_tensor(g.value(y))?;
        Ok(imgs.remove(0))
    }

    /// Encoder features of one image, `[1, c, h, w]`.
    pub fn encode<F: Scalar>(&self, store: &ParamStore<F>, x: &ImageGrid) -> Tensor<F> {
        let mut g = Graph::inference(store);
        let xv = g.constant(x.to_tensor());
        let f = self.encode_graph(&mut g, xv);
        g.value(f).clone()
    }

    /// Lift a `[1, c, h, w]` feature map for scale `s`.
    pub fn lift<F: Scalar>(&self, store: &ParamStore<F>, features: &Tensor<F>, s: f64) -> Result<LatentField<F>> {
        if !(s >= 1.0) || !s.is_finite() {
            return Err(invalid(format!("scale {s} must be >= 1")));
        }
        let (b, c, h, w) = features.dims4();
        if b != 1 || c != self.config.encoder_channels {
            return Err(Error::Shape(format!("lift expects [1, {}, h, w], got {:?}", self.config.encoder_channels, features.shape())));
        }
        let out = (scaled_size(h, s), scaled_size(w, s));
        let geo = LiftGeometry::new(h, w, out.0, out.1);
        let mut g = Graph::inference(store);
        let fv = g.constant(features.clone());
        let phi = self.lift_graph(&mut g, fv, &geo);
        let t = g.value(phi).clone();
        let d = self.config.latent_dim;
        Ok(LatentField::new(t.reshape(&[out.0 * out.1, d]), out.0, out.1))
    }
}
