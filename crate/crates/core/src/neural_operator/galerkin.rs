//! Kernel-integral layers over a latent field.
//!
//! The production path is Galerkin-type attention, `Q (K~^T V~) / n`, with
//! `K~` and `V~` layer-normalised per point; it is linear in the number of
//! grid points. [`softmax_kernel_integral`] is the quadratic softmax-kernel
//! form, kept as a reference for small grids.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::nn::{LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Latent features sampled on a `height x width` grid of cell centres in
/// `[-1, 1]^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentField<F> {
    /// `[n_f, d_r]`, row-major over the grid.
    pub values: Tensor<F>,
    pub height: usize,
    pub width: usize,
}

impl<F: Scalar> LatentField<F> {
    pub fn new(values: Tensor<F>, height: usize, width: usize) -> Self {
        assert_eq!(values.shape().len(), 2, "latent values must be [n_f, d_r]");
        assert_eq!(values.shape()[0], height * width, "latent rows must equal the grid size");
        Self { values, height, width }
    }

    pub fn n_points(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    /// `(2 / height, 2 / width)`.
    pub fn cell_size(&self) -> (f64, f64) {
        (2.0 / self.height as f64, 2.0 / self.width as f64)
    }

    /// Centre of grid cell `(row, col)`.
    pub fn coord(&self, row: usize, col: usize) -> (f64, f64) {
        (cell_center(row, self.height), cell_center(col, self.width))
    }
}

pub(crate) fn cell_center(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

/// Plain-tensor weights of one attention block. Projections act on row
/// vectors: `q = phi @ wq`.
#[derive(Clone, Debug)]
pub struct AttentionWeights<F> {
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    /// Affine `(gamma, beta)` of the key and value normalisation; `None`
    /// disables normalisation.
    pub norm_k: Option<(Tensor<F>, Tensor<F>)>,
    pub norm_v: Option<(Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> AttentionWeights<F> {
    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }
}

/// Graph module for Galerkin attention.
#[derive(Clone, Debug)]
pub struct GalerkinAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    norm_k: Option<LayerNorm>,
    norm_v: Option<LayerNorm>,
}

impl GalerkinAttention {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, prefix: &str, dim: usize, rng: &mut R) -> Self {
        // weight variance 1/d keeps the projections at the input scale
        let mut proj = |name: &str, rng: &mut R| {
            let l = Linear::new(store, &format!("{prefix}.{name}"), dim, dim, false, rng);
            for v in store.get_mut(l.weight).data_mut() {
                *v *= F::of(0.5f64.sqrt());
            }
            l
        };
        let wq = proj("wq", rng);
        let wk = proj("wk", rng);
        let wv = proj("wv", rng);
        let norm_k = Some(LayerNorm::new(store, &format!("{prefix}.norm_k"), dim));
        let norm_v = Some(LayerNorm::new(store, &format!("{prefix}.norm_v"), dim));
        Self { wq, wk, wv, norm_k, norm_v }
    }

    /// Register plain weights in `store`.
    pub fn from_weights<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, w: &AttentionWeights<F>) -> Self {
        let dim = w.dim();
        let lin = |store: &mut ParamStore<F>, name: &str, t: &Tensor<F>| {
            assert_eq!(t.shape(), &[dim, dim], "attention weight {name} must be square");
            Linear { weight: store.add(format!("{prefix}.{name}.weight"), t.clone()), bias: None, in_features: dim, out_features: dim }
        };
        let wq = lin(store, "wq", &w.wq);
        let wk = lin(store, "wk", &w.wk);
        let wv = lin(store, "wv", &w.wv);
        let norm = |store: &mut ParamStore<F>, name: &str, p: &Option<(Tensor<F>, Tensor<F>)>| {
            p.as_ref().map(|(g, b)| LayerNorm {
                gamma: store.add(format!("{prefix}.{name}.weight"), g.clone()),
                beta: store.add(format!("{prefix}.{name}.bias"), b.clone()),
            })
        };
        let norm_k = norm(store, "norm_k", &w.norm_k);
        let norm_v = norm(store, "norm_v", &w.norm_v);
        Self { wq, wk, wv, norm_k, norm_v }
    }

    pub fn weights<F: Scalar>(&self, store: &ParamStore<F>) -> AttentionWeights<F> {
        let affine = |n: &Option<LayerNorm>| n.as_ref().map(|n| (store.get(n.gamma).clone(), store.get(n.beta).clone()));
        AttentionWeights {
            wq: store.get(self.wq.weight).clone(),
            wk: store.get(self.wk.weight).clone(),
            wv: store.get(self.wv.weight).clone(),
            norm_k: affine(&self.norm_k),
            norm_v: affine(&self.norm_v),
        }
    }

    /// `phi` is `[b, n, d]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, phi: Var) -> Var {
        let n = g.shape(phi)[1];
        let q = self.wq.forward(g, phi);
        let mut k = self.wk.forward(g, phi);
        let mut v = self.wv.forward(g, phi);
        if let Some(norm) = &self.norm_k {
            k = norm.forward(g, k);
        }
        if let Some(norm) = &self.norm_v {
            v = norm.forward(g, v);
        }
        // d x d summary first: never forms the n x n matrix
        let kv = g.bmm(k, v, true, false);
        let out = g.bmm(q, kv, false, false);
        g.scale(out, 1.0 / n as f64)
    }
}

/// Attention followed by a residual two-layer feed-forward update:
/// `phi + ffn(attn(phi) + phi)`.
#[derive(Clone, Debug)]
pub struct OperatorLayer {
    pub attention: GalerkinAttention,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl OperatorLayer {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, prefix: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        let attention = GalerkinAttention::new(store, &format!("{prefix}.attn"), dim, rng);
        let ffn_in = Linear::new(store, &format!("{prefix}.ffn.0"), dim, hidden, true, rng);
        let ffn_out = Linear::new(store, &format!("{prefix}.ffn.1"), hidden, dim, true, rng);
        // start close to the identity map
        for v in store.get_mut(ffn_out.weight).data_mut() {
            *v *= F::of(0.1);
        }
        Self { attention, ffn_in, ffn_out }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, phi: Var) -> Var {
        let a = self.attention.forward(g, phi);
        let u = g.add(a, phi);
        let h = self.ffn_in.forward(g, u);
        let h = g.gelu(h);
        let h = self.ffn_out.forward(g, h);
        g.add(phi, h)
    }
}

fn field_graph<F: Scalar>(phi: &LatentField<F>, store: &ParamStore<F>, f: impl FnOnce(&mut Graph<'_, F>, Var) -> Var) -> LatentField<F> {
    let mut g = Graph::inference(store);
    let (n, d) = (phi.n_points(), phi.dim());
    let x = g.constant(phi.values.clone().reshape(&[1, n, d]));
    let out = f(&mut g, x);
    let t = g.value(out).clone();
    let d_out = t.shape()[2];
    LatentField::new(t.reshape(&[n, d_out]), phi.height, phi.width)
}

/// Linear-cost Galerkin attention on a single field.
pub fn galerkin_attention<F: Scalar>(phi: &LatentField<F>, w: &AttentionWeights<F>) -> LatentField<F> {
    let mut store = ParamStore::new();
    let attn = GalerkinAttention::from_weights(&mut store, "attn", w);
    field_graph(phi, &store, |g, x| attn.forward(g, x))
}

/// One operator layer applied to a single field.
pub fn operator_layer<F: Scalar>(phi: &LatentField<F>, layer: &OperatorLayer, store: &ParamStore<F>) -> LatentField<F> {
    field_graph(phi, store, |g, x| layer.forward(g, x))
}

/// Softmax-kernel integral, normalised over the query index as the kernel is
/// written: `out(xi) = sum_i softmax_j(<q_j, k_i>/sqrt(d))[xi] (phi_i @ wv)`.
/// Quadratic in the number of points.
pub fn softmax_kernel_integral<F: Scalar>(phi: &LatentField<F>, w: &AttentionWeights<F>) -> LatentField<F> {
    let n = phi.n_points();
    let d = w.dim();
    let q = phi.values.matmul(&w.wq);
    let k = phi.values.matmul(&w.wk);
    let v = phi.values.matmul(&w.wv);
    let mut scores = q.matmul(&k.transpose2());
    let inv = F::of(1.0 / (d as f64).sqrt());
    let s = scores.data_mut();
    for col in 0..n {
        let mut mx = F::neg_infinity();
        for row in 0..n {
            s[row * n + col] *= inv;
            mx = mx.max(s[row * n + col]);
        }
        let mut total = F::zero();
        for row in 0..n {
            let e = (s[row * n + col] - mx).exp();
            s[row * n + col] = e;
            total += e;
        }
        for row in 0..n {
            s[row * n + col] = s[row * n + col] / total;
        }
    }
    LatentField::new(scores.matmul(&v), phi.height, phi.width)
}
