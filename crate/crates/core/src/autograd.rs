//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Nodes
//! are addressed by copyable [`Var`] handles; parameters are borrowed from a
//! [`ParamStore`] rather than copied. [`Graph::backward`] walks the tape in
//! reverse creation order, which is a valid topological order because an op
//! can only reference nodes created before it.

use std::rc::Rc;

use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<F> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    Relu(Var),
    Silu(Var),
    /// Keeps `sigmoid(2u)` from the forward pass.
    Gelu {
        x: Var,
        sg: Vec<F>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    ConcatChannels(Var, Var),
    UpsampleNearest2x(Var),
    Gather {
        x: Var,
        map: Rc<[u32]>,
    },
    ToTokens(Var),
    FromTokens(Var),
    AddChannelVec {
        x: Var,
        v: Var,
    },
    Mean(Var),
    MeanAbs(Var),
}

struct Node<F> {
    value: Option<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every parameter that reached it.
pub struct Grads<F> {
    by_param: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.by_param.get(id.index()).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.by_param.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Global L2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.sq_norm().as_f64()).sum::<f64>().sqrt()
    }

    /// Rescale in place so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let s = F::of(max_norm / norm);
            for g in self.by_param.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }
}

/// A forward computation being recorded.
pub struct Graph<'p, F> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
    track: bool,
}

impl<'p, F: Scalar> Graph<'p, F> {
    /// A graph that records gradient information for `params`.
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()], track: true }
    }

    /// A graph used only for evaluation; nothing requires gradients.
    pub fn inference(params: &'p ParamStore<F>) -> Self {
        let mut g = Self::new(params);
        g.track = false;
        g
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives gradients.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: Some(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// The node for a stored parameter, created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: self.track });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{name}: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "add", |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "sub", |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "mul", |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::of(c);
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// `x @ w + b` where `x` has shape `[.., k]`, `w` is `[k, n]`, `b` is `[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        let k = *tx.shape().last().expect("linear on a scalar");
        assert_eq!(tw.shape().len(), 2, "linear weight must be 2-d");
        assert_eq!(tw.shape()[0], k, "linear: input features {k} vs weight {:?}", tw.shape());
        let n = tw.shape()[1];
        let rows = tx.numel() / k.max(1);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![F::zero(); rows * n];
        if let Some(b) = b {
            let tb = self.value(b);
            assert_eq!(tb.shape(), &[n], "linear bias shape");
            for r in out.chunks_mut(n) {
                r.copy_from_slice(tb.data());
            }
        }
        F::gemm(false, false, rows, n, k, F::one(), tx.data(), tw.data(), F::one(), &mut out);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }, &inputs)
    }

    /// Batched product of 3-d tensors, `op(a[i]) @ op(b[i])`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ba, ra, ca) = self.value(a).dims3();
        let (bb, rb, cb) = self.value(b).dims3();
        assert_eq!(ba, bb, "bmm batch mismatch");
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, k2, "bmm inner dimension mismatch");
        let mut out = vec![F::zero(); ba * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            F::gemm(
                ta,
                tb,
                m,
                n,
                k,
                F::one(),
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                F::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(Tensor::from_vec(&[ba, m, n], out), Op::Bmm { a, b, ta, tb }, &[a, b])
    }

    /// 2-d convolution, NCHW input, weight `[cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let (bs, cin, h, wd) = self.value(x).dims4();
        let (cout, cin2, kh, kw) = self.value(w).dims4();
        assert_eq!(cin, cin2, "conv2d: input has {cin} channels, weight expects {cin2}");
        assert_eq!(kh, kw, "conv2d: square kernels only");
        let geo = ConvGeometry::new(cin, h, wd, kh, spec);
        let (ho, wo) = (geo.ho, geo.wo);
        let mut out = vec![F::zero(); bs * cout * ho * wo];
        let mut col = vec![F::zero(); geo.col_len()];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        for i in 0..bs {
            let xi = &xd[i * cin * h * wd..(i + 1) * cin * h * wd];
            let yi = &mut out[i * cout * ho * wo..(i + 1) * cout * ho * wo];
            if let Some(bias) = bias {
                for (c, plane) in yi.chunks_mut(ho * wo).enumerate() {
                    plane.fill(bias[c]);
                }
            }
            let src = if geo.is_pointwise() {
                xi
            } else {
                geo.im2col(xi, &mut col);
                &col
            };
            F::gemm(false, false, cout, ho * wo, geo.kdim(), F::one(), wdata, src, F::one(), yi);
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::from_vec(&[bs, cout, ho, wo], out), Op::Conv2d { x, w, b, spec }, &inputs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(F::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (F::one() + (-v).exp()));
        self.push(out, Op::Silu(x), &[x])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (F::of(GELU_C), F::of(GELU_A));
        let xv = self.value(x);
        // 0.5 (1 + tanh u) = sigmoid(2u)
        let sg: Vec<F> = xv.data().iter().map(|&v| F::one() / (F::one() + (-(c + c) * (v + a * v * v * v)).exp())).collect();
        let out = Tensor::from_vec(xv.shape(), xv.data().iter().zip(&sg).map(|(&v, &s)| v * s).collect());
        self.push(out, Op::Gelu { x, sg }, &[x])
    }

    /// Group normalisation over NCHW with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (bs, c, h, w) = self.value(x).dims4();
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels into {groups} groups");
        let cg = c / groups;
        let n = cg * h * w;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![F::zero(); xd.len()];
        let mut means = Vec::with_capacity(bs * groups);
        let mut rstds = Vec::with_capacity(bs * groups);
        let inv_n = F::one() / F::of(n as f64);
        for bi in 0..bs {
            for gi in 0..groups {
                let off = (bi * c + gi * cg) * h * w;
                let seg = &xd[off..off + n];
                let mean = seg.iter().copied().sum::<F>() * inv_n;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
                let rstd = F::one() / (var + F::of(eps)).sqrt();
                for cc in 0..cg {
                    let ch = gi * cg + cc;
                    let (gm, bt) = (gd[ch], bd[ch]);
                    let o = off + cc * h * w;
                    for p in o..o + h * w {
                        out[p] = (xd[p] - mean) * rstd * gm + bt;
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let t = Tensor::from_vec(&[bs, c, h, w], out);
        self.push(t, Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds }, &[x, gamma, beta])
    }

    /// Normalise each row of the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Var {
        let tx = self.value(x);
        let d = *tx.shape().last().expect("layer_norm on scalar");
        let rows = tx.numel() / d;
        let gd = gamma.map(|g| self.value(g).data());
        let bd = beta.map(|b| self.value(b).data());
        let mut out = vec![F::zero(); tx.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let inv_d = F::one() / F::of(d as f64);
        for (src, dst) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
            let mean = src.iter().copied().sum::<F>() * inv_d;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rstd = F::one() / (var + F::of(eps)).sqrt();
            for j in 0..d {
                let mut v = (src[j] - mean) * rstd;
                if let Some(g) = gd {
                    v *= g[j];
                }
                if let Some(b) = bd {
                    v += b[j];
                }
                dst[j] = v;
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::from_vec(tx.shape(), out);
        let inputs: Vec<Var> = [Some(x), gamma, beta].into_iter().flatten().collect();
        self.push(t, Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds }, &inputs)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ba, ca, h, w) = self.value(a).dims4();
        let (bb, cb, h2, w2) = self.value(b).dims4();
        assert_eq!((ba, h, w), (bb, h2, w2), "concat_channels: incompatible shapes");
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(ba * (sa + sb));
        for i in 0..ba {
            out.extend_from_slice(&da[i * sa..(i + 1) * sa]);
            out.extend_from_slice(&db[i * sb..(i + 1) * sb]);
        }
        self.push(Tensor::from_vec(&[ba, ca + cb, h, w], out), Op::ConcatChannels(a, b), &[a, b])
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4();
        let xd = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![F::zero(); bs * c * h2 * w2];
        for p in 0..bs * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[y * w2 + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        self.push(Tensor::from_vec(&[bs, c, h2, w2], out), Op::UpsampleNearest2x(x), &[x])
    }

    /// Pick source pixels of an NCHW map: output pixel `p` of the
    /// `out_h x out_w` grid copies input pixel `map[p]`.
    pub fn gather_pixels(&mut self, x: Var, map: Rc<[u32]>, out_h: usize, out_w: usize) -> Var {
        let (bs, c, h, w) = self.value(x).dims4();
        assert_eq!(map.len(), out_h * out_w, "gather map length");
        let xd = self.value(x).data();
        let n_out = out_h * out_w;
        let mut out = vec![F::zero(); bs * c * n_out];
        for p in 0..bs * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * n_out..(p + 1) * n_out];
            for (d, &m) in dst.iter_mut().zip(map.iter()) {
                *d = src[m as usize];
            }
        }
        self.push(Tensor::from_vec(&[bs, c, out_h, out_w], out), Op::Gather { x, map }, &[x])
    }

    /// `[b, c, h, w]` to `[b, h*w, c]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4();
        let out = nchw_to_nlc(self.value(x).data(), bs, c, h * w);
        self.push(Tensor::from_vec(&[bs, h * w, c], out), Op::ToTokens(x), &[x])
    }

    /// `[b, h*w, c]` to `[b, c, h, w]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (bs, n, c) = self.value(x).dims3();
        assert_eq!(n, h * w, "from_tokens: {n} tokens for a {h}x{w} grid");
        let out = nlc_to_nchw(self.value(x).data(), bs, c, n);
        self.push(Tensor::from_vec(&[bs, c, h, w], out), Op::FromTokens(x), &[x])
    }

    /// `x[b, c, :, :] += v[b, c]`.
    pub fn add_channel_vec(&mut self, x: Var, v: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(v).shape(), &[bs, c], "add_channel_vec: vector shape");
        let vd = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for (p, plane) in out.chunks_mut(h * w).enumerate() {
            let add = vd[p];
            for o in plane {
                *o += add;
            }
        }
        self.push(Tensor::from_vec(&[bs, c, h, w], out), Op::AddChannelVec { x, v }, &[x, v])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / F::of(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn mean_abs(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().map(|v| v.abs()).sum::<F>() / F::of(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::MeanAbs(x), &[x])
    }

    /// Inverted dropout with keep-probability `1 - rate`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let scale = F::of(1.0 / keep);
        let n = self.value(x).numel();
        let mask: Vec<F> = (0..n).map(|_| if rng.random::<f64>() < keep { scale } else { F::zero() }).collect();
        let m = self.constant(Tensor::from_vec(self.value(x).shape(), mask));
        self.mul(x, m)
    }

    /// Gradients of the scalar `loss` with respect to all parameters.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut by_param: Vec<Option<Tensor<F>>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, gout, &mut grads, &mut by_param);
        }
        Grads { by_param }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: Tensor<F>, grads: &mut [Option<Tensor<F>>], by_param: &mut [Option<Tensor<F>>]) {
        let mut acc = |v: Var, t: Tensor<F>| accumulate(&mut grads[v.0], t);
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Param(id) => accumulate(&mut by_param[id.index()], g),
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let tb = self.value(*b);
                    acc(*a, zip_map(&g, tb, |x, y| x * y));
                }
                if self.needs(*b) {
                    let ta = self.value(*a);
                    acc(*b, zip_map(&g, ta, |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, g.map(|v| v * c));
            }
            Op::Linear { x, w, b } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.numel() / k.max(1);
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(tx.shape());
                    F::gemm(false, true, rows, k, n, F::one(), gd, tw.data(), F::zero(), dx.data_mut());
                    acc(*x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(&[k, n]);
                    F::gemm(true, false, k, n, rows, F::one(), tx.data(), gd, F::zero(), dw.data_mut());
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![F::zero(); n];
                        for r in gd.chunks(n) {
                            for (d, &v) in db.iter_mut().zip(r) {
                                *d += v;
                            }
                        }
                        acc(*b, Tensor::from_vec(&[n], db));
                    }
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let a_t = self.value(*a);
                let b_t = self.value(*b);
                let (bs, ra, ca) = a_t.dims3();
                let (_, rb, cb) = b_t.dims3();
                let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
                let n = if tb { rb } else { cb };
                let (sa, sb, sc) = (m * k, k * n, m * n);
                if self.needs(*a) {
                    let mut da = Tensor::zeros(a_t.shape());
                    for i in 0..bs {
                        let gi = &gd[i * sc..(i + 1) * sc];
                        let bi = &b_t.data()[i * sb..(i + 1) * sb];
                        let out = &mut da.data_mut()[i * sa..(i + 1) * sa];
                        match (ta, tb) {
                            (false, false) => F::gemm(false, true, m, k, n, F::one(), gi, bi, F::zero(), out),
                            (false, true) => F::gemm(false, false, m, k, n, F::one(), gi, bi, F::zero(), out),
                            (true, false) => F::gemm(false, true, k, m, n, F::one(), bi, gi, F::zero(), out),
                            (true, true) => F::gemm(true, true, k, m, n, F::one(), bi, gi, F::zero(), out),
                        }
                    }
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(b_t.shape());
                    for i in 0..bs {
                        let gi = &gd[i * sc..(i + 1) * sc];
                        let ai = &a_t.data()[i * sa..(i + 1) * sa];
                        let out = &mut db.data_mut()[i * sb..(i + 1) * sb];
                        match (ta, tb) {
                            (false, false) => F::gemm(true, false, k, n, m, F::one(), ai, gi, F::zero(), out),
                            (true, false) => F::gemm(false, false, k, n, m, F::one(), ai, gi, F::zero(), out),
                            (false, true) => F::gemm(true, false, n, k, m, F::one(), gi, ai, F::zero(), out),
                            (true, true) => F::gemm(true, true, n, k, m, F::one(), gi, ai, F::zero(), out),
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let (bs, cin, h, wd) = tx.dims4();
                let (cout, _, k, _) = tw.dims4();
                let geo = ConvGeometry::new(cin, h, wd, k, *spec);
                let hw_out = geo.ho * geo.wo;
                let kdim = geo.kdim();
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let mut dx = need_x.then(|| Tensor::zeros(tx.shape()));
                let mut dw = need_w.then(|| Tensor::zeros(tw.shape()));
                let mut col = vec![F::zero(); geo.col_len()];
                let mut dcol = vec![F::zero(); geo.col_len()];
                let in_len = cin * h * wd;
                for i in 0..bs {
                    let gi = &gd[i * cout * hw_out..(i + 1) * cout * hw_out];
                    let xi = &tx.data()[i * in_len..(i + 1) * in_len];
                    if let Some(dw) = dw.as_mut() {
                        let src = if geo.is_pointwise() {
                            xi
                        } else {
                            geo.im2col(xi, &mut col);
                            &col
                        };
                        F::gemm(false, true, cout, kdim, hw_out, F::one(), gi, src, F::one(), dw.data_mut());
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxi = &mut dx.data_mut()[i * in_len..(i + 1) * in_len];
                        if geo.is_pointwise() {
                            F::gemm(true, false, kdim, hw_out, cout, F::one(), tw.data(), gi, F::zero(), dxi);
                        } else {
                            F::gemm(true, false, kdim, hw_out, cout, F::one(), tw.data(), gi, F::zero(), &mut dcol);
                            geo.col2im_add(&dcol, dxi);
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![F::zero(); cout];
                        for (p, plane) in gd.chunks(hw_out).enumerate() {
                            db[p % cout] += plane.iter().copied().sum::<F>();
                        }
                        acc(*b, Tensor::from_vec(&[cout], db));
                    }
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                acc(*x, zip_map(&g, tx, |gv, xv| if xv > F::zero() { gv } else { F::zero() }));
            }
            Op::Silu(x) => {
                let tx = self.value(*x);
                acc(
                    *x,
                    zip_map(&g, tx, |gv, xv| {
                        let s = F::one() / (F::one() + (-xv).exp());
                        gv * s * (F::one() + xv * (F::one() - s))
                    }),
                );
            }
            Op::Gelu { x, sg } => {
                let tx = self.value(*x);
                let c = F::of(GELU_C);
                let three_a = F::of(3.0 * GELU_A);
                let data = gd
                    .iter()
                    .zip(tx.data())
                    .zip(sg)
                    .map(|((&gv, &xv), &s)| gv * (s + (xv + xv) * s * (F::one() - s) * c * (F::one() + three_a * xv * xv)))
                    .collect();
                acc(*x, Tensor::from_vec(tx.shape(), data));
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let tx = self.value(*x);
                let gmv = self.value(*gamma).data();
                let (bs, c, h, w) = tx.dims4();
                let cg = c / groups;
                let n = cg * h * w;
                let plane = h * w;
                let inv_n = F::one() / F::of(n as f64);
                let mut dx = Tensor::zeros(tx.shape());
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for bi in 0..bs {
                    for gi in 0..*groups {
                        let s = bi * groups + gi;
                        let (mu, rs) = (mean[s], rstd[s]);
                        let off = (bi * c + gi * cg) * plane;
                        let mut sum_dxh = F::zero();
                        let mut sum_dxh_xh = F::zero();
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            let o = off + cc * plane;
                            for p in o..o + plane {
                                let xh = (tx.data()[p] - mu) * rs;
                                let dy = gd[p];
                                dgamma[ch] += dy * xh;
                                dbeta[ch] += dy;
                                let dxh = dy * gmv[ch];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                        }
                        let (m1, m2) = (sum_dxh * inv_n, sum_dxh_xh * inv_n);
                        let dxd = dx.data_mut();
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            let o = off + cc * plane;
                            for p in o..o + plane {
                                let xh = (tx.data()[p] - mu) * rs;
                                let dxh = gd[p] * gmv[ch];
                                dxd[p] = rs * (dxh - m1 - xh * m2);
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    acc(*x, dx);
                }
                if self.needs(*gamma) {
                    acc(*gamma, Tensor::from_vec(&[c], dgamma));
                }
                if self.needs(*beta) {
                    acc(*beta, Tensor::from_vec(&[c], dbeta));
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let tx = self.value(*x);
                let d = *tx.shape().last().unwrap();
                let gmv = gamma.map(|g| self.value(g).data());
                let inv_d = F::one() / F::of(d as f64);
                let mut dx = Tensor::zeros(tx.shape());
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                let mut dxh = vec![F::zero(); d];
                for (r, ((src, gr), out)) in tx.data().chunks(d).zip(gd.chunks(d)).zip(dx.data_mut().chunks_mut(d)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..d {
                        let xh = (src[j] - mu) * rs;
                        dgamma[j] += gr[j] * xh;
                        dbeta[j] += gr[j];
                        dxh[j] = gr[j] * gmv.map_or(F::one(), |g| g[j]);
                        m1 += dxh[j];
                        m2 += dxh[j] * xh;
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        let xh = (src[j] - mu) * rs;
                        out[j] = rs * (dxh[j] - m1 - xh * m2);
                    }
                }
                if self.needs(*x) {
                    acc(*x, dx);
                }
                if let Some(gm) = gamma {
                    if self.needs(*gm) {
                        acc(*gm, Tensor::from_vec(&[d], dgamma));
                    }
                }
                if let Some(bt) = beta {
                    if self.needs(*bt) {
                        acc(*bt, Tensor::from_vec(&[d], dbeta));
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let (bs, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let (sa, sb) = (ca * h * w, cb * h * w);
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(bs * sa);
                    for i in 0..bs {
                        da.extend_from_slice(&gd[i * (sa + sb)..i * (sa + sb) + sa]);
                    }
                    acc(*a, Tensor::from_vec(&[bs, ca, h, w], da));
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(bs * sb);
                    for i in 0..bs {
                        db.extend_from_slice(&gd[i * (sa + sb) + sa..(i + 1) * (sa + sb)]);
                    }
                    acc(*b, Tensor::from_vec(&[bs, cb, h, w], db));
                }
            }
            Op::UpsampleNearest2x(x) => {
                let (bs, c, h, w) = self.value(*x).dims4();
                let w2 = 2 * w;
                let mut dx = vec![F::zero(); bs * c * h * w];
                for p in 0..bs * c {
                    let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..w2 {
                            dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                        }
                    }
                }
                acc(*x, Tensor::from_vec(&[bs, c, h, w], dx));
            }
            Op::Gather { x, map } => {
                let (bs, c, h, w) = self.value(*x).dims4();
                let n_out = map.len();
                let mut dx = vec![F::zero(); bs * c * h * w];
                for p in 0..bs * c {
                    let src = &gd[p * n_out..(p + 1) * n_out];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for (&gv, &m) in src.iter().zip(map.iter()) {
                        dst[m as usize] += gv;
                    }
                }
                acc(*x, Tensor::from_vec(&[bs, c, h, w], dx));
            }
            Op::ToTokens(x) => {
                let (bs, c, h, w) = self.value(*x).dims4();
                let dx = nlc_to_nchw(gd, bs, c, h * w);
                acc(*x, Tensor::from_vec(&[bs, c, h, w], dx));
            }
            Op::FromTokens(x) => {
                let (bs, n, c) = self.value(*x).dims3();
                let dx = nchw_to_nlc(gd, bs, c, n);
                acc(*x, Tensor::from_vec(&[bs, n, c], dx));
            }
            Op::AddChannelVec { x, v } => {
                let (bs, c, h, w) = self.value(*x).dims4();
                if self.needs(*v) {
                    let dv: Vec<F> = gd.chunks(h * w).map(|p| p.iter().copied().sum()).collect();
                    acc(*v, Tensor::from_vec(&[bs, c], dv));
                }
                if self.needs(*x) {
                    acc(*x, g);
                }
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let s = g.item() / F::of(tx.numel() as f64);
                acc(*x, Tensor::full(tx.shape(), s));
            }
            Op::MeanAbs(x) => {
                let tx = self.value(*x);
                let s = g.item() / F::of(tx.numel() as f64);
                acc(
                    *x,
                    tx.map(|v| {
                        if v > F::zero() {
                            s
                        } else if v < F::zero() {
                            -s
                        } else {
                            F::zero()
                        }
                    }),
                );
            }
        }
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Tensor<F>>, t: Tensor<F>) {
    match slot {
        Some(existing) => existing.add_assign(&t),
        None => *slot = Some(t),
    }
}

fn zip_map<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

pub(crate) fn nchw_to_nlc<F: Scalar>(src: &[F], bs: usize, c: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    for b in 0..bs {
        let s = &src[b * c * n..(b + 1) * c * n];
        let d = &mut out[b * c * n..(b + 1) * c * n];
        for ch in 0..c {
            for p in 0..n {
                d[p * c + ch] = s[ch * n + p];
            }
        }
    }
    out
}

pub(crate) fn nlc_to_nchw<F: Scalar>(src: &[F], bs: usize, c: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    for b in 0..bs {
        let s = &src[b * c * n..(b + 1) * c * n];
        let d = &mut out[b * c * n..(b + 1) * c * n];
        for p in 0..n {
            for ch in 0..c {
                d[ch * n + p] = s[p * c + ch];
            }
        }
    }
    out
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(cin: usize, h: usize, w: usize, k: usize, spec: Conv2dSpec) -> Self {
        assert!(spec.stride >= 1, "conv stride must be positive");
        assert!(h + 2 * spec.pad >= k && w + 2 * spec.pad >= k, "conv kernel larger than padded input");
        let ho = (h + 2 * spec.pad - k) / spec.stride + 1;
        let wo = (w + 2 * spec.pad - k) / spec.stride + 1;
        Self { cin, h, w, k, stride: spec.stride, pad: spec.pad, ho, wo }
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_len(&self) -> usize {
        if self.is_pointwise() {
            0
        } else {
            self.kdim() * self.ho * self.wo
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` is in
    /// bounds, as a half-open range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride).min(self.wo);
        let hi = if self.w + self.pad > kx { ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Rows are (channel, ky, kx), columns are output pixels.
    fn im2col<F: Scalar>(&self, x: &[F], col: &mut [F]) {
        let (ho, wo, st) = (self.ho, self.wo, self.stride);
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..ho {
                        let iy = (oy * st + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(F::zero());
                            continue;
                        }
                        let srow = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        drow[..lo].fill(F::zero());
                        drow[hi..].fill(F::zero());
                        if lo < hi {
                            let ix0 = lo * st + kx - self.pad;
                            if st == 1 {
                                drow[lo..hi].copy_from_slice(&srow[ix0..ix0 + hi - lo]);
                            } else {
                                for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                                    *d = srow[ix0 + j * st];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<F: Scalar>(&self, col: &[F], x: &mut [F]) {
        let (ho, wo, st) = (self.ho, self.wo, self.stride);
        for c in 0..self.cin {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &col[row * ho * wo..(row + 1) * ho * wo];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    let ix0 = lo * st + kx - self.pad;
                    for oy in 0..ho {
                        let iy = (oy * st + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let prow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let srow = &src[oy * wo + lo..oy * wo + hi];
                        for (j, &v) in srow.iter().enumerate() {
                            prow[ix0 + j * st] += v;
                        }
                    }
                }
            }
        }
    }
}
