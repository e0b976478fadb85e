//! Independent reference computations shared by the integration tests and
//! the acceptance harness. Nothing here calls the code it checks.
#![allow(dead_code)]

use neurop_diff::autograd::Graph;
use neurop_diff::denoiser::{Denoiser, DenoiserConfig, Mode};
use neurop_diff::neural_operator::{AttentionWeights, NeuralOperator, OperatorConfig};
use neurop_diff::params::ParamStore;
use neurop_diff::tensor::Tensor;
use neurop_diff::ImageGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(t: &Tensor<f64>) -> Rows {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

pub fn max_abs_rows(a: &Rows, b: &Rows) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn project(phi: &Rows, w: &Tensor<f64>) -> Rows {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    phi.iter().map(|row| (0..dout).map(|o| (0..din).map(|i| row[i] * w.data()[i * dout + o]).sum()).collect()).collect()
}

fn layer_norm(rows: &Rows, affine: &Option<(Tensor<f64>, Tensor<f64>)>) -> Rows {
    let Some((g, b)) = affine else { return rows.clone() };
    rows.iter()
        .map(|r| {
            let d = r.len() as f64;
            let m = r.iter().sum::<f64>() / d;
            let v = r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d;
            r.iter().enumerate().map(|(j, x)| (x - m) / (v + 1e-5).sqrt() * g.data()[j] + b.data()[j]).collect()
        })
        .collect()
}

/// Galerkin attention evaluated in the quadratic order `(Q K~^T) V~ / n`.
pub fn galerkin_quadratic(phi: &Rows, w: &AttentionWeights<f64>) -> Rows {
    let n = phi.len();
    let q = project(phi, &w.wq);
    let k = layer_norm(&project(phi, &w.wk), &w.norm_k);
    let v = layer_norm(&project(phi, &w.wv), &w.norm_v);
    let d = v[0].len();
    let scores: Rows = q.iter().map(|qi| k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum()).collect()).collect();
    scores.iter().map(|s| (0..d).map(|c| (0..n).map(|j| s[j] * v[j][c]).sum::<f64>() / n as f64).collect()).collect()
}

/// Softmax kernel integral by explicit loops: the weight of point `i` at
/// query `xi` is `exp(<q_xi, k_i>/sqrt(d)) / sum_j exp(<q_j, k_i>/sqrt(d))`.
pub fn softmax_loop(phi: &Rows, w: &AttentionWeights<f64>) -> Rows {
    let n = phi.len();
    let d = w.wq.shape()[0];
    let at = |m: &Tensor<f64>, r: usize, c: usize| m.data()[r * d + c];
    let proj = |m: &Tensor<f64>, p: usize, c: usize| {
        let mut s = 0.0;
        for i in 0..d {
            s += phi[p][i] * at(m, i, c);
        }
        s
    };
    let dot = |a: usize, b: usize| {
        let mut s = 0.0;
        for c in 0..d {
            s += proj(&w.wq, a, c) * proj(&w.wk, b, c);
        }
        s / (d as f64).sqrt()
    };
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            denom += dot(j, i).exp();
        }
        for (xi, row) in out.iter_mut().enumerate() {
            let weight = dot(xi, i).exp() / denom;
            for (c, slot) in row.iter_mut().enumerate() {
                *slot += weight * proj(&w.wv, i, c);
            }
        }
    }
    out
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor<f64> {
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| std * (2.0 * rng.random::<f64>() - 1.0) * 3f64.sqrt()).collect())
}

pub fn random_weights<R: Rng>(d: usize, normalise: bool, rng: &mut R) -> AttentionWeights<f64> {
    let s = 1.0 / (d as f64).sqrt();
    let affine = |rng: &mut R| {
        normalise.then(|| {
            let g = Tensor::from_vec(&[d], (0..d).map(|_| 0.5 + rng.random::<f64>()).collect());
            let b = Tensor::from_vec(&[d], (0..d).map(|_| rng.random::<f64>() - 0.5).collect());
            (g, b)
        })
    };
    AttentionWeights {
        wq: random_matrix(d, d, s, rng),
        wk: random_matrix(d, d, s, rng),
        wv: random_matrix(d, d, s, rng),
        norm_k: affine(rng),
        norm_v: affine(rng),
    }
}

/// PSNR from the textbook definition on `[0, 1]` pixel values.
pub fn psnr_oracle(a: &ImageGrid, b: &ImageGrid) -> f64 {
    let n = a.values().len() as f64;
    let mse: f64 = a.values().iter().zip(b.values()).map(|(x, y)| ((x - y) / 2.0).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        100.0
    } else {
        (-10.0 * mse.log10()).min(100.0)
    }
}

/// SSIM with a full 2-D 11x11 Gaussian window (sigma 1.5) evaluated at
/// every fully covered position, on the channel-mean image in `[0, 1]`.
pub fn ssim_oracle(a: &ImageGrid, b: &ImageGrid) -> f64 {
    let (c, h, w) = a.dims();
    let gray = |img: &ImageGrid| -> Vec<f64> {
        (0..h * w).map(|p| (0..c).map(|ch| (img.values()[ch * h * w + p] + 1.0) / 2.0).sum::<f64>() / c as f64).collect()
    };
    let (ga, gb) = (gray(a), gray(b));
    let mut win = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0.0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, row) in win.iter().enumerate() {
                for (j, &k) in row.iter().enumerate() {
                    let k = k / total;
                    let (p, q) = (ga[(y + i) * w + x + j], gb[(y + i) * w + x + j]);
                    ma += k * p;
                    mb += k * q;
                    saa += k * p * p;
                    sbb += k * q * q;
                    sab += k * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    acc / count
}

/// Posterior mean and variance of `z_{t-1}` from the prior
/// `N(sqrt(g_prev) z0, 1 - g_prev)` and the likelihood
/// `N(z_t; sqrt(a) z_{t-1}, 1 - a)`, by quadrature of the unnormalised
/// density on a grid around its mode.
pub fn bayes_posterior(z0: f64, zt: f64, a: f64, g_prev: f64) -> (f64, f64) {
    let log_density = |x: f64| {
        let p = (x - g_prev.sqrt() * z0).powi(2) / (1.0 - g_prev);
        let l = (zt - a.sqrt() * x).powi(2) / (1.0 - a);
        -0.5 * (p + l)
    };
    // the log density is quadratic, so a Newton step from anywhere lands on
    // the mode; its curvature gives the scale of the grid
    let h = 1e-3;
    let d1 = (log_density(h) - log_density(-h)) / (2.0 * h);
    let d2 = (log_density(h) - 2.0 * log_density(0.0) + log_density(-h)) / (h * h);
    let mode = -d1 / d2;
    let sd = (-1.0 / d2).sqrt();
    let n = 4001;
    let (lo, step) = (mode - 14.0 * sd, 28.0 * sd / (n - 1) as f64);
    let peak = log_density(mode);
    let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let x = lo + step * i as f64;
        let wgt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let p = wgt * (log_density(x) - peak).exp();
        m0 += p;
        m1 += p * (x - mode);
        m2 += p * (x - mode) * (x - mode);
    }
    let mean_off = m1 / m0;
    (mode + mean_off, m2 / m0 - mean_off * mean_off)
}

/// Central-difference check of `grads` for the scalar `loss` at `probes`
/// entries: every tensor at least once, the rest drawn at random. Returns the
/// largest relative error.
pub fn gradient_check(
    store: &mut ParamStore<f64>,
    grads: &[Tensor<f64>],
    loss: impl Fn(&ParamStore<f64>) -> f64,
    probes: usize,
    seed: u64,
) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    let mut picks: Vec<(usize, usize)> = ids.iter().enumerate().map(|(k, id)| (k, rng.random_range(0..store.get(*id).numel()))).collect();
    let total: usize = ids.iter().map(|id| store.get(*id).numel()).sum();
    while picks.len() < probes {
        let mut flat = rng.random_range(0..total);
        for (k, id) in ids.iter().enumerate() {
            let n = store.get(*id).numel();
            if flat < n {
                picks.push((k, flat));
                break;
            }
            flat -= n;
        }
    }
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for &(k, j) in &picks {
        let id = ids[k];
        let orig = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = orig + h;
        let up = loss(store);
        store.get_mut(id).data_mut()[j] = orig - h;
        let down = loss(store);
        store.get_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[k].data()[j];
        let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(err);
    }
    (worst, picks.len())
}

pub fn collect_grads(store: &ParamStore<f64>, grads: &neurop_diff::autograd::Grads<f64>) -> Vec<Tensor<f64>> {
    store.ids().map(|id| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))).collect()
}

pub fn grad_operator_config() -> OperatorConfig {
    OperatorConfig {
        latent_dim: 8,
        num_layers: 1,
        ffn_hidden: 8,
        encoder_blocks: 1,
        encoder_channels: 4,
        encoder_res_scale: 1.0,
        projection_hidden: 8,
        max_scale: 8.0,
    }
}

/// Largest relative gradient error of the L1 loss of a 1-layer, `d_r = 8`
/// operator on an 8x8 input at scale 2, and the number of probed entries.
pub fn operator_gradient_check(probes: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let net = NeuralOperator::new(&grad_operator_config(), &mut store, &mut rng).unwrap();
    // move biases and norms off their initial values so every path is live
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += 0.1 * (rng.random::<f64>() - 0.5);
        }
    }
    let x = ImageGrid::randn(3, 8, 8, &mut rng).clamp(-1.0, 1.0).to_tensor::<f64>();
    let target = ImageGrid::randn(3, 16, 16, &mut rng).clamp(-1.0, 1.0).to_tensor::<f64>();
    let loss = |store: &ParamStore<f64>| {
        let mut g = Graph::new(store);
        let xv = g.constant(x.clone());
        let tv = g.constant(target.clone());
        let out = net.forward_to(&mut g, xv, (16, 16));
        let d = g.sub(out, tv);
        let l = g.mean_abs(d);
        (g.value(l).item(), g.backward(l))
    };
    let grads = collect_grads(&store, &loss(&store).1);
    gradient_check(&mut store, &grads, |s| loss(s).0, probes, seed + 1)
}

/// Same check for a depth-2, 8-channel denoiser on a batch of two 16x16
/// inputs with different noise levels.
pub fn denoiser_gradient_check(probes: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DenoiserConfig { base_channels: 8, depth: 2, dropout: 0.0, gamma_embed_dim: 8, cond_channels: 3 };
    let mut store = ParamStore::<f64>::new();
    let net = Denoiser::new(&cfg, &mut store, &mut rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += 0.1 * (rng.random::<f64>() - 0.5);
        }
    }
    let batch = |rng: &mut ChaCha8Rng| {
        ImageGrid::batch_tensor::<f64>(&[ImageGrid::randn(3, 16, 16, rng), ImageGrid::randn(3, 16, 16, rng)]).unwrap()
    };
    let (y, z, eps) = (batch(&mut rng), batch(&mut rng), batch(&mut rng));
    let gammas = [0.3, 0.97];
    let loss = |store: &ParamStore<f64>| {
        let mut g = Graph::new(store);
        let (yv, zv, ev) = (g.constant(y.clone()), g.constant(z.clone()), g.constant(eps.clone()));
        let out = net.forward(&mut g, yv, zv, &gammas, Mode::Eval).unwrap();
        let d = g.sub(out, ev);
        let l = g.mean_abs(d);
        (g.value(l).item(), g.backward(l))
    };
    let grads = collect_grads(&store, &loss(&store).1);
    gradient_check(&mut store, &grads, |s| loss(s).0, probes, seed + 1)
}
