//! Forward noising, the closed-form posterior and the conditioned reverse
//! sampler.
//!
//! The forward chain is `z_t = sqrt(alpha_t) z_{t-1} + sqrt(1 - alpha_t) eps`
//! with marginal `z_t = sqrt(gamma_t) z_0 + sqrt(1 - gamma_t) eps`. The
//! reverse update divides by `sqrt(alpha_t)`: that is the form which inverts
//! the marginal exactly on the final step, and keeps the chain bounded.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::grid::ImageGrid;
use crate::schedule::{InferencePlan, NoiseSchedule, ReverseSegment};

/// Anything that predicts the forward-process noise from `(y, z_t, gamma)`.
pub trait NoisePredictor {
    fn predict_noise(&self, y: &ImageGrid, zt: &ImageGrid, gamma: f64) -> Result<ImageGrid>;
}

impl<T> NoisePredictor for T
where
    T: Fn(&ImageGrid, &ImageGrid, f64) -> Result<ImageGrid>,
{
    fn predict_noise(&self, y: &ImageGrid, zt: &ImageGrid, gamma: f64) -> Result<ImageGrid> {
        self(y, zt, gamma)
    }
}

/// One step of the forward chain.
pub fn forward_step(z_prev: &ImageGrid, alpha: f64, eps: &ImageGrid) -> Result<ImageGrid> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    z_prev.axpby(alpha.sqrt(), eps, (1.0 - alpha).sqrt())
}

/// Sample of `q(z_t | z_0)` given the noise `eps`.
pub fn forward_marginal(z0: &ImageGrid, gamma: f64, eps: &ImageGrid) -> Result<ImageGrid> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid(format!("gamma {gamma} outside (0, 1]")));
    }
    z0.axpby(gamma.sqrt(), eps, (1.0 - gamma).sqrt())
}

/// Mean and variance of `q(z_{t-1} | z_0, z_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu: ImageGrid,
    pub sigma2: f64,
}

/// Scalar coefficients `(c0, ct, sigma2)` with `mu = c0 z_0 + ct z_t`.
pub fn posterior_coefficients(schedule: &NoiseSchedule, t: usize) -> Result<(f64, f64, f64)> {
    if t < 1 || t > schedule.steps() {
        return Err(invalid(format!("timestep {t} outside 1..={}", schedule.steps())));
    }
    let (a, g, g_prev) = (schedule.alpha(t), schedule.gamma(t), schedule.gamma(t - 1));
    let denom = 1.0 - g;
    if denom <= 0.0 {
        return Err(Error::Numeric(format!("gamma_{t} = 1 makes the posterior undefined")));
    }
    let c0 = g_prev.sqrt() * (1.0 - a) / denom;
    let ct = a.sqrt() * (1.0 - g_prev) / denom;
    let sigma2 = (1.0 - g_prev) * (1.0 - a) / denom;
    Ok((c0, ct, sigma2))
}

pub fn posterior_params(z0: &ImageGrid, zt: &ImageGrid, schedule: &NoiseSchedule, t: usize) -> Result<PosteriorParams> {
    let (c0, ct, sigma2) = posterior_coefficients(schedule, t)?;
    Ok(PosteriorParams { mu: z0.axpby(c0, zt, ct)?, sigma2 })
}

/// A noised training example.
#[derive(Clone, Debug)]
pub struct NoisedSample {
    pub gamma: f64,
    pub t: usize,
    pub eps: ImageGrid,
    pub zt: ImageGrid,
}

/// Draw `(gamma, t)`, the noise, and form `z_t`.
pub fn noised_sample<R: Rng + ?Sized>(schedule: &NoiseSchedule, z0: &ImageGrid, rng: &mut R) -> Result<NoisedSample> {
    let (gamma, t) = schedule.sample_gamma(rng);
    let (c, h, w) = z0.dims();
    let eps = ImageGrid::randn(c, h, w, rng);
    let zt = forward_marginal(z0, gamma, &eps)?;
    Ok(NoisedSample { gamma, t, eps, zt })
}

/// Mean absolute error between the predicted and the true noise for one
/// freshly drawn noise level.
pub fn training_step_loss<P, R>(predictor: &P, y: &ImageGrid, z0: &ImageGrid, schedule: &NoiseSchedule, rng: &mut R) -> Result<f64>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    if (y.height(), y.width()) != (z0.height(), z0.width()) {
        return Err(Error::Shape(format!("prior is {}x{}, target is {}x{}", y.height(), y.width(), z0.height(), z0.width())));
    }
    let s = noised_sample(schedule, z0, rng)?;
    let pred = predictor.predict_noise(y, &s.zt, s.gamma)?;
    pred.check_same_shape(&s.eps, "predicted noise")?;
    let n = pred.values().len() as f64;
    Ok(pred.values().iter().zip(s.eps.values()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// The reverse update over one (possibly collapsed) segment:
/// `(z_t - (1 - a) / sqrt(1 - gamma_t) * eps_hat) / sqrt(a) + sqrt(1 - a) * noise`.
pub fn reverse_update(eps_hat: &ImageGrid, zt: &ImageGrid, seg: &ReverseSegment, noise: Option<&ImageGrid>) -> Result<ImageGrid> {
    let a = seg.alpha;
    let inv_sqrt_a = 1.0 / a.sqrt();
    let coef = (1.0 - a) / (1.0 - seg.gamma).sqrt();
    let mean = zt.axpby(inv_sqrt_a, eps_hat, -coef * inv_sqrt_a)?;
    match noise {
        Some(e) if seg.t_next > 0 => mean.axpby(1.0, e, (1.0 - a).sqrt()),
        _ => Ok(mean),
    }
}

/// Single-step reverse update from `t` to `t - 1`. Noise is ignored at
/// `t = 1`.
pub fn reverse_step(
    eps_hat: &ImageGrid,
    zt: &ImageGrid,
    schedule: &NoiseSchedule,
    t: usize,
    noise: Option<&ImageGrid>,
) -> Result<ImageGrid> {
    if t < 1 || t > schedule.steps() {
        return Err(invalid(format!("timestep {t} outside 1..={}", schedule.steps())));
    }
    let seg = ReverseSegment { t, t_next: t - 1, alpha: schedule.alpha(t), gamma: schedule.gamma(t), gamma_next: schedule.gamma(t - 1) };
    reverse_update(eps_hat, zt, &seg, noise)
}

/// [`reverse_update`] written through the implied clean image
/// `x0 = (z_t - sqrt(1 - gamma_t) eps_hat) / sqrt(gamma_t)`, which is clamped
/// to `[-1, 1]` before the posterior mean
/// `sqrt(gamma_next) (1 - a) / (1 - gamma_t) x0 + sqrt(a) (1 - gamma_next) / (1 - gamma_t) z_t`
/// is formed. The added noise has the posterior variance
/// `(1 - gamma_next) / (1 - gamma_t) (1 - a)`.
pub fn reverse_update_clipped(eps_hat: &ImageGrid, zt: &ImageGrid, seg: &ReverseSegment, noise: Option<&ImageGrid>) -> Result<ImageGrid> {
    let (a, g, g_next) = (seg.alpha, seg.gamma, seg.gamma_next);
    if !(g > 0.0 && g < 1.0) {
        return Err(Error::Numeric(format!("gamma {g} outside (0, 1) at t = {}", seg.t)));
    }
    let x0 = zt.axpby(1.0 / g.sqrt(), eps_hat, -((1.0 - g) / g).sqrt())?.clamp(-1.0, 1.0);
    let mean = x0.axpby(g_next.sqrt() * (1.0 - a) / (1.0 - g), zt, a.sqrt() * (1.0 - g_next) / (1.0 - g))?;
    match noise {
        Some(e) if seg.t_next > 0 => mean.axpby(1.0, e, ((1.0 - g_next) / (1.0 - g) * (1.0 - a)).sqrt()),
        _ => Ok(mean),
    }
}

/// Ancestral sampling along `plan`, conditioned on the prior `y`, using
/// [`reverse_update_clipped`]. The returned image has three channels at
/// `y`'s resolution and is clamped to `[-1, 1]`.
pub fn sample<P, R>(predictor: &P, y: &ImageGrid, plan: &InferencePlan, rng: &mut R) -> Result<ImageGrid>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    Ok(run_chain(predictor, y, plan, rng, reverse_update_clipped)?.clamp(-1.0, 1.0))
}

/// Sampling with the plain [`reverse_update`]: no clamp anywhere.
pub fn sample_unclamped<P, R>(predictor: &P, y: &ImageGrid, plan: &InferencePlan, rng: &mut R) -> Result<ImageGrid>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    run_chain(predictor, y, plan, rng, reverse_update)
}

type Update = fn(&ImageGrid, &ImageGrid, &ReverseSegment, Option<&ImageGrid>) -> Result<ImageGrid>;

fn run_chain<P, R>(predictor: &P, y: &ImageGrid, plan: &InferencePlan, rng: &mut R, update: Update) -> Result<ImageGrid>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let (h, w) = (y.height(), y.width());
    let mut z = ImageGrid::randn(3, h, w, rng);
    for seg in plan.segments() {
        let eps_hat = predictor.predict_noise(y, &z, seg.gamma)?;
        let noise = (seg.t_next > 0).then(|| ImageGrid::randn(3, h, w, rng));
        z = update(&eps_hat, &z, &seg, noise.as_ref())?;
    }
    if z.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sampler produced non-finite values".into()));
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> ImageGrid {
        ImageGrid::filled(1, 1, 1, v)
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleSpec::LinearBeta { steps: 100, beta_start: 1e-4, beta_end: 0.05 }).unwrap()
    }

    #[test]
    fn forward_step_coefficients() {
        let e = ImageGrid::new(1, 1, 2, vec![0.3, -1.2]).unwrap();
        let out = forward_step(&ImageGrid::zeros(1, 1, 2), 0.75, &e).unwrap();
        assert!(out.max_abs_diff(&e.scaled(0.5)) < 1e-15);
        let z = ImageGrid::new(1, 1, 2, vec![0.8, -0.1]).unwrap();
        let near = forward_step(&z, 1.0 - 1e-12, &e).unwrap();
        assert!(near.max_abs_diff(&z) < 1e-5);
        assert!(forward_step(&z, 1.0, &e).is_err());
        assert!(forward_step(&z, 0.5, &scalar(1.0)).is_err());
    }

    #[test]
    fn forward_marginal_coefficients() {
        let z = ImageGrid::new(1, 1, 2, vec![0.8, -0.4]).unwrap();
        let e = ImageGrid::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(forward_marginal(&z, 1.0, &e).unwrap(), z);
        let out = forward_marginal(&z, 0.25, &e).unwrap();
        let want = z.axpby(0.5, &e, 0.75f64.sqrt()).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-15);
        assert!(forward_marginal(&z, 0.0, &e).is_err());
        assert!(forward_marginal(&z, 1.5, &e).is_err());
    }

    #[test]
    fn posterior_collapses_at_first_step() {
        let s = sched();
        let z0 = scalar(0.42);
        let zt = scalar(-1.3);
        let p = posterior_params(&z0, &zt, &s, 1).unwrap();
        assert_eq!(p.sigma2, 0.0);
        assert!((p.mu.values()[0] - 0.42).abs() < 1e-12);
        assert!(posterior_params(&z0, &zt, &s, 0).is_err());
        assert!(posterior_params(&z0, &zt, &s, 101).is_err());
    }

    #[test]
    fn posterior_mean_is_linear() {
        let s = sched();
        let a = posterior_params(&scalar(0.3), &scalar(-0.7), &s, 17).unwrap();
        let b = posterior_params(&scalar(0.6), &scalar(-1.4), &s, 17).unwrap();
        assert!((2.0 * a.mu.values()[0] - b.mu.values()[0]).abs() < 1e-14);
        assert_eq!(a.sigma2, b.sigma2);
        assert!(a.sigma2 > 0.0);
    }

    #[test]
    fn oracle_predictor_has_zero_loss() {
        let s = sched();
        let z0 = ImageGrid::new(3, 2, 2, (0..12).map(|i| i as f64 / 12.0 - 0.5).collect()).unwrap();
        let y = z0.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // the oracle recovers eps from z_t and z_0 exactly
        let oracle = |_: &ImageGrid, zt: &ImageGrid, g: f64| zt.axpby(1.0 / (1.0 - g).sqrt(), &z0, -(g / (1.0 - g)).sqrt());
        let loss = training_step_loss(&oracle, &y, &z0, &s, &mut rng).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
        let zero = |_: &ImageGrid, zt: &ImageGrid, _: f64| Ok(ImageGrid::zeros(zt.channels(), zt.height(), zt.width()));
        assert!(training_step_loss(&zero, &y, &z0, &s, &mut rng).unwrap() > 0.0);
        let small = ImageGrid::zeros(3, 1, 1);
        assert!(training_step_loss(&zero, &small, &z0, &s, &mut rng).is_err());
    }

    #[test]
    fn reverse_step_without_prediction_or_noise_rescales() {
        let s = sched();
        let zt = ImageGrid::new(1, 1, 3, vec![0.1, -0.5, 2.0]).unwrap();
        let zero = ImageGrid::zeros(1, 1, 3);
        let out = reverse_step(&zero, &zt, &s, 40, Some(&zero)).unwrap();
        assert!(out.max_abs_diff(&zt.scaled(1.0 / s.alpha(40).sqrt())) < 1e-14);
        assert!(reverse_step(&zero, &zt, &s, 0, None).is_err());
    }

    #[test]
    fn final_reverse_step_inverts_marginal() {
        let s = sched();
        let z0 = ImageGrid::new(1, 1, 3, vec![0.25, -0.9, 0.6]).unwrap();
        let eps = ImageGrid::new(1, 1, 3, vec![1.1, 0.3, -2.2]).unwrap();
        let z1 = forward_marginal(&z0, s.gamma(1), &eps).unwrap();
        let noise = ImageGrid::filled(1, 1, 3, 5.0);
        let out = reverse_step(&eps, &z1, &s, 1, Some(&noise)).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-10);
    }

    #[test]
    fn clipped_update_matches_plain_inside_the_box() {
        let plan = sched().inference_subsequence(7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = ImageGrid::new(1, 1, 3, vec![0.9, -0.2, 0.0]).unwrap();
        for seg in plan.segments() {
            let eps = ImageGrid::randn(1, 1, 3, &mut rng);
            let noise = ImageGrid::randn(1, 1, 3, &mut rng);
            let zt = forward_marginal(&x0, seg.gamma, &eps).unwrap();
            let a = reverse_update(&eps, &zt, &seg, None).unwrap();
            let b = reverse_update_clipped(&eps, &zt, &seg, None).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-9, "t = {}", seg.t);
            let sd = ((1.0 - seg.gamma_next) / (1.0 - seg.gamma) * (1.0 - seg.alpha)).sqrt();
            let c = reverse_update_clipped(&eps, &zt, &seg, Some(&noise)).unwrap();
            let want = if seg.t_next > 0 { b.axpby(1.0, &noise, sd).unwrap() } else { b };
            assert!(c.max_abs_diff(&want) < 1e-12);
        }
        // an implied x0 outside the box is pulled back
        let seg = plan.segments()[0];
        let zt = ImageGrid::filled(1, 1, 1, 0.0);
        let eps = ImageGrid::filled(1, 1, 1, -50.0);
        let b = reverse_update_clipped(&eps, &zt, &seg, None).unwrap();
        let want = seg.gamma_next.sqrt() * (1.0 - seg.alpha) / (1.0 - seg.gamma);
        assert!((b.values()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn sampler_is_seeded_and_shape_preserving() {
        let s = sched();
        let plan = s.inference_subsequence(10).unwrap();
        let y = ImageGrid::zeros(3, 4, 6);
        let pred = |_: &ImageGrid, zt: &ImageGrid, _: f64| Ok(zt.scaled(0.5));
        let run = |seed| sample(&pred, &y, &plan, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = run(1);
        assert_eq!(a.dims(), (3, 4, 6));
        assert_eq!(a, run(1));
        assert_ne!(a, run(2));
        assert!(a.values().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
