//! Diffusion noise schedules.
//!
//! `alpha(t)` is the per-step signal retention of the forward chain and
//! `gamma(t)` the cumulative product `alpha(1) * ... * alpha(t)`, with the
//! convention `gamma(0) = 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Parameters of a schedule family; this is what configs and checkpoints
/// store, the arrays are rebuilt from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// `alpha_t = 1 - beta_t` with `beta_t` linear from `beta_start` to `beta_end`.
    LinearBeta { steps: usize, beta_start: f64, beta_end: f64 },
    /// Every step uses the same `alpha`.
    Constant { steps: usize, alpha: f64 },
}

impl ScheduleSpec {
    pub fn steps(&self) -> usize {
        match *self {
            ScheduleSpec::LinearBeta { steps, .. } | ScheduleSpec::Constant { steps, .. } => steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    alpha: Vec<f64>,
    gamma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let steps = spec.steps();
        if steps < 1 {
            return Err(invalid("schedule needs at least one step"));
        }
        let alpha: Vec<f64> = match spec {
            ScheduleSpec::LinearBeta { beta_start, beta_end, .. } => (0..steps)
                .map(|i| {
                    let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                    1.0 - (beta_start + (beta_end - beta_start) * frac)
                })
                .collect(),
            ScheduleSpec::Constant { alpha, .. } => vec![alpha; steps],
        };
        Self::from_alphas(spec, alpha)
    }

    fn from_alphas(spec: ScheduleSpec, alpha: Vec<f64>) -> Result<Self> {
        if let Some((i, a)) = alpha.iter().enumerate().find(|(_, a)| !(**a > 0.0 && **a < 1.0)) {
            return Err(invalid(format!("alpha at step {} is {a}, must lie in (0, 1)", i + 1)));
        }
        let mut gamma = Vec::with_capacity(alpha.len());
        let mut running = 1.0;
        for (i, a) in alpha.iter().enumerate() {
            let next = running * a;
            if !(next < running && next > 0.0) {
                return Err(invalid(format!("gamma stops decreasing at step {}", i + 1)));
            }
            running = next;
            gamma.push(running);
        }
        Ok(Self { spec, alpha, gamma })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// `alpha_t` for `1 <= t <= T`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "alpha index {t} outside 1..={}", self.steps());
        self.alpha[t - 1]
    }

    /// `gamma_t` for `0 <= t <= T`; `gamma_0 = 1`.
    pub fn gamma(&self, t: usize) -> f64 {
        assert!(t <= self.steps(), "gamma index {t} outside 0..={}", self.steps());
        if t == 0 {
            1.0
        } else {
            self.gamma[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// `gamma_1 ..= gamma_T`.
    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    /// Draw `t` uniformly from `1..=T` and then `gamma` uniformly between
    /// `gamma_t` and `gamma_{t-1}`.
    pub fn sample_gamma<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, usize) {
        let t = rng.random_range(1..=self.steps());
        let (lo, hi) = (self.gamma(t), self.gamma(t - 1));
        let u: f64 = rng.random();
        (lo + (hi - lo) * u, t)
    }

    /// `k` timesteps spaced uniformly over `[1, T]`, descending, both
    /// endpoints included.
    pub fn inference_subsequence(&self, k: usize) -> Result<InferencePlan> {
        let t_max = self.steps();
        if k < 1 || k > t_max {
            return Err(invalid(format!("inference steps {k} outside 1..={t_max}")));
        }
        let steps = if k == 1 {
            if t_max != 1 {
                return Err(invalid("a single inference step cannot cover both endpoints"));
            }
            vec![1]
        } else {
            // round-half-up of i * (T - 1) / (k - 1) in integer arithmetic
            let span = (t_max - 1) as u64;
            let den = (k - 1) as u64;
            (0..k as u64).map(|i| t_max - ((2 * i * span + den) / (2 * den)) as usize).collect()
        };
        Ok(InferencePlan { schedule: self.clone(), steps })
    }

    /// Every timestep from `T` down to 1.
    pub fn full_plan(&self) -> InferencePlan {
        InferencePlan { schedule: self.clone(), steps: (1..=self.steps()).rev().collect() }
    }
}

/// One reverse transition `z_t -> z_{t_next}` collapsed into a single
/// effective step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseSegment {
    pub t: usize,
    pub t_next: usize,
    /// `gamma_t / gamma_{t_next}`.
    pub alpha: f64,
    pub gamma: f64,
    pub gamma_next: f64,
}

/// Descending timesteps visited by the sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct InferencePlan {
    schedule: NoiseSchedule,
    steps: Vec<usize>,
}

impl InferencePlan {
    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Consecutive transitions; the last one always ends at `t = 0`.
    pub fn segments(&self) -> Vec<ReverseSegment> {
        let s = &self.schedule;
        self.steps
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let t_next = self.steps.get(i + 1).copied().unwrap_or(0);
                let (gamma, gamma_next) = (s.gamma(t), s.gamma(t_next));
                ReverseSegment { t, t_next, alpha: gamma / gamma_next, gamma, gamma_next }
            })
            .collect()
    }
}
