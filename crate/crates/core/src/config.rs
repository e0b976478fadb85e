//! Run configuration: a JSON document overlaid on a named profile.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::DatasetConfig;
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::neural_operator::OperatorConfig;
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Desk-scale sizes and iteration counts.
    Toy,
    /// Full-size settings.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected toy or paper)"))),
        }
    }
}

/// What produces the prior `y` the denoiser is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionMode {
    /// Bicubic upsampling of the LR input.
    Bicubic,
    /// Operator encoder features, bicubically upsampled.
    Encoder,
    /// The full neural operator.
    Neurop,
}

impl ConditionMode {
    pub const ALL: [ConditionMode; 3] = [ConditionMode::Bicubic, ConditionMode::Encoder, ConditionMode::Neurop];

    pub fn needs_operator(self) -> bool {
        self != ConditionMode::Bicubic
    }

    /// Channels of `y` under this mode.
    pub fn prior_channels(self, operator: &OperatorConfig) -> usize {
        match self {
            ConditionMode::Encoder => operator.encoder_channels,
            ConditionMode::Bicubic | ConditionMode::Neurop => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionMode::Bicubic => "bicubic",
            ConditionMode::Encoder => "encoder",
            ConditionMode::Neurop => "neurop",
        }
    }
}

impl fmt::Display for ConditionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ConditionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConditionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition mode {s:?} (expected bicubic, encoder or neurop)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub operator: TrainConfig,
    pub diffusion: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    /// Reverse steps used at inference.
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub data: DatasetConfig,
    pub schedule: ScheduleSpec,
    pub operator: OperatorConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainSection,
    pub sample: SampleConfig,
}

impl RunConfig {
    pub fn preset(profile: Profile) -> Self {
        let schedule = ScheduleSpec::LinearBeta { steps: 2000, beta_start: 1e-6, beta_end: 1e-2 };
        match profile {
            Profile::Toy => Self {
                profile,
                seed: 0,
                data: DatasetConfig { root: PathBuf::from("data"), hr_size: 48, train_fraction: 0.8, split_seed: 0 },
                schedule,
                operator: OperatorConfig::toy(),
                denoiser: DenoiserConfig::toy(),
                train: TrainSection { operator: TrainConfig::toy_operator(), diffusion: TrainConfig::toy_diffusion() },
                sample: SampleConfig { steps: 50 },
            },
            Profile::Paper => Self {
                profile,
                seed: 0,
                data: DatasetConfig { root: PathBuf::from("data"), hr_size: 256, train_fraction: 0.8, split_seed: 0 },
                schedule,
                operator: OperatorConfig::paper(),
                denoiser: DenoiserConfig::paper(),
                train: TrainSection { operator: TrainConfig::paper_operator(), diffusion: TrainConfig::paper_diffusion() },
                sample: SampleConfig { steps: 50 },
            },
        }
    }

    /// Parse a JSON document. Its `profile` (default `toy`) selects the
    /// preset the document is merged onto; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed JSON: {e}")))?;
        Self::from_value(user, None)
    }

    /// Like [`RunConfig::from_json`]; `profile` overrides the document's.
    pub fn from_value(user: Value, profile: Option<Profile>) -> Result<Self> {
        if !user.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let profile = match (profile, user.get("profile")) {
            (Some(p), _) => p,
            (None, None) => Profile::Toy,
            (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
        };
        let mut merged = serde_json::to_value(Self::preset(profile))?;
        merge(&mut merged, user);
        merged["profile"] = serde_json::to_value(profile)?;
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let user: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("malformed JSON: {e}")))?;
        Self::from_value(user, profile)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        NoiseSchedule::new(self.schedule.clone()).map_err(|e| Error::Config(format!("schedule: {e}")))?;
        self.operator.validate()?;
        self.denoiser.validate()?;
        self.train.operator.validate().map_err(|e| Error::Config(format!("train.operator: {e}")))?;
        self.train.diffusion.validate().map_err(|e| Error::Config(format!("train.diffusion: {e}")))?;
        if !self.data.hr_size.is_multiple_of(self.denoiser.size_multiple()) {
            return Err(Error::Config(format!(
                "data.hr_size {} must be a multiple of 2^denoiser.depth = {}",
                self.data.hr_size,
                self.denoiser.size_multiple()
            )));
        }
        if let Some(p) = self.train.diffusion.patch_size {
            if p % self.denoiser.size_multiple() != 0 || p > self.data.hr_size {
                return Err(Error::Config(format!(
                    "train.diffusion.patch_size {p} must be a multiple of {} and at most data.hr_size",
                    self.denoiser.size_multiple()
                )));
            }
        }
        let steps = self.schedule.steps();
        if self.sample.steps < 2.min(steps) || self.sample.steps > steps {
            return Err(Error::Config(format!("sample.steps {} outside 2..={steps}", self.sample.steps)));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.clone())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// Recursive object merge. A tagged object whose `kind` changes is replaced
/// rather than merged, so switching schedule families does not inherit
/// stale fields.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let kind_changed = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changed {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
