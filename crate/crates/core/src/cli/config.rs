//! Run configuration: one TOML file with dotted section keys. Unknown keys
//! are rejected so a typo cannot silently fall back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::channels::{ChannelKind, CorruptionChannel};
use crate::diffusion::{Architecture, LossWeighting, NoiseSchedule};
use crate::em::{EmConfig, EvalSettings, TrainConfig};
use crate::oracle::SuiteConfig;

/// Which clean-data family `generate-data` draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Points on a closed curve in R^5 (see [`super::data::manifold_point`]).
    Manifold,
    /// Small grayscale images of bright rectangles.
    Squares,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub task: Task,
    pub n: usize,
    /// Image side for the squares task.
    #[serde(default = "default_side")]
    pub side: usize,
}

fn default_side() -> usize {
    8
}

/// `[channel]` section; the `kind` key selects the matrix family and the
/// remaining keys are that family's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ChannelSpec {
    Fixed {
        sigma_y: f64,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    },
    RandomMask {
        sigma_y: f64,
        rho: f64,
        dim: usize,
    },
    GaussianBlur {
        sigma_y: f64,
        sigma: f64,
        height: usize,
        width: usize,
    },
    Sphere {
        sigma_y: f64,
        rows: usize,
        dim: usize,
    },
}

impl ChannelSpec {
    pub fn build(&self) -> Result<CorruptionChannel, CliError> {
        let (kind, sigma_y) = match self.clone() {
            Self::Fixed {
                sigma_y,
                rows,
                cols,
                data,
            } => (ChannelKind::Fixed { rows, cols, data }, sigma_y),
            Self::RandomMask { sigma_y, rho, dim } => (ChannelKind::RandomMask { rho, dim }, sigma_y),
            Self::GaussianBlur {
                sigma_y,
                sigma,
                height,
                width,
            } => (
                ChannelKind::GaussianBlur {
                    sigma,
                    height,
                    width,
                },
                sigma_y,
            ),
            Self::Sphere { sigma_y, rows, dim } => (ChannelKind::Sphere { rows, dim }, sigma_y),
        };
        Ok(CorruptionChannel::new(kind, sigma_y)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataConfig,
    pub channel: ChannelSpec,
    pub schedule: NoiseSchedule,
    pub weighting: LossWeighting,
    pub model: ModelConfig,
    pub em: EmConfig,
    /// Unconditional prior trained on the final reconstructions.
    #[serde(default)]
    pub prior: Option<TrainConfig>,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub theory: SuiteConfig,
}

/// What a fingerprint covers. Each artifact is stamped with the narrowest
/// scope that determines its contents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Datasets: task, channel and seed.
    Data,
    /// Checkpoints and metrics: everything except the iteration budget and
    /// the evaluation cadence, so a resumed run with a larger `K` matches.
    Model,
    /// The whole file.
    Full,
}

pub type Fingerprint = [u8; 32];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.n == 0 {
            return Err(CliError::Config("data.n must be >= 1".into()));
        }
        if self.data.task == Task::Squares && self.data.side == 0 {
            return Err(CliError::Config("data.side must be >= 1".into()));
        }
        let channel = self.channel.build()?;
        let dim = match self.data.task {
            Task::Manifold => super::data::MANIFOLD_DIM,
            Task::Squares => self.data.side * self.data.side,
        };
        if channel.dim_x() != dim {
            return Err(CliError::Config(format!(
                "channel acts on dimension {} but the {:?} task has dimension {dim}",
                channel.dim_x(),
                self.data.task
            )));
        }
        self.schedule.validate()?;
        self.weighting.validate()?;
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(CliError::Config("model.hidden needs positive widths".into()));
        }
        self.em.validate()?;
        self.theory.validate()?;
        if let Some(p) = &self.prior {
            p.validate()?;
        }
        Ok(())
    }

    pub fn channel(&self) -> CorruptionChannel {
        self.channel.build().expect("validated on load")
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::for_channel(&self.channel(), self.model.hidden.clone())
    }

    /// SHA-256 over the canonical JSON form of the scoped fields.
    pub fn fingerprint(&self, scope: Scope) -> Fingerprint {
        let value = match scope {
            Scope::Data => serde_json::json!({
                "seed": self.seed,
                "data": self.data,
                "channel": self.channel,
            }),
            Scope::Model => {
                let mut em = self.em.clone();
                em.iterations = 0;
                serde_json::json!({
                    "seed": self.seed,
                    "data": self.data,
                    "channel": self.channel,
                    "schedule": self.schedule,
                    "weighting": self.weighting,
                    "model": self.model,
                    "em": em,
                    "prior": self.prior,
                })
            }
            Scope::Full => serde_json::to_value(self).expect("config serializes"),
        };
        // serde_json maps are ordered by key, so this text is canonical.
        Sha256::digest(value.to_string().as_bytes()).into()
    }
}

pub fn hex(fp: &Fingerprint) -> String {
    fp.iter().map(|b| format!("{b:02x}")).collect()
}
