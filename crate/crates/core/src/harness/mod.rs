//! Training sessions, evaluation on a fixed episode suite, out-of-distribution
//! scenario replays and run comparison.

pub mod checkpoint;
pub mod compare;
pub mod evaluate;
pub mod ood;
pub mod session;
pub mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::{DqnConfig, EnsembleConfig, LearningConfig};
use crate::error::{Error, Result};
use crate::safety::{DEFAULT_CV_MIN, DEFAULT_CV_SAFE};

pub use evaluate::{evaluate_suite, Baseline, EvaluationResult, Policy};
pub use session::{run_training_session, SessionSummary};
pub use trainer::{AnyAgent, Trainer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    #[default]
    Rpf,
    Dqn,
    Heuristic,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Rpf => "rpf",
            AgentKind::Dqn => "dqn",
            AgentKind::Heuristic => "heuristic",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rpf" => Ok(AgentKind::Rpf),
            "dqn" => Ok(AgentKind::Dqn),
            "heuristic" => Ok(AgentKind::Heuristic),
            other => Err(Error::Config(format!("unknown agent {other:?}"))),
        }
    }
}

/// Scale presets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Minutes on one CPU core.
    #[default]
    Desk,
    /// Full-length runs with the reference hyperparameters.
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

/// Everything that determines a training session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub agent: AgentKind,
    pub seed: u64,
    /// Environment steps to train for.
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Surrounding cars in training and evaluation episodes.
    pub vehicle_count: usize,
    /// Gate threshold used by scenario replays.
    pub cv_safe: f64,
    pub cv_min: f64,
    pub ensemble: EnsembleConfig,
    pub dqn: DqnConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig::profile(Profile::Desk)
    }
}

impl SessionConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => {
                let learning = LearningConfig {
                    replay_capacity: 100_000,
                    learning_rate: 1e-3,
                    learning_starts: 10_000,
                    target_update: 2_000,
                    ..LearningConfig::default()
                };
                SessionConfig {
                    agent: AgentKind::Rpf,
                    seed: 0,
                    total_steps: 100_000,
                    eval_interval: 10_000,
                    eval_episodes: 20,
                    vehicle_count: 12,
                    cv_safe: DEFAULT_CV_SAFE,
                    cv_min: DEFAULT_CV_MIN,
                    ensemble: EnsembleConfig {
                        members: 3,
                        prior_scale: 10.0,
                        learning: learning.clone(),
                        ..EnsembleConfig::default()
                    },
                    dqn: DqnConfig {
                        epsilon_decay_steps: 50_000,
                        learning,
                        ..DqnConfig::default()
                    },
                }
            }
            Profile::Full => SessionConfig {
                agent: AgentKind::Rpf,
                seed: 0,
                total_steps: 5_000_000,
                eval_interval: 50_000,
                eval_episodes: 100,
                vehicle_count: 25,
                cv_safe: DEFAULT_CV_SAFE,
                cv_min: DEFAULT_CV_MIN,
                ensemble: EnsembleConfig::default(),
                dqn: DqnConfig::default(),
            },
        }
    }

    /// Applies a TOML overlay on top of `self`: keys present in `text`
    /// replace the corresponding values, everything else is kept.
    pub fn overlay(&self, text: &str) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        let mut base = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, overlay);
        let merged: SessionConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e| Error::Config(format!("config file: {e}")))?;
        merged.validate()?;
        Ok(merged)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("session config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.ensemble.validate()?;
        self.dqn.validate()?;
        if self.eval_interval == 0 {
            return Err(Error::Config("evaluation interval must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("evaluation needs at least one episode".into()));
        }
        if !(self.cv_safe.is_finite() && self.cv_min.is_finite()) {
            return Err(Error::Config("c_v thresholds must be finite".into()));
        }
        Ok(())
    }

    pub fn learning(&self) -> &LearningConfig {
        match self.agent {
            AgentKind::Dqn => &self.dqn.learning,
            _ => &self.ensemble.learning,
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Running discounted sum `Σ γ^k r_k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscountedReturn {
    gamma: f64,
    discount: f64,
    value: f64,
}

impl DiscountedReturn {
    pub fn new(gamma: f64) -> Self {
        DiscountedReturn {
            gamma,
            discount: 1.0,
            value: 0.0,
        }
    }

    pub fn push(&mut self, reward: f64) {
        self.value += self.discount * reward;
        self.discount *= self.gamma;
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}
