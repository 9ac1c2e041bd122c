//! Ensemble of Q-networks, each the sum of a trainable network and a fixed
//! randomly initialized prior network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{action_from_index, double_dqn_update, repeated_updates, Agent, Decision, LearningConfig, ScaledPrior, StepLosses};
use crate::env::EgoAction;
use crate::error::{Error, Result};
use crate::nn::{argmax, AdamState, NetworkParams, Observation, QVector};
use crate::replay::{Experience, SharedReplayMemory, MAX_MEMBERS};
use crate::rng::{stream, Stream};
use crate::safety::{select_mean_action, select_safe_action, UncertaintyReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    pub prior_scale: f64,
    /// Probability that a member may sample a new experience.
    pub p_add: f64,
    pub learning: LearningConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            members: 10,
            prior_scale: 50.0,
            p_add: 0.5,
            learning: LearningConfig::default(),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        self.learning.validate()?;
        if self.members == 0 || self.members > MAX_MEMBERS {
            return Err(Error::Config(format!("ensemble size {} outside 1..={MAX_MEMBERS}", self.members)));
        }
        if !(self.prior_scale >= 0.0 && self.prior_scale.is_finite()) {
            return Err(Error::Config(format!("prior scale {}", self.prior_scale)));
        }
        if !(0.0..=1.0).contains(&self.p_add) {
            return Err(Error::Config(format!("adding probability {} outside [0, 1]", self.p_add)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleMember {
    pub trainable: NetworkParams,
    pub target: NetworkParams,
    /// Never updated after construction.
    pub prior: NetworkParams,
    pub optimizer: AdamState,
}

impl EnsembleMember {
    pub fn q(&self, prior_scale: f32, obs: &Observation) -> Result<QVector> {
        super::combined_q(&self.trainable, self.scaled_prior(prior_scale), obs).map(|values| QVector { values })
    }

    fn scaled_prior(&self, scale: f32) -> Option<ScaledPrior<'_>> {
        Some(ScaledPrior {
            network: &self.prior,
            scale,
        })
    }

    /// One Double-DQN step on `batch` (slot indices into `replay`).
    pub fn train_step(
        &mut self,
        replay: &SharedReplayMemory,
        batch: &[usize],
        prior_scale: f32,
        config: &LearningConfig,
    ) -> Result<f64> {
        let experiences: Vec<&Experience> = batch.iter().map(|&s| replay.get(s)).collect();
        let prior = Some(ScaledPrior {
            network: &self.prior,
            scale: prior_scale,
        });
        double_dqn_update(&mut self.trainable, &mut self.optimizer, &self.target, prior, &experiences, config)
    }

    pub fn sync_target(&mut self) {
        self.target = self.trainable.clone();
    }
}

/// Random streams of an ensemble agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRngs {
    pub explore: ChaCha8Rng,
    pub mask: ChaCha8Rng,
    pub minibatch: Vec<ChaCha8Rng>,
}

#[derive(Clone, Debug)]
pub struct EnsembleAgent {
    pub config: EnsembleConfig,
    pub members: Vec<EnsembleMember>,
    pub replay: SharedReplayMemory,
    pub rngs: EnsembleRngs,
    /// Member acting in the current training episode.
    pub active: usize,
}

impl EnsembleAgent {
    pub fn new(config: EnsembleConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = config.learning.architecture;
        let members = (0..config.members)
            .map(|k| {
                let trainable = NetworkParams::init(arch, &mut stream(seed, Stream::Init, k as u32))?;
                let prior = NetworkParams::init(arch, &mut stream(seed, Stream::Prior, k as u32))?;
                Ok(EnsembleMember {
                    target: trainable.clone(),
                    optimizer: AdamState::for_params(&trainable),
                    trainable,
                    prior,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rngs = EnsembleRngs {
            explore: stream(seed, Stream::Explore, 0),
            mask: stream(seed, Stream::ReplayMask, 0),
            minibatch: (0..config.members).map(|k| stream(seed, Stream::Minibatch, k as u32)).collect(),
        };
        Ok(EnsembleAgent {
            replay: SharedReplayMemory::new(config.learning.replay_capacity, config.members)?,
            config,
            members,
            rngs,
            active: 0,
        })
    }

    pub fn prior_scale(&self) -> f32 {
        self.config.prior_scale as f32
    }

    /// `Q_k(s, ·) = f_k(s, ·) + β·p_k(s, ·)`.
    pub fn member_q(&self, k: usize, obs: &Observation) -> Result<QVector> {
        self.member(k)?.q(self.prior_scale(), obs)
    }

    fn member(&self, k: usize) -> Result<&EnsembleMember> {
        self.members
            .get(k)
            .ok_or_else(|| Error::Usage(format!("member {k} of {}", self.members.len())))
    }

    /// Every member's Q-values as `f64`, indexed `[k][a]`.
    pub fn all_member_q(&self, obs: &Observation) -> Result<Vec<Vec<f64>>> {
        (0..self.members.len())
            .map(|k| Ok(self.member_q(k, obs)?.values.iter().map(|&q| q as f64).collect()))
            .collect()
    }

    /// Greedy action of member `k`.
    pub fn select_training_action(&self, k: usize, obs: &Observation) -> Result<EgoAction> {
        action_from_index(argmax(&self.member_q(k, obs)?.values))
    }

    /// Stores an experience and draws its membership bits.
    pub fn add_experience(&mut self, experience: Experience) -> usize {
        self.replay.add(experience, self.config.p_add, &mut self.rngs.mask)
    }

    /// Minibatch for member `k`, or `None` while it has too few samples.
    pub fn sample_minibatch(&mut self, k: usize) -> Option<Vec<usize>> {
        let batch = self.config.learning.batch_size;
        self.replay.sample(k, batch, &mut self.rngs.minibatch[k])
    }

    /// One update of every member that has enough samples. Members run in
    /// parallel; each owns its sampling stream, so the result does not depend
    /// on scheduling.
    pub fn train_all(&mut self) -> Result<StepLosses> {
        let scale = self.prior_scale();
        let config = &self.config.learning;
        let replay = &self.replay;
        self.members
            .par_iter_mut()
            .zip(self.rngs.minibatch.par_iter_mut())
            .enumerate()
            .map(|(k, (member, rng))| match replay.sample(k, config.batch_size, rng) {
                Some(slots) => member.train_step(replay, &slots, scale, config).map(Some),
                None => Ok(None),
            })
            .collect()
    }

    pub fn sync_targets(&mut self) {
        for m in &mut self.members {
            m.sync_target();
        }
    }

    /// Gate-on decision with threshold `cv_safe`.
    pub fn decide_safe(&self, obs: &Observation, cv_safe: f64) -> Result<UncertaintyReport> {
        select_safe_action(&self.all_member_q(obs)?, cv_safe)
    }
}

impl Agent for EnsembleAgent {
    fn networks(&self) -> usize {
        self.members.len()
    }

    fn begin_episode(&mut self) {
        self.active = self.rngs.explore.gen_range(0..self.members.len());
    }

    fn act(&mut self, obs: &Observation, _step: u64) -> Result<EgoAction> {
        self.select_training_action(self.active, obs)
    }

    fn remember(&mut self, experience: Experience) {
        self.add_experience(experience);
    }

    fn learn(&mut self, step: u64) -> Result<StepLosses> {
        let losses = if self.config.learning.is_learning_step(step) {
            repeated_updates(self.config.learning.updates_per_step, || self.train_all())?
        } else {
            vec![None; self.members.len()]
        };
        if self.config.learning.is_target_sync_step(step) {
            self.sync_targets();
        }
        Ok(losses)
    }

    /// Mean-Q argmax with the ensemble statistics; a single member has no
    /// spread and reports none.
    fn decide(&self, obs: &Observation) -> Result<Decision> {
        if self.members.len() < 2 {
            return Ok(Decision {
                action: self.select_training_action(0, obs)?,
                report: None,
            });
        }
        let report = select_mean_action(&self.all_member_q(obs)?)?;
        Ok(Decision {
            action: report.action,
            report: Some(report),
        })
    }

    fn acting_network(&self) -> Option<usize> {
        Some(self.active)
    }
}
