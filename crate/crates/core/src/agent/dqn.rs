//! Double DQN with a linearly annealed ε-greedy policy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{action_from_index, double_dqn_update, repeated_updates, Agent, Decision, LearningConfig, StepLosses};
use crate::env::EgoAction;
use crate::error::{Error, Result};
use crate::nn::{AdamState, NetworkParams, Observation};
use crate::replay::{Experience, SharedReplayMemory};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Environment steps over which ε falls from start to end.
    pub epsilon_decay_steps: u64,
    pub learning: LearningConfig,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 1_000_000,
            learning: LearningConfig::default(),
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        self.learning.validate()?;
        for e in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("exploration rate {e} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Linear from `epsilon_start` at step 0 to `epsilon_end` at
    /// `epsilon_decay_steps`, constant afterwards.
    pub fn epsilon(&self, step: u64) -> f64 {
        if self.epsilon_decay_steps == 0 || step >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let frac = step as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DqnRngs {
    pub explore: ChaCha8Rng,
    pub minibatch: ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct DqnAgent {
    pub config: DqnConfig,
    pub online: NetworkParams,
    pub target: NetworkParams,
    pub optimizer: AdamState,
    pub replay: SharedReplayMemory,
    pub rngs: DqnRngs,
}

impl DqnAgent {
    /// Uses the same initialization and minibatch streams as ensemble
    /// member 0, so a one-member ensemble without prior retraces this agent.
    pub fn new(config: DqnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let online = NetworkParams::init(config.learning.architecture, &mut stream(seed, Stream::Init, 0))?;
        Ok(DqnAgent {
            target: online.clone(),
            optimizer: AdamState::for_params(&online),
            replay: SharedReplayMemory::new(config.learning.replay_capacity, 1)?,
            online,
            rngs: DqnRngs {
                explore: stream(seed, Stream::Explore, 0),
                minibatch: stream(seed, Stream::Minibatch, 0),
            },
            config,
        })
    }

    pub fn greedy_action(&self, obs: &Observation) -> Result<EgoAction> {
        action_from_index(self.online.forward(obs)?.argmax())
    }

    pub fn select_action<R: Rng + ?Sized>(&self, obs: &Observation, epsilon: f64, rng: &mut R) -> Result<EgoAction> {
        epsilon_greedy(&self.online, obs, epsilon, rng)
    }

    /// One update from a fresh minibatch; `None` while the memory is too small.
    pub fn train_step(&mut self) -> Result<Option<f64>> {
        let Some(slots) = self.replay.sample(0, self.config.learning.batch_size, &mut self.rngs.minibatch) else {
            return Ok(None);
        };
        let batch: Vec<&Experience> = slots.iter().map(|&s| self.replay.get(s)).collect();
        double_dqn_update(&mut self.online, &mut self.optimizer, &self.target, None, &batch, &self.config.learning)
            .map(Some)
    }
}

/// A uniformly random action with probability `epsilon`, otherwise the
/// argmax of `network`.
pub fn epsilon_greedy<R: Rng + ?Sized>(
    network: &NetworkParams,
    obs: &Observation,
    epsilon: f64,
    rng: &mut R,
) -> Result<EgoAction> {
    if rng.gen::<f64>() < epsilon {
        return action_from_index(rng.gen_range(0..EgoAction::COUNT));
    }
    action_from_index(network.forward(obs)?.argmax())
}

impl Agent for DqnAgent {
    fn networks(&self) -> usize {
        1
    }

    fn begin_episode(&mut self) {}

    fn act(&mut self, obs: &Observation, step: u64) -> Result<EgoAction> {
        let epsilon = self.config.epsilon(step.saturating_sub(1));
        epsilon_greedy(&self.online, obs, epsilon, &mut self.rngs.explore)
    }

    fn remember(&mut self, experience: Experience) {
        self.replay.insert(experience, 1);
    }

    fn learn(&mut self, step: u64) -> Result<StepLosses> {
        let losses = if self.config.learning.is_learning_step(step) {
            repeated_updates(self.config.learning.updates_per_step, || Ok(vec![self.train_step()?]))?
        } else {
            vec![None]
        };
        if self.config.learning.is_target_sync_step(step) {
            self.target = self.online.clone();
        }
        Ok(losses)
    }

    fn decide(&self, obs: &Observation) -> Result<Decision> {
        Ok(Decision {
            action: self.greedy_action(obs)?,
            report: None,
        })
    }
}
