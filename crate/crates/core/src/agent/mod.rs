//! Learning agents and the pieces they share: hyperparameters, the
//! Double-DQN update and the [`Agent`] interface the trainer drives.

pub mod dqn;
pub mod ensemble;

use serde::{Deserialize, Serialize};

use crate::env::EgoAction;
use crate::error::{Error, Result};
use crate::nn::{argmax, huber_loss, AdamState, Architecture, ForwardCache, NetworkParams, Observation};
use crate::replay::Experience;
use crate::safety::UncertaintyReport;

pub use dqn::{DqnAgent, DqnConfig};
pub use ensemble::{EnsembleAgent, EnsembleConfig, EnsembleMember};

/// Hyperparameters common to both learners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Environment steps before the first update.
    pub learning_starts: u64,
    /// Target networks are refreshed every this many environment steps.
    pub target_update: u64,
    /// Minibatch updates per environment step once learning has started.
    pub updates_per_step: u32,
    pub huber_delta: f64,
    pub architecture: Architecture,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig {
            gamma: 0.99,
            learning_rate: 5e-4,
            batch_size: 32,
            replay_capacity: 500_000,
            learning_starts: 50_000,
            target_update: 20_000,
            updates_per_step: 1,
            huber_delta: 10.0,
            architecture: Architecture::default(),
        }
    }
}

impl LearningConfig {
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if self.architecture.actions != EgoAction::COUNT {
            return Err(Error::Config(format!(
                "network has {} outputs, the environment has {} actions",
                self.architecture.actions,
                EgoAction::COUNT
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("discount {} outside [0, 1]", self.gamma)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config(format!("huber threshold {}", self.huber_delta)));
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.target_update == 0 || self.updates_per_step == 0 {
            return Err(Error::Config(
                "batch size, replay capacity, target period and updates per step must be positive".into(),
            ));
        }
        Ok(())
    }

    /// True when step `step` (1-based count of environment steps) runs updates.
    pub fn is_learning_step(&self, step: u64) -> bool {
        step >= self.learning_starts
    }

    pub fn is_target_sync_step(&self, step: u64) -> bool {
        step % self.target_update == 0
    }
}

/// A frozen network added to the trainable one, `f + scale·p`.
#[derive(Clone, Copy)]
pub struct ScaledPrior<'a> {
    pub network: &'a NetworkParams,
    pub scale: f32,
}

/// Combined output `f(s) + scale·p(s)`; the prior pass is skipped when the
/// scale is zero.
pub fn combined_q(online: &NetworkParams, prior: Option<ScaledPrior<'_>>, obs: &Observation) -> Result<Vec<f32>> {
    let mut q = online.forward(obs)?.values;
    add_prior(&mut q, prior, obs)?;
    Ok(q)
}

fn add_prior(q: &mut [f32], prior: Option<ScaledPrior<'_>>, obs: &Observation) -> Result<()> {
    if let Some(prior) = prior.filter(|p| p.scale != 0.0) {
        for (q, p) in q.iter_mut().zip(prior.network.forward(obs)?.values) {
            *q += prior.scale * p;
        }
    }
    Ok(())
}

/// Double-DQN target `r + γ·Q⁻(s', argmax_a Q(s', a))`, or `r` when
/// terminal. `Q` and `Q⁻` both include the prior.
pub fn double_dqn_target(
    online: &NetworkParams,
    target: &NetworkParams,
    prior: Option<ScaledPrior<'_>>,
    experience: &Experience,
    gamma: f64,
) -> Result<f32> {
    let r = experience.reward as f32;
    if experience.terminal {
        return Ok(r);
    }
    let s2 = &experience.next_observation;
    let mut q_online = online.forward(s2)?.values;
    let mut q_target = target.forward(s2)?.values;
    if let Some(prior) = prior.filter(|p| p.scale != 0.0) {
        for ((a, b), p) in q_online.iter_mut().zip(q_target.iter_mut()).zip(prior.network.forward(s2)?.values) {
            *a += prior.scale * p;
            *b += prior.scale * p;
        }
    }
    Ok(r + gamma as f32 * q_target[argmax(&q_online)])
}

/// One Adam step on the mean Huber loss of the batch. Only `online`
/// receives gradients; target and prior enter as constants. Returns the
/// batch-mean loss.
pub fn double_dqn_update(
    online: &mut NetworkParams,
    optimizer: &mut AdamState,
    target: &NetworkParams,
    prior: Option<ScaledPrior<'_>>,
    batch: &[&Experience],
    config: &LearningConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("empty minibatch".into()));
    }
    let n = batch.len() as f32;
    let delta = config.huber_delta as f32;
    let mut grads = online.zero_gradients();
    let mut cache = ForwardCache::default();
    let mut dq = vec![0.0f32; config.architecture.actions];
    let mut total = 0.0f64;
    for e in batch {
        let y = double_dqn_target(online, target, prior, e, config.gamma)?;
        let a = e.action.index();
        let mut q_sa = online.forward_cached(&e.observation, &mut cache)?[a];
        if let Some(prior) = prior.filter(|p| p.scale != 0.0) {
            q_sa += prior.scale * prior.network.forward(&e.observation)?.values[a];
        }
        let (loss, dloss) = huber_loss(y - q_sa, delta);
        total += loss as f64;
        dq.fill(0.0);
        dq[a] = -dloss / n;
        online.backward(&cache, &e.observation, &dq, &mut grads);
    }
    optimizer.step(online, &grads, config.learning_rate)?;
    Ok(total / batch.len() as f64)
}

/// What a trained policy does in one state.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub action: EgoAction,
    /// Ensemble statistics; `None` for single-network agents.
    pub report: Option<UncertaintyReport>,
}

/// Per-step losses, one entry per network (ensemble member). `None` when a
/// network did not update.
pub type StepLosses = Vec<Option<f64>>;

/// Interface the training loop drives.
pub trait Agent: Send {
    /// Number of independently trained networks.
    fn networks(&self) -> usize;

    fn begin_episode(&mut self);

    /// Exploratory action during training at 1-based environment step `step`.
    fn act(&mut self, obs: &Observation, step: u64) -> Result<EgoAction>;

    fn remember(&mut self, experience: Experience);

    /// Learning work after environment step `step`.
    fn learn(&mut self, step: u64) -> Result<StepLosses>;

    /// Greedy decision, without any safety gate.
    fn decide(&self, obs: &Observation) -> Result<Decision>;

    /// Network that chose the actions of the current episode, if any.
    fn acting_network(&self) -> Option<usize> {
        None
    }
}

/// Runs `update` `times` times and averages each network's loss over the
/// updates it took part in.
pub(crate) fn repeated_updates(times: u32, mut update: impl FnMut() -> Result<StepLosses>) -> Result<StepLosses> {
    let mut sums: Vec<(f64, u32)> = Vec::new();
    for _ in 0..times {
        let losses = update()?;
        sums.resize(losses.len(), (0.0, 0));
        for (acc, loss) in sums.iter_mut().zip(losses) {
            if let Some(l) = loss {
                acc.0 += l;
                acc.1 += 1;
            }
        }
    }
    Ok(sums.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect())
}

pub(crate) fn action_from_index(a: usize) -> Result<EgoAction> {
    EgoAction::from_index(a).ok_or_else(|| Error::Config(format!("network output {a} is not an action")))
}
