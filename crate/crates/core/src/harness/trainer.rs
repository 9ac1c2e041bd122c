//! The environment-interaction loop.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgentKind, SessionConfig};
use crate::agent::{Agent, Decision, DqnAgent, EnsembleAgent, StepLosses};
use crate::env::{observe, EgoAction, ScenarioConfig, TrafficState};
use crate::error::{Error, Result};
use crate::nn::Observation;
use crate::replay::Experience;
use crate::rng::{stream, Stream};

/// A learning agent chosen at run time.
#[derive(Clone, Debug)]
pub enum AnyAgent {
    Ensemble(EnsembleAgent),
    Dqn(DqnAgent),
}

impl AnyAgent {
    pub fn new(config: &SessionConfig) -> Result<Self> {
        match config.agent {
            AgentKind::Rpf => Ok(AnyAgent::Ensemble(EnsembleAgent::new(config.ensemble.clone(), config.seed)?)),
            AgentKind::Dqn => Ok(AnyAgent::Dqn(DqnAgent::new(config.dqn.clone(), config.seed)?)),
            AgentKind::Heuristic => Err(Error::Usage(
                "the heuristic driver does not learn; use the baseline or evaluate commands".into(),
            )),
        }
    }

    pub fn kind(&self) -> AgentKind {
        match self {
            AnyAgent::Ensemble(_) => AgentKind::Rpf,
            AnyAgent::Dqn(_) => AgentKind::Dqn,
        }
    }

    pub fn as_ensemble(&self) -> Option<&EnsembleAgent> {
        match self {
            AnyAgent::Ensemble(a) => Some(a),
            AnyAgent::Dqn(_) => None,
        }
    }

    fn inner(&self) -> &dyn Agent {
        match self {
            AnyAgent::Ensemble(a) => a,
            AnyAgent::Dqn(a) => a,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Agent {
        match self {
            AnyAgent::Ensemble(a) => a,
            AnyAgent::Dqn(a) => a,
        }
    }
}

impl Agent for AnyAgent {
    fn networks(&self) -> usize {
        self.inner().networks()
    }

    fn begin_episode(&mut self) {
        self.inner_mut().begin_episode()
    }

    fn act(&mut self, obs: &Observation, step: u64) -> Result<EgoAction> {
        self.inner_mut().act(obs, step)
    }

    fn remember(&mut self, experience: Experience) {
        self.inner_mut().remember(experience)
    }

    fn learn(&mut self, step: u64) -> Result<StepLosses> {
        self.inner_mut().learn(step)
    }

    fn decide(&self, obs: &Observation) -> Result<Decision> {
        self.inner().decide(obs)
    }

    fn acting_network(&self) -> Option<usize> {
        self.inner().acting_network()
    }
}

/// The episode in progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeProgress {
    pub state: TrafficState,
    pub episode_return: f64,
    pub loss_sums: Vec<f64>,
    pub loss_counts: Vec<u64>,
    /// Observation of `state`, shared with the replay memory.
    #[serde(skip)]
    observation: Option<Arc<Observation>>,
}

/// Loop position, enough to continue a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerCounters {
    /// Environment steps taken so far.
    pub step: u64,
    /// Episodes finished so far.
    pub episode: u64,
    pub episode_seeds: ChaCha8Rng,
    pub current: Option<EpisodeProgress>,
}

/// One row of `training_log.csv`: per finished episode, one row per network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub training_step: u64,
    pub episode: u64,
    pub member_k: usize,
    /// Mean loss of this network's updates during the episode.
    pub loss_mean: Option<f64>,
    /// Undiscounted return, on the row of the network that drove.
    pub episode_return: Option<f64>,
}

pub struct Trainer<A: Agent> {
    pub agent: A,
    /// Template for training episodes; the seed is replaced per episode.
    pub scenario: ScenarioConfig,
    pub counters: TrainerCounters,
    log: Vec<LogRow>,
}

impl<A: Agent> Trainer<A> {
    pub fn new(agent: A, vehicle_count: usize, seed: u64) -> Self {
        Self::with_counters(
            agent,
            vehicle_count,
            TrainerCounters {
                step: 0,
                episode: 0,
                episode_seeds: stream(seed, Stream::Episodes, 0),
                current: None,
            },
        )
    }

    pub fn with_counters(agent: A, vehicle_count: usize, counters: TrainerCounters) -> Self {
        Trainer {
            agent,
            scenario: ScenarioConfig::nominal(vehicle_count),
            counters,
            log: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.counters.step
    }

    /// Takes one environment step, stores the transition and runs the
    /// agent's learning work for that step.
    pub fn step(&mut self) -> Result<()> {
        if self.counters.current.is_none() {
            let seed = self.counters.episode_seeds.gen::<u64>();
            let state = TrafficState::reset(&self.scenario.with_seed(seed))?;
            self.agent.begin_episode();
            let n = self.agent.networks();
            self.counters.current = Some(EpisodeProgress {
                state,
                episode_return: 0.0,
                loss_sums: vec![0.0; n],
                loss_counts: vec![0; n],
                observation: None,
            });
        }
        self.counters.step += 1;
        let step = self.counters.step;
        let progress = self.counters.current.as_mut().expect("episode in progress");

        let obs = match progress.observation.take() {
            Some(obs) => obs,
            None => Arc::new(observe(&progress.state)),
        };
        let action = self.agent.act(&obs, step)?;
        let info = progress.state.advance(action)?;
        progress.episode_return += info.reward;

        // A timeout is not a terminal state of the task, so its last
        // transition is dropped rather than stored as terminal.
        let timed_out = info.terminated && !info.events.crashed();
        if !timed_out {
            let next = Arc::new(observe(&progress.state));
            self.agent.remember(Experience {
                observation: obs,
                action,
                reward: info.reward,
                next_observation: next.clone(),
                terminal: info.terminated,
            });
            progress.observation = Some(next);
        }

        let losses = self.agent.learn(step)?;
        for (k, loss) in losses.into_iter().enumerate() {
            if let Some(l) = loss {
                progress.loss_sums[k] += l;
                progress.loss_counts[k] += 1;
            }
        }

        if info.terminated {
            let progress = self.counters.current.take().expect("episode in progress");
            let driver = self.agent.acting_network().unwrap_or(0);
            for k in 0..progress.loss_sums.len() {
                self.log.push(LogRow {
                    training_step: step,
                    episode: self.counters.episode,
                    member_k: k,
                    loss_mean: (progress.loss_counts[k] > 0)
                        .then(|| progress.loss_sums[k] / progress.loss_counts[k] as f64),
                    episode_return: (k == driver).then_some(progress.episode_return),
                });
            }
            self.counters.episode += 1;
        }
        Ok(())
    }

    /// Steps until `step_count() == step`.
    pub fn run_until(&mut self, step: u64) -> Result<()> {
        while self.counters.step < step {
            self.step()?;
        }
        Ok(())
    }

    /// Log rows of episodes finished since the last call.
    pub fn drain_log(&mut self) -> Vec<LogRow> {
        std::mem::take(&mut self.log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Profile;

    fn tiny(agent: AgentKind) -> SessionConfig {
        let mut c = SessionConfig::profile(Profile::Desk);
        c.agent = agent;
        for l in [&mut c.ensemble.learning, &mut c.dqn.learning] {
            l.learning_starts = 50;
            l.batch_size = 8;
            l.target_update = 40;
            l.replay_capacity = 1000;
        }
        c
    }

    #[test]
    fn log_has_one_row_per_member_and_one_return() {
        let c = tiny(AgentKind::Rpf);
        let mut t = Trainer::new(AnyAgent::new(&c).unwrap(), 4, 3);
        t.run_until(300).unwrap();
        let log = t.drain_log();
        assert!(!log.is_empty());
        assert_eq!(log.len() as u64, t.counters.episode * 3);
        for chunk in log.chunks(3) {
            assert_eq!(chunk.iter().filter(|r| r.episode_return.is_some()).count(), 1);
            assert!(chunk.iter().all(|r| r.episode == chunk[0].episode));
        }
        assert!(log.iter().any(|r| r.loss_mean.is_some()));
        assert!(log.iter().take_while(|r| r.training_step < 50).all(|r| r.loss_mean.is_none()));
    }

    /// Cruises in its lane and records what it is given.
    struct Cruise(Vec<Experience>);

    impl Agent for Cruise {
        fn networks(&self) -> usize {
            1
        }
        fn begin_episode(&mut self) {}
        fn act(&mut self, _obs: &Observation, _step: u64) -> Result<EgoAction> {
            Ok(EgoAction::compose(0.0, crate::env::Lateral::Stay).unwrap())
        }
        fn remember(&mut self, experience: Experience) {
            self.0.push(experience);
        }
        fn learn(&mut self, _step: u64) -> Result<StepLosses> {
            Ok(vec![None])
        }
        fn decide(&self, _obs: &Observation) -> Result<Decision> {
            unreachable!()
        }
    }

    #[test]
    fn timeouts_are_not_stored() {
        // Alone on the road every episode times out after 100 steps.
        let mut t = Trainer::new(Cruise(vec![]), 0, 1);
        t.run_until(1000).unwrap();
        assert_eq!(t.counters.episode, 10);
        assert_eq!(t.agent.0.len(), 10 * 99);
        assert!(t.agent.0.iter().all(|e| !e.terminal));
        // Consecutive transitions share the observation object.
        assert!(Arc::ptr_eq(&t.agent.0[0].next_observation, &t.agent.0[1].observation));
    }

    #[test]
    fn split_runs_match_one_run() {
        let c = tiny(AgentKind::Rpf);
        let mut a = Trainer::new(AnyAgent::new(&c).unwrap(), 6, 8);
        a.run_until(240).unwrap();
        let mut b = Trainer::new(AnyAgent::new(&c).unwrap(), 6, 8);
        b.run_until(100).unwrap();
        let mut log = b.drain_log();
        b.run_until(240).unwrap();
        log.extend(b.drain_log());
        assert_eq!(a.drain_log(), log);
        assert_eq!(a.counters, b.counters);
    }

    #[test]
    fn heuristic_cannot_train() {
        assert!(matches!(AnyAgent::new(&tiny(AgentKind::Heuristic)), Err(Error::Usage(_))));
    }
}
