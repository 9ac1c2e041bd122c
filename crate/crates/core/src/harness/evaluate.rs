//! Greedy evaluation on a fixed suite of episodes, normalized by the
//! heuristic driver's returns on the same episodes.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DiscountedReturn;
use crate::agent::{Agent, Decision, EnsembleAgent};
use crate::env::{heuristic_driver_policy, observe, EgoAction, ScenarioConfig, TrafficState};
use crate::error::{Error, Result};
use crate::nn::Observation;
use crate::rng::{stream, Stream};

/// Episode seeds of the evaluation suite; the same for every evaluation
/// and every agent of a session.
pub fn suite_seeds(master_seed: u64, episodes: usize) -> Vec<u64> {
    let mut rng = stream(master_seed, Stream::EvaluationSuite, 0);
    (0..episodes).map(|_| rng.gen()).collect()
}

/// A fixed decision rule, queried once per step.
pub trait Policy: Sync {
    fn decide(&self, state: &TrafficState, obs: &Observation) -> Result<Decision>;
}

pub struct HeuristicPolicy;

impl Policy for HeuristicPolicy {
    fn decide(&self, state: &TrafficState, _obs: &Observation) -> Result<Decision> {
        Ok(Decision {
            action: heuristic_driver_policy(state),
            report: None,
        })
    }
}

/// Same action in every state.
pub struct FixedAction(pub EgoAction);

impl Policy for FixedAction {
    fn decide(&self, _state: &TrafficState, _obs: &Observation) -> Result<Decision> {
        Ok(Decision {
            action: self.0,
            report: None,
        })
    }
}

/// The agent's greedy decision, no safety gate.
pub struct Greedy<'a, A>(pub &'a A);

impl<A: Agent + Sync> Policy for Greedy<'_, A> {
    fn decide(&self, _state: &TrafficState, obs: &Observation) -> Result<Decision> {
        self.0.decide(obs)
    }
}

/// Ensemble decision restricted to actions with `c_v < cv_safe`.
pub struct Gated<'a> {
    pub agent: &'a EnsembleAgent,
    pub cv_safe: f64,
}

impl Policy for Gated<'_> {
    fn decide(&self, _state: &TrafficState, obs: &Observation) -> Result<Decision> {
        let report = self.agent.decide_safe(obs, self.cv_safe)?;
        Ok(Decision {
            action: report.action,
            report: Some(report),
        })
    }
}

/// Summary of one played episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub episode_return: f64,
    pub discounted_return: f64,
    pub crashed: bool,
    pub steps: u32,
    /// `c_v` of every chosen action, when the policy reports it.
    pub chosen_cv: Vec<f64>,
    pub fallback_steps: u64,
}

pub fn run_episode<P: Policy + ?Sized>(policy: &P, scenario: &ScenarioConfig, gamma: f64) -> Result<EpisodeOutcome> {
    let mut state = TrafficState::reset(scenario)?;
    let mut ret = 0.0;
    let mut discounted = DiscountedReturn::new(gamma);
    let mut crashed = false;
    let mut chosen_cv = Vec::new();
    let mut fallback_steps = 0;
    while !state.terminated {
        let obs = observe(&state);
        let decision = policy.decide(&state, &obs)?;
        if let Some(report) = &decision.report {
            chosen_cv.push(report.chosen_cv());
            fallback_steps += report.fallback_used as u64;
        }
        let info = state.advance(decision.action)?;
        ret += info.reward;
        discounted.push(info.reward);
        crashed |= info.events.crashed();
    }
    Ok(EpisodeOutcome {
        seed: scenario.seed,
        episode_return: ret,
        discounted_return: discounted.value(),
        crashed,
        steps: state.elapsed_steps,
        chosen_cv,
        fallback_steps,
    })
}

/// Plays every seed; outcomes come back in seed order.
pub fn run_episodes<P: Policy + ?Sized>(
    policy: &P,
    seeds: &[u64],
    vehicle_count: usize,
    gamma: f64,
) -> Result<Vec<EpisodeOutcome>> {
    let template = ScenarioConfig::nominal(vehicle_count);
    seeds
        .par_iter()
        .map(|&seed| run_episode(policy, &template.with_seed(seed), gamma))
        .collect()
}

/// One row of `baseline.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub seed: u64,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub discounted_return: f64,
}

/// Heuristic-driver returns on the evaluation suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Baseline {
    pub vehicle_count: usize,
    pub rows: Vec<BaselineRow>,
}

impl Baseline {
    pub fn compute(seeds: &[u64], vehicle_count: usize, gamma: f64) -> Result<Self> {
        let rows = run_episodes(&HeuristicPolicy, seeds, vehicle_count, gamma)?
            .into_iter()
            .map(|o| BaselineRow {
                seed: o.seed,
                episode_return: o.episode_return,
                discounted_return: o.discounted_return,
            })
            .collect();
        Ok(Baseline { vehicle_count, rows })
    }

    pub fn return_for(&self, seed: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.seed == seed).map(|r| r.episode_return)
    }

    /// True when the baseline covers exactly `seeds` in order.
    pub fn matches(&self, seeds: &[u64], vehicle_count: usize) -> bool {
        self.vehicle_count == vehicle_count && self.rows.iter().map(|r| r.seed).eq(seeds.iter().copied())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_error("baseline", e))?;
        }
        w.flush().map_err(|e| Error::io("writing baseline", e))
    }

    pub fn read_csv<R: Read>(input: R, vehicle_count: usize) -> Result<Self> {
        let rows = csv::Reader::from_reader(input)
            .deserialize()
            .collect::<std::result::Result<Vec<BaselineRow>, _>>()
            .map_err(|e| Error::format("baseline", e.to_string()))?;
        Ok(Baseline { vehicle_count, rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_csv(file)
    }

    /// Loads `path`; a missing file is [`Error::MissingBaseline`].
    pub fn load(path: &Path, vehicle_count: usize) -> Result<Self> {
        match std::fs::File::open(path) {
            Ok(f) => Self::read_csv(f, vehicle_count),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingBaseline),
            Err(e) => Err(Error::io(format!("opening {}", path.display()), e)),
        }
    }
}

fn csv_error(what: &'static str, e: csv::Error) -> Error {
    Error::format(what, e.to_string())
}

/// Aggregate of one test phase. `c_v` statistics cover the chosen actions
/// of all steps with a finite `c_v`; they are empty for single-network agents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub training_step: u64,
    pub episodes: usize,
    pub collision_free_fraction: f64,
    /// Mean over episodes of agent return / heuristic return.
    pub mean_normalized_return: f64,
    pub normalized_return_std: f64,
    pub mean_return: f64,
    pub return_std: f64,
    pub mean_discounted_return: f64,
    pub cv_count: u64,
    pub cv_mean: Option<f64>,
    pub cv_std: Option<f64>,
    pub cv_p1: Option<f64>,
    pub cv_median: Option<f64>,
    pub cv_p99: Option<f64>,
    pub fallback_steps: u64,
}

impl EvaluationResult {
    pub fn from_outcomes(training_step: u64, outcomes: &[EpisodeOutcome], baseline: &Baseline) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Usage("no evaluation episodes".into()));
        }
        let reference: HashMap<u64, f64> = baseline.rows.iter().map(|r| (r.seed, r.episode_return)).collect();
        let normalized = outcomes
            .iter()
            .map(|o| {
                reference
                    .get(&o.seed)
                    .map(|h| o.episode_return / h)
                    .ok_or(Error::MissingBaseline)
            })
            .collect::<Result<Vec<f64>>>()?;
        let returns: Vec<f64> = outcomes.iter().map(|o| o.episode_return).collect();
        let discounted: Vec<f64> = outcomes.iter().map(|o| o.discounted_return).collect();
        let mut cvs: Vec<f64> = outcomes
            .iter()
            .flat_map(|o| o.chosen_cv.iter().copied())
            .filter(|c| c.is_finite())
            .collect();
        cvs.sort_by(f64::total_cmp);
        let n = outcomes.len() as f64;
        let (cv_mean, cv_std) = match mean_std(&cvs) {
            Some((m, s)) => (Some(m), Some(s)),
            None => (None, None),
        };
        Ok(EvaluationResult {
            training_step,
            episodes: outcomes.len(),
            collision_free_fraction: outcomes.iter().filter(|o| !o.crashed).count() as f64 / n,
            mean_normalized_return: mean_std(&normalized).map_or(0.0, |m| m.0),
            normalized_return_std: mean_std(&normalized).map_or(0.0, |m| m.1),
            mean_return: mean_std(&returns).map_or(0.0, |m| m.0),
            return_std: mean_std(&returns).map_or(0.0, |m| m.1),
            mean_discounted_return: mean_std(&discounted).map_or(0.0, |m| m.0),
            cv_count: cvs.len() as u64,
            cv_mean,
            cv_std,
            cv_p1: percentile(&cvs, 1.0),
            cv_median: percentile(&cvs, 50.0),
            cv_p99: percentile(&cvs, 99.0),
            fallback_steps: outcomes.iter().map(|o| o.fallback_steps).sum(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.collision_free_fraction) {
            return Err(Error::format(
                "metrics",
                format!("collision-free fraction {} outside [0, 1]", self.collision_free_fraction),
            ));
        }
        if self.episodes == 0 {
            return Err(Error::format("metrics", "row with zero episodes"));
        }
        Ok(())
    }
}

/// Population mean and standard deviation.
fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Linear interpolation between closest ranks of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Runs `policy` greedily on `seeds` and normalizes by `baseline`.
pub fn evaluate_suite<P: Policy + ?Sized>(
    policy: &P,
    seeds: &[u64],
    baseline: &Baseline,
    training_step: u64,
    gamma: f64,
) -> Result<EvaluationResult> {
    if seeds.iter().any(|&s| baseline.return_for(s).is_none()) {
        return Err(Error::MissingBaseline);
    }
    let outcomes = run_episodes(policy, seeds, baseline.vehicle_count, gamma)?;
    EvaluationResult::from_outcomes(training_step, &outcomes, baseline)
}

pub fn write_metrics<W: Write>(rows: &[EvaluationResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| csv_error("metrics", e))?;
    }
    w.flush().map_err(|e| Error::io("writing metrics", e))
}

/// Parses a metrics CSV; rows must have strictly increasing steps.
pub fn read_metrics<R: Read>(input: R) -> Result<Vec<EvaluationResult>> {
    let rows = csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<Vec<EvaluationResult>, _>>()
        .map_err(|e| Error::format("metrics", e.to_string()))?;
    for r in &rows {
        r.validate()?;
    }
    if rows.windows(2).any(|w| w[0].training_step >= w[1].training_step) {
        return Err(Error::format("metrics", "training steps are not increasing"));
    }
    Ok(rows)
}

pub fn load_metrics(path: &Path) -> Result<Vec<EvaluationResult>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_metrics(file)
}
