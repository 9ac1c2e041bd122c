//! Ensemble disagreement as an uncertainty measure, and the action gate
//! built on it.

use serde::Serialize;

use crate::env::EgoAction;
use crate::error::{Error, Result};
use crate::nn::argmax;

/// Default gate threshold on the coefficient of variation.
pub const DEFAULT_CV_SAFE: f64 = 0.02;
/// Default c_v regarded as full confidence.
pub const DEFAULT_CV_MIN: f64 = 0.01;
/// Means closer to zero than this give an infinite c_v.
pub const ZERO_MEAN_TOLERANCE: f64 = 1e-6;

/// Per-action ensemble statistics for one decision.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UncertaintyReport {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub cv: Vec<f64>,
    pub action: EgoAction,
    pub fallback_used: bool,
}

/// Mean, population standard deviation and c_v of each action over the
/// members' Q-values (`member_q[k][a]`).
pub fn ensemble_statistics(member_q: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let k = member_q.len();
    if k < 2 {
        return Err(Error::Config(format!("c_v needs at least 2 ensemble members, got {k}")));
    }
    let actions = member_q[0].len();
    if member_q.iter().any(|q| q.len() != actions) {
        return Err(Error::Config("members disagree on the action count".into()));
    }
    let mut mean = vec![0.0; actions];
    let mut std = vec![0.0; actions];
    let mut cv = vec![0.0; actions];
    for a in 0..actions {
        let m = member_q.iter().map(|q| q[a]).sum::<f64>() / k as f64;
        let var = member_q.iter().map(|q| (q[a] - m).powi(2)).sum::<f64>() / k as f64;
        mean[a] = m;
        std[a] = var.sqrt();
        cv[a] = if m.abs() < ZERO_MEAN_TOLERANCE {
            f64::INFINITY
        } else {
            std[a] / m.abs()
        };
    }
    Ok((mean, std, cv))
}

pub fn coefficient_of_variation(member_q: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(ensemble_statistics(member_q)?.2)
}

/// Highest mean-Q action among those with `c_v < cv_safe`; the fallback
/// hard brake when none qualifies.
pub fn select_safe_action(member_q: &[Vec<f64>], cv_safe: f64) -> Result<UncertaintyReport> {
    let (mean, std, cv) = ensemble_statistics(member_q)?;
    let best = (0..mean.len())
        .filter(|&a| cv[a] < cv_safe)
        .fold(None, |best: Option<usize>, a| match best {
            Some(b) if mean[b] >= mean[a] => Some(b),
            _ => Some(a),
        });
    let (action, fallback_used) = match best {
        Some(a) => (action_at(a)?, false),
        None => (EgoAction::FALLBACK, true),
    };
    Ok(UncertaintyReport {
        mean,
        std,
        cv,
        action,
        fallback_used,
    })
}

/// Ungated decision: plain mean-Q argmax, statistics still reported.
pub fn select_mean_action(member_q: &[Vec<f64>]) -> Result<UncertaintyReport> {
    let (mean, std, cv) = ensemble_statistics(member_q)?;
    let action = action_at(argmax(&mean))?;
    Ok(UncertaintyReport {
        mean,
        std,
        cv,
        action,
        fallback_used: false,
    })
}

fn action_at(a: usize) -> Result<EgoAction> {
    EgoAction::from_index(a).ok_or_else(|| Error::Config(format!("action index {a} has no ego action")))
}

/// Linear confidence: 1 at `cv_min`, 0 at `cv_safe`, negative beyond.
pub fn confidence_measure(cv: f64, cv_min: f64, cv_safe: f64) -> Result<f64> {
    if !(cv_safe > cv_min) || cv_min < 0.0 {
        return Err(Error::Config(format!(
            "confidence needs 0 <= c_v min < c_v safe, got {cv_min} and {cv_safe}"
        )));
    }
    Ok(1.0 - (cv - cv_min) / (cv_safe - cv_min))
}

impl UncertaintyReport {
    pub fn chosen_cv(&self) -> f64 {
        self.cv[self.action.index()]
    }

    pub fn csv_header(actions: usize) -> Vec<String> {
        let mut h = Vec::with_capacity(3 * actions + 2);
        for name in ["mean", "std", "cv"] {
            h.extend((0..actions).map(|a| format!("{name}_{a}")));
        }
        h.push("action".into());
        h.push("fallback".into());
        h
    }

    pub fn csv_record(&self) -> Vec<String> {
        let mut r: Vec<String> = self
            .mean
            .iter()
            .chain(&self.std)
            .chain(&self.cv)
            .map(|x| x.to_string())
            .collect();
        r.push(self.action.index().to_string());
        r.push(u8::from(self.fallback_used).to_string());
        r
    }
}
