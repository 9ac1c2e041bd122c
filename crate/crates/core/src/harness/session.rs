//! A training run: periodic greedy evaluation, checkpoints and the files
//! written to the output directory.
//!
//! | file | content |
//! |---|---|
//! | `config.toml` | the full session configuration |
//! | `baseline.csv` | heuristic-driver returns on the evaluation suite |
//! | `metrics.csv` | one [`EvaluationResult`] per evaluation |
//! | `training_log.csv` | one [`LogRow`] per finished episode and network |
//! | `checkpoint_<step>/` | see [`super::checkpoint`] |
//! | `report.txt` | human-readable summary |

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use super::checkpoint::{load_trainer, prune_replays, write_checkpoint};
use super::evaluate::{evaluate_suite, load_metrics, suite_seeds, write_metrics, Baseline, EvaluationResult, Greedy};
use super::trainer::{AnyAgent, LogRow, Trainer};
use super::SessionConfig;
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const BASELINE_FILE: &str = "baseline.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOG_FILE: &str = "training_log.csv";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct SessionSummary {
    pub out: PathBuf,
    pub config: SessionConfig,
    pub evaluations: Vec<EvaluationResult>,
    /// Checkpoints written by this invocation.
    pub checkpoints: Vec<PathBuf>,
}

/// Trains from scratch into `out`, replacing earlier session files there.
pub fn run_training_session(config: &SessionConfig, out: &Path) -> Result<SessionSummary> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    write_text(&out.join(CONFIG_FILE), &config.to_toml())?;
    let log = out.join(LOG_FILE);
    if log.exists() {
        fs::remove_file(&log).map_err(|e| Error::io(format!("removing {}", log.display()), e))?;
    }
    let baseline = ensure_baseline(out, config)?;
    let trainer = Trainer::new(AnyAgent::new(config)?, config.vehicle_count, config.seed);
    drive(config.clone(), out, trainer, Vec::new(), &baseline)
}

/// Continues the run that wrote `checkpoint`, optionally with a new step
/// budget. Metrics and log rows after the checkpoint are discarded.
pub fn resume_training_session(checkpoint: &Path, total_steps: Option<u64>) -> Result<SessionSummary> {
    let (manifest, trainer) = load_trainer(checkpoint)?;
    let out = checkpoint
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let mut config = manifest.config;
    if let Some(steps) = total_steps {
        config.total_steps = steps;
    }
    write_text(&out.join(CONFIG_FILE), &config.to_toml())?;
    let step = manifest.step;

    let metrics_path = out.join(METRICS_FILE);
    let mut evaluations = if metrics_path.exists() { load_metrics(&metrics_path)? } else { Vec::new() };
    evaluations.retain(|r| r.training_step <= step);
    write_metrics_file(&metrics_path, &evaluations)?;

    let log_path = out.join(LOG_FILE);
    if log_path.exists() {
        let rows: Vec<LogRow> = csv::Reader::from_path(&log_path)
            .and_then(|mut r| r.deserialize().collect())
            .map_err(|e| Error::format("training log", e.to_string()))?;
        fs::remove_file(&log_path).map_err(|e| Error::io(format!("removing {}", log_path.display()), e))?;
        let kept: Vec<LogRow> = rows.into_iter().filter(|r| r.training_step <= step).collect();
        append_log(&log_path, &kept)?;
    }

    let baseline = ensure_baseline(&out, &config)?;
    drive(config, &out, trainer, evaluations, &baseline)
}

/// Loads `baseline.csv` from `out`, computing and saving it first when it is
/// absent or was made for a different suite.
pub fn ensure_baseline(out: &Path, config: &SessionConfig) -> Result<Baseline> {
    let seeds = suite_seeds(config.seed, config.eval_episodes);
    let path = out.join(BASELINE_FILE);
    match Baseline::load(&path, config.vehicle_count) {
        Ok(b) if b.matches(&seeds, config.vehicle_count) => return Ok(b),
        Ok(_) => log::warn!("{} belongs to another episode suite; recomputing", path.display()),
        Err(Error::MissingBaseline) => {}
        Err(e) => return Err(e),
    }
    let b = Baseline::compute(&seeds, config.vehicle_count, config.learning().gamma)?;
    b.save(&path)?;
    Ok(b)
}

fn drive(
    config: SessionConfig,
    out: &Path,
    mut trainer: Trainer<AnyAgent>,
    mut evaluations: Vec<EvaluationResult>,
    baseline: &Baseline,
) -> Result<SessionSummary> {
    let seeds = suite_seeds(config.seed, config.eval_episodes);
    let gamma = config.learning().gamma;
    let interval = config.eval_interval;
    let mut checkpoints = Vec::new();
    while trainer.step_count() < config.total_steps {
        let next = ((trainer.step_count() / interval + 1) * interval).min(config.total_steps);
        trainer.run_until(next)?;
        append_log(&out.join(LOG_FILE), &trainer.drain_log())?;
        let step = trainer.step_count();
        if step % interval == 0 {
            let result = evaluate_suite(&Greedy(&trainer.agent), &seeds, baseline, step, gamma)?;
            log::info!(
                "step {step}: collision-free {:.2}, normalized return {:.3}, median c_v {}",
                result.collision_free_fraction,
                result.mean_normalized_return,
                result.cv_median.map_or("-".into(), |c| format!("{c:.4}")),
            );
            evaluations.push(result);
            write_metrics_file(&out.join(METRICS_FILE), &evaluations)?;
        }
        let dir = write_checkpoint(out, &trainer, &config, true)?;
        prune_replays(out, &dir)?;
        checkpoints.push(dir);
    }
    write_text(&out.join(REPORT_FILE), &render_report(&config, &evaluations))?;
    Ok(SessionSummary {
        out: out.to_path_buf(),
        config,
        evaluations,
        checkpoints,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_metrics_file(path: &Path, rows: &[EvaluationResult]) -> Result<()> {
    let tmp = path.with_extension("csv.partial");
    let file = fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    write_metrics(rows, file)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming {}", tmp.display()), e))
}

fn append_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let fresh = file.metadata().map(|m| m.len() == 0).unwrap_or(true);
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::format("training log", e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}

pub fn render_report(config: &SessionConfig, evaluations: &[EvaluationResult]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "agent {}  seed {}  steps {}  vehicles {}  suite {} episodes\n",
        config.agent, config.seed, config.total_steps, config.vehicle_count, config.eval_episodes
    ));
    if config.agent == super::AgentKind::Rpf {
        s.push_str(&format!(
            "ensemble K={}  prior scale {}  p_add {}\n",
            config.ensemble.members, config.ensemble.prior_scale, config.ensemble.p_add
        ));
    }
    s.push('\n');
    s.push_str(&format!(
        "{:>10} {:>8} {:>10} {:>8} {:>10} {:>10} {:>10}\n",
        "step", "no-crash", "norm.ret", "±", "cv p1", "cv median", "cv p99"
    ));
    for r in evaluations {
        s.push_str(&format!(
            "{:>10} {:>8.2} {:>10.3} {:>8.3} {:>10} {:>10} {:>10}\n",
            r.training_step,
            r.collision_free_fraction,
            r.mean_normalized_return,
            r.normalized_return_std,
            fmt_opt(r.cv_p1),
            fmt_opt(r.cv_median),
            fmt_opt(r.cv_p99),
        ));
    }
    match evaluations.last() {
        Some(last) => s.push_str(&format!(
            "\nfinal: collision-free {:.2}, normalized return {:.3}, mean return {:.2}\n",
            last.collision_free_fraction, last.mean_normalized_return, last.mean_return
        )),
        None => s.push_str("\nno evaluations\n"),
    }
    s
}
