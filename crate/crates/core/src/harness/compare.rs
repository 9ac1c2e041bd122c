//! Side-by-side table of several runs' evaluation curves.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use super::evaluate::{load_metrics, EvaluationResult};
use super::session::{CONFIG_FILE, METRICS_FILE};
use super::SessionConfig;
use crate::error::{Error, Result};

/// Metrics of one finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub label: String,
    pub rows: Vec<EvaluationResult>,
}

impl RunMetrics {
    /// Reads `metrics.csv` from a run directory. The label is the directory
    /// name followed by the agent kind when `config.toml` is present.
    pub fn load(dir: &Path) -> Result<Self> {
        let rows = load_metrics(&dir.join(METRICS_FILE))?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let label = match std::fs::read_to_string(dir.join(CONFIG_FILE)) {
            Ok(text) => {
                let config = SessionConfig::default().overlay(&text)?;
                format!("{name}:{}", config.agent)
            }
            Err(_) => name,
        };
        Ok(RunMetrics { label, rows })
    }

    fn final_normalized_return(&self) -> f64 {
        self.rows.last().map_or(f64::NEG_INFINITY, |r| r.mean_normalized_return)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    /// Run labels, best final normalized return first.
    pub labels: Vec<String>,
    /// Evaluation steps present in every run.
    pub steps: Vec<u64>,
    /// `[step][run]` (collision-free fraction, mean normalized return).
    pub cells: Vec<Vec<(f64, f64)>>,
    pub warnings: Vec<String>,
}

/// Aligns `runs` on their common evaluation steps.
pub fn compare_report(mut runs: Vec<RunMetrics>) -> Result<CompareReport> {
    if runs.is_empty() {
        return Err(Error::Usage("compare needs at least one run".into()));
    }
    // Stable: equal finals keep the order given.
    runs.sort_by(|a, b| b.final_normalized_return().total_cmp(&a.final_normalized_return()));

    let grids: Vec<BTreeSet<u64>> = runs.iter().map(|r| r.rows.iter().map(|e| e.training_step).collect()).collect();
    let mut common = grids[0].clone();
    for g in &grids[1..] {
        common = common.intersection(g).copied().collect();
    }
    let mut warnings = Vec::new();
    if grids.iter().any(|g| g.len() != common.len()) {
        let msg = if common.is_empty() {
            "runs share no evaluation step; the table is empty".to_string()
        } else {
            format!("evaluation grids differ; keeping the {} common steps", common.len())
        };
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let steps: Vec<u64> = common.into_iter().collect();
    let cells = steps
        .iter()
        .map(|&s| {
            runs.iter()
                .map(|r| {
                    let e = r.rows.iter().find(|e| e.training_step == s).expect("step in every run");
                    (e.collision_free_fraction, e.mean_normalized_return)
                })
                .collect()
        })
        .collect();
    Ok(CompareReport {
        labels: runs.into_iter().map(|r| r.label).collect(),
        steps,
        cells,
        warnings,
    })
}

impl CompareReport {
    /// Columns `training_step`, then per run `<label>_collision_free_fraction`
    /// and `<label>_mean_normalized_return`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["training_step".to_string()];
        for l in &self.labels {
            header.push(format!("{l}_collision_free_fraction"));
            header.push(format!("{l}_mean_normalized_return"));
        }
        w.write_record(&header).map_err(|e| Error::format("compare", e.to_string()))?;
        for (step, row) in self.steps.iter().zip(&self.cells) {
            let mut rec = vec![step.to_string()];
            for (cf, nr) in row {
                rec.push(cf.to_string());
                rec.push(nr.to_string());
            }
            w.write_record(&rec).map_err(|e| Error::format("compare", e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("writing comparison", e))
    }

    pub fn render_text(&self) -> String {
        let width = self.labels.iter().map(|l| l.len()).max().unwrap_or(0).max(13);
        let mut s = format!("{:>10}", "step");
        for l in &self.labels {
            s.push_str(&format!("  {l:>width$}"));
        }
        s.push('\n');
        s.push_str(&format!("{:>10}", ""));
        for _ in &self.labels {
            s.push_str(&format!("  {:>width$}", "no-crash/ret"));
        }
        s.push('\n');
        for (step, row) in self.steps.iter().zip(&self.cells) {
            s.push_str(&format!("{step:>10}"));
            for (cf, nr) in row {
                s.push_str(&format!("  {:>width$}", format!("{cf:.2}/{nr:.3}")));
            }
            s.push('\n');
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s
    }
}
