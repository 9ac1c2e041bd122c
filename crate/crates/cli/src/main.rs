use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rpf_core::env::{ScenarioConfig, ScenarioKind};
use rpf_core::harness::checkpoint::load_agent;
use rpf_core::harness::compare::{compare_report, RunMetrics};
use rpf_core::harness::evaluate::{suite_seeds, write_metrics, Greedy, HeuristicPolicy};
use rpf_core::harness::ood::{run_ood_scenario, Gate};
use rpf_core::harness::session::{ensure_baseline, resume_training_session, BASELINE_FILE};
use rpf_core::harness::{evaluate_suite, run_training_session, AgentKind, Baseline, Profile, SessionConfig};

#[derive(Parser)]
#[command(name = "rpf-highway", version, about = "Train and evaluate tactical highway driving agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent with periodic evaluation and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or the heuristic driver, on the fixed suite.
    Evaluate(EvaluateArgs),
    /// Replay an out-of-distribution scenario and write its trace.
    Scenario(ScenarioArgs),
    /// Align the metrics of several runs in one table.
    Compare(CompareArgs),
    /// Compute the heuristic driver's returns on the evaluation suite.
    Baseline(SessionArgs),
}

#[derive(Args)]
struct SessionArgs {
    /// TOML file overlaid on the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    agent: Option<AgentArg>,
    /// Training steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    session: SessionArgs,
    /// Continue from a checkpoint directory; configuration comes from it.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    session: SessionArgs,
    /// Checkpoint to evaluate; without it `--agent heuristic` is evaluated.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the kind in `--scenario-file`, else `stopped`.
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,
    /// Scenario TOML; its kind must agree with `--scenario` when both are given.
    #[arg(long)]
    scenario_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "off")]
    gate: GateArg,
    /// Gate threshold; defaults to the checkpoint's configuration.
    #[arg(long)]
    cv_safe: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories containing metrics.csv.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentArg {
    Rpf,
    Dqn,
    Heuristic,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Nominal,
    Stopped,
    Speeder,
    Oncoming,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GateArg {
    On,
    Off,
}

impl From<ScenarioArg> for ScenarioKind {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Nominal => ScenarioKind::Nominal,
            ScenarioArg::Stopped => ScenarioKind::StoppedVehicle,
            ScenarioArg::Speeder => ScenarioKind::SpeedingVehicle,
            ScenarioArg::Oncoming => ScenarioKind::Oncoming,
        }
    }
}

impl SessionArgs {
    /// Profile defaults, then the config file, then flags.
    fn resolve(&self) -> Result<(SessionConfig, bool)> {
        let profile = match self.profile {
            Some(ProfileArg::Full) => Profile::Full,
            _ => Profile::Desk,
        };
        let mut config = SessionConfig::profile(profile);
        let mut seeded = false;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            config = config.overlay(&text)?;
            seeded = text.parse::<toml::Table>().is_ok_and(|t| t.contains_key("seed"));
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
            seeded = true;
        }
        if let Some(agent) = self.agent {
            config.agent = match agent {
                AgentArg::Rpf => AgentKind::Rpf,
                AgentArg::Dqn => AgentKind::Dqn,
                AgentArg::Heuristic => AgentKind::Heuristic,
            };
        }
        if let Some(steps) = self.steps {
            config.total_steps = steps;
        }
        if let Some(n) = self.eval_interval {
            config.eval_interval = n;
        }
        config.validate()?;
        Ok((config, seeded))
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(args) => train(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Scenario(args) => scenario(args),
        Command::Compare(args) => compare(args),
        Command::Baseline(args) => baseline(args),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let summary = if let Some(checkpoint) = &args.resume {
        resume_training_session(checkpoint, args.session.steps)
            .with_context(|| format!("resuming from {}", checkpoint.display()))?
    } else {
        let (config, seeded) = args.session.resolve()?;
        if !seeded {
            bail!("training needs a master seed: pass --seed or set `seed` in the config file");
        }
        let out = args.session.out_dir("runs/train");
        log::info!("training {} for {} steps into {}", config.agent, config.total_steps, out.display());
        run_training_session(&config, &out)?
    };
    if let Some(last) = summary.evaluations.last() {
        println!(
            "step {}: collision-free {:.2}, normalized return {:.3}",
            last.training_step, last.collision_free_fraction, last.mean_normalized_return
        );
    }
    println!("outputs in {}", summary.out.display());
    Ok(())
}

fn baseline(args: SessionArgs) -> Result<()> {
    let (config, _) = args.resolve()?;
    let out = args.out_dir("runs/train");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let b = ensure_baseline(&out, &config)?;
    let mean = b.rows.iter().map(|r| r.episode_return).sum::<f64>() / b.rows.len() as f64;
    println!("{} episodes, mean heuristic return {mean:.2}, written to {}", b.rows.len(), out.join(BASELINE_FILE).display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (result, out) = match &args.checkpoint {
        Some(dir) => {
            let (manifest, agent) = load_agent(dir)?;
            let config = manifest.config;
            let out = args
                .session
                .out
                .clone()
                .unwrap_or_else(|| dir.parent().unwrap_or(Path::new(".")).to_path_buf());
            let seeds = suite_seeds(config.seed, config.eval_episodes);
            let baseline = Baseline::load(&out.join(BASELINE_FILE), config.vehicle_count)?;
            let r = evaluate_suite(&Greedy(&agent), &seeds, &baseline, manifest.step, config.learning().gamma)?;
            (r, out)
        }
        None => {
            let (config, _) = args.session.resolve()?;
            if config.agent != AgentKind::Heuristic {
                bail!("pass --checkpoint to evaluate a trained agent");
            }
            let out = args.session.out_dir("runs/train");
            let seeds = suite_seeds(config.seed, config.eval_episodes);
            let baseline = Baseline::load(&out.join(BASELINE_FILE), config.vehicle_count)?;
            let r = evaluate_suite(&HeuristicPolicy, &seeds, &baseline, 0, config.learning().gamma)?;
            (r, out)
        }
    };
    let path = out.join(format!("evaluation_{}.csv", result.training_step));
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_metrics(std::slice::from_ref(&result), file)?;
    println!(
        "collision-free {:.2}, normalized return {:.3} ± {:.3}, written to {}",
        result.collision_free_fraction,
        result.mean_normalized_return,
        result.normalized_return_std,
        path.display()
    );
    Ok(())
}

fn scenario(args: ScenarioArgs) -> Result<()> {
    let (manifest, agent) = load_agent(&args.checkpoint)?;
    let requested = args.scenario.map(ScenarioKind::from);
    let config = match &args.scenario_file {
        Some(path) => {
            let c = ScenarioConfig::load(path)?;
            if let Some(kind) = requested.filter(|&k| k != c.kind) {
                bail!("{} describes a {} scenario, not {}", path.display(), c.kind.name(), kind.name());
            }
            c
        }
        None => ScenarioConfig::of_kind(requested.unwrap_or(ScenarioKind::StoppedVehicle)),
    };
    let gate = match args.gate {
        GateArg::On => Gate::On {
            cv_safe: args.cv_safe.unwrap_or(manifest.config.cv_safe),
        },
        GateArg::Off => Gate::Off,
    };
    let trace = run_ood_scenario(&agent, &config, gate)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(format!("trace_{}.csv", config.kind.name()));
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    trace.write_csv(file)?;
    println!(
        "{} steps, {}, max chosen c_v {}, fallback on {} steps, written to {}",
        trace.rows.len(),
        if trace.collided() { "collision" } else { "no collision" },
        trace.max_chosen_cv().map_or("-".into(), |c| format!("{c:.4}")),
        trace.fallback_steps(),
        path.display()
    );
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let runs = args
        .runs
        .iter()
        .map(|d| RunMetrics::load(d).with_context(|| format!("loading {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let report = compare_report(runs)?;
    let text = report.render_text();
    print!("{text}");
    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let csv = out.join("compare.csv");
        report.write_csv(fs::File::create(&csv).with_context(|| format!("creating {}", csv.display()))?)?;
        fs::write(out.join("compare.txt"), text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}
