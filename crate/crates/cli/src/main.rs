use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use guardian::harness::{
    compute_metrics, graph_from_log, make_embedder, metrics_csv, read_episodes, run_experiment, trial_dir,
    write_graph, write_metrics, ExperimentConfig, GraphFormat,
};
use guardian::simulator::AttackKind;

#[derive(Parser)]
#[command(name = "guardian", version, about = "Simulate, defend and score multi-agent debates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run episodes without the detector.
    Simulate(Common),
    /// Run episodes with the detection and pruning pipeline.
    Defend(Common),
    /// Fit a detector on a clean stream and save it to --checkpoint.
    Train(Common),
    /// Recompute metrics.csv from the episode logs in --out.
    Metrics(Common),
    /// Write temporal graphs for the episode logs in --out.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Format::Both)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Dot,
    Both,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    topology: Option<f64>,
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory (input directory for `metrics` and `export`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Detector checkpoint to load, or to write for `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Any config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self, base: Option<&Path>) -> Result<ExperimentConfig> {
        let mut cfg = match self.config.as_deref().or(base) {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        let flags: [(&str, Option<String>); 8] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("n_agents", self.agents.map(|v| v.to_string())),
            ("max_rounds", self.rounds.map(|v| v.to_string())),
            ("topology", self.topology.map(|v| v.to_string())),
            ("attack", self.attack.clone()),
            ("variant", self.variant.clone()),
            ("tasks", self.tasks.map(|v| v.to_string())),
            ("trials", self.trials.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v).with_context(|| format!("--{key}"))?;
            }
        }
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.apply_env();
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required")
    }
}

fn run(common: &Common, defense: bool) -> Result<()> {
    let mut cfg = common.load(None)?;
    cfg.defense = defense;
    if defense && common.checkpoint.is_some() {
        cfg.checkpoint = common.checkpoint.clone();
    }
    let outcome = run_experiment(&cfg, common.out.as_deref())?;
    print!("{}", metrics_csv(&outcome.config_hash, cfg.trials, &outcome.report));
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let path = common.checkpoint.clone().context("train needs --checkpoint PATH to write")?;
    let mut cfg = common.load(None)?;
    cfg.defense = true;
    cfg.attack = AttackKind::None;
    cfg.attack_target = None;
    cfg.checkpoint = None;
    cfg.trials = 1;
    let outcome = run_experiment(&cfg, common.out.as_deref())?;
    let detector = outcome.trials[0].detector.as_ref().context("training produced no detector")?;
    guardian::detector::checkpoint::save(detector, &path)?;
    eprintln!("trained on {} episodes, saved {}", outcome.report.episodes, path.display());
    Ok(())
}

fn trial_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for k in 0.. {
        let d = trial_dir(dir, k);
        if !d.join("episodes.json").is_file() {
            break;
        }
        dirs.push(d);
    }
    if dirs.is_empty() {
        bail!("no trial-*/episodes.json under {}", dir.display());
    }
    Ok(dirs)
}

fn saved_config(dir: &Path) -> Option<PathBuf> {
    let p = dir.join("config.kv");
    p.is_file().then_some(p)
}

fn metrics(common: &Common) -> Result<()> {
    let dir = common.out_dir()?;
    let cfg = common.load(saved_config(dir).as_deref())?;
    let dirs = trial_dirs(dir)?;
    let mut logs = Vec::new();
    for d in &dirs {
        logs.extend(read_episodes(&d.join("episodes.json"))?);
    }
    let report = compute_metrics(&logs, cfg.decay, cfg.pooling, cfg.max_rounds)?;
    write_metrics(&dir.join("metrics.csv"), &cfg.config_hash(), dirs.len(), &report)?;
    print!("{}", metrics_csv(&cfg.config_hash(), dirs.len(), &report));
    Ok(())
}

fn export(common: &Common, format: Format) -> Result<()> {
    let dir = common.out_dir()?;
    let cfg = common.load(saved_config(dir).as_deref())?;
    let embedder = make_embedder(&cfg)?;
    let formats: &[GraphFormat] = match format {
        Format::Json => &[GraphFormat::Json],
        Format::Dot => &[GraphFormat::Dot],
        Format::Both => &[GraphFormat::Json, GraphFormat::Dot],
    };
    let mut written = 0;
    for d in trial_dirs(dir)? {
        let gdir = d.join("graphs");
        std::fs::create_dir_all(&gdir)?;
        for log in read_episodes(&d.join("episodes.json"))? {
            let (g, ann) = graph_from_log(&log, embedder.as_ref())?;
            for &f in formats {
                write_graph(&gdir.join(format!("task-{}.{}", log.task.id, f.extension())), &g, &ann, f)?;
                written += 1;
            }
        }
    }
    eprintln!("wrote {written} graph files under {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => run(c, false),
        Command::Defend(c) => run(c, true),
        Command::Train(c) => train(c),
        Command::Metrics(c) => metrics(c),
        Command::Export { common, format } => export(common, *format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
