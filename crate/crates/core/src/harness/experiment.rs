use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::detector::{checkpoint, Detector};
use crate::embedder::{Embedder, HashingEmbedder, RemoteEmbedder};
use crate::error::Result;
use crate::pipeline::{run_stream, Pipeline};
use crate::simulator::{derive_seed, run_episode, scripted_team, AgentKind, EpisodeLog, RemoteAgentClient, Task};

use super::config::ExperimentConfig;
use super::corpus::{generate_corpus, load_corpus};
use super::export::{graph_from_log, write_episodes, write_graph, write_metrics, GraphFormat};
use super::metrics::{compute_metrics, MetricsReport};

const TRIAL_STREAM: u64 = 0x74_7269_616c;
const DETECTOR_STREAM: u64 = 0x6465_7465_6374;

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub episodes: Vec<EpisodeLog>,
    /// Detector state after the trial's stream (defended runs only).
    pub detector: Option<Detector>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config_hash: String,
    pub report: MetricsReport,
    pub trials: Vec<TrialResult>,
}

impl ExperimentOutcome {
    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeLog> {
        self.trials.iter().flat_map(|t| t.episodes.iter())
    }
}

pub fn trial_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, trial, TRIAL_STREAM)
}

pub fn load_tasks(cfg: &ExperimentConfig) -> Result<Vec<Task>> {
    match &cfg.corpus {
        Some(path) => load_corpus(path),
        None => generate_corpus(cfg.tasks, cfg.options, cfg.seed),
    }
}

pub fn make_embedder(cfg: &ExperimentConfig) -> Result<Box<dyn Embedder + Send + Sync>> {
    Ok(match &cfg.embedder_url {
        Some(url) => Box::new(RemoteEmbedder::new(url.clone(), cfg.embedding.dim, cfg.remote_timeout())?),
        None => Box::new(HashingEmbedder::new(cfg.embedding)?),
    })
}

fn remote_client(cfg: &ExperimentConfig) -> Result<Option<RemoteAgentClient>> {
    cfg.remote_agent_url
        .as_ref()
        .map(|url| RemoteAgentClient::new(url.clone(), cfg.remote_agent_token.clone(), cfg.remote_timeout()))
        .transpose()
}

/// A pipeline for one trial: from the configured checkpoint if any,
/// otherwise freshly initialized with a per-trial seed.
pub fn make_pipeline(cfg: &ExperimentConfig, trial: usize) -> Result<Pipeline> {
    let mut pcfg = cfg.pipeline_config();
    let embedder = make_embedder(cfg)?;
    match &cfg.checkpoint {
        Some(path) => Pipeline::with_detector(pcfg, checkpoint::load(path)?, embedder),
        None => {
            pcfg.detector.seed = derive_seed(cfg.detector.seed, trial, DETECTOR_STREAM);
            Pipeline::new(pcfg, embedder)
        }
    }
}

/// One pass over the task stream.
pub fn run_trial(cfg: &ExperimentConfig, tasks: &[Task], trial: usize) -> Result<TrialResult> {
    let seed = trial_seed(cfg.seed, trial);
    let remote = remote_client(cfg)?;
    let mut specs = scripted_team(cfg.n_agents, cfg.p_correct, cfg.p_follow);
    if remote.is_some() {
        for s in &mut specs {
            s.kind = AgentKind::Remote;
        }
    }
    let ep_cfg = cfg.episode_config(seed);
    let plan = cfg.attack_plan(seed);
    if cfg.defense {
        let mut pipeline = make_pipeline(cfg, trial)?;
        let episodes = run_stream(&mut pipeline, tasks, |p, task| {
            run_episode(task, &specs, &ep_cfg, &plan, Some(p), remote.as_ref())
        })?;
        Ok(TrialResult {
            trial,
            seed,
            episodes,
            detector: Some(pipeline.detector().clone()),
        })
    } else {
        let episodes = tasks
            .iter()
            .map(|task| run_episode(task, &specs, &ep_cfg, &plan, None, remote.as_ref()))
            .collect::<Result<_>>()?;
        Ok(TrialResult {
            trial,
            seed,
            episodes,
            detector: None,
        })
    }
}

pub fn trial_dir(out: &Path, trial: usize) -> PathBuf {
    out.join(format!("trial-{trial}"))
}

/// Runs every trial (in parallel), scores them, and writes artifacts to
/// `out` when given:
///
/// - `config.kv`, `metrics.csv`
/// - `trial-<k>/episodes.json`
/// - `trial-<k>/graphs/task-<id>.{json,dot}` when graph export is on
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let tasks = load_tasks(cfg)?;
    let results: Vec<Result<TrialResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.trials)
            .map(|k| {
                let tasks = &tasks;
                s.spawn(move || run_trial(cfg, tasks, k))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("trial thread panicked"))
            .collect()
    });
    let trials = results.into_iter().collect::<Result<Vec<_>>>()?;

    let logs: Vec<EpisodeLog> = trials.iter().flat_map(|t| t.episodes.iter().cloned()).collect();
    let mut report = compute_metrics(&logs, cfg.decay, cfg.pooling, cfg.max_rounds)?;
    if cfg.record_runtime {
        report.runtime_seconds = started.elapsed().as_secs_f64();
    }
    let outcome = ExperimentOutcome {
        config_hash: cfg.config_hash(),
        report,
        trials,
    };
    if let Some(dir) = out {
        write_artifacts(cfg, &outcome, dir)?;
    }
    Ok(outcome)
}

pub fn write_artifacts(cfg: &ExperimentConfig, outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.kv"), cfg.to_kv())?;
    write_metrics(&dir.join("metrics.csv"), &outcome.config_hash, cfg.trials, &outcome.report)?;
    let embedder = if cfg.export_graphs { Some(make_embedder(cfg)?) } else { None };
    for t in &outcome.trials {
        let tdir = trial_dir(dir, t.trial);
        std::fs::create_dir_all(&tdir)?;
        write_episodes(&tdir.join("episodes.json"), &t.episodes)?;
        if let Some(emb) = &embedder {
            let gdir = tdir.join("graphs");
            std::fs::create_dir_all(&gdir)?;
            for log in &t.episodes {
                let (g, ann) = graph_from_log(log, emb.as_ref())?;
                for format in [GraphFormat::Json, GraphFormat::Dot] {
                    let path = gdir.join(format!("task-{}.{}", log.task.id, format.extension()));
                    write_graph(&path, &g, &ann, format)?;
                }
            }
        }
    }
    Ok(())
}
