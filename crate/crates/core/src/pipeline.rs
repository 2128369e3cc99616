//! Incremental detection loop: each round is embedded into the temporal
//! graph, the detector is fine-tuned on the merged history with pruned
//! agents excluded, and at most one agent is scored out.
//!
//! Detector parameters live on the [`Pipeline`] and persist across rounds
//! and (unless disabled) across episodes of one stream.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anomaly::{prune, score_nodes, select_anomalies, AnomalyScore, DetectionPolicy};
use crate::detector::{checkpoint, Detector, DetectorConfig, LossBreakdown};
use crate::embedder::Embedder;
use crate::error::{GuardianError, Result};
use crate::graph_model::{build_snapshot, AgentId, RoundTopology, TemporalGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub detector: DetectorConfig,
    pub policy: DetectionPolicy,
    /// Keep parameters from one episode to the next within a stream.
    pub carry_across_episodes: bool,
    /// Caps how many of the most recent snapshots the temporal variant sees.
    pub history_window: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            policy: DetectionPolicy::default(),
            carry_across_episodes: true,
            history_window: None,
        }
    }
}

/// What happened in one ingested round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDecision {
    pub round: usize,
    pub removed: Option<AgentId>,
    pub scores: Vec<AnomalyScore>,
    /// Snapshots in the training batch.
    pub batch_len: usize,
    /// Per-epoch training losses of this round's fine-tuning.
    pub losses: Vec<LossBreakdown>,
}

impl RoundDecision {
    pub fn mean_loss(&self) -> Option<f64> {
        (!self.losses.is_empty()).then(|| self.losses.iter().map(|l| l.l_total).sum::<f64>() / self.losses.len() as f64)
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    detector: Detector,
    embedder: Box<dyn Embedder + Send + Sync>,
    rng: ChaCha8Rng,
    ingests: usize,
    graph: TemporalGraph,
    decisions: Vec<RoundDecision>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, embedder: Box<dyn Embedder + Send + Sync>) -> Result<Self> {
        let detector = Detector::new(cfg.detector.clone())?;
        Self::with_detector(cfg, detector, embedder)
    }

    /// Starts from existing parameters (e.g. a loaded checkpoint). The
    /// checkpoint's detector config replaces `cfg.detector`.
    pub fn with_detector(mut cfg: PipelineConfig, detector: Detector, embedder: Box<dyn Embedder + Send + Sync>) -> Result<Self> {
        cfg.policy.validate()?;
        cfg.detector = detector.config().clone();
        if embedder.dim() != cfg.detector.k {
            return Err(GuardianError::Config(format!(
                "embedder dim {} does not match detector k {}",
                embedder.dim(),
                cfg.detector.k
            )));
        }
        let rng = training_rng(&cfg.detector);
        Ok(Self {
            cfg,
            detector,
            embedder,
            rng,
            ingests: 0,
            graph: TemporalGraph::new(),
            decisions: Vec::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn graph(&self) -> &TemporalGraph {
        &self.graph
    }

    pub fn decisions(&self) -> &[RoundDecision] {
        &self.decisions
    }

    pub fn ingests(&self) -> usize {
        self.ingests
    }

    /// Resets per-episode state. Parameters are kept unless carrying across
    /// episodes is disabled, in which case the detector is re-initialized.
    pub fn begin_episode(&mut self) -> Result<()> {
        self.graph = TemporalGraph::new();
        self.decisions.clear();
        if !self.cfg.carry_across_episodes {
            self.detector = Detector::new(self.cfg.detector.clone())?;
            self.rng = training_rng(&self.cfg.detector);
            self.ingests = 0;
        }
        Ok(())
    }

    /// Agents that must respond in the next round.
    pub fn active_agents(&self) -> Option<Vec<AgentId>> {
        self.graph.snapshots().last().map(|s| {
            s.agents
                .iter()
                .copied()
                .filter(|a| !self.graph.is_removed(*a))
                .collect()
        })
    }

    /// Ingests one round and returns the detection decision for it.
    pub fn ingest_round(
        &mut self,
        responses: &[(AgentId, String)],
        topology: &RoundTopology,
        consensus_reached: bool,
    ) -> Result<RoundDecision> {
        if responses.is_empty() {
            return Err(GuardianError::EpisodeExhausted);
        }
        if let Some(active) = self.active_agents() {
            let given: BTreeSet<AgentId> = responses.iter().map(|r| r.0).collect();
            let want: BTreeSet<AgentId> = active.into_iter().collect();
            if given != want {
                return Err(GuardianError::InvalidArgument(format!(
                    "responses from {given:?} but active agents are {want:?}"
                )));
            }
        }
        let round = self.graph.latest_round().map_or(1, |r| r + 1);
        let snapshot = build_snapshot(round, responses, topology, self.embedder.as_ref())?;
        self.graph.push_snapshot(snapshot)?;

        let removed: BTreeSet<AgentId> = self.graph.removed().keys().copied().collect();
        let mut history = self.graph.merge_history(round)?.excluding(&removed);
        if let Some(w) = self.cfg.history_window {
            history = history.truncated(w);
        }
        let batch = self.detector.prepare(&history)?;

        let epochs = if self.ingests == 0 {
            self.cfg.detector.epochs_initial
        } else {
            self.cfg.detector.epochs_incremental
        };
        let losses = self.detector.fit(&batch, epochs, &mut self.rng)?;
        self.ingests += 1;

        let recon = self.detector.reconstruct(&batch)?;
        let scores = score_nodes(&recon, self.cfg.detector.alpha)?;
        let pick = select_anomalies(&scores, &self.cfg.policy, consensus_reached);
        prune(&mut self.graph, pick.as_ref(), round)?;

        let decision = RoundDecision {
            round,
            removed: pick.map(|p| p.agent),
            scores,
            batch_len: batch.len(),
            losses,
        };
        self.decisions.push(decision.clone());
        Ok(decision)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.detector, path)
    }
}

fn training_rng(cfg: &DetectorConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00)
}

/// Runs `episode` for every task in order on one pipeline, starting a fresh
/// graph per task while parameters carry over.
pub fn run_stream<T, R>(
    pipeline: &mut Pipeline,
    tasks: &[T],
    mut episode: impl FnMut(&mut Pipeline, &T) -> Result<R>,
) -> Result<Vec<R>> {
    if tasks.is_empty() {
        return Err(GuardianError::InvalidArgument("stream needs at least one task".into()));
    }
    tasks
        .iter()
        .map(|task| {
            pipeline.begin_episode()?;
            episode(pipeline, task)
        })
        .collect()
}
