use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::anomaly::{DetectionPolicy, PolicyMode};
use crate::detector::DetectorConfig;
use crate::embedder::EmbeddingConfig;
use crate::error::{GuardianError, Result};
use crate::graph_model::AgentId;
use crate::pipeline::PipelineConfig;
use crate::simulator::{AttackKind, AttackPlan, EpisodeConfig, DEFAULT_PERSUASION};

use super::metrics::{Decay, Pooling};

pub const ENV_REMOTE_AGENT_URL: &str = "GUARDIAN_REMOTE_AGENT_URL";
pub const ENV_REMOTE_AGENT_TOKEN: &str = "GUARDIAN_REMOTE_AGENT_TOKEN";
pub const ENV_EMBEDDER_URL: &str = "GUARDIAN_EMBEDDER_URL";

pub const TOPOLOGY_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Everything an experiment run depends on. Serialized as flat
/// `key = value` lines; see [`ExperimentConfig::set`] for the keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_agents: usize,
    pub max_rounds: usize,
    pub min_rounds: usize,
    pub topology: f64,
    pub attack: AttackKind,
    pub attack_target: Option<AgentId>,
    pub persuasion: f64,
    pub p_correct: f64,
    pub p_follow: f64,
    /// Attach the detection pipeline to every episode.
    pub defense: bool,
    pub detector: DetectorConfig,
    pub policy: DetectionPolicy,
    pub carry_across_episodes: bool,
    pub history_window: Option<usize>,
    pub embedding: EmbeddingConfig,
    pub corpus: Option<PathBuf>,
    /// Size and answer count of the generated corpus when no file is given.
    pub tasks: usize,
    pub options: usize,
    pub trials: usize,
    pub seed: u64,
    pub decay: Decay,
    pub pooling: Pooling,
    pub checkpoint: Option<PathBuf>,
    /// Write measured wall time into the metrics CSV; when off the column
    /// is 0 and the file is byte-reproducible.
    pub record_runtime: bool,
    pub export_graphs: bool,
    pub remote_agent_url: Option<String>,
    pub remote_agent_token: Option<String>,
    pub embedder_url: Option<String>,
    pub remote_timeout_secs: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_agents: 4,
            max_rounds: 3,
            min_rounds: 1,
            topology: 1.0,
            attack: AttackKind::None,
            attack_target: None,
            persuasion: DEFAULT_PERSUASION,
            p_correct: 1.0,
            p_follow: 1.0,
            defense: true,
            detector: DetectorConfig::default(),
            policy: DetectionPolicy::default(),
            carry_across_episodes: true,
            history_window: None,
            embedding: EmbeddingConfig::default(),
            corpus: None,
            tasks: 100,
            options: 4,
            trials: 1,
            seed: 0,
            decay: Decay::default(),
            pooling: Pooling::Pooled,
            checkpoint: None,
            record_runtime: true,
            export_graphs: true,
            remote_agent_url: None,
            remote_agent_token: None,
            embedder_url: None,
            remote_timeout_secs: 30,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| GuardianError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(GuardianError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn optional(value: &str) -> Option<&str> {
    match value {
        "" | "none" => None,
        v => Some(v),
    }
}

impl ExperimentConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let det = &mut self.detector;
        match key.trim() {
            "n_agents" | "agents" => self.n_agents = parse(key, v)?,
            "max_rounds" | "rounds" => self.max_rounds = parse(key, v)?,
            "min_rounds" => self.min_rounds = parse(key, v)?,
            "topology" | "topology_fraction" => self.topology = parse(key, v)?,
            "attack" => self.attack = v.parse()?,
            "attack_target" => self.attack_target = optional(v).map(|x| parse(key, x).map(AgentId)).transpose()?,
            "persuasion" => self.persuasion = parse(key, v)?,
            "p_correct" => self.p_correct = parse(key, v)?,
            "p_follow" => self.p_follow = parse(key, v)?,
            "defense" => self.defense = parse_bool(key, v)?,
            "d" | "latent_dim" => det.d = parse(key, v)?,
            "heads" => det.heads = parse(key, v)?,
            "alpha" => det.alpha = parse(key, v)?,
            "beta" => det.beta = parse(key, v)?,
            "lambda" => det.lambda = parse(key, v)?,
            "gamma" => *det = det.clone().with_gamma(parse(key, v)?)?,
            "lr" => det.lr = parse(key, v)?,
            "epochs_initial" => det.epochs_initial = parse(key, v)?,
            "epochs_incremental" => det.epochs_incremental = parse(key, v)?,
            "detector_seed" => det.seed = parse(key, v)?,
            "variant" => det.variant = v.parse()?,
            "positional_encoding" => det.positional_encoding = parse_bool(key, v)?,
            "policy" => self.policy.mode = v.parse::<PolicyMode>()?,
            "tau" => self.policy.tau = parse(key, v)?,
            "carry_across_episodes" => self.carry_across_episodes = parse_bool(key, v)?,
            "history_window" => self.history_window = optional(v).map(|x| parse(key, x)).transpose()?,
            "embedding_dim" | "k" => {
                self.embedding.dim = parse(key, v)?;
                det.k = self.embedding.dim;
            }
            "hash_seed" => self.embedding.hash_seed = parse(key, v)?,
            "lowercase" => self.embedding.lowercase = parse_bool(key, v)?,
            "corpus" => self.corpus = optional(v).map(PathBuf::from),
            "tasks" => self.tasks = parse(key, v)?,
            "options" => self.options = parse(key, v)?,
            "trials" => self.trials = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "decay" => {
                self.decay = match v {
                    "exponential" => Decay::Exponential(self.decay.lambda().unwrap_or(Decay::DEFAULT_LAMBDA)),
                    "linear" => Decay::Linear,
                    _ => return Err(GuardianError::Config(format!("decay: unknown kind {v:?}"))),
                }
            }
            "decay_lambda" => self.decay = Decay::Exponential(parse(key, v)?),
            "pooling" => self.pooling = v.parse()?,
            "checkpoint" => self.checkpoint = optional(v).map(PathBuf::from),
            "record_runtime" => self.record_runtime = parse_bool(key, v)?,
            "export_graphs" => self.export_graphs = parse_bool(key, v)?,
            "remote_agent_url" => self.remote_agent_url = optional(v).map(str::to_string),
            "remote_agent_token" => self.remote_agent_token = optional(v).map(str::to_string),
            "embedder_url" => self.embedder_url = optional(v).map(str::to_string),
            "remote_timeout_secs" => self.remote_timeout_secs = parse(key, v)?,
            other => return Err(GuardianError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |message: String| GuardianError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("expected key = value, got {line:?}")))?;
            cfg.set(k, v).map_err(|e| fail(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GuardianError::Config(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text, path)
    }

    /// Fills remote endpoints from the environment where the config left
    /// them unset.
    pub fn apply_env(&mut self) {
        let get = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        if self.remote_agent_url.is_none() {
            self.remote_agent_url = get(ENV_REMOTE_AGENT_URL);
        }
        if self.remote_agent_token.is_none() {
            self.remote_agent_token = get(ENV_REMOTE_AGENT_TOKEN);
        }
        if self.embedder_url.is_none() {
            self.embedder_url = get(ENV_EMBEDDER_URL);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GuardianError::Config(m));
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        if self.n_agents == 0 {
            return bad("n_agents must be >= 1".into());
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be >= 1".into());
        }
        if !TOPOLOGY_FRACTIONS.contains(&self.topology) {
            return bad(format!("topology must be one of {TOPOLOGY_FRACTIONS:?}, got {}", self.topology));
        }
        if self.corpus.is_none() && (self.tasks == 0 || self.options < 2) {
            return bad("generated corpus needs tasks >= 1 and options >= 2".into());
        }
        if self.embedding.dim != self.detector.k {
            return bad(format!("embedding_dim {} != detector k {}", self.embedding.dim, self.detector.k));
        }
        if let Decay::Exponential(l) = self.decay {
            if !(l > 0.0 && l <= 1.0) {
                return bad(format!("decay_lambda must be in (0, 1], got {l}"));
            }
        }
        self.embedding.validate()?;
        self.detector.validate()?;
        self.policy.validate()?;
        self.attack_plan(0).validate()?;
        Ok(())
    }

    pub fn attack_plan(&self, seed: u64) -> AttackPlan {
        AttackPlan {
            kind: self.attack,
            target: self.attack_target,
            persuasion: self.persuasion,
            seed,
        }
    }

    pub fn episode_config(&self, seed: u64) -> EpisodeConfig {
        EpisodeConfig {
            topology_fraction: self.topology,
            max_rounds: self.max_rounds,
            min_rounds: self.min_rounds,
            seed,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            detector: self.detector.clone(),
            policy: self.policy,
            carry_across_episodes: self.carry_across_episodes,
            history_window: self.history_window,
        }
    }

    pub fn remote_timeout(&self) -> Duration {
        Duration::from_secs(self.remote_timeout_secs)
    }

    /// Canonical `key = value` listing. Secrets are left out.
    pub fn to_kv(&self) -> String {
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        let d = &self.detector;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("n_agents", self.n_agents.to_string());
        put("max_rounds", self.max_rounds.to_string());
        put("min_rounds", self.min_rounds.to_string());
        put("topology", self.topology.to_string());
        put("attack", self.attack.to_string());
        put("attack_target", opt(self.attack_target.map(|a| a.0.to_string())));
        put("persuasion", self.persuasion.to_string());
        put("p_correct", self.p_correct.to_string());
        put("p_follow", self.p_follow.to_string());
        put("defense", self.defense.to_string());
        put("embedding_dim", self.embedding.dim.to_string());
        put("hash_seed", self.embedding.hash_seed.to_string());
        put("lowercase", self.embedding.lowercase.to_string());
        put("d", d.d.to_string());
        put("heads", d.heads.to_string());
        put("alpha", d.alpha.to_string());
        put("beta", d.beta.to_string());
        put("lambda", d.lambda.to_string());
        put("lr", d.lr.to_string());
        put("epochs_initial", d.epochs_initial.to_string());
        put("epochs_incremental", d.epochs_incremental.to_string());
        put("detector_seed", d.seed.to_string());
        put("variant", d.variant.to_string());
        put("positional_encoding", d.positional_encoding.to_string());
        put("policy", self.policy.mode.to_string());
        put("tau", self.policy.tau.to_string());
        put("carry_across_episodes", self.carry_across_episodes.to_string());
        put("history_window", opt(self.history_window.map(|w| w.to_string())));
        put("corpus", opt(self.corpus.as_ref().map(|p| p.display().to_string())));
        put("tasks", self.tasks.to_string());
        put("options", self.options.to_string());
        put("trials", self.trials.to_string());
        put("seed", self.seed.to_string());
        match self.decay {
            Decay::Exponential(l) => {
                put("decay", "exponential".into());
                put("decay_lambda", l.to_string());
            }
            Decay::Linear => put("decay", "linear".into()),
        }
        put("pooling", self.pooling.to_string());
        put("checkpoint", opt(self.checkpoint.as_ref().map(|p| p.display().to_string())));
        put("record_runtime", self.record_runtime.to_string());
        put("export_graphs", self.export_graphs.to_string());
        put("remote_agent_url", opt(self.remote_agent_url.clone()));
        put("embedder_url", opt(self.embedder_url.clone()));
        put("remote_timeout_secs", self.remote_timeout_secs.to_string());
        out
    }

    /// Short digest of [`Self::to_kv`], used to tag result files.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}
