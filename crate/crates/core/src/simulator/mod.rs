//! Multi-agent debate episodes with scripted (or remote) agents, fault
//! injection and ground-truth labels.
//!
//! Scripted agents are an answer-state machine: round 1 answers come from
//! `p_correct`, later rounds follow the weighted majority of what an agent
//! received with probability `p_follow`. Anomalous answers are absorbing, so
//! without a defense the number of labeled agents never decreases.

mod episode;
mod remote;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embedder::mix64;
use crate::error::{GuardianError, Result};
use crate::graph_model::AgentId;

pub use episode::{
    apply_attack, run_episode, step_round, EpisodeConfig, EpisodeLog, EpisodeState, GroundTruth, Message,
    RoundRecord, NO_CONSENSUS,
};
pub use remote::{RemoteAgentClient, DEFAULT_REMOTE_TIMEOUT};

pub const DEFAULT_ROLE_PROMPT: &str = "Debate the question and state your answer.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub question: String,
    pub answer_space: Vec<String>,
    pub correct: String,
}

impl Task {
    pub fn new(id: usize, question: impl Into<String>, answer_space: Vec<String>, correct_index: usize) -> Result<Self> {
        if answer_space.len() < 2 {
            return Err(GuardianError::InvalidArgument(format!("task {id} needs at least 2 answers")));
        }
        let unique: BTreeSet<&String> = answer_space.iter().collect();
        if unique.len() != answer_space.len() {
            return Err(GuardianError::InvalidArgument(format!("task {id} has duplicate answers")));
        }
        let correct = answer_space
            .get(correct_index)
            .ok_or_else(|| GuardianError::InvalidArgument(format!("task {id}: correct index {correct_index} out of range")))?
            .clone();
        Ok(Self {
            id,
            question: question.into(),
            answer_space,
            correct,
        })
    }

    /// A task whose answers are opaque per-task tokens `t{id}opt{j}`.
    pub fn synthetic(id: usize, options: usize, seed: u64) -> Result<Self> {
        let answers = (0..options).map(|j| format!("t{id}opt{j}")).collect();
        let correct = if options == 0 {
            0
        } else {
            (mix64(seed ^ mix64(id as u64)) % options as u64) as usize
        };
        Self::new(id, format!("Synthetic question {id}: pick the right option."), answers, correct)
    }

    pub fn wrong_answers(&self) -> Vec<&str> {
        self.answer_space
            .iter()
            .filter(|a| **a != self.correct)
            .map(String::as_str)
            .collect()
    }

    /// The fixed wrong answer injected by attacks and hallucinations.
    pub fn adversarial_answer(&self) -> &str {
        self.wrong_answers()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Scripted,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: AgentId,
    pub kind: AgentKind,
    pub p_correct: f64,
    pub p_follow: f64,
    pub role_prompt: String,
}

impl AgentSpec {
    pub fn scripted(id: usize, p_correct: f64, p_follow: f64) -> Self {
        Self {
            id: AgentId(id),
            kind: AgentKind::Scripted,
            p_correct,
            p_follow,
            role_prompt: DEFAULT_ROLE_PROMPT.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_correct", self.p_correct), ("p_follow", self.p_follow)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GuardianError::InvalidArgument(format!("agent {}: {name} = {p} not in [0,1]", self.id)));
            }
        }
        Ok(())
    }
}

/// `n` scripted agents with ids `0..n`.
pub fn scripted_team(n: usize, p_correct: f64, p_follow: f64) -> Vec<AgentSpec> {
    (0..n).map(|i| AgentSpec::scripted(i, p_correct, p_follow)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Hallucination,
    AgentTargeted,
    CommTargeted,
}

impl std::str::FromStr for AttackKind {
    type Err = GuardianError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "hallucination" => Ok(Self::Hallucination),
            "agent" | "agent_targeted" => Ok(Self::AgentTargeted),
            "comm" | "comm_targeted" => Ok(Self::CommTargeted),
            other => Err(GuardianError::Config(format!("unknown attack {other:?}"))),
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Hallucination => "hallucination",
            Self::AgentTargeted => "agent",
            Self::CommTargeted => "comm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub kind: AttackKind,
    /// Injected agent (hallucination, agent_targeted) or recipient whose
    /// round-2 in-edges are corrupted (comm_targeted). Drawn from the seed
    /// when absent.
    pub target: Option<AgentId>,
    /// Weight of an anomalous message in a recipient's majority vote.
    pub persuasion: f64,
    pub seed: u64,
}

pub const DEFAULT_PERSUASION: f64 = 3.0;

impl AttackPlan {
    pub fn new(kind: AttackKind, seed: u64) -> Self {
        Self {
            kind,
            target: None,
            persuasion: DEFAULT_PERSUASION,
            seed,
        }
    }

    pub fn none() -> Self {
        Self::new(AttackKind::None, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.persuasion.is_finite() && self.persuasion >= 1.0) {
            return Err(GuardianError::InvalidArgument(format!("persuasion must be >= 1, got {}", self.persuasion)));
        }
        if self.kind == AttackKind::None && self.target.is_some() {
            return Err(GuardianError::InvalidArgument("attack none takes no target".into()));
        }
        Ok(())
    }

    /// Rounds an episode must run before consensus may end it. Communication
    /// attacks strike on the round 1 to 2 edges and need three rounds to
    /// show their effect.
    pub fn min_rounds(&self) -> usize {
        match self.kind {
            AttackKind::CommTargeted => 3,
            _ => 1,
        }
    }
}

/// Renders an agent's response.
pub fn render_response(answer: &str, role_prompt: &str, round: usize) -> String {
    format!("Answer: {answer}. Reasoning: {role_prompt} {round}")
}

/// Extracts the answer from `Answer: X. ...`; falls back to the trimmed text.
pub fn parse_answer(text: &str) -> String {
    let trimmed = text.trim();
    trimmed
        .strip_prefix("Answer:")
        .map(|rest| {
            let rest = rest.trim_start();
            let end = rest.find(". ").unwrap_or(rest.len());
            rest[..end].trim_end_matches('.').trim().to_string()
        })
        .unwrap_or_else(|| trimmed.to_string())
}

/// The shared answer if every responder agrees.
pub fn check_consensus<S: AsRef<str>>(answers: &[S]) -> Option<String> {
    let first = answers.first()?.as_ref();
    answers.iter().all(|a| a.as_ref() == first).then(|| first.to_string())
}

/// Independent RNG seeds per (master seed, task, purpose).
pub fn derive_seed(master: u64, task_id: usize, stream: u64) -> u64 {
    mix64(mix64(master ^ 0x6570_6973_6f64_6521) ^ mix64(task_id as u64) ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}
