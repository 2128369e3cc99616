use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_consensus, derive_seed, parse_answer, render_response, AgentKind, AgentSpec, AttackKind, AttackPlan,
    RemoteAgentClient, Task,
};
use crate::error::{GuardianError, Result};
use crate::graph_model::{AgentId, RoundTopology};
use crate::pipeline::Pipeline;

pub const NO_CONSENSUS: &str = "no-consensus";

const AGENT_STREAM: u64 = 1;
const TOPOLOGY_STREAM: u64 = 2;
const ATTACK_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Label {
    Hallucination,
    Error,
}

/// Why an agent holds an anomalous answer. Roots were injected (or received
/// only corrupted messages) and never change their answer; adopters keep it
/// until every root they got it from has been pruned.
#[derive(Debug, Clone, PartialEq)]
struct Taint {
    label: Label,
    root: bool,
    origins: BTreeSet<AgentId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub from: AgentId,
    pub text: String,
    pub answer: String,
    pub substituted: bool,
    taint: Option<Taint>,
}

/// Mutable state of one episode between rounds.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    round: usize,
    specs: BTreeMap<AgentId, AgentSpec>,
    active: Vec<AgentId>,
    answers: BTreeMap<AgentId, String>,
    taints: BTreeMap<AgentId, Taint>,
    pub(super) outbox: BTreeMap<AgentId, Message>,
    substituted: BTreeMap<(AgentId, AgentId), Message>,
    forced: BTreeMap<AgentId, Label>,
    pruned: BTreeSet<AgentId>,
    corrupted_edges: Vec<[usize; 4]>,
}

impl EpisodeState {
    pub fn new(specs: &[AgentSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(GuardianError::InvalidArgument("episode needs at least one agent".into()));
        }
        let mut map = BTreeMap::new();
        for s in specs {
            s.validate()?;
            if map.insert(s.id, s.clone()).is_some() {
                return Err(GuardianError::DuplicateAgent(s.id.0));
            }
        }
        Ok(Self {
            round: 0,
            active: map.keys().copied().collect(),
            specs: map,
            answers: BTreeMap::new(),
            taints: BTreeMap::new(),
            outbox: BTreeMap::new(),
            substituted: BTreeMap::new(),
            forced: BTreeMap::new(),
            pruned: BTreeSet::new(),
            corrupted_edges: Vec::new(),
        })
    }

    /// Last completed round (0 before the first).
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn active(&self) -> &[AgentId] {
        &self.active
    }

    pub fn answer(&self, a: AgentId) -> Option<&str> {
        self.answers.get(&a).map(String::as_str)
    }

    pub fn pruned(&self) -> &BTreeSet<AgentId> {
        &self.pruned
    }

    pub fn corrupted_edges(&self) -> &[[usize; 4]] {
        &self.corrupted_edges
    }

    /// Removes an agent from all later rounds; its last messages are dropped.
    pub fn prune(&mut self, a: AgentId) -> Result<()> {
        let pos = self
            .active
            .iter()
            .position(|x| *x == a)
            .ok_or(GuardianError::InactiveAgent {
                agent: a.0,
                round: self.round,
            })?;
        self.active.remove(pos);
        self.outbox.remove(&a);
        self.pruned.insert(a);
        Ok(())
    }

    /// Messages `to` receives in the coming round: its in-neighbors' last
    /// outputs, with corrupted edges carrying the substituted content.
    pub fn inbox(&self, to: AgentId, topology: &RoundTopology) -> Vec<Message> {
        topology
            .in_neighbors(to)
            .into_iter()
            .filter_map(|from| {
                self.substituted
                    .get(&(from, to))
                    .or_else(|| self.outbox.get(&from))
                    .cloned()
            })
            .collect()
    }

    /// Hallucination and error labels of the active agents, in order.
    pub fn labels(&self) -> (Vec<bool>, Vec<bool>) {
        self.active
            .iter()
            .map(|a| match self.taints.get(a).map(|t| t.label) {
                Some(Label::Hallucination) => (true, false),
                Some(Label::Error) => (false, true),
                None => (false, false),
            })
            .unzip()
    }

    fn must_keep(&self, a: AgentId) -> bool {
        match self.taints.get(&a) {
            Some(t) if t.root => true,
            Some(t) => !t.origins.iter().all(|o| self.pruned.contains(o)),
            None => false,
        }
    }
}

// Unique weighted plurality among received answers.
fn plurality(inbox: &[Message], persuasion: f64) -> Option<String> {
    let mut tally: BTreeMap<&str, f64> = BTreeMap::new();
    for m in inbox {
        let w = if m.taint.is_some() { persuasion } else { 1.0 };
        *tally.entry(&m.answer).or_default() += w;
    }
    let best = tally.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut winners = tally.iter().filter(|(_, w)| **w == best);
    match (winners.next(), winners.next()) {
        (Some((a, _)), None) => Some(a.to_string()),
        _ => None,
    }
}

fn adopted_taint(agent: AgentId, inbox: &[Message], answer: &str) -> Option<Taint> {
    let sources: Vec<&Taint> = inbox
        .iter()
        .filter(|m| m.answer == answer)
        .filter_map(|m| m.taint.as_ref())
        .collect();
    if sources.is_empty() {
        return None;
    }
    let label = if sources.iter().any(|t| t.label == Label::Error) {
        Label::Error
    } else {
        Label::Hallucination
    };
    let substituted = inbox.iter().any(|m| m.substituted && m.answer == answer);
    Some(Taint {
        label,
        root: substituted,
        origins: if substituted {
            BTreeSet::from([agent])
        } else {
            sources.iter().flat_map(|t| t.origins.iter().copied()).collect()
        },
    })
}

fn check_topology(state: &EpisodeState, topology: &RoundTopology) -> Result<()> {
    let active: BTreeSet<AgentId> = state.active.iter().copied().collect();
    for (from, to) in topology.edges() {
        for a in [from, to] {
            if !active.contains(&a) {
                return Err(GuardianError::InactiveAgent {
                    agent: a.0,
                    round: state.round + 1,
                });
            }
        }
    }
    Ok(())
}

/// Advances the episode by one round and returns each active agent's
/// response. Every agent consumes the same number of random draws per round
/// whatever it decides, so one agent's inbox never shifts another's stream.
pub fn step_round(
    task: &Task,
    state: &mut EpisodeState,
    topology: &RoundTopology,
    persuasion: f64,
    rng: &mut dyn RngCore,
    remote: Option<&RemoteAgentClient>,
) -> Result<Vec<(AgentId, String)>> {
    if state.active.is_empty() {
        return Err(GuardianError::EpisodeExhausted);
    }
    check_topology(state, topology)?;
    let t = state.round + 1;
    let wrong = task.wrong_answers();
    let adversarial = task.adversarial_answer().to_string();

    let mut next = Vec::with_capacity(state.active.len());
    for &a in &state.active {
        let spec = &state.specs[&a];
        let (u_correct, u_wrong, u_follow): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
        let inbox = if t > 1 { state.inbox(a, topology) } else { Vec::new() };
        let own = state.answers.get(&a).cloned();
        let own_taint = state.taints.get(&a).cloned();

        let (answer, taint, text) = if let Some(&label) = state.forced.get(&a) {
            let taint = Taint {
                label,
                root: true,
                origins: BTreeSet::from([a]),
            };
            (adversarial.clone(), Some(taint), None)
        } else if t > 1 && state.must_keep(a) {
            (own.clone().unwrap_or_default(), own_taint, None)
        } else if spec.kind == AgentKind::Remote {
            let client = remote.ok_or_else(|| GuardianError::Config(format!("agent {a} is remote but no endpoint is configured")))?;
            let context: Vec<String> = inbox.iter().map(|m| m.text.clone()).collect();
            let text = client.respond(a, t, &spec.role_prompt, &task.question, &context)?;
            (parse_answer(&text), None, Some(text))
        } else if t == 1 {
            let answer = if u_correct < spec.p_correct {
                task.correct.clone()
            } else {
                let idx = ((u_wrong * wrong.len() as f64) as usize).min(wrong.len() - 1);
                wrong[idx].to_string()
            };
            (answer, None, None)
        } else {
            let own = own.clone().unwrap_or_default();
            match plurality(&inbox, persuasion) {
                Some(winner) if u_follow < spec.p_follow && winner != own => {
                    let taint = adopted_taint(a, &inbox, &winner);
                    (winner, taint, None)
                }
                _ => (own, own_taint, None),
            }
        };
        let text = text.unwrap_or_else(|| render_response(&answer, &spec.role_prompt, t));
        next.push((a, answer, taint, text));
    }

    state.outbox.clear();
    state.substituted.clear();
    let mut responses = Vec::with_capacity(next.len());
    for (a, answer, taint, text) in next {
        match &taint {
            Some(tn) => state.taints.insert(a, tn.clone()),
            None => state.taints.remove(&a),
        };
        state.outbox.insert(
            a,
            Message {
                from: a,
                text: text.clone(),
                answer: answer.clone(),
                substituted: false,
                taint,
            },
        );
        state.answers.insert(a, answer);
        responses.push((a, text));
    }
    state.round = t;
    Ok(responses)
}

fn pick_target(plan: &AttackPlan, state: &EpisodeState, round: usize, rng: &mut dyn RngCore) -> Result<AgentId> {
    match plan.target {
        Some(a) if state.active.contains(&a) => Ok(a),
        Some(a) => Err(GuardianError::InactiveAgent { agent: a.0, round }),
        None => Ok(state.active[rng.gen_range(0..state.active.len())]),
    }
}

/// Injects the planned fault for the coming round. `topology` is the one the
/// coming round will use; communication attacks corrupt its in-edges.
pub fn apply_attack(
    plan: &AttackPlan,
    task: &Task,
    state: &mut EpisodeState,
    topology: &RoundTopology,
    rng: &mut dyn RngCore,
) -> Result<()> {
    let t = state.round + 1;
    match (plan.kind, t) {
        (AttackKind::Hallucination, 1) | (AttackKind::AgentTargeted, 1) => {
            let target = pick_target(plan, state, t, rng)?;
            let label = if plan.kind == AttackKind::Hallucination {
                Label::Hallucination
            } else {
                Label::Error
            };
            state.forced.insert(target, label);
        }
        (AttackKind::CommTargeted, 2) => {
            let target = pick_target(plan, state, t, rng)?;
            let adversarial = task.adversarial_answer();
            for from in topology.in_neighbors(target) {
                let prompt = &state.specs[&from].role_prompt;
                let msg = Message {
                    from,
                    text: render_response(adversarial, prompt, t - 1),
                    answer: adversarial.to_string(),
                    substituted: true,
                    taint: Some(Taint {
                        label: Label::Error,
                        root: true,
                        origins: BTreeSet::new(),
                    }),
                };
                state.substituted.insert((from, target), msg);
                state.corrupted_edges.push([t - 1, from.0, t, target.0]);
            }
        }
        _ => {}
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Fraction of peers each agent hears from; 1.0 is the full topology.
    pub topology_fraction: f64,
    pub max_rounds: usize,
    /// Rounds to run before consensus may end the debate; attacks can
    /// raise this further.
    pub min_rounds: usize,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            topology_fraction: 1.0,
            max_rounds: 3,
            min_rounds: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub agents: Vec<AgentId>,
    pub responses: Vec<String>,
    pub answers: Vec<String>,
    pub edges: Vec<(AgentId, AgentId)>,
    pub removed: Option<AgentId>,
    pub scores: Option<Vec<f64>>,
}

/// Per-round labels aligned with each round's `agents`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub h: Vec<Vec<bool>>,
    pub err: Vec<Vec<bool>>,
    /// `[from_round, from, to_round, to]`.
    pub corrupted_edges: Vec<[usize; 4]>,
    /// False when remote agents make the labels meaningless.
    #[serde(default = "yes")]
    pub available: bool,
}

fn yes() -> bool {
    true
}

impl GroundTruth {
    pub fn anomalous(&self, rounds: &[RoundRecord], round: usize, agent: AgentId) -> Option<bool> {
        let idx = rounds.iter().position(|r| r.t == round)?;
        let i = rounds[idx].agents.iter().position(|a| *a == agent)?;
        Some(self.h[idx][i] || self.err[idx][i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub task: Task,
    pub rounds: Vec<RoundRecord>,
    pub ground_truth: GroundTruth,
    pub final_answer: String,
    pub api_calls: usize,
}

impl EpisodeLog {
    pub fn is_correct(&self) -> bool {
        self.final_answer == self.task.correct
    }

    /// `(round, agent)` of every removal, in order.
    pub fn removals(&self) -> Vec<(usize, AgentId)> {
        self.rounds.iter().filter_map(|r| r.removed.map(|a| (r.t, a))).collect()
    }
}

fn majority_vote(answers: &[&str]) -> String {
    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers {
        *tally.entry(a).or_default() += 1;
    }
    let best = tally.values().copied().max().unwrap_or(0);
    let winners: Vec<&&str> = tally.iter().filter(|(_, c)| **c == best).map(|(a, _)| a).collect();
    match winners.as_slice() {
        [one] => one.to_string(),
        _ => NO_CONSENSUS.to_string(),
    }
}

/// Runs one debate. With a pipeline attached, every round is ingested and
/// its removal takes effect before the next round. The episode stops at
/// consensus (once the attack's minimum round count is reached) or after
/// `max_rounds`.
pub fn run_episode(
    task: &Task,
    specs: &[AgentSpec],
    cfg: &EpisodeConfig,
    plan: &AttackPlan,
    mut pipeline: Option<&mut Pipeline>,
    remote: Option<&RemoteAgentClient>,
) -> Result<EpisodeLog> {
    if cfg.max_rounds == 0 {
        return Err(GuardianError::InvalidArgument("max_rounds must be >= 1".into()));
    }
    if !(cfg.topology_fraction > 0.0 && cfg.topology_fraction <= 1.0) {
        return Err(GuardianError::InvalidArgument(format!(
            "topology fraction {} not in (0, 1]",
            cfg.topology_fraction
        )));
    }
    plan.validate()?;
    let mut state = EpisodeState::new(specs)?;
    let mut agent_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, task.id, AGENT_STREAM));
    let mut topo_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, task.id, TOPOLOGY_STREAM));
    let mut attack_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ plan.seed, task.id, ATTACK_STREAM));
    if let Some(p) = pipeline.as_deref_mut() {
        p.begin_episode()?;
    }

    let mut rounds = Vec::new();
    let mut truth = GroundTruth {
        available: specs.iter().all(|s| s.kind == AgentKind::Scripted),
        ..GroundTruth::default()
    };
    let mut api_calls = 0;
    let mut consensus = None;

    for t in 1..=cfg.max_rounds {
        if state.active().is_empty() {
            break;
        }
        let topology = if t == 1 {
            RoundTopology::empty()
        } else if cfg.topology_fraction >= 1.0 {
            RoundTopology::full(state.active())
        } else {
            RoundTopology::sampled(state.active(), cfg.topology_fraction, &mut topo_rng)
        };
        apply_attack(plan, task, &mut state, &topology, &mut attack_rng)?;
        let responses = step_round(task, &mut state, &topology, plan.persuasion, &mut agent_rng, remote)?;
        api_calls += responses.len();

        let agents: Vec<AgentId> = responses.iter().map(|r| r.0).collect();
        let answers: Vec<String> = agents.iter().map(|a| state.answers[a].clone()).collect();
        let (h, err) = state.labels();
        truth.h.push(h);
        truth.err.push(err);
        consensus = check_consensus(&answers);

        let (removed, scores) = match pipeline.as_deref_mut() {
            Some(p) => {
                let d = p.ingest_round(&responses, &topology, consensus.is_some())?;
                let by_agent: BTreeMap<AgentId, f64> = d.scores.iter().map(|s| (s.agent, s.value)).collect();
                let scores = agents.iter().map(|a| by_agent[a]).collect();
                if let Some(a) = d.removed {
                    state.prune(a)?;
                }
                (d.removed, Some(scores))
            }
            None => (None, None),
        };
        rounds.push(RoundRecord {
            t,
            agents,
            responses: responses.into_iter().map(|r| r.1).collect(),
            answers,
            edges: topology.edges().collect(),
            removed,
            scores,
        });
        if consensus.is_some() && t >= cfg.min_rounds.max(plan.min_rounds()) {
            break;
        }
    }
    truth.corrupted_edges = state.corrupted_edges().to_vec();

    let final_answer = match consensus {
        Some(a) => a,
        None => {
            let survivors: Vec<&str> = state.active().iter().filter_map(|a| state.answer(*a)).collect();
            if survivors.is_empty() {
                NO_CONSENSUS.to_string()
            } else {
                majority_vote(&survivors)
            }
        }
    };
    Ok(EpisodeLog {
        task: task.clone(),
        rounds,
        ground_truth: truth,
        final_answer,
        api_calls,
    })
}
