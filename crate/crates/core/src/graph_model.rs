//! Discrete-time temporal attributed graph of a collaboration episode.
//!
//! Communication is recorded at two granularities. Layered edges
//! `(t-1, i) -> (t, j)` keep the round structure for export. Each
//! [`Snapshot`] projects the same edges onto agent-level adjacency at round
//! `t` (`adjacency[i][j]` iff `j` consumed `i`'s previous-round output),
//! which is what the encoder consumes after symmetrization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::Embedder;
use crate::error::{GuardianError, Result};
use crate::numerics::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub usize);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Directed "feeds" relation for one round: `(from, to)` means `to` reads
/// `from`'s previous-round output.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundTopology {
    edges: BTreeSet<(AgentId, AgentId)>,
}

impl RoundTopology {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_edges(edges: impl IntoIterator<Item = (AgentId, AgentId)>) -> Self {
        Self {
            edges: edges.into_iter().filter(|(a, b)| a != b).collect(),
        }
    }

    pub fn full(agents: &[AgentId]) -> Self {
        Self::from_edges(
            agents
                .iter()
                .flat_map(|&a| agents.iter().map(move |&b| (a, b))),
        )
    }

    /// Every agent feeds and is fed by exactly `ceil(fraction * (n - 1))`
    /// peers: agents are placed on a random cycle and each feeds the next
    /// `m` positions along it.
    pub fn sampled(agents: &[AgentId], fraction: f64, rng: &mut impl Rng) -> Self {
        let n = agents.len();
        if n < 2 {
            return Self::empty();
        }
        let m = in_degree(n, fraction);
        if m == n - 1 {
            return Self::full(agents);
        }
        let mut order = agents.to_vec();
        order.shuffle(rng);
        let edges = (0..n).flat_map(|p| {
            let order = &order;
            (1..=m).map(move |s| (order[p], order[(p + s) % n]))
        });
        Self::from_edges(edges)
    }

    pub fn contains(&self, from: AgentId, to: AgentId) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn edges(&self) -> impl Iterator<Item = (AgentId, AgentId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn in_neighbors(&self, to: AgentId) -> Vec<AgentId> {
        self.edges.iter().filter(|(_, b)| *b == to).map(|(a, _)| *a).collect()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Drops every edge touching an agent outside `keep`.
    pub fn restricted_to(&self, keep: &BTreeSet<AgentId>) -> Self {
        Self {
            edges: self
                .edges
                .iter()
                .filter(|(a, b)| keep.contains(a) && keep.contains(b))
                .copied()
                .collect(),
        }
    }
}

/// In-degree used by sparse topologies: `ceil(fraction * (n - 1))`, clamped
/// to `[0, n - 1]`.
pub fn in_degree(n: usize, fraction: f64) -> usize {
    if n < 2 {
        return 0;
    }
    let raw = (fraction * (n - 1) as f64 - 1e-9).ceil().max(0.0) as usize;
    raw.min(n - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub round: usize,
    pub agents: Vec<AgentId>,
    pub features: Tensor2D,
    /// Row-major `agents.len()^2`; `adjacency[i * n + j]` iff `i` feeds `j`.
    adjacency: Vec<bool>,
    pub response_texts: Vec<String>,
}

impl Snapshot {
    pub fn new(
        round: usize,
        agents: Vec<AgentId>,
        features: Tensor2D,
        adjacency: Vec<Vec<bool>>,
        response_texts: Vec<String>,
    ) -> Result<Self> {
        let n = agents.len();
        if features.rows() != n || adjacency.len() != n || response_texts.len() != n {
            return Err(GuardianError::InvalidArgument(format!(
                "snapshot with {n} agents, {} feature rows, {} adjacency rows, {} texts",
                features.rows(),
                adjacency.len(),
                response_texts.len()
            )));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = agents.iter().find(|a| !seen.insert(**a)) {
            return Err(GuardianError::DuplicateAgent(dup.0));
        }
        let mut flat = Vec::with_capacity(n * n);
        for (i, row) in adjacency.iter().enumerate() {
            if row.len() != n {
                return Err(GuardianError::InvalidArgument(format!("adjacency row {i} has length {}", row.len())));
            }
            flat.extend(row.iter().enumerate().map(|(j, &e)| e && i != j));
        }
        Ok(Self {
            round,
            agents,
            features,
            adjacency: flat,
            response_texts,
        })
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.agents.len() + j]
    }

    pub fn index_of(&self, a: AgentId) -> Option<usize> {
        self.agents.iter().position(|&x| x == a)
    }

    pub fn contains(&self, a: AgentId) -> bool {
        self.index_of(a).is_some()
    }

    /// Directed `(from, to)` pairs of this round at agent granularity.
    pub fn edge_pairs(&self) -> Vec<(AgentId, AgentId)> {
        let n = self.agents.len();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.edge(i, j))
            .map(|(i, j)| (self.agents[i], self.agents[j]))
            .collect()
    }

    /// Copy with the given agents' rows and columns removed.
    pub fn without(&self, drop: &BTreeSet<AgentId>) -> Snapshot {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| !drop.contains(&self.agents[i])).collect();
        let n = self.len();
        Snapshot {
            round: self.round,
            agents: keep.iter().map(|&i| self.agents[i]).collect(),
            features: self.features.gather_rows(&keep.iter().map(|&i| Some(i)).collect::<Vec<_>>()),
            adjacency: keep
                .iter()
                .flat_map(|&i| keep.iter().map(move |&j| (i, j)))
                .map(|(i, j)| self.adjacency[i * n + j])
                .collect(),
            response_texts: keep.iter().map(|&i| self.response_texts[i].clone()).collect(),
        }
    }
}

/// Embeds each response and projects the round's topology onto the active
/// agents. Round 1 has no predecessor, so its adjacency is empty.
pub fn build_snapshot(
    round: usize,
    responses: &[(AgentId, String)],
    topology: &RoundTopology,
    embedder: &dyn Embedder,
) -> Result<Snapshot> {
    if responses.is_empty() {
        return Err(GuardianError::InvalidArgument("snapshot needs at least one response".into()));
    }
    let k = embedder.dim();
    let mut values = Vec::with_capacity(responses.len() * k);
    for (agent, text) in responses {
        let v = embedder.embed(text)?;
        if v.len() != k {
            return Err(GuardianError::Embedding(format!(
                "agent {agent}: embedder returned {} dims, expected {k}",
                v.len()
            )));
        }
        values.extend(v);
    }
    let agents: Vec<AgentId> = responses.iter().map(|(a, _)| *a).collect();
    let adjacency = agents
        .iter()
        .map(|&i| agents.iter().map(|&j| round > 1 && topology.contains(i, j)).collect())
        .collect();
    Snapshot::new(
        round,
        agents,
        Tensor2D::new(responses.len(), k, values)?,
        adjacency,
        responses.iter().map(|(_, t)| t.clone()).collect(),
    )
}

/// Symmetrized adjacency plus self-loops as a 0/1 matrix.
pub fn self_looped_adjacency(s: &Snapshot) -> Tensor2D {
    let n = s.len();
    let mut a = Tensor2D::identity(n);
    for i in 0..n {
        for j in 0..n {
            if s.edge(i, j) || s.edge(j, i) {
                a.set(i, j, 1.0);
            }
        }
    }
    a
}

/// `D^{-1/2} Â D^{-1/2}` with `Â` the self-looped symmetrized adjacency.
pub fn normalized_adjacency(s: &Snapshot) -> Tensor2D {
    let a = self_looped_adjacency(s);
    let n = s.len();
    let degree: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    let mut out = Tensor2D::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, a.get(i, j) / (degree[i] * degree[j]).sqrt());
        }
    }
    out
}

/// Communication record `(from_round, from) -> (to_round, to)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayeredEdge {
    pub from_round: usize,
    pub from: AgentId,
    pub to_round: usize,
    pub to: AgentId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalRecord {
    pub agent: AgentId,
    pub round: usize,
    pub score: Option<f64>,
    /// Set when the agent had already been removed; the graph is unchanged.
    pub duplicate: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemporalGraph {
    snapshots: Vec<Snapshot>,
    removed: BTreeMap<AgentId, usize>,
    layered_edges: Vec<LayeredEdge>,
    removal_log: Vec<RemovalRecord>,
}

impl TemporalGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn snapshot(&self, round: usize) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.round == round)
    }

    pub fn latest_round(&self) -> Option<usize> {
        self.snapshots.last().map(|s| s.round)
    }

    pub fn layered_edges(&self) -> &[LayeredEdge] {
        &self.layered_edges
    }

    pub fn removed(&self) -> &BTreeMap<AgentId, usize> {
        &self.removed
    }

    pub fn removal_log(&self) -> &[RemovalRecord] {
        &self.removal_log
    }

    pub fn is_removed(&self, a: AgentId) -> bool {
        self.removed.contains_key(&a)
    }

    /// Appends the next round. Its agents must not include removed ones, and
    /// every edge must come from an agent active in the previous round.
    pub fn push_snapshot(&mut self, s: Snapshot) -> Result<()> {
        if let Some(last) = self.latest_round() {
            if s.round <= last {
                return Err(GuardianError::InvalidArgument(format!(
                    "round {} does not follow round {last}",
                    s.round
                )));
            }
        }
        if let Some(a) = s.agents.iter().find(|a| self.is_removed(**a)) {
            return Err(GuardianError::InactiveAgent {
                agent: a.0,
                round: s.round,
            });
        }
        let prev = self.snapshots.last().filter(|p| p.round + 1 == s.round);
        let mut edges = Vec::new();
        for (from, to) in s.edge_pairs() {
            match prev {
                Some(p) if p.contains(from) => edges.push(LayeredEdge {
                    from_round: p.round,
                    from,
                    to_round: s.round,
                    to,
                }),
                _ => {
                    return Err(GuardianError::InactiveAgent {
                        agent: from.0,
                        round: s.round.saturating_sub(1),
                    })
                }
            }
        }
        self.layered_edges.extend(edges);
        self.snapshots.push(s);
        Ok(())
    }

    pub fn remove_node(&mut self, a: AgentId, from_round: usize) -> Result<bool> {
        self.remove_node_scored(a, from_round, None)
    }

    /// Excludes `a` from every round after `from_round` and drops its later
    /// edges. Returns `false` (logging a duplicate) if it was already removed.
    pub fn remove_node_scored(&mut self, a: AgentId, from_round: usize, score: Option<f64>) -> Result<bool> {
        if self.is_removed(a) {
            self.removal_log.push(RemovalRecord {
                agent: a,
                round: from_round,
                score,
                duplicate: true,
            });
            return Ok(false);
        }
        if !self.snapshot(from_round).is_some_and(|s| s.contains(a)) {
            return Err(GuardianError::InactiveAgent {
                agent: a.0,
                round: from_round,
            });
        }
        self.removed.insert(a, from_round);
        let drop = BTreeSet::from([a]);
        for s in self.snapshots.iter_mut().filter(|s| s.round > from_round) {
            *s = s.without(&drop);
        }
        self.layered_edges
            .retain(|e| e.to_round <= from_round || (e.from != a && e.to != a));
        self.removal_log.push(RemovalRecord {
            agent: a,
            round: from_round,
            score,
            duplicate: false,
        });
        Ok(true)
    }

    /// Snapshots `1..=upto` with each agent's per-round presence.
    pub fn merge_history(&self, upto: usize) -> Result<MergedHistory> {
        if self.latest_round().is_none_or(|last| upto > last) {
            return Err(GuardianError::InvalidArgument(format!(
                "history requested up to round {upto}, latest is {:?}",
                self.latest_round()
            )));
        }
        let snapshots: Vec<Snapshot> = self
            .snapshots
            .iter()
            .filter(|s| s.round <= upto)
            .map(|s| {
                let gone: BTreeSet<AgentId> = self
                    .removed
                    .iter()
                    .filter(|(_, &r)| r < s.round)
                    .map(|(a, _)| *a)
                    .collect();
                s.without(&gone)
            })
            .collect();
        Ok(MergedHistory::new(snapshots))
    }
}

/// Ordered snapshots plus, per agent, which of them it appears in.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedHistory {
    pub snapshots: Vec<Snapshot>,
    pub presence: BTreeMap<AgentId, Vec<bool>>,
}

impl MergedHistory {
    pub fn new(snapshots: Vec<Snapshot>) -> Self {
        let mut presence: BTreeMap<AgentId, Vec<bool>> = BTreeMap::new();
        for (t, s) in snapshots.iter().enumerate() {
            for &a in &s.agents {
                presence.entry(a).or_insert_with(|| vec![false; snapshots.len()])[t] = true;
            }
        }
        Self { snapshots, presence }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn last(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }

    /// Drops the given agents from every snapshot.
    pub fn excluding(&self, drop: &BTreeSet<AgentId>) -> Self {
        Self::new(self.snapshots.iter().map(|s| s.without(drop)).collect())
    }

    /// Keeps only the most recent `window` snapshots.
    pub fn truncated(&self, window: usize) -> Self {
        let skip = self.snapshots.len().saturating_sub(window);
        Self::new(self.snapshots[skip..].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::{EmbeddingConfig, HashingEmbedder};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<AgentId> {
        (0..n).map(AgentId).collect()
    }

    fn embedder() -> HashingEmbedder {
        HashingEmbedder::new(EmbeddingConfig::default()).unwrap()
    }

    fn responses(agents: &[AgentId], round: usize) -> Vec<(AgentId, String)> {
        agents.iter().map(|a| (*a, format!("Answer: x{}. round {round}", a.0))).collect()
    }

    fn full_graph(n: usize, rounds: usize) -> TemporalGraph {
        let agents = ids(n);
        let mut g = TemporalGraph::new();
        for t in 1..=rounds {
            let s = build_snapshot(t, &responses(&agents, t), &RoundTopology::full(&agents), &embedder()).unwrap();
            g.push_snapshot(s).unwrap();
        }
        g
    }

    #[test]
    fn single_agent_snapshot() {
        let s = build_snapshot(1, &[(AgentId(0), "hi".into())], &RoundTopology::empty(), &embedder()).unwrap();
        assert_eq!(s.features.shape(), (1, 64));
        assert!(!s.edge(0, 0));
        assert_eq!(normalized_adjacency(&s), Tensor2D::identity(1));
    }

    #[test]
    fn full_topology_off_diagonal() {
        let a = ids(4);
        let s = build_snapshot(2, &responses(&a, 2), &RoundTopology::full(&a), &embedder()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(s.edge(i, j), i != j);
            }
        }
        let r1 = build_snapshot(1, &responses(&a, 1), &RoundTopology::full(&a), &embedder()).unwrap();
        assert!(r1.edge_pairs().is_empty());
    }

    #[test]
    fn half_sparsity_gives_two_per_row_and_column() {
        let a = ids(4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let topo = RoundTopology::sampled(&a, 0.5, &mut rng);
            let s = build_snapshot(2, &responses(&a, 2), &topo, &embedder()).unwrap();
            for i in 0..4 {
                assert_eq!((0..4).filter(|&j| s.edge(i, j)).count(), 2);
                assert_eq!((0..4).filter(|&j| s.edge(j, i)).count(), 2);
            }
        }
    }

    #[test]
    fn sampled_degrees_for_listed_fractions() {
        let a = ids(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (fraction, m) in [(0.25, 1), (0.5, 2), (0.75, 3), (1.0, 4)] {
            let topo = RoundTopology::sampled(&a, fraction, &mut rng);
            for &x in &a {
                assert_eq!(topo.in_neighbors(x).len(), m, "fraction {fraction}");
            }
        }
    }

    #[test]
    fn duplicate_agent_rejected() {
        let r = vec![(AgentId(1), "a".to_string()), (AgentId(1), "b".to_string())];
        assert!(matches!(
            build_snapshot(1, &r, &RoundTopology::empty(), &embedder()),
            Err(GuardianError::DuplicateAgent(1))
        ));
    }

    #[test]
    fn normalized_adjacency_two_nodes() {
        let s = build_snapshot(
            2,
            &responses(&ids(2), 2),
            &RoundTopology::from_edges([(AgentId(0), AgentId(1))]),
            &embedder(),
        )
        .unwrap();
        let n = normalized_adjacency(&s);
        assert_eq!(n, Tensor2D::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap());
    }

    #[test]
    fn isolated_nodes_normalize_to_identity() {
        let s = build_snapshot(1, &responses(&ids(5), 1), &RoundTopology::empty(), &embedder()).unwrap();
        assert_eq!(normalized_adjacency(&s), Tensor2D::identity(5));
    }

    #[test]
    fn merge_history_without_removals_is_verbatim() {
        let g = full_graph(3, 3);
        let h = g.merge_history(3).unwrap();
        assert_eq!(h.snapshots, g.snapshots());
        assert!(h.presence.values().all(|p| p.iter().all(|&x| x)));
        assert_eq!(g.merge_history(1).unwrap().len(), 1);
        assert!(g.merge_history(4).is_err());
    }

    #[test]
    fn merge_history_after_removal() {
        let agents = ids(4);
        let mut g = TemporalGraph::new();
        g.push_snapshot(build_snapshot(1, &responses(&agents, 1), &RoundTopology::full(&agents), &embedder()).unwrap())
            .unwrap();
        g.remove_node(AgentId(1), 1).unwrap();
        let rest: Vec<AgentId> = agents.iter().copied().filter(|a| a.0 != 1).collect();
        g.push_snapshot(build_snapshot(2, &responses(&rest, 2), &RoundTopology::full(&rest), &embedder()).unwrap())
            .unwrap();

        let h = g.merge_history(2).unwrap();
        assert!(!h.snapshots[1].contains(AgentId(1)));
        assert_eq!(h.presence[&AgentId(1)], vec![true, false]);
        assert_eq!(g.layered_edges().len(), 6);
        assert_eq!(g.snapshot(1).unwrap().len(), 4);
    }

    #[test]
    fn remove_node_prunes_later_rounds_retroactively() {
        let mut g = full_graph(4, 3);
        assert_eq!(g.layered_edges().len(), 24);
        assert!(g.remove_node(AgentId(2), 1).unwrap());
        assert_eq!(g.snapshot(1).unwrap().len(), 4);
        assert_eq!(g.snapshot(2).unwrap().len(), 3);
        assert_eq!(g.snapshot(3).unwrap().len(), 3);
        assert_eq!(g.layered_edges().len(), 12);
        assert!(g
            .layered_edges()
            .iter()
            .all(|e| e.from != AgentId(2) && e.to != AgentId(2)));
        // idempotent, flagged
        assert!(!g.remove_node(AgentId(2), 2).unwrap());
        assert!(g.removal_log()[1].duplicate);
        assert_eq!(g.snapshot(2).unwrap().len(), 3);
    }

    #[test]
    fn removing_sole_agent_empties_future() {
        let mut g = full_graph(1, 2);
        g.remove_node(AgentId(0), 1).unwrap();
        assert!(g.snapshot(2).unwrap().is_empty());
        assert!(g.snapshot(1).unwrap().contains(AgentId(0)));
    }

    #[test]
    fn remove_inactive_rejected() {
        let mut g = full_graph(2, 1);
        assert!(g.remove_node(AgentId(7), 1).is_err());
        assert!(g.remove_node(AgentId(0), 5).is_err());
    }

    #[test]
    fn push_rejects_removed_agents_and_stale_rounds() {
        let mut g = full_graph(2, 1);
        g.remove_node(AgentId(0), 1).unwrap();
        let all = ids(2);
        let s = build_snapshot(2, &responses(&all, 2), &RoundTopology::empty(), &embedder()).unwrap();
        assert!(g.push_snapshot(s).is_err());
        let s = build_snapshot(1, &responses(&all[1..], 1), &RoundTopology::empty(), &embedder()).unwrap();
        assert!(g.push_snapshot(s).is_err());
    }

    proptest! {
        #[test]
        fn normalized_adjacency_symmetric_in_unit_interval(n in 1usize..7, seed in 0u64..500, fraction in prop::sample::select(vec![0.25, 0.5, 0.75, 1.0])) {
            let a = ids(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let topo = RoundTopology::sampled(&a, fraction, &mut rng);
            let s = build_snapshot(2, &responses(&a, 2), &topo, &embedder()).unwrap();
            let m = normalized_adjacency(&s);
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((m.get(i, j) - m.get(j, i)).abs() < 1e-15);
                    prop_assert!((0.0..=1.0).contains(&m.get(i, j)));
                }
            }
        }

        #[test]
        fn removals_are_monotone(n in 2usize..6, rounds in 1usize..4, picks in prop::collection::vec((0usize..6, 1usize..4), 0..6)) {
            let mut g = full_graph(n, rounds);
            let mut prev: Vec<usize> = g.snapshots().iter().map(Snapshot::len).collect();
            for (a, r) in picks {
                let _ = g.remove_node(AgentId(a), r);
                let now: Vec<usize> = g.snapshots().iter().map(Snapshot::len).collect();
                prop_assert!(now.iter().zip(&prev).all(|(x, y)| x <= y));
                prop_assert!(g.layered_edges().iter().all(|e| e.to_round == e.from_round + 1));
                for e in g.layered_edges() {
                    if let Some(&r) = g.removed().get(&e.from) { prop_assert!(e.to_round <= r); }
                    if let Some(&r) = g.removed().get(&e.to) { prop_assert!(e.to_round <= r); }
                }
                prev = now;
            }
            let h1 = g.merge_history(rounds).unwrap();
            let h2 = g.merge_history(rounds).unwrap();
            prop_assert_eq!(h1, h2);
        }
    }
}
