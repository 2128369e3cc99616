use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedder::Embedder;
use crate::error::{GuardianError, Result};
use crate::graph_model::{build_snapshot, AgentId, LayeredEdge, RoundTopology, TemporalGraph};
use crate::simulator::EpisodeLog;

use super::metrics::MetricsReport;

pub const EPISODE_SCHEMA: &str = include_str!("../../../../schemas/episode.schema.json");
pub const GRAPH_SCHEMA: &str = include_str!("../../../../schemas/graph.schema.json");

pub const METRICS_HEADER: &str = "config_hash,trials,accuracy,detection_rate,fdr,api_calls_mean,runtime_seconds";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Json,
    Dot,
}

impl std::str::FromStr for GraphFormat {
    type Err = GuardianError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "dot" => Ok(Self::Dot),
            other => Err(GuardianError::Config(format!("unknown graph format {other:?}"))),
        }
    }
}

impl GraphFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            Self::Json => "json",
            Self::Dot => "dot",
        }
    }
}

/// Extra per-node and per-edge facts drawn on an exported graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphAnnotations {
    pub scores: BTreeMap<(usize, AgentId), f64>,
    pub corrupted: BTreeSet<LayeredEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub round: usize,
    pub agent: AgentId,
    pub score: Option<f64>,
    pub removed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    /// An agent's continuation from one round to the next.
    #[serde(rename = "self")]
    SelfLoop,
    Message,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from_round: usize,
    pub from: AgentId,
    pub to_round: usize,
    pub to: AgentId,
    pub kind: EdgeKind,
    pub corrupted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRemoval {
    pub agent: AgentId,
    pub round: usize,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub rounds: Vec<usize>,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub removals: Vec<GraphRemoval>,
}

fn node_id(round: usize, agent: AgentId) -> String {
    format!("r{round}_a{}", agent.0)
}

/// Node and edge records for a temporal graph.
pub fn graph_records(g: &TemporalGraph, ann: &GraphAnnotations) -> GraphExport {
    let removed_at: BTreeMap<AgentId, usize> = g.removed().clone();
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut prev: Option<(usize, BTreeSet<AgentId>)> = None;
    for s in g.snapshots() {
        for &a in &s.agents {
            nodes.push(GraphNode {
                id: node_id(s.round, a),
                round: s.round,
                agent: a,
                score: ann.scores.get(&(s.round, a)).copied(),
                removed: removed_at.get(&a) == Some(&s.round),
            });
        }
        if let Some((pr, present)) = &prev {
            if pr + 1 == s.round {
                for &a in s.agents.iter().filter(|a| present.contains(a)) {
                    edges.push(GraphEdge {
                        from_round: *pr,
                        from: a,
                        to_round: s.round,
                        to: a,
                        kind: EdgeKind::SelfLoop,
                        corrupted: false,
                    });
                }
            }
        }
        prev = Some((s.round, s.agents.iter().copied().collect()));
    }
    for e in g.layered_edges() {
        edges.push(GraphEdge {
            from_round: e.from_round,
            from: e.from,
            to_round: e.to_round,
            to: e.to,
            kind: EdgeKind::Message,
            corrupted: ann.corrupted.contains(e),
        });
    }
    edges.sort_by_key(|e| (e.to_round, e.from, e.to, e.kind == EdgeKind::Message));
    GraphExport {
        rounds: g.snapshots().iter().map(|s| s.round).collect(),
        nodes,
        edges,
        removals: g
            .removal_log()
            .iter()
            .filter(|r| !r.duplicate)
            .map(|r| GraphRemoval {
                agent: r.agent,
                round: r.round,
                score: r.score,
            })
            .collect(),
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

pub fn export_graph(g: &TemporalGraph, ann: &GraphAnnotations, format: GraphFormat) -> Result<String> {
    let rec = graph_records(g, ann);
    match format {
        GraphFormat::Json => Ok(serde_json::to_string_pretty(&rec)? + "\n"),
        GraphFormat::Dot => {
            let mut out = String::from("digraph guardian {\n  rankdir=LR;\n  node [shape=circle];\n");
            for &round in &rec.rounds {
                let _ = writeln!(out, "  subgraph cluster_r{round} {{\n    label=\"round {round}\";");
                for n in rec.nodes.iter().filter(|n| n.round == round) {
                    let mut label = format!("a{}", n.agent.0);
                    if let Some(s) = n.score {
                        let _ = write!(label, "\\n{s:.3}");
                    }
                    let style = if n.removed {
                        ", style=filled, fillcolor=\"#f4a6a6\", xlabel=\"removed\""
                    } else {
                        ""
                    };
                    let _ = writeln!(out, "    \"{}\" [label=\"{}\"{style}];", n.id, dot_escape(&label));
                }
                out.push_str("  }\n");
            }
            for e in &rec.edges {
                let attrs = match (e.kind, e.corrupted) {
                    (EdgeKind::SelfLoop, _) => " [style=dashed, color=gray]",
                    (EdgeKind::Message, true) => " [color=red, label=\"corrupted\"]",
                    (EdgeKind::Message, false) => "",
                };
                let _ = writeln!(
                    out,
                    "  \"{}\" -> \"{}\"{attrs};",
                    node_id(e.from_round, e.from),
                    node_id(e.to_round, e.to)
                );
            }
            out.push_str("}\n");
            Ok(out)
        }
    }
}

pub fn write_graph(path: &Path, g: &TemporalGraph, ann: &GraphAnnotations, format: GraphFormat) -> Result<()> {
    std::fs::write(path, export_graph(g, ann, format)?)?;
    Ok(())
}

/// Rebuilds the temporal graph an episode induced, with removals applied
/// and scores and corrupted edges as annotations.
pub fn graph_from_log(log: &EpisodeLog, embedder: &dyn Embedder) -> Result<(TemporalGraph, GraphAnnotations)> {
    let mut g = TemporalGraph::new();
    let mut ann = GraphAnnotations::default();
    for r in &log.rounds {
        let responses: Vec<(AgentId, String)> = r.agents.iter().copied().zip(r.responses.iter().cloned()).collect();
        let topo = RoundTopology::from_edges(r.edges.iter().copied());
        g.push_snapshot(build_snapshot(r.t, &responses, &topo, embedder)?)?;
        let scores: Option<BTreeMap<AgentId, f64>> = r.scores.as_ref().map(|s| r.agents.iter().copied().zip(s.iter().copied()).collect());
        if let Some(s) = &scores {
            ann.scores.extend(s.iter().map(|(a, v)| ((r.t, *a), *v)));
        }
        if let Some(a) = r.removed {
            g.remove_node_scored(a, r.t, scores.as_ref().and_then(|s| s.get(&a).copied()))?;
        }
    }
    ann.corrupted = log
        .ground_truth
        .corrupted_edges
        .iter()
        .map(|e| LayeredEdge {
            from_round: e[0],
            from: AgentId(e[1]),
            to_round: e[2],
            to: AgentId(e[3]),
        })
        .collect();
    Ok((g, ann))
}

pub fn episodes_json(logs: &[EpisodeLog]) -> Result<String> {
    Ok(serde_json::to_string_pretty(logs)? + "\n")
}

pub fn write_episodes(path: &Path, logs: &[EpisodeLog]) -> Result<()> {
    std::fs::write(path, episodes_json(logs)?)?;
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeLog>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| GuardianError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

pub fn metrics_csv(config_hash: &str, trials: usize, m: &MetricsReport) -> String {
    format!(
        "{METRICS_HEADER}\n{config_hash},{trials},{:.6},{},{},{:.6},{:.3}\n",
        m.accuracy,
        fmt_opt(m.detection_rate),
        fmt_opt(m.fdr),
        m.api_calls_mean,
        m.runtime_seconds
    )
}

pub fn write_metrics(path: &Path, config_hash: &str, trials: usize, m: &MetricsReport) -> Result<()> {
    std::fs::write(path, metrics_csv(config_hash, trials, m))?;
    Ok(())
}
