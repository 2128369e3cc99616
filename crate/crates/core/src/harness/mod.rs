//! Experiment configuration, task corpora, metrics and file exports.

mod config;
mod corpus;
mod experiment;
mod export;
mod metrics;

pub use config::{
    ExperimentConfig, ENV_EMBEDDER_URL, ENV_REMOTE_AGENT_TOKEN, ENV_REMOTE_AGENT_URL, TOPOLOGY_FRACTIONS,
};
pub use corpus::{format_corpus, generate_corpus, load_corpus, parse_corpus, write_corpus};
pub use experiment::{
    load_tasks, make_embedder, make_pipeline, run_experiment, run_trial, trial_dir, trial_seed, write_artifacts,
    ExperimentOutcome, TrialResult,
};
pub use export::{
    episodes_json, export_graph, graph_from_log, graph_records, metrics_csv, read_episodes, write_episodes,
    write_graph, write_metrics, EdgeKind, GraphAnnotations, GraphEdge, GraphExport, GraphFormat, GraphNode,
    GraphRemoval, EPISODE_SCHEMA, GRAPH_SCHEMA, METRICS_HEADER,
};
pub use metrics::{compute_metrics, Decay, MetricsReport, Pooling};
