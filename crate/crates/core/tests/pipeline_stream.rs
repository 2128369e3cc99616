use guardian::detector::DetectorConfig;
use guardian::embedder::{EmbeddingConfig, HashingEmbedder};
use guardian::graph_model::{AgentId, RoundTopology};
use guardian::pipeline::{run_stream, Pipeline, PipelineConfig};
use guardian::GuardianError;

fn pipeline(seed: u64) -> Pipeline {
    let mut cfg = PipelineConfig::default();
    cfg.detector = DetectorConfig {
        seed,
        ..cfg.detector.with_gamma(0.005).unwrap()
    };
    Pipeline::new(cfg, Box::new(HashingEmbedder::new(EmbeddingConfig::default()).unwrap())).unwrap()
}

fn round(agents: &[AgentId], outlier: Option<AgentId>, t: usize) -> Vec<(AgentId, String)> {
    agents
        .iter()
        .map(|&a| {
            let answer = if Some(a) == outlier { "blue" } else { "green" };
            (a, format!("Answer: {answer}. Reasoning: Debate the question and state your answer. {t}"))
        })
        .collect()
}

fn argmax(scores: &[guardian::anomaly::AnomalyScore]) -> AgentId {
    scores
        .iter()
        .fold(None::<&guardian::anomaly::AnomalyScore>, |best, s| match best {
            Some(b) if b.value >= s.value => Some(b),
            _ => Some(s),
        })
        .expect("scored agents")
        .agent
}

#[test]
fn far_embedded_agent_scores_highest_in_later_rounds() {
    let agents: Vec<AgentId> = (0..4).map(AgentId).collect();
    let mut hits = 0;
    for seed in 0..100u64 {
        let outlier = AgentId(seed as usize % 4);
        let mut p = pipeline(seed);
        p.begin_episode().unwrap();
        let mut found = true;
        for t in 1..=3 {
            let responses: Vec<(AgentId, String)> = agents
                .iter()
                .map(|&a| {
                    let text = if a == outlier {
                        format!("zq{seed} xv{seed} kj{seed} wp{seed} round {t}")
                    } else {
                        round(&agents, None, t)[a.0].1.clone()
                    };
                    (a, text)
                })
                .collect();
            let topo = if t == 1 { RoundTopology::empty() } else { RoundTopology::full(&agents) };
            // Consensus suppresses pruning so the outlier stays in the graph.
            let d = p.ingest_round(&responses, &topo, true).unwrap();
            assert_eq!(d.removed, None);
            if t >= 2 {
                found &= argmax(&d.scores) == outlier;
            }
        }
        if found {
            hits += 1;
        }
    }
    assert!(hits >= 90, "{hits}/100");
}

#[test]
fn pruned_agents_leave_the_active_set() {
    let agents: Vec<AgentId> = (0..4).map(AgentId).collect();
    let mut p = pipeline(1);
    p.begin_episode().unwrap();
    let first = p.ingest_round(&round(&agents, Some(AgentId(2)), 1), &RoundTopology::empty(), false).unwrap();
    let removed = first.removed.expect("no consensus forces a removal");
    let active = p.active_agents().unwrap();
    assert_eq!(active.len(), 3);
    assert!(!active.contains(&removed));

    let err = p.ingest_round(&round(&agents, None, 2), &RoundTopology::full(&agents), true).unwrap_err();
    assert!(matches!(err, GuardianError::InvalidArgument(_)));

    let second = p.ingest_round(&round(&active, None, 2), &RoundTopology::full(&active), true).unwrap();
    assert_eq!(second.round, 2);
    assert_eq!(second.removed, None);
    assert_eq!(second.batch_len, 2);
    assert_eq!(second.losses.len(), p.config().detector.epochs_incremental);
}

#[test]
fn streams_are_deterministic_and_losses_fall() {
    let agents: Vec<AgentId> = (0..4).map(AgentId).collect();
    let tasks: Vec<usize> = (0..20).collect();
    let run = || {
        let mut p = pipeline(7);
        let means = run_stream(&mut p, &tasks, |p, &task| {
            let mut total = 0.0;
            for t in 1..=3 {
                let topo = if t == 1 { RoundTopology::empty() } else { RoundTopology::full(&agents) };
                let d = p.ingest_round(&round(&agents, None, t), &topo, true)?;
                total += d.mean_loss().unwrap_or(0.0);
                let _ = task;
            }
            Ok(total / 3.0)
        })
        .unwrap();
        (means, p.detector().clone())
    };
    let (a, det_a) = run();
    let (b, det_b) = run();
    assert_eq!(a, b);
    assert_eq!(det_a, det_b);
    assert!(a[19] < a[0], "first {} last {}", a[0], a[19]);
}

#[test]
fn empty_inputs_are_rejected() {
    let mut p = pipeline(0);
    p.begin_episode().unwrap();
    assert!(matches!(
        p.ingest_round(&[], &RoundTopology::empty(), false),
        Err(GuardianError::EpisodeExhausted)
    ));
    let none: [usize; 0] = [];
    assert!(run_stream(&mut p, &none, |_, _| Ok(())).is_err());
}
