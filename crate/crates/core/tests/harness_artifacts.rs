use guardian::detector::checkpoint;
use guardian::harness::{
    compute_metrics, metrics_csv, read_episodes, run_experiment, trial_dir, ExperimentConfig, METRICS_HEADER,
};
use guardian::simulator::AttackKind;

fn small(attack: AttackKind, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        attack,
        tasks: 6,
        seed,
        record_runtime: false,
        ..ExperimentConfig::default()
    }
}

#[test]
fn artifacts_round_trip_into_the_same_metrics() {
    let cfg = ExperimentConfig {
        trials: 2,
        ..small(AttackKind::AgentTargeted, 3)
    };
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&cfg, Some(dir.path())).unwrap();

    let mut logs = Vec::new();
    for k in 0..cfg.trials {
        let read = read_episodes(&trial_dir(dir.path(), k).join("episodes.json")).unwrap();
        assert_eq!(read, outcome.trials[k].episodes);
        logs.extend(read);
    }
    let report = compute_metrics(&logs, cfg.decay, cfg.pooling, cfg.max_rounds).unwrap();
    assert_eq!(report, outcome.report);

    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with(METRICS_HEADER));
    assert_eq!(csv, metrics_csv(&outcome.config_hash, cfg.trials, &report));

    let graphs = trial_dir(dir.path(), 1).join("graphs");
    for task in 0..cfg.tasks {
        assert!(graphs.join(format!("task-{task}.json")).is_file());
        assert!(graphs.join(format!("task-{task}.dot")).is_file());
    }
    let kv = std::fs::read_to_string(dir.path().join("config.kv")).unwrap();
    assert!(kv.contains("attack = agent\n"), "{kv}");
}

#[test]
fn graph_export_can_be_disabled() {
    let cfg = ExperimentConfig {
        export_graphs: false,
        ..small(AttackKind::Hallucination, 4)
    };
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, Some(dir.path())).unwrap();
    assert!(trial_dir(dir.path(), 0).join("episodes.json").is_file());
    assert!(!trial_dir(dir.path(), 0).join("graphs").exists());
}

#[test]
fn undefended_runs_never_remove_agents() {
    let cfg = ExperimentConfig {
        defense: false,
        ..small(AttackKind::CommTargeted, 5)
    };
    let outcome = run_experiment(&cfg, None).unwrap();
    assert_eq!(outcome.report.removals, 0);
    assert_eq!(outcome.report.detection_rate, None);
    assert_eq!(outcome.report.fdr, Some(0.0));
    assert!(outcome.episodes().all(|e| e.rounds.iter().all(|r| r.removed.is_none() && r.scores.is_none())));
    assert!(outcome.trials[0].detector.is_none());
}

#[test]
fn experiment_from_checkpoint_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let trained = run_experiment(&small(AttackKind::None, 6), None).unwrap();
    let detector = trained.trials[0].detector.clone().unwrap();
    let path = dir.path().join("detector.ckpt");
    checkpoint::save(&detector, &path).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap().params().len(), detector.params().len());

    let cfg = ExperimentConfig {
        checkpoint: Some(path),
        ..small(AttackKind::AgentTargeted, 7)
    };
    let a = run_experiment(&cfg, None).unwrap();
    let b = run_experiment(&cfg, None).unwrap();
    assert_eq!(a.trials[0].episodes, b.trials[0].episodes);
    assert!(a.report.removals > 0);
}

#[test]
fn sparse_topologies_run_every_attack() {
    for (i, attack) in [AttackKind::None, AttackKind::Hallucination, AttackKind::AgentTargeted, AttackKind::CommTargeted]
        .into_iter()
        .enumerate()
    {
        for topology in [0.25, 0.5, 0.75] {
            let cfg = ExperimentConfig {
                topology,
                n_agents: 5,
                ..small(attack, 10 + i as u64)
            };
            let outcome = run_experiment(&cfg, None).unwrap();
            assert_eq!(outcome.report.episodes, cfg.tasks);
            for e in outcome.episodes() {
                assert!(e.rounds.len() <= cfg.max_rounds);
                if attack == AttackKind::CommTargeted {
                    assert!(!e.ground_truth.corrupted_edges.is_empty());
                }
            }
        }
    }
}
