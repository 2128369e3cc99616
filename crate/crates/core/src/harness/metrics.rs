use serde::{Deserialize, Serialize};

use crate::error::{GuardianError, Result};
use crate::simulator::EpisodeLog;

/// Round weights for the detection rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Decay {
    /// `w_t = lambda^(t-1)`.
    Exponential(f64),
    /// `w_t = (T - t + 1) / T` with `T` the episode's round budget.
    Linear,
}

impl Decay {
    pub const DEFAULT_LAMBDA: f64 = 0.5;

    pub fn lambda(&self) -> Option<f64> {
        match self {
            Self::Exponential(l) => Some(*l),
            Self::Linear => None,
        }
    }

    pub fn weight(&self, t: usize, horizon: usize) -> f64 {
        match self {
            Self::Exponential(l) => l.powi(t as i32 - 1),
            Self::Linear => {
                let h = horizon.max(t) as f64;
                (h - t as f64 + 1.0) / h
            }
        }
    }
}

impl Default for Decay {
    fn default() -> Self {
        Self::Exponential(Self::DEFAULT_LAMBDA)
    }
}

/// How removal rounds from several episodes combine into one rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One weighted average over all removal rounds of all episodes.
    Pooled,
    /// Mean of per-episode rates over episodes with at least one removal.
    PerEpisode,
}

impl std::str::FromStr for Pooling {
    type Err = GuardianError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Self::Pooled),
            "per_episode" => Ok(Self::PerEpisode),
            other => Err(GuardianError::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pooled => "pooled",
            Self::PerEpisode => "per_episode",
        })
    }
}

/// Aggregate results. Detection fields are `None` when labels are missing
/// (remote agents) or, for the detection rate, when nothing was removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub accuracy: f64,
    pub detection_rate: Option<f64>,
    pub fdr: Option<f64>,
    pub api_calls_mean: f64,
    pub removals: usize,
    pub runtime_seconds: f64,
}

/// `(weight, hit)` for every removal of one episode, or `None` without labels.
fn removal_hits(log: &EpisodeLog, decay: Decay, horizon: usize) -> Option<Vec<(f64, bool)>> {
    if !log.ground_truth.available {
        return None;
    }
    let horizon = horizon.max(log.rounds.len());
    log.removals()
        .into_iter()
        .map(|(t, agent)| {
            let hit = log.ground_truth.anomalous(&log.rounds, t, agent)?;
            Some((decay.weight(t, horizon), hit))
        })
        .collect()
}

fn weighted_rate(hits: &[(f64, bool)]) -> Option<f64> {
    let total: f64 = hits.iter().map(|h| h.0).sum();
    (total > 0.0).then(|| hits.iter().filter(|h| h.1).map(|h| h.0).sum::<f64>() / total)
}

/// Metrics over a set of episodes. `horizon` is the round budget used by
/// linear decay. The result does not depend on the order of `logs`.
pub fn compute_metrics(logs: &[EpisodeLog], decay: Decay, pooling: Pooling, horizon: usize) -> Result<MetricsReport> {
    if logs.is_empty() {
        return Err(GuardianError::InvalidArgument("no episodes to score".into()));
    }
    // Fold in a canonical order so float sums do not depend on input order.
    let mut keyed: Vec<(usize, String, &EpisodeLog)> = logs
        .iter()
        .map(|l| Ok((l.task.id, serde_json::to_string(l)?, l)))
        .collect::<Result<_>>()?;
    keyed.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    let sorted: Vec<&EpisodeLog> = keyed.into_iter().map(|k| k.2).collect();

    let n = sorted.len() as f64;
    let accuracy = sorted.iter().filter(|l| l.is_correct()).count() as f64 / n;
    let api_calls_mean = sorted.iter().map(|l| l.api_calls as f64).sum::<f64>() / n;
    let removals = sorted.iter().map(|l| l.removals().len()).sum();

    let per_episode: Option<Vec<Vec<(f64, bool)>>> = sorted.iter().map(|l| removal_hits(l, decay, horizon)).collect();
    let (detection_rate, fdr) = match per_episode {
        None => (None, None),
        Some(eps) => {
            let all: Vec<(f64, bool)> = eps.iter().flatten().copied().collect();
            let fp = all.iter().filter(|h| !h.1).count();
            let fdr = if all.is_empty() { 0.0 } else { fp as f64 / all.len() as f64 };
            let rate = match pooling {
                Pooling::Pooled => weighted_rate(&all),
                Pooling::PerEpisode => {
                    let rates: Vec<f64> = eps.iter().filter_map(|h| weighted_rate(h)).collect();
                    (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
                }
            };
            (rate, Some(fdr))
        }
    };
    Ok(MetricsReport {
        episodes: logs.len(),
        accuracy,
        detection_rate,
        fdr,
        api_calls_mean,
        removals,
        runtime_seconds: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_model::AgentId;
    use crate::simulator::{GroundTruth, RoundRecord, Task};
    use proptest::prelude::*;

    /// An episode with one removal per listed round; `hits[i]` says whether
    /// the removed agent was labeled at that round.
    fn episode(id: usize, hits: &[bool], correct: bool) -> EpisodeLog {
        let task = Task::new(id, "q", vec!["a".into(), "b".into()], 0).unwrap();
        let rounds: Vec<RoundRecord> = hits
            .iter()
            .enumerate()
            .map(|(i, _)| RoundRecord {
                t: i + 1,
                agents: vec![AgentId(i), AgentId(99)],
                responses: vec![String::new(); 2],
                answers: vec!["a".into(); 2],
                edges: vec![],
                removed: Some(AgentId(i)),
                scores: Some(vec![1.0, 0.0]),
            })
            .collect();
        let err = hits.iter().map(|&h| vec![h, false]).collect();
        EpisodeLog {
            task,
            api_calls: rounds.len() * 2,
            ground_truth: GroundTruth {
                h: vec![vec![false, false]; hits.len()],
                err,
                corrupted_edges: vec![],
                available: true,
            },
            rounds,
            final_answer: if correct { "a".into() } else { "b".into() },
        }
    }

    fn metrics(logs: &[EpisodeLog]) -> MetricsReport {
        compute_metrics(logs, Decay::default(), Pooling::Pooled, 3).unwrap()
    }

    #[test]
    fn all_correct_removals() {
        let m = metrics(&[episode(0, &[true, true], true)]);
        assert_eq!(m.fdr, Some(0.0));
        assert_eq!(m.detection_rate, Some(1.0));
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.api_calls_mean, 4.0);
    }

    #[test]
    fn exponential_weights() {
        let m = metrics(&[episode(0, &[true, false], true)]);
        assert!((m.detection_rate.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.fdr, Some(0.5));
    }

    #[test]
    fn linear_weights() {
        let m = compute_metrics(&[episode(0, &[false, true, true], true)], Decay::Linear, Pooling::Pooled, 3).unwrap();
        // weights 1, 2/3, 1/3
        assert!((m.detection_rate.unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn one_wrong_in_four() {
        let m = metrics(&[episode(0, &[true, true], true), episode(1, &[true, false], false)]);
        assert_eq!(m.fdr, Some(0.25));
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.removals, 4);
    }

    #[test]
    fn no_removals_means_no_rate_and_zero_fdr() {
        let mut log = episode(0, &[true], true);
        log.rounds[0].removed = None;
        let m = metrics(&[log]);
        assert_eq!((m.detection_rate, m.fdr), (None, Some(0.0)));
    }

    #[test]
    fn missing_labels_disable_detection_metrics() {
        let mut log = episode(0, &[true], true);
        log.ground_truth.available = false;
        let m = metrics(&[log]);
        assert_eq!((m.detection_rate, m.fdr), (None, None));
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn pooling_modes_differ() {
        let logs = [episode(0, &[true], true), episode(1, &[false, false, false], true)];
        let pooled = compute_metrics(&logs, Decay::default(), Pooling::Pooled, 3).unwrap();
        let per = compute_metrics(&logs, Decay::default(), Pooling::PerEpisode, 3).unwrap();
        assert!((pooled.detection_rate.unwrap() - 1.0 / 2.75).abs() < 1e-12);
        assert_eq!(per.detection_rate, Some(0.5));
        assert!(compute_metrics(&[], Decay::default(), Pooling::Pooled, 3).is_err());
    }

    proptest! {
        #[test]
        fn order_free_and_consistent(eps in prop::collection::vec((prop::collection::vec(any::<bool>(), 1..4), any::<bool>()), 1..6), rot in 0usize..6) {
            let logs: Vec<EpisodeLog> = eps.iter().enumerate().map(|(i, (h, c))| episode(i, h, *c)).collect();
            let mut shuffled = logs.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let a = metrics(&logs);
            let b = metrics(&shuffled);
            prop_assert_eq!(&a, &b);
            for v in [a.accuracy, a.detection_rate.unwrap(), a.fdr.unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(a.fdr == Some(0.0), a.detection_rate == Some(1.0));
        }
    }
}
