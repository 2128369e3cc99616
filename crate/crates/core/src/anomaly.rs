//! Node scores from reconstruction residuals, the removal policy, and pruning.

use serde::{Deserialize, Serialize};

use crate::detector::Reconstruction;
use crate::error::{GuardianError, Result};
use crate::graph_model::{AgentId, TemporalGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub agent: AgentId,
    pub round: usize,
    pub value: f64,
}

/// `alpha * ||R_X[i]|| + (1 - alpha) * ||R_E[i]||` for every agent of the
/// reconstructed round.
pub fn score_nodes(recon: &Reconstruction, alpha: f64) -> Result<Vec<AnomalyScore>> {
    let n = recon.agents.len();
    if recon.r_x.rows() != n || recon.r_e.shape() != (n, n) {
        return Err(GuardianError::Shape {
            op: "score_nodes",
            left: recon.r_x.shape(),
            right: recon.r_e.shape(),
        });
    }
    Ok(recon
        .agents
        .iter()
        .enumerate()
        .map(|(i, &agent)| AnomalyScore {
            agent,
            round: recon.round,
            value: alpha * recon.r_x.row_norm(i) + (1.0 - alpha) * recon.r_e.row_norm(i),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Remove the top-scoring agent only in rounds without consensus.
    Top1OnNoConsensus,
    Top1Always,
    /// Remove the top-scoring agent among those above `tau`.
    Threshold,
}

impl std::str::FromStr for PolicyMode {
    type Err = GuardianError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1_on_no_consensus" => Ok(Self::Top1OnNoConsensus),
            "top1_always" => Ok(Self::Top1Always),
            "threshold" => Ok(Self::Threshold),
            other => Err(GuardianError::Config(format!("unknown policy mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Top1OnNoConsensus => "top1_on_no_consensus",
            Self::Top1Always => "top1_always",
            Self::Threshold => "threshold",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionPolicy {
    pub mode: PolicyMode,
    pub tau: f64,
}

impl Default for DetectionPolicy {
    fn default() -> Self {
        Self {
            mode: PolicyMode::Top1OnNoConsensus,
            tau: 0.0,
        }
    }
}

impl DetectionPolicy {
    /// At most one agent is removed per round.
    pub const MAX_REMOVALS_PER_ROUND: usize = 1;

    pub fn threshold(tau: f64) -> Result<Self> {
        let p = Self {
            mode: PolicyMode::Threshold,
            tau,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == PolicyMode::Threshold && !(self.tau >= 0.0) {
            return Err(GuardianError::Config(format!("threshold tau must be >= 0, got {}", self.tau)));
        }
        Ok(())
    }
}

// Highest score wins; equal scores go to the lowest agent id.
fn argmax<'a>(scores: impl Iterator<Item = &'a AnomalyScore>) -> Option<&'a AnomalyScore> {
    scores.fold(None, |best: Option<&AnomalyScore>, s| match best {
        Some(b) if b.value > s.value || (b.value == s.value && b.agent < s.agent) => Some(b),
        _ => Some(s),
    })
}

/// Applies the policy to one round's scores.
pub fn select_anomalies(scores: &[AnomalyScore], policy: &DetectionPolicy, consensus_reached: bool) -> Option<AnomalyScore> {
    match policy.mode {
        PolicyMode::Top1OnNoConsensus if consensus_reached => None,
        PolicyMode::Top1OnNoConsensus | PolicyMode::Top1Always => argmax(scores.iter()).copied(),
        PolicyMode::Threshold => argmax(scores.iter().filter(|s| s.value > policy.tau)).copied(),
    }
}

/// Removes the selected agent after `round`, logging the triggering score.
pub fn prune(graph: &mut TemporalGraph, selected: Option<&AnomalyScore>, round: usize) -> Result<bool> {
    match selected {
        None => Ok(false),
        Some(s) => graph.remove_node_scored(s.agent, round, Some(s.value)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::LossBreakdown;
    use crate::embedder::{EmbeddingConfig, HashingEmbedder};
    use crate::graph_model::{build_snapshot, RoundTopology};
    use crate::numerics::Tensor2D;
    use proptest::prelude::*;

    fn recon(r_x: Tensor2D, r_e: Tensor2D) -> Reconstruction {
        let n = r_x.rows();
        Reconstruction {
            round: 2,
            agents: (0..n).map(AgentId).collect(),
            x_hat: Tensor2D::zeros(n, r_x.cols()),
            edge_probs: Tensor2D::filled(n, n, 0.5),
            r_x,
            r_e,
            losses: LossBreakdown::compose(0.0, 0.0, 0.0, 0.5, 0.0),
            attention: vec![],
        }
    }

    fn scores(values: &[f64]) -> Vec<AnomalyScore> {
        values
            .iter()
            .enumerate()
            .map(|(i, &value)| AnomalyScore {
                agent: AgentId(i),
                round: 1,
                value,
            })
            .collect()
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let s = score_nodes(&recon(Tensor2D::zeros(3, 4), Tensor2D::zeros(3, 3)), 0.4).unwrap();
        assert!(s.iter().all(|x| x.value == 0.0));
    }

    #[test]
    fn weighted_sum_of_norms() {
        let r_x = Tensor2D::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let s = score_nodes(&recon(r_x, Tensor2D::zeros(2, 2)), 0.4).unwrap();
        assert!((s[0].value - 0.8).abs() < 1e-15);
        assert_eq!(s[0].round, 2);
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        assert!(score_nodes(&recon(Tensor2D::zeros(3, 4), Tensor2D::zeros(2, 2)), 0.4).is_err());
    }

    #[test]
    fn selection_modes() {
        let s = scores(&[0.1, 0.9, 0.3, 0.2]);
        assert_eq!(select_anomalies(&s, &DetectionPolicy::default(), true), None);
        assert_eq!(select_anomalies(&s, &DetectionPolicy::default(), false).unwrap().agent, AgentId(1));
        let always = DetectionPolicy {
            mode: PolicyMode::Top1Always,
            tau: 0.0,
        };
        assert_eq!(select_anomalies(&s, &always, true).unwrap().agent, AgentId(1));
        assert_eq!(select_anomalies(&s, &DetectionPolicy::threshold(1.0).unwrap(), false), None);
        assert_eq!(
            select_anomalies(&s, &DetectionPolicy::threshold(0.25).unwrap(), false).unwrap().agent,
            AgentId(1)
        );
        assert!(DetectionPolicy::threshold(-1.0).is_err());
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let mut s = scores(&[0.5, 0.7, 0.7, 0.1]);
        s.reverse();
        let always = DetectionPolicy {
            mode: PolicyMode::Top1Always,
            tau: 0.0,
        };
        assert_eq!(select_anomalies(&s, &always, false).unwrap().agent, AgentId(1));
    }

    #[test]
    fn prune_logs_score_and_shrinks_later_rounds() {
        let emb = HashingEmbedder::new(EmbeddingConfig::default()).unwrap();
        let agents: Vec<AgentId> = (0..4).map(AgentId).collect();
        let responses: Vec<(AgentId, String)> = agents.iter().map(|a| (*a, format!("a{a}"))).collect();
        let mut g = TemporalGraph::new();
        g.push_snapshot(build_snapshot(1, &responses, &RoundTopology::full(&agents), &emb).unwrap())
            .unwrap();

        assert!(!prune(&mut g, None, 1).unwrap());
        assert!(g.removal_log().is_empty());

        let pick = AnomalyScore {
            agent: AgentId(2),
            round: 1,
            value: 1.25,
        };
        assert!(prune(&mut g, Some(&pick), 1).unwrap());
        let rec = &g.removal_log()[0];
        assert_eq!((rec.agent, rec.round, rec.score), (AgentId(2), 1, Some(1.25)));

        let rest: Vec<(AgentId, String)> = responses.into_iter().filter(|(a, _)| a.0 != 2).collect();
        let rest_ids: Vec<AgentId> = rest.iter().map(|r| r.0).collect();
        g.push_snapshot(build_snapshot(2, &rest, &RoundTopology::full(&rest_ids), &emb).unwrap())
            .unwrap();
        assert_eq!(g.snapshot(2).unwrap().len(), 3);
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_common_scaling(vals in prop::collection::vec(0.0f64..3.0, 9..=9), c in 0.01f64..100.0, alpha in 0.0f64..=1.0) {
            let r_x = Tensor2D::new(3, 2, vals[..6].to_vec()).unwrap();
            let r_e = Tensor2D::new(3, 3, vals[..9].to_vec()).unwrap();
            let always = DetectionPolicy { mode: PolicyMode::Top1Always, tau: 0.0 };
            let a = select_anomalies(&score_nodes(&recon(r_x.clone(), r_e.clone()), alpha).unwrap(), &always, false).unwrap();
            let b = select_anomalies(&score_nodes(&recon(r_x.scale(c), r_e.scale(c)), alpha).unwrap(), &always, false).unwrap();
            let base = score_nodes(&recon(r_x, r_e), alpha).unwrap();
            // Either the same agent wins or the two were tied up to rounding.
            prop_assert!(a.agent == b.agent || (base[a.agent.0].value - base[b.agent.0].value).abs() < 1e-12);
        }

        #[test]
        fn at_most_one_selection(vals in prop::collection::vec(0.0f64..2.0, 1..8), tau in 0.0f64..2.0, consensus: bool) {
            let s = scores(&vals);
            for mode in [PolicyMode::Top1OnNoConsensus, PolicyMode::Top1Always, PolicyMode::Threshold] {
                let pick = select_anomalies(&s, &DetectionPolicy { mode, tau }, consensus);
                if let Some(p) = pick {
                    prop_assert!(s.iter().all(|x| x.value <= p.value));
                }
            }
        }

        #[test]
        fn attribute_term_scales_linearly(vals in prop::collection::vec(-2.0f64..2.0, 6..=6), c in 0.0f64..10.0) {
            let r_x = Tensor2D::new(3, 2, vals).unwrap();
            let a = score_nodes(&recon(r_x.clone(), Tensor2D::zeros(3, 3)), 1.0).unwrap();
            let b = score_nodes(&recon(r_x.scale(c), Tensor2D::zeros(3, 3)), 1.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((y.value - c * x.value).abs() < 1e-9 * (1.0 + c * x.value));
            }
        }
    }
}
