use serde::{Deserialize, Serialize};

use crate::error::{GuardianError, Result};
use crate::numerics::Tensor2D;

/// Weight of the compression term once the relevance term is folded into the
/// reconstruction loss: `lambda / (1 + lambda * beta)`.
pub fn gib_gamma(lambda: f64, beta: f64) -> f64 {
    lambda / (1.0 + lambda * beta)
}

/// Per-step loss terms. `l_rec` and `l_total` are always derived from the
/// other three so the composition identities hold exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_att: f64,
    pub l_stru: f64,
    pub l_rec: f64,
    pub kl: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn compose(l_att: f64, l_stru: f64, kl: f64, alpha: f64, gamma: f64) -> Self {
        let l_rec = alpha * l_att + (1.0 - alpha) * l_stru;
        Self {
            l_att,
            l_stru,
            l_rec,
            kl,
            l_total: l_rec + gamma * kl,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_att, self.l_stru, self.l_rec, self.kl, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "l_att={} l_stru={} l_rec={} kl={} l_total={}",
            self.l_att, self.l_stru, self.l_rec, self.kl, self.l_total
        )
    }
}

/// `1/2 * sum(exp(lv) + mu^2 - 1 - lv) / rows` for a diagonal Gaussian
/// against the standard normal prior.
pub fn kl_term(mean: &Tensor2D, log_variance: &Tensor2D) -> Result<f64> {
    if mean.shape() != log_variance.shape() {
        return Err(GuardianError::Shape {
            op: "kl_term",
            left: mean.shape(),
            right: log_variance.shape(),
        });
    }
    let total: f64 = mean
        .values()
        .iter()
        .zip(log_variance.values())
        .map(|(&m, &lv)| lv.exp() + m * m - 1.0 - lv)
        .sum();
    Ok(0.5 * total / mean.rows().max(1) as f64)
}

/// Mean squared row error of the attributes.
pub fn attribute_loss(features: &Tensor2D, x_hat: &Tensor2D) -> Result<f64> {
    let diff = features.sub(x_hat)?;
    Ok(diff.values().iter().map(|v| v * v).sum::<f64>() / features.rows().max(1) as f64)
}

/// Binary cross-entropy over every ordered pair, diagonal included.
pub fn structure_loss(observed: &Tensor2D, edge_probs: &Tensor2D) -> Result<f64> {
    if observed.shape() != edge_probs.shape() {
        return Err(GuardianError::Shape {
            op: "structure_loss",
            left: observed.shape(),
            right: edge_probs.shape(),
        });
    }
    let total: f64 = observed
        .values()
        .iter()
        .zip(edge_probs.values())
        .map(|(&a, &p)| -(a * p.ln() + (1.0 - a) * (1.0 - p).ln()))
        .sum();
    Ok(total / observed.len().max(1) as f64)
}

/// Loss terms from already-computed reconstructions.
pub fn compute_losses(
    features: &Tensor2D,
    observed_adj: &Tensor2D,
    x_hat: &Tensor2D,
    edge_probs: &Tensor2D,
    kl: f64,
    alpha: f64,
    gamma: f64,
) -> Result<LossBreakdown> {
    let l_att = attribute_loss(features, x_hat)?;
    let l_stru = structure_loss(observed_adj, edge_probs)?;
    Ok(LossBreakdown::compose(l_att, l_stru, kl, alpha, gamma))
}
