use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::losses::{gib_gamma, LossBreakdown};
use crate::error::{GuardianError, Result};
use crate::graph_model::{normalized_adjacency, self_looped_adjacency, AgentId, MergedHistory};
use crate::numerics::{Activation, AdamConfig, ParamStore, Tape, Tensor2D, Var};

pub const LOG_VARIANCE_CLAMP: f64 = 10.0;

pub const W_GCN0: &str = "gcn.w0";
pub const W_GCN1: &str = "gcn.w1";
pub const W_QUERY: &str = "attn.wq";
pub const W_KEY: &str = "attn.wk";
pub const W_VALUE: &str = "attn.wv";
pub const W_DEC1: &str = "dec.w1";
pub const B_DEC1: &str = "dec.b1";
pub const W_DEC2: &str = "dec.w2";
pub const B_DEC2: &str = "dec.b2";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Fuses the merged history through temporal attention.
    Temporal,
    /// Uses only the current snapshot.
    Static,
}

impl std::str::FromStr for Variant {
    type Err = GuardianError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(Self::Temporal),
            "static" => Ok(Self::Static),
            other => Err(GuardianError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Temporal => "temporal",
            Self::Static => "static",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub k: usize,
    pub d: usize,
    pub heads: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs_initial: usize,
    pub epochs_incremental: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Adds sinusoidal encodings of the round index before attention.
    pub positional_encoding: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            k: crate::embedder::DEFAULT_DIM,
            d: 32,
            heads: 1,
            alpha: 0.4,
            beta: 1.0,
            lambda: 0.01,
            lr: 5e-3,
            epochs_initial: 50,
            epochs_incremental: 10,
            seed: 0,
            variant: Variant::Temporal,
            positional_encoding: true,
        }
    }
}

impl DetectorConfig {
    pub fn gamma(&self) -> f64 {
        gib_gamma(self.lambda, self.beta)
    }

    /// Chooses `lambda` so that `gamma()` equals `gamma` at the current beta.
    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        let denom = 1.0 - gamma * self.beta;
        if !(gamma >= 0.0) || denom <= 0.0 {
            return Err(GuardianError::Config(format!(
                "gamma {gamma} unreachable with beta {}",
                self.beta
            )));
        }
        self.lambda = gamma / denom;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GuardianError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(self.beta >= 0.0) || !(self.lambda >= 0.0) {
            return fail(format!("beta and lambda must be non-negative, got {} and {}", self.beta, self.lambda));
        }
        if self.k == 0 || self.d == 0 {
            return fail("k and d must be positive".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Fresh parameters with Glorot weights and zero biases.
pub fn init_params(cfg: &DetectorConfig, rng: &mut impl Rng) -> ParamStore {
    let (k, d) = (cfg.k, cfg.d);
    let mut p = ParamStore::new();
    p.insert_glorot(W_GCN0, k, d, rng);
    p.insert_glorot(W_GCN1, d, 2 * d, rng);
    p.insert_glorot(W_QUERY, d, d, rng);
    p.insert_glorot(W_KEY, d, d, rng);
    p.insert_glorot(W_VALUE, d, d, rng);
    p.insert_glorot(W_DEC1, d, d, rng);
    p.insert(B_DEC1, Tensor2D::zeros(1, d));
    p.insert_glorot(W_DEC2, d, k, rng);
    p.insert(B_DEC2, Tensor2D::zeros(1, k));
    p
}

/// Sinusoidal encoding of `position` over `dim` columns.
pub fn positional_encoding(position: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|c| {
            let pair = (c / 2) as f64;
            let angle = position as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

// ---- tape building blocks --------------------------------------------------

/// Two GCN layers: `ReLU(Â X W0)` then linear `Â H W1`.
pub(crate) fn gcn_tape(tape: &mut Tape, x: Var, adj: Var, params: &ParamStore) -> Result<Var> {
    let w0 = tape.param(params, W_GCN0)?;
    let w1 = tape.param(params, W_GCN1)?;
    let ax = tape.matmul(adj, x)?;
    let h1 = tape.matmul(ax, w0)?;
    let h1 = tape.relu(h1);
    let ah = tape.matmul(adj, h1)?;
    tape.matmul(ah, w1)
}

pub(crate) struct LatentVars {
    pub mean: Var,
    pub log_variance: Var,
    pub sample: Var,
}

/// Splits encoder output into mean and clamped log-variance and draws the
/// sample (`mean` itself when `noise` is `None`).
pub(crate) fn latent_tape(tape: &mut Tape, encoded: Var, d: usize, noise: Option<&Tensor2D>) -> Result<LatentVars> {
    let mean = tape.slice_cols(encoded, 0, d)?;
    let raw = tape.slice_cols(encoded, d, d)?;
    let log_variance = tape.clamp(raw, -LOG_VARIANCE_CLAMP, LOG_VARIANCE_CLAMP);
    let sample = match noise {
        None => mean,
        Some(eps) => {
            let half = tape.scale(log_variance, 0.5);
            let std = tape.exp(half);
            let eps = tape.constant(eps.clone());
            let jitter = tape.mul(std, eps)?;
            tape.add(mean, jitter)?
        }
    };
    Ok(LatentVars {
        mean,
        log_variance,
        sample,
    })
}

/// Unnormalized `1/2 * sum(exp(lv) + mu^2 - 1 - lv)`.
pub(crate) fn kl_sum_tape(tape: &mut Tape, mean: Var, log_variance: Var) -> Result<Var> {
    let var = tape.exp(log_variance);
    let sq = tape.mul(mean, mean)?;
    let a = tape.add(var, sq)?;
    let b = tape.sub(a, log_variance)?;
    let c = tape.offset(b, -1.0);
    let s = tape.sum(c);
    Ok(tape.scale(s, 0.5))
}

pub(crate) struct FusedVars {
    pub fused: Var,
    /// Per output row, attention weights over sequence positions averaged
    /// across heads.
    pub weights: Vec<Vec<f64>>,
}

/// Cross-time self-attention per agent.
///
/// `rows[a][t]` is agent `a`'s row in `latents[t]` (or `None` when absent).
/// Each agent's sequence is masked to the rounds it is present in and the
/// output at the final position becomes its fused embedding.
pub(crate) fn temporal_tape(
    tape: &mut Tape,
    latents: &[Var],
    rounds: &[usize],
    rows: &[Vec<Option<usize>>],
    params: &ParamStore,
    cfg: &DetectorConfig,
) -> Result<FusedVars> {
    let (d, heads) = (cfg.d, cfg.heads);
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let wq = tape.param(params, W_QUERY)?;
    let wk = tape.param(params, W_KEY)?;
    let wv = tape.param(params, W_VALUE)?;
    let steps = latents.len();
    let pe = if cfg.positional_encoding {
        let values = rounds.iter().flat_map(|&r| positional_encoding(r, d)).collect();
        Some(tape.constant(Tensor2D::new(steps, d, values)?))
    } else {
        None
    };

    let mut outputs = Vec::with_capacity(rows.len());
    let mut weights = Vec::with_capacity(rows.len());
    for agent_rows in rows {
        let mask: Vec<bool> = agent_rows.iter().map(Option::is_some).collect();
        let mut parts = Vec::with_capacity(steps);
        for (t, idx) in agent_rows.iter().enumerate() {
            parts.push(tape.gather_rows(latents[t], vec![*idx])?);
        }
        let mut seq = tape.concat_rows(&parts)?;
        if let Some(pe) = pe {
            seq = tape.add(seq, pe)?;
        }
        let q = tape.matmul(seq, wq)?;
        let k = tape.matmul(seq, wk)?;
        let v = tape.matmul(seq, wv)?;
        let mut head_out = Vec::with_capacity(heads);
        let mut avg = vec![0.0; steps];
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * head_dim, head_dim)?,
                    tape.slice_cols(k, h * head_dim, head_dim)?,
                    tape.slice_cols(v, h * head_dim, head_dim)?,
                )
            };
            let q_last = tape.gather_rows(qh, vec![Some(steps - 1)])?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(q_last, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows_masked(scores, mask.clone())?;
            for (a, w) in avg.iter_mut().zip(tape.value(attn).row(0)) {
                *a += w / heads as f64;
            }
            head_out.push(tape.matmul(attn, vh)?);
        }
        weights.push(avg);
        outputs.push(if heads == 1 {
            head_out[0]
        } else {
            tape.concat_cols(&head_out)?
        });
    }
    Ok(FusedVars {
        fused: tape.concat_rows(&outputs)?,
        weights,
    })
}

/// Two-layer perceptron `d -> d -> k` with ReLU in between.
pub(crate) fn decode_attributes_tape(tape: &mut Tape, z: Var, params: &ParamStore) -> Result<Var> {
    let w1 = tape.param(params, W_DEC1)?;
    let b1 = tape.param(params, B_DEC1)?;
    let w2 = tape.param(params, W_DEC2)?;
    let b2 = tape.param(params, B_DEC2)?;
    let h = tape.matmul(z, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, w2)?;
    tape.add_row(out, b2)
}

/// Inner-product edge logits `z zᵀ`.
pub(crate) fn structure_logits_tape(tape: &mut Tape, z: Var) -> Result<Var> {
    let zt = tape.transpose(z);
    tape.matmul(z, zt)
}

// ---- batches ----------------------------------------------------------------

/// Dense inputs for one forward pass, derived from a merged history.
#[derive(Debug, Clone)]
pub struct DetectorBatch {
    pub rounds: Vec<usize>,
    pub features: Vec<Tensor2D>,
    pub norm_adj: Vec<Tensor2D>,
    pub agents: Vec<Vec<AgentId>>,
    /// Self-looped symmetrized adjacency of the final round.
    pub observed: Tensor2D,
    /// `rows[a][t]`: row of final-round agent `a` in snapshot `t`.
    pub rows: Vec<Vec<Option<usize>>>,
}

impl DetectorBatch {
    pub fn from_history(history: &MergedHistory) -> Result<Self> {
        let last = history
            .last()
            .ok_or_else(|| GuardianError::InvalidArgument("empty history".into()))?;
        if last.is_empty() {
            return Err(GuardianError::EpisodeExhausted);
        }
        let rows = last
            .agents
            .iter()
            .map(|&a| history.snapshots.iter().map(|s| s.index_of(a)).collect())
            .collect();
        Ok(Self {
            rounds: history.snapshots.iter().map(|s| s.round).collect(),
            features: history.snapshots.iter().map(|s| s.features.clone()).collect(),
            norm_adj: history.snapshots.iter().map(normalized_adjacency).collect(),
            agents: history.snapshots.iter().map(|s| s.agents.clone()).collect(),
            observed: self_looped_adjacency(last),
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn final_agents(&self) -> &[AgentId] {
        self.agents.last().map_or(&[], Vec::as_slice)
    }

    pub fn final_round(&self) -> usize {
        *self.rounds.last().unwrap_or(&0)
    }

    pub fn final_features(&self) -> &Tensor2D {
        self.features.last().expect("non-empty batch")
    }

    /// Standard-normal noise with one `n_t x d` block per snapshot.
    pub fn draw_noise(&self, d: usize, rng: &mut impl Rng) -> Vec<Tensor2D> {
        self.features
            .iter()
            .map(|f| {
                let values = (0..f.rows() * d).map(|_| rng.sample(StandardNormal)).collect();
                Tensor2D::new(f.rows(), d, values).expect("finite noise")
            })
            .collect()
    }
}

/// Scalar loss selected for backpropagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Attribute,
    Structure,
    Kl,
    Total,
}

pub(crate) struct ForwardVars {
    pub tape: Tape,
    pub l_att: Var,
    pub l_stru: Var,
    pub kl: Var,
    pub l_total: Var,
    pub x_hat: Var,
    pub logits: Var,
    pub fused: FusedVars,
}

impl ForwardVars {
    pub fn breakdown(&self, cfg: &DetectorConfig) -> LossBreakdown {
        let v = |x: Var| self.tape.value(x).item();
        LossBreakdown::compose(v(self.l_att), v(self.l_stru), v(self.kl), cfg.alpha, cfg.gamma())
    }

    pub fn term(&self, term: LossTerm) -> Var {
        match term {
            LossTerm::Attribute => self.l_att,
            LossTerm::Structure => self.l_stru,
            LossTerm::Kl => self.kl,
            LossTerm::Total => self.l_total,
        }
    }
}

/// Full forward pass: GCN per snapshot, sampling, temporal fusion, both
/// decoders and all loss terms.
pub(crate) fn forward(
    params: &ParamStore,
    cfg: &DetectorConfig,
    batch: &DetectorBatch,
    noise: Option<&[Tensor2D]>,
) -> Result<ForwardVars> {
    let mut tape = Tape::new();
    let mut samples = Vec::with_capacity(batch.len());
    let mut kl_parts = Vec::with_capacity(batch.len());
    let mut node_count = 0usize;
    for t in 0..batch.len() {
        let x = tape.constant(batch.features[t].clone());
        let adj = tape.constant(batch.norm_adj[t].clone());
        let encoded = gcn_tape(&mut tape, x, adj, params)?;
        let latent = latent_tape(&mut tape, encoded, cfg.d, noise.map(|n| &n[t]))?;
        kl_parts.push(kl_sum_tape(&mut tape, latent.mean, latent.log_variance)?);
        samples.push(latent.sample);
        node_count += batch.features[t].rows();
    }
    let mut kl = kl_parts[0];
    for &part in &kl_parts[1..] {
        kl = tape.add(kl, part)?;
    }
    let kl = tape.scale(kl, 1.0 / node_count.max(1) as f64);

    let fused = temporal_tape(&mut tape, &samples, &batch.rounds, &batch.rows, params, cfg)?;
    let x_hat = decode_attributes_tape(&mut tape, fused.fused, params)?;
    let logits = structure_logits_tape(&mut tape, fused.fused)?;

    let n = batch.final_agents().len() as f64;
    let target = tape.constant(batch.final_features().clone());
    let diff = tape.sub(target, x_hat)?;
    let sq = tape.mul(diff, diff)?;
    let sse = tape.sum(sq);
    let l_att = tape.scale(sse, 1.0 / n);
    let l_stru = tape.bce_logits(logits, batch.observed.clone())?;

    let a = tape.scale(l_att, cfg.alpha);
    let b = tape.scale(l_stru, 1.0 - cfg.alpha);
    let c = tape.scale(kl, cfg.gamma());
    let rec = tape.add(a, b)?;
    let l_total = tape.add(rec, c)?;

    Ok(ForwardVars {
        tape,
        l_att,
        l_stru,
        kl,
        l_total,
        x_hat,
        logits,
        fused,
    })
}

/// Evaluates `term` at the store's values with fixed noise and adds its
/// gradient into the store. Returns the loss value.
pub fn loss_with_gradient(
    params: &mut ParamStore,
    cfg: &DetectorConfig,
    batch: &DetectorBatch,
    noise: Option<&[Tensor2D]>,
    term: LossTerm,
) -> Result<f64> {
    let fwd = forward(params, cfg, batch, noise)?;
    let out = fwd.term(term);
    fwd.tape.backward(out)?.accumulate_into(params)?;
    Ok(fwd.tape.value(out).item())
}

/// Decoder outputs and residuals for the final round of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub round: usize,
    pub agents: Vec<AgentId>,
    pub x_hat: Tensor2D,
    pub edge_probs: Tensor2D,
    /// `features - x_hat`.
    pub r_x: Tensor2D,
    /// Observed self-looped adjacency minus `edge_probs`.
    pub r_e: Tensor2D,
    pub losses: LossBreakdown,
    /// Per agent, temporal attention over the batch's rounds.
    pub attention: Vec<Vec<f64>>,
}

/// GCN encoder, variational bottleneck, temporal attention and dual decoders
/// together with their trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    cfg: DetectorConfig,
    params: ParamStore,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = init_params(&cfg, &mut rng);
        Ok(Self { cfg, params })
    }

    pub fn from_parts(cfg: DetectorConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let reference = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        for (name, p) in reference.iter() {
            let have = params
                .value(name)
                .ok_or_else(|| GuardianError::Checkpoint(format!("missing parameter {name}")))?;
            if have.shape() != p.value.shape() {
                return Err(GuardianError::Checkpoint(format!(
                    "{name}: expected {:?}, found {:?}",
                    p.value.shape(),
                    have.shape()
                )));
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Applies the variant's history contract: the static variant only ever
    /// sees the latest snapshot.
    pub fn prepare(&self, history: &MergedHistory) -> Result<DetectorBatch> {
        match self.cfg.variant {
            Variant::Temporal => DetectorBatch::from_history(history),
            Variant::Static => DetectorBatch::from_history(&history.truncated(1)),
        }
    }

    /// Full-batch training on `l_total` for `epochs` Adam steps. Returns the
    /// loss of every epoch, measured before that epoch's update.
    pub fn fit(&mut self, batch: &DetectorBatch, epochs: usize, rng: &mut impl Rng) -> Result<Vec<LossBreakdown>> {
        if batch.is_empty() {
            return Err(GuardianError::InvalidArgument("fit needs a non-empty batch".into()));
        }
        let adam = self.cfg.adam();
        let mut trace = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let noise = batch.draw_noise(self.cfg.d, rng);
            let fwd = forward(&self.params, &self.cfg, batch, Some(&noise))?;
            let losses = fwd.breakdown(&self.cfg);
            if !losses.is_finite() {
                return Err(GuardianError::Training {
                    epoch,
                    terms: losses.to_string(),
                });
            }
            self.params.zero_grads();
            fwd.tape.backward(fwd.l_total)?.accumulate_into(&mut self.params)?;
            self.params.adam_step(&adam);
            self.params.zero_grads();
            trace.push(losses);
        }
        Ok(trace)
    }

    /// Deterministic reconstruction (latent means, no sampling).
    pub fn reconstruct(&self, batch: &DetectorBatch) -> Result<Reconstruction> {
        let fwd = forward(&self.params, &self.cfg, batch, None)?;
        let x_hat = fwd.tape.value(fwd.x_hat).clone();
        let edge_probs = crate::numerics::activation(Activation::Sigmoid, fwd.tape.value(fwd.logits));
        let r_x = batch.final_features().sub(&x_hat)?;
        let r_e = batch.observed.sub(&edge_probs)?;
        Ok(Reconstruction {
            round: batch.final_round(),
            agents: batch.final_agents().to_vec(),
            x_hat,
            edge_probs,
            r_x,
            r_e,
            losses: fwd.breakdown(&self.cfg),
            attention: fwd.fused.weights,
        })
    }
}

// ---- value-level entry points ---------------------------------------------

/// `Â · ReLU(Â · X · W0) · W1` with the given parameters.
pub fn gcn_forward(features: &Tensor2D, norm_adj: &Tensor2D, params: &ParamStore) -> Result<Tensor2D> {
    if norm_adj.rows() != norm_adj.cols() || norm_adj.rows() != features.rows() {
        return Err(GuardianError::Shape {
            op: "gcn_forward",
            left: features.shape(),
            right: norm_adj.shape(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let a = tape.constant(norm_adj.clone());
    let out = gcn_tape(&mut tape, x, a, params)?;
    Ok(tape.value(out).clone())
}

/// `mean + exp(lv / 2) * eps` with `eps ~ N(0, I)` when `rng` is given,
/// otherwise `mean`.
pub fn reparameterize(mean: &Tensor2D, log_variance: &Tensor2D, rng: Option<&mut dyn rand::RngCore>) -> Result<Tensor2D> {
    if mean.shape() != log_variance.shape() {
        return Err(GuardianError::Shape {
            op: "reparameterize",
            left: mean.shape(),
            right: log_variance.shape(),
        });
    }
    let Some(rng) = rng else { return Ok(mean.clone()) };
    let lv = log_variance.map(|v| v.clamp(-LOG_VARIANCE_CLAMP, LOG_VARIANCE_CLAMP));
    let values = mean
        .values()
        .iter()
        .zip(lv.values())
        .map(|(&m, &l)| m + (0.5 * l).exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor2D::new(mean.rows(), mean.cols(), values)
}

/// Output of [`temporal_fuse`].
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalFusion {
    pub agents: Vec<AgentId>,
    pub fused: Tensor2D,
    pub weights: Vec<Vec<f64>>,
}

/// Fuses per-round latent matrices into one row per agent of the last round.
/// `latents[t]` lists the agents of round `rounds[t]` and their latent rows.
pub fn temporal_fuse(
    latents: &[(Vec<AgentId>, Tensor2D)],
    rounds: &[usize],
    params: &ParamStore,
    cfg: &DetectorConfig,
) -> Result<TemporalFusion> {
    let (last_agents, _) = latents
        .last()
        .ok_or_else(|| GuardianError::InvalidArgument("temporal_fuse needs at least one round".into()))?;
    if rounds.len() != latents.len() {
        return Err(GuardianError::InvalidArgument("one round index per latent matrix".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = latents.iter().map(|(_, z)| tape.constant(z.clone())).collect();
    let rows: Vec<Vec<Option<usize>>> = last_agents
        .iter()
        .map(|a| latents.iter().map(|(ids, _)| ids.iter().position(|x| x == a)).collect())
        .collect();
    let out = temporal_tape(&mut tape, &vars, rounds, &rows, params, cfg)?;
    Ok(TemporalFusion {
        agents: last_agents.clone(),
        fused: tape.value(out.fused).clone(),
        weights: out.weights,
    })
}

pub fn decode_attributes(z: &Tensor2D, params: &ParamStore) -> Result<Tensor2D> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let out = decode_attributes_tape(&mut tape, zv, params)?;
    Ok(tape.value(out).clone())
}

/// `sigmoid(z_i · z_j)` for every ordered pair.
pub fn decode_structure(z: &Tensor2D) -> Tensor2D {
    let logits = z.matmul(&z.transpose()).expect("z zᵀ is always conformable");
    crate::numerics::activation(Activation::Sigmoid, &logits)
}

/// Named-parameter view used by checkpoints.
pub fn param_shapes(cfg: &DetectorConfig) -> BTreeMap<String, (usize, usize)> {
    init_params(cfg, &mut ChaCha8Rng::seed_from_u64(0))
        .iter()
        .map(|(n, p)| (n.to_string(), p.value.shape()))
        .collect()
}
