//! The anomaly detection model: a two-layer GCN encoder with a diagonal
//! Gaussian bottleneck, per-agent temporal self-attention, an attribute
//! decoder and an inner-product structure decoder.
//!
//! Training minimizes `l_rec + gamma * kl` where
//! `l_rec = alpha * l_att + (1 - alpha) * l_stru` and `gamma` is derived
//! from `lambda` and `beta` (see [`gib_gamma`]).

pub mod checkpoint;
mod losses;
mod model;


pub use losses::{attribute_loss, compute_losses, gib_gamma, kl_term, structure_loss, LossBreakdown};
pub use model::{
    decode_attributes, decode_structure, gcn_forward, init_params, loss_with_gradient, param_shapes,
    positional_encoding, reparameterize, temporal_fuse, Detector, DetectorBatch, DetectorConfig, LossTerm,
    Reconstruction, TemporalFusion, Variant, B_DEC1, B_DEC2, LOG_VARIANCE_CLAMP, W_DEC1, W_DEC2, W_GCN0,
    W_GCN1, W_KEY, W_QUERY, W_VALUE,
};
