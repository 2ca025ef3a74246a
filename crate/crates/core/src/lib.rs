//! Quantitative introspection measurement for language models.
//!
//! The crate trains contrastive concept probes on per-layer hidden states,
//! steers activations along probe directions, turns first-token digit logits
//! into continuous self-reports, and quantifies how tightly those reports
//! track the probe-defined internal state across multi-turn conversations.
//!
//! Numeric kernels (probe training and scoring, steering, digit-logit
//! aggregation, rank and isotonic statistics, entropy) are generic over
//! [`Scalar`], implemented for `f32` and `f64`. The measurement pipeline,
//! mixed models and bootstrap inference run in `f64`; the aliases at the
//! crate root name the `f64` instantiations used throughout.

pub mod error;
pub mod pipeline;
pub mod probes;
pub mod scalar;
pub mod selfreport;
pub mod stats;
pub mod steering;
pub mod tensorio;
pub mod toybackend;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Hidden states of one forward pass in working precision.
pub type ActivationTensor = tensorio::ActivationTensor<f64>;
/// Single-precision activations, the on-disk dump precision.
pub type ActivationTensorF32 = tensorio::ActivationTensor<f32>;
/// Per-layer unit directions of a trained, layer-selected concept probe.
pub type ConceptVectorSet = probes::ConceptVectorSet<f64>;
/// Per-layer contrastive directions before layer selection.
pub type TrainedDirections = probes::TrainedDirections<f64>;
/// Aggregated scores of the ten digit tokens.
pub type DigitLogits = selfreport::DigitLogits<f64>;
/// Greedy, sampled and expected-value ratings derived from digit logits.
pub type SelfReport = selfreport::SelfReport<f64>;
/// Additive per-layer steering intervention.
pub type SteeringPlan = steering::SteeringPlan<f64>;

pub use tensorio::{Conversation, Observation, TokenRole};
