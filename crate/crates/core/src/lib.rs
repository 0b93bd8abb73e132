//! Self-evolving flow classifier core.
//!
//! The pipeline turns packet captures into direction-signed packet-length
//! sequences ([`flow`]), classifies them with a small trainable recurrent
//! model ([`model`]), harvests high-confidence predictions as pseudo-labeled
//! "silver samples" ([`silver`]), watches per-class confidence decay through
//! a windowed multi-threshold accumulator ([`drift`]), and extends classifier
//! lifetime by repeatedly fully fine-tuning on the harvested pools
//! ([`evolution`]). [`sim`] generates labeled synthetic flows with
//! controllable per-class, per-stage drift so the whole lifecycle is testable
//! at desk scale.

pub mod drift;
pub mod evolution;
pub mod flow;
pub mod model;
pub mod silver;
pub mod sim;
pub mod util;

pub use drift::{DriftLevel, DriftScoreboard, DriftVerdict, JudgmentConfig, ThresholdLadder};
pub use evolution::{EvolutionMode, StageConfig, StageItem, StageReport};
pub use flow::{FeatureVector, FlowKey, FlowRecord, Transport};
pub use model::{ConfidenceVector, Hyperparams, Metrics, ModelCheckpoint};
pub use silver::{LaidaConfig, SilverPool, SilverSample};
pub use sim::SimConfig;
