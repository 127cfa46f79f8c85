//! Domain-invariant context optimization (DiCoOp) at desk scale.
//!
//! Learnable context vectors are tuned against a frozen toy text encoder and
//! precomputed image features. A class pass minimizes classification loss while
//! a domain pass, routed through gradient reversal, maximizes domain loss. The
//! context can be shared (SCP) or split into domain and class halves (DFP, CFP)
//! with complementary freezing.

// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod objective;
pub mod prompt;
pub mod rng;
pub mod trainer;

pub use data::{FeatureRecord, FeatureStore, SynthConfig};
pub use encoder::FrozenTextEncoder;
pub use error::{Error, Result};
pub use objective::{ObjectiveConfig, PassResult};
pub use prompt::{Layout, PassKind, PromptContext, TokenTable};
pub use trainer::{Schedule, TrainConfig, TrainedRun};
