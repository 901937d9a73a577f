//! Sequential recommendation with latent multi-step reasoning.
//!
//! A transformer encoder reads a user's recent items, then feeds its own
//! final hidden state back as extra input positions for a few reasoning
//! steps. Two training objectives shape those steps: an ensemble objective
//! that pools all steps while keeping their predictions diverse, and a
//! progressive objective that sharpens predictions step by step and adds a
//! noisy contrastive view of each step.

pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod numeric;
pub mod objectives;
pub mod reasoning;
pub mod training;

pub use encoder::{EncoderConfig, MaskMode, ModelParams};
pub use data::{SequenceDataset, Split};
pub use error::{Error, Result};
pub use evaluation::MetricsReport;
pub use objectives::{Objective, ObjectiveConfig};
pub use reasoning::{reason, user_representation, ReasoningStates, Strategy};
pub use training::{fit, TrainConfig};
