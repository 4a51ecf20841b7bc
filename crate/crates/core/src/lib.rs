// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dual-level attention intervention for small decoder-only models.
//!
//! A CPU reference decoder exposes a hook between the attention softmax and
//! the value product. Token-level intervention (TAI) reweights text queries
//! toward salient visual tokens and away from visual sinks; head-level
//! intervention (HAI) damps heads that over-attend to text or system
//! tokens. Saliency and information-flow analysis, fixtures, evaluation
//! metrics and a command-line harness sit on top.

pub mod attention;
pub mod config;
pub mod dump;
pub mod error;
pub mod fixtures;
pub mod format;
pub mod hai;
pub mod harness;
pub mod intervention;
pub mod metrics;
pub mod model;
pub mod rope;
pub mod saliency;
pub mod segmentation;
pub mod tai;
pub mod weights;

pub use attention::{AttentionHook, AttentionRecord, AttentionRows, HookChain, HookContext, IdentityHook, Phase};
pub use config::ModelConfig;
pub use intervention::{InterventionConfig, InterventionPlan};
pub use error::{Error, FieldError, Result};
pub use model::{decode_step, forward, generate, prefill, Capture, DecodeState, ForwardOutput, StepOutput};
pub use segmentation::{Span, TokenGroup, TokenRole, TokenSegmentation};
pub use weights::ModelWeights;
