//! Two-stage few-shot named-entity recognition over a miniature trainable
//! autoregressive transformer.
//!
//! Stage one detects entity spans with a generation objective regularized by
//! a boundary-aware contrastive loss; stage two assigns types by cosine
//! similarity to prototype vectors built from support examples. Both stages
//! train low-rank adapters on a frozen backbone, and per-domain type adapters
//! compose by weighted parameter merging before inference.

pub mod backbone;
pub mod corpus;
pub mod error;
pub mod lora;
pub mod matrix;
pub mod optim;
pub mod prompting;
pub mod inference_eval;
pub mod span_detector;
pub mod tape;
pub mod type_classifier;

pub use error::{Error, Result};
