//! Language-model interface consumed by both pipeline stages: tokenization,
//! teacher-forced forward passes exposing every hidden layer, beam-search
//! generation with sequence log-probabilities, and a miniature trainable
//! autoregressive transformer as the reference implementation.

pub mod checkpoint;
pub mod generate;
pub mod model;
pub mod pretrain;
pub mod tokenizer;

pub use checkpoint::{load_backbone, read_container, save_backbone, write_container};
pub use model::{
    gather_indices, select_layer, AdapterDelta, Backbone, BackboneConfig, DeltaBinding,
    ModelParams, Proj, SeqHidden, TapedForward,
};
pub use generate::{Decoder, Generated, GenerationParams};
pub use pretrain::{pretrain, PretrainConfig, PretrainRecord};
pub use tokenizer::Tokenizer;
