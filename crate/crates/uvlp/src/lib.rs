//! Desk-scale unified vision-language transformer.
//!
//! One transformer trunk consumes an interleaved sequence of image-region
//! embeddings and caption tokens. Two masked-LM objectives — bidirectional
//! and seq2seq — share every parameter and differ only in the self-attention
//! mask, so the same trunk serves both understanding (VQA) and generation
//! (captioning) after fine-tuning.
//!
//! Layout convention used throughout: activations are dense row-major `f64`
//! matrices with feature rows and sequence-position columns, so a hidden
//! state is `d x U` and attention scores are `U x U` (query rows, key
//! columns).

pub mod cli;
pub mod embed;
pub mod experiments;
pub mod infer;
pub mod data;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod train;
mod rngx;
pub mod tensor;
