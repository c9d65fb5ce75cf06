//! Joint medical named entity recognition (MER) and normalization (MEN) as
//! parallel sequence-labeling tasks with hard parameter sharing and explicit
//! cross-task feedback.
//!
//! Both tasks read the same token sequence. A shared encoder (word embeddings
//! concatenated with a character-level CNN representation, fed through a
//! stacked bidirectional LSTM) produces one context vector per token. Each
//! task has its own head — greedy per-token log-softmax or a linear-chain CRF
//! — and each head consumes the shared vector *combined with the other task's
//! output vector* mapped through a learned feedback matrix. Training picks a
//! random task per step and updates only the shared encoder, that task's
//! head, and the feedback matrix feeding it.
//!
//! Everything is plain `f64` on the CPU, trained by momentum SGD, with
//! gradients produced by a small reverse-mode tape ([`numerics::tape`]) and
//! verified against central finite differences ([`numerics::gradcheck`]).
//!
//! The `examples/` directory has one runnable example per capability; the
//! `mtlseqlab` binary exposes the same functionality as subcommands
//! (`gen-data`, `train`, `predict`, `evaluate`, `gradcheck`).

pub mod cli;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod multitask;
pub mod numerics;
pub mod sequence_model;

pub use error::{Error, Result};
