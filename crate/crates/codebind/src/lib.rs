//! Modality-shared-specific compositional vector quantization for multimodal
//! representation alignment.
//!
//! The crate decomposes per-modality embeddings into a shared component
//! (aligned across modalities through a universal codebook) and a specific
//! component (quantized against per-modality codebooks), trains the whole
//! stack on synthetic paired data with an eight-term objective and analytic
//! gradients, and evaluates alignment with retrieval, zero-shot, and
//! linear-probe protocols.
//!
//! Start with the runnable examples (`cargo run --example ...`); the
//! `codebind` binary wraps training, evaluation, and quantization behind a
//! small config-file driven CLI.

pub mod balancer;
pub mod cli;
pub mod codebook;
pub mod config;
pub mod container;
pub mod dump;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod quantizer;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
