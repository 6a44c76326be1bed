//! Causal surface-EMG keystroke decoding.
//!
//! The pipeline runs raw 32-channel wristband signals through a causal
//! log-spectrogram frontend, one of three causal encoders (TDS,
//! TDS+Transformer, Conformer) trained with CTC, and greedy or LM-fused beam
//! decoding with optional word/sentence correction. A streaming engine
//! reproduces offline emissions exactly while processing the signal in
//! overlapping windows.

pub mod alphabet;
pub mod augment;
pub mod ctc;
pub mod dataio;
pub mod decode;
pub mod encoders;
pub mod metrics;
pub mod stream;
pub mod error;
pub mod frontend;
pub mod lm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
