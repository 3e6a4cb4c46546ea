//! Opcode-sequence malware family classification.
//!
//! The pipeline trains one discrete hidden Markov model per malware family on
//! concatenated opcode sequences, posterior-decodes each sample under every
//! family model to build a concatenated hidden-state feature vector, scales
//! the vectors, embeds them as zero-padded square images, and classifies the
//! images with a small CNN. Random Forest and linear SVM baselines operate on
//! the same feature vectors (or on raw truncated opcode sequences).
//!
//! Everything is seed-deterministic: identical inputs and seeds produce
//! byte-identical model files and reports.

pub mod baselines;
pub mod corpus;
pub mod error;
pub mod evalreport;
pub mod features;
pub mod hmm;
pub mod nn;
pub mod pipeline;
pub mod seeding;
pub mod synth;

pub use error::{Error, Result};
