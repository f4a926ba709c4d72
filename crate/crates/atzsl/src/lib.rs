//! Adversarially trained zero-shot learning.
//!
//! This crate trains a relation prediction network to recognize classes that
//! have no training samples, while staying robust to bounded adversarial
//! perturbations of either the inputs (L∞ ball) or the class attribute
//! prototypes (L2 ball). Training solves a min-max problem: an inner
//! sign-gradient attacker maximizes the cross-entropy loss inside its budget,
//! and the outer Adam loop minimizes a blend of clean and attacked loss.
//!
//! # Modules
//!
//! - [`diffcore`] — dense tensors and reverse-mode automatic differentiation
//! - [`relnet`] — the relation network: feature extractor, attribute embedder,
//!   relation head, temperature softmax, loss, and prediction rules
//! - [`attacks`] — ball projections, FGSM/IFGSM sign-gradient attacks,
//!   prototype attacks, a black-box coordinate-wise estimator, and
//!   truncated-normal budget sampling
//! - [`trainer`] — Adam, the learning-rate schedule, weight decay, and the
//!   blended clean+adversarial training loops
//! - [`dataset`] — synthetic zero-shot dataset generation, file formats, and
//!   split validation
//! - [`zsleval`] — per-class accuracy, harmonic means, scenario evaluation,
//!   and trade-off reports
//! - [`cli`] — the config-driven generate/train/eval/report pipeline
//!
//! # Examples
//!
//! Each major capability has a runnable example:
//!
//! ```text
//! cargo run --release -p atzsl --example autodiff_gradients
//! cargo run --release -p atzsl --example relation_scores
//! cargo run --release -p atzsl --example synthetic_dataset
//! cargo run --release -p atzsl --example attack_playground
//! cargo run --release -p atzsl --example train_robust
//! cargo run --release -p atzsl --example full_pipeline
//! ```

pub mod attacks;
pub mod cli;
pub mod dataset;
pub mod diffcore;
pub mod error;
pub mod relnet;
pub mod trainer;
pub mod zsleval;

pub use error::{Error, Result};

/// Derive a per-component seed from one global seed.
///
/// FNV-1a over the component name followed by the little-endian seed bytes;
/// stable across platforms and releases, so one `seed` key in a config
/// reproduces every stochastic stage.
pub fn component_seed(global: u64, component: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in component.bytes().chain(global.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}
