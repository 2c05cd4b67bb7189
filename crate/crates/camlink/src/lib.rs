//! Exactly-solved link prediction on constrained minimum spanning forests,
//! with cross-attentive modulation (CAM) tokens.
//!
//! The crate is a small laboratory covering the full loop:
//!
//! - [`solver`]: samples geometric node sets and solves the degree- and
//!   range-constrained minimum spanning forest objective exactly, producing
//!   labeled datasets.
//! - [`tensor`]: a reverse-mode autodiff engine over dense f64 tensors with
//!   exactly the operator set the models need, plus AdamW and checkpoints.
//! - [`conditioning`]: CAM tokens (first and second order), FiLM modulation,
//!   and the comparison conditioners (graph statistics, registers, Laplacian
//!   spectra).
//! - [`model`]: the attention-score predictor, the Graph Transformer, and a
//!   node-conditioned VAE head, each composable with any conditioner.
//! - [`diffusion`]: discrete edge-only denoising diffusion with a cosine
//!   retention schedule and scalar-marginal transition kernel.
//! - [`metrics`]: the evaluation suite (accuracy, prediction variance,
//!   connectivity, isolation, saturation, link validity, link count ratio).
//! - [`harness`]: the batch entry points behind the `camlink` binary
//!   (`generate`, `train`, `sample`, `eval`).
//!
//! See the `examples/` directory for one runnable walk-through per
//! capability; the binary wires the same functions to the command line.

pub mod config;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
