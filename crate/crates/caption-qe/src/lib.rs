//! Quality estimation (QE) for image captions over precomputed embeddings.
//!
//! The crate covers the full pipeline from raw crowdsourced ratings to a
//! serving decision:
//!
//! - [`ratings`]: aggregate per-rater YES/NO/SKIP judgments into quantized
//!   quality scores and measure rating reproducibility.
//! - [`data`]: load, validate, store and split the embedding-level dataset
//!   (jsonl and a packed binary format), plus model checkpoints.
//! - [`model`]: the bilinear QE network — a deterministic forward pass and
//!   exact analytic gradients, no autodiff framework.
//! - [`train`]: MSE training with Adam, learning-rate/label-count grid
//!   search, and Spearman-maximizing checkpoint selection.
//! - [`pretrain`]: image-text similarity pretraining via in-batch
//!   ground-truth-caption matching, producing warm-start checkpoints.
//! - [`metrics`]: Spearman's rho, MSE, and extrinsic precision/recall/AUC
//!   against fine-grained annotations.
//! - [`cli`]: the `qe` command-line entry point wiring the stages together.
//!
//! Every operation that consumes randomness takes an explicit seed, and all
//! file formats round-trip exactly at their stored precision, so full runs
//! are reproducible byte for byte.

pub mod cli;
pub mod data;
pub mod metrics;
pub mod model;
pub mod pretrain;
pub mod ratings;
pub mod train;

mod io_util;

pub use ratings::QualityScore;
