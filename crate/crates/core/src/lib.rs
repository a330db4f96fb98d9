//! Spectrum matching with a Siamese contrastive network.
//!
//! The crate trains a weight-shared twin network to decide whether two 1D
//! spectra come from the same substance, matches unknown spectra against a
//! reference library by grouped maximum similarity, and wraps predictions in
//! split-conformal prediction sets.
//!
//! Module map:
//!
//! - [`spectra_io`]: spectrum records, CSV/JSONL ingest, resampling, splits
//! - [`ndcore`]: dense tensors, a reverse-mode tape over a fixed op set, checkpoints
//! - [`network`]: representation network, distance maps, similarity head
//! - [`augment`]: class-size dependent augmentation and shift-simulated pairs
//! - [`trainer`]: pair sampling, loss, Adam with cosine annealing, ensembles
//! - [`matcher`]: reference library search, voting, 1NN baselines, accuracy
//! - [`conformal`]: split-conformal calibration and prediction sets
//! - [`harness`]: synthetic data, repeated leave-one-out experiments, reports
//! - [`cli`]: the `specmatch` command-line front end

pub mod augment;
pub mod cli;
pub mod conformal;
pub mod error;
pub mod harness;
pub mod matcher;
pub mod ndcore;
pub mod network;
pub mod spectra_io;
pub mod trainer;

pub use error::{Error, Result};
