//! Robust training of window-based time-series anomaly detectors on
//! possibly contaminated training data.
//!
//! The pipeline records per-window losses over a few trial epochs, scores
//! every training window by the mean of its losses and by the spread of its
//! per-epoch loss updates, drops the windows above the `1 - tau` quantile of
//! either score, and retrains a fresh model on what is left.
//!
//! Modules, bottom-up:
//!
//! - [`nn`]: dense networks, per-sample MSE, reverse-mode gradients, Adam.
//! - [`data`]: CSV ingestion, normalization, windowing, synthetic benchmark,
//!   contamination injection, train/validation split.
//! - [`models`]: reconstruction and prediction window models.
//! - [`filter`]: loss traces, the mean/oscillation metrics, quantile discard,
//!   robust training.
//! - [`eval`]: AUC-ROC, best F1, coverage of injected windows.
//! - [`experiment`]: sweep runner and CSV reporting.
//! - [`cli`]: command-line front end.

pub mod cli;
pub mod data;
mod error;
pub mod eval;
pub mod experiment;
pub mod filter;
pub mod models;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};
