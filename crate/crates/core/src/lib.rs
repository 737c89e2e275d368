//! Production-network anomaly detection.
//!
//! This crate turns daily well production tables into anomaly scores:
//! ingestion and imputation, physics-informed features, weak rule-based
//! labels, causal windowing, a network graph, and two sequence models (an
//! attention-based graph model and an LSTM baseline) trained with a
//! class-weighted loss. A synthetic field generator with injected anomalies
//! provides ground truth for benchmarking, and every artifact is written so
//! that a rerun with the same seed is byte-identical.

pub mod artifacts;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod ingest;
pub mod labels;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod train;
pub mod windows;

pub use error::{Error, ErrorCategory, Result};
