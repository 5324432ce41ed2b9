//! Out-of-distribution detection on classifier softmax outputs.
//!
//! The crate trains a small softmax classifier on synthetic Gaussian clusters
//! (or consumes softmax vectors from any external model via CSV) and compares
//! five OOD detection methods: the max-softmax baseline, ODIN, outlier
//! exposure, an isolation forest fitted on validation softmax vectors and a
//! gradient-boosting classifier trained to separate validation softmax
//! vectors from those of an auxiliary OOD set.

pub mod csv_io;
pub mod data;
pub mod detectors;
pub mod error;
pub mod gbm;
pub mod harness;
pub mod iforest;
pub mod metrics;
pub mod nn;
mod persist;

pub use data::{FeatureVector, LabeledSample, OodPool, ProbVector, SplitDataset};
pub use detectors::{Decision, Detector, DetectorInput, DetectorKind, Orientation};
pub use error::{Error, Result};
pub use metrics::{MetricsRow, ScorePair, Verdict};
