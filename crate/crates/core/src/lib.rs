//! Missing-value imputation for multivariate IoT device streams at an edge node.
//!
//! Each device keeps a sliding window of its latest reports. When a value is
//! missing, the device's own window yields a local autoregressive forecast,
//! the most similar peers (cosine similarity calibrated by a Mahalanobis
//! distance over the windows) yield a group estimate, and a sigmoid of the
//! window deviation blends the two. The [`evaluation`] module replays masked
//! traces to score this model against two baselines.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod correlation;
pub mod error;
pub mod evaluation;
pub mod imputation;
pub mod ingestion;
pub mod kv;
pub mod stream;

pub use config::{ExperimentConfig, FeedMode, GridSpec};
pub use correlation::{CorrelationParams, CorrelationResult, MdMode, PeerGroup};
pub use error::{ImputeError, Result};
pub use evaluation::{
    compare_models, compare_models_parallel, run_experiment, ComparisonTable, MetricsReport,
};
pub use imputation::{
    BlendParams, ImputationOutcome, LocalEstimate, Model, SigmaMode, WgmWeighting,
};
pub use ingestion::{InjectionOptions, InjectionPlan, MaskUnit, SynthParams, Trace, TraceSchema};
pub use stream::{DeviceReport, StreamSlice, WindowStore};
