//! Metrics, the real-versus-augmented evaluation harness, and waveform
//! similarity between real and synthetic cells.

pub mod harness;
pub mod metrics;
pub mod report;
pub mod similarity;

pub use harness::{
    check_leakage, run_table2, synthesize_for, Augmentation, EvalError, EvalOptions,
};
pub use metrics::{auc, metrics, ConfusionCounts, Metrics, MetricsError};
pub use report::{CellKey, CellResult, EvalReport, Subset, Variant};
pub use similarity::{pearson, waveform_similarity, Similarity};
