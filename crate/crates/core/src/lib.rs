//! ERG waveform records, filtering, datasets and splits, a parametric
//! simulator, and wavelet scalograms.

pub mod cache;
pub mod dataset;
pub mod oracle;
pub mod seed;
pub mod signal;
pub mod wavelet;

pub use cache::ScalogramCache;
pub use dataset::{
    load_dataset, merge, record_hash, save_dataset, split, split_indices, subject_grouping, Cell,
    Dataset, DatasetError, Manifest, Split, SplitIndices, SplitPlan, Stratify,
};
pub use oracle::{simulate_oracle, OracleParams};
pub use seed::derive_seed;
pub use signal::{
    butterworth_lowpass, normalize, ErgRecord, Eye, FilterSpec, FlashStrength, Label, NormMode,
    Normalization, Provenance, SignalError, SIGNAL_LEN,
};
pub use wavelet::{build_scalogram, cwt, MotherWavelet, ScaleGrid, Scalogram, WaveletError};
