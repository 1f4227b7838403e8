//! Cross-validated comparison of classifiers trained on real records alone
//! and on real records plus generator output.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use erg_core::{
    derive_seed, merge, split_indices, Cell, Dataset, DatasetError, Provenance, ScalogramCache,
    SplitPlan, WaveletError,
};
use erg_models::{
    ClassifierError, ClassifierSpec, ConditionCode, GanCheckpoint, GanError, LatentSeed,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{metrics, ConfusionCounts, Metrics, MetricsError};
use crate::report::{CellKey, EvalReport, Subset, Variant};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test record {0} was used to train the generator")]
    Leakage(String),
    #[error("{count} synthetic records in the {set} set")]
    SyntheticOutsideTraining { count: usize, set: String },
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Cache(#[from] WaveletError),
}

/// How many synthetic records to add to each (label, strength) cell of a
/// training fold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    PerCell(usize),
    /// Synthetic records per real record in the cell, rounded.
    Ratio(f64),
}

impl Augmentation {
    pub fn count(&self, real_in_cell: usize) -> usize {
        match *self {
            Augmentation::PerCell(n) => n,
            Augmentation::Ratio(r) => (r * real_in_cell as f64).round() as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub augmentation: Augmentation,
    /// Keep each subject's records on one side of every split boundary.
    pub subject_grouping: bool,
    /// Cap on real training records per cell, applied before augmentation.
    pub truncate_train_per_cell: Option<usize>,
    pub subsets: Vec<Subset>,
    /// Records scoring at least this are called ASD.
    pub threshold: f64,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            augmentation: Augmentation::Ratio(1.0),
            subject_grouping: true,
            truncate_train_per_cell: None,
            subsets: Subset::table_rows(),
            threshold: 0.5,
            seed: 0,
            cache_dir: None,
        }
    }
}

/// Fails if any test record was seen by the generator.
pub fn check_leakage(test: &Dataset, training_manifest: &[String]) -> Result<(), EvalError> {
    let seen: BTreeSet<&str> = training_manifest.iter().map(String::as_str).collect();
    match test
        .hashes()
        .into_iter()
        .find(|h| seen.contains(h.as_str()))
    {
        Some(h) => Err(EvalError::Leakage(h)),
        None => Ok(()),
    }
}

fn check_real(ds: &Dataset, set: &str) -> Result<(), EvalError> {
    let count = ds
        .provenance_counts()
        .get(&Provenance::Synthetic)
        .copied()
        .unwrap_or(0);
    if count > 0 {
        return Err(EvalError::SyntheticOutsideTraining {
            count,
            set: set.into(),
        });
    }
    Ok(())
}

/// Synthetic records for one training fold; latent seeds depend only on the
/// global seed, the fold and the cell.
pub fn synthesize_for(
    checkpoint: &GanCheckpoint,
    train: &Dataset,
    augmentation: Augmentation,
    seed: u64,
    fold: usize,
) -> Result<Dataset, EvalError> {
    let mut sizes: BTreeMap<Cell, usize> = BTreeMap::new();
    for r in &train.records {
        *sizes.entry(r.cell()).or_default() += 1;
    }
    let mut requests = Vec::new();
    for (&(label, strength), &n) in &sizes {
        for i in 0..augmentation.count(n) {
            let s = derive_seed(
                seed,
                &format!("synthetic.{fold}.{label}.{}.{i}", strength.index()),
            );
            requests.push((
                ConditionCode::new(label, strength),
                LatentSeed::from_seed(s),
            ));
        }
    }
    Ok(Dataset::new(checkpoint.generate_batch(&requests)?))
}

fn evaluate(
    spec: &ClassifierSpec,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    seed: u64,
    threshold: f64,
    cache: Option<&ScalogramCache>,
) -> Result<Metrics, EvalError> {
    let (model, _) = spec.fit(train, val, seed, cache)?;
    let scores = model.predict(test, cache)?;
    let truth: Vec<_> = test.records.iter().map(|r| r.label).collect();
    let counts = ConfusionCounts::from_scores(&scores, &truth, threshold)?;
    let pairs: Vec<_> = scores.into_iter().zip(truth).collect();
    Ok(metrics(&counts, &pairs)?)
}

/// Splits `real`, then for every fold, subset and model trains one
/// classifier on the real training fold and one on the same fold plus
/// synthetic records, and scores both on the held-out test set.
///
/// Both variants share a training seed, so an empty augmentation yields
/// identical cells.
pub fn run_table2(
    real: &Dataset,
    checkpoint: &GanCheckpoint,
    plan: &SplitPlan,
    models: &[ClassifierSpec],
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if options.subsets.is_empty() || models.is_empty() {
        return Err(EvalError::InvalidOptions(
            "no subsets or no models to evaluate".into(),
        ));
    }
    if plan.folds < 2 {
        return Err(EvalError::InvalidOptions(
            "at least two folds are needed".into(),
        ));
    }
    if let Augmentation::Ratio(r) = options.augmentation {
        if !(r.is_finite() && r >= 0.0) {
            return Err(EvalError::InvalidOptions(format!("augmentation ratio {r}")));
        }
    }
    let idx = split_indices(real, plan, options.subject_grouping)?;
    let test = real.subset(&idx.test);
    check_real(&test, "test")?;
    check_leakage(&test, &checkpoint.training_manifest)?;
    let cache = options
        .cache_dir
        .as_ref()
        .map(ScalogramCache::new)
        .transpose()?;

    let mut folds: BTreeMap<CellKey, Vec<Metrics>> = BTreeMap::new();
    for k in 0..plan.folds {
        let val = real.subset(&idx.folds[k]);
        check_real(&val, &format!("fold {k} validation"))?;
        let mut train = real.subset(&idx.train(k));
        if let Some(n) = options.truncate_train_per_cell {
            train = train.truncate_per_cell(n);
        }
        let synthetic = synthesize_for(checkpoint, &train, options.augmentation, options.seed, k)?;
        log::info!(
            "fold {k}: {} real, {} synthetic training records",
            train.len(),
            synthetic.len()
        );
        let augmented = merge(&train, &synthetic);

        for &subset in &options.subsets {
            let keep = |ds: &Dataset| ds.filter(|r| subset.contains(r.strength));
            let (val_s, test_s) = (keep(&val), keep(&test));
            for spec in models {
                let seed = derive_seed(options.seed, &format!("{}.{subset}.{k}", spec.name()));
                for (variant, tr) in [
                    (Variant::Original, &train),
                    (Variant::Augmented, &augmented),
                ] {
                    let m = evaluate(
                        spec,
                        &keep(tr),
                        &val_s,
                        &test_s,
                        seed,
                        options.threshold,
                        cache.as_ref(),
                    )?;
                    folds
                        .entry(CellKey {
                            model: spec.name().to_string(),
                            subset,
                            variant,
                        })
                        .or_default()
                        .push(m);
                }
            }
        }
    }
    let mut report = EvalReport::default();
    for (key, f) in folds {
        report.insert(key, f);
    }
    Ok(report)
}
