//! Training loop and model dispatch shared by the two classifiers.

use erg_core::{derive_seed, Dataset, Label, ScalogramCache, WaveletError};
use erg_nn::{Adam, AdamConfig, ContainerError, Graph, ParamSet, Var};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tst::{TstConfig, TstModel};
use crate::vit::{VitConfig, VitModel};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("invalid fold: {0}")]
    InvalidFold(String),
    #[error("shape error: expected {expected} values, found {found}")]
    Shape { expected: usize, found: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite input at record {0}")]
    NonFinite(usize),
    #[error("scalogram: {0}")]
    Wavelet(#[from] WaveletError),
    #[error("checkpoint: {0}")]
    Container(#[from] ContainerError),
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Cross-entropy weights for (ASD, Control); inverse class frequency of
    /// the training fold when absent.
    pub class_weights: Option<[f64; 2]>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 32,
            max_epochs: 300,
            patience: 10,
            class_weights: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.batch == 0 || self.max_epochs == 0 || !(self.lr > 0.0) {
            return Err(ClassifierError::InvalidConfig(
                "batch, max_epochs and lr must be positive".into(),
            ));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|v| *v == 0.0) {
                return Err(ClassifierError::InvalidConfig(
                    "class weights must be non-negative and not both zero".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-epoch losses of one fold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub class_weights: [f64; 2],
}

impl History {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }
}

/// A network mapping rows of features to two logits.
pub trait Network {
    fn logits(&self, g: &mut Graph, ps: &ParamSet, inputs: &[&[f64]]) -> Var;
}

/// `n / (2 · n_c)` per class, indexed by [`Label::index`].
pub fn inverse_frequency(labels: &[usize]) -> Result<[f64; 2], ClassifierError> {
    let mut counts = [0usize; 2];
    for &y in labels {
        counts[y] += 1;
    }
    if counts.contains(&0) {
        let missing = Label::ALL[counts.iter().position(|&c| c == 0).expect("a zero")];
        return Err(ClassifierError::InvalidFold(format!(
            "training fold has no {missing} records"
        )));
    }
    let n = labels.len() as f64;
    Ok(counts.map(|c| n / (2.0 * c as f64)))
}

pub fn labels_of(ds: &Dataset) -> Vec<usize> {
    ds.records.iter().map(|r| r.label.index()).collect()
}

fn mean_loss<N: Network>(
    net: &N,
    ps: &ParamSet,
    x: &[Vec<f64>],
    y: &[usize],
    w: &[f64; 2],
    chunk: usize,
) -> f64 {
    let (mut total, mut norm) = (0.0, 0.0);
    for (xs, ys) in x.chunks(chunk).zip(y.chunks(chunk)) {
        let mut g = Graph::new();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let logits = net.logits(&mut g, ps, &refs);
        let loss = g.cross_entropy(logits, ys, w);
        let weight: f64 = ys.iter().map(|&c| w[c]).sum();
        total += g.scalar(loss) * weight;
        norm += weight;
    }
    if norm > 0.0 {
        total / norm
    } else {
        0.0
    }
}

/// Adam on weighted cross-entropy with early stopping on validation loss.
/// `ps` ends holding the parameters of the best epoch.
pub fn fit<N: Network>(
    net: &N,
    ps: &mut ParamSet,
    train: (&[Vec<f64>], &[usize]),
    val: (&[Vec<f64>], &[usize]),
    config: &TrainConfig,
    seed: u64,
) -> Result<History, ClassifierError> {
    config.validate()?;
    let (x, y) = train;
    let (vx, vy) = val;
    let weights = match config.class_weights {
        Some(w) => {
            inverse_frequency(y)?;
            w
        }
        None => inverse_frequency(y)?,
    };
    if vx.is_empty() {
        return Err(ClassifierError::InvalidFold(
            "validation fold is empty".into(),
        ));
    }
    let ids: Vec<_> = ps.ids().collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        ps,
        ids,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut history = History {
        class_weights: weights,
        ..History::default()
    };
    let mut best = (f64::INFINITY, ps.clone());
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut norm) = (0.0, 0.0);
        for batch in order.chunks(config.batch) {
            let mut g = Graph::training(rng.next_u64());
            let refs: Vec<&[f64]> = batch.iter().map(|&i| x[i].as_slice()).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let logits = net.logits(&mut g, ps, &refs);
            let loss = g.cross_entropy(logits, &targets, &weights);
            let weight: f64 = targets.iter().map(|&c| weights[c]).sum();
            total += g.scalar(loss) * weight;
            norm += weight;
            let grads = g.backward(loss);
            adam.update(ps, &grads);
        }
        let train_loss = if norm > 0.0 { total / norm } else { 0.0 };
        let val_loss = mean_loss(net, ps, vx, vy, &weights, 64);
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        log::debug!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
        if val_loss < best.0 {
            best = (val_loss, ps.clone());
            history.best_epoch = epoch;
        } else if epoch - history.best_epoch >= config.patience {
            break;
        }
    }
    *ps = best.1;
    Ok(history)
}

/// Softmax probabilities in inference mode, rows in input order.
pub fn predict_proba<N: Network>(net: &N, ps: &ParamSet, inputs: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        let mut g = Graph::new();
        let refs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
        let logits = net.logits(&mut g, ps, &refs);
        let p = g.softmax_rows(logits);
        out.extend(g.value(p).rows().into_iter().map(|r| [r[0], r[1]]));
    }
    out
}

/// Which classifier to train, with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierSpec {
    Tst(TstConfig),
    Vit(VitConfig),
}

impl ClassifierSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ClassifierSpec::Tst(_) => "TST",
            ClassifierSpec::Vit(_) => "ViT",
        }
    }

    pub fn fit(
        &self,
        train: &Dataset,
        val: &Dataset,
        seed: u64,
        cache: Option<&ScalogramCache>,
    ) -> Result<(Classifier, History), ClassifierError> {
        match self {
            ClassifierSpec::Tst(c) => {
                let (m, h) = TstModel::fit(train, val, c, derive_seed(seed, "tst"))?;
                Ok((Classifier::Tst(m), h))
            }
            ClassifierSpec::Vit(c) => {
                let (m, h) = VitModel::fit(train, val, c, derive_seed(seed, "vit"), cache)?;
                Ok((Classifier::Vit(m), h))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Classifier {
    Tst(TstModel),
    Vit(VitModel),
}

impl Classifier {
    /// Probability of ASD per record.
    pub fn predict(
        &self,
        ds: &Dataset,
        cache: Option<&ScalogramCache>,
    ) -> Result<Vec<f64>, ClassifierError> {
        match self {
            Classifier::Tst(m) => m.predict(ds),
            Classifier::Vit(m) => m.predict(ds, cache),
        }
    }
}
