//! Encoder-only time-series transformer over raw waveforms.
//!
//! Each sample is projected to the embedding width, a positional encoding is
//! added, and the encoder output is mean-pooled over time before a linear
//! two-class head.

use std::path::Path;

use erg_core::{Dataset, Label, SIGNAL_LEN};
use erg_nn::layers::{Encoder, Linear};
use erg_nn::{sinusoidal_table, Container, ContainerError, Graph, Matrix, ParamId, ParamSet, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cgan::Probe;
use crate::classifier::{
    fit, labels_of, predict_proba, ClassifierError, History, Network, TrainConfig,
};

pub const CHECKPOINT_TAG: &str = "tst";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Sinusoidal,
    Learned,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TstConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    pub dropout: f64,
    pub positional: Positional,
    pub seq_len: usize,
    pub train: TrainConfig,
}

impl Default for TstConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            layers: 3,
            ff_width: 128,
            dropout: 0.1,
            positional: Positional::Sinusoidal,
            seq_len: SIGNAL_LEN,
            train: TrainConfig::default(),
        }
    }
}

impl TstConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.width == 0 || self.heads == 0 || self.ff_width == 0 || self.seq_len == 0 {
            return Err(ClassifierError::InvalidConfig(
                "sizes must be positive".into(),
            ));
        }
        if self.width % self.heads != 0 {
            return Err(ClassifierError::InvalidConfig(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ClassifierError::InvalidConfig(
                "dropout must lie in [0, 1)".into(),
            ));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TstNet {
    seq_len: usize,
    embed: Linear,
    positional: Positional,
    learned: Option<ParamId>,
    table: Matrix,
    encoder: Encoder,
    head: Linear,
}

impl Network for TstNet {
    /// `inputs` are already scaled.
    fn logits(&self, g: &mut Graph, ps: &ParamSet, inputs: &[&[f64]]) -> Var {
        let t = self.seq_len;
        let mut m = Matrix::zeros((inputs.len() * t, 1));
        for (b, x) in inputs.iter().enumerate() {
            for (i, &v) in x.iter().enumerate() {
                m[[b * t + i, 0]] = v;
            }
        }
        let x = g.input(m);
        let mut h = self.embed.forward(g, ps, x);
        match self.positional {
            Positional::Sinusoidal => {
                let table = g.input(self.table.clone());
                h = g.block_add(h, table);
            }
            Positional::Learned => {
                let table = g.param(ps, self.learned.expect("learned table"));
                h = g.block_add(h, table);
            }
            Positional::None => {}
        }
        let h = self.encoder.forward(g, ps, h, t, false);
        let pooled = g.block_mean(h, t);
        self.head.forward(g, ps, pooled)
    }
}

/// Trained (or freshly initialized) TST with its input scaler.
#[derive(Debug, Clone)]
pub struct TstModel {
    pub config: TstConfig,
    pub net: TstNet,
    pub params: ParamSet,
    /// Z-score scaler fitted on the training fold: (mean, sd).
    pub scaler: (f64, f64),
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TstConfig,
    scaler: (f64, f64),
}

impl TstModel {
    pub fn init(config: &TstConfig, seed: u64) -> Result<Self, ClassifierError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = config.width;
        let embed = Linear::new(&mut ps, "tst.embed", 1, d, &mut rng);
        let learned = (config.positional == Positional::Learned)
            .then(|| ps.add_uniform("tst.pos", config.seq_len, d, 0.02, &mut rng));
        let encoder = Encoder::new(
            &mut ps,
            "tst.encoder",
            d,
            config.heads,
            config.layers,
            config.ff_width,
            config.dropout,
            &mut rng,
        );
        let head = Linear::new(&mut ps, "tst.head", d, 2, &mut rng);
        Ok(Self {
            config: config.clone(),
            net: TstNet {
                seq_len: config.seq_len,
                embed,
                positional: config.positional,
                learned,
                table: sinusoidal_table(config.seq_len, d),
                encoder,
                head,
            },
            params: ps,
            scaler: (0.0, 1.0),
        })
    }

    fn scaled(&self, signals: &[&[f64]]) -> Result<Vec<Vec<f64>>, ClassifierError> {
        let (mean, sd) = self.scaler;
        signals
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if s.len() != self.config.seq_len {
                    return Err(ClassifierError::Shape {
                        expected: self.config.seq_len,
                        found: s.len(),
                    });
                }
                if s.iter().any(|v| !v.is_finite()) {
                    return Err(ClassifierError::NonFinite(i));
                }
                Ok(s.iter().map(|v| (v - mean) / sd).collect())
            })
            .collect()
    }

    /// Class probabilities `[P(ASD), P(Control)]` per signal.
    pub fn forward(&self, signals: &[&[f64]]) -> Result<Vec<[f64; 2]>, ClassifierError> {
        let x = self.scaled(signals)?;
        Ok(predict_proba(&self.net, &self.params, &x))
    }

    /// Raw logits on a caller-supplied graph, for gradient checks.
    pub fn logits(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        signals: &[&[f64]],
    ) -> Result<Var, ClassifierError> {
        let x = self.scaled(signals)?;
        let refs: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        Ok(self.net.logits(g, ps, &refs))
    }

    pub fn predict(&self, ds: &Dataset) -> Result<Vec<f64>, ClassifierError> {
        let signals: Vec<&[f64]> = ds.records.iter().map(|r| r.samples()).collect();
        Ok(self
            .forward(&signals)?
            .into_iter()
            .map(|p| p[Label::Asd.index()])
            .collect())
    }

    /// Fits the scaler on `train`, then trains with early stopping on `val`.
    pub fn fit(
        train: &Dataset,
        val: &Dataset,
        config: &TstConfig,
        seed: u64,
    ) -> Result<(Self, History), ClassifierError> {
        let mut model = Self::init(config, seed)?;
        model.scaler = fit_scaler(train)?;
        let xs = model.scaled(
            &train
                .records
                .iter()
                .map(|r| r.samples())
                .collect::<Vec<_>>(),
        )?;
        let vx = model.scaled(&val.records.iter().map(|r| r.samples()).collect::<Vec<_>>())?;
        let (ys, vy) = (labels_of(train), labels_of(val));
        let history = fit(
            &model.net,
            &mut model.params,
            (&xs, &ys),
            (&vx, &vy),
            &config.train,
            erg_core::derive_seed(seed, "tst.train"),
        )?;
        Ok((model, history))
    }

    pub fn to_container(&self) -> Container {
        let meta = Meta {
            config: self.config.clone(),
            scaler: self.scaler,
        };
        let mut c = Container::new(
            CHECKPOINT_TAG,
            serde_json::to_string(&meta).expect("metadata serializes"),
        );
        c.push_params("params", &self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, ClassifierError> {
        if c.tag != CHECKPOINT_TAG {
            return Err(ContainerError::TagMismatch {
                expected: CHECKPOINT_TAG.into(),
                found: c.tag.clone(),
            }
            .into());
        }
        let meta: Meta = serde_json::from_str(&c.metadata)?;
        let mut m = Self::init(&meta.config, 0)?;
        c.restore_params("params", &mut m.params)?;
        m.scaler = meta.scaler;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        Self::from_container(&Container::load(path, CHECKPOINT_TAG)?)
    }
}

/// Mean and population standard deviation over every training sample.
fn fit_scaler(train: &Dataset) -> Result<(f64, f64), ClassifierError> {
    let n = train
        .records
        .iter()
        .map(|r| r.samples().len())
        .sum::<usize>();
    if n == 0 {
        return Err(ClassifierError::InvalidFold(
            "training fold is empty".into(),
        ));
    }
    let all = train.records.iter().flat_map(|r| r.samples());
    let mean = all.clone().sum::<f64>() / n as f64;
    let var = all.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Ok((mean, if var > 0.0 { var.sqrt() } else { 1.0 }))
}

/// One fold per `(train, validation)` pair.
pub fn tst_train(
    folds: &[(Dataset, Dataset)],
    config: &TstConfig,
) -> Result<Vec<(TstModel, History)>, ClassifierError> {
    folds
        .iter()
        .enumerate()
        .map(|(k, (train, val))| {
            TstModel::fit(
                train,
                val,
                config,
                erg_core::derive_seed(config.train.seed, &format!("tst.fold{k}")),
            )
        })
        .collect()
}

impl Probe for TstModel {
    fn predict_labels(&self, records: &[erg_core::ErgRecord]) -> Vec<Label> {
        let signals: Vec<&[f64]> = records.iter().map(|r| r.samples()).collect();
        self.forward(&signals)
            .expect("generated records have valid shape")
            .into_iter()
            .map(|p| {
                if p[0] >= 0.5 {
                    Label::Asd
                } else {
                    Label::Control
                }
            })
            .collect()
    }
}
