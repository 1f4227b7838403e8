//! Conditional GAN with bidirectional-LSTM generator and discriminator.
//!
//! Both networks see the condition code concatenated to every time step.
//! Training happens in a per-signal MinMax space (`[-1, 1]`); generated
//! signals are mapped back to microvolts with the mean normalization of
//! their (label, strength) cell.

use std::collections::BTreeMap;
use std::path::Path;

use erg_core::signal::normalize_samples;
use erg_core::{
    derive_seed, record_hash, Cell, Dataset, ErgRecord, Eye, FlashStrength, Label, NormMode,
    Normalization, Provenance, SIGNAL_LEN,
};
use erg_nn::layers::{BiLstm, Linear};
use erg_nn::{Adam, AdamConfig, Container, ContainerError, Graph, Matrix, ParamId, ParamSet, Var};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONDITION_WIDTH: usize = Label::ALL.len() + FlashStrength::COUNT;
pub const CHECKPOINT_TAG: &str = "cgan";

#[derive(Debug, Error)]
pub enum GanError {
    #[error("invalid condition: {0}")]
    InvalidCondition(String),
    #[error("shape error: expected {expected} samples, found {found}")]
    Shape { expected: usize, found: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_checkpoint: Option<Box<GanCheckpoint>>,
    },
    #[error("checkpoint: {0}")]
    Container(#[from] ContainerError),
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

/// Class and flash strength a signal is generated or scored under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionCode {
    pub label: Label,
    pub strength: FlashStrength,
}

impl ConditionCode {
    pub fn new(label: Label, strength: FlashStrength) -> Self {
        Self { label, strength }
    }

    pub fn cell(self) -> Cell {
        (self.label, self.strength)
    }

    /// One-hot label block followed by one-hot strength block.
    pub fn encode(self) -> [f64; CONDITION_WIDTH] {
        let mut code = [0.0; CONDITION_WIDTH];
        code[self.label.index()] = 1.0;
        code[Label::ALL.len() + self.strength.index()] = 1.0;
        code
    }

    pub fn decode(code: &[f64]) -> Result<Self, GanError> {
        if code.len() != CONDITION_WIDTH {
            return Err(GanError::InvalidCondition(format!(
                "expected {CONDITION_WIDTH} entries, found {}",
                code.len()
            )));
        }
        let (labels, strengths) = code.split_at(Label::ALL.len());
        let hot = |block: &[f64], what: &str| -> Result<usize, GanError> {
            if block.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(GanError::InvalidCondition(format!(
                    "{what} block is not one-hot"
                )));
            }
            let ones: Vec<usize> = (0..block.len()).filter(|&i| block[i] == 1.0).collect();
            match ones[..] {
                [i] => Ok(i),
                _ => Err(GanError::InvalidCondition(format!(
                    "{what} block has {} hot entries",
                    ones.len()
                ))),
            }
        };
        let label = Label::ALL[hot(labels, "label")?];
        let strength =
            FlashStrength::from_index(hot(strengths, "strength")?).expect("index in range");
        Ok(Self { label, strength })
    }

    pub fn all() -> impl Iterator<Item = ConditionCode> {
        Label::ALL
            .into_iter()
            .flat_map(|l| FlashStrength::all().map(move |s| ConditionCode::new(l, s)))
    }
}

/// Latent noise for one generated signal.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeed {
    pub rng_seed: u64,
    pub z: Vec<f64>,
}

impl LatentSeed {
    /// `z` of length [`SIGNAL_LEN`], i.i.d. standard normal from `rng_seed`.
    pub fn from_seed(rng_seed: u64) -> Self {
        Self::with_len(rng_seed, SIGNAL_LEN)
    }

    pub fn with_len(rng_seed: u64, len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let z = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        Self { rng_seed, z }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    /// Time steps per signal; only tiny test instances use anything but 235.
    pub seq_len: usize,
    /// LSTM width per direction, shared by both networks.
    pub hidden: usize,
    /// Generator FC width.
    pub fc_width: usize,
    /// Discriminator hidden FC widths.
    pub disc_fc: [usize; 2],
    pub dropout: f64,
    pub leaky_slope: f64,
    pub epochs: usize,
    pub batch: usize,
    #[serde(deserialize_with = "partial_adam")]
    pub generator_adam: AdamConfig,
    #[serde(deserialize_with = "partial_adam")]
    pub discriminator_adam: AdamConfig,
    pub checkpoint_every: usize,
    /// Fraction of each cell held out from training to select the best
    /// checkpoint.
    pub holdback_fraction: f64,
    pub seed: u64,
}

fn gan_adam() -> AdamConfig {
    AdamConfig {
        lr: 2e-4,
        beta1: 0.5,
        beta2: 0.999,
        eps: 1e-8,
    }
}

/// Optimizer table where omitted fields keep the GAN defaults rather than
/// the generic Adam ones.
fn partial_adam<'de, D: serde::Deserializer<'de>>(d: D) -> Result<AdamConfig, D::Error> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Partial {
        lr: Option<f64>,
        beta1: Option<f64>,
        beta2: Option<f64>,
        eps: Option<f64>,
    }
    let p = Partial::deserialize(d)?;
    let base = gan_adam();
    Ok(AdamConfig {
        lr: p.lr.unwrap_or(base.lr),
        beta1: p.beta1.unwrap_or(base.beta1),
        beta2: p.beta2.unwrap_or(base.beta2),
        eps: p.eps.unwrap_or(base.eps),
    })
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            seq_len: SIGNAL_LEN,
            hidden: 512,
            fc_width: 1024,
            disc_fc: [1024, 512],
            dropout: 0.2,
            leaky_slope: 0.2,
            epochs: 10_000,
            batch: 15,
            generator_adam: gan_adam(),
            discriminator_adam: gan_adam(),
            checkpoint_every: 500,
            holdback_fraction: 0.1,
            seed: 0,
        }
    }
}

impl GanConfig {
    /// Narrow networks for CPU smoke runs. The narrow nets need a larger
    /// step to leave the initial plateau within a few hundred epochs.
    pub fn smoke() -> Self {
        let adam = AdamConfig {
            lr: 1e-3,
            ..gan_adam()
        };
        Self {
            hidden: 16,
            fc_width: 64,
            disc_fc: [64, 32],
            epochs: 500,
            generator_adam: adam,
            discriminator_adam: adam,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GanError> {
        let bad = |m: &str| Err(GanError::InvalidConfig(m.to_string()));
        if self.seq_len == 0 || self.hidden == 0 || self.fc_width == 0 || self.disc_fc.contains(&0)
        {
            return bad("layer sizes must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.holdback_fraction) {
            return bad("holdback_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Generator {
    rnn: BiLstm,
    fc1: Linear,
    fc2: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct Discriminator {
    rnn: BiLstm,
    fc1: Linear,
    fc2: Linear,
    out: Linear,
}

/// Per-epoch means over minibatches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub g_loss: Vec<f64>,
    pub d_loss: Vec<f64>,
    pub d_acc_real: Vec<f64>,
    pub d_acc_fake: Vec<f64>,
}

impl LossCurves {
    pub fn len(&self) -> usize {
        self.g_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g_loss.is_empty()
    }

    fn truncate(&mut self, n: usize) {
        self.g_loss.truncate(n);
        self.d_loss.truncate(n);
        self.d_acc_real.truncate(n);
        self.d_acc_fake.truncate(n);
    }
}

/// Discriminator accuracy on the held-back slice at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellNorm {
    label: Label,
    strength: FlashStrength,
    offset: f64,
    scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config: GanConfig,
    epoch: usize,
    curves: LossCurves,
    cells: Vec<CellNorm>,
    rng_seed: u64,
    rng_word_pos: String,
    generator_steps: u64,
    discriminator_steps: u64,
    training_manifest: Vec<String>,
    selection: Vec<Selection>,
}

/// Generator and discriminator with their optimizers and training record.
#[derive(Debug, Clone)]
pub struct GanCheckpoint {
    pub config: GanConfig,
    params: ParamSet,
    generator: Generator,
    discriminator: Discriminator,
    gen_ids: Vec<ParamId>,
    disc_ids: Vec<ParamId>,
    gen_opt: Adam,
    disc_opt: Adam,
    pub epoch: usize,
    pub curves: LossCurves,
    /// Inverse map back to microvolts per (label, strength).
    pub cells: BTreeMap<Cell, Normalization>,
    rng: ChaCha8Rng,
    /// Hashes of the records the GAN was trained on.
    pub training_manifest: Vec<String>,
    /// Held-back accuracy at every checkpoint considered for selection.
    pub selection: Vec<Selection>,
}

impl PartialEq for GanCheckpoint {
    fn eq(&self, other: &Self) -> bool {
        self.to_container().tensors == other.to_container().tensors && self.meta() == other.meta()
    }
}

impl PartialEq for Meta {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_string(self).ok() == serde_json::to_string(other).ok()
    }
}

impl GanCheckpoint {
    /// Randomly initialized networks. Every cell starts with the identity
    /// normalization so an untrained model can already generate.
    pub fn init(config: &GanConfig) -> Result<Self, GanError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "gan.init"));
        let mut ps = ParamSet::new();
        let input = 1 + CONDITION_WIDTH;
        let h2 = 2 * config.hidden;
        let generator = Generator {
            rnn: BiLstm::chrono(
                &mut ps,
                "gen.rnn",
                input,
                config.hidden,
                config.seq_len,
                &mut rng,
            ),
            fc1: Linear::new(&mut ps, "gen.fc1", h2, config.fc_width, &mut rng),
            fc2: Linear::new(
                &mut ps,
                "gen.fc2",
                config.fc_width,
                config.fc_width,
                &mut rng,
            ),
            out: Linear::new(
                &mut ps,
                "gen.out",
                config.fc_width,
                config.seq_len,
                &mut rng,
            ),
        };
        let [d1, d2] = config.disc_fc;
        let discriminator = Discriminator {
            rnn: BiLstm::chrono(
                &mut ps,
                "disc.rnn",
                input,
                config.hidden,
                config.seq_len,
                &mut rng,
            ),
            fc1: Linear::new(&mut ps, "disc.fc1", h2, d1, &mut rng),
            fc2: Linear::new(&mut ps, "disc.fc2", d1, d2, &mut rng),
            out: Linear::new(&mut ps, "disc.out", d2, 1, &mut rng),
        };
        let gen_ids = ps.with_prefix("gen.");
        let disc_ids = ps.with_prefix("disc.");
        let gen_opt = Adam::new(config.generator_adam, &ps, gen_ids.clone());
        let disc_opt = Adam::new(config.discriminator_adam, &ps, disc_ids.clone());
        let identity = Normalization {
            offset: 0.0,
            scale: 1.0,
            degenerate: false,
        };
        Ok(Self {
            config: config.clone(),
            params: ps,
            generator,
            discriminator,
            gen_ids,
            disc_ids,
            gen_opt,
            disc_opt,
            epoch: 0,
            curves: LossCurves::default(),
            cells: ConditionCode::all().map(|c| (c.cell(), identity)).collect(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "gan.train")),
            training_manifest: Vec::new(),
            selection: Vec::new(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn generator_ids(&self) -> &[ParamId] {
        &self.gen_ids
    }

    pub fn discriminator_ids(&self) -> &[ParamId] {
        &self.disc_ids
    }

    /// Time-major `[value_t, condition]` rows for the recurrent layers.
    fn sequence_input(&self, g: &mut Graph, values: &[&[f64]], conds: &[ConditionCode]) -> Var {
        let b = values.len();
        let t = self.config.seq_len;
        let mut m = Matrix::zeros((t * b, 1 + CONDITION_WIDTH));
        for (j, (v, c)) in values.iter().zip(conds).enumerate() {
            let code = c.encode();
            for step in 0..t {
                let mut row = m.row_mut(step * b + j);
                row[0] = v[step];
                for (k, &x) in code.iter().enumerate() {
                    row[1 + k] = x;
                }
            }
        }
        g.input(m)
    }

    /// Same layout as [`Self::sequence_input`] from a `batch × T` variable.
    fn sequence_input_var(&self, g: &mut Graph, x: Var, conds: &[ConditionCode]) -> Var {
        let b = conds.len();
        let t = self.config.seq_len;
        let xt = g.transpose(x);
        let col = g.reshape(xt, t * b, 1);
        let mut m = Matrix::zeros((t * b, CONDITION_WIDTH));
        for (j, c) in conds.iter().enumerate() {
            let code = c.encode();
            for step in 0..t {
                for (k, &v) in code.iter().enumerate() {
                    m[[step * b + j, k]] = v;
                }
            }
        }
        let cm = g.input(m);
        g.concat_cols(&[col, cm])
    }

    fn generator_forward(&self, g: &mut Graph, z: &[&[f64]], conds: &[ConditionCode]) -> Var {
        let net = &self.generator;
        let ps = &self.params;
        let x = self.sequence_input(g, z, conds);
        let h = net.rnn.forward(g, ps, x, z.len());
        let h = net.fc1.forward(g, ps, h);
        let h = g.leaky_relu(h, self.config.leaky_slope);
        let h = g.dropout(h, self.config.dropout);
        let h = net.fc2.forward(g, ps, h);
        let h = g.leaky_relu(h, self.config.leaky_slope);
        let h = g.dropout(h, self.config.dropout);
        net.out.forward(g, ps, h)
    }

    fn discriminator_forward(&self, g: &mut Graph, x: Var, batch: usize) -> Var {
        let net = &self.discriminator;
        let ps = &self.params;
        let h = net.rnn.forward(g, ps, x, batch);
        let h = net.fc1.forward(g, ps, h);
        let h = g.leaky_relu(h, self.config.leaky_slope);
        let h = g.dropout(h, self.config.dropout);
        let h = net.fc2.forward(g, ps, h);
        let h = g.leaky_relu(h, self.config.leaky_slope);
        let h = g.dropout(h, self.config.dropout);
        net.out.forward(g, ps, h)
    }

    /// `L_real + L_fake` on a balanced batch: BCE of real signals against 1
    /// and fakes against 0, both conditioned on `conds`. Inputs are in
    /// normalized space. Also returns the logits, real rows first.
    pub fn discriminator_loss(
        &self,
        g: &mut Graph,
        real: &[&[f64]],
        fake: &[&[f64]],
        conds: &[ConditionCode],
    ) -> (Var, Var) {
        assert_eq!(real.len(), fake.len(), "balanced batch");
        assert_eq!(real.len(), conds.len());
        let b = real.len();
        let values: Vec<&[f64]> = real.iter().chain(fake).copied().collect();
        let all: Vec<ConditionCode> = conds.iter().chain(conds).copied().collect();
        let x = self.sequence_input(g, &values, &all);
        let logits = self.discriminator_forward(g, x, 2 * b);
        let mut targets = vec![1.0; b];
        targets.extend(std::iter::repeat_n(0.0, b));
        // Twice the mean over 2b rows is the sum of the two class means.
        let bce = g.bce_with_logits(logits, &targets);
        (g.scale(bce, 2.0), logits)
    }

    /// Non-saturating generator loss `BCE(D(G(z|y)|y), 1)`.
    pub fn generator_loss(&self, g: &mut Graph, z: &[&[f64]], conds: &[ConditionCode]) -> Var {
        let fake = self.generator_forward(g, z, conds);
        let x = self.sequence_input_var(g, fake, conds);
        let logits = self.discriminator_forward(g, x, z.len());
        g.bce_with_logits(logits, &vec![1.0; z.len()])
    }

    fn normalization(&self, c: ConditionCode) -> Result<&Normalization, GanError> {
        self.cells.get(&c.cell()).ok_or_else(|| {
            GanError::InvalidCondition(format!(
                "no normalization cell for ({}, {})",
                c.label, c.strength
            ))
        })
    }

    /// Normalized-space generator output for each request.
    fn generate_normalized(
        &self,
        requests: &[(ConditionCode, &LatentSeed)],
    ) -> Result<Vec<Vec<f64>>, GanError> {
        for (_, seed) in requests {
            if seed.z.len() != self.config.seq_len {
                return Err(GanError::Shape {
                    expected: self.config.seq_len,
                    found: seed.z.len(),
                });
            }
        }
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let z: Vec<&[f64]> = chunk.iter().map(|(_, s)| s.z.as_slice()).collect();
            let conds: Vec<ConditionCode> = chunk.iter().map(|(c, _)| *c).collect();
            let y = self.generator_forward(&mut g, &z, &conds);
            out.extend(g.value(y).rows().into_iter().map(|r| r.to_vec()));
        }
        Ok(out)
    }

    /// One synthetic record in microvolts.
    pub fn generate(
        &self,
        condition: ConditionCode,
        seed: &LatentSeed,
    ) -> Result<ErgRecord, GanError> {
        Ok(self.generate_batch(&[(condition, seed.clone())])?.remove(0))
    }

    /// Same results as calling [`Self::generate`] per request.
    pub fn generate_batch(
        &self,
        requests: &[(ConditionCode, LatentSeed)],
    ) -> Result<Vec<ErgRecord>, GanError> {
        if self.config.seq_len != SIGNAL_LEN {
            return Err(GanError::InvalidConfig(format!(
                "records need {SIGNAL_LEN} samples; this model generates {}",
                self.config.seq_len
            )));
        }
        let norms = requests
            .iter()
            .map(|(c, _)| self.normalization(*c).copied())
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<(ConditionCode, &LatentSeed)> =
            requests.iter().map(|(c, s)| (*c, s)).collect();
        let ys = self.generate_normalized(&refs)?;
        ys.into_iter()
            .zip(requests)
            .zip(norms)
            .map(|((y, (c, s)), n)| {
                let samples = n.invert_all(&y);
                ErgRecord::new(
                    samples,
                    c.label,
                    c.strength,
                    format!("syn-{:016x}", s.rng_seed),
                    Eye::Unknown,
                    Provenance::Synthetic,
                )
                .map_err(|e| GanError::InvalidDataset(format!("generated signal rejected: {e}")))
            })
            .collect()
    }

    /// Discriminator score in `(0, 1)` for a raw signal; the signal is
    /// MinMax-normalized first, as during training.
    pub fn discriminate(&self, signal: &[f64], condition: ConditionCode) -> Result<f64, GanError> {
        Ok(self.discriminate_batch(&[(signal, condition)])?[0])
    }

    pub fn discriminate_batch(
        &self,
        inputs: &[(&[f64], ConditionCode)],
    ) -> Result<Vec<f64>, GanError> {
        let mut normalized = Vec::with_capacity(inputs.len());
        for (s, _) in inputs {
            if s.len() != self.config.seq_len {
                return Err(GanError::Shape {
                    expected: self.config.seq_len,
                    found: s.len(),
                });
            }
            let (y, _) = normalize_samples(s, NormMode::MinMax)
                .map_err(|e| GanError::InvalidDataset(format!("cannot score signal: {e}")))?;
            normalized.push(y);
        }
        let refs: Vec<(&[f64], ConditionCode)> = normalized
            .iter()
            .zip(inputs)
            .map(|(y, (_, c))| (y.as_slice(), *c))
            .collect();
        Ok(self.score_normalized(&refs))
    }

    fn score_normalized(&self, inputs: &[(&[f64], ConditionCode)]) -> Vec<f64> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let values: Vec<&[f64]> = chunk.iter().map(|(v, _)| *v).collect();
            let conds: Vec<ConditionCode> = chunk.iter().map(|(_, c)| *c).collect();
            let x = self.sequence_input(&mut g, &values, &conds);
            let logits = self.discriminator_forward(&mut g, x, values.len());
            out.extend(g.value(logits).iter().map(|&z| squash(z)));
        }
        out
    }

    fn meta(&self) -> Meta {
        Meta {
            config: self.config.clone(),
            epoch: self.epoch,
            curves: self.curves.clone(),
            cells: self
                .cells
                .iter()
                .map(|(&(label, strength), n)| CellNorm {
                    label,
                    strength,
                    offset: n.offset,
                    scale: n.scale,
                })
                .collect(),
            rng_seed: derive_seed(self.config.seed, "gan.train"),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            generator_steps: self.gen_opt.step,
            discriminator_steps: self.disc_opt.step,
            training_manifest: self.training_manifest.clone(),
            selection: self.selection.clone(),
        }
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::to_string(&self.meta()).expect("metadata serializes");
        let mut c = Container::new(CHECKPOINT_TAG, meta);
        c.push_params("params", &self.params);
        c.push_adam("adam.gen", &self.gen_opt);
        c.push_adam("adam.disc", &self.disc_opt);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, GanError> {
        if c.tag != CHECKPOINT_TAG {
            return Err(ContainerError::TagMismatch {
                expected: CHECKPOINT_TAG.into(),
                found: c.tag.clone(),
            }
            .into());
        }
        let meta: Meta = serde_json::from_str(&c.metadata)?;
        let mut ck = Self::init(&meta.config)?;
        c.restore_params("params", &mut ck.params)?;
        c.restore_adam("adam.gen", &mut ck.gen_opt)?;
        c.restore_adam("adam.disc", &mut ck.disc_opt)?;
        ck.gen_opt.step = meta.generator_steps;
        ck.disc_opt.step = meta.discriminator_steps;
        if meta.curves.len() != meta.epoch {
            return Err(ContainerError::Malformed(
                "loss curves do not match the epoch counter".into(),
            )
            .into());
        }
        ck.epoch = meta.epoch;
        ck.curves = meta.curves;
        ck.cells = meta
            .cells
            .into_iter()
            .map(|n| {
                (
                    (n.label, n.strength),
                    Normalization {
                        offset: n.offset,
                        scale: n.scale,
                        degenerate: false,
                    },
                )
            })
            .collect();
        let pos: u128 = meta
            .rng_word_pos
            .parse()
            .map_err(|_| ContainerError::Malformed("bad rng position".into()))?;
        ck.rng = ChaCha8Rng::seed_from_u64(meta.rng_seed);
        ck.rng.set_word_pos(pos);
        ck.training_manifest = meta.training_manifest;
        ck.selection = meta.selection;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), GanError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, GanError> {
        Self::from_container(&Container::load(path, CHECKPOINT_TAG)?)
    }
}

const INFERENCE_CHUNK: usize = 64;

/// Sigmoid kept strictly inside `(0, 1)`.
fn squash(z: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    p.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Normalized training examples with their conditions.
struct Prepared {
    signals: Vec<Vec<f64>>,
    conds: Vec<ConditionCode>,
}

fn prepare(
    train: &Dataset,
    seq_len: usize,
) -> Result<(Prepared, BTreeMap<Cell, Normalization>), GanError> {
    if train.is_empty() {
        return Err(GanError::InvalidDataset("training set is empty".into()));
    }
    if seq_len != SIGNAL_LEN {
        return Err(GanError::InvalidConfig(format!(
            "training needs seq_len {SIGNAL_LEN}"
        )));
    }
    let manifest = train.manifest();
    for s in FlashStrength::all() {
        let counts = Label::ALL.map(|l| manifest.get(l, s));
        if counts.iter().any(|&n| n > 0) && counts.contains(&0) {
            let missing = Label::ALL[counts.iter().position(|&n| n == 0).expect("a zero")];
            return Err(GanError::InvalidDataset(format!(
                "condition cell ({missing}, {s}) has no records while strength {s} is present"
            )));
        }
    }
    let mut sums: BTreeMap<Cell, (f64, f64, usize)> = BTreeMap::new();
    let mut prepared = Prepared {
        signals: Vec::with_capacity(train.len()),
        conds: Vec::with_capacity(train.len()),
    };
    for r in &train.records {
        let (y, n) = normalize_samples(r.samples(), NormMode::MinMax)
            .map_err(|e| GanError::InvalidDataset(format!("record rejected: {e}")))?;
        let e = sums.entry(r.cell()).or_insert((0.0, 0.0, 0));
        e.0 += n.offset;
        e.1 += n.scale;
        e.2 += 1;
        prepared.signals.push(y);
        prepared.conds.push(ConditionCode::new(r.label, r.strength));
    }
    let cells = sums
        .into_iter()
        .map(|(cell, (o, s, n))| {
            let n = n as f64;
            (
                cell,
                Normalization {
                    offset: o / n,
                    scale: s / n,
                    degenerate: false,
                },
            )
        })
        .collect();
    Ok((prepared, cells))
}

/// Per-cell held-back indices; every cell keeps at least one training record.
fn holdback(conds: &[ConditionCode], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by: BTreeMap<ConditionCode, Vec<usize>> = BTreeMap::new();
    for (i, c) in conds.iter().enumerate() {
        by.entry(*c).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (_, mut idx) in by {
        idx.shuffle(&mut rng);
        let k = ((fraction * idx.len() as f64).floor() as usize).min(idx.len() - 1);
        held.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

/// Trains on `train` and returns the checkpoint with the smallest held-back
/// accuracy gap `|acc − 0.5|` among the cadence checkpoints and the final
/// epoch, the latest on ties.
pub fn train_gan(train: &Dataset, config: &GanConfig) -> Result<GanCheckpoint, GanError> {
    train_gan_with(train, config, |_| {})
}

/// As [`train_gan`], calling `on_checkpoint` every `checkpoint_every`
/// epochs and after the final epoch.
pub fn train_gan_with(
    train: &Dataset,
    config: &GanConfig,
    mut on_checkpoint: impl FnMut(&GanCheckpoint),
) -> Result<GanCheckpoint, GanError> {
    config.validate()?;
    let (data, cells) = prepare(train, config.seq_len)?;
    let mut ck = GanCheckpoint::init(config)?;
    ck.cells = cells;
    ck.training_manifest = train.records.iter().map(record_hash).collect();
    let (train_idx, held_idx) = holdback(
        &data.conds,
        config.holdback_fraction,
        derive_seed(config.seed, "gan.holdback"),
    );
    let held: Vec<(&[f64], ConditionCode)> = held_idx
        .iter()
        .map(|&i| (data.signals[i].as_slice(), data.conds[i]))
        .collect();
    let held_z: Vec<LatentSeed> = (0..held.len())
        .map(|i| {
            LatentSeed::with_len(
                derive_seed(config.seed, &format!("gan.select.{i}")),
                config.seq_len,
            )
        })
        .collect();

    let mut best: Option<(f64, GanCheckpoint)> = None;
    let mut last: Option<GanCheckpoint> = None;
    let mut order = train_idx.clone();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut ck.rng);
        let mut sums = [0.0; 4];
        let (mut n_batches, mut n_real, mut n_fake) = (0usize, 0usize, 0usize);
        for batch in order.chunks(config.batch) {
            let stats = train_step(&mut ck, &data, batch);
            let Some((d_loss, g_loss, real_ok, fake_ok)) = stats else {
                return Err(GanError::Diverged {
                    epoch,
                    last_checkpoint: last.map(Box::new),
                });
            };
            sums[0] += g_loss;
            sums[1] += d_loss;
            sums[2] += real_ok as f64;
            sums[3] += fake_ok as f64;
            n_batches += 1;
            n_real += batch.len();
            n_fake += batch.len();
        }
        ck.epoch = epoch;
        ck.curves.g_loss.push(sums[0] / n_batches as f64);
        ck.curves.d_loss.push(sums[1] / n_batches as f64);
        ck.curves.d_acc_real.push(sums[2] / n_real as f64);
        ck.curves.d_acc_fake.push(sums[3] / n_fake as f64);
        log::debug!(
            "gan epoch {epoch}: g {:.4} d {:.4} acc real {:.3} fake {:.3}",
            ck.curves.g_loss[epoch - 1],
            ck.curves.d_loss[epoch - 1],
            ck.curves.d_acc_real[epoch - 1],
            ck.curves.d_acc_fake[epoch - 1]
        );
        if epoch % config.checkpoint_every == 0 || epoch == config.epochs {
            let accuracy = if held.is_empty() {
                0.5 * (ck.curves.d_acc_real[epoch - 1] + ck.curves.d_acc_fake[epoch - 1])
            } else {
                heldback_accuracy(&ck, &held, &held_z)
            };
            ck.selection.push(Selection { epoch, accuracy });
            log::info!("gan checkpoint at epoch {epoch}: held-back D accuracy {accuracy:.3}");
            on_checkpoint(&ck);
            let gap = (accuracy - 0.5).abs();
            if best.as_ref().is_none_or(|(g, _)| gap <= *g) {
                best = Some((gap, ck.clone()));
            }
            last = Some(ck.clone());
        }
    }
    match best {
        Some((_, mut chosen)) => {
            // Carry the full selection trace on the returned checkpoint.
            chosen.selection = ck.selection.clone();
            chosen.curves.truncate(chosen.epoch);
            Ok(chosen)
        }
        None => Ok(ck),
    }
}

/// Discriminator accuracy on held-back real signals against as many fakes.
fn heldback_accuracy(
    ck: &GanCheckpoint,
    held: &[(&[f64], ConditionCode)],
    z: &[LatentSeed],
) -> f64 {
    let requests: Vec<(ConditionCode, &LatentSeed)> =
        held.iter().zip(z).map(|((_, c), s)| (*c, s)).collect();
    let fakes = ck
        .generate_normalized(&requests)
        .expect("latent lengths match");
    let real_scores = ck.score_normalized(held);
    let fake_inputs: Vec<(&[f64], ConditionCode)> = fakes
        .iter()
        .zip(held)
        .map(|(f, (_, c))| (f.as_slice(), *c))
        .collect();
    let fake_scores = ck.score_normalized(&fake_inputs);
    let correct = real_scores.iter().filter(|&&p| p > 0.5).count()
        + fake_scores.iter().filter(|&&p| p < 0.5).count();
    correct as f64 / (2 * held.len()) as f64
}

/// One discriminator step then one generator step on the same fakes.
/// Returns `(d_loss, g_loss, real_correct, fake_correct)`, or `None` on a
/// non-finite loss or gradient.
fn train_step(
    ck: &mut GanCheckpoint,
    data: &Prepared,
    batch: &[usize],
) -> Option<(f64, f64, usize, usize)> {
    let b = batch.len();
    let t = ck.config.seq_len;
    let z: Vec<Vec<f64>> = (0..b)
        .map(|_| (0..t).map(|_| ck.rng.sample(StandardNormal)).collect())
        .collect();
    let zr: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
    let conds: Vec<ConditionCode> = batch.iter().map(|&i| data.conds[i]).collect();
    let real: Vec<&[f64]> = batch.iter().map(|&i| data.signals[i].as_slice()).collect();

    // The generator graph is kept so the G step reuses this forward pass.
    let mut gg = Graph::training(ck.rng.next_u64());
    gg.freeze(ck.disc_ids.iter().copied());
    let fake_var = ck.generator_forward(&mut gg, &zr, &conds);
    let fake: Vec<Vec<f64>> = gg
        .value(fake_var)
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    let fake_refs: Vec<&[f64]> = fake.iter().map(Vec::as_slice).collect();

    let mut gd = Graph::training(ck.rng.next_u64());
    let (d_loss_var, logits) = ck.discriminator_loss(&mut gd, &real, &fake_refs, &conds);
    let lv = gd.value(logits);
    let real_ok = (0..b).filter(|&i| lv[[i, 0]] > 0.0).count();
    let fake_ok = (b..2 * b).filter(|&i| lv[[i, 0]] < 0.0).count();
    let d_loss = gd.scalar(d_loss_var);
    let d_grads = gd.backward(d_loss_var);
    if !d_loss.is_finite() || !d_grads.all_finite() {
        return None;
    }
    ck.disc_opt.update(&mut ck.params, &d_grads);

    let xg = ck.sequence_input_var(&mut gg, fake_var, &conds);
    let g_logits = ck.discriminator_forward(&mut gg, xg, b);
    let g_loss_var = gg.bce_with_logits(g_logits, &vec![1.0; b]);
    let g_loss = gg.scalar(g_loss_var);
    let g_grads = gg.backward(g_loss_var);
    if !g_loss.is_finite() || !g_grads.all_finite() {
        return None;
    }
    ck.gen_opt.update(&mut ck.params, &g_grads);
    Some((d_loss, g_loss, real_ok, fake_ok))
}

/// Anything that assigns a class label to records.
pub trait Probe {
    fn predict_labels(&self, records: &[ErgRecord]) -> Vec<Label>;
}

/// Answers the same label for every record.
#[derive(Debug, Clone, Copy)]
pub struct ConstantProbe(pub Label);

impl Probe for ConstantProbe {
    fn predict_labels(&self, records: &[ErgRecord]) -> Vec<Label> {
        vec![self.0; records.len()]
    }
}

/// Nearest class-mean waveform at the record's flash strength.
#[derive(Debug, Clone)]
pub struct CentroidProbe {
    centroids: BTreeMap<Cell, Vec<f64>>,
}

impl CentroidProbe {
    pub fn fit(real: &Dataset) -> Self {
        let mut sums: BTreeMap<Cell, (Vec<f64>, usize)> = BTreeMap::new();
        for r in &real.records {
            let e = sums
                .entry(r.cell())
                .or_insert_with(|| (vec![0.0; r.samples().len()], 0));
            for (a, v) in e.0.iter_mut().zip(r.samples()) {
                *a += v;
            }
            e.1 += 1;
        }
        let centroids = sums
            .into_iter()
            .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        Self { centroids }
    }
}

impl Probe for CentroidProbe {
    fn predict_labels(&self, records: &[ErgRecord]) -> Vec<Label> {
        records
            .iter()
            .map(|r| {
                let dist = |l: Label| {
                    self.centroids
                        .get(&(l, r.strength))
                        .map_or(f64::INFINITY, |c| {
                            c.iter()
                                .zip(r.samples())
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>()
                        })
                };
                if dist(Label::Asd) <= dist(Label::Control) {
                    Label::Asd
                } else {
                    Label::Control
                }
            })
            .collect()
    }
}

/// Fraction of probe labels agreeing with the requested label.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityReport {
    pub per_cell: BTreeMap<Cell, f64>,
    pub overall: f64,
}

/// Generates `n` signals for each of `conditions` and scores them with
/// `probe`.
pub fn condition_fidelity(
    checkpoint: &GanCheckpoint,
    probe: &dyn Probe,
    conditions: &[ConditionCode],
    n: usize,
    seed: u64,
) -> Result<FidelityReport, GanError> {
    let mut per_cell = BTreeMap::new();
    let (mut hits, mut total) = (0usize, 0usize);
    for &c in conditions {
        let requests: Vec<(ConditionCode, LatentSeed)> = (0..n)
            .map(|i| {
                let s = derive_seed(
                    seed,
                    &format!("fidelity.{}.{}.{i}", c.label, c.strength.index()),
                );
                (c, LatentSeed::from_seed(s))
            })
            .collect();
        let records = checkpoint.generate_batch(&requests)?;
        let labels = probe.predict_labels(&records);
        let ok = labels.iter().filter(|&&l| l == c.label).count();
        hits += ok;
        total += n;
        per_cell.insert(c.cell(), if n == 0 { 0.0 } else { ok as f64 / n as f64 });
    }
    Ok(FidelityReport {
        per_cell,
        overall: if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        },
    })
}

/// Conditions present in a checkpoint's training data.
pub fn trained_conditions(checkpoint: &GanCheckpoint) -> Vec<ConditionCode> {
    checkpoint
        .cells
        .keys()
        .map(|&(l, s)| ConditionCode::new(l, s))
        .collect()
}
