//! Patch-embedding transformer over 3-channel scalograms.
//!
//! The resized `S × S × 3` scalogram is cut into `(S/P)²` patches, each
//! flattened in (row, column, channel) order and linearly embedded. A
//! learned class token is prepended at position 0 and is the only token
//! the head reads.

use std::path::Path;

use erg_core::wavelet::build_scalogram;
use erg_core::{Dataset, ErgRecord, Label, ScaleGrid, Scalogram, ScalogramCache};
use erg_nn::layers::{Encoder, Linear};
use erg_nn::{Container, ContainerError, Graph, Matrix, ParamId, ParamSet, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    fit, labels_of, predict_proba, ClassifierError, History, Network, TrainConfig,
};

pub const CHECKPOINT_TAG: &str = "vit";
const CHANNELS: usize = Scalogram::CHANNELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub side: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    pub dropout: f64,
    /// Learned positional embeddings; off only for architecture checks.
    pub positional: bool,
    /// Fixes every attention row to uniform weights.
    pub uniform_attention: bool,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            side: 64,
            patch: 8,
            width: 64,
            heads: 4,
            layers: 3,
            ff_width: 128,
            dropout: 0.1,
            positional: true,
            uniform_attention: false,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.patch == 0 || self.side == 0 || self.side % self.patch != 0 {
            return Err(ClassifierError::InvalidConfig(format!(
                "patch side {} does not divide image side {}",
                self.patch, self.side
            )));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
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
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.side / self.patch).pow(2)
    }

    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub patch: PatchConfig,
    pub grid: ScaleGrid,
    pub train: TrainConfig,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            patch: PatchConfig::default(),
            grid: ScaleGrid::default(),
            train: TrainConfig {
                max_epochs: 150,
                ..TrainConfig::default()
            },
        }
    }
}

/// Splits a `side × side × channels` image stored row-major with channels
/// innermost (HWC) into row-major patches, each flattened in HWC order.
pub fn patchify(
    hwc: &[f64],
    side: usize,
    channels: usize,
    patch: usize,
) -> Result<Vec<Vec<f64>>, ClassifierError> {
    if patch == 0 || side % patch != 0 {
        return Err(ClassifierError::InvalidConfig(format!(
            "patch side {patch} does not divide image side {side}"
        )));
    }
    if hwc.len() != side * side * channels {
        return Err(ClassifierError::Shape {
            expected: side * side * channels,
            found: hwc.len(),
        });
    }
    let n = side / patch;
    let mut tokens = Vec::with_capacity(n * n);
    for pr in 0..n {
        for pc in 0..n {
            let mut t = Vec::with_capacity(patch * patch * channels);
            for y in pr * patch..(pr + 1) * patch {
                let start = (y * side + pc * patch) * channels;
                t.extend_from_slice(&hwc[start..start + patch * channels]);
            }
            tokens.push(t);
        }
    }
    Ok(tokens)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    tokens: &[Vec<f64>],
    side: usize,
    channels: usize,
    patch: usize,
) -> Result<Vec<f64>, ClassifierError> {
    if patch == 0 || side % patch != 0 {
        return Err(ClassifierError::InvalidConfig(format!(
            "patch side {patch} does not divide image side {side}"
        )));
    }
    let n = side / patch;
    if tokens.len() != n * n || tokens.iter().any(|t| t.len() != patch * patch * channels) {
        return Err(ClassifierError::Shape {
            expected: n * n,
            found: tokens.len(),
        });
    }
    let mut hwc = vec![0.0; side * side * channels];
    for (k, t) in tokens.iter().enumerate() {
        let (pr, pc) = (k / n, k % n);
        for (dy, row) in t.chunks(patch * channels).enumerate() {
            let start = ((pr * patch + dy) * side + pc * patch) * channels;
            hwc[start..start + patch * channels].copy_from_slice(row);
        }
    }
    Ok(hwc)
}

/// Channel-planar scalogram data reordered to HWC.
pub fn scalogram_hwc(s: &Scalogram) -> Vec<f64> {
    let mut out = Vec::with_capacity(s.data.len());
    for y in 0..s.height {
        for x in 0..s.width {
            for c in 0..CHANNELS {
                out.push(s.get(c, y, x));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct VitNet {
    patches: usize,
    patch_dim: usize,
    embed: Linear,
    cls: ParamId,
    pos: Option<ParamId>,
    encoder: Encoder,
    head: Linear,
    uniform_attention: bool,
}

impl Network for VitNet {
    /// Each input is the concatenation of a record's patch tokens.
    fn logits(&self, g: &mut Graph, ps: &ParamSet, inputs: &[&[f64]]) -> Var {
        let n = self.patches;
        let mut m = Matrix::zeros((inputs.len() * n, self.patch_dim));
        for (b, x) in inputs.iter().enumerate() {
            for (k, tok) in x.chunks(self.patch_dim).enumerate() {
                for (j, &v) in tok.iter().enumerate() {
                    m[[b * n + k, j]] = v;
                }
            }
        }
        let x = g.input(m);
        let h = self.embed.forward(g, ps, x);
        let cls = g.param(ps, self.cls);
        let mut h = g.block_prepend(h, cls, n);
        if let Some(pos) = self.pos {
            let table = g.param(ps, pos);
            h = g.block_add(h, table);
        }
        let h = self
            .encoder
            .forward(g, ps, h, n + 1, self.uniform_attention);
        let first = g.block_take(h, n + 1, 0);
        self.head.forward(g, ps, first)
    }
}

#[derive(Debug, Clone)]
pub struct VitModel {
    pub config: VitConfig,
    pub net: VitNet,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: VitConfig,
}

impl VitModel {
    pub fn init(config: &VitConfig, seed: u64) -> Result<Self, ClassifierError> {
        let pc = &config.patch;
        pc.validate()?;
        config.train.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let embed = Linear::new(&mut ps, "vit.embed", pc.patch_dim(), pc.width, &mut rng);
        let cls = ps.add_uniform("vit.cls", 1, pc.width, 0.02, &mut rng);
        let pos = pc
            .positional
            .then(|| ps.add_uniform("vit.pos", pc.tokens(), pc.width, 0.02, &mut rng));
        let encoder = Encoder::new(
            &mut ps,
            "vit.encoder",
            pc.width,
            pc.heads,
            pc.layers,
            pc.ff_width,
            pc.dropout,
            &mut rng,
        );
        let head = Linear::new(&mut ps, "vit.head", pc.width, 2, &mut rng);
        Ok(Self {
            config: config.clone(),
            net: VitNet {
                patches: pc.patches(),
                patch_dim: pc.patch_dim(),
                embed,
                cls,
                pos,
                encoder,
                head,
                uniform_attention: pc.uniform_attention,
            },
            params: ps,
        })
    }

    /// Resized scalogram of one record, from the cache when given.
    pub fn scalogram(
        &self,
        r: &ErgRecord,
        cache: Option<&ScalogramCache>,
    ) -> Result<Scalogram, ClassifierError> {
        let side = self.config.patch.side;
        Ok(match cache {
            Some(c) => c.get_or_build(r, &self.config.grid, side)?.0,
            None => build_scalogram(r.samples(), &self.config.grid)?.resize(side),
        })
    }

    /// Concatenated patch tokens per record.
    pub fn features(
        &self,
        ds: &Dataset,
        cache: Option<&ScalogramCache>,
    ) -> Result<Vec<Vec<f64>>, ClassifierError> {
        let pc = &self.config.patch;
        ds.records
            .iter()
            .map(|r| {
                let s = self.scalogram(r, cache)?;
                Ok(patchify(&scalogram_hwc(&s), pc.side, CHANNELS, pc.patch)?.concat())
            })
            .collect()
    }

    /// Probabilities `[P(ASD), P(Control)]` from precomputed features.
    pub fn forward_features(
        &self,
        features: &[Vec<f64>],
    ) -> Result<Vec<[f64; 2]>, ClassifierError> {
        let expected = self.config.patch.patches() * self.config.patch.patch_dim();
        if let Some(f) = features.iter().find(|f| f.len() != expected) {
            return Err(ClassifierError::Shape {
                expected,
                found: f.len(),
            });
        }
        Ok(predict_proba(&self.net, &self.params, features))
    }

    pub fn predict(
        &self,
        ds: &Dataset,
        cache: Option<&ScalogramCache>,
    ) -> Result<Vec<f64>, ClassifierError> {
        let f = self.features(ds, cache)?;
        Ok(self
            .forward_features(&f)?
            .into_iter()
            .map(|p| p[Label::Asd.index()])
            .collect())
    }

    pub fn fit(
        train: &Dataset,
        val: &Dataset,
        config: &VitConfig,
        seed: u64,
        cache: Option<&ScalogramCache>,
    ) -> Result<(Self, History), ClassifierError> {
        let mut model = Self::init(config, seed)?;
        let xs = model.features(train, cache)?;
        let vx = model.features(val, cache)?;
        let (ys, vy) = (labels_of(train), labels_of(val));
        let history = fit(
            &model.net,
            &mut model.params,
            (&xs, &ys),
            (&vx, &vy),
            &config.train,
            erg_core::derive_seed(seed, "vit.train"),
        )?;
        Ok((model, history))
    }

    pub fn to_container(&self) -> Container {
        let meta = Meta {
            config: self.config.clone(),
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
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        Self::from_container(&Container::load(path, CHECKPOINT_TAG)?)
    }
}

/// One fold per `(train, validation)` pair.
pub fn vit_train(
    folds: &[(Dataset, Dataset)],
    config: &VitConfig,
    cache: Option<&ScalogramCache>,
) -> Result<Vec<(VitModel, History)>, ClassifierError> {
    folds
        .iter()
        .enumerate()
        .map(|(k, (train, val))| {
            VitModel::fit(
                train,
                val,
                config,
                erg_core::derive_seed(config.train.seed, &format!("vit.fold{k}")),
                cache,
            )
        })
        .collect()
}
