use std::path::{Path, PathBuf};

use anyhow::Context;
use erg_core::{FilterSpec, OracleParams, SplitPlan};
use erg_eval::{Augmentation, EvalOptions, Subset};
use erg_models::{ClassifierSpec, GanConfig, TstConfig, VitConfig};
use serde::{Deserialize, Serialize};

pub const OUTPUT_ROOT_ENV: &str = "ERGSYN_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Real dataset CSV. When unset, commands read the file written by
    /// `simulate` inside the run directory.
    pub path: Option<PathBuf>,
    pub n_per_cell: usize,
    pub oracle: OracleParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            n_per_cell: 30,
            oracle: OracleParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub n_per_cell: usize,
    pub filter: Option<FilterSpec>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_per_cell: 100,
            filter: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Tst,
    Vit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub models: Vec<ModelKind>,
    pub tst: TstConfig,
    pub vit: VitConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            models: vec![ModelKind::Tst, ModelKind::Vit],
            tst: TstConfig::default(),
            vit: VitConfig::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn specs(&self) -> Vec<ClassifierSpec> {
        self.models
            .iter()
            .map(|m| match m {
                ModelKind::Tst => ClassifierSpec::Tst(self.tst.clone()),
                ModelKind::Vit => ClassifierSpec::Vit(self.vit.clone()),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub augmentation: Augmentation,
    pub subject_grouping: bool,
    pub truncate_train_per_cell: Option<usize>,
    /// Evaluate each flash strength separately as well as pooled.
    pub per_strength: bool,
    pub threshold: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        let t = EvalOptions::default();
        Self {
            augmentation: t.augmentation,
            subject_grouping: t.subject_grouping,
            truncate_train_per_cell: t.truncate_train_per_cell,
            per_strength: true,
            threshold: t.threshold,
        }
    }
}

impl EvaluateConfig {
    pub fn options(&self, seed: u64, cache_dir: PathBuf) -> EvalOptions {
        EvalOptions {
            augmentation: self.augmentation,
            subject_grouping: self.subject_grouping,
            truncate_train_per_cell: self.truncate_train_per_cell,
            subsets: if self.per_strength {
                Subset::table_rows()
            } else {
                vec![Subset::All]
            },
            threshold: self.threshold,
            seed,
            cache_dir: Some(cache_dir),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Subdirectory of `output_dir` for this run; `seed-<seed>` when unset.
    pub run_name: Option<String>,
    pub data: DataConfig,
    pub split: SplitPlan,
    pub gan: GanConfig,
    pub generate: GenerateConfig,
    pub classifiers: ClassifierConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            run_name: None,
            data: DataConfig::default(),
            split: SplitPlan::default(),
            gan: GanConfig::default(),
            generate: GenerateConfig::default(),
            classifiers: ClassifierConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `output_dir` unless the environment overrides it.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        let name = self
            .run_name
            .clone()
            .unwrap_or_else(|| format!("seed-{}", self.seed));
        self.output_root().join(name)
    }

    /// Propagates the global seed into every component that carries one.
    pub fn seeded(mut self) -> Self {
        let s = self.seed;
        self.split.seed = erg_core::derive_seed(s, "split");
        self.gan.seed = erg_core::derive_seed(s, "gan");
        self.classifiers.tst.train.seed = erg_core::derive_seed(s, "tst");
        self.classifiers.vit.train.seed = erg_core::derive_seed(s, "vit");
        self
    }
}
