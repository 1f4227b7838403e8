//! Evaluation report: per-fold metrics per (model, strength subset,
//! training variant), their means, and two renderings.

use std::collections::BTreeMap;
use std::fmt::{self, Write};

use erg_core::FlashStrength;
use serde::{Deserialize, Serialize};

use crate::metrics::Metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    Original,
    Augmented,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Original, Variant::Augmented];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Original => "Original",
            Variant::Augmented => "Original+Synthetic",
        })
    }
}

/// A report row: one flash strength, or all of them pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subset {
    Strength(FlashStrength),
    All,
}

impl Subset {
    /// The nine strengths followed by `All`.
    pub fn table_rows() -> Vec<Subset> {
        FlashStrength::all()
            .map(Subset::Strength)
            .chain([Subset::All])
            .collect()
    }

    pub fn contains(&self, s: FlashStrength) -> bool {
        match self {
            Subset::Strength(x) => *x == s,
            Subset::All => true,
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subset::Strength(s) => write!(f, "{s}"),
            Subset::All => f.write_str("All"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub subset: Subset,
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub folds: Vec<Metrics>,
    /// Mean of each metric over the folds where it is defined.
    pub mean: Metrics,
    /// Folds left out of each metric's mean because it was undefined there.
    pub excluded: [usize; 5],
}

impl CellResult {
    pub fn from_folds(folds: Vec<Metrics>) -> Self {
        let mut mean = [None; 5];
        let mut excluded = [0; 5];
        for m in 0..5 {
            let mut vals: Vec<f64> = folds.iter().filter_map(|f| f.values()[m]).collect();
            excluded[m] = folds.len() - vals.len();
            // Sorted summation keeps the mean independent of fold order.
            vals.sort_by(f64::total_cmp);
            if !vals.is_empty() {
                mean[m] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        Self {
            folds,
            mean: Metrics::from_values(mean),
            excluded,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(with = "pairs")]
    pub cells: BTreeMap<CellKey, CellResult>,
}

// JSON object keys must be strings, so cells travel as a list of pairs.
mod pairs {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        m: &BTreeMap<CellKey, CellResult>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<CellKey, CellResult>, D::Error> {
        Ok(Vec::<(CellKey, CellResult)>::deserialize(d)?
            .into_iter()
            .collect())
    }
}

fn kv(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

fn cellfmt(v: Option<f64>, excluded: usize) -> String {
    match v {
        None => "—".to_string(),
        Some(x) if excluded > 0 => format!("{x:.3}*"),
        Some(x) => format!("{x:.3}"),
    }
}

impl EvalReport {
    pub fn insert(&mut self, key: CellKey, folds: Vec<Metrics>) {
        self.cells.insert(key, CellResult::from_folds(folds));
    }

    pub fn get(&self, model: &str, subset: Subset, variant: Variant) -> Option<&CellResult> {
        self.cells.get(&CellKey {
            model: model.to_string(),
            subset,
            variant,
        })
    }

    pub fn models(&self) -> Vec<String> {
        let mut m: Vec<String> = self.cells.keys().map(|k| k.model.clone()).collect();
        m.dedup();
        m
    }

    /// One `fold` line per fold and one `mean` line per cell, space-separated
    /// `key=value` pairs; undefined metrics are written as `undefined`.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (k, c) in &self.cells {
            let head = format!(
                "model={} subset={} variant={}",
                k.model, k.subset, k.variant
            );
            for (i, f) in c.folds.iter().enumerate() {
                write!(out, "fold {head} fold={i}").unwrap();
                for (name, v) in Metrics::NAMES.iter().zip(f.values()) {
                    write!(out, " {name}={}", kv(v)).unwrap();
                }
                out.push('\n');
            }
            write!(out, "mean {head} folds={}", c.folds.len()).unwrap();
            for ((name, v), ex) in Metrics::NAMES.iter().zip(c.mean.values()).zip(c.excluded) {
                write!(out, " {name}={} {name}_excluded={ex}", kv(v)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// One table per model: strength rows, metric columns for each variant.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let mut footnote = false;
        for model in self.models() {
            writeln!(out, "### {model}\n").unwrap();
            let mut header = "| Strength |".to_string();
            let mut rule = "|---|".to_string();
            for v in Variant::ALL {
                for name in Metrics::NAMES {
                    write!(header, " {name} ({v}) |").unwrap();
                    rule.push_str("---|");
                }
            }
            writeln!(out, "{header}\n{rule}").unwrap();
            let subsets: Vec<Subset> = {
                let mut s: Vec<Subset> = self
                    .cells
                    .keys()
                    .filter(|k| k.model == model)
                    .map(|k| k.subset)
                    .collect();
                s.dedup();
                s
            };
            for subset in subsets {
                let mut row = format!("| {subset} |");
                for v in Variant::ALL {
                    match self.get(&model, subset, v) {
                        Some(c) => {
                            for (m, ex) in c.mean.values().into_iter().zip(c.excluded) {
                                footnote |= ex > 0 && m.is_some();
                                write!(row, " {} |", cellfmt(m, ex)).unwrap();
                            }
                        }
                        None => row.push_str(&" — |".repeat(5)),
                    }
                }
                writeln!(out, "{row}").unwrap();
            }
            out.push('\n');
        }
        if footnote {
            out.push_str("\\* mean over the folds where the metric is defined; undefined folds are excluded.\n");
        }
        out
    }
}
