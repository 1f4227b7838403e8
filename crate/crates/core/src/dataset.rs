//! Datasets of waveform records: CSV interchange, per-cell manifests,
//! stratified hold-out and cross-validation splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::signal::{ErgRecord, Eye, FlashStrength, Label, Provenance, SIGNAL_LEN};

pub type Cell = (Label, FlashStrength);

/// Per-strength (ASD, Control) record counts of the clinical dataset,
/// brightest strength first. Totals 509 ASD, 482 Control.
pub const COHORT_COUNTS: [(usize, usize); 9] = [
    (58, 59),
    (60, 51),
    (56, 51),
    (56, 57),
    (58, 56),
    (60, 55),
    (53, 50),
    (56, 50),
    (52, 53),
];

const META_COLUMNS: [&str; 5] = [
    "subject_id",
    "eye",
    "label",
    "strength_log_cd",
    "provenance",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("invalid split plan: {0}")]
    InvalidPlan(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Per-cell record counts, every catalog cell present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub counts: BTreeMap<Cell, usize>,
}

impl Manifest {
    pub fn get(&self, label: Label, strength: FlashStrength) -> usize {
        self.counts.get(&(label, strength)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn label_total(&self, label: Label) -> usize {
        self.counts
            .iter()
            .filter(|((l, _), _)| *l == label)
            .map(|(_, n)| n)
            .sum()
    }

    /// The clinical dataset's distribution.
    pub fn cohort() -> Self {
        let mut counts = BTreeMap::new();
        for (s, &(asd, control)) in FlashStrength::all().zip(&COHORT_COUNTS) {
            counts.insert((Label::Asd, s), asd);
            counts.insert((Label::Control, s), control);
        }
        Self { counts }
    }
}

impl std::fmt::Display for Manifest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "strength_log_cd  td_s   ASD  CONTROL")?;
        for s in FlashStrength::all() {
            writeln!(
                f,
                "{:>15}  {:>4}  {:>4}  {:>7}",
                s.to_string(),
                s.td_s(),
                self.get(Label::Asd, s),
                self.get(Label::Control, s)
            )?;
        }
        write!(
            f,
            "{:>15}  {:>4}  {:>4}  {:>7}",
            "total",
            "",
            self.label_total(Label::Asd),
            self.label_total(Label::Control)
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<ErgRecord>,
}

impl Dataset {
    pub fn new(records: Vec<ErgRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn manifest(&self) -> Manifest {
        let mut counts: BTreeMap<Cell, usize> = BTreeMap::new();
        for l in Label::ALL {
            for s in FlashStrength::all() {
                counts.insert((l, s), 0);
            }
        }
        for r in &self.records {
            *counts.entry(r.cell()).or_default() += 1;
        }
        Manifest { counts }
    }

    pub fn provenance_counts(&self) -> BTreeMap<Provenance, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.provenance).or_default() += 1;
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }

    pub fn filter(&self, mut keep: impl FnMut(&ErgRecord) -> bool) -> Dataset {
        Dataset::new(self.records.iter().filter(|r| keep(r)).cloned().collect())
    }

    pub fn with_provenance(&self, p: Provenance) -> Dataset {
        self.filter(|r| r.provenance == p)
    }

    pub fn with_strength(&self, s: FlashStrength) -> Dataset {
        self.filter(|r| r.strength == s)
    }

    /// Keeps at most `n` records per cell, in order.
    pub fn truncate_per_cell(&self, n: usize) -> Dataset {
        let mut seen: BTreeMap<Cell, usize> = BTreeMap::new();
        self.filter(|r| {
            let c = seen.entry(r.cell()).or_default();
            *c += 1;
            *c <= n
        })
    }

    pub fn hashes(&self) -> Vec<String> {
        self.records.iter().map(record_hash).collect()
    }
}

/// Concatenation; provenance flags are kept as they are.
pub fn merge(real: &Dataset, synthetic: &Dataset) -> Dataset {
    let mut records = real.records.clone();
    records.extend_from_slice(&synthetic.records);
    Dataset::new(records)
}

/// SHA-256 over label, strength, subject, eye and the sample bit patterns,
/// hex encoded. Provenance is excluded so a relabelled copy still matches.
pub fn record_hash(r: &ErgRecord) -> String {
    let mut h = Sha256::new();
    h.update([r.label.index() as u8, r.strength.index() as u8]);
    h.update((r.subject_id.len() as u64).to_le_bytes());
    h.update(r.subject_id.as_bytes());
    h.update(r.eye.as_str().as_bytes());
    for v in r.samples() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn header() -> Vec<String> {
    META_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..SIGNAL_LEN).map(|i| format!("s{i}")))
        .collect()
}

pub fn read_csv(reader: impl Read) -> Result<Dataset, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let expected = header();
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if found != expected {
        let at = found
            .iter()
            .zip(&expected)
            .position(|(a, b)| a != b)
            .unwrap_or(found.len().min(expected.len()));
        return Err(DatasetError::Header(format!(
            "expected {} columns subject_id,eye,label,strength_log_cd,provenance,s0..s{}; mismatch at column {} ({} found)",
            expected.len(),
            SIGNAL_LEN - 1,
            at + 1,
            found.len()
        )));
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let fail = |message: String| DatasetError::Row { line, message };
        if row.len() != expected.len() {
            let got = row.len().saturating_sub(META_COLUMNS.len());
            return Err(fail(format!("expected {SIGNAL_LEN} samples, found {got}")));
        }
        let eye: Eye = row[1].parse().map_err(fail)?;
        let label: Label = row[2].parse().map_err(fail)?;
        let log_cd: f64 = row[3]
            .trim()
            .parse()
            .map_err(|_| fail(format!("bad strength {:?}", &row[3])))?;
        let strength = FlashStrength::from_log_cd(log_cd)
            .ok_or_else(|| fail(format!("unknown strength value {log_cd}")))?;
        let provenance: Provenance = row[4].parse().map_err(fail)?;
        let mut samples = Vec::with_capacity(SIGNAL_LEN);
        for (i, field) in row.iter().skip(META_COLUMNS.len()).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| fail(format!("sample s{i}: cannot parse {field:?}")))?;
            if !v.is_finite() {
                return Err(fail(format!("sample s{i} is not finite")));
            }
            samples.push(v);
        }
        let subject = row[0].to_string();
        let rec = ErgRecord::new(samples, label, strength, subject, eye, provenance)
            .map_err(|e| fail(e.to_string()))?;
        records.push(rec);
    }
    Ok(Dataset::new(records))
}

pub fn write_csv(writer: impl Write, dataset: &Dataset) -> Result<(), DatasetError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(header())?;
    for r in &dataset.records {
        let mut row = vec![
            r.subject_id.clone(),
            r.eye.as_str().to_string(),
            r.label.as_str().to_string(),
            r.strength.to_string(),
            r.provenance.as_str().to_string(),
        ];
        row.extend(r.samples().iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let f = File::open(path).map_err(io_err(path))?;
    read_csv(std::io::BufReader::new(f)).map_err(|e| match e {
        DatasetError::Row { line, message } => DatasetError::Row {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<(), DatasetError> {
    let f = File::create(path).map_err(io_err(path))?;
    write_csv(std::io::BufWriter::new(f), dataset)
}

/// Which record attributes define a stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stratify {
    pub label: bool,
    pub strength: bool,
}

impl Default for Stratify {
    fn default() -> Self {
        Self {
            label: true,
            strength: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitPlan {
    pub test_fraction: f64,
    pub folds: usize,
    pub seed: u64,
    pub stratify_by: Stratify,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            test_fraction: 0.25,
            folds: 5,
            seed: 0,
            stratify_by: Stratify::default(),
        }
    }
}

/// Record indices of a split. `folds[k]` is the validation set of fold k;
/// its training set is the rest of the pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub test: Vec<usize>,
    pub pool: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
}

impl SplitIndices {
    pub fn train(&self, k: usize) -> Vec<usize> {
        let val: BTreeSet<usize> = self.folds[k].iter().copied().collect();
        self.pool
            .iter()
            .copied()
            .filter(|i| !val.contains(i))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub test: Dataset,
    /// (train, validation) per fold.
    pub folds: Vec<(Dataset, Dataset)>,
    pub indices: SplitIndices,
}

impl Split {
    fn materialize(dataset: &Dataset, indices: SplitIndices) -> Self {
        let folds = (0..indices.folds.len())
            .map(|k| {
                (
                    dataset.subset(&indices.train(k)),
                    dataset.subset(&indices.folds[k]),
                )
            })
            .collect();
        Self {
            test: dataset.subset(&indices.test),
            folds,
            indices,
        }
    }

    pub fn pool(&self, dataset: &Dataset) -> Dataset {
        dataset.subset(&self.indices.pool)
    }
}

type Stratum = (Option<Label>, Option<FlashStrength>);

fn stratum_of(r: &ErgRecord, by: Stratify) -> Stratum {
    (
        by.label.then_some(r.label),
        by.strength.then_some(r.strength),
    )
}

fn describe(s: &Stratum) -> String {
    let label = s.0.map_or("*".to_string(), |l| l.to_string());
    let strength = s.1.map_or("*".to_string(), |s| s.to_string());
    format!("({label}, {strength})")
}

/// Record-level stratified split.
pub fn split(dataset: &Dataset, plan: &SplitPlan) -> Result<Split, DatasetError> {
    let idx = split_indices(dataset, plan, false)?;
    Ok(Split::materialize(dataset, idx))
}

/// Split keeping every subject's records on one side of every boundary.
pub fn subject_grouping(dataset: &Dataset, plan: &SplitPlan) -> Result<Split, DatasetError> {
    let idx = split_indices(dataset, plan, true)?;
    Ok(Split::materialize(dataset, idx))
}

/// Shared algorithm over indivisible units (single records, or all records
/// of one subject).
///
/// Units are grouped by the set of strata they touch. Within a group, units
/// are shuffled and moved to the test side while doing so keeps the group's
/// test count nearest `round(test_fraction · group size)`; the remaining
/// units are dealt to the fold with the fewest group records, ties broken
/// by fewest records overall, then by fold index.
pub fn split_indices(
    dataset: &Dataset,
    plan: &SplitPlan,
    by_subject: bool,
) -> Result<SplitIndices, DatasetError> {
    if !(0.0..1.0).contains(&plan.test_fraction) {
        return Err(DatasetError::InvalidPlan(format!(
            "test_fraction {} not in [0, 1)",
            plan.test_fraction
        )));
    }
    if plan.folds == 0 {
        return Err(DatasetError::InvalidPlan("folds must be at least 1".into()));
    }
    let by = plan.stratify_by;

    let mut strata: BTreeMap<Stratum, usize> = BTreeMap::new();
    for r in &dataset.records {
        *strata.entry(stratum_of(r, by)).or_default() += 1;
    }
    let small: Vec<String> = strata
        .iter()
        .filter(|(_, &n)| n < plan.folds + 1)
        .map(|(s, n)| format!("{} has {n}", describe(s)))
        .collect();
    if !small.is_empty() {
        return Err(DatasetError::InfeasibleSplit(format!(
            "strata need at least {} records: {}",
            plan.folds + 1,
            small.join(", ")
        )));
    }

    // Unit key → member records, in first-appearance order.
    let mut units: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut first_seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, r) in dataset.records.iter().enumerate() {
        let key = if by_subject {
            if r.subject_id.is_empty() {
                return Err(DatasetError::InvalidPlan(format!(
                    "record {i} has an empty subject_id"
                )));
            }
            *first_seen.entry(r.subject_id.as_str()).or_insert(i)
        } else {
            i
        };
        units.entry(key).or_default().push(i);
    }

    if by_subject {
        let limit = 1.0 - plan.test_fraction;
        let mut offenders = Vec::new();
        for members in units.values() {
            let mut per: BTreeMap<Stratum, usize> = BTreeMap::new();
            for &i in members {
                *per.entry(stratum_of(&dataset.records[i], by)).or_default() += 1;
            }
            for (s, n) in per {
                if n as f64 > limit * strata[&s] as f64 {
                    let subject = &dataset.records[members[0]].subject_id;
                    offenders.push(format!(
                        "subject {subject:?} holds {n} of {} in {}",
                        strata[&s],
                        describe(&s)
                    ));
                }
            }
        }
        if !offenders.is_empty() {
            return Err(DatasetError::InfeasibleSplit(offenders.join(", ")));
        }
    }

    let mut groups: BTreeMap<Vec<Stratum>, Vec<Vec<usize>>> = BTreeMap::new();
    for members in units.into_values() {
        let sig: BTreeSet<Stratum> = members
            .iter()
            .map(|&i| stratum_of(&dataset.records[i], by))
            .collect();
        groups
            .entry(sig.into_iter().collect())
            .or_default()
            .push(members);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut test = Vec::new();
    let mut pool = Vec::new();
    let mut folds = vec![Vec::new(); plan.folds];
    for (_, mut members) in groups {
        members.shuffle(&mut rng);
        let size: usize = members.iter().map(Vec::len).sum();
        let target = (plan.test_fraction * size as f64).round() as usize;
        let mut in_test = 0usize;
        let mut fold_counts = vec![0usize; plan.folds];
        for unit in members {
            let n = unit.len();
            if 2 * in_test + n <= 2 * target {
                in_test += n;
                test.extend_from_slice(&unit);
                continue;
            }
            let k = (0..plan.folds)
                .min_by_key(|&k| (fold_counts[k], folds[k].len(), k))
                .expect("at least one fold");
            fold_counts[k] += n;
            folds[k].extend_from_slice(&unit);
            pool.extend_from_slice(&unit);
        }
    }
    test.sort_unstable();
    pool.sort_unstable();
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(SplitIndices { test, pool, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: Label, strength: usize, subject: &str, fill: f64) -> ErgRecord {
        ErgRecord::new(
            vec![fill; SIGNAL_LEN],
            label,
            FlashStrength::from_index(strength).unwrap(),
            subject,
            Eye::Left,
            Provenance::Real,
        )
        .unwrap()
    }

    #[test]
    fn cohort_totals() {
        let m = Manifest::cohort();
        assert_eq!(m.label_total(Label::Asd), 509);
        assert_eq!(m.label_total(Label::Control), 482);
        assert_eq!(m.total(), 991);
    }

    #[test]
    fn hash_ignores_provenance_only() {
        let a = record(Label::Asd, 0, "s1", 1.0);
        let mut b = a.clone();
        b.provenance = Provenance::Synthetic;
        assert_eq!(record_hash(&a), record_hash(&b));
        let c = record(Label::Asd, 0, "s2", 1.0);
        assert_ne!(record_hash(&a), record_hash(&c));
        assert_eq!(record_hash(&a).len(), 64);
    }

    #[test]
    fn truncation_keeps_first_per_cell() {
        let d = Dataset::new(
            (0..6)
                .map(|i| record(Label::Asd, i % 2, "s", i as f64))
                .collect(),
        );
        let t = d.truncate_per_cell(2);
        let fills: Vec<f64> = t.records.iter().map(|r| r.samples()[0]).collect();
        assert_eq!(fills, vec![0.0, 1.0, 2.0, 3.0]);
    }
}
