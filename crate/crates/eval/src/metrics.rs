//! Binary classification metrics with ASD as the positive class.

use erg_core::Label;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no records to evaluate")]
    Empty,
    #[error("AUC is undefined: only {0} records present")]
    AucUndefined(Label),
    #[error("{scores} scores for {truths} labels")]
    Mismatch { scores: usize, truths: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(predicted: &[Label], truth: &[Label]) -> Result<Self, MetricsError> {
        if predicted.len() != truth.len() {
            return Err(MetricsError::Mismatch {
                scores: predicted.len(),
                truths: truth.len(),
            });
        }
        let mut c = Self::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (Label::Asd, Label::Asd) => c.tp += 1,
                (Label::Asd, Label::Control) => c.fp += 1,
                (Label::Control, Label::Control) => c.tn += 1,
                (Label::Control, Label::Asd) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// ASD when the score is at least `threshold`.
    pub fn from_scores(
        scores: &[f64],
        truth: &[Label],
        threshold: f64,
    ) -> Result<Self, MetricsError> {
        let predicted: Vec<Label> = scores
            .iter()
            .map(|&s| {
                if s >= threshold {
                    Label::Asd
                } else {
                    Label::Control
                }
            })
            .collect();
        Self::from_predictions(&predicted, truth)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// `None` marks a metric whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ba: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["BA", "P", "R", "F1", "AUC"];

    pub fn values(&self) -> [Option<f64>; 5] {
        [self.ba, self.precision, self.recall, self.f1, self.auc]
    }

    pub fn from_values(v: [Option<f64>; 5]) -> Self {
        Self {
            ba: v[0],
            precision: v[1],
            recall: v[2],
            f1: v[3],
            auc: v[4],
        }
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// BA, P, R and F1 from counts; AUC from the scores, `None` when they are
/// empty or single-class.
pub fn metrics(counts: &ConfusionCounts, scores: &[(f64, Label)]) -> Result<Metrics, MetricsError> {
    if counts.total() == 0 {
        return Err(MetricsError::Empty);
    }
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let specificity = ratio(counts.tn, counts.tn + counts.fp);
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let ba = recall.zip(specificity).map(|(r, s)| (r + s) / 2.0);
    let f1 = precision
        .zip(recall)
        .and_then(|(p, r)| (p + r > 0.0).then(|| 2.0 * p * r / (p + r)));
    let auc = match auc(scores) {
        Ok(a) => Some(a),
        Err(MetricsError::AucUndefined(_) | MetricsError::Empty) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics {
        ba,
        precision,
        recall,
        f1,
        auc,
    })
}

/// Probability that a random ASD score exceeds a random Control score, ties
/// counted one half (Mann-Whitney U over both class sizes).
pub fn auc(scores: &[(f64, Label)]) -> Result<f64, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n_pos = scores.iter().filter(|(_, l)| *l == Label::Asd).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 {
        return Err(MetricsError::AucUndefined(Label::Control));
    }
    if n_neg == 0 {
        return Err(MetricsError::AucUndefined(Label::Asd));
    }
    let mut sorted: Vec<(f64, Label)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid
            * sorted[i..=j]
                .iter()
                .filter(|(_, l)| *l == Label::Asd)
                .count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}
