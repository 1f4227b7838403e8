use std::collections::BTreeMap;

use erg_core::{Cell, Dataset};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    /// Pearson correlation of the two mean waveforms; `None` when either
    /// mean is constant.
    pub correlation: Option<f64>,
    /// Mean synthetic peak-to-peak amplitude over mean real peak-to-peak.
    pub amplitude_ratio: Option<f64>,
    pub n_real: usize,
    pub n_synthetic: usize,
}

fn mean_waveform(ds: &Dataset, cell: Cell) -> Option<(Vec<f64>, f64, usize)> {
    let rs: Vec<_> = ds.records.iter().filter(|r| r.cell() == cell).collect();
    if rs.is_empty() {
        return None;
    }
    let len = rs[0].samples().len();
    let n = rs.len() as f64;
    let mean = (0..len)
        .map(|t| rs.iter().map(|r| r.samples()[t]).sum::<f64>() / n)
        .collect();
    let p2p = rs
        .iter()
        .map(|r| {
            let s = r.samples();
            s.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - s.iter().copied().fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / n;
    Some((mean, p2p, rs.len()))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (va > 0.0 && vb > 0.0).then(|| (cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Compares the cells present in both datasets; a cell missing from either
/// is skipped with a warning.
pub fn waveform_similarity(real: &Dataset, synthetic: &Dataset) -> BTreeMap<Cell, Similarity> {
    let mut cells: Vec<Cell> = real
        .records
        .iter()
        .chain(&synthetic.records)
        .map(|r| r.cell())
        .collect();
    cells.sort();
    cells.dedup();
    let mut out = BTreeMap::new();
    for cell in cells {
        match (mean_waveform(real, cell), mean_waveform(synthetic, cell)) {
            (Some((mr, pr, nr)), Some((ms, ps, ns))) => {
                out.insert(
                    cell,
                    Similarity {
                        correlation: pearson(&mr, &ms),
                        amplitude_ratio: (pr > 0.0).then(|| ps / pr),
                        n_real: nr,
                        n_synthetic: ns,
                    },
                );
            }
            _ => log::warn!(
                "cell ({}, {}) is empty on one side; skipped",
                cell.0,
                cell.1
            ),
        }
    }
    out
}
