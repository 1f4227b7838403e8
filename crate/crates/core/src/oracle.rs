//! Parametric ERG simulator used as a stand-in for clinical recordings.
//!
//! A waveform is a negative Gaussian a-wave trough, a positive Gaussian
//! b-wave peak, damped oscillatory potentials windowed onto the b-wave's
//! ascending limb, and white noise. ASD shifts b-wave amplitude and peak
//! latency by class offsets. Subjects carry random amplitude and latency
//! effects shared across strengths and eyes.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::signal::{ErgRecord, Eye, FlashStrength, Label, Provenance, SIGNAL_LEN};

#[derive(Debug, Error, PartialEq)]
#[error("invalid oracle parameters: {0}")]
pub struct OracleError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleParams {
    /// µV, depth of the a-wave trough.
    pub a_amplitude: f64,
    /// Sample index of the a-wave trough.
    pub a_time: f64,
    pub a_width: f64,
    /// µV, height of the b-wave peak.
    pub b_amplitude: f64,
    pub b_time: f64,
    pub b_width: f64,
    pub op_amplitude: f64,
    /// Cycles per sample.
    pub op_frequency: f64,
    /// Per-sample exponential decay of the oscillatory potentials.
    pub op_damping: f64,
    /// Relative change of the ASD b-wave amplitude.
    pub asd_amplitude_offset: f64,
    /// Samples added to ASD b-wave latency.
    pub asd_latency_offset: f64,
    /// Amplitude factor per strength, brightest first.
    pub strength_gain: [f64; 9],
    /// Samples added to both latencies per strength, brightest first.
    pub strength_delay: [f64; 9],
    pub subject_amplitude_sd: f64,
    pub subject_latency_sd: f64,
    pub noise_sd: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            a_amplitude: 25.0,
            a_time: 45.0,
            a_width: 6.0,
            b_amplitude: 60.0,
            b_time: 75.0,
            b_width: 13.0,
            op_amplitude: 5.0,
            op_frequency: 0.11,
            op_damping: 0.04,
            asd_amplitude_offset: -0.2,
            asd_latency_offset: 4.0,
            strength_gain: [0.8, 0.9, 1.0, 1.05, 1.0, 0.9, 0.75, 0.6, 0.45],
            strength_delay: [0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 10.0],
            subject_amplitude_sd: 0.08,
            subject_latency_sd: 1.0,
            noise_sd: 1.5,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<(), OracleError> {
        let positive = [
            ("a_amplitude", self.a_amplitude),
            ("b_amplitude", self.b_amplitude),
            ("a_width", self.a_width),
            ("b_width", self.b_width),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(OracleError(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("op_amplitude", self.op_amplitude),
            ("op_frequency", self.op_frequency),
            ("op_damping", self.op_damping),
            ("subject_amplitude_sd", self.subject_amplitude_sd),
            ("subject_latency_sd", self.subject_latency_sd),
            ("noise_sd", self.noise_sd),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(OracleError(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.b_time <= self.a_time {
            return Err(OracleError(format!(
                "b_time {} must follow a_time {}",
                self.b_time, self.a_time
            )));
        }
        if let Some(g) = self
            .strength_gain
            .iter()
            .find(|g| !(**g > 0.0 && g.is_finite()))
        {
            return Err(OracleError(format!(
                "strength gains must be positive, got {g}"
            )));
        }
        if !(1.0 + self.asd_amplitude_offset > 0.0) {
            return Err(OracleError(
                "asd_amplitude_offset leaves a non-positive b-wave".into(),
            ));
        }
        if self.strength_delay.iter().any(|d| !d.is_finite())
            || !self.asd_latency_offset.is_finite()
        {
            return Err(OracleError("latency offsets must be finite".into()));
        }
        Ok(())
    }

    /// Noise-free waveform for a subject with relative amplitude `gain` and
    /// latency shift `shift` samples.
    pub fn waveform(
        &self,
        label: Label,
        strength: FlashStrength,
        gain: f64,
        shift: f64,
    ) -> Vec<f64> {
        let s = strength.index();
        let amp = self.strength_gain[s] * gain;
        let delay = self.strength_delay[s] + shift;
        let (b_scale, b_shift) = match label {
            Label::Asd => (1.0 + self.asd_amplitude_offset, self.asd_latency_offset),
            Label::Control => (1.0, 0.0),
        };
        let ta = self.a_time + delay;
        let tb = self.b_time + delay + b_shift;
        let (op_center, op_width) = (0.5 * (ta + tb), (tb - ta) / 3.0);
        (0..SIGNAL_LEN)
            .map(|i| {
                let t = i as f64;
                let a = -self.a_amplitude * amp * gauss(t, ta, self.a_width);
                let b = self.b_amplitude * amp * b_scale * gauss(t, tb, self.b_width);
                let dt = t - ta;
                let op = if dt >= 0.0 {
                    self.op_amplitude
                        * amp
                        * (2.0 * PI * self.op_frequency * dt).sin()
                        * (-self.op_damping * dt).exp()
                        * gauss(t, op_center, op_width)
                } else {
                    0.0
                };
                a + b + op
            })
            .collect()
    }

    /// Population-mean waveform of a cell.
    pub fn template(&self, label: Label, strength: FlashStrength) -> Vec<f64> {
        self.waveform(label, strength, 1.0, 0.0)
    }
}

fn gauss(t: f64, center: f64, width: f64) -> f64 {
    (-0.5 * ((t - center) / width).powi(2)).exp()
}

/// Simulates `n_per_cell` records in every (label, strength) cell.
///
/// Record `i` of a cell belongs to subject `{label}-{i / 2}` and eye
/// LEFT for even `i`, RIGHT for odd, so one subject contributes two records
/// to each strength.
pub fn simulate_oracle(
    params: &OracleParams,
    n_per_cell: usize,
    seed: u64,
) -> Result<Dataset, OracleError> {
    params.validate()?;
    if n_per_cell == 0 {
        return Err(OracleError("n_per_cell must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n_subjects = n_per_cell.div_ceil(2);

    let mut effects = Vec::new();
    for _ in Label::ALL {
        let per: Vec<(f64, f64)> = (0..n_subjects)
            .map(|_| {
                let g = 1.0 + params.subject_amplitude_sd * std_normal.sample(&mut rng);
                let l = params.subject_latency_sd * std_normal.sample(&mut rng);
                (g.max(0.05), l)
            })
            .collect();
        effects.push(per);
    }

    let mut records = Vec::with_capacity(2 * FlashStrength::COUNT * n_per_cell);
    for label in Label::ALL {
        for strength in FlashStrength::all() {
            for i in 0..n_per_cell {
                let (gain, shift) = effects[label.index()][i / 2];
                let mut x = params.waveform(label, strength, gain, shift);
                if params.noise_sd > 0.0 {
                    for v in &mut x {
                        *v += params.noise_sd * std_normal.sample(&mut rng);
                    }
                }
                let eye = if i % 2 == 0 { Eye::Left } else { Eye::Right };
                let subject = format!("{}-{:04}", label.as_str().to_lowercase(), i / 2);
                let rec = ErgRecord::new(x, label, strength, subject, eye, Provenance::Real)
                    .map_err(|e| OracleError(e.to_string()))?;
                records.push(rec);
            }
        }
    }
    Ok(Dataset::new(records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_params() {
        let p = OracleParams {
            b_amplitude: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = OracleParams {
            b_time: 10.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let mut p = OracleParams::default();
        p.strength_gain[3] = -1.0;
        assert!(simulate_oracle(&p, 2, 0).is_err());
        assert!(simulate_oracle(&OracleParams::default(), 0, 0).is_err());
    }

    #[test]
    fn counts_and_subjects() {
        let d = simulate_oracle(&OracleParams::default(), 3, 1).unwrap();
        assert_eq!(d.len(), 54);
        assert!(d.manifest().counts.values().all(|&n| n == 3));
        let first = &d.records[0];
        assert_eq!(
            (first.subject_id.as_str(), first.eye),
            ("asd-0000", Eye::Left)
        );
        assert_eq!(
            (d.records[1].subject_id.as_str(), d.records[1].eye),
            ("asd-0000", Eye::Right)
        );
        assert_eq!(d.records[2].subject_id, "asd-0001");
    }
}
