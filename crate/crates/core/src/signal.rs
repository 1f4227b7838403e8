//! Waveform records, amplitude normalization and Butterworth low-pass
//! filtering.

use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Samples per averaged waveform.
pub const SIGNAL_LEN: usize = 235;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("expected {SIGNAL_LEN} samples, got {0}")]
    Length(usize),
    #[error("sample {0} is not finite")]
    NonFinite(usize),
    #[error("unknown flash strength {0} log cd·s·m⁻²")]
    UnknownStrength(f64),
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("invalid filter spec: {0}")]
    InvalidFilter(String),
    #[error(
        "input of {len} samples is too short for an order-{order} zero-phase filter (need {need})"
    )]
    TooShort {
        len: usize,
        order: usize,
        need: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "ASD")]
    Asd,
    #[serde(rename = "CONTROL")]
    Control,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Asd, Label::Control];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Asd => "ASD",
            Label::Control => "CONTROL",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ASD" => Ok(Label::Asd),
            "CONTROL" => Ok(Label::Control),
            _ => Err(format!("unknown label {s:?} (expected ASD or CONTROL)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Eye {
    #[serde(rename = "LEFT")]
    Left,
    #[serde(rename = "RIGHT")]
    Right,
    #[serde(rename = "UNKNOWN")]
    Unknown,
}

impl Eye {
    pub fn as_str(self) -> &'static str {
        match self {
            Eye::Left => "LEFT",
            Eye::Right => "RIGHT",
            Eye::Unknown => "UNKNOWN",
        }
    }
}

impl FromStr for Eye {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "LEFT" => Ok(Eye::Left),
            "RIGHT" => Ok(Eye::Right),
            "UNKNOWN" => Ok(Eye::Unknown),
            _ => Err(format!("unknown eye {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "REAL")]
    Real,
    #[serde(rename = "SYNTHETIC")]
    Synthetic,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Real => "REAL",
            Provenance::Synthetic => "SYNTHETIC",
        }
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "REAL" => Ok(Provenance::Real),
            "SYNTHETIC" => Ok(Provenance::Synthetic),
            _ => Err(format!("unknown provenance {s:?}")),
        }
    }
}

/// (Troland-seconds, log cd·s·m⁻²) of the nine recorded flash strengths,
/// brightest first.
pub const STRENGTH_CATALOG: [(f64, f64); 9] = [
    (446.0, 1.204),
    (356.0, 1.114),
    (251.0, 0.949),
    (178.0, 0.799),
    (113.0, 0.602),
    (70.0, 0.398),
    (35.0, 0.114),
    (21.0, -0.119),
    (12.0, -0.367),
];

/// One of the nine catalog flash strengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FlashStrength(u8);

impl FlashStrength {
    pub const COUNT: usize = STRENGTH_CATALOG.len();

    pub fn all() -> impl Iterator<Item = FlashStrength> {
        (0..Self::COUNT as u8).map(FlashStrength)
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < Self::COUNT).then_some(FlashStrength(i as u8))
    }

    /// Matches a log cd·s·m⁻² value against the catalog to 3 decimals.
    pub fn from_log_cd(v: f64) -> Option<Self> {
        STRENGTH_CATALOG
            .iter()
            .position(|&(_, l)| (l - v).abs() < 5e-4)
            .map(|i| FlashStrength(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn log_cd(self) -> f64 {
        STRENGTH_CATALOG[self.index()].1
    }

    pub fn td_s(self) -> f64 {
        STRENGTH_CATALOG[self.index()].0
    }
}

impl TryFrom<f64> for FlashStrength {
    type Error = String;

    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::from_log_cd(v).ok_or_else(|| format!("unknown flash strength {v}"))
    }
}

impl From<FlashStrength> for f64 {
    fn from(s: FlashStrength) -> f64 {
        s.log_cd()
    }
}

impl fmt::Display for FlashStrength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}", self.log_cd())
    }
}

/// One averaged waveform with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ErgRecord {
    samples: Vec<f64>,
    pub label: Label,
    pub strength: FlashStrength,
    pub subject_id: String,
    pub eye: Eye,
    pub provenance: Provenance,
}

impl ErgRecord {
    pub fn new(
        samples: Vec<f64>,
        label: Label,
        strength: FlashStrength,
        subject_id: impl Into<String>,
        eye: Eye,
        provenance: Provenance,
    ) -> Result<Self, SignalError> {
        check_samples(&samples)?;
        Ok(Self {
            samples,
            label,
            strength,
            subject_id: subject_id.into(),
            eye,
            provenance,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Same metadata, new samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self, SignalError> {
        check_samples(&samples)?;
        Ok(Self {
            samples,
            ..self.clone()
        })
    }

    pub fn cell(&self) -> (Label, FlashStrength) {
        (self.label, self.strength)
    }
}

fn check_samples(samples: &[f64]) -> Result<(), SignalError> {
    if samples.len() != SIGNAL_LEN {
        return Err(SignalError::Length(samples.len()));
    }
    match samples.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(SignalError::NonFinite(i)),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    MinMax,
    ZScore,
}

/// Affine map `normalized = (raw − offset) / scale`.
///
/// A constant signal under MinMax maps to zeros with `degenerate` set; the
/// inverse then restores the constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
    pub degenerate: bool,
}

impl Normalization {
    pub fn apply(&self, x: f64) -> f64 {
        if self.degenerate {
            0.0
        } else {
            (x - self.offset) / self.scale
        }
    }

    pub fn invert(&self, y: f64) -> f64 {
        y * self.scale + self.offset
    }

    pub fn invert_all(&self, ys: &[f64]) -> Vec<f64> {
        ys.iter().map(|&y| self.invert(y)).collect()
    }
}

/// Fits and applies `mode` to one sequence.
pub fn normalize_samples(
    samples: &[f64],
    mode: NormMode,
) -> Result<(Vec<f64>, Normalization), SignalError> {
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(SignalError::NonFinite(i));
    }
    if samples.is_empty() {
        return Err(SignalError::Degenerate("empty signal"));
    }
    let norm = match mode {
        NormMode::MinMax => {
            let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                Normalization {
                    offset: 0.5 * (hi + lo),
                    scale: 0.5 * (hi - lo),
                    degenerate: false,
                }
            } else {
                Normalization {
                    offset: lo,
                    scale: 1.0,
                    degenerate: true,
                }
            }
        }
        NormMode::ZScore => {
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var <= 0.0 {
                return Err(SignalError::Degenerate(
                    "constant signal has zero standard deviation",
                ));
            }
            Normalization {
                offset: mean,
                scale: var.sqrt(),
                degenerate: false,
            }
        }
    };
    let mut out: Vec<f64> = samples.iter().map(|&v| norm.apply(v)).collect();
    if mode == NormMode::MinMax && !norm.degenerate {
        // Pin the extremes against rounding.
        for v in &mut out {
            *v = v.clamp(-1.0, 1.0);
        }
    }
    Ok((out, norm))
}

pub fn normalize(
    record: &ErgRecord,
    mode: NormMode,
) -> Result<(ErgRecord, Normalization), SignalError> {
    let (samples, norm) = normalize_samples(record.samples(), mode)?;
    Ok((record.with_samples(samples)?, norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSpec {
    pub order: usize,
    /// Fraction of Nyquist.
    pub cutoff: f64,
    pub zero_phase: bool,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            order: 4,
            cutoff: 0.2,
            zero_phase: true,
        }
    }
}

/// Second-order section `[b0, b1, b2, a0, a1, a2]` with `a0 = 1`.
pub type Section = [f64; 6];

impl FilterSpec {
    pub fn validate(&self) -> Result<(), SignalError> {
        if self.order == 0 {
            return Err(SignalError::InvalidFilter(
                "order must be at least 1".into(),
            ));
        }
        if !(self.cutoff > 0.0 && self.cutoff < 1.0) {
            return Err(SignalError::InvalidFilter(format!(
                "cutoff {} must lie strictly between 0 and 1",
                self.cutoff
            )));
        }
        Ok(())
    }

    /// Digital sections by the bilinear transform with prewarping.
    pub fn sections(&self) -> Result<Vec<Section>, SignalError> {
        self.validate()?;
        let n = self.order;
        let k = (std::f64::consts::FRAC_PI_2 * self.cutoff).tan();
        let k2 = k * k;
        let mut sos = Vec::with_capacity(n.div_ceil(2));
        for i in 0..n / 2 {
            // Analog section s² + 2 sin(θ)s + 1 for the conjugate pole pair.
            let theta = std::f64::consts::PI * (2 * i + 1) as f64 / (2 * n) as f64;
            let b1 = 2.0 * theta.sin();
            let a0 = 1.0 + b1 * k + k2;
            sos.push([
                k2 / a0,
                2.0 * k2 / a0,
                k2 / a0,
                1.0,
                2.0 * (k2 - 1.0) / a0,
                (1.0 - b1 * k + k2) / a0,
            ]);
        }
        if n % 2 == 1 {
            let a0 = 1.0 + k;
            sos.push([k / a0, k / a0, 0.0, 1.0, (k - 1.0) / a0, 0.0]);
        }
        Ok(sos)
    }

    /// Single-pass magnitude response at normalized frequency `f` (1 = Nyquist).
    pub fn magnitude(&self, f: f64) -> Result<f64, SignalError> {
        let z = Complex64::from_polar(1.0, -std::f64::consts::PI * f);
        let z2 = z * z;
        let h = self
            .sections()?
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| {
                let num = s[0] + s[1] * z + s[2] * z2;
                let den = s[3] + s[4] * z + s[5] * z2;
                acc * num / den
            });
        Ok(h.norm())
    }

    /// Edge padding used by the zero-phase pass.
    pub fn pad_len(&self) -> usize {
        3 * (self.order + 1)
    }
}

/// Steady-state section states for a unit step input.
fn step_states(sos: &[Section]) -> Vec<[f64; 2]> {
    let mut gain = 1.0;
    sos.iter()
        .map(|s| {
            let dc = (s[0] + s[1] + s[2]) / (1.0 + s[4] + s[5]);
            let y = gain * dc;
            let z2 = s[2] * gain - s[5] * y;
            let z1 = s[1] * gain - s[4] * y + z2;
            gain = y;
            [z1, z2]
        })
        .collect()
}

/// Direct-form-II-transposed cascade, states scaled by `x0` so a constant
/// input starts in steady state.
fn run_sections(sos: &[Section], zi: &[[f64; 2]], x: &mut [f64]) {
    let x0 = x.first().copied().unwrap_or(0.0);
    for (s, z) in sos.iter().zip(zi) {
        let (mut z1, mut z2) = (z[0] * x0, z[1] * x0);
        for v in x.iter_mut() {
            let input = *v;
            let y = s[0] * input + z1;
            z1 = s[1] * input - s[4] * y + z2;
            z2 = s[2] * input - s[5] * y;
            *v = y;
        }
    }
}

/// Low-pass filters `samples`.
///
/// Zero-phase mode runs the cascade forward and backward over an
/// odd-extended copy, so the magnitude response is squared and the group
/// delay is zero. Both modes start from the steady state of the first
/// sample.
pub fn butterworth_lowpass(samples: &[f64], spec: &FilterSpec) -> Result<Vec<f64>, SignalError> {
    let sos = spec.sections()?;
    let zi = step_states(&sos);
    if !spec.zero_phase {
        let mut out = samples.to_vec();
        run_sections(&sos, &zi, &mut out);
        return Ok(out);
    }
    let n = samples.len();
    let need = (3 * spec.order).max(2);
    if n < need {
        return Err(SignalError::TooShort {
            len: n,
            order: spec.order,
            need,
        });
    }
    let pad = spec.pad_len().min(n - 1);
    let (first, last) = (samples[0], samples[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - samples[i]));
    ext.extend_from_slice(samples);
    ext.extend((1..=pad).map(|i| 2.0 * last - samples[n - 1 - i]));
    run_sections(&sos, &zi, &mut ext);
    ext.reverse();
    run_sections(&sos, &zi, &mut ext);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}
