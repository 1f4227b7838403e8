//! Continuous wavelet transform with real mother wavelets, and the
//! three-channel scalogram built from it.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WaveletError {
    #[error("invalid scale {0}: scales must be positive and finite")]
    InvalidScale(f64),
    #[error("scale grid must be strictly increasing")]
    Unordered,
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("signal sample {0} is not finite")]
    NonFinite(usize),
    #[error("invalid wavelet: {0}")]
    InvalidWavelet(String),
    #[error("npy: {0}")]
    Npy(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("png: {0}")]
    Image(#[from] image::ImageError),
}

/// Half-width of the sampled support in units of `t`.
pub const SUPPORT: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum MotherWavelet {
    Ricker,
    GaussianDeriv { order: u32 },
    Morlet { omega0: f64 },
}

impl MotherWavelet {
    pub const MAX_GAUSS_ORDER: u32 = 8;

    pub fn validate(&self) -> Result<(), WaveletError> {
        match *self {
            MotherWavelet::Ricker => Ok(()),
            MotherWavelet::GaussianDeriv { order }
                if (1..=Self::MAX_GAUSS_ORDER).contains(&order) =>
            {
                Ok(())
            }
            MotherWavelet::GaussianDeriv { order } => Err(WaveletError::InvalidWavelet(format!(
                "Gaussian derivative order {order} outside 1..={}",
                Self::MAX_GAUSS_ORDER
            ))),
            MotherWavelet::Morlet { omega0 } if omega0 > 0.0 && omega0.is_finite() => Ok(()),
            MotherWavelet::Morlet { omega0 } => Err(WaveletError::InvalidWavelet(format!(
                "Morlet omega0 {omega0} must be positive"
            ))),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            MotherWavelet::Ricker => {
                let c = 2.0 / (3f64.sqrt() * std::f64::consts::PI.powf(0.25));
                c * (1.0 - t * t) * (-0.5 * t * t).exp()
            }
            MotherWavelet::GaussianDeriv { order } => {
                let n = order as usize;
                let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                sign * hermite(n, t) * (-0.5 * t * t).exp() / gamma_half(n).sqrt()
            }
            MotherWavelet::Morlet { omega0 } => {
                let kappa = (-0.5 * omega0 * omega0).exp();
                morlet_norm(omega0) * (-0.5 * t * t).exp() * ((omega0 * t).cos() - kappa)
            }
        }
    }
}

/// Probabilists' Hermite polynomial.
fn hermite(n: usize, t: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, t);
    if n == 0 {
        return prev;
    }
    for k in 1..n {
        let next = t * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Γ(n + ½), the energy of the n-th derivative of e^(−t²/2).
fn gamma_half(n: usize) -> f64 {
    (0..n).fold(std::f64::consts::PI.sqrt(), |g, k| g * (k as f64 + 0.5))
}

/// Unit-energy constant for the admissibility-corrected real Morlet.
fn morlet_norm(omega0: f64) -> f64 {
    let w2 = omega0 * omega0;
    let kappa = (-0.5 * w2).exp();
    let energy = 0.5 * (1.0 + (-w2).exp()) - 2.0 * kappa * (-0.25 * w2).exp() + kappa * kappa;
    std::f64::consts::PI.powf(-0.25) / energy.sqrt()
}

/// The channel wavelets, in channel order.
pub const SCALOGRAM_WAVELETS: [MotherWavelet; 3] = [
    MotherWavelet::Ricker,
    MotherWavelet::GaussianDeriv { order: 1 },
    MotherWavelet::Morlet { omega0: 5.0 },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScaleGrid {
    scales: Vec<f64>,
}

impl ScaleGrid {
    pub fn new(scales: Vec<f64>) -> Result<Self, WaveletError> {
        if scales.is_empty() {
            return Err(WaveletError::Empty("scale grid"));
        }
        if let Some(&bad) = scales.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(WaveletError::InvalidScale(bad));
        }
        if scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(WaveletError::Unordered);
        }
        Ok(Self { scales })
    }

    /// `count` geometrically spaced scales from `lo` to `hi` inclusive.
    pub fn geometric(count: usize, lo: f64, hi: f64) -> Result<Self, WaveletError> {
        if count == 1 {
            return Self::new(vec![lo]);
        }
        let ratio = (hi / lo).ln() / (count - 1) as f64;
        let mut scales: Vec<f64> = (0..count).map(|i| lo * (ratio * i as f64).exp()).collect();
        if let Some(last) = scales.last_mut() {
            *last = hi;
        }
        Self::new(scales)
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

impl Default for ScaleGrid {
    fn default() -> Self {
        Self::geometric(64, 1.0, 64.0).expect("valid default grid")
    }
}

impl TryFrom<Vec<f64>> for ScaleGrid {
    type Error = WaveletError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ScaleGrid> for Vec<f64> {
    fn from(g: ScaleGrid) -> Self {
        g.scales
    }
}

/// Sampled daughter wavelet `a^(−½)·ψ(j/a)` for `j = −L..=L`,
/// `L = ⌈SUPPORT·a⌉`.
pub fn daughter(wavelet: &MotherWavelet, a: f64) -> Vec<f64> {
    let half = (SUPPORT * a).ceil() as i64;
    let norm = a.sqrt().recip();
    (-half..=half)
        .map(|j| norm * wavelet.eval(j as f64 / a))
        .collect()
}

/// `[scale × time]` coefficients.
///
/// Entry `(i, b)` is `Σ_m x[m]·a^(−½)·ψ((m − b)/a)` with `a = scales[i]` and
/// zero samples outside the signal, evaluated by FFT correlation.
pub fn cwt(
    signal: &[f64],
    wavelet: &MotherWavelet,
    grid: &ScaleGrid,
) -> Result<Vec<Vec<f64>>, WaveletError> {
    wavelet.validate()?;
    if signal.is_empty() {
        return Err(WaveletError::Empty("signal"));
    }
    if let Some(i) = signal.iter().position(|v| !v.is_finite()) {
        return Err(WaveletError::NonFinite(i));
    }
    let mut planner = FftPlanner::new();
    Ok(grid
        .scales()
        .iter()
        .map(|&a| correlate(&mut planner, signal, &daughter(wavelet, a)))
        .collect())
}

/// `out[b] = Σ_j x[b + j]·kernel[j + L]` for `b` in `0..x.len()`, where the
/// kernel has odd length `2L + 1`.
fn correlate(planner: &mut FftPlanner<f64>, x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let half = kernel.len() / 2;
    let size = x.len() + kernel.len();
    let fft: Arc<dyn Fft<f64>> = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);
    let mut xs: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    xs.resize(size, Complex64::default());
    // Reversed kernel turns the convolution into a correlation.
    let mut ks: Vec<Complex64> = kernel
        .iter()
        .rev()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    ks.resize(size, Complex64::default());
    fft.process(&mut xs);
    fft.process(&mut ks);
    for (a, b) in xs.iter_mut().zip(&ks) {
        *a *= b;
    }
    ifft.process(&mut xs);
    let inv = 1.0 / size as f64;
    xs[half..half + x.len()]
        .iter()
        .map(|c| c.re * inv)
        .collect()
}

/// Three-channel `[channel × row × column]` image, each channel in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Scalogram {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub grid: ScaleGrid,
}

impl Scalogram {
    pub const CHANNELS: usize = 3;

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    /// Bilinear resample to `side × side` with half-pixel centres and edge
    /// clamping, the convention of OpenCV's `INTER_LINEAR`.
    pub fn resize(&self, side: usize) -> Scalogram {
        let mut data = Vec::with_capacity(Self::CHANNELS * side * side);
        let ys = axis_taps(self.height, side);
        let xs = axis_taps(self.width, side);
        for c in 0..Self::CHANNELS {
            let plane = self.channel(c);
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top =
                        plane[y0 * self.width + x0] * (1.0 - fx) + plane[y0 * self.width + x1] * fx;
                    let bottom =
                        plane[y1 * self.width + x0] * (1.0 - fx) + plane[y1 * self.width + x1] * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Scalogram {
            height: side,
            width: side,
            data,
            grid: self.grid.clone(),
        }
    }

    /// NPY v1.0, little-endian f64, C order, shape `(3, height, width)`.
    pub fn write_npy(&self, w: &mut impl Write) -> Result<(), WaveletError> {
        let dict = format!(
            "{{'descr': '<f8', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
            Self::CHANNELS,
            self.height,
            self.width
        );
        // magic(6) + version(2) + len(2) + dict + padding + '\n' ≡ 0 mod 64
        let unpadded = 10 + dict.len() + 1;
        let padding = (64 - unpadded % 64) % 64;
        let header = format!("{dict}{}\n", " ".repeat(padding));
        w.write_all(b"\x93NUMPY\x01\x00")?;
        w.write_all(&(header.len() as u16).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads what [`Scalogram::write_npy`] writes; the grid is supplied by
    /// the caller.
    pub fn read_npy(r: &mut impl Read, grid: ScaleGrid) -> Result<Scalogram, WaveletError> {
        let mut pre = [0u8; 10];
        r.read_exact(&mut pre)?;
        if &pre[..8] != b"\x93NUMPY\x01\x00" {
            return Err(WaveletError::Npy("not an NPY v1.0 file".into()));
        }
        let len = u16::from_le_bytes([pre[8], pre[9]]) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header = String::from_utf8(header)
            .map_err(|_| WaveletError::Npy("header is not UTF-8".into()))?;
        if !header.contains("'descr': '<f8'") || !header.contains("'fortran_order': False") {
            return Err(WaveletError::Npy(format!("unsupported header {header:?}")));
        }
        let shape = header
            .split("'shape': (")
            .nth(1)
            .and_then(|s| s.split(')').next())
            .ok_or_else(|| WaveletError::Npy("missing shape".into()))?;
        let dims: Vec<usize> = shape
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| WaveletError::Npy(format!("bad shape {shape:?}")))
            })
            .collect::<Result<_, _>>()?;
        if dims.len() != 3 || dims[0] != Self::CHANNELS {
            return Err(WaveletError::Npy(format!(
                "expected shape (3, h, w), got {dims:?}"
            )));
        }
        let mut bytes = vec![0u8; 8 * dims.iter().product::<usize>()];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Scalogram {
            height: dims[1],
            width: dims[2],
            data,
            grid,
        })
    }

    /// RGB rendering, one wavelet per colour channel, smallest scale on top.
    pub fn write_png(&self, path: &Path) -> Result<(), WaveletError> {
        let img = image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px =
                |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        img.save(path)?;
        Ok(())
    }
}

/// Source taps `(lo, hi, weight of hi)` for each destination index.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if lo == src - 1 { 0.0 } else { pos - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

fn minmax_unit(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        let span = hi - lo;
        for v in values.iter_mut() {
            *v = (*v - lo) / span;
        }
    } else {
        values.fill(0.0);
    }
}

/// Scalogram with the default channel wavelets.
pub fn build_scalogram(signal: &[f64], grid: &ScaleGrid) -> Result<Scalogram, WaveletError> {
    build_scalogram_with(signal, grid, &SCALOGRAM_WAVELETS)
}

/// Channel `c` is `|cwt|` under `wavelets[c]`, min-max scaled to [0, 1]; a
/// constant channel becomes zeros.
pub fn build_scalogram_with(
    signal: &[f64],
    grid: &ScaleGrid,
    wavelets: &[MotherWavelet; 3],
) -> Result<Scalogram, WaveletError> {
    let mut data = Vec::with_capacity(3 * grid.len() * signal.len());
    for w in wavelets {
        let mut plane: Vec<f64> = cwt(signal, w, grid)?
            .into_iter()
            .flatten()
            .map(f64::abs)
            .collect();
        minmax_unit(&mut plane);
        data.extend(plane);
    }
    Ok(Scalogram {
        height: grid.len(),
        width: signal.len(),
        data,
        grid: grid.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation() {
        assert!(matches!(
            ScaleGrid::new(vec![1.0, 0.0]),
            Err(WaveletError::InvalidScale(_))
        ));
        assert!(matches!(
            ScaleGrid::new(vec![-2.0]),
            Err(WaveletError::InvalidScale(_))
        ));
        assert!(matches!(
            ScaleGrid::new(vec![2.0, 1.0]),
            Err(WaveletError::Unordered)
        ));
        let g = ScaleGrid::default();
        assert_eq!(g.len(), 64);
        assert_eq!(g.scales()[0], 1.0);
        assert_eq!(g.scales()[63], 64.0);
        let ratio = g.scales()[1] / g.scales()[0];
        assert!((g.scales()[40] / g.scales()[39] - ratio).abs() < 1e-12);
    }

    #[test]
    fn wavelet_validation() {
        assert!(MotherWavelet::GaussianDeriv { order: 0 }
            .validate()
            .is_err());
        assert!(MotherWavelet::Morlet { omega0: -1.0 }.validate().is_err());
        assert!(cwt(
            &[1.0; 10],
            &MotherWavelet::GaussianDeriv { order: 9 },
            &ScaleGrid::default()
        )
        .is_err());
    }

    #[test]
    fn hermite_low_orders() {
        for t in [-1.3, 0.0, 0.4, 2.2] {
            assert_eq!(hermite(2, t), t * t - 1.0);
            assert!((hermite(3, t) - (t.powi(3) - 3.0 * t)).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let grid = ScaleGrid::new(vec![1.0, 2.0]).unwrap();
        let s = Scalogram {
            height: 2,
            width: 2,
            data: (0..12).map(|v| v as f64).collect(),
            grid,
        };
        assert_eq!(s.resize(2), s);
        let c = Scalogram {
            data: vec![0.25; 12],
            ..s.clone()
        };
        assert!(c.resize(5).data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
