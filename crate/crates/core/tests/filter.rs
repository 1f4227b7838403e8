use erg_core::signal::normalize_samples;
use erg_core::{butterworth_lowpass, FilterSpec, NormMode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Hann-windowed periodogram by direct DFT over bins `lo..hi` of `n/2`.
fn periodogram(x: &[f64], lo: usize, hi: usize) -> Vec<f64> {
    let n = x.len();
    let w: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect();
    (lo..hi)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, (&v, &wi)) in x.iter().zip(&w).enumerate() {
                let ph = -2.0 * std::f64::consts::PI * (k * i % n) as f64 / n as f64;
                re += v * wi * ph.cos();
                im += v * wi * ph.sin();
            }
            re * re + im * im
        })
        .collect()
}

#[test]
fn white_noise_stopband_falls_at_least_twelve_db_per_order_octave() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2048;
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    for order in [2, 4] {
        let cutoff = 0.2;
        let spec = FilterSpec {
            order,
            cutoff,
            zero_phase: true,
        };
        let y = butterworth_lowpass(&x, &spec).unwrap();
        // Bins are k/n cycles/sample; cutoff·½ cycles/sample is Nyquist-normalized.
        let lo = (2.0 * cutoff * 0.5 * n as f64).ceil() as usize;
        let hi = n / 2;
        let px: f64 = periodogram(&x, lo, hi).iter().sum();
        let py: f64 = periodogram(&y, lo, hi).iter().sum();
        let attenuation_db = 10.0 * (px / py).log10();
        assert!(
            attenuation_db >= 12.0 * order as f64,
            "order {order}: {attenuation_db:.1} dB above 2×cutoff"
        );
    }
}

#[test]
fn zero_phase_sinusoid_keeps_peak_positions() {
    let f = 0.03; // cycles/sample, well below cutoff 0.2 × ½
    let x: Vec<f64> = (0..235)
        .map(|i| (2.0 * std::f64::consts::PI * f * i as f64).sin())
        .collect();
    let y = butterworth_lowpass(&x, &FilterSpec::default()).unwrap();
    let peaks = |s: &[f64]| -> Vec<usize> {
        (20..s.len() - 20)
            .filter(|&i| s[i] > s[i - 1] && s[i] >= s[i + 1] && s[i] > 0.5)
            .collect()
    };
    let (px, py) = (peaks(&x), peaks(&y));
    assert_eq!(px.len(), py.len());
    assert!(!px.is_empty());
    for (a, b) in px.iter().zip(&py) {
        assert!(a.abs_diff(*b) <= 1, "{px:?} vs {py:?}");
    }
}

#[test]
fn single_pass_delays_a_pulse() {
    let x: Vec<f64> = (0..235)
        .map(|i| (-0.5 * ((i as f64 - 100.0) / 4.0).powi(2)).exp())
        .collect();
    let spec = FilterSpec {
        zero_phase: false,
        ..Default::default()
    };
    let y = butterworth_lowpass(&x, &spec).unwrap();
    assert!(argmax(&y) > 100);
}

fn argmax(x: &[f64]) -> usize {
    (0..x.len()).max_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap()
}

proptest! {
    #[test]
    fn filtering_is_linear(
        seed in any::<u64>(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        order in 1usize..7,
        cutoff in 0.05f64..0.9,
        zero_phase in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..235).map(|_| rng.random_range(-50.0..50.0)).collect();
        let y: Vec<f64> = (0..235).map(|_| rng.random_range(-50.0..50.0)).collect();
        let spec = FilterSpec { order, cutoff, zero_phase };
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = butterworth_lowpass(&mix, &spec).unwrap();
        let fx = butterworth_lowpass(&x, &spec).unwrap();
        let fy = butterworth_lowpass(&y, &spec).unwrap();
        let scale = lhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..235 {
            let rhs = a * fx[i] + b * fy[i];
            prop_assert!((lhs[i] - rhs).abs() <= 1e-9 * scale, "i={} {} vs {}", i, lhs[i], rhs);
        }
    }

    #[test]
    fn zero_phase_keeps_symmetric_pulse_argmax(
        center in 30usize..205,
        width in 1.0f64..12.0,
        order in 1usize..7,
        cutoff in 0.1f64..0.9,
    ) {
        let x: Vec<f64> = (0..235)
            .map(|i| (-0.5 * ((i as f64 - center as f64) / width).powi(2)).exp())
            .collect();
        let spec = FilterSpec { order, cutoff, zero_phase: true };
        let y = butterworth_lowpass(&x, &spec).unwrap();
        prop_assert_eq!(argmax(&y), center);
    }

    #[test]
    fn normalization_inverts(seed in any::<u64>(), zscore in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..235).map(|_| rng.random_range(-80.0..120.0)).collect();
        let mode = if zscore { NormMode::ZScore } else { NormMode::MinMax };
        let (y, norm) = normalize_samples(&x, mode).unwrap();
        if !zscore {
            prop_assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert!(y.contains(&-1.0) && y.contains(&1.0));
        }
        for (a, b) in x.iter().zip(norm.invert_all(&y)) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
