use erg_core::cache::ScalogramCache;
use erg_core::wavelet::{build_scalogram_with, daughter, SCALOGRAM_WAVELETS};
use erg_core::{
    build_scalogram, cwt, simulate_oracle, MotherWavelet, OracleParams, ScaleGrid, Scalogram,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

const WAVELETS: [MotherWavelet; 3] = SCALOGRAM_WAVELETS;

/// Composite Simpson rule of `f` over [-8, 8].
fn integrate(f: impl Fn(f64) -> f64) -> f64 {
    let n = 16_000;
    let h = 16.0 / n as f64;
    let mut s = f(-8.0) + f(8.0);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(-8.0 + i as f64 * h);
    }
    s * h / 3.0
}

/// Direct sum over integer sample times.
fn quadrature(x: &[f64], w: &MotherWavelet, a: f64) -> Vec<f64> {
    let half = (8.0 * a).ceil() as i64;
    (0..x.len() as i64)
        .map(|b| {
            let mut acc = 0.0;
            for m in (b - half).max(0)..=(b + half).min(x.len() as i64 - 1) {
                acc += x[m as usize] * w.eval((m - b) as f64 / a);
            }
            acc / a.sqrt()
        })
        .collect()
}

fn random_signal(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..235).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn closed_form_values() {
    let peak = 2.0 / (3f64.sqrt() * std::f64::consts::PI.powf(0.25));
    assert!((MotherWavelet::Ricker.eval(0.0) - peak).abs() < 1e-9);
    assert!((peak - 0.867325).abs() < 1e-6);
    assert_eq!(MotherWavelet::Ricker.eval(1.0), 0.0);
    assert_eq!(MotherWavelet::Ricker.eval(-1.0), 0.0);
}

#[test]
fn unit_energy_and_zero_mean() {
    let mut all = WAVELETS.to_vec();
    all.extend((2..=4).map(|order| MotherWavelet::GaussianDeriv { order }));
    all.push(MotherWavelet::Morlet { omega0: 6.0 });
    for w in all {
        let energy = integrate(|t| w.eval(t).powi(2));
        assert!((energy - 1.0).abs() < 1e-3, "{w:?}: energy {energy}");
        let mean = integrate(|t| w.eval(t));
        assert!(mean.abs() < 1e-6, "{w:?}: integral {mean}");
    }
}

#[test]
fn fft_cwt_matches_direct_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let grid = ScaleGrid::geometric(10, 1.0, 64.0).unwrap();
    for _ in 0..5 {
        let x = random_signal(&mut rng);
        for w in &WAVELETS {
            let rows = cwt(&x, w, &grid).unwrap();
            for (row, &a) in rows.iter().zip(grid.scales()) {
                let oracle = quadrature(&x, w, a);
                let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let err = row
                    .iter()
                    .zip(&oracle)
                    .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
                assert!(err / scale < 1e-9, "{w:?} a={a}: {}", err / scale);
            }
        }
    }
}

#[test]
fn impulse_is_localized() {
    let mut x = vec![0.0; 235];
    x[100] = 1.0;
    let grid = ScaleGrid::new(vec![1.0, 1.5, 2.0, 3.0]).unwrap();
    for row in cwt(&x, &MotherWavelet::Ricker, &grid).unwrap() {
        let arg = (0..235)
            .max_by(|&a, &b| row[a].abs().total_cmp(&row[b].abs()))
            .unwrap();
        assert_eq!(arg, 100);
    }
}

#[test]
fn constants_vanish_away_from_the_edges() {
    let x = vec![3.5; 235];
    let grid = ScaleGrid::geometric(12, 2.0, 14.0).unwrap();
    for w in &WAVELETS {
        for (row, &a) in cwt(&x, w, &grid).unwrap().iter().zip(grid.scales()) {
            let half = (8.0 * a).ceil() as usize;
            for v in &row[half..235 - half] {
                assert!(v.abs() < 1e-6, "{w:?} a={a}: {v}");
            }
        }
    }
}

/// |Ψ̂(ν)| of the mother wavelet, ν in cycles per unit time, by FFT of a
/// finely sampled copy.
struct Spectrum {
    dnu: f64,
    mag: Vec<f64>,
}

impl Spectrum {
    fn of(w: &MotherWavelet) -> Self {
        let dt = 1.0 / 32.0;
        let size = 1 << 16;
        let mut buf = vec![Complex64::default(); size];
        for i in 0..(16.0 / dt) as usize {
            let t = -8.0 + i as f64 * dt;
            buf[i] = Complex64::new(w.eval(t) * dt, 0.0);
        }
        FftPlanner::new().plan_fft_forward(size).process(&mut buf);
        Self {
            dnu: 1.0 / (size as f64 * dt),
            mag: buf[..size / 2].iter().map(|c| c.norm()).collect(),
        }
    }

    fn at(&self, nu: f64) -> f64 {
        let p = nu / self.dnu;
        let i = p.floor() as usize;
        if i + 1 >= self.mag.len() {
            return 0.0;
        }
        let f = p - i as f64;
        self.mag[i] * (1.0 - f) + self.mag[i + 1] * f
    }

    fn peak(&self) -> f64 {
        let i = (0..self.mag.len())
            .max_by(|&a, &b| self.mag[a].total_cmp(&self.mag[b]))
            .unwrap();
        i as f64 * self.dnu
    }
}

#[test]
fn sinusoid_peaks_at_the_predicted_scale() {
    let grid = ScaleGrid::default();
    let mut checked = 0;
    for w in &WAVELETS {
        let spec = Spectrum::of(w);
        for f in [0.03, 0.06, 0.1, 0.15, 0.2, 0.3] {
            // Response of scale a to frequency f is √a·|Ψ̂(a·f)|.
            let predicted = (0..grid.len())
                .max_by(|&i, &j| {
                    let r = |k: usize| grid.scales()[k].sqrt() * spec.at(grid.scales()[k] * f);
                    r(i).total_cmp(&r(j))
                })
                .unwrap();
            let a = grid.scales()[predicted];
            if !(1.5..=14.0).contains(&a) {
                continue;
            }
            let x: Vec<f64> = (0..235)
                .map(|i| (2.0 * std::f64::consts::PI * f * i as f64).sin())
                .collect();
            let rows = cwt(&x, w, &grid).unwrap();
            let period = (1.0 / f).ceil() as usize;
            let envelope: Vec<f64> = rows
                .iter()
                .map(|row| {
                    row[117 - period / 2..=117 + period / 2]
                        .iter()
                        .fold(0.0f64, |m, v| m.max(v.abs()))
                })
                .collect();
            let observed = (0..grid.len())
                .max_by(|&i, &j| envelope[i].total_cmp(&envelope[j]))
                .unwrap();
            assert!(
                observed.abs_diff(predicted) <= 1,
                "{w:?} f={f}: observed scale {} vs predicted {} (centre-frequency ratio {:.2})",
                grid.scales()[observed],
                a,
                spec.peak() / f
            );
            checked += 1;
        }
    }
    assert!(checked >= 9, "only {checked} combinations in range");
}

#[test]
fn scalogram_scaling() {
    let grid = ScaleGrid::default();
    let zero = build_scalogram(&[0.0; 235], &grid).unwrap();
    assert!(zero.data.iter().all(|&v| v == 0.0));
    assert_eq!((zero.height, zero.width), (64, 235));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = build_scalogram(&random_signal(&mut rng), &grid).unwrap();
    for c in 0..3 {
        let ch = s.channel(c);
        assert_eq!(ch.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(ch.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }
    let swapped = [WAVELETS[2], WAVELETS[1], WAVELETS[0]];
    let t = build_scalogram_with(
        &random_signal(&mut ChaCha8Rng::seed_from_u64(2)),
        &grid,
        &swapped,
    )
    .unwrap();
    assert_eq!(t.channel(0), s.channel(2));
}

#[test]
fn resize_matches_opencv_golden() {
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/data/resize_golden.txt"
    ))
    .unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let mut cases = 0;
    while let Some(head) = lines.next() {
        let dims: Vec<usize> = head
            .split_whitespace()
            .skip(1)
            .map(|v| v.parse().unwrap())
            .collect();
        let parse =
            |l: &str| -> Vec<f64> { l.split_whitespace().map(|v| v.parse().unwrap()).collect() };
        let input = parse(lines.next().unwrap());
        let expect = parse(lines.next().unwrap());
        let grid = ScaleGrid::geometric(dims[0], 1.0, 4.0).unwrap();
        let s = Scalogram {
            height: dims[0],
            width: dims[1],
            data: input,
            grid,
        };
        let out = s.resize(dims[2]);
        assert_eq!(out.data.len(), expect.len());
        for (a, b) in out.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6, "case {head}: {a} vs {b}");
        }
        cases += 1;
    }
    assert_eq!(cases, 4);
}

#[test]
fn npy_round_trip_and_header_alignment() {
    let grid = ScaleGrid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = build_scalogram(&random_signal(&mut rng), &grid)
        .unwrap()
        .resize(16);
    let mut bytes = Vec::new();
    s.write_npy(&mut bytes).unwrap();
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    assert_eq!((10 + header_len) % 64, 0);
    assert_eq!(bytes.len(), 10 + header_len + 8 * 3 * 16 * 16);
    let back = Scalogram::read_npy(&mut bytes.as_slice(), grid).unwrap();
    assert_eq!(back, s);
}

#[test]
fn png_has_image_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.png");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = build_scalogram(&random_signal(&mut rng), &ScaleGrid::default()).unwrap();
    s.write_png(&path).unwrap();
    let img = image::open(&path).unwrap();
    assert_eq!((img.width(), img.height()), (235, 64));
}

#[test]
fn cache_cold_and_warm_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cache = ScalogramCache::new(dir.path().join("scalograms")).unwrap();
    let d = simulate_oracle(&OracleParams::default(), 1, 3).unwrap();
    let grid = ScaleGrid::default();
    let mut cold = Vec::new();
    for r in &d.records[..4] {
        let (s, hit) = cache.get_or_build(r, &grid, 32).unwrap();
        assert!(!hit);
        cold.push(s);
    }
    for (r, c) in d.records[..4].iter().zip(&cold) {
        let (s, hit) = cache.get_or_build(r, &grid, 32).unwrap();
        assert!(hit);
        assert_eq!(&s, c);
        assert_eq!(s, build_scalogram(r.samples(), &grid).unwrap().resize(32));
    }
    let files = std::fs::read_dir(cache.dir()).unwrap().count();
    assert_eq!(files, 4);
    let (_, hit) = cache.get_or_build(&d.records[0], &grid, 16).unwrap();
    assert!(!hit);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cwt_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_signal(&mut rng);
        let y = random_signal(&mut rng);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let grid = ScaleGrid::geometric(6, 1.0, 40.0).unwrap();
        for w in &WAVELETS {
            let (cx, cy, cm) = (cwt(&x, w, &grid).unwrap(), cwt(&y, w, &grid).unwrap(), cwt(&mix, w, &grid).unwrap());
            for i in 0..grid.len() {
                let scale = cm[i].iter().fold(1e-12f64, |m, v| m.max(v.abs()));
                for t in 0..235 {
                    let rhs = a * cx[i][t] + b * cy[i][t];
                    prop_assert!((cm[i][t] - rhs).abs() <= 1e-9 * scale);
                }
            }
        }
    }

    #[test]
    fn cwt_is_translation_covariant(seed in any::<u64>(), k in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0; 235];
        for v in &mut x[60..170] {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut shifted = vec![0.0; 235];
        shifted[k..].copy_from_slice(&x[..235 - k]);
        let grid = ScaleGrid::geometric(5, 1.0, 6.0).unwrap();
        for w in &WAVELETS {
            let (cx, cs) = (cwt(&x, w, &grid).unwrap(), cwt(&shifted, w, &grid).unwrap());
            for i in 0..grid.len() {
                for t in k..235 {
                    prop_assert!((cs[i][t] - cx[i][t - k]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn daughter_is_scaled_mother(a in 0.5f64..20.0) {
        let d = daughter(&MotherWavelet::Ricker, a);
        let half = (d.len() / 2) as f64;
        prop_assert_eq!(d.len() % 2, 1);
        prop_assert!((d[d.len() / 2] - MotherWavelet::Ricker.eval(0.0) / a.sqrt()).abs() < 1e-15);
        prop_assert!(half >= 8.0 * a);
    }
}
