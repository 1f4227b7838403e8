use std::collections::BTreeMap;

use erg_core::{simulate_oracle, Dataset, FlashStrength, Label, OracleParams};

fn closed_form(p: &OracleParams, label: Label, s: usize) -> Vec<f64> {
    let asd = label == Label::Asd;
    let amp = p.strength_gain[s];
    let ta = p.a_time + p.strength_delay[s];
    let tb = p.b_time + p.strength_delay[s] + if asd { p.asd_latency_offset } else { 0.0 };
    let bscale = if asd {
        1.0 + p.asd_amplitude_offset
    } else {
        1.0
    };
    (0..235)
        .map(|i| {
            let t = i as f64;
            let g = |c: f64, w: f64| (-(t - c) * (t - c) / (2.0 * w * w)).exp();
            let mut v = -p.a_amplitude * amp * g(ta, p.a_width)
                + p.b_amplitude * amp * bscale * g(tb, p.b_width);
            if t >= ta {
                let w = (tb - ta) / 3.0;
                v += p.op_amplitude
                    * amp
                    * (2.0 * std::f64::consts::PI * p.op_frequency * (t - ta)).sin()
                    * (-p.op_damping * (t - ta)).exp()
                    * g((ta + tb) / 2.0, w);
            }
            v
        })
        .collect()
}

#[test]
fn noiseless_records_equal_the_template() {
    let p = OracleParams {
        noise_sd: 0.0,
        subject_amplitude_sd: 0.0,
        subject_latency_sd: 0.0,
        ..Default::default()
    };
    let d = simulate_oracle(&p, 3, 9).unwrap();
    for r in &d.records {
        let expect = closed_form(&p, r.label, r.strength.index());
        for (a, b) in r.samples().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn equal_seeds_are_bitwise_identical() {
    let p = OracleParams::default();
    let a = simulate_oracle(&p, 7, 42).unwrap();
    let b = simulate_oracle(&p, 7, 42).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, simulate_oracle(&p, 7, 43).unwrap());
}

/// Per-subject averages so the two eyes of one subject count once.
fn subject_means(d: &Dataset, label: Label, s: FlashStrength) -> Vec<Vec<f64>> {
    let mut by: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for r in d
        .records
        .iter()
        .filter(|r| r.label == label && r.strength == s)
    {
        let e = by.entry(&r.subject_id).or_insert((vec![0.0; 235], 0));
        for (acc, v) in e.0.iter_mut().zip(r.samples()) {
            *acc += v;
        }
        e.1 += 1;
    }
    by.into_values()
        .map(|(sum, n)| sum.into_iter().map(|v| v / n as f64).collect())
        .collect()
}

#[test]
fn zero_class_offsets_give_equal_means() {
    let p = OracleParams {
        asd_amplitude_offset: 0.0,
        asd_latency_offset: 0.0,
        ..Default::default()
    };
    let d = simulate_oracle(&p, 100, 4).unwrap();
    for s in FlashStrength::all() {
        let a = subject_means(&d, Label::Asd, s);
        let c = subject_means(&d, Label::Control, s);
        for t in 0..235 {
            let stats = |xs: &[Vec<f64>]| {
                let n = xs.len() as f64;
                let m = xs.iter().map(|x| x[t]).sum::<f64>() / n;
                let v = xs.iter().map(|x| (x[t] - m).powi(2)).sum::<f64>() / (n - 1.0);
                (m, v / n)
            };
            let ((ma, va), (mc, vc)) = (stats(&a), stats(&c));
            let z = (ma - mc) / (va + vc).sqrt();
            assert!(z.abs() < 5.0, "strength {s}, t {t}: z = {z:.2}");
        }
    }
}

fn features(x: &[f64]) -> [f64; 3] {
    let (mut lo, mut hi, mut arg) = (f64::INFINITY, f64::NEG_INFINITY, 0);
    for (i, &v) in x.iter().enumerate() {
        lo = lo.min(v);
        if v > hi {
            hi = v;
            arg = i;
        }
    }
    [lo, hi, arg as f64]
}

/// Logistic regression on standardized features by full-batch gradient
/// descent. Returns a predictor.
fn fit_linear(xs: &[[f64; 3]], ys: &[f64]) -> impl Fn(&[f64; 3]) -> bool {
    let n = xs.len() as f64;
    let mut mean = [0.0; 3];
    let mut sd = [0.0; 3];
    for j in 0..3 {
        mean[j] = xs.iter().map(|x| x[j]).sum::<f64>() / n;
        sd[j] = (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n)
            .sqrt()
            .max(1e-12);
    }
    let z = move |x: &[f64; 3]| {
        [
            (x[0] - mean[0]) / sd[0],
            (x[1] - mean[1]) / sd[1],
            (x[2] - mean[2]) / sd[2],
        ]
    };
    let mut w = [0.0; 4];
    for _ in 0..3000 {
        let mut g = [0.0; 4];
        for (x, &y) in xs.iter().zip(ys) {
            let f = z(x);
            let logit = w[0] + w[1] * f[0] + w[2] * f[1] + w[3] * f[2];
            let err = 1.0 / (1.0 + (-logit).exp()) - y;
            g[0] += err;
            for j in 0..3 {
                g[j + 1] += err * f[j];
            }
        }
        for j in 0..4 {
            w[j] -= 0.5 * g[j] / n;
        }
    }
    move |x| {
        let f = z(x);
        w[0] + w[1] * f[0] + w[2] * f[1] + w[3] * f[2] > 0.0
    }
}

#[test]
fn default_classes_are_linearly_separable_per_strength() {
    let p = OracleParams::default();
    let train = simulate_oracle(&p, 100, 10).unwrap();
    let test = simulate_oracle(&p, 100, 11).unwrap();
    for s in FlashStrength::all() {
        let cell = |d: &Dataset| -> (Vec<[f64; 3]>, Vec<f64>) {
            d.with_strength(s)
                .records
                .iter()
                .map(|r| (features(r.samples()), (r.label == Label::Asd) as u8 as f64))
                .unzip()
        };
        let (xs, ys) = cell(&train);
        let predict = fit_linear(&xs, &ys);
        let (tx, ty) = cell(&test);
        let correct = tx
            .iter()
            .zip(&ty)
            .filter(|(x, &y)| predict(x) == (y == 1.0))
            .count();
        let acc = correct as f64 / tx.len() as f64;
        assert!(acc >= 0.9, "strength {s}: accuracy {acc:.3}");
    }
}
