use erg_core::{simulate_oracle, Dataset, FlashStrength, Label, OracleParams};
use erg_models::classifier::inverse_frequency;
use erg_models::{tst_train, ClassifierError, Positional, TrainConfig, TstConfig, TstModel};
use erg_nn::gradcheck::check;
use erg_nn::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> TstConfig {
    TstConfig {
        width: 8,
        heads: 2,
        layers: 1,
        ff_width: 16,
        ..TstConfig::default()
    }
}

fn signals(seed: u64, n: usize, len: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(-50.0..50.0)).collect())
        .collect()
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

#[test]
fn probabilities_are_normalized_and_row_local() {
    let m = TstModel::init(&small(), 1).unwrap();
    let x = signals(2, 6, 235);
    let p = m.forward(&refs(&x)).unwrap();
    for row in &p {
        assert!((row[0] + row[1] - 1.0).abs() <= 1e-6);
        assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
    }
    let dup = m.forward(&[&x[0], &x[0]]).unwrap();
    assert_eq!(dup[0], dup[1]);
    let order = [4, 2, 0, 5, 1, 3];
    let shuffled: Vec<&[f64]> = order.iter().map(|&i| x[i].as_slice()).collect();
    let q = m.forward(&shuffled).unwrap();
    for (k, &i) in order.iter().enumerate() {
        assert!((q[k][0] - p[i][0]).abs() <= 1e-12);
    }
}

#[test]
fn wrong_length_is_a_shape_error() {
    let m = TstModel::init(&small(), 1).unwrap();
    assert!(matches!(
        m.forward(&[&[0.0; 100]]),
        Err(ClassifierError::Shape { .. })
    ));
}

#[test]
fn prediction_edge_cases_and_order_invariance() {
    let m = TstModel::init(&small(), 3).unwrap();
    assert!(m.predict(&Dataset::default()).unwrap().is_empty());
    let d = simulate_oracle(&OracleParams::default(), 2, 1).unwrap();
    let one = d.subset(&[0]);
    let p = m.predict(&one).unwrap();
    assert_eq!(p.len(), 1);
    assert!(p[0] > 0.0 && p[0] < 1.0);
    let all = m.predict(&d).unwrap();
    let rev: Vec<usize> = (0..d.len()).rev().collect();
    let back = m.predict(&d.subset(&rev)).unwrap();
    for (k, &i) in rev.iter().enumerate() {
        assert!((back[k] - all[i]).abs() <= 1e-12);
    }
}

#[test]
fn width_must_divide_into_heads() {
    let c = TstConfig {
        width: 10,
        heads: 4,
        ..small()
    };
    assert!(matches!(
        TstModel::init(&c, 0),
        Err(ClassifierError::InvalidConfig(_))
    ));
}

#[test]
fn zero_class_weight_ignores_that_class_exactly() {
    let m = TstModel::init(&small(), 4).unwrap();
    let a = signals(5, 4, 235);
    let mut b = a.clone();
    b[1] = signals(6, 1, 235).remove(0);
    b[3] = signals(7, 1, 235).remove(0);
    let targets = [0, 1, 0, 1];
    let loss = |x: &[Vec<f64>]| {
        let mut g = Graph::new();
        let z = m.logits(&mut g, &m.params, &refs(x)).unwrap();
        let l = g.cross_entropy(z, &targets, &[0.7, 0.0]);
        g.scalar(l)
    };
    assert_eq!(loss(&a), loss(&b));
    assert!(loss(&a) > 0.0);
}

#[test]
fn without_positions_time_reversal_leaves_logits_unchanged() {
    let c = TstConfig {
        positional: Positional::None,
        ..small()
    };
    let m = TstModel::init(&c, 8).unwrap();
    let x = signals(9, 3, 235);
    let rev: Vec<Vec<f64>> = x
        .iter()
        .map(|s| s.iter().rev().copied().collect())
        .collect();
    let logits = |v: &[Vec<f64>]| {
        let mut g = Graph::new();
        let z = m.logits(&mut g, &m.params, &refs(v)).unwrap();
        g.value(z).clone()
    };
    let (p, q) = (logits(&x), logits(&rev));
    for (a, b) in p.iter().zip(q.iter()) {
        assert!((a - b).abs() <= 1e-5);
    }
    let with = TstModel::init(&small(), 8).unwrap();
    let mut g = Graph::new();
    let z1 = with.logits(&mut g, &with.params, &refs(&x)).unwrap();
    let z2 = with.logits(&mut g, &with.params, &refs(&rev)).unwrap();
    let diff = (g.value(z1) - g.value(z2))
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-5, "positional encoding had no effect");
}

#[test]
fn tiny_tst_gradients_match_finite_differences() {
    for positional in [Positional::Sinusoidal, Positional::Learned] {
        let c = TstConfig {
            width: 8,
            heads: 2,
            layers: 1,
            ff_width: 12,
            seq_len: 8,
            positional,
            ..TstConfig::default()
        };
        let m = TstModel::init(&c, 10).unwrap();
        let x = signals(11, 4, 8);
        let targets = [0, 1, 1, 0];
        let weights = [1.5, 0.6];
        let loss = |ps: &erg_nn::ParamSet| {
            let mut g = Graph::training(5);
            let z = m.logits(&mut g, ps, &refs(&x)).unwrap();
            let l = g.cross_entropy(z, &targets, &weights);
            (g.scalar(l), g.backward(l))
        };
        let (_, grads) = loss(&m.params);
        let ids: Vec<_> = m.params.ids().collect();
        let report = check(&m.params, &ids, &grads, 1e-6, 1e-5, |ps| loss(ps).0);
        assert!(
            report.max_relative_error < 1e-4,
            "{positional:?}: {report:?}"
        );
    }
}

#[test]
fn inverse_frequency_weights() {
    assert_eq!(inverse_frequency(&[0, 1, 1, 1]).unwrap(), [2.0, 4.0 / 6.0]);
    assert!(matches!(
        inverse_frequency(&[1, 1]),
        Err(ClassifierError::InvalidFold(_))
    ));
}

fn two_strengths(seed: u64, n: usize) -> Dataset {
    let p = OracleParams {
        noise_sd: 0.5,
        ..OracleParams::default()
    };
    let s = FlashStrength::from_index(4).unwrap();
    simulate_oracle(&p, n, seed).unwrap().with_strength(s)
}

#[test]
fn single_class_fold_is_rejected() {
    let d = two_strengths(1, 6);
    let asd = d.filter(|r| r.label == Label::Asd);
    let err = TstModel::fit(&asd, &d, &small(), 0).unwrap_err();
    assert!(matches!(err, ClassifierError::InvalidFold(_)));
}

#[test]
fn early_stopping_halts_within_patience_of_the_minimum() {
    let train = two_strengths(2, 12);
    let val = two_strengths(3, 4);
    let c = TstConfig {
        train: TrainConfig {
            lr: 3e-3,
            max_epochs: 60,
            patience: 3,
            ..TrainConfig::default()
        },
        ..small()
    };
    let (_, h) = TstModel::fit(&train, &val, &c, 1).unwrap();
    assert_eq!(h.train_loss.len(), h.val_loss.len());
    let min = h.val_loss.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(h.val_loss[h.best_epoch - 1], min);
    assert!(h.epochs() <= h.best_epoch + 3);
    if h.epochs() < 60 {
        assert_eq!(h.epochs(), h.best_epoch + 3);
    }
    assert_eq!(h.class_weights, [1.0, 1.0]);
}

#[test]
fn folds_train_independently_and_models_round_trip() {
    let d = two_strengths(4, 8);
    let c = TstConfig {
        train: TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        },
        ..small()
    };
    let folds = vec![(d.clone(), d.clone()), (d.clone(), d.clone())];
    let out = tst_train(&folds, &c).unwrap();
    assert_eq!(out.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tst.ckpt");
    out[0].0.save(&path).unwrap();
    let back = TstModel::load(&path).unwrap();
    assert_eq!(back.predict(&d).unwrap(), out[0].0.predict(&d).unwrap());
    assert_eq!(back.scaler, out[0].0.scaler);
}

#[test]
fn defaults() {
    let c = TstConfig::default();
    assert_eq!((c.width, c.heads, c.layers, c.ff_width), (64, 4, 3, 128));
    assert_eq!(
        (
            c.train.lr,
            c.train.batch,
            c.train.patience,
            c.train.max_epochs
        ),
        (1e-4, 32, 10, 300)
    );
}
