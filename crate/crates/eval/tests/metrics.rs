use erg_core::Label;
use erg_eval::{auc, metrics, ConfusionCounts, MetricsError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: Option<f64>, b: f64) -> bool {
    a.is_some_and(|a| (a - b).abs() < 1e-12)
}

/// Rank-free AUC over all positive/negative pairs.
fn pairwise_auc(scores: &[(f64, Label)]) -> f64 {
    let pos: Vec<f64> = scores
        .iter()
        .filter(|s| s.1 == Label::Asd)
        .map(|s| s.0)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .filter(|s| s.1 == Label::Control)
        .map(|s| s.0)
        .collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn labels(n_pos: usize, n_neg: usize) -> Vec<Label> {
    let mut v = vec![Label::Asd; n_pos];
    v.extend(vec![Label::Control; n_neg]);
    v
}

#[test]
fn worked_example() {
    let c = ConfusionCounts {
        tp: 9,
        fp: 1,
        tn: 8,
        fn_: 2,
    };
    let m = metrics(&c, &[]).unwrap();
    assert!(close(m.recall, 9.0 / 11.0));
    assert!(close(m.precision, 0.9));
    assert!(close(m.ba, (9.0 / 11.0 + 8.0 / 9.0) / 2.0));
    assert!(close(m.f1, 18.0 / 21.0));
    assert_eq!(m.auc, None);
}

#[test]
fn fifty_random_matrices_match_textbook_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (tp, fp, tn, fn_) = (
            rng.random_range(1..60),
            rng.random_range(1..60),
            rng.random_range(1..60),
            rng.random_range(1..60),
        );
        let c = ConfusionCounts { tp, fp, tn, fn_ };
        let m = metrics(&c, &[(1.0, Label::Asd), (0.0, Label::Control)]).unwrap();
        let (tp, fp, tn, fn_) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
        assert!(close(m.ba, 0.5 * tp / (tp + fn_) + 0.5 * tn / (tn + fp)));
        assert!(close(m.precision, tp / (tp + fp)));
        assert!(close(m.recall, tp / (tp + fn_)));
        assert!(close(m.f1, 2.0 * tp / (2.0 * tp + fp + fn_)));
        assert!(close(m.auc, 1.0));
    }
}

#[test]
fn counts_from_scores_use_an_inclusive_threshold() {
    let truth = [Label::Asd, Label::Control, Label::Asd, Label::Control];
    let c = ConfusionCounts::from_scores(&[0.5, 0.5, 0.2, 0.1], &truth, 0.5).unwrap();
    assert_eq!(
        c,
        ConfusionCounts {
            tp: 1,
            fp: 1,
            tn: 1,
            fn_: 1
        }
    );
    assert!(matches!(
        ConfusionCounts::from_scores(&[0.1], &truth, 0.5),
        Err(MetricsError::Mismatch {
            scores: 1,
            truths: 4
        })
    ));
}

#[test]
fn undefined_metrics_are_none() {
    // No ASD records: recall, BA and AUC have empty denominators.
    let c = ConfusionCounts::from_predictions(&[Label::Asd, Label::Control], &[Label::Control; 2])
        .unwrap();
    let m = metrics(&c, &[(0.9, Label::Control), (0.1, Label::Control)]).unwrap();
    assert_eq!((m.recall, m.ba, m.auc), (None, None, None));
    assert_eq!(m.precision, Some(0.0));
    assert_eq!(m.f1, None);

    // Nothing predicted ASD: precision undefined.
    let c = ConfusionCounts::from_predictions(&[Label::Control; 2], &[Label::Asd, Label::Control])
        .unwrap();
    let m = metrics(&c, &[]).unwrap();
    assert_eq!(m.precision, None);
    assert_eq!(m.recall, Some(0.0));
    assert_eq!(m.ba, Some(0.5));

    assert_eq!(
        metrics(&ConfusionCounts::default(), &[]),
        Err(MetricsError::Empty)
    );
    assert_eq!(
        auc(&[(0.3, Label::Asd)]),
        Err(MetricsError::AucUndefined(Label::Asd))
    );
}

#[test]
fn all_tied_scores_give_half() {
    let s: Vec<_> = labels(7, 4).into_iter().map(|l| (0.42, l)).collect();
    assert_eq!(auc(&s).unwrap(), 0.5);
}

#[test]
fn perfect_and_inverted_rankings() {
    let up: Vec<_> = labels(3, 3)
        .into_iter()
        .zip([6.0, 5.0, 4.0, 3.0, 2.0, 1.0])
        .map(|(l, s)| (s, l))
        .collect();
    assert_eq!(auc(&up).unwrap(), 1.0);
    let down: Vec<_> = up.iter().map(|&(s, l)| (-s, l)).collect();
    assert_eq!(auc(&down).unwrap(), 0.0);
}

#[test]
fn auc_is_invariant_under_monotone_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..20 {
        let n = rng.random_range(4..40);
        let mut s: Vec<(f64, Label)> = (0..n)
            .map(|_| {
                // Coarse grid so ties occur.
                let v = (rng.random_range(-1.0..1.0) * 8.0_f64).round() / 8.0;
                (
                    v,
                    if rng.random_bool(0.5) {
                        Label::Asd
                    } else {
                        Label::Control
                    },
                )
            })
            .collect();
        s[0].1 = Label::Asd;
        s[1].1 = Label::Control;
        let base = auc(&s).unwrap();
        let maps: [fn(f64) -> f64; 4] = [|x| 3.0 * x + 1.0, f64::exp, f64::atan, |x| x.powi(3)];
        for f in maps {
            let t: Vec<_> = s.iter().map(|&(v, l)| (f(v), l)).collect();
            assert!((auc(&t).unwrap() - base).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn midrank_auc_matches_pairwise_count(
        raw in prop::collection::vec((0u8..10, any::<bool>()), 2..60),
    ) {
        let mut s: Vec<(f64, Label)> = raw
            .iter()
            .map(|&(v, asd)| (f64::from(v) / 10.0, if asd { Label::Asd } else { Label::Control }))
            .collect();
        s[0].1 = Label::Asd;
        s[1].1 = Label::Control;
        prop_assert!((auc(&s).unwrap() - pairwise_auc(&s)).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_unit_interval(tp in 0usize..50, fp in 0usize..50, tn in 0usize..50, fn_ in 0usize..50) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let m = metrics(&ConfusionCounts { tp, fp, tn, fn_ }, &[]).unwrap();
        for v in m.values().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
