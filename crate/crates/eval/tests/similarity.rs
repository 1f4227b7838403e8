use erg_core::{
    simulate_oracle, Dataset, ErgRecord, FlashStrength, Label, OracleParams, Provenance,
};
use erg_eval::{pearson, waveform_similarity};

fn oracle() -> Dataset {
    simulate_oracle(&OracleParams::default(), 6, 3).unwrap()
}

fn mapped(ds: &Dataset, f: impl Fn(f64) -> f64) -> Dataset {
    Dataset::new(
        ds.records
            .iter()
            .map(|r| {
                let s: Vec<f64> = r.samples().iter().map(|&v| f(v)).collect();
                ErgRecord::new(
                    s,
                    r.label,
                    r.strength,
                    r.subject_id.clone(),
                    r.eye,
                    Provenance::Synthetic,
                )
                .unwrap()
            })
            .collect(),
    )
}

#[test]
fn identical_sets_match_perfectly() {
    let d = oracle();
    let sim = waveform_similarity(&d, &d);
    assert_eq!(sim.len(), 18);
    for s in sim.values() {
        assert!((s.correlation.unwrap() - 1.0).abs() < 1e-12);
        assert!((s.amplitude_ratio.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(s.n_real, 6);
    }
}

#[test]
fn affine_copies_keep_correlation_and_scale_amplitude() {
    let d = oracle();
    let sim = waveform_similarity(&d, &mapped(&d, |v| 2.0 * v + 5.0));
    for s in sim.values() {
        assert!((s.correlation.unwrap() - 1.0).abs() < 1e-12);
        assert!((s.amplitude_ratio.unwrap() - 2.0).abs() < 1e-12);
    }
    let sim = waveform_similarity(&d, &mapped(&d, |v| -v));
    assert!(sim
        .values()
        .all(|s| (s.correlation.unwrap() + 1.0).abs() < 1e-12));
}

#[test]
fn one_sided_cells_are_skipped() {
    let d = oracle();
    let s0 = FlashStrength::from_index(0).unwrap();
    let part = d.filter(|r| r.label == Label::Asd && r.strength == s0);
    let sim = waveform_similarity(&d, &part);
    assert_eq!(
        sim.keys().copied().collect::<Vec<_>>(),
        vec![(Label::Asd, s0)]
    );
    assert!(waveform_similarity(&d, &Dataset::new(vec![])).is_empty());
}

#[test]
fn pearson_of_constant_is_undefined() {
    assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
    assert!((r - 0.6).abs() < 1e-12);
}
