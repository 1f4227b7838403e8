use erg_core::{
    record_hash, simulate_oracle, split_indices, Dataset, ErgRecord, FlashStrength, OracleParams,
    Provenance, SplitPlan,
};
use erg_eval::{run_table2, synthesize_for, Augmentation, EvalError, EvalOptions, Subset, Variant};
use erg_models::{ClassifierSpec, GanCheckpoint, GanConfig, TrainConfig, TstConfig};

fn data() -> Dataset {
    simulate_oracle(&OracleParams::default(), 8, 5).unwrap()
}

fn gan() -> GanCheckpoint {
    GanCheckpoint::init(&GanConfig {
        hidden: 4,
        fc_width: 8,
        disc_fc: [8, 4],
        ..GanConfig::default()
    })
    .unwrap()
}

fn tst() -> ClassifierSpec {
    ClassifierSpec::Tst(TstConfig {
        width: 8,
        heads: 2,
        layers: 1,
        ff_width: 16,
        dropout: 0.0,
        train: TrainConfig {
            max_epochs: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        },
        ..TstConfig::default()
    })
}

fn plan() -> SplitPlan {
    SplitPlan {
        folds: 2,
        seed: 9,
        ..SplitPlan::default()
    }
}

fn options(augmentation: Augmentation) -> EvalOptions {
    EvalOptions {
        augmentation,
        subsets: vec![
            Subset::Strength(FlashStrength::from_index(0).unwrap()),
            Subset::All,
        ],
        seed: 3,
        ..EvalOptions::default()
    }
}

#[test]
fn test_record_in_generator_manifest_is_rejected() {
    let real = data();
    let idx = split_indices(&real, &plan(), true).unwrap();
    let leaked = record_hash(&real.records[idx.test[0]]);
    let mut ck = gan();
    ck.training_manifest = idx
        .pool
        .iter()
        .map(|&i| record_hash(&real.records[i]))
        .collect();
    ck.training_manifest.push(leaked.clone());
    match run_table2(
        &real,
        &ck,
        &plan(),
        &[tst()],
        &options(Augmentation::PerCell(1)),
    ) {
        Err(EvalError::Leakage(h)) => assert_eq!(h, leaked),
        other => panic!("expected a leakage error, got {other:?}"),
    }
}

#[test]
fn synthetic_records_outside_training_are_rejected() {
    let real = data();
    let tainted = Dataset::new(
        real.records
            .iter()
            .map(|r| {
                ErgRecord::new(
                    r.samples().to_vec(),
                    r.label,
                    r.strength,
                    r.subject_id.clone(),
                    r.eye,
                    Provenance::Synthetic,
                )
                .unwrap()
            })
            .collect(),
    );
    let err = run_table2(
        &tainted,
        &gan(),
        &plan(),
        &[tst()],
        &options(Augmentation::PerCell(0)),
    )
    .unwrap_err();
    assert!(
        matches!(err, EvalError::SyntheticOutsideTraining { ref set, .. } if set == "test"),
        "{err}"
    );
}

#[test]
fn invalid_options_are_rejected() {
    let (real, ck) = (data(), gan());
    let one_fold = SplitPlan { folds: 1, ..plan() };
    assert!(matches!(
        run_table2(
            &real,
            &ck,
            &one_fold,
            &[tst()],
            &options(Augmentation::PerCell(0))
        ),
        Err(EvalError::InvalidOptions(_))
    ));
    let mut o = options(Augmentation::Ratio(-1.0));
    assert!(matches!(
        run_table2(&real, &ck, &plan(), &[tst()], &o),
        Err(EvalError::InvalidOptions(_))
    ));
    o.augmentation = Augmentation::PerCell(0);
    o.subsets.clear();
    assert!(matches!(
        run_table2(&real, &ck, &plan(), &[tst()], &o),
        Err(EvalError::InvalidOptions(_))
    ));
    assert!(matches!(
        run_table2(&real, &ck, &plan(), &[], &options(Augmentation::PerCell(0))),
        Err(EvalError::InvalidOptions(_))
    ));
}

#[test]
fn zero_augmentation_gives_identical_variants() {
    let report = run_table2(
        &data(),
        &gan(),
        &plan(),
        &[tst()],
        &options(Augmentation::PerCell(0)),
    )
    .unwrap();
    assert_eq!(report.cells.len(), 4);
    for subset in options(Augmentation::PerCell(0)).subsets {
        let a = report.get("TST", subset, Variant::Original).unwrap();
        let b = report.get("TST", subset, Variant::Augmented).unwrap();
        assert_eq!(a.folds.len(), 2);
        assert_eq!(a, b);
        assert!(a.mean.ba.is_some());
    }
}

#[test]
fn synthesis_follows_cell_sizes_and_seed() {
    let ck = gan();
    let train = data().truncate_per_cell(3);
    let syn = synthesize_for(&ck, &train, Augmentation::Ratio(2.0), 1, 0).unwrap();
    assert_eq!(syn.len(), 2 * train.len());
    assert!(syn
        .records
        .iter()
        .all(|r| r.provenance == Provenance::Synthetic));
    for (cell, n) in train.manifest().counts {
        assert_eq!(syn.manifest().get(cell.0, cell.1), 2 * n);
    }
    let again = synthesize_for(&ck, &train, Augmentation::Ratio(2.0), 1, 0).unwrap();
    assert_eq!(syn.hashes(), again.hashes());
    let other_fold = synthesize_for(&ck, &train, Augmentation::Ratio(2.0), 1, 1).unwrap();
    assert_ne!(syn.hashes(), other_fold.hashes());
    assert_eq!(Augmentation::PerCell(4).count(100), 4);
    assert_eq!(Augmentation::Ratio(0.5).count(3), 2);
}
