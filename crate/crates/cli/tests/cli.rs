use std::fs;
use std::path::Path;
use std::process::Command;

use erg_cli::commands::{self, Run};
use erg_cli::config::{RunConfig, OUTPUT_ROOT_ENV};
use erg_core::load_dataset;

fn tiny(root: &Path) -> RunConfig {
    let mut c = RunConfig::from_toml(include_str!("../../../configs/smoke.toml")).unwrap();
    c.output_dir = root.to_path_buf();
    c.data.n_per_cell = 6;
    c.gan.epochs = 2;
    c.gan.checkpoint_every = 1;
    c.gan.hidden = 4;
    c.gan.fc_width = 8;
    c.gan.disc_fc = [8, 4];
    c.generate.n_per_cell = 2;
    c
}

#[test]
fn example_config_spells_out_the_defaults() {
    let c = RunConfig::from_toml(include_str!("../../../configs/example.toml")).unwrap();
    assert_eq!(c, RunConfig::default());
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let d = RunConfig::default();
    assert_eq!(RunConfig::from_toml(&d.to_toml()).unwrap(), d);
    assert_eq!(RunConfig::from_toml("").unwrap(), d);
    assert!(RunConfig::from_toml("sede = 1").is_err());
    assert!(RunConfig::from_toml("[gan]\nhiden = 3").is_err());
    let c = RunConfig::from_toml("[gan.generator_adam]\nlr = 0.001").unwrap();
    assert_eq!(c.gan.generator_adam.lr, 0.001);
    assert_eq!(c.gan.generator_adam.beta1, 0.5);
}

#[test]
fn simulate_writes_one_row_per_cell_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.data.n_per_cell = 1;
    let first = commands::simulate(&mut Run::open(c.clone()).unwrap()).unwrap();
    let bytes = fs::read(&first).unwrap();
    assert_eq!(load_dataset(&first).unwrap().len(), 18);
    assert_eq!(String::from_utf8_lossy(&bytes).lines().count(), 19);
    c.run_name = Some("again".into());
    let second = commands::simulate(&mut Run::open(c).unwrap()).unwrap();
    assert_ne!(first, second);
    assert_eq!(fs::read(second).unwrap(), bytes);
}

#[test]
fn pipeline_writes_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    let mut run = Run::open(c.clone()).unwrap();
    commands::simulate(&mut run).unwrap();
    commands::train_gan(&mut run).unwrap();
    assert!(run.path("gan/epoch-000001.bin").exists());
    let syn = commands::generate(&mut run).unwrap();
    let ds = load_dataset(&syn).unwrap();
    assert_eq!(ds.len(), 18 * 2);
    assert!(ds
        .records
        .iter()
        .all(|r| r.provenance == erg_core::Provenance::Synthetic));

    let figures = commands::plot(&mut run).unwrap();
    assert_eq!(figures.len(), 9 * 2 + 1);
    for f in &figures {
        let svg = fs::read_to_string(f).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
    let manifest = fs::read_to_string(run.path("manifest.json")).unwrap();
    assert!(manifest.contains("\"data/real.csv\""));
    assert!(manifest.contains("\"gan/checkpoint.bin\""));

    // Empty generation keeps the header.
    c.generate.n_per_cell = 0;
    c.generate.filter = Some(erg_core::FilterSpec::default());
    let mut run = Run::open(c).unwrap();
    let empty = commands::generate(&mut run).unwrap();
    let text = fs::read_to_string(&empty).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("subject_id,"));
}

#[test]
fn missing_prerequisites_name_the_producing_command() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::open(tiny(dir.path())).unwrap();
    let e = commands::train_gan(&mut run).unwrap_err().to_string();
    assert!(e.contains("ergsyn simulate"), "{e}");
    commands::simulate(&mut run).unwrap();
    let e = commands::generate(&mut run).unwrap_err().to_string();
    assert!(e.contains("ergsyn train-gan"), "{e}");
    let e = commands::plot(&mut run).unwrap_err().to_string();
    assert!(e.contains("ergsyn generate"), "{e}");
}

fn ergsyn(root: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_ergsyn"))
        .args(args)
        .env(OUTPUT_ROOT_ENV, root)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(ergsyn(root, &["--help"]), 0);
    assert_eq!(ergsyn(root, &["no-such-command"]), 1);
    let bad = root.join("bad.toml");
    fs::write(&bad, "bogus = 1\n").unwrap();
    assert_eq!(ergsyn(root, &["-c", bad.to_str().unwrap(), "simulate"]), 1);
    assert_eq!(ergsyn(root, &["generate"]), 2);

    let cfg = root.join("diverge.toml");
    fs::write(
        &cfg,
        "[data]\nn_per_cell = 6\n[split]\nfolds = 2\n\
         [gan]\nhidden = 4\nfc_width = 8\ndisc_fc = [8, 4]\nepochs = 2\n\
         generator_adam = { lr = 1e250 }\ndiscriminator_adam = { lr = 1e250 }\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    assert_eq!(ergsyn(root, &["-c", c, "simulate", "--n-per-cell", "6"]), 0);
    assert!(
        root.join("seed-0/data/real.csv").exists(),
        "the environment variable sets the output root"
    );
    assert_eq!(ergsyn(root, &["-c", c, "train-gan"]), 3);
}
