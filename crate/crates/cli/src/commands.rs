use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use erg_core::{
    butterworth_lowpass, derive_seed, load_dataset, save_dataset, simulate_oracle, split_indices,
    Dataset, ErgRecord, FlashStrength, Label, Provenance,
};
use erg_eval::{metrics, run_table2, waveform_similarity, ConfusionCounts, Metrics};
use erg_models::cgan::trained_conditions;
use erg_models::{train_gan_with, Classifier, GanCheckpoint, GanError, LatentSeed, LossCurves};

use crate::config::RunConfig;
use crate::manifest::Recorder;
use crate::plot::{Chart, Series};

pub const REAL_CSV: &str = "data/real.csv";
pub const GAN_CHECKPOINT: &str = "gan/checkpoint.bin";
pub const GAN_LOSSES: &str = "gan/losses.csv";
pub const SYNTHETIC_CSV: &str = "synthetic/synthetic.csv";
pub const REPORT_KV: &str = "eval/report.txt";
pub const REPORT_MD: &str = "eval/report.md";
pub const REPORT_JSON: &str = "eval/report.json";
pub const SIMILARITY: &str = "eval/similarity.txt";
pub const FIGURES: &str = "figures";

/// Everything a command needs: the effective config and where to write.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    recorder: Recorder,
}

impl Run {
    pub fn open(config: RunConfig) -> anyhow::Result<Self> {
        let config = config.seeded();
        let dir = config.run_dir();
        fs::create_dir_all(&dir)
            .with_context(|| format!("creating run directory {}", dir.display()))?;
        let text = config.to_toml();
        fs::write(dir.join("config.toml"), &text)?;
        let recorder = Recorder::open(&dir, &text)?;
        Ok(Self {
            config,
            dir,
            recorder,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn output(&self, rel: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    fn record(&mut self, output: &Path, command: &str, inputs: &[&Path]) -> anyhow::Result<()> {
        self.recorder.record(output, command, inputs)?;
        self.recorder.save()
    }

    fn real_path(&self) -> PathBuf {
        self.config
            .data
            .path
            .clone()
            .unwrap_or_else(|| self.path(REAL_CSV))
    }

    fn real(&self) -> anyhow::Result<(Dataset, PathBuf)> {
        let p = self.real_path();
        if !p.exists() {
            bail!(
                "no real dataset at {}; run `ergsyn simulate` first or set data.path",
                p.display()
            );
        }
        Ok((
            load_dataset(&p).with_context(|| format!("loading {}", p.display()))?,
            p,
        ))
    }

    fn require(&self, rel: &str, producer: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            bail!("missing {}; run `ergsyn {producer}` first", p.display());
        }
        Ok(p)
    }

    fn checkpoint(&self) -> anyhow::Result<(GanCheckpoint, PathBuf)> {
        let p = self.require(GAN_CHECKPOINT, "train-gan")?;
        Ok((
            GanCheckpoint::load(&p).with_context(|| format!("loading {}", p.display()))?,
            p,
        ))
    }

    /// Real records outside the held-out test set.
    fn pool(&self, real: &Dataset) -> anyhow::Result<Dataset> {
        let idx = split_indices(
            real,
            &self.config.split,
            self.config.evaluate.subject_grouping,
        )?;
        Ok(real.subset(&idx.pool))
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn simulate(run: &mut Run) -> anyhow::Result<PathBuf> {
    let c = &run.config.data;
    let ds = simulate_oracle(
        &c.oracle,
        c.n_per_cell,
        derive_seed(run.config.seed, "simulate"),
    )
    .map_err(|e| anyhow!("{e}"))?;
    let out = run.output(REAL_CSV)?;
    save_dataset(&out, &ds)?;
    let back = load_dataset(&out)?;
    if back.len() != ds.len() {
        bail!("{} rows written but {} read back", ds.len(), back.len());
    }
    println!("{}", ds.manifest());
    run.record(&out, "simulate", &[])?;
    Ok(out)
}

fn curves_csv(c: &LossCurves) -> String {
    let mut s = "epoch,g_loss,d_loss,d_acc_real,d_acc_fake\n".to_string();
    for e in 0..c.len() {
        writeln!(
            s,
            "{},{},{},{},{}",
            e + 1,
            c.g_loss[e],
            c.d_loss[e],
            c.d_acc_real[e],
            c.d_acc_fake[e]
        )
        .unwrap();
    }
    s
}

pub fn train_gan(run: &mut Run) -> anyhow::Result<PathBuf> {
    let (real, real_path) = run.real()?;
    let pool = run.pool(&real)?;
    log::info!(
        "training the generator on {} real records outside the test set",
        pool.len()
    );
    let dir = run.output("gan/x")?.parent().unwrap().to_path_buf();
    let mut full = LossCurves::default();
    let mut save_err = None;
    let result = train_gan_with(&pool, &run.config.gan, |ck| {
        full = ck.curves.clone();
        let p = dir.join(format!("epoch-{:06}.bin", ck.epoch));
        if let Err(e) = ck.save(&p) {
            save_err.get_or_insert(e);
        }
    });
    if let Some(e) = save_err {
        return Err(e).context("saving an intermediate checkpoint");
    }
    let losses = run.path(GAN_LOSSES);
    let ck = match result {
        Ok(ck) => ck,
        Err(GanError::Diverged {
            epoch,
            last_checkpoint,
        }) => {
            if let Some(last) = &last_checkpoint {
                last.save(&dir.join("last-before-divergence.bin"))?;
                write_text(&losses, &curves_csv(&last.curves))?;
            }
            return Err(GanError::Diverged {
                epoch,
                last_checkpoint,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    write_text(&losses, &curves_csv(&full))?;
    let selection: String = std::iter::once("epoch,heldback_accuracy\n".to_string())
        .chain(
            ck.selection
                .iter()
                .map(|s| format!("{},{}\n", s.epoch, s.accuracy)),
        )
        .collect();
    let sel_path = run.path("gan/selection.csv");
    write_text(&sel_path, &selection)?;
    let out = run.path(GAN_CHECKPOINT);
    ck.save(&out)?;
    println!("selected epoch {} of {}", ck.epoch, run.config.gan.epochs);
    run.record(&losses, "train-gan", &[&real_path])?;
    run.record(&sel_path, "train-gan", &[&real_path])?;
    run.record(&out, "train-gan", &[&real_path])?;
    Ok(out)
}

/// `n_per_cell` records for every cell the generator was trained on.
pub fn synthesize(ck: &GanCheckpoint, n_per_cell: usize, seed: u64) -> anyhow::Result<Dataset> {
    let mut requests = Vec::new();
    for cond in trained_conditions(ck) {
        for i in 0..n_per_cell {
            let s = derive_seed(
                seed,
                &format!("generate.{}.{}.{i}", cond.label, cond.strength.index()),
            );
            requests.push((cond, LatentSeed::from_seed(s)));
        }
    }
    Ok(Dataset::new(ck.generate_batch(&requests)?))
}

pub fn generate(run: &mut Run) -> anyhow::Result<PathBuf> {
    let (ck, ck_path) = run.checkpoint()?;
    let mut ds = synthesize(&ck, run.config.generate.n_per_cell, run.config.seed)?;
    if let Some(spec) = &run.config.generate.filter {
        ds.records = ds
            .records
            .into_iter()
            .map(|r| {
                let s = butterworth_lowpass(r.samples(), spec)?;
                Ok(ErgRecord::new(
                    s,
                    r.label,
                    r.strength,
                    r.subject_id,
                    r.eye,
                    Provenance::Synthetic,
                )?)
            })
            .collect::<anyhow::Result<_>>()?;
    }
    let out = run.output(SYNTHETIC_CSV)?;
    save_dataset(&out, &ds)?;
    println!(
        "{} synthetic records written to {}",
        ds.len(),
        out.display()
    );
    run.record(&out, "generate", &[&ck_path])?;
    Ok(out)
}

fn metrics_line(m: &Metrics) -> String {
    Metrics::NAMES
        .iter()
        .zip(m.values())
        .map(|(n, v)| {
            format!(
                "{n}={}",
                v.map_or("undefined".to_string(), |x| x.to_string())
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Trains each configured classifier on the first fold, optionally with the
/// generated records added, and scores it on the test set.
pub fn train_clf(run: &mut Run, augment: bool) -> anyhow::Result<Vec<PathBuf>> {
    let (real, real_path) = run.real()?;
    let idx = split_indices(
        &real,
        &run.config.split,
        run.config.evaluate.subject_grouping,
    )?;
    if idx.folds.len() < 2 {
        bail!("split.folds must be at least 2");
    }
    let test = real.subset(&idx.test);
    let val = real.subset(&idx.folds[0]);
    let mut train = real.subset(&idx.train(0));
    let mut inputs = vec![real_path];
    if augment {
        let p = run.require(SYNTHETIC_CSV, "generate")?;
        train = erg_core::merge(&train, &load_dataset(&p)?);
        inputs.push(p);
    }
    let cache = erg_core::ScalogramCache::new(run.path("scalograms"))?;
    let mut outs = Vec::new();
    for spec in run.config.classifiers.specs() {
        let name = spec.name().to_lowercase();
        let (model, history) = spec.fit(
            &train,
            &val,
            derive_seed(run.config.seed, &format!("train-clf.{name}")),
            Some(&cache),
        )?;
        let out = run.output(&format!("classifiers/{name}.bin"))?;
        match &model {
            Classifier::Tst(m) => m.save(&out)?,
            Classifier::Vit(m) => m.save(&out)?,
        }
        let scores = model.predict(&test, Some(&cache))?;
        let truth: Vec<Label> = test.records.iter().map(|r| r.label).collect();
        let counts = ConfusionCounts::from_scores(&scores, &truth, run.config.evaluate.threshold)?;
        let m = metrics(&counts, &scores.into_iter().zip(truth).collect::<Vec<_>>())?;
        let line = format!(
            "model={} best_epoch={} {}\n",
            spec.name(),
            history.best_epoch,
            metrics_line(&m)
        );
        print!("{line}");
        let hist = run.path(&format!("classifiers/{name}_history.json"));
        write_text(&hist, &serde_json::to_string_pretty(&history)?)?;
        let test_path = run.path(&format!("classifiers/{name}_test.txt"));
        write_text(&test_path, &line)?;
        let ins: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
        for p in [&out, &hist, &test_path] {
            run.record(p, "train-clf", &ins)?;
        }
        outs.push(out);
    }
    Ok(outs)
}

pub fn evaluate(run: &mut Run) -> anyhow::Result<PathBuf> {
    let (real, real_path) = run.real()?;
    let (ck, ck_path) = run.checkpoint()?;
    let options = run
        .config
        .evaluate
        .options(run.config.seed, run.path("scalograms"));
    let report = run_table2(
        &real,
        &ck,
        &run.config.split,
        &run.config.classifiers.specs(),
        &options,
    )?;
    let kv = run.output(REPORT_KV)?;
    write_text(&kv, &report.to_key_value())?;
    let md = run.path(REPORT_MD);
    write_text(&md, &report.to_markdown())?;
    let json = run.path(REPORT_JSON);
    write_text(&json, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    print!("{}", report.to_markdown());
    for p in [&kv, &md, &json] {
        run.record(p, "evaluate", &[&real_path, &ck_path])?;
    }
    let syn_path = run.path(SYNTHETIC_CSV);
    if syn_path.exists() {
        let sim = waveform_similarity(&run.pool(&real)?, &load_dataset(&syn_path)?);
        let mut s = String::new();
        for ((label, strength), v) in &sim {
            let f = |x: Option<f64>| x.map_or("undefined".to_string(), |x| x.to_string());
            writeln!(
                s,
                "label={label} strength={strength} correlation={} amplitude_ratio={} n_real={} n_synthetic={}",
                f(v.correlation),
                f(v.amplitude_ratio),
                v.n_real,
                v.n_synthetic
            )
            .unwrap();
        }
        let out = run.path(SIMILARITY);
        write_text(&out, &s)?;
        run.record(&out, "evaluate", &[&real_path, &syn_path])?;
    }
    Ok(kv)
}

fn read_curves(path: &Path) -> anyhow::Result<LossCurves> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut c = LossCurves::default();
    for (i, line) in text.lines().enumerate().skip(1) {
        let v: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(str::parse)
            .collect::<Result<_, _>>()
            .with_context(|| format!("{} line {}", path.display(), i + 1))?;
        if v.len() != 4 {
            bail!("{} line {}: expected 5 columns", path.display(), i + 1);
        }
        c.g_loss.push(v[0]);
        c.d_loss.push(v[1]);
        c.d_acc_real.push(v[2]);
        c.d_acc_fake.push(v[3]);
    }
    Ok(c)
}

const MAX_TRACES: usize = 10;

/// One overlay per (strength, class) plus the loss figure.
pub fn plot(run: &mut Run) -> anyhow::Result<Vec<PathBuf>> {
    let (real, real_path) = run.real()?;
    let syn_path = run.require(SYNTHETIC_CSV, "generate")?;
    let loss_path = run.require(GAN_LOSSES, "train-gan")?;
    let synthetic = load_dataset(&syn_path)?;
    let mut outs = Vec::new();
    for s in FlashStrength::all() {
        for label in Label::ALL {
            let pick = |ds: &Dataset| -> Vec<Vec<f64>> {
                ds.records
                    .iter()
                    .filter(|r| r.label == label && r.strength == s)
                    .take(MAX_TRACES)
                    .map(|r| r.samples().to_vec())
                    .collect()
            };
            let (reals, syns) = (pick(&real), pick(&synthetic));
            let color = match label {
                Label::Asd => "#d62728",
                Label::Control => "#1f77b4",
            };
            let mut series: Vec<Series> = syns
                .iter()
                .map(|ys| Series {
                    ys,
                    color,
                    dashed: false,
                    width: 1.2,
                })
                .collect();
            series.extend(reals.iter().map(|ys| Series {
                ys,
                color: "black",
                dashed: true,
                width: 1.0,
            }));
            let chart = Chart {
                title: format!("{label}, strength {s} log cd·s·m⁻²"),
                x_label: "sample",
                y_label: "amplitude (µV)",
                series,
                legend: vec![
                    (color, false, format!("synthetic ({})", syns.len())),
                    ("black", true, format!("real ({})", reals.len())),
                ],
                x0: 0.0,
            };
            let out = run.output(&format!(
                "{FIGURES}/overlay_s{}_{}.svg",
                s.index(),
                label.as_str().to_lowercase()
            ))?;
            write_text(&out, &chart.render())?;
            run.record(&out, "plot", &[&real_path, &syn_path])?;
            outs.push(out);
        }
    }
    let c = read_curves(&loss_path)?;
    let chart = Chart {
        title: "GAN training losses".into(),
        x_label: "epoch",
        y_label: "mean batch loss",
        series: vec![
            Series {
                ys: &c.g_loss,
                color: "#2ca02c",
                dashed: false,
                width: 1.5,
            },
            Series {
                ys: &c.d_loss,
                color: "#9467bd",
                dashed: false,
                width: 1.5,
            },
        ],
        legend: vec![
            ("#2ca02c", false, "generator".into()),
            ("#9467bd", false, "discriminator".into()),
        ],
        x0: 1.0,
    };
    let out = run.output(&format!("{FIGURES}/gan_losses.svg"))?;
    write_text(&out, &chart.render())?;
    run.record(&out, "plot", &[&loss_path])?;
    outs.push(out);
    Ok(outs)
}
