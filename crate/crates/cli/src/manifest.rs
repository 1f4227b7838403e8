//! Per-run record of every artifact, the command that produced it, and the
//! hashes of the inputs it was built from.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub sha256: String,
    pub command: String,
    /// Input path (relative to the run directory when inside it) to hash.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub artifacts: BTreeMap<String, Artifact>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(erg_core::dataset::hex(&h.finalize()))
}

pub fn sha256_str(s: &str) -> String {
    erg_core::dataset::hex(&Sha256::digest(s.as_bytes()))
}

fn display(run_dir: &Path, p: &Path) -> String {
    p.strip_prefix(run_dir)
        .unwrap_or(p)
        .to_string_lossy()
        .replace('\\', "/")
}

pub struct Recorder {
    run_dir: PathBuf,
    manifest: RunManifest,
}

impl Recorder {
    pub fn open(run_dir: &Path, config_text: &str) -> anyhow::Result<Self> {
        let path = run_dir.join(FILE_NAME);
        let mut manifest: RunManifest = if path.exists() {
            serde_json::from_str(&fs::read_to_string(&path)?)
                .with_context(|| format!("parsing {}", path.display()))?
        } else {
            RunManifest::default()
        };
        manifest.config_sha256 = sha256_str(config_text);
        Ok(Self {
            run_dir: run_dir.to_path_buf(),
            manifest,
        })
    }

    pub fn record(&mut self, output: &Path, command: &str, inputs: &[&Path]) -> anyhow::Result<()> {
        let inputs = inputs
            .iter()
            .map(|p| Ok((display(&self.run_dir, p), sha256_file(p)?)))
            .collect::<anyhow::Result<_>>()?;
        self.manifest.artifacts.insert(
            display(&self.run_dir, output),
            Artifact {
                sha256: sha256_file(output)?,
                command: command.into(),
                inputs,
            },
        );
        Ok(())
    }

    pub fn save(&self) -> anyhow::Result<()> {
        let path = self.run_dir.join(FILE_NAME);
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
