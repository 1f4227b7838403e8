//! On-disk cache of resized scalograms.
//!
//! One NPY file per entry, `<key>.npy`, where the key is the hex SHA-256 of
//! the record hash, the scale values and the image side. Entries are
//! written to a temporary file in the same directory and renamed into
//! place, so readers never see a partial file.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::dataset::{hex, record_hash};
use crate::signal::ErgRecord;
use crate::wavelet::{build_scalogram, ScaleGrid, Scalogram, WaveletError};

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct ScalogramCache {
    dir: PathBuf,
}

impl ScalogramCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, WaveletError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(record_hash: &str, grid: &ScaleGrid, side: usize) -> String {
        let mut h = Sha256::new();
        h.update(record_hash.as_bytes());
        h.update((grid.len() as u64).to_le_bytes());
        for a in grid.scales() {
            h.update(a.to_bits().to_le_bytes());
        }
        h.update((side as u64).to_le_bytes());
        hex(&h.finalize())
    }

    pub fn path_for(&self, record: &ErgRecord, grid: &ScaleGrid, side: usize) -> PathBuf {
        self.dir.join(format!(
            "{}.npy",
            Self::key(&record_hash(record), grid, side)
        ))
    }

    /// Returns the cached scalogram, building and storing it on a miss.
    /// The flag is true on a hit.
    pub fn get_or_build(
        &self,
        record: &ErgRecord,
        grid: &ScaleGrid,
        side: usize,
    ) -> Result<(Scalogram, bool), WaveletError> {
        let path = self.path_for(record, grid, side);
        if let Ok(f) = File::open(&path) {
            if let Ok(s) = Scalogram::read_npy(&mut BufReader::new(f), grid.clone()) {
                if s.height == side && s.width == side {
                    return Ok((s, true));
                }
            }
        }
        let s = build_scalogram(record.samples(), grid)?.resize(side);
        let tmp = self.dir.join(format!(
            ".{}.{}.{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("entry"),
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            s.write_npy(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, &path)?;
        Ok((s, false))
    }
}
