//! Versioned binary container for model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "ERGCKPT\0"
//! version    u32      FORMAT_VERSION
//! tag        u32 length + UTF-8 bytes      payload kind, e.g. "cgan"
//! metadata   u64 length + UTF-8 JSON       configuration, counters, curves
//! count      u32                           number of tensors
//! tensor*    u32 name length + UTF-8 name
//!            u32 rows, u32 cols
//!            rows·cols f64, row-major
//! ```
//!
//! Tensor order is preserved, so write → read → write is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::optim::Adam;
use crate::param::{Matrix, ParamSet};

pub const MAGIC: &[u8; 8] = b"ERGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

const MAX_NAME: u32 = 1 << 16;
const MAX_META: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("payload tag mismatch: expected {expected:?}, found {found:?}")]
    TagMismatch { expected: String, found: String },
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub tag: String,
    pub metadata: String,
    pub tensors: Vec<(String, Matrix)>,
}

impl Container {
    pub fn new(tag: impl Into<String>, metadata: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            metadata: metadata.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.push((name.into(), value));
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix, ContainerError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| ContainerError::Malformed(format!("missing tensor {name:?}")))
    }

    /// Stores every parameter of `ps` under `prefix/<name>`.
    pub fn push_params(&mut self, prefix: &str, ps: &ParamSet) {
        for (_, p) in ps.iter() {
            self.push(format!("{prefix}/{}", p.name), p.value.clone());
        }
    }

    /// Overwrites every parameter of `ps` from `prefix/<name>`, checking
    /// shapes.
    pub fn restore_params(&self, prefix: &str, ps: &mut ParamSet) -> Result<(), ContainerError> {
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let key = format!("{prefix}/{}", ps.name(id));
            let stored = self.tensor(&key)?;
            if stored.dim() != ps.get(id).dim() {
                return Err(ContainerError::Malformed(format!(
                    "tensor {key:?} has shape {:?}, model expects {:?}",
                    stored.dim(),
                    ps.get(id).dim()
                )));
            }
            ps.get_mut(id).assign(stored);
        }
        Ok(())
    }

    /// Stores Adam moments under `prefix/m/<k>` and `prefix/v/<k>`; the step
    /// counter and hyperparameters belong in the metadata.
    pub fn push_adam(&mut self, prefix: &str, adam: &Adam) {
        for (k, (m, v)) in adam.first.iter().zip(&adam.second).enumerate() {
            self.push(format!("{prefix}/m/{k}"), m.clone());
            self.push(format!("{prefix}/v/{k}"), v.clone());
        }
    }

    pub fn restore_adam(&self, prefix: &str, adam: &mut Adam) -> Result<(), ContainerError> {
        for k in 0..adam.first.len() {
            let m = self.tensor(&format!("{prefix}/m/{k}"))?;
            let v = self.tensor(&format!("{prefix}/v/{k}"))?;
            if m.dim() != adam.first[k].dim() || v.dim() != adam.second[k].dim() {
                return Err(ContainerError::Malformed(format!(
                    "optimizer state {prefix}/{k} shape mismatch"
                )));
            }
            adam.first[k].assign(m);
            adam.second[k].assign(v);
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), ContainerError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        write_str32(w, &self.tag)?;
        w.write_u64::<LittleEndian>(self.metadata.len() as u64)?;
        w.write_all(self.metadata.as_bytes())?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, m) in &self.tensors {
            write_str32(w, name)?;
            w.write_u32::<LittleEndian>(m.nrows() as u32)?;
            w.write_u32::<LittleEndian>(m.ncols() as u32)?;
            for v in m.iter() {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, ContainerError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let tag = read_str32(r)?;
        let meta_len = r.read_u64::<LittleEndian>()?;
        if meta_len > MAX_META {
            return Err(ContainerError::Malformed(format!(
                "metadata length {meta_len}"
            )));
        }
        let mut meta = vec![0u8; meta_len as usize];
        r.read_exact(&mut meta)?;
        let metadata = String::from_utf8(meta)
            .map_err(|_| ContainerError::Malformed("metadata is not UTF-8".into()))?;
        let count = r.read_u32::<LittleEndian>()?;
        let mut tensors = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let name = read_str32(r)?;
            let rows = r.read_u32::<LittleEndian>()? as usize;
            let cols = r.read_u32::<LittleEndian>()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| ContainerError::Malformed(format!("tensor {name:?} too large")))?;
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            let m = Matrix::from_shape_vec((rows, cols), data)
                .map_err(|e| ContainerError::Malformed(format!("tensor {name:?}: {e}")))?;
            tensors.push((name, m));
        }
        Ok(Self {
            tag,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a container and checks its payload tag.
    pub fn load(path: &Path, expected_tag: &str) -> Result<Self, ContainerError> {
        let c = Self::read_from(&mut BufReader::new(File::open(path)?))?;
        if c.tag != expected_tag {
            return Err(ContainerError::TagMismatch {
                expected: expected_tag.to_string(),
                found: c.tag,
            });
        }
        Ok(c)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }
}

fn write_str32(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str32(r: &mut impl Read) -> Result<String, ContainerError> {
    let len = r.read_u32::<LittleEndian>()?;
    if len > MAX_NAME {
        return Err(ContainerError::Malformed(format!("string length {len}")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| ContainerError::Malformed("string is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = Container::new("x", "{}").to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Container::read_from(&mut bytes.as_slice()),
            Err(ContainerError::BadMagic)
        ));

        let mut bytes = Container::new("x", "{}").to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Container::read_from(&mut bytes.as_slice()),
            Err(ContainerError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn load_checks_tag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        Container::new("tst", "{}").save(&path).unwrap();
        assert!(Container::load(&path, "tst").is_ok());
        assert!(matches!(
            Container::load(&path, "cgan"),
            Err(ContainerError::TagMismatch { .. })
        ));
    }

    #[test]
    fn truncated_input_is_an_error() {
        let mut c = Container::new("cgan", "{\"a\":1}");
        c.push("w", Matrix::ones((3, 2)));
        let bytes = c.to_bytes();
        for cut in [4, 12, 30, bytes.len() - 1] {
            assert!(
                Container::read_from(&mut &bytes[..cut]).is_err(),
                "cut at {cut}"
            );
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tag in "[a-z]{1,8}",
            meta in ".{0,40}",
            shapes in proptest::collection::vec((0usize..5, 0usize..5), 0..4),
            seed in any::<u64>(),
        ) {
            let mut c = Container::new(tag, meta);
            let mut x = seed;
            for (i, (r, k)) in shapes.into_iter().enumerate() {
                let m = Matrix::from_shape_fn((r, k), |_| {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f64::from_bits(x >> 2)
                });
                c.push(format!("t{i}"), m);
            }
            let bytes = c.to_bytes();
            let back = Container::read_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back.tag, c.tag);
            prop_assert_eq!(back.tensors.len(), c.tensors.len());
        }
    }
}
