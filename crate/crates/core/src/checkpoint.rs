//! Versioned tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"LGNNCKPT" | u32 version | u64 manifest_len | manifest (JSON)
//! then per tensor: u32 name_len | name | u64 rows | u64 cols | rows*cols f64
//! ```
//!
//! The manifest carries the kind tag, config digest, seed, free-form
//! metadata and a directory of `{name, rows, cols, offset}` entries, where
//! `offset` is the byte position of the tensor record after the manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Matrix;

const MAGIC: &[u8; 8] = b"LGNNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: u64,
    pub cols: u64,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    pub config_digest: String,
    pub seed: u64,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_digest: String,
    pub seed: u64,
    pub meta: serde_json::Value,
    pub tensors: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in self.tensors.iter() {
            entries.push(TensorEntry {
                name: name.to_string(),
                rows: t.nrows() as u64,
                cols: t.ncols() as u64,
                offset: body.len() as u64,
            });
            body.extend_from_slice(&(name.len() as u32).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            body.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            for x in t.iter() {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config_digest: self.config_digest.clone(),
            seed: self.seed,
            meta: self.meta.clone(),
            tensors: entries,
        };
        let mjson = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + mjson.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&mjson);
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take::<4>(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container version {version}"
            )));
        }
        let mlen = u64::from_le_bytes(take::<8>(&mut r)?) as usize;
        if r.len() < mlen {
            return Err(Error::Checkpoint("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&r[..mlen])
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let body = &r[mlen..];
        let mut tensors = ParamStore::new();
        for entry in &manifest.tensors {
            let mut cur = body
                .get(entry.offset as usize..)
                .ok_or_else(|| Error::Checkpoint(format!("offset of {} out of range", entry.name)))?;
            let nlen = u32::from_le_bytes(take::<4>(&mut cur)?) as usize;
            if cur.len() < nlen {
                return Err(Error::Checkpoint("truncated tensor name".into()));
            }
            let name = std::str::from_utf8(&cur[..nlen])
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if name != entry.name {
                return Err(Error::Checkpoint(format!(
                    "directory names {:?} but record holds {name:?}",
                    entry.name
                )));
            }
            cur = &cur[nlen..];
            let rows = u64::from_le_bytes(take::<8>(&mut cur)?) as usize;
            let cols = u64::from_le_bytes(take::<8>(&mut cur)?) as usize;
            if rows as u64 != entry.rows || cols as u64 != entry.cols {
                return Err(Error::Checkpoint(format!("shape header mismatch for {name}")));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_le_bytes(take::<8>(&mut cur)?));
            }
            let m = Matrix::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.insert(name, m);
        }
        Ok(Checkpoint {
            kind: manifest.kind,
            config_digest: manifest.config_digest,
            seed: manifest.seed,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        File::open(path)
            .map(BufReader::new)
            .and_then(|mut r| r.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Digest of the tensors only; metadata is excluded.
    pub fn digest(&self) -> String {
        self.tensors.digest()
    }
}

/// SHA-256 hex of a value's canonical JSON form.
pub fn json_digest(value: &impl Serialize) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn read_exact(r: &mut &[u8], out: &mut [u8]) -> Result<()> {
    if r.len() < out.len() {
        return Err(Error::Checkpoint("unexpected end of data".into()));
    }
    out.copy_from_slice(&r[..out.len()]);
    *r = &r[out.len()..];
    Ok(())
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut tensors = ParamStore::new();
        tensors.insert("gnn0.w", Matrix::from_shape_fn((2, 3), |(i, j)| i as f64 - j as f64 * 0.1));
        tensors.insert("eps", Matrix::from_elem((1, 1), -0.0));
        Checkpoint {
            kind: "alignment".into(),
            config_digest: "abc".into(),
            seed: 9,
            meta: serde_json::json!({"t": 8}),
            tensors,
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn values_round_trip_bitwise(vals in proptest::collection::vec(proptest::num::f64::ANY, 1..40)) {
            let n = vals.len();
            let mut tensors = ParamStore::new();
            tensors.insert("x", Matrix::from_shape_vec((1, n), vals.clone()).unwrap());
            let c = Checkpoint { kind: "k".into(), config_digest: String::new(), seed: 0, meta: serde_json::Value::Null, tensors };
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            let got = back.tensors.get("x").unwrap();
            for (a, b) in got.iter().zip(vals.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
