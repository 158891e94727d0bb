//! Single-file container for model weights, latents and catalogs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        6 bytes   "LPARC\0"
//! version      u32       FORMAT_VERSION
//! manifest_len u64
//! manifest     JSON      { format_version, kind, meta, arrays: [{name, shape, offset, len}] }
//! payload      f32 LE    arrays concatenated in manifest order, row-major
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 6] = b"LPARC\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 6 + 4 + 8;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported or missing archive header: {0}")]
    Version(String),
    #[error("archive truncated: {0}")]
    Truncated(String),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing array `{0}`")]
    Missing(String),
    #[error("archive kind is `{found}`, expected `{expected}`")]
    Kind { expected: String, found: String },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn to_array1(&self) -> Result<Array1<f32>, ArchiveError> {
        match self.shape.as_slice() {
            [n] => Ok(Array1::from_vec(self.data.clone()).into_shape_with_order(*n).unwrap()),
            s => Err(ArchiveError::Shape(format!("expected rank 1, got {s:?}"))),
        }
    }

    pub fn to_array2(&self) -> Result<Array2<f32>, ArchiveError> {
        match self.shape.as_slice() {
            [a, b] => Ok(Array2::from_shape_vec((*a, *b), self.data.clone()).unwrap()),
            s => Err(ArchiveError::Shape(format!("expected rank 2, got {s:?}"))),
        }
    }

    pub fn to_array3(&self) -> Result<Array3<f32>, ArchiveError> {
        match self.shape.as_slice() {
            [a, b, c] => Ok(Array3::from_shape_vec((*a, *b, *c), self.data.clone()).unwrap()),
            s => Err(ArchiveError::Shape(format!("expected rank 3, got {s:?}"))),
        }
    }
}

/// In-memory archive: a kind tag, free-form JSON metadata and named arrays
/// kept in insertion order.
#[derive(Clone, Debug)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    arrays: Vec<(String, NamedArray)>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { kind: kind.into(), meta, arrays: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "array `{name}` shape/data mismatch");
        self.arrays.retain(|(n, _)| n != &name);
        self.arrays.push((name, NamedArray { shape, data }));
    }

    pub fn insert3(&mut self, name: impl Into<String>, a: &Array3<f32>) {
        self.insert(name, a.shape().to_vec(), a.iter().copied().collect());
    }

    pub fn insert2(&mut self, name: impl Into<String>, a: &Array2<f32>) {
        self.insert(name, a.shape().to_vec(), a.iter().copied().collect());
    }

    pub fn insert1(&mut self, name: impl Into<String>, a: &Array1<f32>) {
        self.insert(name, a.shape().to_vec(), a.to_vec());
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray, ArchiveError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| ArchiveError::Missing(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), ArchiveError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(ArchiveError::Kind { expected: kind.into(), found: self.kind.clone() })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries: Vec<ArrayEntry> = self
            .arrays
            .iter()
            .map(|(name, a)| {
                let e = ArrayEntry { name: name.clone(), shape: a.shape.clone(), offset, len: a.data.len() };
                offset += a.data.len();
                e
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        if bytes.len() < HEADER_LEN || &bytes[..6] != MAGIC {
            return Err(ArchiveError::Version("file does not start with an archive header".into()));
        }
        let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ArchiveError::Version(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let mlen = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() < mlen {
            return Err(ArchiveError::Truncated(format!("manifest needs {mlen} bytes, {} present", body.len())));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| ArchiveError::Manifest(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ArchiveError::Version(format!(
                "manifest format version {}, expected {FORMAT_VERSION}",
                manifest.format_version
            )));
        }
        let payload = &body[mlen..];
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in &manifest.arrays {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(ArchiveError::Shape(format!(
                    "array `{}` declares shape {:?} but length {}",
                    e.name, e.shape, e.len
                )));
            }
            let start = e.offset * 4;
            let end = start + e.len * 4;
            if end > payload.len() {
                return Err(ArchiveError::Truncated(format!(
                    "array `{}` needs bytes {start}..{end}, payload has {}",
                    e.name,
                    payload.len()
                )));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((e.name.clone(), NamedArray { shape: e.shape.clone(), data }));
        }
        Ok(Self { kind: manifest.kind, meta: manifest.meta, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
        if let Some(parent) = path.as_ref().parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArchiveError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Hex SHA-256 over the serialized bytes.
    pub fn digest(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    /// Hex SHA-256 over array names, shapes and payload only (metadata excluded).
    pub fn weights_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, a) in &self.arrays {
            h.update(name.as_bytes());
            for d in &a.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &a.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Archive {
        let mut a = Archive::new("test", json!({"seed": 7}));
        a.insert("w", vec![2, 3], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0]);
        a.insert("b", vec![1], vec![42.0]);
        a
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(b.kind, "test");
        assert_eq!(b.meta["seed"], 7);
        let w = b.get("w").unwrap();
        let bits: Vec<u32> = w.data.iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u32> = a.get("w").unwrap().data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, orig);
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn truncated_header_is_a_version_error() {
        let bytes = sample().to_bytes();
        assert!(matches!(Archive::from_bytes(&bytes[..8]), Err(ArchiveError::Version(_))));
        assert!(matches!(Archive::from_bytes(b""), Err(ArchiveError::Version(_))));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let bytes = sample().to_bytes();
        let err = Archive::from_bytes(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(matches!(err, ArchiveError::Truncated(_)), "{err}");
    }

    #[test]
    fn wrong_version_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[6] = 9;
        assert!(matches!(Archive::from_bytes(&bytes), Err(ArchiveError::Version(_))));
    }

    #[test]
    fn missing_array_is_named() {
        let err = sample().get("nope").unwrap_err();
        assert!(err.to_string().contains("nope"));
    }
}
