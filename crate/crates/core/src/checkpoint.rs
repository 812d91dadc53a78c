//! Checkpoint files: a safetensors blob plus a plain-text `key = value`
//! manifest sidecar with the same stem and a `.manifest` extension.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
pub type ParamMap = BTreeMap<String, Arc<Tensor>>;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(format: &str, version: u32) -> Self {
        let mut m = Manifest::default();
        m.set("format", format);
        m.set("version", version);
        m
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::VersionMismatch(format!("manifest lacks key `{key}`")))
    }

    pub fn parse_key<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::VersionMismatch(format!("manifest key `{key}` has bad value `{raw}`")))
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.parse_key(key),
        }
    }

    /// Comma-separated list value.
    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        Error::VersionMismatch(format!("manifest key `{key}` has bad list `{raw}`"))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::VersionMismatch(format!("manifest line {}: expected `key = value`", no + 1))
            })?;
            m.entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string())?;
        Ok(())
    }

    /// Checks `format` and `version`.
    pub fn expect_format(&self, format: &str, version: u32) -> Result<()> {
        let found = self.require("format")?;
        if found != format {
            return Err(Error::VersionMismatch(format!(
                "expected format `{format}`, found `{found}`"
            )));
        }
        let v: u32 = self.parse_key("version")?;
        if v != version {
            return Err(Error::VersionMismatch(format!(
                "format `{format}` version {v} unsupported (expected {version})"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

pub fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("manifest")
}

/// Serializes tensors as little-endian F64 safetensors.
pub fn encode_tensors(tensors: &ParamMap) -> Result<Vec<u8>> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let bytes: Vec<u8> = t.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), t.shape().to_vec(), bytes)
        })
        .collect();
    let views: Vec<(String, TensorView<'_>)> = raw
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F64, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::CorruptWeights(format!("{n}: {e}")))
        })
        .collect::<Result<_>>()?;
    safetensors::serialize(views, &None).map_err(|e| Error::CorruptWeights(e.to_string()))
}

pub fn decode_tensors(bytes: &[u8]) -> Result<ParamMap> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::CorruptWeights(e.to_string()))?;
    let mut out = ParamMap::new();
    for (name, view) in st.tensors() {
        let data = view.data();
        let values: Vec<f64> = match view.dtype() {
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => {
                return Err(Error::CorruptWeights(format!(
                    "tensor `{name}` has unsupported dtype {other:?}"
                )))
            }
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptWeights(format!("tensor `{name}` has non-finite entries")));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
            .map_err(|e| Error::CorruptWeights(format!("{name}: {e}")))?;
        out.insert(name, Arc::new(arr));
    }
    Ok(out)
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: ParamMap,
    /// `<format>-<first 12 hex digits of the blob's SHA-256>`.
    pub id: String,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<Arc<Tensor>> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::CorruptWeights(format!("missing tensor `{name}`")))
    }
}

pub fn checkpoint_id(format: &str, blob: &[u8]) -> String {
    let digest = Sha256::digest(blob);
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("{format}-{hex}")
}

/// Writes the blob and its manifest; returns the checkpoint id.
pub fn write_checkpoint(bin: &Path, manifest: &Manifest, tensors: &ParamMap) -> Result<String> {
    let blob = encode_tensors(tensors)?;
    if let Some(parent) = bin.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(bin, &blob)?;
    manifest.write(&manifest_path(bin))?;
    Ok(checkpoint_id(manifest.require("format")?, &blob))
}

/// Reads a checkpoint and validates its manifest's format and version.
pub fn read_checkpoint(bin: &Path, format: &str, version: u32) -> Result<Checkpoint> {
    if !bin.exists() {
        return Err(Error::MissingFile(bin.to_path_buf()));
    }
    let manifest = Manifest::read(&manifest_path(bin))?;
    manifest.expect_format(format, version)?;
    let blob = fs::read(bin)?;
    let tensors = decode_tensors(&blob)?;
    Ok(Checkpoint {
        id: checkpoint_id(format, &blob),
        manifest,
        tensors,
    })
}

/// Reads a bare safetensors file without a manifest; returns the tensors and
/// a content id under `format`.
pub fn read_tensors(bin: &Path, format: &str) -> Result<(ParamMap, String)> {
    if !bin.exists() {
        return Err(Error::MissingFile(bin.to_path_buf()));
    }
    let blob = fs::read(bin)?;
    Ok((decode_tensors(&blob)?, checkpoint_id(format, &blob)))
}

/// Shape check used by every model loader.
pub fn expect_shape(name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::CorruptWeights(format!(
            "tensor `{name}` has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parse_and_print() {
        let m = Manifest::parse("# c\nformat = toy\nversion=1\nlist = 1, 2,3\n").unwrap();
        assert_eq!(m.get("format"), Some("toy"));
        assert_eq!(m.parse_key::<u32>("version").unwrap(), 1);
        assert_eq!(m.parse_list::<usize>("list").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(Manifest::parse(&m.to_string()).unwrap(), m);
        assert!(Manifest::parse("no equals sign").is_err());
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("m.safetensors");
        assert!(matches!(read_checkpoint(&bin, "x", 1), Err(Error::MissingFile(_))));

        let mut t = ParamMap::new();
        t.insert("a".into(), Arc::new(ArrayD::from_elem(IxDyn(&[2, 3]), 0.25)));
        write_checkpoint(&bin, &Manifest::new("x", 1), &t).unwrap();
        let ck = read_checkpoint(&bin, "x", 1).unwrap();
        assert_eq!(ck.tensors, t);
        assert!(ck.id.starts_with("x-"));
        assert!(matches!(read_checkpoint(&bin, "x", 2), Err(Error::VersionMismatch(_))));
        assert!(matches!(read_checkpoint(&bin, "y", 1), Err(Error::VersionMismatch(_))));

        fs::write(&bin, b"garbage").unwrap();
        assert!(matches!(read_checkpoint(&bin, "x", 1), Err(Error::CorruptWeights(_))));
    }
}
