//! Tensor persistence as a `<stem>.json` manifest plus a `<stem>.bin` blob.
//!
//! The blob is the concatenation of every tensor's values as little-endian
//! IEEE-754 binary64. The manifest lists each tensor's name, shape, and byte
//! offset/length inside the blob, plus free-form metadata (the encoder
//! architecture for checkpoints, the generating spec for dataset caches).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const FORMAT: &str = "distill-ssl-tensors";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    kind: String,
    meta: serde_json::Value,
    blob_bytes: usize,
    tensors: Vec<Entry>,
}

/// `<stem>.json` and `<stem>.bin`.
pub fn pair_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let mut json = stem.as_os_str().to_owned();
    json.push(".json");
    let mut bin = stem.as_os_str().to_owned();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

/// An ordered list of named tensors with metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            if !names.insert(name.as_str()) {
                return Err(Error::Contract(format!("duplicate tensor name \"{name}\"")));
            }
            if !t.all_finite() {
                return Err(CheckpointError::NonFinite(name.clone()).into());
            }
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                length: blob.len() - offset,
            });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            blob_bytes: blob.len(),
            tensors: entries,
        };
        let (json_path, bin_path) = pair_paths(stem);
        if let Some(dir) = json_path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        write_atomic(&bin_path, &blob)?;
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&json_path, text.as_bytes())?;
        Ok(())
    }

    /// Reads and fully validates a pair before returning anything.
    pub fn load(stem: &Path) -> Result<Self> {
        let (json_path, bin_path) = pair_paths(stem);
        let text = fs::read_to_string(&json_path)?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CheckpointError::CorruptManifest(format!("{}: {e}", json_path.display())))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(CheckpointError::CorruptManifest(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            ))
            .into());
        }
        let blob = fs::read(&bin_path)?;
        if blob.len() != manifest.blob_bytes {
            return Err(CheckpointError::Truncated {
                expected: manifest.blob_bytes,
                found: blob.len(),
            }
            .into());
        }
        let mut spans: Vec<(usize, usize)> = Vec::new();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.length != n * 8 {
                return Err(CheckpointError::CorruptManifest(format!(
                    "tensor \"{}\" length {} does not match shape {:?}",
                    e.name, e.length, e.shape
                ))
                .into());
            }
            let end = e.offset.checked_add(e.length).filter(|&end| end <= blob.len());
            let Some(end) = end else {
                return Err(CheckpointError::CorruptManifest(format!(
                    "tensor \"{}\" lies outside the blob",
                    e.name
                ))
                .into());
            };
            spans.push((e.offset, end));
            let data = blob[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        spans.sort_unstable();
        let covered: usize = spans.iter().map(|(a, b)| b - a).sum();
        if spans.windows(2).any(|w| w[0].1 > w[1].0) || covered != blob.len() {
            return Err(CheckpointError::CorruptManifest("tensor spans overlap or leave gaps".into()).into());
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Named parameter groups for one encoder architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: EncoderConfig,
    pub groups: BTreeMap<String, ParamSet>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    architecture: EncoderConfig,
}

impl Checkpoint {
    pub fn new(arch: EncoderConfig) -> Self {
        Self {
            arch,
            groups: BTreeMap::new(),
        }
    }

    /// Adds `<group>/backbone.*` and `<group>/head.*` tensors for `enc`.
    pub fn with_encoder(mut self, group: &str, enc: &EncoderParams) -> Self {
        let mut set = ParamSet::new();
        for (name, p) in enc.all_params() {
            set.insert(name, p.value.clone()).expect("encoder names are unique");
        }
        self.groups.insert(group.to_string(), set);
        self
    }

    /// Rebuilds an encoder from `group`, validating every tensor against `expected`.
    pub fn encoder(&self, group: &str, expected: &EncoderConfig) -> Result<EncoderParams> {
        let set = self
            .groups
            .get(group)
            .ok_or_else(|| CheckpointError::MissingTensor(format!("{group}/*")))?;
        let mut backbone = ParamSet::new();
        let mut head = ParamSet::new();
        for (name, shape) in expected.layout() {
            let t = set
                .get(name)
                .ok_or_else(|| CheckpointError::MissingTensor(format!("{group}/{name}")))?;
            if t.value.shape() != shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name: format!("{group}/{name}"),
                    expected: shape,
                    found: t.value.shape().to_vec(),
                }
                .into());
            }
            let target = if name.starts_with("backbone.") { &mut backbone } else { &mut head };
            target.insert(name, t.value.clone())?;
        }
        if set.len() != expected.layout().len() {
            return Err(CheckpointError::Architecture(format!(
                "group \"{group}\" holds {} tensors, architecture expects {}",
                set.len(),
                expected.layout().len()
            ))
            .into());
        }
        if self.arch != *expected {
            return Err(CheckpointError::Architecture(format!(
                "checkpoint architecture {:?} differs from requested {:?}",
                self.arch, expected
            ))
            .into());
        }
        EncoderParams::from_parts(*expected, backbone, head)
    }

    fn to_file(&self) -> Result<TensorFile> {
        let mut tensors = Vec::new();
        for (group, set) in &self.groups {
            for (name, p) in set.iter() {
                tensors.push((format!("{group}/{name}"), p.value.clone()));
            }
        }
        Ok(TensorFile {
            kind: "checkpoint".into(),
            meta: serde_json::to_value(CheckpointMeta {
                architecture: self.arch,
            })?,
            tensors,
        })
    }

    fn from_file(file: TensorFile) -> Result<Self> {
        if file.kind != "checkpoint" {
            return Err(CheckpointError::CorruptManifest(format!(
                "expected a checkpoint, found kind \"{}\"",
                file.kind
            ))
            .into());
        }
        let meta: CheckpointMeta = serde_json::from_value(file.meta)
            .map_err(|e| CheckpointError::CorruptManifest(format!("architecture: {e}")))?;
        let mut groups: BTreeMap<String, ParamSet> = BTreeMap::new();
        for (full, t) in file.tensors {
            let Some((group, name)) = full.split_once('/') else {
                return Err(CheckpointError::CorruptManifest(format!(
                    "tensor name \"{full}\" lacks a group prefix"
                ))
                .into());
            };
            groups.entry(group.to_string()).or_default().insert(name, t)?;
        }
        Ok(Self {
            arch: meta.architecture,
            groups,
        })
    }

    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.arch == other.arch
            && self.groups.len() == other.groups.len()
            && self
                .groups
                .iter()
                .zip(&other.groups)
                .all(|((ga, a), (gb, b))| ga == gb && a.values_bitwise_eq(b))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, stem: &Path) -> Result<()> {
    ckpt.to_file()?.save(stem)
}

pub fn load_checkpoint(stem: &Path) -> Result<Checkpoint> {
    Checkpoint::from_file(TensorFile::load(stem)?)
}
