//! On-disk activation store.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "H2TA" | u32 version | u64 manifest length | manifest JSON
//!        | layer blocks in manifest order (row-major f32)
//!        | u64 FNV-1a checksum over all block bytes
//! ```
//!
//! The manifest additionally records a per-layer FNV-1a digest so that a
//! corrupted store can be traced back to the damaged layer.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{read_exact, read_u32, read_u64, TrainedBackbone};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STORE_MAGIC: &[u8; 4] = b"H2TA";
pub const STORE_VERSION: u32 = 1;
const EXTRACT_CHUNK: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::default();
    h.update(bytes);
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    /// Per-example shape.
    pub shape: Vec<usize>,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fnv1a: Option<u64>,
}

impl LayerRecord {
    pub fn features(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub dataset: String,
    pub split: String,
    pub examples: usize,
    pub labels: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    pub layers: Vec<LayerRecord>,
}

impl StoreManifest {
    pub fn num_classes(&self) -> usize {
        self.num_classes
            .unwrap_or_else(|| self.labels.iter().max().map_or(0, |&m| m as usize + 1))
    }
}

/// One layer's activations for every example: shape `[examples, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBlock {
    pub name: String,
    pub data: Tensor,
}

impl LayerBlock {
    pub fn example_shape(&self) -> &[usize] {
        &self.data.shape()[1..]
    }

    fn bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in self.data.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStore {
    pub manifest: StoreManifest,
    pub blocks: Vec<LayerBlock>,
}

impl ActivationStore {
    /// Builds a store from blocks, deriving the layer records.
    pub fn new(
        dataset: impl Into<String>,
        split: impl Into<String>,
        labels: Vec<u32>,
        num_classes: usize,
        blocks: Vec<LayerBlock>,
    ) -> Result<Self> {
        let examples = labels.len();
        let layers = blocks
            .iter()
            .map(|b| LayerRecord {
                name: b.name.clone(),
                shape: b.example_shape().to_vec(),
                dtype: "f32".into(),
                fnv1a: None,
            })
            .collect();
        let store = Self {
            manifest: StoreManifest {
                dataset: dataset.into(),
                split: split.into(),
                examples,
                labels,
                num_classes: Some(num_classes),
                layers,
            },
            blocks,
        };
        store.check()?;
        Ok(store)
    }

    /// Verifies the manifest/block invariants.
    pub fn check(&self) -> Result<()> {
        let m = &self.manifest;
        if m.labels.len() != m.examples {
            return Err(Error::format(format!(
                "manifest lists {} examples but {} labels",
                m.examples,
                m.labels.len()
            )));
        }
        if m.layers.len() != self.blocks.len() {
            return Err(Error::format(format!(
                "{} layer records for {} blocks",
                m.layers.len(),
                self.blocks.len()
            )));
        }
        let mut names = std::collections::HashSet::new();
        for (rec, block) in m.layers.iter().zip(&self.blocks) {
            if !names.insert(rec.name.as_str()) {
                return Err(Error::format(format!("duplicate layer {:?}", rec.name)));
            }
            if rec.name != block.name || rec.dtype != "f32" {
                return Err(Error::format(format!("layer record {:?} does not match its block", rec.name)));
            }
            if block.data.rank() == 0 || block.data.rows() != m.examples {
                return Err(Error::format(format!(
                    "layer {:?} holds {} examples, manifest says {}",
                    rec.name,
                    block.data.rows(),
                    m.examples
                )));
            }
            if block.example_shape() != rec.shape.as_slice() {
                return Err(Error::format(format!(
                    "layer {:?} has shape {:?}, manifest says {:?}",
                    rec.name,
                    block.example_shape(),
                    rec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.manifest.examples
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.examples == 0
    }

    pub fn labels(&self) -> &[u32] {
        &self.manifest.labels
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.name.as_str()).collect()
    }

    pub fn block(&self, name: &str) -> Option<&LayerBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Keeps only the listed examples, in order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                Ok(LayerBlock {
                    name: b.name.clone(),
                    data: b.data.select_rows(idx)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = idx.iter().map(|&i| self.manifest.labels[i]).collect();
        Self::new(
            self.manifest.dataset.clone(),
            self.manifest.split.clone(),
            labels,
            self.num_classes(),
            blocks,
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let block_bytes: Vec<Vec<u8>> = self.blocks.iter().map(LayerBlock::bytes).collect();
        let mut manifest = self.manifest.clone();
        for (rec, bytes) in manifest.layers.iter_mut().zip(&block_bytes) {
            rec.fnv1a = Some(fnv1a(bytes));
        }
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut sum = Fnv1a::default();
        for bytes in &block_bytes {
            sum.update(bytes);
            out.extend_from_slice(bytes);
        }
        out.extend_from_slice(&sum.finish().to_le_bytes());
        Ok(out)
    }

    /// Strict reader: any invariant violation or checksum mismatch is an error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parsed = parse(bytes)?;
        if let Some(issue) = parsed.issues.first() {
            return Err(Error::format(issue.to_string()));
        }
        let mut manifest = parsed.manifest;
        for rec in &mut manifest.layers {
            rec.fnv1a = None;
        }
        let store = Self {
            manifest,
            blocks: parsed.blocks,
        };
        store.check()?;
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Wraps raw dataset inputs as a single-layer store named `input`.
    pub fn from_dataset(data: &LabeledDataset, split: &str) -> Result<Self> {
        Self::new(
            data.id.clone(),
            split,
            data.labels.clone(),
            data.num_classes,
            vec![LayerBlock {
                name: "input".into(),
                data: data.inputs.clone(),
            }],
        )
    }

    /// Inverse of [`Self::from_dataset`]: reads one layer back as inputs.
    pub fn to_dataset(&self, layer: &str) -> Result<LabeledDataset> {
        let block = self
            .block(layer)
            .ok_or_else(|| Error::config(format!("store has no layer {layer:?}")))?;
        LabeledDataset::new(
            self.manifest.dataset.clone(),
            block.data.clone(),
            self.manifest.labels.clone(),
            self.num_classes(),
        )
    }
}

/// Writes a store after checking its invariants.
pub fn write_store(store: &ActivationStore, path: &Path) -> Result<()> {
    store.write(path)
}

pub fn read_store(path: &Path) -> Result<ActivationStore> {
    ActivationStore::read(path)
}

/// Runs the backbone over `data` and captures one block per tap.
pub fn extract_to_store(b: &TrainedBackbone, data: &LabeledDataset, split: &str) -> Result<ActivationStore> {
    extract_to_store_chunked(b, data, split, EXTRACT_CHUNK)
}

pub fn extract_to_store_chunked(
    b: &TrainedBackbone,
    data: &LabeledDataset,
    split: &str,
    chunk: usize,
) -> Result<ActivationStore> {
    if data.is_empty() {
        return Err(Error::Contract(format!("dataset {:?} is empty", data.id)));
    }
    let taps = b.taps_over(&data.inputs, chunk)?;
    let blocks = taps
        .into_iter()
        .map(|(name, data)| LayerBlock { name, data })
        .collect();
    ActivationStore::new(data.id.clone(), split, data.labels.clone(), data.num_classes, blocks)
}

/// Problems found by [`validate_store`].
#[derive(Clone, Debug, PartialEq)]
pub enum StoreIssue {
    LabelCount { examples: usize, labels: usize },
    BadDtype { layer: String, dtype: String },
    Truncated { layer: String, needed: usize, available: usize },
    TrailingBytes(usize),
    LayerChecksum { layer: String, offset: usize, len: usize },
    Checksum { stored: u64, computed: u64 },
    NonFinite { layer: String, index: usize, value: f32 },
}

impl fmt::Display for StoreIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoreIssue::LabelCount { examples, labels } => {
                write!(f, "manifest lists {examples} examples but {labels} labels")
            }
            StoreIssue::BadDtype { layer, dtype } => {
                write!(f, "layer {layer:?} has unsupported dtype {dtype:?}")
            }
            StoreIssue::Truncated { layer, needed, available } => write!(
                f,
                "layer {layer:?} needs {needed} bytes but only {available} remain"
            ),
            StoreIssue::TrailingBytes(n) => write!(f, "{n} unexpected trailing bytes"),
            StoreIssue::LayerChecksum { layer, offset, len } => write!(
                f,
                "checksum mismatch in layer {layer:?} (block at byte offset {offset}, {len} bytes)"
            ),
            StoreIssue::Checksum { stored, computed } => write!(
                f,
                "store checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
            ),
            StoreIssue::NonFinite { layer, index, value } => {
                write!(f, "non-finite value {value} in layer {layer:?} at element {index}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<StoreIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

struct Parsed {
    manifest: StoreManifest,
    blocks: Vec<LayerBlock>,
    issues: Vec<StoreIssue>,
}

fn parse(bytes: &[u8]) -> Result<Parsed> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != STORE_MAGIC {
        return Err(Error::format(format!("bad store magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != STORE_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: STORE_VERSION,
        });
    }
    let len = read_u64(&mut r)? as usize;
    if len > r.len() {
        return Err(Error::format("truncated manifest"));
    }
    let (json, rest) = r.split_at(len);
    let manifest: StoreManifest =
        serde_json::from_slice(json).map_err(|e| Error::format(format!("manifest: {e}")))?;
    let mut issues = Vec::new();
    if manifest.labels.len() != manifest.examples {
        issues.push(StoreIssue::LabelCount {
            examples: manifest.examples,
            labels: manifest.labels.len(),
        });
    }
    let mut offset = bytes.len() - rest.len();
    let mut rest = rest;
    let mut blocks = Vec::with_capacity(manifest.layers.len());
    let mut sum = Fnv1a::default();
    for rec in &manifest.layers {
        if rec.dtype != "f32" {
            issues.push(StoreIssue::BadDtype {
                layer: rec.name.clone(),
                dtype: rec.dtype.clone(),
            });
        }
        let needed = manifest.examples * rec.features() * 4;
        // The trailing checksum is not block data.
        let available = rest.len().saturating_sub(8);
        if needed > available {
            issues.push(StoreIssue::Truncated {
                layer: rec.name.clone(),
                needed,
                available,
            });
            return Ok(Parsed {
                manifest,
                blocks,
                issues,
            });
        }
        let (raw, tail) = rest.split_at(needed);
        sum.update(raw);
        if let Some(expected) = rec.fnv1a {
            if fnv1a(raw) != expected {
                issues.push(StoreIssue::LayerChecksum {
                    layer: rec.name.clone(),
                    offset,
                    len: needed,
                });
            }
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            issues.push(StoreIssue::NonFinite {
                layer: rec.name.clone(),
                index,
                value,
            });
        }
        let mut shape = vec![manifest.examples];
        shape.extend_from_slice(&rec.shape);
        blocks.push(LayerBlock {
            name: rec.name.clone(),
            data: Tensor::new(shape, data)?,
        });
        offset += needed;
        rest = tail;
    }
    let stored = read_u64(&mut rest)?;
    let computed = sum.finish();
    if stored != computed {
        issues.push(StoreIssue::Checksum { stored, computed });
    }
    if !rest.is_empty() {
        issues.push(StoreIssue::TrailingBytes(rest.len()));
    }
    Ok(Parsed {
        manifest,
        blocks,
        issues,
    })
}

/// Scans a store file for invariant violations and non-finite values.
/// Unreadable headers (wrong magic, unknown version, broken manifest) are
/// errors; everything else is reported.
pub fn validate_store(path: &Path) -> Result<ValidationReport> {
    validate_bytes(&std::fs::read(path)?)
}

pub fn validate_bytes(bytes: &[u8]) -> Result<ValidationReport> {
    Ok(ValidationReport {
        issues: parse(bytes)?.issues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ActivationStore {
        let a = Tensor::from_fn(&[4, 3], |i| i as f32 * 0.5 - 1.0);
        let b = Tensor::from_fn(&[4, 2, 2, 1], |i| (i as f32).sin());
        ActivationStore::new(
            "toy",
            "train",
            vec![0, 1, 1, 0],
            2,
            vec![
                LayerBlock { name: "a".into(), data: a },
                LayerBlock { name: "b".into(), data: b },
            ],
        )
        .unwrap()
    }

    #[test]
    fn fnv1a_reference_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn round_trip() {
        let s = sample();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(ActivationStore::from_bytes(&bytes).unwrap(), s);
        assert!(validate_bytes(&bytes).unwrap().is_clean());
    }

    #[test]
    fn label_mismatch_rejected_before_write() {
        let mut s = sample();
        s.manifest.labels.pop();
        assert!(matches!(s.to_bytes(), Err(Error::Format(_))));
    }

    #[test]
    fn single_byte_corruption_is_localized() {
        let s = sample();
        let mut bytes = s.to_bytes().unwrap();
        let n = bytes.len();
        // Last block byte before the trailing checksum belongs to layer "b".
        bytes[n - 9] ^= 0x01;
        let report = validate_bytes(&bytes).unwrap();
        assert!(report
            .issues
            .iter()
            .any(|i| matches!(i, StoreIssue::LayerChecksum { layer, .. } if layer == "b")));
        assert!(report.issues.iter().any(|i| matches!(i, StoreIssue::Checksum { .. })));
        assert!(ActivationStore::from_bytes(&bytes).is_err());
    }

    #[test]
    fn nan_is_flagged_with_layer_and_index() {
        let mut s = sample();
        let mut data = s.blocks[0].data.data().to_vec();
        data[5] = f32::NAN;
        s.blocks[0].data = Tensor::new(vec![4, 3], data).unwrap();
        let bytes = s.to_bytes().unwrap();
        let report = validate_bytes(&bytes).unwrap();
        assert!(matches!(
            report.issues.as_slice(),
            [StoreIssue::NonFinite { layer, index: 5, value }] if layer == "a" && value.is_nan()
        ));
    }

    #[test]
    fn wrong_magic_is_an_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'Z';
        assert!(matches!(validate_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_store_reported() {
        let bytes = sample().to_bytes().unwrap();
        let report = validate_bytes(&bytes[..bytes.len() - 20]);
        match report {
            Ok(r) => assert!(!r.is_clean()),
            Err(e) => assert!(matches!(e, Error::Format(_))),
        }
    }
}
