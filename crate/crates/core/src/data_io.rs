//! On-disk formats.
//!
//! # Embedding dump
//!
//! ```text
//! offset  size      field
//! 0       4         magic "DTLD"
//! 4       4         version, u32 little-endian, = 1
//! 8       4         meta_len, u32 little-endian
//! 12      meta_len  UTF-8 JSON metadata, keys sorted, no whitespace
//! ...     4·n·dim   payload, f32 little-endian, row-major n_rows x dim
//! ```
//!
//! Metadata keys: `dim`, `labels` (one per row; `null` allowed only for the
//! query row), `layer`, `n_rows`, `num_classes`, `query_index`, `source`, and
//! optionally `target_positions`. Unknown keys are preserved.
//!
//! One dump holds one instance. Experiments over many instances use a manifest:
//! `{"instances": [{"path", "id", "noisy_mask"?}], "num_classes"}` with paths
//! relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::influence::{IclInstance, ScoreVector};
use crate::linalg::Matrix;
use crate::metrics::descending_ranks;
use crate::tasks::{Anchor, CurationPlan, DetectionReport, PredictionTable, Ranking};

pub const DUMP_MAGIC: &[u8; 4] = b"DTLD";
pub const DUMP_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;
const REQUIRED_KEYS: [&str; 7] = [
    "dim",
    "labels",
    "layer",
    "n_rows",
    "num_classes",
    "query_index",
    "source",
];

/// Contents of one embedding dump, promoted to 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub embeddings: Matrix,
    pub labels: Vec<Option<usize>>,
    pub num_classes: usize,
    pub query_index: Option<usize>,
    pub layer: Option<u64>,
    pub source: String,
    pub target_positions: Option<Vec<u64>>,
    /// Metadata keys this crate does not interpret, kept for round trips.
    pub extra: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct DumpMeta {
    dim: usize,
    labels: Vec<Option<usize>>,
    layer: Option<u64>,
    n_rows: usize,
    num_classes: usize,
    query_index: Option<usize>,
    source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_positions: Option<Vec<u64>>,
}

impl EmbeddingSet {
    /// Demonstrations as leading rows, query as the final row.
    pub fn from_instance(instance: &IclInstance, source: impl Into<String>, layer: Option<u64>) -> Self {
        let n = instance.len();
        let mut data = instance.demo_embeddings().as_slice().to_vec();
        data.extend_from_slice(instance.query_embedding().as_slice());
        let mut labels: Vec<Option<usize>> = instance.demo_labels().iter().map(|&y| Some(y)).collect();
        labels.push(instance.query_label());
        Self {
            embeddings: Matrix::from_vec(n + 1, instance.width(), data).expect("instance is validated"),
            labels,
            num_classes: instance.num_classes(),
            query_index: Some(n),
            layer,
            source: source.into(),
            target_positions: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Splits the dump into demonstrations (all non-query rows, in order) and the query.
    pub fn to_instance(&self) -> Result<IclInstance> {
        let q = self
            .query_index
            .ok_or_else(|| Error::invalid("query_index", "dump has no query row"))?;
        let demo_rows: Vec<usize> = (0..self.n_rows()).filter(|&i| i != q).collect();
        let demo_labels = demo_rows
            .iter()
            .map(|&i| {
                self.labels[i].ok_or_else(|| Error::invalid("labels", format!("demonstration row {i} has no label")))
            })
            .collect::<Result<Vec<_>>>()?;
        IclInstance::new(
            self.embeddings.select_rows(&demo_rows),
            demo_labels,
            self.embeddings.row_matrix(q),
            self.labels[q],
            self.num_classes,
        )
    }

    /// Every labelled row as a scoring anchor.
    pub fn anchors(&self) -> Vec<Anchor> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, label)| {
                label.map(|label| Anchor {
                    embedding: self.embeddings.row_matrix(i),
                    label,
                })
            })
            .collect()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let n = self.n_rows();
        if n == 0 {
            return Err("n_rows must be >= 1".into());
        }
        if self.dim() == 0 {
            return Err("dim must be >= 1".into());
        }
        if self.num_classes < 2 {
            return Err(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.labels.len() != n {
            return Err(format!(
                "labels has length {}, expected n_rows = {n}",
                self.labels.len()
            ));
        }
        if let Some(q) = self.query_index {
            if q >= n {
                return Err(format!("query_index {q} out of range for {n} rows"));
            }
        }
        for (i, label) in self.labels.iter().enumerate() {
            match label {
                Some(y) if *y >= self.num_classes => {
                    return Err(format!(
                        "label {y} out of range for {} classes (row {i})",
                        self.num_classes
                    ))
                }
                None if self.query_index != Some(i) => {
                    return Err(format!("row {i} has a null label but is not the query row"))
                }
                _ => {}
            }
        }
        if let Some(tp) = &self.target_positions {
            if tp.len() != n {
                return Err(format!("target_positions has length {}, expected {n}", tp.len()));
            }
        }
        for key in self.extra.keys() {
            if REQUIRED_KEYS.contains(&key.as_str()) || key == "target_positions" {
                return Err(format!("extra metadata shadows reserved key `{key}`"));
            }
        }
        Ok(())
    }
}

/// Serializes a dump. Output bytes are a pure function of the content.
pub fn encode_dump(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let bad = |reason: String| Error::InvalidDump {
        path: PathBuf::from("<in-memory>"),
        reason,
    };
    set.validate().map_err(bad)?;
    let meta = DumpMeta {
        dim: set.dim(),
        labels: set.labels.clone(),
        layer: set.layer,
        n_rows: set.n_rows(),
        num_classes: set.num_classes,
        query_index: set.query_index,
        source: set.source.clone(),
        target_positions: set.target_positions.clone(),
    };
    let mut map = match serde_json::to_value(&meta).expect("metadata serializes") {
        Value::Object(m) => m,
        _ => unreachable!("struct serializes to an object"),
    };
    for (k, v) in &set.extra {
        map.insert(k.clone(), v.clone());
    }
    // serde_json's default Map is ordered by key, which makes this canonical
    let meta_bytes = serde_json::to_vec(&Value::Object(map)).expect("metadata serializes");
    let meta_len = u32::try_from(meta_bytes.len()).map_err(|_| bad("metadata exceeds 4 GiB".into()))?;

    let mut out = Vec::with_capacity(HEADER_LEN + meta_bytes.len() + 4 * set.embeddings.as_slice().len());
    out.extend_from_slice(DUMP_MAGIC);
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    for (p, &v) in set.embeddings.as_slice().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(bad(format!(
                "value {v} at row {}, col {} is not representable as a finite f32",
                p / set.dim(),
                p % set.dim()
            )));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Parses and validates a dump; `path` is only used in error messages.
pub fn decode_dump(bytes: &[u8], path: &Path) -> Result<EmbeddingSet> {
    let bad = |reason: String| Error::InvalidDump {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != DUMP_MAGIC {
        return Err(bad(format!("bad magic {:?}, expected \"DTLD\"", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != DUMP_VERSION {
        return Err(bad(format!("unsupported version {version}, expected {DUMP_VERSION}")));
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let meta_end = HEADER_LEN
        .checked_add(meta_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            bad(format!(
                "metadata length {meta_len} exceeds the {} bytes after the header",
                bytes.len() - HEADER_LEN
            ))
        })?;
    let meta_text =
        std::str::from_utf8(&bytes[HEADER_LEN..meta_end]).map_err(|e| bad(format!("metadata is not UTF-8: {e}")))?;
    let mut map: Map<String, Value> =
        serde_json::from_str(meta_text).map_err(|e| bad(format!("metadata is not a JSON object: {e}")))?;
    for key in REQUIRED_KEYS {
        if !map.contains_key(key) {
            return Err(bad(format!("metadata is missing required key `{key}`")));
        }
    }
    let meta: DumpMeta =
        serde_json::from_value(Value::Object(map.clone())).map_err(|e| bad(format!("malformed metadata: {e}")))?;
    for key in REQUIRED_KEYS.iter().chain(&["target_positions"]) {
        map.remove(*key);
    }

    let values = meta
        .n_rows
        .checked_mul(meta.dim)
        .filter(|v| v.checked_mul(4).is_some())
        .ok_or_else(|| bad(format!("n_rows x dim = {} x {} overflows", meta.n_rows, meta.dim)))?;
    let expected = values * 4;
    let actual = bytes.len() - meta_end;
    if actual != expected {
        return Err(bad(format!(
            "payload length mismatch: expected {expected} bytes ({} rows x {} dims x 4), got {actual}",
            meta.n_rows, meta.dim
        )));
    }
    let mut data = Vec::with_capacity(values);
    for (p, chunk) in bytes[meta_end..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(bad(format!(
                "non-finite value {v} at row {}, col {}",
                p / meta.dim,
                p % meta.dim
            )));
        }
        data.push(f64::from(v));
    }
    let embeddings = Matrix::from_vec(meta.n_rows, meta.dim, data).map_err(|e| bad(e.to_string()))?;
    let set = EmbeddingSet {
        embeddings,
        labels: meta.labels,
        num_classes: meta.num_classes,
        query_index: meta.query_index,
        layer: meta.layer,
        source: meta.source,
        target_positions: meta.target_positions,
        extra: map.into_iter().collect(),
    };
    set.validate().map_err(bad)?;
    Ok(set)
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dump(&bytes, path)
}

pub fn write_dump(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dump(set).map_err(|e| match e {
        Error::InvalidDump { reason, .. } => Error::InvalidDump {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub instances: Vec<ManifestEntry>,
    pub num_classes: usize,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let manifest: Manifest = read_json(path.as_ref())?;
    let mut seen = std::collections::BTreeSet::new();
    for entry in &manifest.instances {
        if !seen.insert(entry.id.as_str()) {
            return Err(Error::invalid(
                "manifest",
                format!("duplicate instance id `{}`", entry.id),
            ));
        }
    }
    Ok(manifest)
}

/// Loads every instance of a manifest, resolving paths against its directory,
/// and checks that each dump's class count agrees with the manifest.
pub fn load_manifest_instances(path: impl AsRef<Path>) -> Result<(Manifest, Vec<(ManifestEntry, IclInstance)>)> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::with_capacity(manifest.instances.len());
    for entry in &manifest.instances {
        let dump_path = base.join(&entry.path);
        let set = read_dump(&dump_path)?;
        if set.num_classes != manifest.num_classes {
            return Err(Error::InvalidDump {
                path: dump_path,
                reason: format!(
                    "num_classes {} disagrees with manifest ({})",
                    set.num_classes, manifest.num_classes
                ),
            });
        }
        let instance = set.to_instance()?;
        if let Some(mask) = &entry.noisy_mask {
            if mask.len() != instance.len() {
                return Err(Error::invalid(
                    "noisy_mask",
                    format!(
                        "instance `{}` has {} demonstrations but a mask of length {}",
                        entry.id,
                        instance.len(),
                        mask.len()
                    ),
                ));
            }
        }
        out.push((entry.clone(), instance));
    }
    Ok((manifest, out))
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    write_json(manifest, path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub instance_id: String,
    pub predicted_class: usize,
}

pub fn read_predictions(path: impl AsRef<Path>, num_classes: usize) -> Result<PredictionTable> {
    let entries: Vec<PredictionEntry> = read_json(path.as_ref())?;
    let mut table = BTreeMap::new();
    for (row, e) in entries.into_iter().enumerate() {
        if e.predicted_class >= num_classes {
            return Err(Error::LabelOutOfRange {
                row,
                label: e.predicted_class,
                num_classes,
            });
        }
        if table.insert(e.instance_id.clone(), e.predicted_class).is_some() {
            return Err(Error::invalid(
                "predictions",
                format!("duplicate instance_id `{}`", e.instance_id),
            ));
        }
    }
    Ok(PredictionTable::new(table))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    Csv,
    #[default]
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::invalid("format", format!("expected csv|json, got {other}"))),
        }
    }
}

/// A result that can be written as plot-ready CSV or JSON.
pub trait Artifact: Serialize {
    fn to_csv(&self) -> String;
}

impl Artifact for ScoreVector {
    /// `index,score,rank` with rank 0 for the highest score.
    fn to_csv(&self) -> String {
        let ranks = descending_ranks(&self.scores);
        let mut out = String::from("index,score,rank\n");
        for (i, (s, r)) in self.scores.iter().zip(ranks).enumerate() {
            out.push_str(&format!("{i},{s},{r}\n"));
        }
        out
    }
}

impl Artifact for DetectionReport {
    fn to_csv(&self) -> String {
        curve_csv(&self.fraction_detected_curve)
    }
}

impl Artifact for Ranking {
    fn to_csv(&self) -> String {
        let mut out = String::from("position,index\n");
        for (p, i) in self.order.iter().enumerate() {
            out.push_str(&format!("{p},{i}\n"));
        }
        out
    }
}

impl Artifact for CurationPlan {
    /// Demonstrations in removal order with their summed influence.
    fn to_csv(&self) -> String {
        let mut out = String::from("position,index,score,removed\n");
        for (p, &i) in self.removal_order.iter().enumerate() {
            out.push_str(&format!("{p},{i},{},{}\n", self.summed_scores[i], p < self.k));
        }
        out
    }
}

/// `step,value` rows.
pub fn curve_csv(values: &[f64]) -> String {
    let mut out = String::from("step,value\n");
    for (s, v) in values.iter().enumerate() {
        out.push_str(&format!("{s},{v}\n"));
    }
    out
}

pub fn write_scores<A: Artifact>(artifact: &A, path: impl AsRef<Path>, format: OutputFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        OutputFormat::Json => write_json(artifact, path),
        OutputFormat::Csv => fs::write(path, artifact.to_csv()).map_err(|e| Error::io(path, e)),
    }
}
