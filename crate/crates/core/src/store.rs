//! Embedding containers and the EMB1 on-disk exchange format.
//!
//! Embeddings live in memory as `f64` matrices (rows = samples) so that
//! downstream metrics keep full precision; on disk they are stored as
//! little-endian `f32`, which is what the encoder produces anyway.
//!
//! An EMB1 store is a directory:
//!
//! ```text
//! <dir>/meta.json     (magic "EMB1", n, dim, modality, dtype, layout, normalized, ...)
//! <dir>/data.bin      (n * dim little-endian f32, row major)
//! <dir>/labels.jsonl  (optional, one JSON object per row)
//! ```

use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Rows are numerically unit-norm when within this of 1.
pub const NORM_TOLERANCE: f64 = 1e-5;

/// Which encoder a set of embeddings came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

/// A batch of embeddings from one modality, with optional per-row labels.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    /// `n x dim` matrix, one embedding per row.
    pub data: Array2<f64>,
    pub modality: Modality,
    /// Whether every row is unit-norm (checked at construction).
    pub normalized: bool,
    /// Free-form per-row label records (e.g. latent factors), one per row.
    pub labels: Option<Vec<serde_json::Value>>,
    /// Free-text provenance, e.g. which checkpoint and split produced this.
    pub source: String,
}

impl EmbeddingSet {
    /// Build a set, enforcing the container invariants: at least one row,
    /// at least two dimensions, all values finite, labels (when present)
    /// matching the row count, and unit rows when `normalized` says so.
    pub fn new(
        data: Array2<f64>,
        modality: Modality,
        normalized: bool,
        labels: Option<Vec<serde_json::Value>>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let (n, dim) = data.dim();
        if n == 0 {
            return Err(Error::InvalidArgument("embedding set has no rows".into()));
        }
        if dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "embedding dimension must be at least 2, got {dim}"
            )));
        }
        for ((i, j), &v) in data.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value {v} at row {i}, column {j}"
                )));
            }
        }
        if let Some(ref labels) = labels {
            if labels.len() != n {
                return Err(Error::Shape(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    n
                )));
            }
        }
        let set = EmbeddingSet {
            data,
            modality,
            normalized,
            labels,
            source: source.into(),
        };
        if normalized {
            set.check_unit_rows()?;
        }
        Ok(set)
    }

    /// Number of rows (samples).
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    /// Embedding dimensionality.
    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Borrow row `i`.
    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    /// Copy of this set with every row scaled to unit norm.
    /// A numerically zero row is an error.
    pub fn normalize_rows(&self) -> Result<EmbeddingSet> {
        let mut data = self.data.clone();
        for (i, mut row) in data.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::Numeric(format!(
                    "row {i} has zero norm and cannot be normalized"
                )));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(EmbeddingSet {
            data,
            modality: self.modality,
            normalized: true,
            labels: self.labels.clone(),
            source: self.source.clone(),
        })
    }

    fn check_unit_rows(&self) -> Result<()> {
        for (i, row) in self.data.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Numeric(format!(
                    "row {i} has norm {norm} but the set is flagged normalized"
                )));
            }
        }
        Ok(())
    }
}

/// Matched image/text embeddings: row `i` of each side describes the same
/// underlying sample. Construct with [`make_paired`], which guarantees both
/// sides are unit-norm and shape-compatible.
#[derive(Debug, Clone)]
pub struct PairedEmbeddingSet {
    pub images: EmbeddingSet,
    pub texts: EmbeddingSet,
}

impl PairedEmbeddingSet {
    /// Number of matched pairs.
    pub fn n(&self) -> usize {
        self.images.n()
    }

    /// Embedding dimensionality.
    pub fn dim(&self) -> usize {
        self.images.dim()
    }
}

/// Pair an image set with a text set, normalizing either side on ingest if
/// it is not already unit-norm. Already-normalized sets pass through
/// unchanged, so pairing is idempotent.
pub fn make_paired(images: EmbeddingSet, texts: EmbeddingSet) -> Result<PairedEmbeddingSet> {
    if images.modality != Modality::Image {
        return Err(Error::InvalidArgument(format!(
            "first argument must be image embeddings, got {}",
            images.modality
        )));
    }
    if texts.modality != Modality::Text {
        return Err(Error::InvalidArgument(format!(
            "second argument must be text embeddings, got {}",
            texts.modality
        )));
    }
    if images.n() != texts.n() || images.dim() != texts.dim() {
        return Err(Error::Shape(format!(
            "paired sets must match: images are {}x{}, texts are {}x{}",
            images.n(),
            images.dim(),
            texts.n(),
            texts.dim()
        )));
    }
    let images = if images.normalized {
        images
    } else {
        images.normalize_rows()?
    };
    let texts = if texts.normalized {
        texts
    } else {
        texts.normalize_rows()?
    };
    Ok(PairedEmbeddingSet { images, texts })
}

/// Named, ordered groups of row indices (e.g. all rows of digit class "3").
///
/// Group order is preserved from construction; wherever a metric breaks
/// ties "by class index" it means the position in this list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupIndex {
    groups: Vec<(String, Vec<usize>)>,
}

impl GroupIndex {
    /// Build an index over a set with `n_rows` rows. Every group must be
    /// non-empty with in-range, duplicate-free indices, and labels must be
    /// unique. Indices are stored sorted ascending.
    pub fn new(groups: Vec<(String, Vec<usize>)>, n_rows: usize) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidArgument("group index has no groups".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::with_capacity(groups.len());
        for (label, mut indices) in groups {
            if !seen.insert(label.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate group label {label:?}"
                )));
            }
            if indices.is_empty() {
                return Err(Error::InvalidArgument(format!("group {label:?} is empty")));
            }
            indices.sort_unstable();
            if indices.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "group {label:?} lists a row more than once"
                )));
            }
            if *indices.last().unwrap() >= n_rows {
                return Err(Error::InvalidArgument(format!(
                    "group {label:?} references row {} but the set has {} rows",
                    indices.last().unwrap(),
                    n_rows
                )));
            }
            out.push((label, indices));
        }
        Ok(GroupIndex { groups: out })
    }

    /// Number of groups.
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Iterate `(label, sorted row indices)` in construction order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.groups
            .iter()
            .map(|(label, idx)| (label.as_str(), idx.as_slice()))
    }

    /// Group labels in construction order.
    pub fn labels(&self) -> Vec<&str> {
        self.groups.iter().map(|(l, _)| l.as_str()).collect()
    }

    /// Indices of the named group, if present.
    pub fn get(&self, label: &str) -> Option<&[usize]> {
        self.groups
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, idx)| idx.as_slice())
    }

    /// Build groups from a string-valued field of the set's labels, in
    /// order of first appearance. Numeric JSON values are stringified, so
    /// a digit label `3` groups as `"3"`.
    pub fn from_label_field(set: &EmbeddingSet, field: &str) -> Result<Self> {
        let labels = set.labels.as_ref().ok_or_else(|| {
            Error::InvalidArgument("embedding set carries no labels to group by".into())
        })?;
        let mut order: Vec<String> = Vec::new();
        let mut groups: std::collections::BTreeMap<String, Vec<usize>> =
            std::collections::BTreeMap::new();
        for (i, record) in labels.iter().enumerate() {
            let value = record.get(field).ok_or_else(|| {
                Error::InvalidArgument(format!("label record {i} has no field {field:?}"))
            })?;
            let key = match value {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(i);
        }
        let groups = order
            .into_iter()
            .map(|label| {
                let idx = groups.remove(&label).unwrap();
                (label, idx)
            })
            .collect();
        GroupIndex::new(groups, set.n())
    }
}

/// Pair distances above this many ordered pairs are subsampled by default.
pub const DEFAULT_EXACT_PAIR_LIMIT: usize = 8192 * 8191;

/// Distance between two unit vectors, used by all pairwise metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `(1 - a . b) / 2`, in `[0, 1]` for unit vectors.
    #[default]
    CosineDissimilarity,
}

/// Knobs shared by the pairwise metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub distance: Distance,
    /// Temperature for the uniformity term.
    pub temperature: f64,
    /// Upper bound on ordered pairs per O(n^2) sum before seeded
    /// subsampling kicks in. `None` means exact up to
    /// [`DEFAULT_EXACT_PAIR_LIMIT`] pairs, subsampled at that cap beyond.
    pub pair_subsample_cap: Option<usize>,
    /// Seed for the subsampling streams.
    pub rng_seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            distance: Distance::CosineDissimilarity,
            temperature: 1.0,
            pair_subsample_cap: None,
            rng_seed: 0,
        }
    }
}

impl MetricsConfig {
    /// Check the numeric preconditions.
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if let Some(cap) = self.pair_subsample_cap {
            if cap == 0 {
                return Err(Error::InvalidArgument(
                    "pair_subsample_cap must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }

    /// Effective cap on ordered pairs per pairwise sum.
    pub fn effective_pair_cap(&self) -> usize {
        self.pair_subsample_cap.unwrap_or(DEFAULT_EXACT_PAIR_LIMIT)
    }
}

#[derive(Serialize, Deserialize)]
struct Emb1Meta {
    magic: String,
    n: usize,
    dim: usize,
    modality: Modality,
    dtype: String,
    layout: String,
    normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

const EMB1_MAGIC: &str = "EMB1";
const EMB1_DTYPE: &str = "f32le";
const EMB1_LAYOUT: &str = "row_major";

/// Write `set` as an EMB1 directory. The matrix is cast to `f32`; writing
/// the same set twice produces byte-identical files.
pub fn write_embedding_set(set: &EmbeddingSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut payload = Vec::with_capacity(set.n() * set.dim() * 4);
    for &v in set.data.iter() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let data_path = dir.join("data.bin");
    fs::write(&data_path, payload).map_err(|e| Error::io(&data_path, e))?;

    let labels_name = if let Some(ref labels) = set.labels {
        let mut out = String::new();
        for record in labels {
            // serde_json maps keep sorted key order, so lines are stable.
            out.push_str(&serde_json::to_string(record).map_err(|e| {
                Error::format(dir.join("labels.jsonl"), format!("label serialization: {e}"))
            })?);
            out.push('\n');
        }
        let labels_path = dir.join("labels.jsonl");
        fs::write(&labels_path, out).map_err(|e| Error::io(&labels_path, e))?;
        Some("labels.jsonl".to_string())
    } else {
        None
    };

    let meta = Emb1Meta {
        magic: EMB1_MAGIC.into(),
        n: set.n(),
        dim: set.dim(),
        modality: set.modality,
        dtype: EMB1_DTYPE.into(),
        layout: EMB1_LAYOUT.into(),
        normalized: set.normalized,
        labels: labels_name,
        source: if set.source.is_empty() {
            None
        } else {
            Some(set.source.clone())
        },
    };
    let meta_path = dir.join("meta.json");
    let mut text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::format(&meta_path, format!("meta serialization: {e}")))?;
    text.push('\n');
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

/// Read an EMB1 store. `path` may be the directory or its `meta.json`.
pub fn read_embedding_set(path: &Path) -> Result<EmbeddingSet> {
    let meta_path: PathBuf = if path.is_dir() {
        path.join("meta.json")
    } else {
        path.to_path_buf()
    };
    let dir = meta_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Emb1Meta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::format(&meta_path, format!("malformed meta.json: {e}")))?;

    if meta.magic != EMB1_MAGIC {
        return Err(Error::format(
            &meta_path,
            format!("magic is {:?}, expected {EMB1_MAGIC:?}", meta.magic),
        ));
    }
    if meta.dtype != EMB1_DTYPE {
        return Err(Error::format(
            &meta_path,
            format!("unsupported dtype {:?}", meta.dtype),
        ));
    }
    if meta.layout != EMB1_LAYOUT {
        return Err(Error::format(
            &meta_path,
            format!("unsupported layout {:?}", meta.layout),
        ));
    }

    let data_path = dir.join("data.bin");
    let mut file = fs::File::open(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| Error::io(&data_path, e))?;
    let expected = meta
        .n
        .checked_mul(meta.dim)
        .and_then(|e| e.checked_mul(4))
        .ok_or_else(|| Error::format(&meta_path, "n * dim overflows".to_string()))?;
    if payload.len() != expected {
        return Err(Error::format(
            &data_path,
            format!(
                "payload size mismatch: header says {} x {} ({expected} bytes), file has {} bytes",
                meta.n,
                meta.dim,
                payload.len()
            ),
        ));
    }

    let mut values = Vec::with_capacity(meta.n * meta.dim);
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::format(
                &data_path,
                format!("non-finite value at element {k}"),
            ));
        }
        values.push(v as f64);
    }
    let data = Array2::from_shape_vec((meta.n, meta.dim), values)
        .expect("length was checked against n * dim");

    let labels = match meta.labels {
        Some(name) => {
            let labels_path = dir.join(&name);
            let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
            let mut records = Vec::with_capacity(meta.n);
            for (i, line) in text.lines().enumerate() {
                records.push(serde_json::from_str(line).map_err(|e| {
                    Error::format(&labels_path, format!("bad JSON on line {}: {e}", i + 1))
                })?);
            }
            if records.len() != meta.n {
                return Err(Error::format(
                    &labels_path,
                    format!("{} label lines for {} rows", records.len(), meta.n),
                ));
            }
            Some(records)
        }
        None => None,
    };

    EmbeddingSet::new(
        data,
        meta.modality,
        meta.normalized,
        labels,
        meta.source.unwrap_or_default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit_set(n: usize, dim: usize, modality: Modality, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Array2::zeros((n, dim));
        for mut row in data.rows_mut() {
            for v in row.iter_mut() {
                *v = rng.random::<f64>() * 2.0 - 1.0;
            }
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        EmbeddingSet::new(data, modality, true, None, "test").unwrap()
    }

    #[test]
    fn constructor_rejects_bad_shapes_and_values() {
        assert!(EmbeddingSet::new(
            Array2::zeros((0, 4)),
            Modality::Image,
            false,
            None,
            ""
        )
        .is_err());
        assert!(EmbeddingSet::new(
            Array2::zeros((3, 1)),
            Modality::Image,
            false,
            None,
            ""
        )
        .is_err());
        let nan = array![[1.0, f64::NAN]];
        assert!(EmbeddingSet::new(nan, Modality::Image, false, None, "").is_err());
        // claimed normalized, but rows are zero
        assert!(EmbeddingSet::new(Array2::zeros((2, 3)), Modality::Image, true, None, "").is_err());
    }

    #[test]
    fn normalize_scales_a_three_four_row() {
        let set = EmbeddingSet::new(array![[3.0, 4.0]], Modality::Image, false, None, "").unwrap();
        let unit = set.normalize_rows().unwrap();
        assert!((unit.data[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((unit.data[[0, 1]] - 0.8).abs() < 1e-15);
        assert!(unit.normalized);
    }

    #[test]
    fn normalize_rejects_zero_rows() {
        let set = EmbeddingSet::new(
            array![[1.0, 0.0], [0.0, 0.0]],
            Modality::Image,
            false,
            None,
            "",
        )
        .unwrap();
        assert!(matches!(set.normalize_rows(), Err(Error::Numeric(_))));
    }

    #[test]
    fn make_paired_checks_shapes_and_modalities() {
        let img = unit_set(10, 8, Modality::Image, 1);
        let txt = unit_set(10, 8, Modality::Text, 2);
        let pairs = make_paired(img.clone(), txt).unwrap();
        assert_eq!(pairs.n(), 10);
        assert_eq!(pairs.dim(), 8);

        let short = unit_set(9, 8, Modality::Text, 3);
        assert!(matches!(
            make_paired(img.clone(), short),
            Err(Error::Shape(_))
        ));
        let wrong = unit_set(10, 8, Modality::Image, 4);
        assert!(make_paired(img, wrong).is_err());
    }

    #[test]
    fn make_paired_is_idempotent_on_normalized_input() {
        let img = unit_set(6, 5, Modality::Image, 5);
        let txt = unit_set(6, 5, Modality::Text, 6);
        let once = make_paired(img, txt).unwrap();
        let twice = make_paired(once.images.clone(), once.texts.clone()).unwrap();
        assert_eq!(once.images.data, twice.images.data);
        assert_eq!(once.texts.data, twice.texts.data);
    }

    #[test]
    fn emb1_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..20);
            let dim = rng.random_range(2..16);
            // f32-representable values so the f64 -> f32 -> f64 trip is exact
            let data = Array2::from_shape_fn((n, dim), |_| {
                (rng.random::<f32>() * 2.0 - 1.0) as f64
            });
            let labels: Vec<serde_json::Value> = (0..n)
                .map(|i| serde_json::json!({"digit": i % 10, "color": "red"}))
                .collect();
            let set =
                EmbeddingSet::new(data, Modality::Text, false, Some(labels), "roundtrip").unwrap();
            let path = dir.path().join(format!("set{seed}"));
            write_embedding_set(&set, &path).unwrap();
            let back = read_embedding_set(&path).unwrap();
            assert_eq!(set.data, back.data, "seed {seed}");
            assert_eq!(back.modality, Modality::Text);
            assert!(!back.normalized);
            assert_eq!(set.labels, back.labels);
            assert_eq!(back.source, "roundtrip");
        }
    }

    #[test]
    fn emb1_writes_are_byte_deterministic() {
        let set = unit_set(4, 3, Modality::Image, 7);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        write_embedding_set(&set, &a).unwrap();
        write_embedding_set(&set, &b).unwrap();
        for name in ["meta.json", "data.bin"] {
            assert_eq!(
                fs::read(a.join(name)).unwrap(),
                fs::read(b.join(name)).unwrap(),
                "{name} differs between identical writes"
            );
        }
    }

    #[test]
    fn emb1_minimal_set_survives() {
        let set = EmbeddingSet::new(array![[0.6, 0.8]], Modality::Image, true, None, "").unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_embedding_set(&set, dir.path()).unwrap();
        let back = read_embedding_set(dir.path()).unwrap();
        assert_eq!(back.n(), 1);
        assert_eq!(back.dim(), 2);
        assert!(back.normalized);
    }

    #[test]
    fn emb1_rejects_payload_size_mismatch() {
        let set = unit_set(5, 3, Modality::Image, 8);
        let dir = tempfile::tempdir().unwrap();
        write_embedding_set(&set, dir.path()).unwrap();
        // truncate the payload: 12 floats on disk, header still says 15
        let data_path = dir.path().join("data.bin");
        let bytes = fs::read(&data_path).unwrap();
        fs::write(&data_path, &bytes[..12 * 4]).unwrap();
        match read_embedding_set(dir.path()) {
            Err(Error::Format { reason, .. }) => {
                assert!(reason.contains("payload size mismatch"), "{reason}")
            }
            other => panic!("expected payload size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn emb1_rejects_bad_magic_and_missing_files() {
        let set = unit_set(2, 3, Modality::Image, 9);
        let dir = tempfile::tempdir().unwrap();
        write_embedding_set(&set, dir.path()).unwrap();
        let meta_path = dir.path().join("meta.json");
        let text = fs::read_to_string(&meta_path)
            .unwrap()
            .replace("EMB1", "EMB9");
        fs::write(&meta_path, text).unwrap();
        assert!(matches!(
            read_embedding_set(dir.path()),
            Err(Error::Format { .. })
        ));

        let missing = dir.path().join("nothing-here");
        assert!(matches!(
            read_embedding_set(&missing),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn emb1_rejects_non_finite_payloads() {
        let set = unit_set(2, 2, Modality::Image, 10);
        let dir = tempfile::tempdir().unwrap();
        write_embedding_set(&set, dir.path()).unwrap();
        let data_path = dir.path().join("data.bin");
        let mut bytes = fs::read(&data_path).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&data_path, bytes).unwrap();
        assert!(read_embedding_set(dir.path()).is_err());
    }

    #[test]
    fn emb1_checks_the_normalized_flag_on_load() {
        let set = unit_set(3, 4, Modality::Image, 11);
        let dir = tempfile::tempdir().unwrap();
        write_embedding_set(&set, dir.path()).unwrap();
        let data_path = dir.path().join("data.bin");
        let mut bytes = fs::read(&data_path).unwrap();
        bytes[..4].copy_from_slice(&5.0f32.to_le_bytes());
        fs::write(&data_path, bytes).unwrap();
        assert!(matches!(
            read_embedding_set(dir.path()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn group_index_validates_and_preserves_order() {
        let groups = vec![
            ("b".to_string(), vec![3, 1]),
            ("a".to_string(), vec![0, 2]),
        ];
        let idx = GroupIndex::new(groups, 4).unwrap();
        assert_eq!(idx.labels(), vec!["b", "a"]);
        assert_eq!(idx.get("b"), Some(&[1, 3][..]));

        assert!(GroupIndex::new(vec![], 4).is_err());
        assert!(GroupIndex::new(vec![("a".into(), vec![])], 4).is_err());
        assert!(GroupIndex::new(vec![("a".into(), vec![4])], 4).is_err());
        assert!(GroupIndex::new(vec![("a".into(), vec![1, 1])], 4).is_err());
        assert!(GroupIndex::new(
            vec![("a".into(), vec![0]), ("a".into(), vec![1])],
            4
        )
        .is_err());
    }

    #[test]
    fn group_index_from_labels_follows_first_appearance() {
        let labels = vec![
            serde_json::json!({"digit": 7}),
            serde_json::json!({"digit": 3}),
            serde_json::json!({"digit": 7}),
        ];
        let set = EmbeddingSet::new(
            Array2::from_elem((3, 2), 0.5),
            Modality::Image,
            false,
            Some(labels),
            "",
        )
        .unwrap();
        let idx = GroupIndex::from_label_field(&set, "digit").unwrap();
        assert_eq!(idx.labels(), vec!["7", "3"]);
        assert_eq!(idx.get("7"), Some(&[0, 2][..]));
        assert!(GroupIndex::from_label_field(&set, "missing").is_err());
    }

    #[test]
    fn metrics_config_validates() {
        assert!(MetricsConfig::default().validate().is_ok());
        let bad = MetricsConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let zero_cap = MetricsConfig {
            pair_subsample_cap: Some(0),
            ..Default::default()
        };
        assert!(zero_cap.validate().is_err());
    }
}
