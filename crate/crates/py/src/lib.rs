//! Python bindings for the multimodal gap toolkit.
//!
//! The surface is deliberately thin: raw data crosses the boundary as
//! `bytes` and `list[list[float]]`, structured results come back as JSON
//! strings (`json.loads` on the Python side). Embedding rows passed in
//! from Python are L2-normalized on entry, matching what every metric
//! expects.
//!
//! Build: `cargo build --release -p mmgap-py`, then copy
//! `target/release/libmmgap.so` next to your script as `mmgap.so`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use mmgap_core::ablation::{ablation_sweep, Evaluator};
use mmgap_core::clip::{self, checkpoint, DualEncoder, ModelConfig, TrainConfig};
use mmgap_core::gap;
use mmgap_core::harness;
use mmgap_core::mad::{self, MadDatasetConfig};
use mmgap_core::store::{make_paired, EmbeddingSet, MetricsConfig, Modality, PairedEmbeddingSet};
use mmgap_core::toy::{self, ToyConfig, ToyPairMultiset, ToySetting};
use mmgap_core::vocab;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string_pretty(value).map_err(err)
}

/// Build a normalized embedding set from Python rows.
fn set_from_rows(rows: Vec<Vec<f64>>, modality: Modality, source: &str) -> PyResult<EmbeddingSet> {
    if rows.is_empty() {
        return Err(err("no embedding rows given"));
    }
    let dim = rows[0].len();
    let mut flat = Vec::with_capacity(rows.len() * dim);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(err(format!(
                "row {i} has {} values, expected {dim}",
                row.len()
            )));
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(err(format!("row {i} cannot be normalized (norm {norm})")));
        }
        flat.extend(row.iter().map(|v| v / norm));
    }
    let data = ndarray::Array2::from_shape_vec((rows.len(), dim), flat).map_err(err)?;
    EmbeddingSet::new(data, modality, true, None, source).map_err(err)
}

fn paired_from_rows(
    images: Vec<Vec<f64>>,
    texts: Vec<Vec<f64>>,
) -> PyResult<PairedEmbeddingSet> {
    let img = set_from_rows(images, Modality::Image, "python images")?;
    let txt = set_from_rows(texts, Modality::Text, "python texts")?;
    make_paired(img, txt).map_err(err)
}

/// A trained two-tower encoder.
#[pyclass]
struct Model {
    inner: DualEncoder<f32>,
}

#[pymethods]
impl Model {
    /// Train on a generated dataset directory. `config_json` may carry
    /// `{"model": {...}, "train": {...}}` sections; both default.
    #[staticmethod]
    #[pyo3(signature = (dataset_dir, config_json=None))]
    fn train(py: Python<'_>, dataset_dir: &str, config_json: Option<&str>) -> PyResult<Model> {
        #[derive(Default, serde::Deserialize)]
        #[serde(default, deny_unknown_fields)]
        struct Spec {
            model: ModelConfig,
            train: TrainConfig,
        }
        let spec: Spec = match config_json {
            Some(text) => serde_json::from_str(text).map_err(err)?,
            None => Spec::default(),
        };
        let dataset = mad::load_dataset(dataset_dir.as_ref()).map_err(err)?;
        let inner = py.detach(|| -> PyResult<DualEncoder<f32>> {
            let train = dataset.train();
            let captions: Vec<u8> = train.captions.iter().flatten().copied().collect();
            let (model, _log) =
                clip::train(train.images, &captions, &spec.model, &spec.train).map_err(err)?;
            Ok(model)
        })?;
        Ok(Model { inner })
    }

    /// Load a checkpoint file or a run directory containing one.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        Ok(Model {
            inner: checkpoint::load(path.as_ref()).map_err(err)?,
        })
    }

    /// Write `checkpoint.bin` into a directory; returns the file path.
    fn save(&self, dir: &str) -> PyResult<String> {
        std::fs::create_dir_all(dir).map_err(err)?;
        let path = checkpoint::save(dir.as_ref(), &self.inner, None).map_err(err)?;
        Ok(path.display().to_string())
    }

    /// Embed raw RGB image bytes (28x28x3 per sample); returns unit rows.
    fn encode_images(&self, py: Python<'_>, images: &[u8]) -> PyResult<Vec<Vec<f64>>> {
        let data = py.detach(|| self.inner.encode_images(images)).map_err(err)?;
        Ok(data.outer_iter().map(|row| row.to_vec()).collect())
    }

    /// Embed tokenized captions (8 token ids per sample); returns unit rows.
    fn encode_texts(&self, py: Python<'_>, tokens: &[u8]) -> PyResult<Vec<Vec<f64>>> {
        let data = py.detach(|| self.inner.encode_texts(tokens)).map_err(err)?;
        Ok(data.outer_iter().map(|row| row.to_vec()).collect())
    }

    /// Zero-shot and ideal-word accuracies on a dataset split
    /// ("train"/"test"); returns the evaluation report as JSON.
    fn evaluate(&self, py: Python<'_>, dataset_dir: &str, split: &str) -> PyResult<String> {
        let dataset = mad::load_dataset(dataset_dir.as_ref()).map_err(err)?;
        let report = py.detach(|| {
            let reference = dataset.train();
            let images = match split {
                "train" => dataset.train(),
                "test" => dataset.test(),
                other => return Err(err(format!("unknown split {other:?}"))),
            };
            harness::evaluate_on(&self.inner, &reference, &images).map_err(err)
        })?;
        to_json(&report)
    }
}

/// Generate a captioned digit dataset; `config_json` is the dataset
/// recipe (all fields optional). Returns the written meta record as JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json=None))]
fn generate_dataset(py: Python<'_>, out_dir: &str, config_json: Option<&str>) -> PyResult<String> {
    let cfg: MadDatasetConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(err)?,
        None => MadDatasetConfig::default(),
    };
    let meta = py
        .detach(|| mad::generate_dataset(&cfg, out_dir.as_ref()))
        .map_err(err)?;
    to_json(&meta)
}

/// The meta record of an existing dataset directory, as JSON.
#[pyfunction]
fn dataset_meta(dir: &str) -> PyResult<String> {
    let dataset = mad::load_dataset(dir.as_ref()).map_err(err)?;
    to_json(&dataset.meta)
}

/// Raw bytes of a dataset split: `(images, captions)` where images are
/// 28x28x3 RGB per sample and captions are 8 token ids per sample.
#[pyfunction]
fn dataset_split(dir: &str, split: &str) -> PyResult<(Vec<u8>, Vec<u8>)> {
    let dataset = mad::load_dataset(dir.as_ref()).map_err(err)?;
    let view = match split {
        "train" => dataset.train(),
        "test" => dataset.test(),
        other => return Err(err(format!("unknown split {other:?}"))),
    };
    let captions: Vec<u8> = view.captions.iter().flatten().copied().collect();
    Ok((view.images.to_vec(), captions))
}

/// Euclidean distance between the two modality centroids.
#[pyfunction]
fn l2m(images: Vec<Vec<f64>>, texts: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(gap::l2m(&paired_from_rows(images, texts)?))
}

/// Relative modality gap in [0, 1].
#[pyfunction]
fn rmg(images: Vec<Vec<f64>>, texts: Vec<Vec<f64>>) -> PyResult<f64> {
    gap::rmg(&paired_from_rows(images, texts)?, &MetricsConfig::default()).map_err(err)
}

/// Full gap report (L2M, RMG, alignment, uniformity, gap vector) as JSON.
#[pyfunction]
fn gap_report(images: Vec<Vec<f64>>, texts: Vec<Vec<f64>>) -> PyResult<String> {
    let pairs = paired_from_rows(images, texts)?;
    let report = gap::gap_report(&pairs, &MetricsConfig::default()).map_err(err)?;
    to_json(&report)
}

/// Successive-ablation curve of the gap metrics, as CSV text with columns
/// `k,l2m,rmg`.
#[pyfunction]
fn ablation_csv(images: Vec<Vec<f64>>, texts: Vec<Vec<f64>>, max_k: usize) -> PyResult<String> {
    let pairs = paired_from_rows(images, texts)?;
    let cfg = MetricsConfig::default();
    let evaluators = [
        Evaluator::new("l2m", |p: &PairedEmbeddingSet, _: &[usize]| Ok(gap::l2m(p))),
        Evaluator::new("rmg", {
            let cfg = cfg.clone();
            move |p: &PairedEmbeddingSet, _: &[usize]| gap::rmg(p, &cfg)
        }),
    ];
    let curve = ablation_sweep(&pairs, &evaluators, max_k, &cfg).map_err(err)?;
    Ok(curve.to_csv())
}

/// Tokenize caption words into the fixed 8-slot token layout.
#[pyfunction]
fn tokenize(words: Vec<String>) -> PyResult<Vec<u8>> {
    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
    let tokens = vocab::tokenize(&refs).map_err(err)?;
    Ok(tokens.to_vec())
}

/// Grid-search the 2-D toy problem. `setting` is "perfect" or "mismatch";
/// `variant` swaps the duplicated matched pair for a second cross pair.
/// Returns the optimum (angles, canonical form, loss, matched gap) as JSON.
#[pyfunction]
#[pyo3(signature = (setting, resolution=6, temperature=1.0, variant=false))]
fn toy_grid_search(
    py: Python<'_>,
    setting: &str,
    resolution: u32,
    temperature: f64,
    variant: bool,
) -> PyResult<String> {
    let setting = match (setting, variant) {
        ("perfect", _) => ToySetting::Perfect,
        ("mismatch", false) => ToySetting::Mismatch,
        ("mismatch", true) => {
            ToySetting::Custom(ToyPairMultiset::mismatch_variant().pairs().to_vec())
        }
        (other, _) => return Err(err(format!("unknown setting {other:?}"))),
    };
    let cfg = ToyConfig {
        resolution_degrees: resolution,
        temperature,
        setting,
        fix_first_point: true,
    };
    let optimum = py.detach(|| toy::grid_search(&cfg)).map_err(err)?;
    to_json(&optimum)
}

#[pymodule]
fn mmgap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_meta, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_split, m)?)?;
    m.add_function(wrap_pyfunction!(l2m, m)?)?;
    m.add_function(wrap_pyfunction!(rmg, m)?)?;
    m.add_function(wrap_pyfunction!(gap_report, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_csv, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(toy_grid_search, m)?)?;
    Ok(())
}
