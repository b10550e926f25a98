//! Report generation over a finished results directory: learning-rate
//! selection, the aggregate CSV, trend charts, the ablation curve, the
//! presence-bias bars and the modality PCA scatter.
//!
//! Everything here only *reads* the results directory; report files go to a
//! caller-chosen output directory (the sweep itself drops `aggregate.csv`
//! into the results root through [`write_aggregate`]). All outputs are
//! byte-deterministic for identical inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;

use super::stats::{mean_std, pca_top2, silhouette, spearman_rho};
use super::{load_all_records, RunRecord, SweepConfig, EMBEDDINGS_DIR};
use crate::ablation::{ablation_sweep, Evaluator};
use crate::error::{Error, Result};
use crate::gap;
use crate::store::{make_paired, read_embedding_set, EmbeddingSet, MetricsConfig};
use crate::svg::{self, CirclePoint, Series};

/// Exact column order of the aggregate CSV.
pub const AGGREGATE_HEADER: &str = "setting,k,always_factor,embed_dim,lr,seed_count,l2m,l2m_std,\
rmg,rmg_std,moad_img,moad_txt,acc_digit,acc_attr_mean,ideal_word_acc,selection_score";

/// One aggregate row: the seed-averaged results of the selected learning
/// rate for one experimental setting.
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub setting: String,
    pub k: Option<u8>,
    pub always_factor: Option<String>,
    pub embed_dim: usize,
    /// The selected learning rate.
    pub lr: f64,
    pub seed_count: usize,
    pub l2m: f64,
    pub l2m_std: f64,
    pub rmg: f64,
    pub rmg_std: f64,
    pub moad_img: f64,
    pub moad_txt: f64,
    pub acc_digit: f64,
    pub acc_attr_mean: f64,
    pub ideal_word_acc: f64,
    /// Mean held-out selection criterion of the selected runs.
    pub selection_score: f64,
    /// Directories of the runs this row averages, sorted by seed.
    pub run_dirs: Vec<PathBuf>,
}

/// Key identifying one experimental setting (learning rate and seed are
/// collapsed away by selection and averaging).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct SettingKey {
    /// Imbalance runs sort before presence runs.
    family: u8,
    k: Option<u8>,
    always_factor: Option<String>,
    embed_dim: usize,
}

impl SettingKey {
    fn of(record: &RunRecord) -> SettingKey {
        SettingKey {
            family: if record.setting.k.is_some() { 0 } else { 1 },
            k: record.setting.k,
            always_factor: record.setting.always_factor.clone(),
            embed_dim: record.setting.embed_dim,
        }
    }

    fn label(&self) -> String {
        match (self.k, &self.always_factor) {
            (Some(k), _) => format!("ii-k{k}-d{}", self.embed_dim),
            (_, Some(f)) => format!("pb-{f}-d{}", self.embed_dim),
            _ => format!("d{}", self.embed_dim),
        }
    }
}

/// Group finished records by setting, select the best learning rate per
/// setting (highest mean held-out selection score, ties to the smaller
/// rate), and average the selected runs over seeds.
pub fn aggregate(records: &[(PathBuf, RunRecord)]) -> Result<Vec<AggregateRow>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "no finished runs to aggregate".into(),
        ));
    }
    // setting -> lr bits -> runs (lr as bits so it can key a BTreeMap).
    let mut by_setting: BTreeMap<SettingKey, BTreeMap<u64, Vec<&(PathBuf, RunRecord)>>> =
        BTreeMap::new();
    for entry in records {
        by_setting
            .entry(SettingKey::of(&entry.1))
            .or_default()
            .entry(entry.1.setting.learning_rate.to_bits())
            .or_default()
            .push(entry);
    }

    let mut rows = Vec::new();
    for (key, by_lr) in by_setting {
        let (&best_bits, _) = by_lr
            .iter()
            .max_by(|(abits, aruns), (bbits, bruns)| {
                let a = mean_std(
                    &aruns
                        .iter()
                        .map(|(_, r)| r.val_selection_score)
                        .collect::<Vec<_>>(),
                )
                .0;
                let b = mean_std(
                    &bruns
                        .iter()
                        .map(|(_, r)| r.val_selection_score)
                        .collect::<Vec<_>>(),
                )
                .0;
                // Ties go to the smaller learning rate: compare score
                // first, then *reversed* rate.
                a.total_cmp(&b).then(
                    f64::from_bits(**bbits).total_cmp(&f64::from_bits(**abits)),
                )
            })
            .expect("setting groups are non-empty");
        let mut selected: Vec<&(PathBuf, RunRecord)> = by_lr[&best_bits].clone();
        selected.sort_by_key(|(_, r)| r.setting.seed);

        let of = |f: &dyn Fn(&RunRecord) -> f64| -> Vec<f64> {
            selected.iter().map(|(_, r)| f(r)).collect()
        };
        let (l2m, l2m_std) = mean_std(&of(&|r| r.gap.l2m));
        let (rmg, rmg_std) = mean_std(&of(&|r| r.gap.rmg));
        rows.push(AggregateRow {
            setting: key.label(),
            k: key.k,
            always_factor: key.always_factor.clone(),
            embed_dim: key.embed_dim,
            lr: f64::from_bits(best_bits),
            seed_count: selected.len(),
            l2m,
            l2m_std,
            rmg,
            rmg_std,
            moad_img: mean_std(&of(&|r| r.moad_img.value)).0,
            moad_txt: mean_std(&of(&|r| r.moad_txt.value)).0,
            acc_digit: mean_std(&of(&|r| r.eval.digit_accuracy)).0,
            acc_attr_mean: mean_std(&of(&|r| r.eval.mean_attribute_accuracy)).0,
            ideal_word_acc: mean_std(&of(&|r| r.eval.ideal_word_accuracy)).0,
            selection_score: mean_std(&of(&|r| r.val_selection_score)).0,
            run_dirs: selected.iter().map(|(d, _)| d.clone()).collect(),
        });
    }
    Ok(rows)
}

fn csv_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

/// Render aggregate rows as CSV under [`AGGREGATE_HEADER`].
pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for row in rows {
        let k = row.k.map(|k| k.to_string()).unwrap_or_default();
        let always = row.always_factor.clone().unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.setting,
            k,
            always,
            row.embed_dim,
            csv_num(row.lr),
            row.seed_count,
            csv_num(row.l2m),
            csv_num(row.l2m_std),
            csv_num(row.rmg),
            csv_num(row.rmg_std),
            csv_num(row.moad_img),
            csv_num(row.moad_txt),
            csv_num(row.acc_digit),
            csv_num(row.acc_attr_mean),
            csv_num(row.ideal_word_acc),
            csv_num(row.selection_score),
        ));
    }
    out
}

/// Aggregate every finished run under the config's results directory and
/// write `aggregate.csv` at its root. Called by the sweep runners once all
/// runs are settled; concurrent writers produce identical bytes.
pub fn write_aggregate(cfg: &SweepConfig) -> Result<PathBuf> {
    let records = load_all_records(cfg)?;
    let rows = aggregate(&records)?;
    let path = cfg.out_dir.join("aggregate.csv");
    super::write_atomic(&path, aggregate_csv(&rows).as_bytes())?;
    Ok(path)
}

/// Monotone-trend summary of the imbalance sweep at one embedding
/// dimension: Spearman rank correlation of each headline metric against k.
#[derive(Debug, Clone)]
pub struct TrendReport {
    pub embed_dim: usize,
    pub k_values: Vec<u8>,
    /// Metric name -> (per-k means, Spearman rho against k).
    pub metrics: BTreeMap<String, (Vec<f64>, f64)>,
}

/// Compute per-k means and rank correlations for one embedding dimension
/// of the imbalance sweep. Needs at least two distinct k values.
pub fn trend_report(rows: &[AggregateRow], embed_dim: usize) -> Result<TrendReport> {
    let mut picked: Vec<&AggregateRow> = rows
        .iter()
        .filter(|r| r.embed_dim == embed_dim && r.k.is_some())
        .collect();
    picked.sort_by_key(|r| r.k.unwrap());
    if picked.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "trend report needs at least two k settings at dim {embed_dim}, found {}",
            picked.len()
        )));
    }
    let ks: Vec<f64> = picked.iter().map(|r| r.k.unwrap() as f64).collect();
    let mut metrics = BTreeMap::new();
    for (name, get) in metric_columns() {
        let values: Vec<f64> = picked.iter().map(|r| get(r)).collect();
        // A perfectly constant column has no defined rank correlation;
        // report it as NaN rather than failing the whole report.
        let rho = spearman_rho(&ks, &values).unwrap_or(f64::NAN);
        metrics.insert(name.to_string(), (values, rho));
    }
    Ok(TrendReport {
        embed_dim,
        k_values: picked.iter().map(|r| r.k.unwrap()).collect(),
        metrics,
    })
}

/// The headline metrics charted against k, with axis labels.
fn metric_columns() -> Vec<(&'static str, fn(&AggregateRow) -> f64)> {
    vec![
        ("l2m", |r: &AggregateRow| r.l2m),
        ("rmg", |r: &AggregateRow| r.rmg),
        ("moad_img", |r: &AggregateRow| r.moad_img),
        ("moad_txt", |r: &AggregateRow| r.moad_txt),
        ("acc_digit", |r: &AggregateRow| r.acc_digit),
        ("acc_attr_mean", |r: &AggregateRow| r.acc_attr_mean),
    ]
}

fn metric_title(name: &str) -> &'static str {
    match name {
        "l2m" => "Euclidean gap (L2M) vs caption richness",
        "rmg" => "Relative modality gap vs caption richness",
        "moad_img" => "Object bias (image) vs caption richness",
        "moad_txt" => "Object bias (text) vs caption richness",
        "acc_digit" => "Digit zero-shot accuracy vs caption richness",
        _ => "Mean attribute zero-shot accuracy vs caption richness",
    }
}

fn metric_err(rows: &[&AggregateRow], name: &str) -> Vec<f64> {
    match name {
        "l2m" => rows.iter().map(|r| r.l2m_std).collect(),
        "rmg" => rows.iter().map(|r| r.rmg_std).collect(),
        _ => vec![0.0; rows.len()],
    }
}

fn chart_file(dir: &Path, name: &str, body: String) -> Result<PathBuf> {
    let path = dir.join(name);
    super::write_atomic(&path, body.as_bytes())?;
    Ok(path)
}

/// Stored test-split embeddings of one run.
fn run_embeddings(dir: &Path) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let images = read_embedding_set(&dir.join(EMBEDDINGS_DIR).join("test-images"))?;
    let texts = read_embedding_set(&dir.join(EMBEDDINGS_DIR).join("test-texts"))?;
    Ok((images, texts))
}

/// PCA scatter of one run's test embeddings: both modalities projected
/// onto the top two principal axes of the concatenated, centered matrix.
/// Returns the chart and the silhouette score of the modality labeling.
pub fn pca_figure(
    images: &EmbeddingSet,
    texts: &EmbeddingSet,
    title: &str,
) -> Result<(String, f64)> {
    let n_img = images.n();
    let stacked = ndarray::concatenate(Axis(0), &[images.data.view(), texts.data.view()])
        .map_err(|e| Error::InvalidArgument(format!("cannot stack embeddings: {e}")))?;
    let pca = pca_top2(stacked.view())?;
    let labels: Vec<bool> = (0..stacked.nrows()).map(|i| i < n_img).collect();
    let score = silhouette(pca.projected.view(), &labels)?;

    // Plot a deterministic subsample so the figure stays light; the
    // silhouette above is computed on every point.
    let pick = |rows: std::ops::Range<usize>| -> Vec<(f64, f64)> {
        let len = rows.len();
        let stride = (len / 400).max(1);
        rows.step_by(stride)
            .map(|i| (pca.projected[[i, 0]], pca.projected[[i, 1]]))
            .collect()
    };
    let series = [
        Series::new("images", pick(0..n_img)),
        Series::new("texts", pick(n_img..stacked.nrows())),
    ];
    let note = format!(
        "silhouette {score:.3}; var {:.0}%/{:.0}%",
        pca.explained[0] * 100.0,
        pca.explained[1] * 100.0
    );
    let chart = svg::scatter_chart(
        title,
        "principal component 1",
        "principal component 2",
        &series,
        Some(&note),
    );
    Ok((chart, score))
}

/// Ablation curve of one run's stored embeddings: L2M and RMG after
/// zeroing the top-gap dimensions, k = 0..=max_k.
fn ablation_figure(images: &EmbeddingSet, texts: &EmbeddingSet) -> Result<String> {
    let pairs = make_paired(images.clone(), texts.clone())?;
    let max_k = 16.min(pairs.dim() - 1);
    let cfg = MetricsConfig::default();
    let evaluators = [
        Evaluator::new("l2m", |p, _| Ok(gap::l2m(p))),
        Evaluator::new("rmg", {
            let cfg = cfg.clone();
            move |p, _| gap::rmg(p, &cfg)
        }),
    ];
    let curve = ablation_sweep(&pairs, &evaluators, max_k, &cfg)?;
    let series: Vec<Series> = ["l2m", "rmg"]
        .iter()
        .map(|name| {
            Series::new(
                *name,
                curve
                    .records
                    .iter()
                    .map(|rec| {
                        let v = rec
                            .scores
                            .iter()
                            .find(|(n, _)| n == name)
                            .map(|(_, v)| *v)
                            .unwrap_or(f64::NAN);
                        (rec.k as f64, v)
                    })
                    .collect(),
            )
        })
        .collect();
    Ok(svg::line_chart(
        "Gap metrics under successive dimension ablation",
        "dimensions removed",
        "metric value",
        &series,
    ))
}

/// Files produced by [`emit_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
    /// Silhouette per k of the PCA panels that were rendered.
    pub silhouettes: BTreeMap<u8, f64>,
}

/// Render the full report for a results directory into `report_dir`
/// (created if needed). The results directory itself is never written to.
pub fn emit_report(cfg: &SweepConfig, report_dir: &Path) -> Result<ReportFiles> {
    let records = load_all_records(cfg)?;
    let rows = aggregate(&records)?;
    fs::create_dir_all(report_dir).map_err(|e| Error::io(report_dir, e))?;
    let mut files = Vec::new();

    files.push(chart_file(report_dir, "aggregate.csv", aggregate_csv(&rows))?);

    // Trend line charts per embedding dimension present in the sweep rows.
    let mut dims: Vec<usize> = rows
        .iter()
        .filter(|r| r.k.is_some())
        .map(|r| r.embed_dim)
        .collect();
    dims.sort_unstable();
    dims.dedup();
    for dim in &dims {
        let mut picked: Vec<&AggregateRow> = rows
            .iter()
            .filter(|r| r.embed_dim == *dim && r.k.is_some())
            .collect();
        picked.sort_by_key(|r| r.k.unwrap());
        if picked.len() < 2 {
            continue;
        }
        for (name, get) in metric_columns() {
            let mut series = Series::new(
                "mean over seeds",
                picked
                    .iter()
                    .map(|r| (r.k.unwrap() as f64, get(r)))
                    .collect(),
            );
            series.errors = metric_err(&picked, name);
            let chart = svg::line_chart(
                metric_title(name),
                "caption attribute count k",
                name,
                &[series],
            );
            files.push(chart_file(
                report_dir,
                &format!("trend-{}-d{dim}.svg", name.replace('_', "-")),
                chart,
            )?);
        }
    }

    // Ablation curve from the lowest-k row at the first dimension.
    let ii_rows: Vec<&AggregateRow> = rows.iter().filter(|r| r.k.is_some()).collect();
    if let Some(base) = ii_rows
        .iter()
        .filter(|r| !r.run_dirs.is_empty())
        .min_by_key(|r| (r.k.unwrap(), r.embed_dim))
    {
        let (images, texts) = run_embeddings(&base.run_dirs[0])?;
        files.push(chart_file(
            report_dir,
            "ablation.svg",
            ablation_figure(&images, &texts)?,
        )?);
    }

    // PCA panels for the extreme k values at the first dimension.
    let mut silhouettes = BTreeMap::new();
    if let Some(&dim) = dims.first() {
        let mut extremes: Vec<u8> = ii_rows
            .iter()
            .filter(|r| r.embed_dim == dim)
            .map(|r| r.k.unwrap())
            .collect();
        extremes.sort_unstable();
        extremes.dedup();
        let picks: Vec<u8> = match (extremes.first(), extremes.last()) {
            (Some(&lo), Some(&hi)) if lo != hi => vec![lo, hi],
            (Some(&lo), _) => vec![lo],
            _ => vec![],
        };
        for k in picks {
            let row = ii_rows
                .iter()
                .find(|r| r.embed_dim == dim && r.k == Some(k))
                .expect("k came from these rows");
            if row.run_dirs.is_empty() {
                continue;
            }
            let (images, texts) = run_embeddings(&row.run_dirs[0])?;
            let title = format!("Test embeddings, top-2 PCA (k={k})");
            let (chart, score) = pca_figure(&images, &texts, &title)?;
            files.push(chart_file(report_dir, &format!("pca-k{k}.svg"), chart)?);
            silhouettes.insert(k, score);
        }
    }

    // Presence-bias bars: accuracy on the manipulated factors, and the
    // factor-bias score per modality.
    let pb_rows: Vec<&AggregateRow> = rows.iter().filter(|r| r.always_factor.is_some()).collect();
    if !pb_rows.is_empty() {
        let groups: Vec<String> = pb_rows
            .iter()
            .map(|r| format!("always={}", r.always_factor.as_deref().unwrap_or("?")))
            .collect();

        // Every manipulated factor becomes one bar in every group.
        let mut factors: Vec<String> = pb_rows
            .iter()
            .filter_map(|r| r.always_factor.clone())
            .collect();
        factors.sort();
        factors.dedup();
        let acc_of = |row: &AggregateRow, factor: &str| -> f64 {
            let mut vals = Vec::new();
            for dir in &row.run_dirs {
                if let Ok(record) = super::load_record(dir) {
                    let acc = if factor == "digit" {
                        record.eval.digit_accuracy
                    } else {
                        record
                            .eval
                            .attribute_accuracies
                            .get(factor)
                            .copied()
                            .unwrap_or(f64::NAN)
                    };
                    vals.push(acc);
                }
            }
            mean_std(&vals).0
        };
        let bar_labels: Vec<String> = factors.iter().map(|f| format!("{f} accuracy")).collect();
        let values: Vec<Vec<f64>> = pb_rows
            .iter()
            .map(|row| factors.iter().map(|f| acc_of(row, f)).collect())
            .collect();
        files.push(chart_file(
            report_dir,
            "presence-accuracy.svg",
            svg::bar_chart(
                "Zero-shot accuracy under caption-presence bias",
                "accuracy",
                &groups,
                &bar_labels,
                &values,
            ),
        )?);

        let moad_values: Vec<Vec<f64>> = pb_rows
            .iter()
            .map(|row| vec![row.moad_img, row.moad_txt])
            .collect();
        files.push(chart_file(
            report_dir,
            "presence-moad.svg",
            svg::bar_chart(
                "Bias toward the always-present factor",
                "factor bias score",
                &groups,
                &["image encoder".to_string(), "text encoder".to_string()],
                &moad_values,
            ),
        )?);
    }

    Ok(ReportFiles { files, silhouettes })
}

/// Render the toy-optimum unit-circle figure used by the 2-D experiment.
pub fn toy_figure(title: &str, angles: [f64; 4], loss: f64, matched_gap: f64) -> String {
    let points = [
        CirclePoint {
            label: "x1".into(),
            angle_degrees: angles[0],
            color: 0,
        },
        CirclePoint {
            label: "x2".into(),
            angle_degrees: angles[1],
            color: 0,
        },
        CirclePoint {
            label: "y1".into(),
            angle_degrees: angles[2],
            color: 1,
        },
        CirclePoint {
            label: "y2".into(),
            angle_degrees: angles[3],
            color: 1,
        },
    ];
    let full_title = format!("{title} (loss {loss:.4}, matched gap {matched_gap:.4})");
    svg::unit_circle_chart(&full_title, &points, &[(0, 2), (1, 3)])
}
