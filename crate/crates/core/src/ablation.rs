//! Successive dimension ablation: rank dimensions by how much of the
//! modality gap they carry, zero them out, renormalize, and watch the gap
//! metrics and downstream scores move.

use serde::{Deserialize, Serialize};

use crate::gap::{dim_gap_stats, l2m, rmg};
use crate::store::{make_paired, EmbeddingSet, MetricsConfig, PairedEmbeddingSet};
use crate::{Error, Result};

/// One step of the ablation curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRecord {
    /// Number of dimensions zeroed at this step.
    pub k: usize,
    /// The zeroed dimensions (prefix of the frozen ranking).
    pub ablated_dims: Vec<usize>,
    pub l2m: f64,
    pub rmg: f64,
    /// Evaluator outputs in evaluator order, `(name, score)`.
    pub scores: Vec<(String, f64)>,
}

/// Ablation records for k = 0..=max_k, in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCurve {
    pub records: Vec<AblationRecord>,
}

impl AblationCurve {
    /// Render as CSV: `k,l2m,rmg,<evaluator names...>`, one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,l2m,rmg");
        if let Some(first) = self.records.first() {
            for (name, _) in &first.scores {
                out.push(',');
                out.push_str(name);
            }
        }
        out.push('\n');
        for rec in &self.records {
            out.push_str(&format!("{},{},{}", rec.k, rec.l2m, rec.rmg));
            for (_, score) in &rec.scores {
                out.push_str(&format!(",{score}"));
            }
            out.push('\n');
        }
        out
    }
}

/// A named downstream score recomputed at every ablation step. The
/// callback receives the ablated pair set and the dimensions that were
/// zeroed, so evaluators holding their own embeddings (e.g. class
/// prompts) can ablate those consistently.
pub struct Evaluator<'a> {
    pub name: String,
    #[allow(clippy::type_complexity)]
    pub eval: Box<dyn Fn(&PairedEmbeddingSet, &[usize]) -> Result<f64> + 'a>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        name: impl Into<String>,
        eval: impl Fn(&PairedEmbeddingSet, &[usize]) -> Result<f64> + 'a,
    ) -> Self {
        Evaluator {
            name: name.into(),
            eval: Box::new(eval),
        }
    }
}

/// The dimension ordering used for ablation: descending absolute
/// difference of per-dimension modality means.
pub fn rank_gap_dims(pairs: &PairedEmbeddingSet) -> Vec<usize> {
    dim_gap_stats(pairs).ranking
}

/// Zero the listed dimensions in every row and renormalize the rows.
/// Dimensionality is preserved (zeros stay in place) so dimension indices
/// keep meaning downstream. With no dimensions to ablate, an
/// already-normalized set passes through unchanged.
pub fn ablate_and_renormalize(set: &EmbeddingSet, dims: &[usize]) -> Result<EmbeddingSet> {
    let d = set.dim();
    for &dim in dims {
        if dim >= d {
            return Err(Error::InvalidArgument(format!(
                "ablation dimension {dim} out of range for D={d}"
            )));
        }
    }
    let mut unique: Vec<usize> = dims.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() == d {
        return Err(Error::InvalidArgument(
            "cannot ablate every dimension; no direction would remain".into(),
        ));
    }
    if unique.is_empty() && set.normalized {
        return Ok(set.clone());
    }

    let mut data = set.data.clone();
    for (i, mut row) in data.rows_mut().into_iter().enumerate() {
        for &dim in &unique {
            row[dim] = 0.0;
        }
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric(format!(
                "row {i} becomes all-zero after ablating {} dimension(s)",
                unique.len()
            )));
        }
        row.mapv_inplace(|v| v / norm);
    }
    EmbeddingSet::new(
        data,
        set.modality,
        true,
        set.labels.clone(),
        set.source.clone(),
    )
}

/// Walk k = 0..=max_k: ablate the top-k ranked dimensions on both sides,
/// recompute l2m/rmg and every evaluator, and collect the curve. The
/// ranking is computed once, on the untouched set.
pub fn ablation_sweep(
    pairs: &PairedEmbeddingSet,
    evaluators: &[Evaluator<'_>],
    max_k: usize,
    cfg: &MetricsConfig,
) -> Result<AblationCurve> {
    let d = pairs.dim();
    if max_k >= d {
        return Err(Error::InvalidArgument(format!(
            "max_k = {max_k} must be below the dimensionality D = {d}"
        )));
    }
    let ranking = rank_gap_dims(pairs);
    let mut records = Vec::with_capacity(max_k + 1);
    for k in 0..=max_k {
        let dims = &ranking[..k];
        let step_pairs = if k == 0 {
            pairs.clone()
        } else {
            make_paired(
                ablate_and_renormalize(&pairs.images, dims)?,
                ablate_and_renormalize(&pairs.texts, dims)?,
            )?
        };
        let mut scores = Vec::with_capacity(evaluators.len());
        for ev in evaluators {
            let score = (ev.eval)(&step_pairs, dims).map_err(|e| {
                Error::Numeric(format!("evaluator {:?} failed at k={k}: {e}", ev.name))
            })?;
            scores.push((ev.name.clone(), score));
        }
        records.push(AblationRecord {
            k,
            ablated_dims: dims.to_vec(),
            l2m: l2m(&step_pairs),
            rmg: rmg(&step_pairs, cfg)?,
            scores,
        });
    }
    Ok(AblationCurve { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gap::cosine;
    use crate::store::Modality;
    use crate::testkit;
    use ndarray::{array, Array2};

    #[test]
    fn ranking_matches_the_hand_cases() {
        let img = EmbeddingSet::new(
            array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            Modality::Image,
            false,
            None,
            "",
        )
        .unwrap();
        let txt = EmbeddingSet::new(
            array![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]],
            Modality::Text,
            false,
            None,
            "",
        )
        .unwrap();
        let pairs = make_paired(img, txt).unwrap();
        assert_eq!(rank_gap_dims(&pairs), vec![0, 2, 1]);

        let mut r = testkit::rng(90);
        let data = testkit::random_matrix(4, 3, &mut r);
        let same = make_paired(
            EmbeddingSet::new(data.clone(), Modality::Image, false, None, "").unwrap(),
            EmbeddingSet::new(data, Modality::Text, false, None, "").unwrap(),
        )
        .unwrap();
        assert_eq!(rank_gap_dims(&same), vec![0, 1, 2]);
    }

    #[test]
    fn ablation_reproduces_the_worked_example() {
        let image = EmbeddingSet::new(
            array![[8.0, 0.6, 0.7, 0.3]],
            Modality::Image,
            false,
            None,
            "",
        )
        .unwrap();
        let texts = EmbeddingSet::new(
            array![[5.0, 0.13, 0.035, 0.02], [5.0, 1.5, 0.7, 0.45]],
            Modality::Text,
            false,
            None,
            "",
        )
        .unwrap();

        let img1 = ablate_and_renormalize(&image, &[0]).unwrap();
        let txt1 = ablate_and_renormalize(&texts, &[0]).unwrap();
        let matched = cosine(img1.row(0), txt1.row(0)).unwrap();
        let mismatched = cosine(img1.row(0), txt1.row(1)).unwrap();
        assert!((matched - 0.822).abs() < 0.001, "matched {matched}");
        assert!((mismatched - 0.917).abs() < 0.001, "mismatched {mismatched}");
        // one ablated dimension flips the ranking toward the wrong caption
        assert!(mismatched > matched);

        // ablating the next dimension puts the matched pair back on top
        let img2 = ablate_and_renormalize(&image, &[0, 1]).unwrap();
        let txt2 = ablate_and_renormalize(&texts, &[0, 1]).unwrap();
        let matched = cosine(img2.row(0), txt2.row(0)).unwrap();
        let mismatched = cosine(img2.row(0), txt2.row(1)).unwrap();
        assert!(matched > mismatched);
    }

    #[test]
    fn ablating_nothing_is_identity_on_normalized_sets() {
        let mut r = testkit::rng(91);
        let set = testkit::random_unit_set(5, 4, Modality::Image, &mut r);
        let out = ablate_and_renormalize(&set, &[]).unwrap();
        assert_eq!(set.data, out.data);
    }

    #[test]
    fn ablation_rejects_degenerate_requests() {
        let mut r = testkit::rng(92);
        let set = testkit::random_unit_set(3, 4, Modality::Image, &mut r);
        assert!(ablate_and_renormalize(&set, &[4]).is_err());
        assert!(ablate_and_renormalize(&set, &[0, 1, 2, 3]).is_err());

        // a row supported only on the ablated dimension becomes all-zero
        let set = EmbeddingSet::new(
            array![[1.0, 0.0], [0.0, 1.0]],
            Modality::Image,
            true,
            None,
            "",
        )
        .unwrap();
        assert!(matches!(
            ablate_and_renormalize(&set, &[0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn ablated_rows_are_unit_and_match_the_truncation_oracle() {
        let mut r = testkit::rng(93);
        let set = testkit::random_unit_set(20, 6, Modality::Image, &mut r);
        let other = testkit::random_unit_set(20, 6, Modality::Text, &mut r);
        let dims = [1, 4];
        let a = ablate_and_renormalize(&set, &dims).unwrap();
        let b = ablate_and_renormalize(&other, &dims).unwrap();
        for row in a.data.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
        }
        // cosine after ablation equals cosine of the raw surviving coords
        for i in 0..20 {
            let got = cosine(a.row(i), b.row(i)).unwrap();
            let keep: Vec<usize> = (0..6).filter(|d| !dims.contains(d)).collect();
            let va: Vec<f64> = keep.iter().map(|&d| set.data[[i, d]]).collect();
            let vb: Vec<f64> = keep.iter().map(|&d| other.data[[i, d]]).collect();
            let expect = cosine(
                ndarray::aview1(&va),
                ndarray::aview1(&vb),
            )
            .unwrap();
            assert!((got - expect).abs() < 1e-9, "row {i}: {got} vs {expect}");
        }
    }

    #[test]
    fn sweep_walks_the_frozen_ranking() {
        let mut r = testkit::rng(94);
        let pairs = testkit::random_paired(30, 5, &mut r);
        let cfg = MetricsConfig::default();
        let evaluators = [
            Evaluator::new("const", |_: &PairedEmbeddingSet, _: &[usize]| Ok(1.0)),
            Evaluator::new("neg_l2m", |p: &PairedEmbeddingSet, _: &[usize]| {
                Ok(-l2m(p))
            }),
        ];
        let curve = ablation_sweep(&pairs, &evaluators, 3, &cfg).unwrap();
        assert_eq!(curve.records.len(), 4);

        // k=0 must equal metrics on the untouched set
        assert_eq!(curve.records[0].l2m, l2m(&pairs));
        assert_eq!(curve.records[0].rmg, rmg(&pairs, &cfg).unwrap());

        let ranking = rank_gap_dims(&pairs);
        for (k, rec) in curve.records.iter().enumerate() {
            assert_eq!(rec.k, k);
            assert_eq!(rec.ablated_dims, ranking[..k].to_vec());
            assert_eq!(rec.scores[0], ("const".to_string(), 1.0));
        }

        // pure function of the inputs: rerunning reproduces every record
        let again = ablation_sweep(&pairs, &evaluators, 3, &cfg).unwrap();
        for (a, b) in curve.records.iter().zip(&again.records) {
            assert_eq!(a.l2m, b.l2m);
            assert_eq!(a.rmg, b.rmg);
            assert_eq!(a.scores, b.scores);
        }

        assert!(ablation_sweep(&pairs, &evaluators, 5, &cfg).is_err());
    }

    #[test]
    fn sweep_annotates_evaluator_failures_with_k() {
        let mut r = testkit::rng(95);
        let pairs = testkit::random_paired(8, 4, &mut r);
        let bomb = [Evaluator::new(
            "bomb",
            |_: &PairedEmbeddingSet, dims: &[usize]| {
                if dims.len() >= 2 {
                    Err(Error::Numeric("boom".into()))
                } else {
                    Ok(0.0)
                }
            },
        )];
        let err = ablation_sweep(&pairs, &bomb, 3, &MetricsConfig::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("k=2") && msg.contains("bomb"), "{msg}");
    }

    #[test]
    fn curve_csv_lists_k_metrics_and_evaluators() {
        let curve = AblationCurve {
            records: vec![
                AblationRecord {
                    k: 0,
                    ablated_dims: vec![],
                    l2m: 0.5,
                    rmg: 0.25,
                    scores: vec![("acc".into(), 0.9)],
                },
                AblationRecord {
                    k: 1,
                    ablated_dims: vec![3],
                    l2m: 0.4,
                    rmg: 0.2,
                    scores: vec![("acc".into(), 0.8)],
                },
            ],
        };
        let csv = curve.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("k,l2m,rmg,acc"));
        assert_eq!(lines.next(), Some("0,0.5,0.25,0.9"));
        assert_eq!(lines.next(), Some("1,0.4,0.2,0.8"));
    }

    #[test]
    fn sweep_keeps_unit_rows_at_every_step() {
        let mut r = testkit::rng(96);
        let base = testkit::random_paired(10, 4, &mut r);
        let mut shifted = Array2::zeros((10, 4));
        for (i, row) in base.images.data.rows().into_iter().enumerate() {
            for j in 0..4 {
                shifted[[i, j]] = row[j] + if j == 0 { 0.8 } else { 0.0 };
            }
        }
        let pairs = make_paired(
            EmbeddingSet::new(shifted, Modality::Image, false, None, "").unwrap(),
            base.texts.clone(),
        )
        .unwrap();
        let curve = ablation_sweep(&pairs, &[], 2, &MetricsConfig::default()).unwrap();
        // the dominant gap dimension is ablated first, shrinking l2m
        assert!(curve.records[1].l2m < curve.records[0].l2m);
    }
}
