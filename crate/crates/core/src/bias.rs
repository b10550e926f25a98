//! Object/attribute bias metrics: MOAD and its generalization to arbitrary
//! factor groupings, the normalized Kendall-Tau neighborhood distance
//! between modalities, and the ideal-vector analysis with gap-vector
//! correction.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gap::cosine;
use crate::store::{EmbeddingSet, GroupIndex, MetricsConfig, Modality};
use crate::{Error, Result};

/// Mean-of-object-attribute-distinction result.
///
/// `value > 0` means the embeddings distinguish object groups more sharply
/// than attribute groups (an object bias); `< 0` the reverse.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoadResult {
    /// `(object_term - attribute_term) / 2`, in [-2, 2].
    pub value: f64,
    /// Mean over object groups of (within-group mean cosine similarity
    /// minus group-vs-rest mean cosine similarity).
    pub object_term: f64,
    /// Same quantity over attribute groups.
    pub attribute_term: f64,
    /// Pair counts actually used as normalization factors, in order:
    /// object-within, object-cross, attribute-within, attribute-cross.
    /// When a sum is subsampled the sampled count is reported.
    pub pair_counts: [u64; 4],
}

/// Per-group mean embeddings, one row per group label.
#[derive(Debug, Clone)]
pub struct ClassMeans {
    pub labels: Vec<String>,
    pub means: Array2<f64>,
}

/// One direction vector per group: the marginalized group mean minus the
/// grand mean over groups ("ideal words" for texts, "ideal images" for
/// images).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdealVectors {
    pub labels: Vec<String>,
    /// One row per group, same order as `labels`.
    pub vectors: Array2<f64>,
    /// The grand mean that was subtracted from every group vector.
    pub grand_mean: Vec<f64>,
    pub modality: Modality,
}

fn check_groups(set: &EmbeddingSet, groups: &GroupIndex, role: &str) -> Result<()> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "needs >= 2 {role} groups, got {}",
            groups.len()
        )));
    }
    let n = set.n();
    for (label, idx) in groups.iter() {
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{role} group {label:?} has {} sample(s); the within term needs >= 2",
                idx.len()
            )));
        }
        if *idx.last().unwrap() >= n {
            return Err(Error::InvalidArgument(format!(
                "{role} group {label:?} references row {} but the set has {n} rows",
                idx.last().unwrap()
            )));
        }
        if idx.len() == n {
            return Err(Error::InvalidArgument(format!(
                "{role} group {label:?} covers every row; the cross term is empty"
            )));
        }
    }
    Ok(())
}

/// Within-minus-cross similarity term for one grouping, plus the within
/// and cross pair counts that normalized it.
///
/// Exact sums use closed forms over group row-sums (sum of pairwise dots
/// of unit rows = |sum|^2 - sum of squared norms), so no O(n^2) loops run.
/// A sum whose pair count exceeds `cap` is instead estimated from `cap`
/// seeded uniform pair draws.
fn grouping_term(
    set: &EmbeddingSet,
    groups: &GroupIndex,
    cap: usize,
    seed: u64,
    grouping_id: u64,
) -> (f64, u64, u64) {
    let n = set.n();
    let data = &set.data;
    let total_sum = data.sum_axis(ndarray::Axis(0));
    let mut term = 0.0;
    let mut within_count = 0u64;
    let mut cross_count = 0u64;
    for (ord, (_, idx)) in groups.iter().enumerate() {
        let m = idx.len();
        let mut group_sum = Array1::<f64>::zeros(set.dim());
        let mut group_sq = 0.0;
        for &i in idx {
            let row = data.row(i);
            group_sum += &row;
            group_sq += row.dot(&row);
        }

        let within_pairs = m * (m - 1) / 2;
        let mean_within = if within_pairs <= cap {
            within_count += within_pairs as u64;
            (group_sum.dot(&group_sum) - group_sq) / (m * (m - 1)) as f64
        } else {
            within_count += cap as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(grouping_id << 32 | (ord as u64) << 1);
            let mut acc = 0.0;
            for _ in 0..cap {
                let i = idx[rng.random_range(0..m)];
                let mut j = rng.random_range(0..m - 1);
                if idx[j] >= i {
                    j += 1;
                }
                acc += data.row(i).dot(&data.row(idx[j]));
            }
            acc / cap as f64
        };

        let cross_pairs = m * (n - m);
        let mean_cross = if cross_pairs <= cap {
            cross_count += cross_pairs as u64;
            let rest = &total_sum - &group_sum;
            group_sum.dot(&rest) / cross_pairs as f64
        } else {
            cross_count += cap as u64;
            let mut member = vec![false; n];
            for &i in idx {
                member[i] = true;
            }
            let outside: Vec<usize> = (0..n).filter(|&i| !member[i]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(grouping_id << 32 | (ord as u64) << 1 | 1);
            let mut acc = 0.0;
            for _ in 0..cap {
                let i = idx[rng.random_range(0..m)];
                let j = outside[rng.random_range(0..outside.len())];
                acc += data.row(i).dot(&data.row(j));
            }
            acc / cap as f64
        };

        term += mean_within - mean_cross;
    }
    (term / groups.len() as f64, within_count, cross_count)
}

/// How much more sharply the embeddings separate `groupA` than `groupB`:
/// `(termA - termB)/2` where each term is the mean over groups of
/// (within-group similarity minus group-vs-rest similarity). Exactly
/// antisymmetric in its two groupings.
pub fn factor_moad(
    set: &EmbeddingSet,
    group_a: &GroupIndex,
    group_b: &GroupIndex,
    cfg: &MetricsConfig,
) -> Result<MoadResult> {
    cfg.validate()?;
    if !set.normalized {
        return Err(Error::InvalidArgument(
            "bias metrics need unit-norm embeddings; normalize the set first".into(),
        ));
    }
    check_groups(set, group_a, "object")?;
    check_groups(set, group_b, "attribute")?;
    let cap = cfg.effective_pair_cap();
    let (object_term, n1, n2) = grouping_term(set, group_a, cap, cfg.rng_seed, 0);
    let (attribute_term, n3, n4) = grouping_term(set, group_b, cap, cfg.rng_seed, 1);
    Ok(MoadResult {
        value: (object_term - attribute_term) / 2.0,
        object_term,
        attribute_term,
        pair_counts: [n1, n2, n3, n4],
    })
}

/// MOAD proper: [`factor_moad`] with objects as the first grouping and
/// attributes as the second. Positive values mean an object bias.
pub fn moad(
    set: &EmbeddingSet,
    objects: &GroupIndex,
    attributes: &GroupIndex,
    cfg: &MetricsConfig,
) -> Result<MoadResult> {
    factor_moad(set, objects, attributes, cfg)
}

/// Mean embedding per group, in group order. Means are not normalized.
pub fn class_means(set: &EmbeddingSet, groups: &GroupIndex) -> Result<ClassMeans> {
    let n = set.n();
    let mut labels = Vec::with_capacity(groups.len());
    let mut means = Array2::zeros((groups.len(), set.dim()));
    for (g, (label, idx)) in groups.iter().enumerate() {
        if *idx.last().unwrap() >= n {
            return Err(Error::InvalidArgument(format!(
                "group {label:?} references row {} but the set has {n} rows",
                idx.last().unwrap()
            )));
        }
        let mut acc = Array1::<f64>::zeros(set.dim());
        for &i in idx {
            acc += &set.data.row(i);
        }
        means.row_mut(g).assign(&(acc / idx.len() as f64));
        labels.push(label.to_string());
    }
    Ok(ClassMeans { labels, means })
}

/// Rank the other classes by ascending cosine dissimilarity to `anchor`,
/// ties broken by ascending class index.
fn neighbor_order(means: &Array2<f64>, anchor: usize) -> Vec<usize> {
    let m = means.nrows();
    let anchor_row = means.row(anchor);
    let mut others: Vec<usize> = (0..m).filter(|&c| c != anchor).collect();
    let dissim: Vec<f64> = (0..m)
        .map(|c| 1.0 - means.row(c).dot(&anchor_row))
        .collect();
    others.sort_by(|&a, &b| {
        dissim[a]
            .partial_cmp(&dissim[b])
            .expect("dissimilarities are finite")
            .then(a.cmp(&b))
    });
    others
}

/// Normalized Kendall-Tau distance between the class-neighborhood
/// orderings of the two modalities: for each class, the fraction of
/// discordant neighbor pairs between its image-side and text-side
/// rankings, averaged over classes. 0 = identical neighborhoods,
/// 1 = exactly reversed.
pub fn kendall_tau_neighborhood(img_means: &ClassMeans, txt_means: &ClassMeans) -> Result<f64> {
    let m = img_means.labels.len();
    if m < 3 {
        return Err(Error::InvalidArgument(format!(
            "kendall-tau neighborhoods need >= 3 classes, got {m}"
        )));
    }
    if txt_means.labels.len() != m {
        return Err(Error::InvalidArgument(format!(
            "class sets differ: {} image classes vs {} text classes",
            m,
            txt_means.labels.len()
        )));
    }
    // align the text side to the image side's label order
    let mut txt_aligned = Array2::zeros((m, txt_means.means.ncols()));
    for (c, label) in img_means.labels.iter().enumerate() {
        let t = txt_means
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("class {label:?} missing from text means"))
            })?;
        txt_aligned.row_mut(c).assign(&txt_means.means.row(t));
    }
    if img_means.means.ncols() != txt_aligned.ncols() {
        return Err(Error::Shape(format!(
            "mean dimensions differ: {} vs {}",
            img_means.means.ncols(),
            txt_aligned.ncols()
        )));
    }

    let normalize = |means: &Array2<f64>| -> Result<Array2<f64>> {
        let mut out = means.clone();
        for (c, mut row) in out.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::Numeric(format!("class mean {c} has zero norm")));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(out)
    };
    let img = normalize(&img_means.means)?;
    let txt = normalize(&txt_aligned)?;

    let pairs_per_class = (m - 1) * (m - 2) / 2;
    let mut total = 0.0;
    for c in 0..m {
        let order_img = neighbor_order(&img, c);
        let order_txt = neighbor_order(&txt, c);
        let mut pos_txt = vec![0usize; m];
        for (p, &cls) in order_txt.iter().enumerate() {
            pos_txt[cls] = p;
        }
        let mut discordant = 0usize;
        for a in 0..order_img.len() {
            for b in a + 1..order_img.len() {
                if pos_txt[order_img[a]] > pos_txt[order_img[b]] {
                    discordant += 1;
                }
            }
        }
        total += discordant as f64 / pairs_per_class as f64;
    }
    Ok(total / m as f64)
}

fn sorted_intersection(a: &[usize], b: &[usize], out: &mut Vec<usize>) {
    out.clear();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
}

/// Ideal direction vector per group: for each group, average the mean
/// embedding of every non-empty (group x marginal) cell, then subtract
/// the grand mean over groups. Marginalizing evens out the other factor's
/// influence before the directions are compared across modalities.
pub fn ideal_vectors(
    set: &EmbeddingSet,
    groups: &GroupIndex,
    marginalize_over: &GroupIndex,
) -> Result<IdealVectors> {
    let n = set.n();
    let d = set.dim();
    let mut raw = Array2::<f64>::zeros((groups.len(), d));
    let mut cell = Vec::new();
    for (g, (label, idx)) in groups.iter().enumerate() {
        if *idx.last().unwrap() >= n {
            return Err(Error::InvalidArgument(format!(
                "group {label:?} references row {} but the set has {n} rows",
                idx.last().unwrap()
            )));
        }
        let mut acc = Array1::<f64>::zeros(d);
        let mut cells = 0usize;
        for (_, marginal_idx) in marginalize_over.iter() {
            sorted_intersection(idx, marginal_idx, &mut cell);
            if cell.is_empty() {
                continue;
            }
            let mut cell_mean = Array1::<f64>::zeros(d);
            for &i in &cell {
                cell_mean += &set.data.row(i);
            }
            acc += &(cell_mean / cell.len() as f64);
            cells += 1;
        }
        if cells == 0 {
            return Err(Error::InvalidArgument(format!(
                "group {label:?} shares no rows with any marginal group"
            )));
        }
        raw.row_mut(g).assign(&(acc / cells as f64));
    }
    let grand = raw.sum_axis(ndarray::Axis(0)) / groups.len() as f64;
    for mut row in raw.rows_mut() {
        row -= &grand;
    }
    Ok(IdealVectors {
        labels: groups.labels().iter().map(|s| s.to_string()).collect(),
        vectors: raw,
        grand_mean: grand.to_vec(),
        modality: set.modality,
    })
}

/// Mean cosine between matching word and image ideal vectors, before and
/// after moving the image ideals across the modality gap (subtracting the
/// gap vector). Without a gap vector the corrected value equals the
/// uncorrected one.
pub fn ideal_alignment(
    words: &IdealVectors,
    images: &IdealVectors,
    gap: Option<&[f64]>,
) -> Result<(f64, f64)> {
    let m = words.labels.len();
    if images.labels.len() != m {
        return Err(Error::InvalidArgument(format!(
            "group label sets differ: {} word groups vs {} image groups",
            m,
            images.labels.len()
        )));
    }
    let d = words.vectors.ncols();
    if images.vectors.ncols() != d {
        return Err(Error::Shape(format!(
            "ideal vector dimensions differ: {d} vs {}",
            images.vectors.ncols()
        )));
    }
    if let Some(g) = gap {
        if g.len() != d {
            return Err(Error::Shape(format!(
                "gap vector has length {} but ideals have dimension {d}",
                g.len()
            )));
        }
    }

    let mut uncorrected = 0.0;
    let mut corrected = 0.0;
    for (w, label) in words.labels.iter().enumerate() {
        let i = images
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("group {label:?} missing from image ideals"))
            })?;
        let word = words.vectors.row(w);
        let image = images.vectors.row(i);
        uncorrected += cosine(word, image).ok_or_else(|| {
            Error::Numeric(format!("ideal vector for group {label:?} has zero norm"))
        })?;
        match gap {
            Some(g) => {
                let shifted =
                    &image.to_owned() - &ndarray::aview1(g);
                corrected += cosine(word, shifted.view()).ok_or_else(|| {
                    Error::Numeric(format!(
                        "gap-corrected image ideal for group {label:?} has zero norm"
                    ))
                })?;
            }
            None => corrected += cosine(word, image).unwrap(),
        }
    }
    Ok((uncorrected / m as f64, corrected / m as f64))
}
