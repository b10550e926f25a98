//! Modality-gap metrics: distance between modality means (L2M), the
//! relative modality gap (RMG), per-dimension gap statistics, a
//! two-dimension separability probe, the alignment/uniformity diagnostic,
//! and the gap vector itself.

use ndarray::{Array1, Array2, ArrayView1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::store::{MetricsConfig, PairedEmbeddingSet};
use crate::{Error, Result};

/// Cosine similarity of two vectors, `None` when either has zero norm.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Option<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.dot(&b) / (na * nb))
}

/// Cosine dissimilarity scaled to [0,1] for unit vectors: `(1 - a.b)/2`.
fn pair_distance(dot: f64) -> f64 {
    (1.0 - dot.clamp(-1.0, 1.0)) / 2.0
}

/// Per-dimension gap statistics behind the "which dimensions encode the
/// modality" analysis. Variances are population variances (divide by n).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimGapStats {
    pub img_mean: Vec<f64>,
    pub txt_mean: Vec<f64>,
    pub img_var: Vec<f64>,
    pub txt_var: Vec<f64>,
    /// `|img_mean[k] - txt_mean[k]|` per dimension.
    pub abs_mean_diff: Vec<f64>,
    /// Dimension indices sorted by `abs_mean_diff` descending; ties break
    /// toward the lower index.
    pub ranking: Vec<usize>,
}

/// Flat summary of every scalar gap quantity plus the gap vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapReport {
    pub l2m: f64,
    pub rmg: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub gap_vector: Vec<f64>,
}

fn column_mean(data: &Array2<f64>) -> Array1<f64> {
    let n = data.nrows() as f64;
    data.sum_axis(ndarray::Axis(0)) / n
}

/// L2 distance between the modality means over all matched rows.
pub fn l2m(pairs: &PairedEmbeddingSet) -> f64 {
    let diff = column_mean(&pairs.images.data) - column_mean(&pairs.texts.data);
    diff.dot(&diff).sqrt()
}

/// `mean(images) - mean(texts)`, the direction the gap points in.
pub fn gap_vector(pairs: &PairedEmbeddingSet) -> Array1<f64> {
    column_mean(&pairs.images.data) - column_mean(&pairs.texts.data)
}

/// Mean pair distance over ordered within-modality pairs (i != j).
///
/// When the ordered pair count fits under the cap this is evaluated in
/// closed form: for unit rows, sum over ordered pairs of dot products is
/// `|sum(rows)|^2 - n`, so no O(n^2) loop is needed. Beyond the cap, the
/// mean is estimated from `cap` seeded uniform draws of ordered pairs.
fn mean_intra_distance(data: &Array2<f64>, cap: usize, seed: u64, stream: u64) -> f64 {
    let n = data.nrows();
    let ordered_pairs = n * (n - 1);
    if ordered_pairs <= cap {
        let s = data.sum_axis(ndarray::Axis(0));
        let mean_dot = (s.dot(&s) - n as f64) / ordered_pairs as f64;
        pair_distance(mean_dot)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut acc = 0.0;
        for _ in 0..cap {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            acc += pair_distance(data.row(i).dot(&data.row(j)));
        }
        acc / cap as f64
    }
}

/// Relative modality gap: mean matched-pair distance over the sum of that
/// and the mean intra-modality distance. 0 means no gap, 1 means the gap
/// dwarfs within-modality spread. Needs n >= 2.
pub fn rmg(pairs: &PairedEmbeddingSet, cfg: &MetricsConfig) -> Result<f64> {
    cfg.validate()?;
    let n = pairs.n();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "rmg needs at least 2 pairs for the intra-modality terms".into(),
        ));
    }
    let numerator = (0..n)
        .map(|i| pair_distance(pairs.images.row(i).dot(&pairs.texts.row(i))))
        .sum::<f64>()
        / n as f64;

    let cap = cfg.effective_pair_cap();
    let intra = 0.5
        * (mean_intra_distance(&pairs.images.data, cap, cfg.rng_seed, 1)
            + mean_intra_distance(&pairs.texts.data, cap, cfg.rng_seed, 2));
    // closed-form dot sums can undershoot zero by rounding on collapsed sets
    let intra = intra.max(0.0);

    if numerator == 0.0 {
        return Ok(0.0);
    }
    Ok((numerator / (intra + numerator)).clamp(0.0, 1.0))
}

/// Per-dimension means, variances, |mean difference|, and the descending
/// ranking used by the ablation pipeline.
pub fn dim_gap_stats(pairs: &PairedEmbeddingSet) -> DimGapStats {
    let d = pairs.dim();
    let stats = |data: &Array2<f64>| {
        let mean = column_mean(data);
        let n = data.nrows() as f64;
        let mut var = Array1::zeros(d);
        for row in data.rows() {
            for k in 0..d {
                let dev = row[k] - mean[k];
                var[k] += dev * dev;
            }
        }
        (mean, var / n)
    };
    let (img_mean, img_var) = stats(&pairs.images.data);
    let (txt_mean, txt_var) = stats(&pairs.texts.data);
    let abs_mean_diff: Vec<f64> = (0..d).map(|k| (img_mean[k] - txt_mean[k]).abs()).collect();
    let mut ranking: Vec<usize> = (0..d).collect();
    ranking.sort_by(|&a, &b| {
        abs_mean_diff[b]
            .partial_cmp(&abs_mean_diff[a])
            .expect("means of finite data are finite")
            .then(a.cmp(&b))
    });
    DimGapStats {
        img_mean: img_mean.to_vec(),
        txt_mean: txt_mean.to_vec(),
        img_var: img_var.to_vec(),
        txt_var: txt_var.to_vec(),
        abs_mean_diff,
        ranking,
    }
}

/// Number of sweep angles used by [`separability_check`].
pub const SEPARABILITY_ANGLES: usize = 721;

/// Best balanced accuracy of a threshold on the given projections, where
/// labels mark image rows. Both threshold orientations are considered.
fn best_threshold_accuracy(values: &mut [(f64, bool)]) -> f64 {
    values.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("projections are finite"));
    let total = values.len();
    let n_img = values.iter().filter(|(_, img)| *img).count() as f64;
    let n_txt = total as f64 - n_img;
    let mut best: f64 = 0.5;
    let mut img_prefix = 0.0;
    for k in 0..total - 1 {
        if values[k].1 {
            img_prefix += 1.0;
        }
        if values[k].0 < values[k + 1].0 {
            let m = (k + 1) as f64;
            let acc = 0.5 * (img_prefix / n_img + 1.0 - (m - img_prefix) / n_txt);
            best = best.max(acc.max(1.0 - acc));
        }
    }
    best
}

/// How well the two given dimensions linearly separate the modalities:
/// the best balanced accuracy over a threshold on either axis or on any of
/// [`SEPARABILITY_ANGLES`] evenly spaced projection directions in
/// [0°, 180°).
pub fn separability_check(pairs: &PairedEmbeddingSet, dims: (usize, usize)) -> Result<f64> {
    let (d1, d2) = dims;
    let d = pairs.dim();
    if d1 >= d || d2 >= d {
        return Err(Error::InvalidArgument(format!(
            "dimension indices ({d1}, {d2}) out of range for D={d}"
        )));
    }
    if d1 == d2 {
        return Err(Error::InvalidArgument(
            "separability needs two distinct dimensions".into(),
        ));
    }
    let n = pairs.n();
    let mut directions = vec![(1.0, 0.0), (0.0, 1.0)];
    for i in 0..SEPARABILITY_ANGLES {
        let theta = std::f64::consts::PI * i as f64 / SEPARABILITY_ANGLES as f64;
        directions.push((theta.cos(), theta.sin()));
    }
    let mut best: f64 = 0.5;
    let mut projected = Vec::with_capacity(2 * n);
    for (wx, wy) in directions {
        projected.clear();
        for row in pairs.images.data.rows() {
            projected.push((wx * row[d1] + wy * row[d2], true));
        }
        for row in pairs.texts.data.rows() {
            projected.push((wx * row[d1] + wy * row[d2], false));
        }
        best = best.max(best_threshold_accuracy(&mut projected));
    }
    Ok(best)
}

/// Alignment (mean matched-pair dot product) and uniformity
/// (mean over anchors i of `log sum_{j != i} exp(x_i . y_j / tau)`), with
/// negatives drawn across the modalities only.
pub fn alignment_uniformity(pairs: &PairedEmbeddingSet, cfg: &MetricsConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    let n = pairs.n();
    let alignment = (0..n)
        .map(|i| pairs.images.row(i).dot(&pairs.texts.row(i)))
        .sum::<f64>()
        / n as f64;
    if n < 2 {
        return Err(Error::InvalidArgument(
            "uniformity needs at least 2 pairs for the j != i terms".into(),
        ));
    }
    let tau = cfg.temperature;
    // blocked X @ Y^T so large sets never materialize the full n x n matrix
    let block = 256usize;
    let mut acc = 0.0;
    let mut start = 0;
    while start < n {
        let stop = (start + block).min(n);
        let rows = pairs.images.data.slice(ndarray::s![start..stop, ..]);
        let sims = rows.dot(&pairs.texts.data.t());
        for (local, sim_row) in sims.rows().into_iter().enumerate() {
            let i = start + local;
            let mut max = f64::NEG_INFINITY;
            for (j, &s) in sim_row.iter().enumerate() {
                if j != i {
                    max = max.max(s / tau);
                }
            }
            let mut sum = 0.0;
            for (j, &s) in sim_row.iter().enumerate() {
                if j != i {
                    sum += (s / tau - max).exp();
                }
            }
            acc += max + sum.ln();
        }
        start = stop;
    }
    Ok((alignment, acc / n as f64))
}

/// Compute every gap quantity at once.
pub fn gap_report(pairs: &PairedEmbeddingSet, cfg: &MetricsConfig) -> Result<GapReport> {
    let (alignment, uniformity) = alignment_uniformity(pairs, cfg)?;
    Ok(GapReport {
        l2m: l2m(pairs),
        rmg: rmg(pairs, cfg)?,
        alignment,
        uniformity,
        gap_vector: gap_vector(pairs).to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{make_paired, EmbeddingSet, Modality};
    use crate::testkit;
    use ndarray::array;

    fn paired(images: Array2<f64>, texts: Array2<f64>) -> PairedEmbeddingSet {
        let img = EmbeddingSet::new(images, Modality::Image, false, None, "").unwrap();
        let txt = EmbeddingSet::new(texts, Modality::Text, false, None, "").unwrap();
        make_paired(img, txt).unwrap()
    }

    fn e(k: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        v
    }

    #[test]
    fn l2m_matches_hand_cases() {
        let same = paired(array![[1.0, 0.0], [0.0, 1.0]], array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(l2m(&same), 0.0);

        let antipodal = paired(
            array![[1.0, 0.0], [1.0, 0.0]],
            array![[-1.0, 0.0], [-1.0, 0.0]],
        );
        assert!((l2m(&antipodal) - 2.0).abs() < 1e-15);

        let mixed = paired(array![[1.0, 0.0], [0.0, 1.0]], array![[1.0, 0.0], [1.0, 0.0]]);
        assert!((l2m(&mixed) - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rmg_matches_hand_cases() {
        let cfg = MetricsConfig::default();
        let same = paired(array![[1.0, 0.0], [0.0, 1.0]], array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(rmg(&same, &cfg).unwrap(), 0.0);

        let collapsed = paired(
            array![[1.0, 0.0], [1.0, 0.0]],
            array![[-1.0, 0.0], [-1.0, 0.0]],
        );
        assert!((rmg(&collapsed, &cfg).unwrap() - 1.0).abs() < 1e-12);

        // cross-matched: numerator 0.5, intra 0.5
        let crossed = paired(array![[1.0, 0.0], [0.0, 1.0]], array![[0.0, 1.0], [1.0, 0.0]]);
        assert!((rmg(&crossed, &cfg).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rmg_agrees_with_brute_force_pairwise_oracle() {
        let mut r = testkit::rng(101);
        for trial in 0..10 {
            let n = 3 + (trial % 5);
            let pairs = testkit::random_paired(n, 6, &mut r);
            let got = rmg(&pairs, &MetricsConfig::default()).unwrap();

            let d = |a: ArrayView1<f64>, b: ArrayView1<f64>| (1.0 - a.dot(&b)) / 2.0;
            let mut num = 0.0;
            for i in 0..n {
                num += d(pairs.images.row(i), pairs.texts.row(i));
            }
            num /= n as f64;
            let mut intra = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        intra += d(pairs.images.row(i), pairs.images.row(j));
                        intra += d(pairs.texts.row(i), pairs.texts.row(j));
                    }
                }
            }
            intra *= 0.5 / (n * (n - 1)) as f64;
            let expect = num / (intra + num);
            assert!((got - expect).abs() < 1e-12, "trial {trial}: {got} vs {expect}");
        }
    }

    #[test]
    fn rmg_requires_two_pairs_and_stays_bounded() {
        let single = paired(array![[1.0, 0.0]], array![[0.0, 1.0]]);
        assert!(rmg(&single, &MetricsConfig::default()).is_err());

        let mut r = testkit::rng(55);
        for _ in 0..50 {
            let pairs = testkit::random_paired(2 + r.random_range(0..20), 4, &mut r);
            let v = rmg(&pairs, &MetricsConfig::default()).unwrap();
            assert!((0.0..=1.0).contains(&v), "rmg out of range: {v}");
        }
    }

    #[test]
    fn rmg_subsampling_is_deterministic_and_converges() {
        let mut r = testkit::rng(77);
        let pairs = testkit::random_paired(300, 8, &mut r);
        let exact = rmg(&pairs, &MetricsConfig::default()).unwrap();
        let capped_cfg = MetricsConfig {
            pair_subsample_cap: Some(40_000),
            rng_seed: 9,
            ..Default::default()
        };
        let capped_a = rmg(&pairs, &capped_cfg).unwrap();
        let capped_b = rmg(&pairs, &capped_cfg).unwrap();
        assert_eq!(capped_a, capped_b, "same seed must reproduce");
        assert!(
            (capped_a - exact).abs() < 0.02,
            "subsampled {capped_a} far from exact {exact}"
        );

        // a cap at or above the full pair count must be bit-identical to exact
        let big_cap = MetricsConfig {
            pair_subsample_cap: Some(300 * 299),
            ..Default::default()
        };
        assert_eq!(rmg(&pairs, &big_cap).unwrap(), exact);
    }

    #[test]
    fn dim_stats_rank_by_mean_difference() {
        let pairs = paired(array![[1.0, 0.0], [1.0, 0.0]], array![[0.0, 1.0], [0.0, 1.0]]);
        let stats = dim_gap_stats(&pairs);
        assert_eq!(stats.abs_mean_diff, vec![1.0, 1.0]);
        assert_eq!(stats.ranking, vec![0, 1]);

        let same = paired(array![[1.0, 0.0], [0.0, 1.0]], array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(dim_gap_stats(&same).abs_mean_diff.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dim_stats_match_recomputation_oracle() {
        let mut r = testkit::rng(3);
        let pairs = testkit::random_paired(50, 8, &mut r);
        let stats = dim_gap_stats(&pairs);
        let mut expect: Vec<f64> = Vec::new();
        for k in 0..8 {
            let im: f64 = pairs.images.data.column(k).sum() / 50.0;
            let tm: f64 = pairs.texts.data.column(k).sum() / 50.0;
            expect.push((im - tm).abs());
        }
        for (k, &v) in expect.iter().enumerate() {
            assert!((stats.abs_mean_diff[k] - v).abs() < 1e-12);
        }
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| expect[b].partial_cmp(&expect[a]).unwrap().then(a.cmp(&b)));
        assert_eq!(stats.ranking, order);
        assert_eq!(
            {
                let mut sorted = stats.ranking.clone();
                sorted.sort_unstable();
                sorted
            },
            (0..8).collect::<Vec<_>>()
        );
    }

    #[test]
    fn separability_detects_constructed_split() {
        // images cluster near dim0 = 0.9, texts near dim0 = 0.1
        let mut r = testkit::rng(12);
        let n = 40;
        let mut img = Array2::zeros((n, 3));
        let mut txt = Array2::zeros((n, 3));
        for i in 0..n {
            let jitter = 0.02 * (r.random::<f64>() - 0.5);
            img[[i, 0]] = 0.9 + jitter;
            img[[i, 1]] = r.random::<f64>() * 0.1;
            img[[i, 2]] = 0.3;
            let jitter = 0.02 * (r.random::<f64>() - 0.5);
            txt[[i, 0]] = 0.1 + jitter;
            txt[[i, 1]] = r.random::<f64>() * 0.1;
            txt[[i, 2]] = 0.9;
        }
        let pairs = paired(img, txt);
        assert_eq!(separability_check(&pairs, (0, 1)).unwrap(), 1.0);
    }

    #[test]
    fn separability_is_chance_on_identical_sets() {
        let mut r = testkit::rng(13);
        let data = testkit::random_matrix(30, 4, &mut r);
        let pairs = paired(data.clone(), data);
        assert_eq!(separability_check(&pairs, (0, 1)).unwrap(), 0.5);
        assert_eq!(separability_check(&pairs, (2, 3)).unwrap(), 0.5);
    }

    #[test]
    fn separability_validates_dims() {
        let mut r = testkit::rng(14);
        let pairs = testkit::random_paired(5, 3, &mut r);
        assert!(separability_check(&pairs, (0, 3)).is_err());
        assert!(separability_check(&pairs, (1, 1)).is_err());
    }

    #[test]
    fn alignment_and_uniformity_match_hand_cases() {
        let cfg = MetricsConfig::default();
        let mut r = testkit::rng(21);
        let data = testkit::random_matrix(6, 4, &mut r);
        let aligned = paired(data.clone(), data);
        let (a, _) = alignment_uniformity(&aligned, &cfg).unwrap();
        assert!((a - 1.0).abs() < 1e-12);

        let basis = paired(array![[1.0, 0.0], [0.0, 1.0]], array![[1.0, 0.0], [0.0, 1.0]]);
        let (_, u) = alignment_uniformity(&basis, &cfg).unwrap();
        assert!(u.abs() < 1e-12, "uniformity should be 0, got {u}");

        let single = paired(array![[1.0, 0.0]], array![[0.0, 1.0]]);
        assert!(alignment_uniformity(&single, &cfg).is_err());
    }

    #[test]
    fn uniformity_matches_brute_force_oracle() {
        let mut r = testkit::rng(22);
        let pairs = testkit::random_paired(300, 8, &mut r);
        let cfg = MetricsConfig {
            temperature: 0.7,
            ..Default::default()
        };
        let (_, got) = alignment_uniformity(&pairs, &cfg).unwrap();
        let n = pairs.n();
        let mut expect = 0.0;
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                if j != i {
                    sum += (pairs.images.row(i).dot(&pairs.texts.row(j)) / 0.7).exp();
                }
            }
            expect += sum.ln();
        }
        expect /= n as f64;
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn gap_vector_matches_hand_cases() {
        let d = 4;
        let same = paired(
            Array2::from_shape_fn((3, d), |(i, j)| e(i % d, d)[j]),
            Array2::from_shape_fn((3, d), |(i, j)| e(i % d, d)[j]),
        );
        assert!(gap_vector(&same).iter().all(|&v| v == 0.0));

        let split = paired(
            Array2::from_shape_fn((2, d), |(_, j)| e(0, d)[j]),
            Array2::from_shape_fn((2, d), |(_, j)| e(1, d)[j]),
        );
        let g = gap_vector(&split);
        assert_eq!(g.to_vec(), vec![1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn gap_vector_recovers_an_injected_offset() {
        // texts random, images = texts + g with g orthogonal to every text
        let mut r = testkit::rng(31);
        let n = 200;
        let d = 6;
        let mut txt = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d - 1 {
                txt[[i, j]] = r.random::<f64>() * 2.0 - 1.0;
            }
            let row = txt.row(i).to_owned();
            let norm = row.dot(&row).sqrt();
            for j in 0..d - 1 {
                txt[[i, j]] /= norm;
            }
        }
        let g_scale = 0.05;
        let mut img = txt.clone();
        for i in 0..n {
            img[[i, d - 1]] += g_scale; // g = 0.05 * e_last, orthogonal to texts
        }
        let pairs = paired(img, txt);
        let got = gap_vector(&pairs);
        let mut g = Array1::zeros(d);
        g[d - 1] = 1.0;
        let cos = cosine(got.view(), g.view()).unwrap();
        assert!(cos >= 0.99, "gap direction cosine {cos}");
    }

    #[test]
    fn metrics_are_invariant_under_joint_rotation() {
        let mut r = testkit::rng(41);
        let pairs = testkit::random_paired(64, 8, &mut r);
        let q = testkit::random_orthogonal(8, &mut r);
        let rotated = testkit::rotate_paired(&pairs, &q);
        let cfg = MetricsConfig::default();

        assert!((l2m(&pairs) - l2m(&rotated)).abs() < 1e-9);
        assert!((rmg(&pairs, &cfg).unwrap() - rmg(&rotated, &cfg).unwrap()).abs() < 1e-9);
        let (a0, u0) = alignment_uniformity(&pairs, &cfg).unwrap();
        let (a1, u1) = alignment_uniformity(&rotated, &cfg).unwrap();
        assert!((a0 - a1).abs() < 1e-9);
        assert!((u0 - u1).abs() < 1e-9);

        let rotated_gap = gap_vector(&pairs).dot(&q);
        let diff = &rotated_gap - &gap_vector(&rotated);
        assert!(diff.dot(&diff).sqrt() < 1e-9);
    }

    #[test]
    fn metrics_are_invariant_under_pair_permutation() {
        let mut r = testkit::rng(42);
        let pairs = testkit::random_paired(32, 5, &mut r);
        let perm = testkit::random_permutation(32, &mut r);
        let shuffled = testkit::permute_paired(&pairs, &perm);
        let cfg = MetricsConfig::default();

        assert!((l2m(&pairs) - l2m(&shuffled)).abs() < 1e-12);
        assert!((rmg(&pairs, &cfg).unwrap() - rmg(&shuffled, &cfg).unwrap()).abs() < 1e-12);
        let (a0, u0) = alignment_uniformity(&pairs, &cfg).unwrap();
        let (a1, u1) = alignment_uniformity(&shuffled, &cfg).unwrap();
        assert!((a0 - a1).abs() < 1e-12);
        assert!((u0 - u1).abs() < 1e-12);
    }

    #[test]
    fn l2m_never_exceeds_two_on_unit_rows() {
        let mut r = testkit::rng(43);
        for _ in 0..20 {
            let pairs = testkit::random_paired(2 + r.random_range(0..30), 3, &mut r);
            assert!(l2m(&pairs) <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn cosine_kernel_reproduces_the_worked_values() {
        let i = array![8.0, 0.6, 0.7, 0.3];
        let t = array![5.0, 0.13, 0.035, 0.02];
        let t2 = array![5.0, 1.5, 0.7, 0.45];
        assert!((cosine(i.view(), t.view()).unwrap() - 0.995).abs() < 0.001);
        assert!((cosine(i.view(), t2.view()).unwrap() - 0.975).abs() < 0.001);
        assert!(cosine(i.view(), Array1::zeros(4).view()).is_none());
    }

    #[test]
    fn gap_report_serializes_flat() {
        let mut r = testkit::rng(44);
        let pairs = testkit::random_paired(8, 3, &mut r);
        let report = gap_report(&pairs, &MetricsConfig::default()).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        for field in ["l2m", "rmg", "alignment", "uniformity", "gap_vector"] {
            assert!(json.get(field).is_some(), "missing {field}");
        }
        assert_eq!(json["gap_vector"].as_array().unwrap().len(), 3);
    }
}
