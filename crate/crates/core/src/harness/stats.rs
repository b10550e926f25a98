//! Small statistics used by the report generator: rank correlation for
//! trend checks, a two-component PCA for the modality scatter plot, and a
//! silhouette score for how separated the two modalities are in that plane.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Mean and (population) standard deviation; `(NaN, NaN)` for no values so
/// missing cells are visible rather than silently zero.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fractional ranks (1-based, ties averaged), the form Spearman's rho needs.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j hold equal values; each gets the mean rank.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation of two equal-length samples. Errors on length
/// mismatch, fewer than two points, or a constant sample (rho undefined).
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "rank correlation needs equal lengths, got {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(
            "rank correlation needs at least two points".into(),
        ));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let mx = rx.iter().sum::<f64>() / rx.len() as f64;
    let my = ry.iter().sum::<f64>() / ry.len() as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InvalidArgument(
            "rank correlation is undefined for a constant sample".into(),
        ));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Result of [`pca_top2`]: each input row projected onto the two leading
/// principal axes, plus the variance each axis explains.
#[derive(Debug, Clone)]
pub struct Pca2 {
    /// `n × 2` projections, same row order as the input.
    pub projected: Array2<f64>,
    pub explained: [f64; 2],
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors-as-columns), unsorted.
fn jacobi_eigen(mut a: Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut v = Array2::eye(n);
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off.sqrt() < 1e-12 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                // Standard 2x2 rotation that zeroes a[p][q].
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    (a.diag().to_owned(), v)
}

/// Project `data` (rows are observations) onto its two leading principal
/// components. Rows are mean-centered first. Axis signs are fixed by making
/// each axis's largest-magnitude coefficient positive, so output bytes are
/// reproducible.
pub fn pca_top2(data: ArrayView2<'_, f64>) -> Result<Pca2> {
    let (n, d) = data.dim();
    if n < 2 || d < 2 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least a 2x2 matrix, got {n}x{d}"
        )));
    }
    let mean = data.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &data - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let (values, vectors) = jacobi_eigen(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();

    let mut axes = Array2::zeros((d, 2));
    let mut explained = [0.0; 2];
    for (slot, &col) in order.iter().take(2).enumerate() {
        let mut axis = vectors.column(col).to_owned();
        let lead = axis
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .expect("d >= 2");
        if axis[lead] < 0.0 {
            axis.mapv_inplace(|x| -x);
        }
        axes.column_mut(slot).assign(&axis);
        explained[slot] = if total > 0.0 {
            values[col].max(0.0) / total
        } else {
            0.0
        };
    }
    Ok(Pca2 {
        projected: centered.dot(&axes),
        explained,
    })
}

/// Mean silhouette coefficient of a two-cluster labeling (`labels[i]` is
/// true/false) over points in any dimension, with Euclidean distance.
/// Requires both clusters non-empty and at least two points in each.
pub fn silhouette(points: ArrayView2<'_, f64>, labels: &[bool]) -> Result<f64> {
    let n = points.nrows();
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "silhouette got {n} points but {} labels",
            labels.len()
        )));
    }
    let n_true = labels.iter().filter(|&&l| l).count();
    if n_true < 2 || n - n_true < 2 {
        return Err(Error::InvalidArgument(
            "silhouette needs at least two points per cluster".into(),
        ));
    }
    let dist = |i: usize, j: usize| -> f64 {
        points
            .row(i)
            .iter()
            .zip(points.row(j))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut same_sum = 0.0;
        let mut same_n = 0usize;
        let mut other_sum = 0.0;
        let mut other_n = 0usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = dist(i, j);
            if labels[j] == labels[i] {
                same_sum += d;
                same_n += 1;
            } else {
                other_sum += d;
                other_n += 1;
            }
        }
        let a = same_sum / same_n as f64;
        let b = other_sum / other_n as f64;
        let s = if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 };
        total += s;
    }
    Ok(total / n as f64)
}
