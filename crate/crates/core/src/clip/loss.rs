//! Symmetric contrastive (InfoNCE) loss over a batch of matched
//! image/text embedding pairs, with exact gradients for training.
//!
//! For a batch of `b` pairs with unit-norm embeddings `X` (images) and
//! `Y` (texts), the similarity matrix is `S = alpha * X Y^T` where
//! `alpha = min(exp(logit_scale), 100)`. The loss is the mean of two
//! cross-entropies over `S`: rows against the diagonal (image-to-text
//! retrieval) and columns against the diagonal (text-to-image), halved.

use crate::clip::backend::Real;
use crate::store::EmbeddingSet;
use crate::{Error, Result};

/// Loss plus the gradients the trainer needs.
#[derive(Debug)]
pub struct LossOutput<T> {
    pub loss: f64,
    /// d(loss)/d(logit_scale). Zero while the scale clamp is active.
    pub d_logit_scale: T,
}

/// Row-major b x b similarity matrix in f64, built from `T` embeddings.
fn similarity_f64<T: Real>(x: &[T], y: &[T], b: usize, d: usize, alpha: f64) -> Vec<f64> {
    // The dot products are computed in T (this is what the training step
    // sees), then upcast; softmax and the loss itself run in f64.
    let mut s_t = vec![T::zero(); b * b];
    T::gemm(
        false,
        true,
        b,
        b,
        d,
        T::one(),
        x,
        d,
        y,
        d,
        T::zero(),
        &mut s_t,
        b,
    );
    s_t.iter().map(|v| Real::to_f64(*v) * alpha).collect()
}

/// Row softmax probabilities and the mean row cross-entropy against the
/// diagonal. `stride`/`step` select rows (stride=b, step=1) or columns
/// (stride=1, step=b) of the row-major matrix.
fn softmax_ce(s: &[f64], b: usize, stride: usize, step: usize, probs: &mut [f64]) -> f64 {
    let mut ce = 0.0;
    for i in 0..b {
        let at = |k: usize| s[i * stride + k * step];
        let mut max = f64::NEG_INFINITY;
        for k in 0..b {
            max = max.max(at(k));
        }
        let mut denom = 0.0;
        for k in 0..b {
            denom += (at(k) - max).exp();
        }
        let log_denom = denom.ln() + max;
        ce += log_denom - at(i);
        for k in 0..b {
            probs[i * stride + k * step] = (at(k) - max).exp() / denom;
        }
    }
    ce / b as f64
}

/// Forward-only loss over raw `T` buffers (`b` rows of dimension `d`).
pub fn infonce_loss<T: Real>(x: &[T], y: &[T], b: usize, d: usize, logit_scale: f64) -> f64 {
    let alpha = logit_scale.exp().min(crate::clip::model::LOGIT_SCALE_MAX);
    let s = similarity_f64(x, y, b, d, alpha);
    let mut scratch = vec![0.0; b * b];
    let row_ce = softmax_ce(&s, b, b, 1, &mut scratch);
    let col_ce = softmax_ce(&s, b, 1, b, &mut scratch);
    0.5 * (row_ce + col_ce)
}

/// Loss and gradients. `d_x`/`d_y` (each `b*d`) are overwritten with the
/// gradients w.r.t. the normalized embeddings; the logit-scale gradient
/// is returned. All inputs are taken as-is (callers normalize rows).
pub fn infonce_with_grads<T: Real>(
    x: &[T],
    y: &[T],
    b: usize,
    d: usize,
    logit_scale: f64,
    d_x: &mut [T],
    d_y: &mut [T],
) -> LossOutput<T> {
    assert!(b > 0, "empty batch");
    assert_eq!(x.len(), b * d);
    assert_eq!(y.len(), b * d);
    assert_eq!(d_x.len(), b * d);
    assert_eq!(d_y.len(), b * d);

    let raw_alpha = logit_scale.exp();
    let clamped = raw_alpha > crate::clip::model::LOGIT_SCALE_MAX;
    let alpha = raw_alpha.min(crate::clip::model::LOGIT_SCALE_MAX);

    let s = similarity_f64(x, y, b, d, alpha);
    let mut p_row = vec![0.0; b * b];
    let mut p_col = vec![0.0; b * b];
    let row_ce = softmax_ce(&s, b, b, 1, &mut p_row);
    let col_ce = softmax_ce(&s, b, 1, b, &mut p_col);
    let loss = 0.5 * (row_ce + col_ce);

    // dL/dS_ij = (P_row - I + P_col - I)_ij / (2b); the column softmax is
    // already stored in row-major orientation by softmax_ce.
    let inv = 1.0 / (2.0 * b as f64);
    let mut dz = vec![T::zero(); b * b];
    let mut d_ls = 0.0;
    for i in 0..b {
        for j in 0..b {
            let idx = i * b + j;
            let diag = if i == j { 2.0 } else { 0.0 };
            let g = (p_row[idx] + p_col[idx] - diag) * inv;
            // d(alpha)/d(logit_scale) = alpha unless clamped; S = alpha*G,
            // so dL/d(ls) = sum dZ * G * alpha = sum dZ * S.
            d_ls += g * s[idx];
            dz[idx] = T::from_f64(g * alpha);
        }
    }
    if clamped {
        d_ls = 0.0;
    }

    // dX = dZ @ Y, dY = dZ^T @ X.
    d_x.fill(T::zero());
    d_y.fill(T::zero());
    T::gemm(
        false,
        false,
        b,
        d,
        b,
        T::one(),
        &dz,
        b,
        y,
        d,
        T::zero(),
        d_x,
        d,
    );
    T::gemm(
        true,
        false,
        b,
        d,
        b,
        T::one(),
        &dz,
        b,
        x,
        d,
        T::zero(),
        d_y,
        d,
    );

    LossOutput {
        loss,
        d_logit_scale: T::from_f64(d_ls),
    }
}

/// Contrastive loss between two matched embedding sets. Rows are paired
/// by index; both sets must be the same shape and non-empty.
pub fn symmetric_infonce(
    images: &EmbeddingSet,
    texts: &EmbeddingSet,
    logit_scale: f64,
) -> Result<f64> {
    if images.n() == 0 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs at least one pair".into(),
        ));
    }
    if images.n() != texts.n() || images.dim() != texts.dim() {
        return Err(Error::Shape(format!(
            "mismatched sets: {}x{} images vs {}x{} texts",
            images.n(),
            images.dim(),
            texts.n(),
            texts.dim()
        )));
    }
    let (b, d) = (images.n(), images.dim());
    let x: Vec<f64> = images.data.iter().copied().collect();
    let y: Vec<f64> = texts.data.iter().copied().collect();
    Ok(infonce_loss(&x, &y, b, d, logit_scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Modality;
    use crate::testkit;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(data: Array2<f64>, modality: Modality) -> EmbeddingSet {
        EmbeddingSet::new(data, modality, true, None, "test").unwrap()
    }

    /// Direct transcription of the loss definition, no shortcuts.
    fn oracle(x: &[f64], y: &[f64], b: usize, d: usize, ls: f64) -> f64 {
        let alpha = ls.exp().min(100.0);
        let dot = |i: usize, j: usize| -> f64 {
            (0..d).map(|k| x[i * d + k] * y[j * d + k]).sum::<f64>() * alpha
        };
        let mut total = 0.0;
        for i in 0..b {
            let denom: f64 = (0..b).map(|j| dot(i, j).exp()).sum();
            total += -(dot(i, i).exp() / denom).ln();
        }
        for j in 0..b {
            let denom: f64 = (0..b).map(|i| dot(i, j).exp()).sum();
            total += -(dot(j, j).exp() / denom).ln();
        }
        total / (2.0 * b as f64)
    }

    #[test]
    fn two_identical_orthogonal_pairs_hit_the_closed_form() {
        // X = Y = {e1, e2}, unit scale: each row/column cross-entropy is
        // log(1 + e^-1).
        let e = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let img = set(e.clone(), Modality::Image);
        let txt = set(e, Modality::Text);
        let loss = symmetric_infonce(&img, &txt, 0.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        assert!((loss - 0.313_261_687_5).abs() < 1e-9);
    }

    #[test]
    fn loss_matches_the_direct_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..200 {
            let b = rng.random_range(1..=32);
            let d = rng.random_range(2..=16);
            let x = testkit::random_unit_set(b, d, Modality::Image, &mut rng);
            let y = testkit::random_unit_set(b, d, Modality::Text, &mut rng);
            let xv: Vec<f64> = x.data.iter().copied().collect();
            let yv: Vec<f64> = y.data.iter().copied().collect();
            // Cover the clamp region too (ln(100) ~ 4.6).
            let ls = rng.random_range(-1.0..6.0);
            let got = infonce_loss(&xv, &yv, b, d, ls);
            let want = oracle(&xv, &yv, b, d, ls);
            assert!(
                (got - want).abs() < 1e-9,
                "trial {trial}: {got} vs {want} (b={b} d={d} ls={ls})"
            );
        }
    }

    #[test]
    fn loss_is_symmetric_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = 12;
        let d = 8;
        let x = testkit::random_unit_set(b, d, Modality::Image, &mut rng);
        let y = testkit::random_unit_set(b, d, Modality::Text, &mut rng);
        let xv: Vec<f64> = x.data.iter().copied().collect();
        let yv: Vec<f64> = y.data.iter().copied().collect();
        let base = infonce_loss(&xv, &yv, b, d, 1.3);
        let swapped = infonce_loss(&yv, &xv, b, d, 1.3);
        assert!((base - swapped).abs() < 1e-12);

        // Shuffle the pairs jointly.
        let mut order: Vec<usize> = (0..b).collect();
        for i in (1..b).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut xp = vec![0.0; b * d];
        let mut yp = vec![0.0; b * d];
        for (to, &from) in order.iter().enumerate() {
            xp[to * d..(to + 1) * d].copy_from_slice(&xv[from * d..(from + 1) * d]);
            yp[to * d..(to + 1) * d].copy_from_slice(&yv[from * d..(from + 1) * d]);
        }
        let permuted = infonce_loss(&xp, &yp, b, d, 1.3);
        assert!((base - permuted).abs() < 1e-12);
        assert!(base >= 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (b, d) = (6, 5);
        let x = testkit::random_unit_set(b, d, Modality::Image, &mut rng);
        let y = testkit::random_unit_set(b, d, Modality::Text, &mut rng);
        let mut xv: Vec<f64> = x.data.iter().copied().collect();
        let mut yv: Vec<f64> = y.data.iter().copied().collect();
        for ls in [0.0, 2.0, 5.5] {
            let mut dx = vec![0.0; b * d];
            let mut dy = vec![0.0; b * d];
            let out = infonce_with_grads(&xv, &yv, b, d, ls, &mut dx, &mut dy);
            let h = 1e-6;

            for idx in 0..b * d {
                let keep = xv[idx];
                xv[idx] = keep + h;
                let up = infonce_loss(&xv, &yv, b, d, ls);
                xv[idx] = keep - h;
                let down = infonce_loss(&xv, &yv, b, d, ls);
                xv[idx] = keep;
                let num = (up - down) / (2.0 * h);
                assert!((dx[idx] - num).abs() < 1e-7, "dx[{idx}] {} vs {num}", dx[idx]);
            }
            for idx in 0..b * d {
                let keep = yv[idx];
                yv[idx] = keep + h;
                let up = infonce_loss(&xv, &yv, b, d, ls);
                yv[idx] = keep - h;
                let down = infonce_loss(&xv, &yv, b, d, ls);
                yv[idx] = keep;
                let num = (up - down) / (2.0 * h);
                assert!((dy[idx] - num).abs() < 1e-7, "dy[{idx}] {} vs {num}", dy[idx]);
            }
            let num_ls = (infonce_loss(&xv, &yv, b, d, ls + h)
                - infonce_loss(&xv, &yv, b, d, ls - h))
                / (2.0 * h);
            assert!(
                (out.d_logit_scale - num_ls).abs() < 1e-7,
                "d_ls {} vs {num_ls} at ls={ls}",
                out.d_logit_scale
            );
            if ls > 100.0f64.ln() {
                assert_eq!(out.d_logit_scale, 0.0);
            }
        }
    }

    #[test]
    fn degenerate_sets_are_rejected() {
        let img = set(Array2::eye(2), Modality::Image);
        let txt = set(Array2::eye(2), Modality::Text);
        let empty = EmbeddingSet::new(
            Array2::zeros((0, 2)),
            Modality::Image,
            true,
            None,
            "test",
        );
        // An empty set may be rejected at construction; if it is allowed,
        // the loss must reject it.
        if let Ok(empty) = empty {
            assert!(symmetric_infonce(&empty, &txt, 0.0).is_err());
        }
        let wide = set(Array2::eye(3), Modality::Text);
        assert!(symmetric_infonce(&img, &wide, 0.0).is_err());
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let one = Array2::from_shape_vec((1, 3), vec![1.0, 0.0, 0.0]).unwrap();
        let img = set(one.clone(), Modality::Image);
        let txt = set(one, Modality::Text);
        assert_eq!(symmetric_infonce(&img, &txt, 0.0).unwrap(), 0.0);
    }
}
