//! Deterministic random fixtures shared by unit, property, and acceptance
//! tests: seeded unit-norm embedding sets and random orthogonal matrices
//! for rotation-invariance checks.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::store::{make_paired, EmbeddingSet, Modality, PairedEmbeddingSet};

/// Seeded RNG used by all fixtures.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n x dim` matrix of iid uniform values in `[-1, 1)`.
pub fn random_matrix(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, dim), |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Random unit-norm embedding set.
pub fn random_unit_set(n: usize, dim: usize, modality: Modality, rng: &mut ChaCha8Rng) -> EmbeddingSet {
    let raw = random_matrix(n, dim, rng);
    EmbeddingSet::new(raw, modality, false, None, "testkit")
        .and_then(|s| s.normalize_rows())
        .expect("random rows are almost surely non-zero")
}

/// Random matched image/text pair of unit-norm sets.
pub fn random_paired(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> PairedEmbeddingSet {
    let images = random_unit_set(n, dim, Modality::Image, rng);
    let texts = random_unit_set(n, dim, Modality::Text, rng);
    make_paired(images, texts).expect("sets are constructed compatible")
}

/// Random orthogonal `dim x dim` matrix, built by Gram-Schmidt on a random
/// Gaussian-ish matrix with one re-orthogonalization pass. Columns are
/// orthonormal to well below 1e-12.
pub fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    loop {
        let mut q = random_matrix(dim, dim, rng);
        if let Some(ortho) = gram_schmidt(&mut q) {
            return ortho;
        }
        // near-singular draw; try again (vanishingly rare)
    }
}

fn gram_schmidt(m: &mut Array2<f64>) -> Option<Array2<f64>> {
    let dim = m.nrows();
    // two passes for numerical orthogonality
    for _pass in 0..2 {
        for j in 0..dim {
            let mut col = m.column(j).to_owned();
            for k in 0..j {
                let prev = m.column(k);
                let proj = col.dot(&prev);
                col.zip_mut_with(&prev, |c, p| *c -= proj * p);
            }
            let norm = col.dot(&col).sqrt();
            if norm < 1e-8 {
                return None;
            }
            col.mapv_inplace(|v| v / norm);
            m.column_mut(j).assign(&col);
        }
    }
    Some(m.clone())
}

/// Apply an orthogonal map to both sides of a paired set (rows become
/// `row @ q`). Unit norms are preserved, so metrics that only depend on
/// the joint geometry must not change.
pub fn rotate_paired(pairs: &PairedEmbeddingSet, q: &Array2<f64>) -> PairedEmbeddingSet {
    let rot = |set: &EmbeddingSet| {
        EmbeddingSet::new(
            set.data.dot(q),
            set.modality,
            false,
            set.labels.clone(),
            format!("{} (rotated)", set.source),
        )
        .and_then(|s| s.normalize_rows())
        .expect("rotation preserves norms")
    };
    make_paired(rot(&pairs.images), rot(&pairs.texts)).expect("shapes unchanged")
}

/// Apply the same row permutation to both sides of a paired set.
pub fn permute_paired(pairs: &PairedEmbeddingSet, perm: &[usize]) -> PairedEmbeddingSet {
    assert_eq!(perm.len(), pairs.n());
    let apply = |set: &EmbeddingSet| {
        let mut data = Array2::zeros((set.n(), set.dim()));
        for (dst, &src) in perm.iter().enumerate() {
            data.row_mut(dst).assign(&set.data.row(src));
        }
        let labels = set
            .labels
            .as_ref()
            .map(|l| perm.iter().map(|&src| l[src].clone()).collect());
        EmbeddingSet::new(data, set.modality, set.normalized, labels, set.source.clone())
            .expect("permutation preserves invariants")
    };
    make_paired(apply(&pairs.images), apply(&pairs.texts)).expect("shapes unchanged")
}

/// Random permutation of `0..n`.
pub fn random_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Rows of the returned matrix have exactly the pairwise dot products
/// given by the symmetric positive-definite Gram matrix `g` (Cholesky
/// factorization, row i = i-th row of L). Lets tests pin down cosine
/// orderings directly. Panics if `g` is not positive definite.
pub fn vectors_from_gram(g: &Array2<f64>) -> Array2<f64> {
    let n = g.nrows();
    assert_eq!(n, g.ncols(), "gram matrix must be square");
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = g[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                assert!(sum > 0.0, "gram matrix is not positive definite");
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    l
}
