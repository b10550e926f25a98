//! Numeric backend for the encoders: a `Real` scalar abstraction so the
//! same network code runs in f32 (training) and f64 (gradient checking),
//! with matrix products dispatched to OpenBLAS when a usable shared
//! library is found and to the pure-Rust `matrixmultiply` kernels
//! otherwise.

use std::ffi::{c_char, c_double, c_float, c_int, c_void, CString};
use std::sync::OnceLock;

/// Scalar type the network is instantiated over.
pub trait Real: num_traits::Float + std::fmt::Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C = alpha * op(A) @ op(B) + beta * C, row-major, with explicit
    /// leading dimensions (row strides). All matrices densely packed
    /// within rows.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        lda: usize,
        b: &[Self],
        ldb: usize,
        beta: Self,
        c: &mut [Self],
        ldc: usize,
    );
}

// CBLAS row-major / transpose enum values.
const CBLAS_ROW_MAJOR: c_int = 101;
const CBLAS_NO_TRANS: c_int = 111;
const CBLAS_TRANS: c_int = 112;

type SgemmFn = unsafe extern "C" fn(
    c_int, c_int, c_int, c_int, c_int, c_int, c_float, *const c_float, c_int,
    *const c_float, c_int, c_float, *mut c_float, c_int,
);
type DgemmFn = unsafe extern "C" fn(
    c_int, c_int, c_int, c_int, c_int, c_int, c_double, *const c_double, c_int,
    *const c_double, c_int, c_double, *mut c_double, c_int,
);

struct Blas {
    sgemm: SgemmFn,
    dgemm: DgemmFn,
}

// SAFETY: the function pointers reference code in a library we never unload.
unsafe impl Send for Blas {}
unsafe impl Sync for Blas {}

static BLAS: OnceLock<Option<Blas>> = OnceLock::new();

/// Candidate shared-library names, tried in order.
const BLAS_CANDIDATES: &[&str] = &["libopenblas.so.0", "libopenblas.so", "libcblas.so.3"];

fn load_blas() -> Option<Blas> {
    if std::env::var_os("MMGAP_NO_BLAS").is_some() {
        return None;
    }
    // OpenBLAS reads these when the library initializes, so they must be
    // in the environment before dlopen. The core-type override matters on
    // hosts whose CPU model OpenBLAS misdetects; it is harmless even when
    // redundant because an unknown name falls back to autodetection.
    // Single-threaded keeps results run-to-run deterministic.
    unsafe {
        if std::env::var_os("OPENBLAS_NUM_THREADS").is_none() {
            std::env::set_var("OPENBLAS_NUM_THREADS", "1");
        }
        if std::env::var_os("OPENBLAS_CORETYPE").is_none() {
            std::env::set_var("OPENBLAS_CORETYPE", "SKYLAKEX");
        }
    }
    let explicit = std::env::var("MMGAP_BLAS_PATH").ok();
    let candidates: Vec<String> = explicit
        .into_iter()
        .chain(BLAS_CANDIDATES.iter().map(|s| s.to_string()))
        .collect();
    for name in candidates {
        let c_name = CString::new(name.clone()).ok()?;
        // RTLD_NOW = 2, RTLD_GLOBAL = 0x100 not needed.
        let handle = unsafe { libc::dlopen(c_name.as_ptr(), libc::RTLD_NOW) };
        if handle.is_null() {
            continue;
        }
        let sym = |s: &str| -> *mut c_void {
            let c_sym = CString::new(s).expect("static name");
            unsafe { libc::dlsym(handle, c_sym.as_ptr() as *const c_char) }
        };
        let sgemm = sym("cblas_sgemm");
        let dgemm = sym("cblas_dgemm");
        if sgemm.is_null() || dgemm.is_null() {
            unsafe { libc::dlclose(handle) };
            continue;
        }
        // SAFETY: cblas_{s,d}gemm have the declared C ABI in every BLAS
        // implementation exposing the CBLAS interface.
        let blas = unsafe {
            Blas {
                sgemm: std::mem::transmute::<*mut c_void, SgemmFn>(sgemm),
                dgemm: std::mem::transmute::<*mut c_void, DgemmFn>(dgemm),
            }
        };
        return Some(blas);
    }
    None
}

fn blas() -> Option<&'static Blas> {
    BLAS.get_or_init(load_blas).as_ref()
}

/// True when matrix products go through an external BLAS.
pub fn blas_active() -> bool {
    blas().is_some()
}

#[allow(clippy::too_many_arguments)]
fn gemm_fallback_f32(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f32,
    a: &[f32],
    lda: usize,
    b: &[f32],
    ldb: usize,
    beta: f32,
    c: &mut [f32],
    ldc: usize,
) {
    let (rsa, csa) = if trans_a { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if trans_b { (1, ldb as isize) } else { (ldb as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
            c.as_mut_ptr(), ldc as isize, 1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_fallback_f64(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    let (rsa, csa) = if trans_a { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if trans_b { (1, ldb as isize) } else { (ldb as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
            c.as_mut_ptr(), ldc as isize, 1,
        );
    }
}

/// Bounds-check a gemm call so the unsafe FFI below cannot read or write
/// out of range. op(A) is m x k, op(B) is k x n, C is m x n.
fn check_gemm_bounds(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a_len: usize,
    lda: usize,
    b_len: usize,
    ldb: usize,
    c_len: usize,
    ldc: usize,
) {
    let (a_rows, a_cols) = if trans_a { (k, m) } else { (m, k) };
    let (b_rows, b_cols) = if trans_b { (n, k) } else { (k, n) };
    assert!(lda >= a_cols.max(1) && ldb >= b_cols.max(1) && ldc >= n.max(1));
    if a_rows > 0 {
        assert!((a_rows - 1) * lda + a_cols <= a_len, "A out of bounds");
    }
    if b_rows > 0 {
        assert!((b_rows - 1) * ldb + b_cols <= b_len, "B out of bounds");
    }
    if m > 0 {
        assert!((m - 1) * ldc + n <= c_len, "C out of bounds");
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: f32,
        a: &[f32],
        lda: usize,
        b: &[f32],
        ldb: usize,
        beta: f32,
        c: &mut [f32],
        ldc: usize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_gemm_bounds(trans_a, trans_b, m, n, k, a.len(), lda, b.len(), ldb, c.len(), ldc);
        match blas() {
            Some(lib) => unsafe {
                (lib.sgemm)(
                    CBLAS_ROW_MAJOR,
                    if trans_a { CBLAS_TRANS } else { CBLAS_NO_TRANS },
                    if trans_b { CBLAS_TRANS } else { CBLAS_NO_TRANS },
                    m as c_int,
                    n as c_int,
                    k as c_int,
                    alpha,
                    a.as_ptr(),
                    lda as c_int,
                    b.as_ptr(),
                    ldb as c_int,
                    beta,
                    c.as_mut_ptr(),
                    ldc as c_int,
                )
            },
            None => gemm_fallback_f32(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc),
        }
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: f64,
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        beta: f64,
        c: &mut [f64],
        ldc: usize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_gemm_bounds(trans_a, trans_b, m, n, k, a.len(), lda, b.len(), ldb, c.len(), ldc);
        match blas() {
            Some(lib) => unsafe {
                (lib.dgemm)(
                    CBLAS_ROW_MAJOR,
                    if trans_a { CBLAS_TRANS } else { CBLAS_NO_TRANS },
                    if trans_b { CBLAS_TRANS } else { CBLAS_NO_TRANS },
                    m as c_int,
                    n as c_int,
                    k as c_int,
                    alpha,
                    a.as_ptr(),
                    lda as c_int,
                    b.as_ptr(),
                    ldb as c_int,
                    beta,
                    c.as_mut_ptr(),
                    ldc as c_int,
                )
            },
            None => gemm_fallback_f64(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
    ) -> Vec<f64> {
        let at = |i: usize, j: usize| {
            if trans_a { a[j * lda + i] } else { a[i * lda + j] }
        };
        let bt = |i: usize, j: usize| {
            if trans_b { b[j * ldb + i] } else { b[i * ldb + j] }
        };
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| at(i, p) * bt(p, j)).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let mut rng = crate::testkit::rng(11);
        use rand::Rng as _;
        for &(m, n, k) in &[(3usize, 4usize, 5usize), (7, 2, 9), (1, 6, 1)] {
            for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
                let a_len = if ta { k * m } else { m * k };
                let b_len = if tb { n * k } else { k * n };
                let a: Vec<f64> = (0..a_len).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..b_len).map(|_| rng.random_range(-1.0..1.0)).collect();
                let lda = if ta { m } else { k };
                let ldb = if tb { k } else { n };
                let expected = naive_gemm(ta, tb, m, n, k, &a, lda, &b, ldb);

                let mut c = vec![0.0f64; m * n];
                f64::gemm(ta, tb, m, n, k, 1.0, &a, lda, &b, ldb, 0.0, &mut c, n);
                for (x, y) in c.iter().zip(&expected) {
                    assert!((x - y).abs() < 1e-12, "f64 gemm mismatch");
                }

                let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
                let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
                let mut cf = vec![0.0f32; m * n];
                f32::gemm(ta, tb, m, n, k, 1.0, &af, lda, &bf, ldb, 0.0, &mut cf, n);
                for (x, y) in cf.iter().zip(&expected) {
                    assert!((*x as f64 - y).abs() < 1e-4, "f32 gemm mismatch");
                }
            }
        }
    }

    #[test]
    fn gemm_supports_strided_submatrices_and_accumulation() {
        // Multiply a 2x2 submatrix embedded in a wider row (lda=4) and
        // accumulate into a strided C with beta=1.
        let a = vec![
            1.0f64, 2.0, 99.0, 99.0, //
            3.0, 4.0, 99.0, 99.0,
        ];
        let b = vec![1.0f64, 0.0, 0.0, 1.0];
        let mut c = vec![10.0f64, 10.0, 77.0, 10.0, 10.0, 77.0];
        f64::gemm(false, false, 2, 2, 2, 1.0, &a, 4, &b, 2, 1.0, &mut c, 3);
        assert_eq!(c, vec![11.0, 12.0, 77.0, 13.0, 14.0, 77.0]);
    }

    #[test]
    fn alpha_scales_the_product() {
        let a = vec![2.0f32, 0.0, 0.0, 2.0];
        let b = vec![1.0f32, 2.0, 3.0, 4.0];
        let mut c = vec![0.0f32; 4];
        f32::gemm(false, false, 2, 2, 2, 0.5, &a, 2, &b, 2, 0.0, &mut c, 2);
        assert_eq!(c, vec![1.0, 2.0, 3.0, 4.0]);
    }
}
