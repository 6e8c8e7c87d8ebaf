//! Dense kernels: strided GEMM and Cholesky factorization.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// `c = beta * c + op(a) * op(b)` for one `m x n` output block.
///
/// `op(a)` is `m x k`; when `trans_a` the buffer holds `a` as `k x m`.
/// `op(b)` is `k x n`; when `trans_b` the buffer holds `b` as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    beta: T,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are bounds-checked above and the strides address
    // exactly the m*k, k*n and m*n elements of each buffer.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower Cholesky factor of a symmetric positive-definite `n x n` matrix.
pub fn cholesky<T: Scalar>(a: &[T], n: usize) -> Result<Vec<T>> {
    let mut l = vec![T::zero(); n * n];
    for j in 0..n {
        let mut diag = a[j * n + j];
        for p in 0..j {
            diag -= l[j * n + p] * l[j * n + p];
        }
        if !(diag > T::zero()) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: diag.to_f64().unwrap_or(f64::NAN),
            });
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Ok(l)
}

/// Inverse of `L Lᵀ` from its lower Cholesky factor, by forward/back substitution
/// against the identity. The result is symmetrized.
pub fn cholesky_inverse<T: Scalar>(l: &[T], n: usize) -> Vec<T> {
    let mut inv = vec![T::zero(); n * n];
    let mut y = vec![T::zero(); n];
    for col in 0..n {
        // L y = e_col
        for i in 0..n {
            let mut s = if i == col { T::one() } else { T::zero() };
            for p in 0..i {
                s -= l[i * n + p] * y[p];
            }
            y[i] = s / l[i * n + i];
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for p in i + 1..n {
                s -= l[p * n + i] * inv[p * n + col];
            }
            inv[i * n + col] = s / l[i * n + i];
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let s = (inv[i * n + j] + inv[j * n + i]) * T::from_f64_lossy(0.5);
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    inv
}

/// `log det` of an SPD matrix as twice the summed log-diagonal of its Cholesky factor.
pub fn logdet_spd<T: Scalar>(a: &[T], n: usize) -> Result<(T, Vec<T>)> {
    let l = cholesky(a, n)?;
    let mut s = T::zero();
    for i in 0..n {
        s += l[i * n + i].ln();
    }
    Ok((s + s, l))
}
