//! Small dense kernels on row-major slices.
//!
//! Every routine has a fixed accumulation order so that the fused and naive
//! execution paths, which call the same kernels on different buffers, produce
//! bit-identical results.

use crate::Real;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

/// `out = a · x` with `a` of shape `rows × cols`.
pub fn matvec<T: Real>(a: &[T], x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), rows * cols);
    for i in 0..rows {
        out[i] = dot(&a[i * cols..(i + 1) * cols], &x[..cols]);
    }
}

/// `out = aᵀ · x` with `a` of shape `rows × cols`.
pub fn matvec_t<T: Real>(a: &[T], x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), rows * cols);
    let out = &mut out[..cols];
    out.iter_mut().for_each(|v| *v = T::zero());
    for (row, &xi) in a.chunks_exact(cols).zip(&x[..rows]) {
        axpy(xi, row, out);
    }
}

/// `y += alpha · x`, elementwise in index order.
#[inline(always)]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `out = a · b` with `a: r × k`, `b: k × c`.
///
/// Each entry is accumulated over `l = 0..k` in order, starting from zero.
pub fn matmul<T: Real>(a: &[T], b: &[T], r: usize, k: usize, c: usize, out: &mut [T]) {
    debug_assert!(a.len() >= r * k && b.len() >= k * c && out.len() >= r * c);
    let b = &b[..k * c];
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * c..(i + 1) * c];
        let mut j = 0;
        while j + 4 <= c {
            let mut acc = [T::zero(); 4];
            for (&ail, b_row) in a_row.iter().zip(b.chunks_exact(c)) {
                let bj = &b_row[j..j + 4];
                for q in 0..4 {
                    acc[q] = acc[q] + ail * bj[q];
                }
            }
            out_row[j..j + 4].copy_from_slice(&acc);
            j += 4;
        }
        for (jj, o) in out_row.iter_mut().enumerate().skip(j) {
            let mut acc = T::zero();
            for (&ail, b_row) in a_row.iter().zip(b.chunks_exact(c)) {
                acc = acc + ail * b_row[jj];
            }
            *o = acc;
        }
    }
}

/// `out = aᵀ · b` with `a: k × r`, `b: k × c`.
///
/// Each entry is accumulated over `l = 0..k` in order, starting from zero.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], k: usize, r: usize, c: usize, out: &mut [T]) {
    debug_assert!(a.len() >= k * r && b.len() >= k * c && out.len() >= r * c);
    let (a, b) = (&a[..k * r], &b[..k * c]);
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        let mut j = 0;
        while j + 4 <= c {
            let mut acc = [T::zero(); 4];
            for (a_row, b_row) in a.chunks_exact(r).zip(b.chunks_exact(c)) {
                let ali = a_row[i];
                let bj = &b_row[j..j + 4];
                for q in 0..4 {
                    acc[q] = acc[q] + ali * bj[q];
                }
            }
            out_row[j..j + 4].copy_from_slice(&acc);
            j += 4;
        }
        for (jj, o) in out_row.iter_mut().enumerate().skip(j) {
            let mut acc = T::zero();
            for (a_row, b_row) in a.chunks_exact(r).zip(b.chunks_exact(c)) {
                acc = acc + a_row[i] * b_row[jj];
            }
            *o = acc;
        }
    }
}

/// Replaces `a` (n × n) by `½(a + aᵀ)`. The result is exactly symmetric.
pub fn symmetrize<T: Real>(a: &mut [T], n: usize) {
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let s = (a[i * n + j] + a[j * n + i]) * half;
            a[i * n + j] = s;
            a[j * n + i] = s;
        }
    }
}

/// In-place Cholesky factorization `a = L Lᵀ`. On success the lower triangle
/// holds `L` and the strict upper triangle is zeroed. Returns `false` if `a`
/// is not (numerically) positive definite.
pub fn cholesky<T: Real>(a: &mut [T], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d = d - a[j * n + k] * a[j * n + k];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s = s - a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for i in (j + 1)..n {
            a[j * n + i] = T::zero();
        }
    }
    true
}

/// Solves `L Lᵀ x = b` in place given the factor from [`cholesky`].
pub fn cholesky_solve<T: Real>(l: &[T], n: usize, b: &mut [T]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s = s - l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s = s - l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
/// Intended for the small control blocks of stage costs.
pub fn min_eigenvalue_sym<T: Real>(a: &[T], n: usize) -> T {
    if n == 0 {
        return T::infinity();
    }
    let mut m = a.to_vec();
    symmetrize(&mut m, n);
    let tiny = T::epsilon() * T::epsilon();
    for _sweep in 0..64 {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off = off + m[i * n + j] * m[i * n + j];
            }
        }
        if off <= tiny {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).fold(T::infinity(), T::min)
}

#[inline]
pub fn all_finite<T: Real>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_roundtrip() {
        let a: [f64; 9] = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let mut l = a;
        assert!(cholesky(&mut l, 3));
        let mut llt = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                llt[i * 3 + j] = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
            }
        }
        for (x, y) in a.iter().zip(&llt) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut b: [f64; 3] = [1.0, -2.0, 0.5];
        cholesky_solve(&l, 3, &mut b);
        let mut r = [0.0; 3];
        matvec(&a, &b, 3, 3, &mut r);
        assert!((r[0] - 1.0).abs() < 1e-12 && (r[1] + 2.0).abs() < 1e-12 && (r[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = [1.0, 2.0, 2.0, 1.0];
        assert!(!cholesky(&mut a, 2));
        let mut z = [0.0f64];
        assert!(!cholesky(&mut z, 1));
    }

    #[test]
    fn jacobi_min_eigenvalue() {
        // eigenvalues 1 and 3
        let a = [2.0, 1.0, 1.0, 2.0];
        assert!((min_eigenvalue_sym(&a, 2) - 1.0f64).abs() < 1e-12);
        let d = [5.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 7.0];
        assert_eq!(min_eigenvalue_sym(&d, 3), -2.0f64);
    }

    #[test]
    fn transposed_products() {
        // a: 2x3
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = [1.0, -1.0];
        let mut out = [0.0; 3];
        matvec_t(&a, &x, 2, 3, &mut out);
        assert_eq!(out, [-3.0, -3.0, -3.0]);
        let mut ata = [0.0; 9];
        matmul_tn(&a, &a, 2, 3, 3, &mut ata);
        assert_eq!(ata, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }
}
