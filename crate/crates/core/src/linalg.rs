//! Small dense kernels for the latent-dimension matrices (q×q).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::scalar::Real;

/// Lower Cholesky factor of a symmetric matrix, `None` unless every pivot is
/// strictly positive and finite.
pub fn cholesky<T: Real>(a: ArrayView2<'_, T>) -> Option<Array2<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag = diag - l[(j, k)] * l[(j, k)];
        }
        if !(diag > T::zero()) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower<T: Real>(l: ArrayView2<'_, T>, b: ArrayView1<'_, T>) -> Array1<T> {
    let n = b.len();
    let mut x = Array1::<T>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s = s - l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose<T: Real>(l: ArrayView2<'_, T>, b: ArrayView1<'_, T>) -> Array1<T> {
    let n = b.len();
    let mut x = Array1::<T>::zeros(n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s = s - l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `A x = b` given the lower Cholesky factor of `A`.
pub fn cholesky_solve<T: Real>(l: ArrayView2<'_, T>, b: ArrayView1<'_, T>) -> Array1<T> {
    let y = solve_lower(l, b);
    solve_lower_transpose(l, y.view())
}

/// `A⁻¹` from the lower Cholesky factor of `A`; the result is exactly symmetric.
pub fn cholesky_inverse<T: Real>(l: ArrayView2<'_, T>) -> Array2<T> {
    let n = l.nrows();
    let mut inv = Array2::<T>::zeros((n, n));
    let mut e = Array1::<T>::zeros(n);
    for j in 0..n {
        e.fill(T::zero());
        e[j] = T::one();
        let col = cholesky_solve(l, e.view());
        inv.column_mut(j).assign(&col);
    }
    symmetrize(&mut inv);
    inv
}

pub fn symmetrize<T: Real>(a: &mut Array2<T>) {
    let n = a.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let m = (a[(i, j)] + a[(j, i)]) * half;
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Numerically stable `log Σ exp(x)`. Returns −∞ for an empty slice or when
/// every entry is −∞.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    if max == T::infinity() {
        return max;
    }
    let s: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Normalized weights `softmax(xs)` computed through [`log_sum_exp`].
pub fn softmax<T: Real>(xs: &[T]) -> (T, Vec<T>) {
    let lse = log_sum_exp(xs);
    let w = xs.iter().map(|&x| (x - lse).exp()).collect();
    (lse, w)
}

/// Weighted mean and (symmetrized) covariance of the rows of `points`.
pub fn weighted_moments<T: Real>(points: ArrayView2<'_, T>, w: &[T]) -> (Array1<T>, Array2<T>) {
    let q = points.ncols();
    let mut mean = Array1::<T>::zeros(q);
    for (row, &wk) in points.rows().into_iter().zip(w) {
        mean.scaled_add(wk, &row);
    }
    let mut cov = Array2::<T>::zeros((q, q));
    for (row, &wk) in points.rows().into_iter().zip(w) {
        if wk == T::zero() {
            continue;
        }
        let dev = &row - &mean;
        for a in 0..q {
            for b in 0..q {
                cov[(a, b)] = cov[(a, b)] + wk * dev[a] * dev[b];
            }
        }
    }
    symmetrize(&mut cov);
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_reconstructs() {
        let a: Array2<f64> = array![[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]];
        let l = cholesky(a.view()).unwrap();
        let back = l.dot(&l.t());
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let inv = cholesky_inverse(l.view());
        let eye = inv.dot(&a);
        for i in 0..3 {
            for j in 0..3 {
                let t: f64 = if i == j { 1.0 } else { 0.0 };
                assert!((eye[(i, j)] - t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 0.0], [0.0, -1e-9]];
        assert!(cholesky(a.view()).is_none());
        let z = Array2::<f64>::zeros((2, 2));
        assert!(cholesky(z.view()).is_none());
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let v = log_sum_exp(&[0.0, f64::NEG_INFINITY]);
        assert_eq!(v, 0.0);
    }
}
