//! Small dense helpers that ndarray does not provide without a LAPACK backend.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Solves `A X = B` for symmetric positive definite `A` via Cholesky.
pub fn cholesky_solve(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::Shape(format!(
            "cholesky_solve: A is {}x{}, B has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for p in 0..j {
                sum -= l[[i, p]] * l[[j, p]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Degenerate(format!(
                        "matrix is not positive definite (pivot {i} = {sum})"
                    )));
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    let mut x = b.to_owned();
    for col in 0..x.ncols() {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[[i, col]];
            for p in 0..i {
                s -= l[[i, p]] * x[[p, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut s = x[[i, col]];
            for p in i + 1..n {
                s -= l[[p, i]] * x[[p, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
    }
    Ok(x)
}

pub fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn squared_norm(a: ArrayView1<f64>) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub fn frobenius_sq(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Positive part `(|A| + A) / 2`.
pub fn positive_part(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|x| if x > 0.0 { x } else { 0.0 })
}

/// Negative part `(|A| - A) / 2`.
pub fn negative_part(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|x| if x < 0.0 { -x } else { 0.0 })
}

pub fn column_mean(points: ArrayView2<f64>) -> Array1<f64> {
    let n = points.ncols().max(1) as f64;
    points.sum_axis(ndarray::Axis(1)) / n
}

pub fn all_finite(a: ArrayView2<f64>) -> bool {
    a.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solves_spd_system() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let b = array![[1.0], [2.0]];
        let x = cholesky_solve(a.view(), b.view()).unwrap();
        let back = a.dot(&x);
        assert!((back[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((back[[1, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let b = array![[1.0], [1.0]];
        assert!(cholesky_solve(a.view(), b.view()).is_err());
    }

    #[test]
    fn parts_recombine() {
        let a = array![[1.5, -2.0], [0.0, -0.25]];
        let diff = positive_part(&a) - negative_part(&a);
        assert_eq!(diff, a);
    }
}
