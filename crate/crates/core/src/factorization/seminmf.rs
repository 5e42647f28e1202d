//! Semi-nonnegative matrix factorization `X ~ Z H`, `H >= 0`.
//!
//! `Z` is solved in closed form and `H` follows the multiplicative rule
//! that splits `Z^T X` and `Z^T Z` into positive and negative parts; both
//! steps are non-increasing in `||X - Z H||_F^2`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::kmeans::kmeans;
use crate::linalg::{cholesky_solve, frobenius_sq, negative_part, positive_part};

/// Ridge added to `H H^T` in the `Z` solve, and to the multiplicative
/// update's denominator.
pub const RIDGE: f64 = 1e-8;

/// Offset added to the k-means indicator when seeding `H`.
const INDICATOR_OFFSET: f64 = 0.2;

/// Per-modality factors: `z` is `d x k` (latent centroids), `h` is `k x N`
/// (nonnegative soft assignments).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorState {
    pub z: Array2<f64>,
    pub h: Array2<f64>,
}

impl FactorState {
    pub fn k(&self) -> usize {
        self.h.nrows()
    }

    pub fn check(&self, x: ArrayView2<f64>) -> Result<()> {
        let (d, n) = x.dim();
        if self.z.nrows() != d || self.h.ncols() != n || self.z.ncols() != self.h.nrows() {
            return Err(Error::Shape(format!(
                "X is {d}x{n} but Z is {:?} and H is {:?}",
                self.z.dim(),
                self.h.dim()
            )));
        }
        Ok(())
    }
}

/// `||X - Z H||_F^2`.
pub fn seminmf_loss(x: ArrayView2<f64>, state: &FactorState) -> Result<f64> {
    state.check(x)?;
    Ok(frobenius_sq((&x - &state.z.dot(&state.h)).view()))
}

/// Column-wise argmax of `H`; ties go to the lowest cluster index.
pub fn hard_assign(h: ArrayView2<f64>) -> Vec<usize> {
    h.columns()
        .into_iter()
        .map(|col| {
            col.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &v)| {
                    if v > best.1 {
                        (c, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// `Z = X H^T (H H^T + eps I)^{-1}`.
pub(crate) fn solve_z(x: ArrayView2<f64>, h: &Array2<f64>) -> Result<Array2<f64>> {
    let k = h.nrows();
    let mut gram = h.dot(&h.t());
    for c in 0..k {
        gram[[c, c]] += RIDGE;
    }
    let rhs = h.dot(&x.t());
    Ok(cholesky_solve(gram.view(), rhs.view())?.reversed_axes())
}

pub(crate) fn multiplicative_h(x: ArrayView2<f64>, z: &Array2<f64>, h: &Array2<f64>) -> Array2<f64> {
    let a = z.t().dot(&x);
    let b = z.t().dot(z);
    let num = positive_part(&a) + negative_part(&b).dot(h);
    let den = negative_part(&a) + positive_part(&b).dot(h);
    let mut out = h.clone();
    ndarray::Zip::from(&mut out)
        .and(&num)
        .and(&den)
        .for_each(|hv, &n, &d| *hv *= (n / (d + RIDGE)).sqrt());
    out
}

/// Seeds `H` from k-means and runs `iters` alternating rounds.
pub fn seminmf_init(x: ArrayView2<f64>, k: usize, seed: u64, iters: usize) -> Result<FactorState> {
    seminmf_init_traced(x, k, seed, iters).map(|(s, _)| s)
}

/// As [`seminmf_init`], also returning the loss before the first `H`
/// update followed by the loss after every round.
pub fn seminmf_init_traced(
    x: ArrayView2<f64>,
    k: usize,
    seed: u64,
    iters: usize,
) -> Result<(FactorState, Vec<f64>)> {
    let n = x.ncols();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in [1, {n}]"
        )));
    }
    let clusters = kmeans(x, k, seed, 100)?;
    let mut h = Array2::from_elem((k, n), INDICATOR_OFFSET);
    for (i, &c) in clusters.assignment.iter().enumerate() {
        h[[c, i]] += 1.0;
    }
    let mut z = solve_z(x, &h)?;
    let mut losses = vec![frobenius_sq((&x - &z.dot(&h)).view())];
    if !losses[0].is_finite() {
        return Err(Error::NonFinite("semi-NMF initial loss".into()));
    }
    for round in 0..iters {
        if round > 0 {
            z = solve_z(x, &h)?;
        }
        h = multiplicative_h(x, &z, &h);
        let loss = frobenius_sq((&x - &z.dot(&h)).view());
        if !loss.is_finite() || h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("semi-NMF loss at round {round}")));
        }
        losses.push(loss);
    }
    Ok((FactorState { z, h }, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn scalar_loss() {
        let s = FactorState {
            z: array![[1.0]],
            h: array![[1.0]],
        };
        assert_eq!(seminmf_loss(array![[3.0]].view(), &s).unwrap(), 4.0);
    }

    #[test]
    fn exact_factorization_has_zero_loss() {
        let z = array![[1.0, -2.0], [0.5, 3.0]];
        let h = array![[1.0, 0.0, 2.0], [0.0, 1.5, 0.5]];
        let x = z.dot(&h);
        assert_eq!(seminmf_loss(x.view(), &FactorState { z, h }).unwrap(), 0.0);
    }

    #[test]
    fn loss_scales_quadratically() {
        let x = array![[1.0, -2.0], [3.0, 0.5]];
        let s = FactorState {
            z: Array2::zeros((2, 1)),
            h: Array2::zeros((1, 2)),
        };
        let base = seminmf_loss(x.view(), &s).unwrap();
        let doubled = seminmf_loss((&x * 2.0).view(), &s).unwrap();
        assert_eq!(doubled, 4.0 * base);
    }

    #[test]
    fn loss_rejects_shape_mismatch() {
        let s = FactorState {
            z: Array2::zeros((3, 2)),
            h: Array2::zeros((2, 4)),
        };
        assert!(seminmf_loss(Array2::zeros((3, 5)).view(), &s).is_err());
    }

    #[test]
    fn hard_assign_ties_and_max() {
        let h = array![[0.1, 0.5, 0.7], [0.9, 0.5, 0.2]];
        assert_eq!(hard_assign(h.view()), vec![1, 0, 0]);
    }

    #[test]
    fn hard_assign_matches_scan() {
        let mut rng = crate::rng::seeded(5, 5);
        let h = Array2::from_shape_fn((3, 20), |_| rng.random::<f64>());
        let got = hard_assign(h.view());
        for i in 0..20 {
            let mut best = 0;
            for c in 1..3 {
                if h[[c, i]] > h[[best, i]] {
                    best = c;
                }
            }
            assert_eq!(got[i], best);
        }
    }

    #[test]
    fn separable_toy_is_recovered() {
        // two clusters, zero noise: X = Z0 H0 with one-hot H0
        let z0 = array![[1.0, -3.0], [2.0, 0.5], [0.0, 4.0]];
        let h0 = array![[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]];
        let x = z0.dot(&h0);
        let (state, losses) = seminmf_init_traced(x.view(), 2, 0, 200).unwrap();
        assert!(losses.last().unwrap() <= &losses[0]);
        assert!(*losses.last().unwrap() <= 1e-6, "final loss {}", losses.last().unwrap());
        assert!(state.h.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_input() {
        let x = Array2::zeros((3, 5));
        let (state, losses) = seminmf_init_traced(x.view(), 2, 1, 10).unwrap();
        assert_eq!(*losses.last().unwrap(), 0.0);
        assert!(state.z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn monotone_on_random_input() {
        let mut rng = crate::rng::seeded(11, 3);
        let x = Array2::from_shape_fn((10, 40), |_| rng.random_range(-1.0..1.0));
        let (state, losses) = seminmf_init_traced(x.view(), 4, 3, 50).unwrap();
        assert_eq!(losses.len(), 51);
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
        assert!(state.h.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = crate::rng::seeded(2, 2);
        let x = Array2::from_shape_fn((4, 9), |_| rng.random_range(-2.0..2.0));
        let z = Array2::from_shape_fn((4, 3), |_| rng.random_range(-2.0..2.0));
        let h = Array2::from_shape_fn((3, 9), |_| rng.random_range(0.0..1.0));
        let perm = [2usize, 0, 1];
        let zp = z.select(ndarray::Axis(1), &perm);
        let hp = h.select(ndarray::Axis(0), &perm);
        let a = seminmf_loss(x.view(), &FactorState { z, h }).unwrap();
        let b = seminmf_loss(x.view(), &FactorState { z: zp, h: hp }).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn rejects_bad_k() {
        let x = Array2::zeros((2, 3));
        assert!(seminmf_init(x.view(), 0, 0, 1).is_err());
        assert!(seminmf_init(x.view(), 4, 0, 1).is_err());
    }
}
