//! Lloyd's k-means with k-means++ / uniform seeding, a single-point
//! refinement pass, and best-of-n restarts.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::squared_distance;
use crate::rng;

/// Restarts used by [`kmeans`].
pub const DEFAULT_RESTARTS: usize = 10;

/// Inputs with at most this many k-subsets are additionally seeded from
/// every k-subset of points.
const SUBSET_SEEDING_LIMIT: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    /// `d x k`, one centre per column.
    pub centers: Array2<f64>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
}

#[derive(Debug, Clone)]
pub struct KMeans {
    k: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
}

impl KMeans {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            seed: 0,
            max_iters: 100,
            restarts: DEFAULT_RESTARTS,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts.max(1);
        self
    }

    /// Clusters the columns of `points`. Keeps the restart with the lowest
    /// inertia (earliest on ties).
    pub fn fit(&self, points: ArrayView2<f64>) -> Result<KMeansResult> {
        let n = points.ncols();
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if self.k > n {
            return Err(Error::InvalidArgument(format!(
                "k = {} exceeds the number of points {n}",
                self.k
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        let mut best: Option<KMeansResult> = None;
        let mut keep = |res: KMeansResult| {
            if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
                best = Some(res);
            }
        };
        for r in 0..self.restarts {
            keep(self.run(points, r as u64).0);
        }
        if binomial(n, self.k) <= SUBSET_SEEDING_LIMIT {
            let mut subset: Vec<usize> = (0..self.k).collect();
            loop {
                let centers = points.select(Axis(1), &subset);
                keep(self.lloyd(points, centers).0);
                if !next_subset(&mut subset, n) {
                    break;
                }
            }
        }
        Ok(best.expect("at least one restart"))
    }

    /// Lloyd and Hartigan refinement from given `d x k` centres.
    pub fn refine(&self, points: ArrayView2<f64>, centers: Array2<f64>) -> Result<KMeansResult> {
        if centers.dim() != (points.nrows(), self.k) {
            return Err(Error::Shape(format!(
                "centres are {:?}, expected ({}, {})",
                centers.dim(),
                points.nrows(),
                self.k
            )));
        }
        if self.k > points.ncols() {
            return Err(Error::InvalidArgument(format!(
                "k = {} exceeds the number of points {}",
                self.k,
                points.ncols()
            )));
        }
        Ok(self.lloyd(points, centers).0)
    }

    /// One seeded Lloyd run. Also returns the inertia after every update.
    pub(crate) fn run(&self, points: ArrayView2<f64>, restart: u64) -> (KMeansResult, Vec<f64>) {
        let mut rng = rng::seeded(self.seed, 0x4B4D_0000 + restart);
        // even restarts use k-means++, odd ones uniform seeding
        let centers = if restart % 2 == 0 {
            plus_plus_init(points, self.k, &mut rng)
        } else {
            uniform_init(points, self.k, &mut rng)
        };
        self.lloyd(points, centers)
    }

    fn lloyd(&self, points: ArrayView2<f64>, mut centers: Array2<f64>) -> (KMeansResult, Vec<f64>) {
        let n = points.ncols();
        let mut assignment = assign(points, &centers).0;
        let mut history = vec![inertia_of(points, &centers, &assignment)];
        for _ in 0..self.max_iters {
            update_centers(points, &mut centers, &assignment);
            let (next, _) = assign(points, &centers);
            history.push(inertia_of(points, &centers, &next));
            let stable = next == assignment;
            assignment = next;
            if stable {
                break;
            }
        }
        if hartigan_refine(points, &mut centers, &mut assignment) {
            history.push(inertia_of(points, &centers, &assignment));
        }
        debug_assert_eq!(assignment.len(), n);
        let inertia = *history.last().unwrap();
        (
            KMeansResult {
                centers,
                assignment,
                inertia,
            },
            history,
        )
    }
}

/// `kmeans(points, k, seed, max_iters)` with [`DEFAULT_RESTARTS`] restarts.
pub fn kmeans(points: ArrayView2<f64>, k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    KMeans::new(k).seed(seed).max_iters(max_iters).fit(points)
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k.min(n - k)).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Advances a sorted k-subset of `0..n` in lexicographic order.
fn next_subset(subset: &mut [usize], n: usize) -> bool {
    let k = subset.len();
    for pos in (0..k).rev() {
        if subset[pos] < n - k + pos {
            subset[pos] += 1;
            for q in pos + 1..k {
                subset[q] = subset[q - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn plus_plus_init<R: Rng>(points: ArrayView2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let (d, n) = points.dim();
    let mut centers = Array2::zeros((d, k));
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centers.column_mut(0).assign(&points.column(first));
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.column(i), points.column(first)))
        .collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // all remaining points coincide with a centre
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centers.column_mut(c).assign(&points.column(pick));
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(squared_distance(points.column(i), points.column(pick)));
        }
    }
    centers
}

fn uniform_init<R: Rng>(points: ArrayView2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let picks = rand::seq::index::sample(rng, points.ncols(), k);
    points.select(Axis(1), &picks.into_vec())
}

/// Nearest centre per point (lowest index on ties) and the squared distance.
pub(crate) fn assign(points: ArrayView2<f64>, centers: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let k = centers.ncols();
    let mut labels = Vec::with_capacity(points.ncols());
    let mut dists = Vec::with_capacity(points.ncols());
    for p in points.axis_iter(Axis(1)) {
        let mut best = (0, f64::INFINITY);
        for c in 0..k {
            let dist = squared_distance(p, centers.column(c));
            if dist < best.1 {
                best = (c, dist);
            }
        }
        labels.push(best.0);
        dists.push(best.1);
    }
    (labels, dists)
}

fn update_centers(points: ArrayView2<f64>, centers: &mut Array2<f64>, assignment: &[usize]) {
    let (d, k) = centers.dim();
    let mut sums = Array2::<f64>::zeros((d, k));
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        sums.column_mut(c).scaled_add(1.0, &points.column(i));
        counts[c] += 1;
    }
    let mut taken = vec![false; points.ncols()];
    for c in 0..k {
        if counts[c] > 0 {
            let col = sums.column(c).mapv(|v| v / counts[c] as f64);
            centers.column_mut(c).assign(&col);
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            // re-seed with the point farthest from its assigned centre
            let far = (0..points.ncols())
                .filter(|&i| !taken[i])
                .map(|i| {
                    (
                        i,
                        squared_distance(points.column(i), centers.column(assignment[i])),
                    )
                })
                .fold(None::<(usize, f64)>, |acc, (i, dist)| match acc {
                    Some((_, best)) if best >= dist => acc,
                    _ => Some((i, dist)),
                });
            if let Some((i, _)) = far {
                taken[i] = true;
                centers.column_mut(c).assign(&points.column(i));
            }
        }
    }
}

/// Single-point moves that lower inertia once the means follow the move.
/// Lloyd-stable partitions are often not move-stable; this escapes many of
/// those local minima. Returns whether anything moved.
fn hartigan_refine(
    points: ArrayView2<f64>,
    centers: &mut Array2<f64>,
    assignment: &mut [usize],
) -> bool {
    let k = centers.ncols();
    let mut counts = vec![0usize; k];
    for &c in assignment.iter() {
        counts[c] += 1;
    }
    let mut moved_any = false;
    for _ in 0..1000 {
        let mut moved = false;
        for i in 0..points.ncols() {
            let from = assignment[i];
            if counts[from] <= 1 {
                continue;
            }
            let x = points.column(i);
            let nf = counts[from] as f64;
            let removal = nf / (nf - 1.0) * squared_distance(x, centers.column(from));
            let mut best = (from, 0.0);
            for to in 0..k {
                if to == from {
                    continue;
                }
                let nt = counts[to] as f64;
                let delta = nt / (nt + 1.0) * squared_distance(x, centers.column(to)) - removal;
                if delta < best.1 - 1e-12 * removal.max(1.0) {
                    best = (to, delta);
                }
            }
            if best.0 != from {
                let to = best.0;
                let nt = counts[to] as f64;
                let xf = x.to_owned();
                let mut cf = centers.column_mut(from);
                cf.zip_mut_with(&xf, |m, &v| *m = (*m * nf - v) / (nf - 1.0));
                let mut ct = centers.column_mut(to);
                ct.zip_mut_with(&xf, |m, &v| *m = (*m * nt + v) / (nt + 1.0));
                counts[from] -= 1;
                counts[to] += 1;
                assignment[i] = to;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    moved_any
}

fn inertia_of(points: ArrayView2<f64>, centers: &Array2<f64>, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| squared_distance(points.column(i), centers.column(c)))
        .sum()
}
