use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{align_bins, binarize_all, grad_h_all, grad_z, shared_codes, total_objective, ModelState, TrainConfig};
use crate::data::{KnownPair, ModalityDataset, PairSet};
use crate::error::Result;
use crate::factorization::FactorState;
use crate::matching::build_permutation;
use crate::rng;

/// Largest accepted relative error between analytic and numeric gradients.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub seed: u64,
    /// `||analytic - numeric|| / ||numeric||` over all `H` entries.
    pub h_error: f64,
    /// Same over all `Z` entries.
    pub z_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.h_error <= GRADCHECK_TOLERANCE && self.z_error <= GRADCHECK_TOLERANCE
    }
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Random small two-modality instance: `d <= 5`, `N <= 12`, `k <= 3`, a
/// plan from the matching strategy plus a few known pairs, and fixed bins.
fn instance(seed: u64) -> Result<(ModelState, Vec<Array2<f64>>)> {
    let mut rng = rng::seeded(seed, 0x6C4E);
    let k = rng.random_range(2..=3);
    let b = 2;
    let mut datasets = Vec::new();
    let mut factors = Vec::new();
    for m in 0..2 {
        let d = rng.random_range(2..=5);
        let n = rng.random_range(6..=12);
        let x = Array2::from_shape_fn((d, n), |_| rng.random_range(-2.0..2.0));
        factors.push(FactorState {
            z: Array2::from_shape_fn((d, k), |_| rng.random_range(-1.0..1.0)),
            h: Array2::from_shape_fn((k, n), |_| rng.random_range(0.1..1.0)),
        });
        datasets.push(ModalityDataset::unlabeled(format!("m{m}"), x)?);
    }
    let pairs = PairSet::from_pairs(
        (0..2).map(|t| KnownPair::new(0, t, 1, t + 1)),
        &datasets,
    )?;
    let plan = build_permutation(&datasets, &factors, &pairs, 3, 1.0)?;
    let reference = if datasets[1].len() > datasets[0].len() { 1 } else { 0 };
    let mut bins = binarize_all(&factors, b, seed)?;
    align_bins(&mut bins, &plan, reference);
    let mut config = TrainConfig::new(k, b);
    config.lambda = rng.random_range(0.1..2.0);
    let codes = shared_codes(&bins, &plan, reference, config.lambda)?;
    let state = ModelState {
        config,
        names: datasets.iter().map(|d| d.name().to_string()).collect(),
        factors,
        plan,
        reference,
        reference_ids: datasets[reference].sample_ids().to_vec(),
        bins,
        codes,
        scalers: None,
        trace: Vec::new(),
    };
    Ok((state, datasets.into_iter().map(|d| d.features().clone()).collect()))
}

fn numeric(state: &mut ModelState, xs: &[ArrayView2<f64>], entry: impl Fn(&mut ModelState) -> &mut f64) -> Result<f64> {
    let orig = *entry(state);
    *entry(state) = orig + STEP;
    let up = total_objective(state, xs)?.total;
    *entry(state) = orig - STEP;
    let down = total_objective(state, xs)?.total;
    *entry(state) = orig;
    Ok((up - down) / (2.0 * STEP))
}

/// Compares analytic `H` and `Z` gradients with central differences of
/// the total objective (plan and bins fixed). `perturb` scales the analytic
/// gradients by `1 + perturb` as a negative control.
pub fn gradient_check(seed: u64, perturb: f64) -> Result<GradCheck> {
    let (mut state, features) = instance(seed)?;
    let xs: Vec<ArrayView2<f64>> = features.iter().map(|x| x.view()).collect();
    let scale = 1.0 + perturb;

    let mut h_analytic = Vec::new();
    let mut h_numeric = Vec::new();
    let grads = grad_h_all(&state, &xs)?;
    for m in 0..2 {
        let (k, n) = state.factors[m].h.dim();
        for c in 0..k {
            for i in 0..n {
                h_analytic.push(grads[m][[c, i]] * scale);
                h_numeric.push(numeric(&mut state, &xs, |s| &mut s.factors[m].h[[c, i]])?);
            }
        }
    }

    let mut z_analytic = Vec::new();
    let mut z_numeric = Vec::new();
    for m in 0..2 {
        let g = grad_z(&state, &xs, m)?;
        let (d, k) = g.dim();
        for r in 0..d {
            for c in 0..k {
                z_analytic.push(g[[r, c]] * scale);
                z_numeric.push(numeric(&mut state, &xs, |s| &mut s.factors[m].z[[r, c]])?);
            }
        }
    }
    Ok(GradCheck {
        seed,
        h_error: relative_error(&h_analytic, &h_numeric),
        z_error: relative_error(&z_analytic, &z_numeric),
    })
}
