//! Joint optimization of factorization, cross-modal alignment and binary
//! codes.
//!
//! The objective is `L_c + L_s + lambda * L_q`: alignment loss over the
//! current plan, summed semi-NMF reconstruction losses, and the squared
//! distance between the shared code matrix `B` and every modality's
//! binarized indicators. Each outer iteration takes a projected gradient
//! step on every `H`, a gradient step on every `Z`, refreshes the plan,
//! and re-binarizes.

mod binarize;
mod gradcheck;
mod model_io;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{ModalityDataset, PairSet};
use crate::error::{Error, Result};
use crate::factorization::{hard_assign, seminmf_init, FactorState};
use crate::linalg::frobenius_sq;
use crate::matching::{
    alignment_loss, build_permutation, label_groups, majority_rows, match_by_labels,
    PermutationPlan,
};
use crate::rng;

pub use binarize::{
    align_bins, binarize_h, gather_codes, partners, rebinarize_h, sign_code, update_b, Binarization,
};
pub use gradcheck::{gradient_check, GradCheck, GRADCHECK_TOLERANCE};
pub use model_io::{load_model, save_model};

/// Halvings of the step before a non-improving step is accepted anyway.
const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Plan refreshed every iteration.
    Joint,
    /// Plan frozen after initialization.
    Nj,
    /// Plan taken from labels.
    Nc,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Joint => "joint",
            Mode::Nj => "nj",
            Mode::Nc => "nc",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "joint" => Ok(Mode::Joint),
            "nj" => Ok(Mode::Nj),
            "nc" => Ok(Mode::Nc),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode {s:?} (expected joint, nj or nc)"
            ))),
        }
    }
}

fn d_lambda() -> f64 {
    1.0
}
fn d_n_s() -> usize {
    5
}
fn d_cap() -> f64 {
    0.5
}
fn d_lr() -> f64 {
    1e-2
}
fn d_iters() -> usize {
    500
}
fn d_tol() -> f64 {
    1e-5
}
fn d_init_iters() -> usize {
    100
}
fn d_mode() -> Mode {
    Mode::Joint
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub b: usize,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_n_s")]
    pub n_s: usize,
    #[serde(default = "d_cap")]
    pub cap_fraction: f64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_iters")]
    pub max_iters: usize,
    #[serde(default = "d_tol")]
    pub rel_tol: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub standardize: bool,
    /// Semi-NMF rounds before the joint loop.
    #[serde(default = "d_init_iters")]
    pub init_iters: usize,
}

impl TrainConfig {
    pub fn new(k: usize, b: usize) -> Self {
        Self {
            k,
            b,
            lambda: d_lambda(),
            n_s: d_n_s(),
            cap_fraction: d_cap(),
            learning_rate: d_lr(),
            max_iters: d_iters(),
            rel_tol: d_tol(),
            seed: 0,
            mode: d_mode(),
            standardize: false,
            init_iters: d_init_iters(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.k < 2 {
            return bad(format!("k must be >= 2, got {}", self.k));
        }
        if self.b == 0 {
            return bad("b must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite nonnegative number, got {}", self.lambda));
        }
        if self.n_s == 0 {
            return bad("n_s must be >= 1".into());
        }
        if !(self.cap_fraction > 0.0 && self.cap_fraction <= 1.0) {
            return bad(format!("cap_fraction must lie in (0, 1], got {}", self.cap_fraction));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.rel_tol >= 0.0) {
            return bad(format!("rel_tol must be >= 0, got {}", self.rel_tol));
        }
        Ok(())
    }
}

/// Per-dimension affine map applied to features before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Scaler {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.ncols().max(1) as f64;
        let mean = x.sum_axis(Axis(1)) / n;
        let scale = Array1::from_iter(x.rows().into_iter().zip(&mean).map(|(row, &mu)| {
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        }));
        Self { mean, scale }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (mut row, (&mu, &s)) in out.rows_mut().into_iter().zip(self.mean.iter().zip(&self.scale)) {
            row.mapv_inplace(|v| (v - mu) / s);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub l_c: f64,
    pub l_s: f64,
    pub l_q: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    #[serde(flatten)]
    pub objective: Objective,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: TrainConfig,
    pub names: Vec<String>,
    pub factors: Vec<FactorState>,
    pub plan: PermutationPlan,
    /// Modality whose samples index the columns of `codes`.
    pub reference: usize,
    pub reference_ids: Vec<String>,
    pub bins: Vec<Binarization>,
    /// Shared code matrix `B`, `b x N_ref`.
    pub codes: Array2<u8>,
    pub scalers: Option<Vec<Scaler>>,
    pub trace: Vec<TraceRow>,
}

impl ModelState {
    pub fn num_modalities(&self) -> usize {
        self.factors.len()
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    /// Features of modality `m` in the space the model was fitted in.
    pub fn prepare(&self, m: usize, x: ArrayView2<f64>) -> Array2<f64> {
        match &self.scalers {
            Some(s) => s[m].apply(x),
            None => x.to_owned(),
        }
    }

    fn indicator_views(&self) -> Vec<ArrayView2<'_, f64>> {
        self.factors.iter().map(|f| f.h.view()).collect()
    }

    /// Binarizations at another code length, aligned to the reference
    /// modality through the stored plan.
    pub fn codebook(&self, b: usize) -> Result<Vec<Binarization>> {
        if b == self.config.b {
            return Ok(self.bins.clone());
        }
        let mut bins = binarize_all(&self.factors, b, self.config.seed)?;
        align_bins(&mut bins, &self.plan, self.reference);
        Ok(bins)
    }
}

fn shapes_match(x: ArrayView2<f64>, f: &FactorState, m: usize) -> Result<()> {
    f.check(x)
        .map_err(|e| Error::Shape(format!("modality #{m}: {e}")))
}

/// Quantization loss: every reference column against `B`, plus every
/// partnered column of the other modalities.
pub fn quantization_loss(
    codes: ArrayView2<u8>,
    bins: &[Binarization],
    plan: &PermutationPlan,
    reference: usize,
) -> Result<f64> {
    let n_ref = codes.ncols();
    let mut total = 0.0;
    for (m, bin) in bins.iter().enumerate() {
        if bin.bits() != codes.nrows() {
            return Err(Error::Shape(format!(
                "modality #{m} has {} bins but B has {} rows",
                bin.bits(),
                codes.nrows()
            )));
        }
        if m == reference && bin.assignment.len() != n_ref {
            return Err(Error::Shape(format!(
                "reference modality has {} samples but B has {n_ref} columns",
                bin.assignment.len()
            )));
        }
        for (r, p) in partners(plan, reference, m, n_ref).iter().enumerate() {
            if let Some(j) = p {
                let hot = bin.assignment[*j];
                total += codes
                    .column(r)
                    .iter()
                    .enumerate()
                    .map(|(t, &v)| (v as f64 - (t == hot) as u8 as f64).powi(2))
                    .sum::<f64>();
            }
        }
    }
    Ok(total)
}

/// `(L_c, L_s, L_q, total)` on prepared features `xs`.
pub fn total_objective(state: &ModelState, xs: &[ArrayView2<f64>]) -> Result<Objective> {
    if xs.len() != state.num_modalities() {
        return Err(Error::Shape(format!(
            "{} feature matrices for {} modalities",
            xs.len(),
            state.num_modalities()
        )));
    }
    let mut l_s = 0.0;
    for (m, (x, f)) in xs.iter().zip(&state.factors).enumerate() {
        shapes_match(*x, f, m)?;
        l_s += frobenius_sq((x - &f.z.dot(&f.h)).view());
    }
    let l_c = alignment_loss(&state.plan, &state.indicator_views())?;
    let l_q = quantization_loss(state.codes.view(), &state.bins, &state.plan, state.reference)?;
    let total = l_c + l_s + state.config.lambda * l_q;
    Ok(Objective { l_c, l_s, l_q, total })
}

fn smooth_part(factors: &[FactorState], plan: &PermutationPlan, xs: &[ArrayView2<f64>]) -> Result<f64> {
    let h: Vec<ArrayView2<f64>> = factors.iter().map(|f| f.h.view()).collect();
    let l_s: f64 = xs
        .iter()
        .zip(factors)
        .map(|(x, f)| frobenius_sq((x - &f.z.dot(&f.h)).view()))
        .sum();
    Ok(l_s + alignment_loss(plan, &h)?)
}

fn grad_h_parts(factors: &[FactorState], plan: &PermutationPlan, xs: &[ArrayView2<f64>]) -> Vec<Array2<f64>> {
    let mut grads: Vec<Array2<f64>> = xs
        .iter()
        .zip(factors)
        .map(|(x, f)| f.z.t().dot(&(f.z.dot(&f.h) - x)) * 2.0)
        .collect();
    for block in &plan.blocks {
        for p in &block.aligned {
            let diff = factors[block.source].h[[p.source_cluster, p.i]]
                - factors[block.target].h[[p.target_cluster, p.j]];
            grads[block.source][[p.source_cluster, p.i]] += 2.0 * diff;
            grads[block.target][[p.target_cluster, p.j]] -= 2.0 * diff;
        }
    }
    grads
}

/// Gradient of the objective with respect to every `H^m`, plan and bins
/// held fixed.
pub fn grad_h_all(state: &ModelState, xs: &[ArrayView2<f64>]) -> Result<Vec<Array2<f64>>> {
    for (m, (x, f)) in xs.iter().zip(&state.factors).enumerate() {
        shapes_match(*x, f, m)?;
    }
    state
        .plan
        .check(&state.factors.iter().map(|f| f.h.dim()).collect::<Vec<_>>())?;
    Ok(grad_h_parts(&state.factors, &state.plan, xs))
}

/// Row `c` of the gradient with respect to `H^m`.
pub fn grad_h(state: &ModelState, xs: &[ArrayView2<f64>], c: usize, m: usize) -> Result<Array1<f64>> {
    let grads = grad_h_all(state, xs)?;
    let g = grads
        .get(m)
        .ok_or_else(|| Error::InvalidArgument(format!("no modality #{m}")))?;
    if c >= g.nrows() {
        return Err(Error::InvalidArgument(format!("no cluster {c}")));
    }
    Ok(g.row(c).to_owned())
}

/// `2 (Z H - X) H^T` for modality `m`.
pub fn grad_z(state: &ModelState, xs: &[ArrayView2<f64>], m: usize) -> Result<Array2<f64>> {
    let f = state
        .factors
        .get(m)
        .ok_or_else(|| Error::InvalidArgument(format!("no modality #{m}")))?;
    let x = xs
        .get(m)
        .ok_or_else(|| Error::InvalidArgument(format!("no features for modality #{m}")))?;
    shapes_match(*x, f, m)?;
    Ok((f.z.dot(&f.h) - x).dot(&f.h.t()) * 2.0)
}

fn binarize_all(factors: &[FactorState], b: usize, seed: u64) -> Result<Vec<Binarization>> {
    factors
        .iter()
        .enumerate()
        .map(|(m, f)| binarize_h(f.h.view(), b, rng::derive(seed, 0xB100 + m as u64)))
        .collect()
}

fn shared_codes(bins: &[Binarization], plan: &PermutationPlan, reference: usize, lambda: f64) -> Result<Array2<u8>> {
    let n_ref = bins[reference].assignment.len();
    let gathered: Vec<Array2<u8>> = bins
        .iter()
        .enumerate()
        .map(|(m, bin)| gather_codes(bin.codes().view(), &partners(plan, reference, m, n_ref)))
        .collect();
    update_b(&gathered.iter().map(|g| g.view()).collect::<Vec<_>>(), lambda)
}

fn label_plan(datasets: &[ModalityDataset], pairs: &PairSet, factors: &[FactorState], k: usize) -> Result<PermutationPlan> {
    let plan = match_by_labels(datasets, pairs)?;
    let (names, groups) = label_groups(datasets)?;
    let maps: Vec<Vec<usize>> = groups
        .iter()
        .zip(factors)
        .map(|(g, f)| majority_rows(g, &hard_assign(f.h.view()), names.len(), k))
        .collect();
    Ok(plan.map_clusters(&maps))
}

fn check_finite(obj: &Objective, iter: usize) -> Result<()> {
    if obj.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "objective is not finite at iteration {iter}: L_c={}, L_s={}, L_q={}",
            obj.l_c, obj.l_s, obj.l_q
        )))
    }
}

/// Projected step on every `H` along `-grad`, halving the step until the
/// smooth part of the objective does not increase.
fn step_h(factors: &mut [FactorState], plan: &PermutationPlan, xs: &[ArrayView2<f64>], lr: f64) -> Result<()> {
    let before = smooth_part(factors, plan, xs)?;
    let grads = grad_h_parts(factors, plan, xs);
    let old: Vec<Array2<f64>> = factors.iter().map(|f| f.h.clone()).collect();
    let mut step = lr;
    for attempt in 0..=MAX_HALVINGS {
        for ((f, h0), g) in factors.iter_mut().zip(&old).zip(&grads) {
            f.h = h0 - &(g * step);
            f.h.mapv_inplace(|v| v.max(0.0));
        }
        if attempt == MAX_HALVINGS || smooth_part(factors, plan, xs)? <= before {
            break;
        }
        step *= 0.5;
    }
    Ok(())
}

fn step_z(factors: &mut [FactorState], xs: &[ArrayView2<f64>], lr: f64) {
    for (f, x) in factors.iter_mut().zip(xs) {
        let loss = |z: &Array2<f64>, h: &Array2<f64>| frobenius_sq((x - &z.dot(h)).view());
        let before = loss(&f.z, &f.h);
        let grad = (f.z.dot(&f.h) - x).dot(&f.h.t()) * 2.0;
        let z0 = f.z.clone();
        let mut step = lr;
        for attempt in 0..=MAX_HALVINGS {
            f.z = &z0 - &(&grad * step);
            if attempt == MAX_HALVINGS || loss(&f.z, &f.h) <= before {
                break;
            }
            step *= 0.5;
        }
    }
}

/// Runs the full optimization. Deterministic given `config.seed`.
pub fn train(datasets: &[ModalityDataset], known_pairs: &PairSet, config: &TrainConfig) -> Result<ModelState> {
    config.validate()?;
    if datasets.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 modalities, got {}",
            datasets.len()
        )));
    }
    for d in datasets {
        if d.len() < config.k || d.len() < config.b {
            return Err(Error::InvalidArgument(format!(
                "modality {:?} has {} samples, fewer than k = {} or b = {}",
                d.name(),
                d.len(),
                config.k,
                config.b
            )));
        }
    }
    let scalers: Option<Vec<Scaler>> = config
        .standardize
        .then(|| datasets.iter().map(|d| Scaler::fit(d.features().view())).collect());
    let features: Vec<Array2<f64>> = datasets
        .iter()
        .enumerate()
        .map(|(m, d)| match &scalers {
            Some(s) => s[m].apply(d.features().view()),
            None => d.features().clone(),
        })
        .collect();
    let xs: Vec<ArrayView2<f64>> = features.iter().map(|x| x.view()).collect();
    let prepared: Vec<ModalityDataset> = datasets
        .iter()
        .zip(&features)
        .map(|(d, x)| d.clone().with_features(x.clone()))
        .collect::<Result<_>>()?;

    let mut factors = xs
        .iter()
        .enumerate()
        .map(|(m, x)| seminmf_init(*x, config.k, rng::derive(config.seed, m as u64), config.init_iters))
        .collect::<Result<Vec<_>>>()?;
    let make_plan = |factors: &[FactorState]| match config.mode {
        Mode::Nc => label_plan(&prepared, known_pairs, factors, config.k),
        _ => build_permutation(&prepared, factors, known_pairs, config.n_s, config.cap_fraction),
    };
    let mut plan = make_plan(&factors)?;

    let reference = (0..datasets.len())
        .fold(0, |best, m| if datasets[m].len() > datasets[best].len() { m } else { best });
    let mut bins = binarize_all(&factors, config.b, config.seed)?;
    align_bins(&mut bins, &plan, reference);
    let codes = shared_codes(&bins, &plan, reference, config.lambda)?;

    let mut state = ModelState {
        config: config.clone(),
        names: datasets.iter().map(|d| d.name().to_string()).collect(),
        factors: Vec::new(),
        plan: plan.clone(),
        reference,
        reference_ids: datasets[reference].sample_ids().to_vec(),
        bins,
        codes,
        scalers,
        trace: Vec::new(),
    };
    state.factors = factors.clone();
    let mut objective = total_objective(&state, &xs)?;
    check_finite(&objective, 0)?;
    state.trace.push(TraceRow { iter: 0, objective });

    for iter in 1..=config.max_iters {
        step_h(&mut factors, &plan, &xs, config.learning_rate)?;
        step_z(&mut factors, &xs, config.learning_rate);
        if config.mode == Mode::Joint {
            plan = make_plan(&factors)?;
        }
        let mut bins = factors
            .iter()
            .zip(&state.bins)
            .map(|(f, prev)| rebinarize_h(f.h.view(), prev))
            .collect::<Result<Vec<_>>>()?;
        align_bins(&mut bins, &plan, reference);
        state.codes = shared_codes(&bins, &plan, reference, config.lambda)?;
        state.bins = bins;
        state.plan = plan.clone();
        state.factors = factors.clone();

        let next = total_objective(&state, &xs)?;
        check_finite(&next, iter)?;
        state.trace.push(TraceRow { iter, objective: next });
        let change = (objective.total - next.total).abs() / objective.total.abs().max(f64::MIN_POSITIVE);
        objective = next;
        if change < config.rel_tol {
            break;
        }
    }
    Ok(state)
}

/// Fraction of aligned pairs whose endpoints carry different reference
/// labels (e.g. planted clusters). `None` for an empty plan.
pub fn alignment_error(plan: &PermutationPlan, truth: &[Vec<usize>]) -> Option<f64> {
    let mut total = 0usize;
    let mut wrong = 0usize;
    for block in &plan.blocks {
        for p in &block.aligned {
            total += 1;
            if truth[block.source][p.i] != truth[block.target][p.j] {
                wrong += 1;
            }
        }
    }
    (total > 0).then(|| wrong as f64 / total as f64)
}
