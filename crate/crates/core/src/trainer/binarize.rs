use ndarray::{Array2, ArrayView2};
use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::KMeans;
use crate::matching::PermutationPlan;

/// Hard binarization of one modality's indicator matrix: `b` k-means
/// centres over the columns of `H` and each column's bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binarization {
    /// `k x b`.
    pub centers: Array2<f64>,
    pub assignment: Vec<usize>,
}

impl Binarization {
    pub fn bits(&self) -> usize {
        self.centers.ncols()
    }

    /// One-hot `b x N` matrix.
    pub fn codes(&self) -> Array2<u8> {
        let mut out = Array2::zeros((self.bits(), self.assignment.len()));
        for (i, &c) in self.assignment.iter().enumerate() {
            out[[c, i]] = 1;
        }
        out
    }

    /// Renames bin `old` to `relabel[old]`.
    pub fn permute(&self, relabel: &[usize]) -> Self {
        let mut centers = Array2::zeros(self.centers.dim());
        for (old, &new) in relabel.iter().enumerate() {
            centers.column_mut(new).assign(&self.centers.column(old));
        }
        Self {
            centers,
            assignment: self.assignment.iter().map(|&c| relabel[c]).collect(),
        }
    }
}

/// k-means with `b` centres over the columns of `h`.
pub fn binarize_h(h: ArrayView2<f64>, b: usize, seed: u64) -> Result<Binarization> {
    if b == 0 || b > h.ncols() {
        return Err(Error::InvalidArgument(format!(
            "code length {b} must lie in [1, {}] (number of samples)",
            h.ncols()
        )));
    }
    let fit = KMeans::new(b).seed(seed).max_iters(100).fit(h)?;
    Ok(Binarization {
        centers: fit.centers,
        assignment: fit.assignment,
    })
}

/// Re-binarizes an updated `H` starting from the previous bin centres, so
/// bins drift with `H` instead of being redrawn.
pub fn rebinarize_h(h: ArrayView2<f64>, previous: &Binarization) -> Result<Binarization> {
    let b = previous.bits();
    let fit = KMeans::new(b).max_iters(100).refine(h, previous.centers.clone())?;
    Ok(Binarization {
        centers: fit.centers,
        assignment: fit.assignment,
    })
}

/// `U = lambda * sum_m tilde_H^m`, `B = [U > 0]`.
pub fn update_b(tildes: &[ArrayView2<u8>], lambda: f64) -> Result<Array2<u8>> {
    let first = tildes
        .first()
        .ok_or_else(|| Error::InvalidArgument("no modality codes given".into()))?;
    let dim = first.dim();
    if let Some(t) = tildes.iter().find(|t| t.dim() != dim) {
        return Err(Error::Shape(format!(
            "code matrices differ in shape: {:?} vs {:?}",
            dim,
            t.dim()
        )));
    }
    let mut u = Array2::<f64>::zeros(dim);
    for t in tildes {
        u.zip_mut_with(t, |acc, &v| *acc += v as f64);
    }
    u.mapv_inplace(|v| lambda * v);
    Ok(sign_code(u.view()))
}

/// Elementwise 1 where the entry is strictly positive, else 0.
pub fn sign_code(u: ArrayView2<f64>) -> Array2<u8> {
    u.mapv(|v| (v > 0.0) as u8)
}

/// For every reference-modality column, the column of modality `m` it is
/// compared with: its known partner if any, else its first rank partner.
pub fn partners(plan: &PermutationPlan, reference: usize, m: usize, n_ref: usize) -> Vec<Option<usize>> {
    if m == reference {
        return (0..n_ref).map(Some).collect();
    }
    let mut out = vec![None; n_ref];
    if let Some(block) = plan.block(reference, m) {
        for p in block.aligned.iter().filter(|p| p.known) {
            out[p.i].get_or_insert(p.j);
        }
        for p in block.aligned.iter().filter(|p| !p.known) {
            out[p.i].get_or_insert(p.j);
        }
    }
    out
}

/// Gathers modality `m`'s codes onto the reference columns; columns with
/// no partner stay zero.
pub fn gather_codes(codes: ArrayView2<u8>, partners: &[Option<usize>]) -> Array2<u8> {
    let mut out = Array2::zeros((codes.nrows(), partners.len()));
    for (r, p) in partners.iter().enumerate() {
        if let Some(j) = p {
            out.column_mut(r).assign(&codes.column(*j));
        }
    }
    out
}

/// Renames the bins of every non-reference modality so that plan-aligned
/// pairs share bin labels as often as possible (maximum-weight matching on
/// the bin co-occurrence table).
pub fn align_bins(bins: &mut [Binarization], plan: &PermutationPlan, reference: usize) {
    let b = bins[reference].bits();
    for m in 0..bins.len() {
        if m == reference {
            continue;
        }
        let mut table = vec![vec![0i64; b]; b];
        if let Some(block) = plan.block(reference, m) {
            for p in &block.aligned {
                table[bins[m].assignment[p.j]][bins[reference].assignment[p.i]] += 1;
            }
        }
        let weights = Matrix::from_rows(table).expect("square table");
        let (_, relabel) = kuhn_munkres(&weights);
        bins[m] = bins[m].permute(&relabel);
    }
}
