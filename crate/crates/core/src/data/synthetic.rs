use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{KnownPair, LabelSet, ModalityDataset, PairSet};
use crate::error::{Error, Result};
use crate::rng;

fn default_spread_ratio() -> f64 {
    2.0
}

/// Parameters of a planted multi-modal mixture.
///
/// Each latent object belongs to one of `clusters` latent clusters. Every
/// modality draws its own cluster centres in its own feature space and its
/// own overall scale; the per-cluster spread factors are shared by all
/// modalities, so a cluster's local structure is the same across modalities
/// up to scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_modalities: usize,
    pub clusters: usize,
    pub samples_per_modality: Vec<usize>,
    pub dims_per_modality: Vec<usize>,
    /// Distance between cluster centres divided by the per-dimension
    /// standard deviation of the widest cluster.
    pub cluster_separation: f64,
    pub pair_fraction: f64,
    pub seed: u64,
    /// Ratio between the spreads of consecutive clusters (sorted by spread).
    #[serde(default = "default_spread_ratio")]
    pub spread_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

impl SyntheticSpec {
    /// Two-modality instance with equal sample counts and dimensions.
    pub fn planted(clusters: usize, samples: usize, dim: usize, separation: f64, seed: u64) -> Self {
        Self {
            num_modalities: 2,
            clusters,
            samples_per_modality: vec![samples; 2],
            dims_per_modality: vec![dim; 2],
            cluster_separation: separation,
            pair_fraction: 0.0,
            seed,
            spread_ratio: default_spread_ratio(),
            names: None,
        }
    }

    pub fn modality_names(&self) -> Vec<String> {
        match &self.names {
            Some(n) => n.clone(),
            None => (0..self.num_modalities).map(|m| format!("m{m}")).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.num_modalities < 2 {
            return bad(format!("need at least 2 modalities, got {}", self.num_modalities));
        }
        if self.clusters == 0 {
            return bad("clusters must be >= 1".into());
        }
        if self.samples_per_modality.len() != self.num_modalities
            || self.dims_per_modality.len() != self.num_modalities
        {
            return bad("per-modality lists must have num_modalities entries".into());
        }
        if let Some(n) = &self.names {
            if n.len() != self.num_modalities {
                return bad("names must have num_modalities entries".into());
            }
        }
        if let Some(&n) = self.samples_per_modality.iter().find(|&&n| n < self.clusters) {
            return bad(format!("{n} samples cannot hold {} clusters", self.clusters));
        }
        if self.dims_per_modality.contains(&0) {
            return bad("dimensions must be >= 1".into());
        }
        if !(self.cluster_separation >= 0.0 && self.cluster_separation.is_finite()) {
            return bad(format!("invalid separation {}", self.cluster_separation));
        }
        if !(0.0..=1.0).contains(&self.pair_fraction) {
            return bad(format!("pair_fraction {} outside [0, 1]", self.pair_fraction));
        }
        if !(self.spread_ratio >= 1.0 && self.spread_ratio.is_finite()) {
            return bad(format!("spread_ratio must be >= 1, got {}", self.spread_ratio));
        }
        Ok(())
    }
}

/// The planted structure behind a synthetic instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `correspondence[m][i]` is the latent object rendered by sample `i`
    /// of modality `m`.
    pub correspondence: Vec<Vec<usize>>,
    /// Latent cluster of each latent object.
    pub cluster_of: Vec<usize>,
}

impl GroundTruth {
    pub fn object(&self, modality: usize, index: usize) -> usize {
        self.correspondence[modality][index]
    }

    pub fn cluster(&self, modality: usize, index: usize) -> usize {
        self.cluster_of[self.object(modality, index)]
    }

    /// Planted cluster of every sample of one modality.
    pub fn clusters_of_modality(&self, modality: usize) -> Vec<usize> {
        self.correspondence[modality]
            .iter()
            .map(|&o| self.cluster_of[o])
            .collect()
    }

    /// Restricts to per-modality column selections (as produced by
    /// `ModalityDataset::subset`).
    pub fn subset(&self, columns: &[Vec<usize>]) -> Self {
        Self {
            correspondence: self
                .correspondence
                .iter()
                .zip(columns)
                .map(|(objs, cols)| cols.iter().map(|&c| objs[c]).collect())
                .collect(),
            cluster_of: self.cluster_of.clone(),
        }
    }
}

fn unit_directions<R: Rng>(rng: &mut R, d: usize, k: usize) -> Array2<f64> {
    let mut u = Array2::from_shape_fn((d, k), |_| rng.sample::<f64, _>(StandardNormal));
    if d >= k {
        // Gram-Schmidt: orthonormal centres put every pair at the same distance.
        for c in 0..k {
            for p in 0..c {
                let proj = u.column(c).dot(&u.column(p));
                let prev: Array1<f64> = u.column(p).to_owned();
                u.column_mut(c).scaled_add(-proj, &prev);
            }
            let norm = u.column(c).dot(&u.column(c)).sqrt();
            u.column_mut(c).mapv_inplace(|v| v / norm);
        }
    } else {
        for c in 0..k {
            let norm = u.column(c).dot(&u.column(c)).sqrt().max(1e-12);
            u.column_mut(c).mapv_inplace(|v| v / norm);
        }
    }
    u
}

/// Draws a planted instance. Pure function of `spec`.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(Vec<ModalityDataset>, PairSet, GroundTruth)> {
    spec.validate()?;
    let k = spec.clusters;
    let objects = *spec.samples_per_modality.iter().max().unwrap_or(&0);
    let cluster_of: Vec<usize> = (0..objects).map(|o| o % k).collect();

    let mut spreads: Vec<f64> = (0..k)
        .map(|c| spec.spread_ratio.powf(c as f64 - (k as f64 - 1.0) / 2.0))
        .collect();
    spreads.shuffle(&mut rng::seeded(spec.seed, 0x5072));
    let widest = spreads.iter().cloned().fold(0.0, f64::max);

    // Modality m renders the first N_m objects of a shared priority order,
    // so two modalities always share min(N_m, N_m') objects.
    let mut priority: Vec<usize> = (0..objects).collect();
    priority.shuffle(&mut rng::seeded(spec.seed, 0x0B1E));

    let names = spec.modality_names();
    let mut datasets = Vec::with_capacity(spec.num_modalities);
    let mut correspondence = Vec::with_capacity(spec.num_modalities);
    for m in 0..spec.num_modalities {
        let mut rng = rng::seeded(spec.seed, 0x1000 + m as u64);
        let d = spec.dims_per_modality[m];
        let n = spec.samples_per_modality[m];
        let scale: f64 = 2f64.powf(rng.random_range(-2.0..2.0));
        let radius = spec.cluster_separation * scale * widest / std::f64::consts::SQRT_2;
        let centres = unit_directions(&mut rng, d, k) * radius;

        let mut rendered: Vec<usize> = priority[..n].to_vec();
        rendered.shuffle(&mut rng);

        let mut x = Array2::zeros((d, n));
        for (j, &o) in rendered.iter().enumerate() {
            let c = cluster_of[o];
            let sd = scale * spreads[c];
            for r in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                x[[r, j]] = centres[[r, c]] + sd * noise;
            }
        }
        let width = (n.max(2) - 1).to_string().len();
        let ids = (0..n).map(|j| format!("{}_{j:0width$}", names[m])).collect();
        let labels: Vec<LabelSet> = rendered
            .iter()
            .map(|&o| LabelSet::from([format!("c{}", cluster_of[o])]))
            .collect();
        datasets.push(ModalityDataset::new(names[m].clone(), x, ids, Some(labels))?);
        correspondence.push(rendered);
    }

    let mut pairs = PairSet::new();
    for a in 0..spec.num_modalities {
        for b in a + 1..spec.num_modalities {
            let pos_b: BTreeMap<usize, usize> = correspondence[b]
                .iter()
                .enumerate()
                .map(|(j, &o)| (o, j))
                .collect();
            let mut common: Vec<(u64, usize, usize)> = correspondence[a]
                .iter()
                .enumerate()
                .filter_map(|(i, o)| {
                    pos_b
                        .get(o)
                        .map(|&j| (rng::derive(spec.seed ^ 0xA11, *o as u64), i, j))
                })
                .collect();
            common.sort();
            let keep = (spec.pair_fraction * common.len() as f64).round() as usize;
            for &(_, i, j) in common.iter().take(keep) {
                pairs.insert(KnownPair::new(a, i, b, j), &datasets)?;
            }
        }
    }

    Ok((
        datasets,
        pairs,
        GroundTruth {
            correspondence,
            cluster_of,
        },
    ))
}
