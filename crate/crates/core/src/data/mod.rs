//! Multi-modal datasets, known cross-modal pairs, and synthetic data with a
//! planted correspondence.
//!
//! Feature matrices are stored `d x N`: one column per sample.

mod io;
mod synthetic;

use std::collections::{BTreeSet, HashMap, HashSet};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

pub use io::{
    load_labels, load_manifest, load_matrix_csv, load_modality, load_pairs, read_ids,
    save_labels, save_matrix_csv, save_modality, save_pairs, write_ids, DatasetManifest,
    ManifestEntry,
};
pub use synthetic::{generate_synthetic, GroundTruth, SyntheticSpec};

pub type LabelSet = BTreeSet<String>;

/// One modality: a `d x N` feature matrix plus sample ids and optional labels.
#[derive(Debug, Clone)]
pub struct ModalityDataset {
    name: String,
    features: Array2<f64>,
    sample_ids: Vec<String>,
    labels: Option<Vec<LabelSet>>,
    index: HashMap<String, usize>,
}

impl PartialEq for ModalityDataset {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.features == other.features
            && self.sample_ids == other.sample_ids
            && self.labels == other.labels
    }
}

impl ModalityDataset {
    pub fn new(
        name: impl Into<String>,
        features: Array2<f64>,
        sample_ids: Vec<String>,
        labels: Option<Vec<LabelSet>>,
    ) -> Result<Self> {
        let name = name.into();
        let (d, n) = features.dim();
        if d == 0 || n == 0 {
            return Err(Error::Shape(format!(
                "modality {name:?} must have at least one row and one column, got {d}x{n}"
            )));
        }
        if sample_ids.len() != n {
            return Err(Error::Shape(format!(
                "modality {name:?} has {n} columns but {} sample ids",
                sample_ids.len()
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Shape(format!(
                    "modality {name:?} has {n} columns but {} label sets",
                    labels.len()
                )));
            }
        }
        if let Some(((r, c), v)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "modality {name:?} feature ({r}, {c}) = {v}"
            )));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, id) in sample_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    modality: name,
                    id: id.clone(),
                });
            }
        }
        Ok(Self {
            name,
            features,
            sample_ids,
            labels,
            index,
        })
    }

    /// Dataset with ids `"0".."N-1"` and no labels.
    pub fn unlabeled(name: impl Into<String>, features: Array2<f64>) -> Result<Self> {
        let ids = (0..features.ncols()).map(|i| i.to_string()).collect();
        Self::new(name, features, ids, None)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn labels(&self) -> Option<&[LabelSet]> {
        self.labels.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn with_labels(self, labels: Option<Vec<LabelSet>>) -> Result<Self> {
        Self::new(self.name, self.features, self.sample_ids, labels)
    }

    pub fn with_features(self, features: Array2<f64>) -> Result<Self> {
        Self::new(self.name, features, self.sample_ids, self.labels)
    }

    /// Copy holding only the given columns, in the given order.
    pub fn subset(&self, columns: &[usize]) -> Result<Self> {
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "column {bad} out of range for modality {:?} with {} samples",
                self.name,
                self.len()
            )));
        }
        let features = self.features.select(Axis(1), columns);
        let ids = columns.iter().map(|&c| self.sample_ids[c].clone()).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| columns.iter().map(|&c| l[c].clone()).collect());
        Self::new(self.name.clone(), features, ids, labels)
    }
}

/// A known cross-modal correspondence: sample `i` of modality `a` depicts
/// the same object as sample `j` of modality `b`. Stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KnownPair {
    pub a: usize,
    pub i: usize,
    pub b: usize,
    pub j: usize,
}

impl KnownPair {
    pub fn new(a: usize, i: usize, b: usize, j: usize) -> Self {
        if a <= b {
            Self { a, i, b, j }
        } else {
            Self {
                a: b,
                i: j,
                b: a,
                j: i,
            }
        }
    }
}

/// Set of known pairs. Empty for completely-unpaired data.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSet {
    pairs: Vec<KnownPair>,
}

impl PairSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a set, rejecting duplicates and out-of-range indices.
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = KnownPair>,
        datasets: &[ModalityDataset],
    ) -> Result<Self> {
        let mut set = Self::new();
        for p in pairs {
            set.insert(p, datasets)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, pair: KnownPair, datasets: &[ModalityDataset]) -> Result<()> {
        let pair = KnownPair::new(pair.a, pair.i, pair.b, pair.j);
        for (m, idx) in [(pair.a, pair.i), (pair.b, pair.j)] {
            let ds = datasets
                .get(m)
                .ok_or_else(|| Error::UnknownModality(format!("#{m}")))?;
            if idx >= ds.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample index {idx} out of range for modality {:?}",
                    ds.name()
                )));
            }
        }
        if pair.a == pair.b {
            return Err(Error::InvalidArgument(
                "a pair must join two different modalities".into(),
            ));
        }
        if self.pairs.contains(&pair) {
            return Err(Error::DuplicatePair(format!(
                "{}[{}] ~ {}[{}]",
                datasets[pair.a].name(),
                pair.i,
                datasets[pair.b].name(),
                pair.j
            )));
        }
        self.pairs.push(pair);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &KnownPair> {
        self.pairs.iter()
    }

    /// Pairs between `source` and `target` as `(source index, target index)`.
    pub fn between(&self, source: usize, target: usize) -> Vec<(usize, usize)> {
        self.pairs
            .iter()
            .filter_map(|p| {
                if p.a == source && p.b == target {
                    Some((p.i, p.j))
                } else if p.b == source && p.a == target {
                    Some((p.j, p.i))
                } else {
                    None
                }
            })
            .collect()
    }

    /// Re-indexes pairs after per-modality column selection. `maps[m][old]`
    /// gives the new index; pairs with a removed endpoint are dropped.
    pub fn reindex(&self, maps: &[Vec<Option<usize>>]) -> Self {
        let pairs = self
            .pairs
            .iter()
            .filter_map(|p| {
                let i = maps.get(p.a)?.get(p.i).copied().flatten()?;
                let j = maps.get(p.b)?.get(p.j).copied().flatten()?;
                Some(KnownPair::new(p.a, i, p.b, j))
            })
            .collect();
        Self { pairs }
    }

    /// Keeps a deterministic `fraction` of the pairs, ranked by a seeded hash.
    pub fn keep_fraction(&self, fraction: f64, seed: u64) -> Self {
        let mut ranked: Vec<(u64, KnownPair)> = self
            .pairs
            .iter()
            .map(|p| {
                let key = rng::derive(
                    seed,
                    rng::mix64(((p.a as u64) << 48) ^ ((p.i as u64) << 24) ^ p.b as u64)
                        ^ p.j as u64,
                );
                (key, *p)
            })
            .collect();
        ranked.sort();
        let keep = (fraction.clamp(0.0, 1.0) * ranked.len() as f64).round() as usize;
        Self {
            pairs: ranked.into_iter().take(keep).map(|(_, p)| p).collect(),
        }
    }
}

/// Removes `ceil(fraction * N)` uniformly chosen samples. Survivors keep
/// their original relative order.
pub fn drop_samples(dataset: &ModalityDataset, fraction: f64, seed: u64) -> Result<ModalityDataset> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "drop fraction must lie in [0, 1), got {fraction}"
        )));
    }
    let n = dataset.len();
    let remove = (fraction * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed, 0xD809));
    let removed: HashSet<usize> = order.into_iter().take(remove).collect();
    let keep: Vec<usize> = (0..n).filter(|i| !removed.contains(i)).collect();
    dataset.subset(&keep)
}

/// Whether two samples count as relevant to each other: their label sets
/// intersect.
pub fn labels_intersect(a: &LabelSet, b: &LabelSet) -> bool {
    a.iter().any(|l| b.contains(l))
}
