//! Cluster-level cross-modal matching and per-class sample alignment.
//!
//! Each cluster is summarised by the sorted squared distances of its
//! `n_s` members nearest to the centroid. Two clusters from different
//! modalities match when these profiles agree after rescaling by the
//! ratio of squared centroid norms. Members of matched clusters are then
//! paired rank-for-rank by soft-assignment strength, and known pairs are
//! folded in on top.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{ModalityDataset, PairSet};
use crate::error::{Error, Result};
use crate::factorization::{hard_assign, FactorState};
use crate::linalg::{squared_distance, squared_norm};

/// Floor on the target centroid's squared norm in the scale ratio.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMatch {
    /// `(modality, cluster)`.
    pub source: (usize, usize),
    pub target: (usize, usize),
    pub score: f64,
}

/// One aligned sample pair of a plan block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub source_cluster: usize,
    pub target_cluster: usize,
    pub i: usize,
    pub j: usize,
    /// Taken from the known-pair set rather than rank alignment.
    pub known: bool,
}

/// Alignment from modality `source` into modality `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanBlock {
    pub source: usize,
    pub target: usize,
    pub matches: Vec<ClusterMatch>,
    pub aligned: Vec<AlignedPair>,
}

/// Per ordered modality pair alignment blocks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PermutationPlan {
    pub blocks: Vec<PlanBlock>,
}

impl PermutationPlan {
    pub fn block(&self, source: usize, target: usize) -> Option<&PlanBlock> {
        self.blocks
            .iter()
            .find(|b| b.source == source && b.target == target)
    }

    pub fn num_aligned(&self) -> usize {
        self.blocks.iter().map(|b| b.aligned.len()).sum()
    }

    /// Checks every aligned entry against the `k x N_m` indicator shapes.
    pub fn check(&self, shapes: &[(usize, usize)]) -> Result<()> {
        for block in &self.blocks {
            let (src, tgt) = match (shapes.get(block.source), shapes.get(block.target)) {
                (Some(s), Some(t)) => (*s, *t),
                _ => {
                    return Err(Error::Shape(format!(
                        "plan references modality pair ({}, {}) but only {} modalities exist",
                        block.source,
                        block.target,
                        shapes.len()
                    )))
                }
            };
            for p in &block.aligned {
                if p.source_cluster >= src.0
                    || p.target_cluster >= tgt.0
                    || p.i >= src.1
                    || p.j >= tgt.1
                {
                    return Err(Error::Shape(format!(
                        "aligned pair {p:?} out of range for blocks {src:?} -> {tgt:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rewrites cluster indices through `maps[modality][cluster]`.
    pub fn map_clusters(&self, maps: &[Vec<usize>]) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|b| PlanBlock {
                source: b.source,
                target: b.target,
                matches: b
                    .matches
                    .iter()
                    .map(|m| ClusterMatch {
                        source: (m.source.0, maps[m.source.0][m.source.1]),
                        target: (m.target.0, maps[m.target.0][m.target.1]),
                        score: m.score,
                    })
                    .collect(),
                aligned: b
                    .aligned
                    .iter()
                    .map(|p| AlignedPair {
                        source_cluster: maps[b.source][p.source_cluster],
                        target_cluster: maps[b.target][p.target_cluster],
                        ..*p
                    })
                    .collect(),
            })
            .collect();
        Self { blocks }
    }

    /// Inspection report with sample ids in place of indices.
    pub fn report(&self, datasets: &[ModalityDataset]) -> PlanReport {
        PlanReport {
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    let src = &datasets[b.source];
                    let tgt = &datasets[b.target];
                    BlockReport {
                        source: src.name().to_string(),
                        target: tgt.name().to_string(),
                        matches: b
                            .matches
                            .iter()
                            .map(|m| MatchReport {
                                source_cluster: m.source.1,
                                target_cluster: m.target.1,
                                score: m.score,
                            })
                            .collect(),
                        pairs: b
                            .aligned
                            .iter()
                            .map(|p| PairReport {
                                source_id: src.sample_ids()[p.i].clone(),
                                target_id: tgt.sample_ids()[p.j].clone(),
                                source_cluster: p.source_cluster,
                                target_cluster: p.target_cluster,
                                known: p.known,
                            })
                            .collect(),
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub blocks: Vec<BlockReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub source: String,
    pub target: String,
    pub matches: Vec<MatchReport>,
    pub pairs: Vec<PairReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub source_cluster: usize,
    pub target_cluster: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub source_id: String,
    pub target_id: String,
    pub source_cluster: usize,
    pub target_cluster: usize,
    pub known: bool,
}

fn profile_score(src: &[f64], src_norm: f64, tgt: &[f64], tgt_norm: f64) -> f64 {
    let alpha = src_norm / tgt_norm.max(NORM_FLOOR);
    src.iter()
        .zip(tgt)
        .map(|(p, q)| (p - alpha * q).powi(2))
        .sum()
}

/// Match score between two clusters given their centroids and their
/// nearest members, ascending by distance to the centroid.
pub fn cluster_match_score(
    z_c: ArrayView1<f64>,
    nbrs_c: &[ArrayView1<f64>],
    z_t: ArrayView1<f64>,
    nbrs_t: &[ArrayView1<f64>],
) -> Result<f64> {
    if nbrs_c.len() != nbrs_t.len() {
        return Err(Error::InvalidArgument(format!(
            "neighbour lists differ in length: {} vs {}",
            nbrs_c.len(),
            nbrs_t.len()
        )));
    }
    let src: Vec<f64> = nbrs_c.iter().map(|x| squared_distance(*x, z_c)).collect();
    let tgt: Vec<f64> = nbrs_t.iter().map(|x| squared_distance(*x, z_t)).collect();
    Ok(profile_score(&src, squared_norm(z_c), &tgt, squared_norm(z_t)))
}

/// Indices of the `n_s` members of `cluster` closest to `z`, ascending
/// (lower index first on ties). Short clusters are padded with their
/// farthest member.
pub fn nearest_of_centroid(
    features: ArrayView2<f64>,
    assignment: &[usize],
    cluster: usize,
    z: ArrayView1<f64>,
    n_s: usize,
) -> Result<Vec<usize>> {
    let mut members: Vec<(f64, usize)> = assignment
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == cluster)
        .map(|(i, _)| (squared_distance(features.column(i), z), i))
        .collect();
    if members.is_empty() {
        return Err(Error::Degenerate(format!("cluster {cluster} is empty")));
    }
    members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = members.iter().take(n_s).map(|m| m.1).collect();
    let last = *out.last().expect("non-empty");
    out.resize(n_s, last);
    Ok(out)
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 0 {
        0.5 * (values[mid - 1] + values[mid])
    } else {
        values[mid]
    }
}

/// Centroids and neighbour profiles of every cluster of one modality.
#[derive(Debug, Clone)]
pub struct ClusterProfiles {
    pub assignment: Vec<usize>,
    /// `None` for empty clusters.
    pub centroids: Vec<Option<Array1<f64>>>,
    profiles: Vec<Option<Vec<f64>>>,
}

impl ClusterProfiles {
    /// The centroid of cluster `c` is `Z` applied to the coordinate-wise
    /// median `H` column of its hard members, i.e. the cluster's typical
    /// reconstruction in data space.
    pub fn new(x: ArrayView2<f64>, state: &FactorState, n_s: usize) -> Result<Self> {
        state.check(x)?;
        if n_s == 0 {
            return Err(Error::InvalidArgument("n_s must be >= 1".into()));
        }
        let k = state.k();
        let assignment = hard_assign(state.h.view());
        let mut centroids = Vec::with_capacity(k);
        let mut profiles = Vec::with_capacity(k);
        for c in 0..k {
            let members: Vec<usize> = (0..assignment.len())
                .filter(|&i| assignment[i] == c)
                .collect();
            if members.is_empty() {
                centroids.push(None);
                profiles.push(None);
                continue;
            }
            let typical_h = Array1::from_shape_fn(k, |r| {
                median(members.iter().map(|&i| state.h[[r, i]]).collect())
            });
            let z = state.z.dot(&typical_h);
            let nearest = nearest_of_centroid(x, &assignment, c, z.view(), n_s)?;
            profiles.push(Some(
                nearest
                    .iter()
                    .map(|&i| squared_distance(x.column(i), z.view()))
                    .collect(),
            ));
            centroids.push(Some(z));
        }
        Ok(Self {
            assignment,
            centroids,
            profiles,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// `scores[c][c']`; infinite where either cluster is empty.
    pub fn scores(&self, target: &ClusterProfiles) -> Array2<f64> {
        Array2::from_shape_fn((self.k(), target.k()), |(c, t)| {
            match (
                &self.centroids[c],
                &self.profiles[c],
                &target.centroids[t],
                &target.profiles[t],
            ) {
                (Some(z), Some(p), Some(zt), Some(pt)) => {
                    profile_score(p, squared_norm(z.view()), pt, squared_norm(zt.view()))
                }
                _ => f64::INFINITY,
            }
        })
    }
}

/// Row-wise argmin of a score matrix, lowest column on ties. Rows with no
/// finite entry yield `None`.
pub fn argmin_rows(scores: ArrayView2<f64>) -> Vec<Option<(usize, f64)>> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, s)| s.is_finite())
                .fold(None, |best: Option<(usize, f64)>, (c, &s)| match best {
                    Some((_, b)) if b <= s => best,
                    _ => Some((c, s)),
                })
        })
        .collect()
}

/// Matches every non-empty cluster of `source` to its lowest-scoring
/// cluster of `target`. Several source clusters may share a target.
pub fn match_clusters(
    source: (usize, &ClusterProfiles),
    target: (usize, &ClusterProfiles),
) -> Result<Vec<ClusterMatch>> {
    if target.1.centroids.iter().all(Option::is_none) {
        return Err(Error::Degenerate(format!(
            "every cluster of modality #{} is empty",
            target.0
        )));
    }
    let scores = source.1.scores(target.1);
    Ok(argmin_rows(scores.view())
        .into_iter()
        .enumerate()
        .filter(|(c, _)| source.1.centroids[*c].is_some())
        .filter_map(|(c, best)| {
            best.map(|(t, score)| ClusterMatch {
                source: (source.0, c),
                target: (target.0, t),
                score,
            })
        })
        .collect())
}

/// Rank-aligned budget per matched cluster pair.
pub fn cluster_cap(cap_fraction: f64, n_source: usize, n_target: usize, k: usize) -> usize {
    (cap_fraction * n_source.min(n_target) as f64 / k.max(1) as f64).ceil() as usize
}

fn ranked_members(h: ArrayView2<f64>, assignment: &[usize], cluster: usize, skip: &HashSet<usize>) -> Vec<usize> {
    let mut members: Vec<usize> = (0..assignment.len())
        .filter(|&i| assignment[i] == cluster && !skip.contains(&i))
        .collect();
    members.sort_by(|&a, &b| h[[cluster, b]].total_cmp(&h[[cluster, a]]).then(a.cmp(&b)));
    members
}

/// Builds one plan block from cluster matches: members of each matched
/// pair are aligned rank-for-rank by descending indicator value, then every
/// known pair is added. Samples with a known partner are not rank-aligned.
pub fn build_block(
    matches: Vec<ClusterMatch>,
    source: (usize, &FactorState),
    target: (usize, &FactorState),
    known: &[(usize, usize)],
    cap_fraction: f64,
) -> PlanBlock {
    let (src_h, tgt_h) = (source.1.h.view(), target.1.h.view());
    let src_assign = hard_assign(src_h);
    let tgt_assign = hard_assign(tgt_h);
    let k = src_h.nrows();
    let cap = cluster_cap(cap_fraction, src_h.ncols(), tgt_h.ncols(), k);
    let known_src: HashSet<usize> = known.iter().map(|p| p.0).collect();
    let known_tgt: HashSet<usize> = known.iter().map(|p| p.1).collect();

    let mut aligned = Vec::new();
    let mut matched_to = vec![None; k];
    for m in &matches {
        let (c, t) = (m.source.1, m.target.1);
        matched_to[c] = Some(t);
        let size_c = src_assign.iter().filter(|&&a| a == c).count();
        let size_t = tgt_assign.iter().filter(|&&a| a == t).count();
        let left = ranked_members(src_h, &src_assign, c, &known_src);
        let right = ranked_members(tgt_h, &tgt_assign, t, &known_tgt);
        let n_c = size_c.min(size_t).min(cap).min(left.len()).min(right.len());
        aligned.extend(left.iter().zip(&right).take(n_c).map(|(&i, &j)| AlignedPair {
            source_cluster: c,
            target_cluster: t,
            i,
            j,
            known: false,
        }));
    }
    for &(i, j) in known {
        let c = src_assign[i];
        aligned.push(AlignedPair {
            source_cluster: c,
            target_cluster: matched_to[c].unwrap_or(tgt_assign[j]),
            i,
            j,
            known: true,
        });
    }
    PlanBlock {
        source: source.0,
        target: target.0,
        matches,
        aligned,
    }
}

/// Scores, matches and aligns every ordered modality pair.
pub fn build_permutation(
    datasets: &[ModalityDataset],
    states: &[FactorState],
    known_pairs: &PairSet,
    n_s: usize,
    cap_fraction: f64,
) -> Result<PermutationPlan> {
    if datasets.len() != states.len() {
        return Err(Error::Shape(format!(
            "{} datasets but {} factor states",
            datasets.len(),
            states.len()
        )));
    }
    let profiles = datasets
        .iter()
        .zip(states)
        .map(|(d, s)| ClusterProfiles::new(d.features().view(), s, n_s))
        .collect::<Result<Vec<_>>>()?;
    let mut blocks = Vec::new();
    for m in 0..states.len() {
        for t in 0..states.len() {
            if m == t {
                continue;
            }
            let matches = match_clusters((m, &profiles[m]), (t, &profiles[t]))?;
            blocks.push(build_block(
                matches,
                (m, &states[m]),
                (t, &states[t]),
                &known_pairs.between(m, t),
                cap_fraction,
            ));
        }
    }
    Ok(PermutationPlan { blocks })
}

/// Squared deviation between the indicator values of every aligned pair,
/// summed over all blocks.
pub fn alignment_loss(plan: &PermutationPlan, h: &[ArrayView2<f64>]) -> Result<f64> {
    plan.check(&h.iter().map(|h| h.dim()).collect::<Vec<_>>())?;
    Ok(plan
        .blocks
        .iter()
        .map(|b| {
            b.aligned
                .iter()
                .map(|p| (h[b.source][[p.source_cluster, p.i]] - h[b.target][[p.target_cluster, p.j]]).powi(2))
                .sum::<f64>()
        })
        .sum())
}

/// Label group of every sample: the smallest label of its set.
pub fn label_groups(datasets: &[ModalityDataset]) -> Result<(Vec<String>, Vec<Vec<Option<usize>>>)> {
    let mut names = BTreeSet::new();
    for d in datasets {
        let labels = d
            .labels()
            .ok_or_else(|| Error::MissingLabels(d.name().to_string()))?;
        names.extend(labels.iter().filter_map(|l| l.first().cloned()));
    }
    let index: BTreeMap<&String, usize> = names.iter().enumerate().map(|(g, l)| (l, g)).collect();
    let groups = datasets
        .iter()
        .map(|d| {
            d.labels()
                .expect("checked above")
                .iter()
                .map(|l| l.first().map(|name| index[name]))
                .collect()
        })
        .collect();
    Ok((names.into_iter().collect(), groups))
}

/// Label-driven plan: clusters are label groups and samples of the same
/// group are aligned in index order. Known pairs are added on top.
pub fn match_by_labels(datasets: &[ModalityDataset], known_pairs: &PairSet) -> Result<PermutationPlan> {
    let (names, groups) = label_groups(datasets)?;
    let mut blocks = Vec::new();
    for m in 0..datasets.len() {
        for t in 0..datasets.len() {
            if m == t {
                continue;
            }
            let known = known_pairs.between(m, t);
            let known_src: HashSet<usize> = known.iter().map(|p| p.0).collect();
            let known_tgt: HashSet<usize> = known.iter().map(|p| p.1).collect();
            let mut matches = Vec::new();
            let mut aligned = Vec::new();
            for g in 0..names.len() {
                let left: Vec<usize> = (0..groups[m].len())
                    .filter(|&i| groups[m][i] == Some(g) && !known_src.contains(&i))
                    .collect();
                let right: Vec<usize> = (0..groups[t].len())
                    .filter(|&j| groups[t][j] == Some(g) && !known_tgt.contains(&j))
                    .collect();
                let present_m = groups[m].contains(&Some(g));
                if present_m && groups[t].contains(&Some(g)) {
                    matches.push(ClusterMatch {
                        source: (m, g),
                        target: (t, g),
                        score: 0.0,
                    });
                }
                aligned.extend(left.iter().zip(&right).map(|(&i, &j)| AlignedPair {
                    source_cluster: g,
                    target_cluster: g,
                    i,
                    j,
                    known: false,
                }));
            }
            for (i, j) in known {
                let g = groups[m][i].or(groups[t][j]).unwrap_or(0);
                aligned.push(AlignedPair {
                    source_cluster: g,
                    target_cluster: g,
                    i,
                    j,
                    known: true,
                });
            }
            blocks.push(PlanBlock {
                source: m,
                target: t,
                matches,
                aligned,
            });
        }
    }
    Ok(PermutationPlan { blocks })
}

/// For each label group, the indicator row holding most of its members
/// (lowest row on ties; row 0 for groups absent from the modality).
pub fn majority_rows(groups: &[Option<usize>], assignment: &[usize], num_groups: usize, k: usize) -> Vec<usize> {
    let mut counts = vec![vec![0usize; k]; num_groups];
    for (g, &c) in groups.iter().zip(assignment) {
        if let Some(g) = g {
            counts[*g][c] += 1;
        }
    }
    counts
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, 0), |best, (c, &n)| if n > best.1 { (c, n) } else { best })
                .0
        })
        .collect()
}
