//! Data preparation, training and retrieval evaluation for one experiment.

use std::collections::{BTreeMap, HashSet};

use anyhow::{bail, Context, Result};
use flexcmh::data::{
    drop_samples, generate_synthetic, labels_intersect, load_manifest, GroundTruth, KnownPair,
    ModalityDataset, PairSet,
};
use flexcmh::hashindex::{encode, evaluate, random_codes, BinaryCodeSet, Code};
use flexcmh::rng;
use flexcmh::trainer::{train, ModelState};
use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, Setting};

/// Training and held-out data of one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<ModalityDataset>,
    pub train_pairs: PairSet,
    pub test: Vec<ModalityDataset>,
    /// Planted structure of the training split, for synthetic data.
    pub train_truth: Option<GroundTruth>,
}

pub fn load_source(cfg: &ExperimentConfig) -> Result<(Vec<ModalityDataset>, PairSet, Option<GroundTruth>)> {
    match &cfg.data {
        DataSource::Synthetic(spec) => {
            let (data, pairs, truth) = generate_synthetic(spec)?;
            Ok((data, pairs, Some(truth)))
        }
        DataSource::Manifest(_) => {
            let path = cfg.manifest_path().expect("manifest source");
            let (data, pairs) = load_manifest(&path)
                .with_context(|| format!("cannot load manifest {}", path.display()))?;
            Ok((data, pairs, None))
        }
    }
}

/// Splits samples into train and test columns so that samples joined by a
/// known pair land on the same side. Groups are drawn in seeded order
/// until the training side holds `fraction` of all samples.
pub fn split(datasets: &[ModalityDataset], pairs: &PairSet, fraction: f64, seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let offsets: Vec<usize> = datasets
        .iter()
        .scan(0, |acc, d| {
            let start = *acc;
            *acc += d.len();
            Some(start)
        })
        .collect();
    let total: usize = datasets.iter().map(ModalityDataset::len).sum();
    let mut groups = UnionFind::<usize>::new(total);
    for p in pairs.iter() {
        groups.union(offsets[p.a] + p.i, offsets[p.b] + p.j);
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for node in 0..total {
        members.entry(groups.find(node)).or_default().push(node);
    }
    let mut order: Vec<(u64, Vec<usize>)> = members
        .into_values()
        .map(|nodes| (rng::derive(seed ^ 0x5917, nodes[0] as u64), nodes))
        .collect();
    order.sort();

    let want = (fraction * total as f64).round() as usize;
    let mut in_train = vec![false; total];
    let mut taken = 0;
    for (_, nodes) in order {
        if taken >= want {
            break;
        }
        taken += nodes.len();
        for n in nodes {
            in_train[n] = true;
        }
    }
    let mut train_cols = vec![Vec::new(); datasets.len()];
    let mut test_cols = vec![Vec::new(); datasets.len()];
    for (m, d) in datasets.iter().enumerate() {
        for i in 0..d.len() {
            if in_train[offsets[m] + i] {
                train_cols[m].push(i);
            } else {
                test_cols[m].push(i);
            }
        }
    }
    (train_cols, test_cols)
}

fn index_maps(datasets: &[ModalityDataset], cols: &[Vec<usize>]) -> Vec<Vec<Option<usize>>> {
    datasets
        .iter()
        .zip(cols)
        .map(|(d, c)| {
            let mut map = vec![None; d.len()];
            for (new, &old) in c.iter().enumerate() {
                map[old] = Some(new);
            }
            map
        })
        .collect()
}

/// Gives the dropped pairs a shuffled (wrong) partner within each modality
/// pair.
fn shuffled_remainder(all: &PairSet, kept: &PairSet, seed: u64) -> Vec<KnownPair> {
    let kept: HashSet<KnownPair> = kept.iter().copied().collect();
    let mut by_modalities: BTreeMap<(usize, usize), Vec<KnownPair>> = BTreeMap::new();
    for p in all.iter().filter(|p| !kept.contains(p)) {
        by_modalities.entry((p.a, p.b)).or_default().push(*p);
    }
    let mut out = Vec::new();
    for ((a, b), pairs) in by_modalities {
        let mut targets: Vec<(u64, usize)> = pairs
            .iter()
            .map(|p| (rng::derive(seed ^ 0x5F1E, rng::mix64(p.j as u64) ^ b as u64), p.j))
            .collect();
        targets.sort();
        out.extend(pairs.iter().zip(targets).map(|(p, (_, j))| KnownPair::new(a, p.i, b, j)));
    }
    out
}

/// Loads the data, splits it and applies the pairing setting.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (datasets, pairs, truth) = load_source(cfg)?;
    let seed = cfg.train.seed;
    let (train_cols, test_cols) = split(&datasets, &pairs, cfg.train_fraction, seed);
    let test = datasets
        .iter()
        .zip(&test_cols)
        .map(|(d, c)| d.subset(c))
        .collect::<flexcmh::Result<Vec<_>>>()?;
    let mut train: Vec<ModalityDataset> = datasets
        .iter()
        .zip(&train_cols)
        .map(|(d, c)| d.subset(c))
        .collect::<flexcmh::Result<_>>()?;
    let mut train_pairs = pairs.reindex(&index_maps(&datasets, &train_cols));
    let mut train_truth = truth.map(|t| t.subset(&train_cols));

    match cfg.setting {
        Setting::Paired => {}
        Setting::Unpaired => train_pairs = PairSet::new(),
        Setting::WeakShuffled | Setting::WeakDropped => {
            let kept = train_pairs.keep_fraction(cfg.keep_fraction, seed);
            let mut next = kept.clone();
            if cfg.trust_shuffled {
                for p in shuffled_remainder(&train_pairs, &kept, seed) {
                    next.insert(p, &train)?;
                }
            }
            train_pairs = next;
        }
    }
    if cfg.setting == Setting::WeakDropped {
        let last = train.len() - 1;
        let survivors = drop_samples(&train[last], cfg.drop_fraction, seed)?;
        let keep: Vec<usize> = survivors
            .sample_ids()
            .iter()
            .map(|id| train[last].index_of(id).expect("survivor id"))
            .collect();
        let mut cols: Vec<Vec<usize>> = train.iter().map(|d| (0..d.len()).collect()).collect();
        cols[last] = keep;
        train_pairs = train_pairs.reindex(&index_maps(&train, &cols));
        train_truth = train_truth.map(|t| t.subset(&cols));
        train[last] = survivors;
    }
    if cfg.paired_only {
        let mut used: Vec<Vec<bool>> = train.iter().map(|d| vec![false; d.len()]).collect();
        for p in train_pairs.iter() {
            used[p.a][p.i] = true;
            used[p.b][p.j] = true;
        }
        let cols: Vec<Vec<usize>> = used
            .iter()
            .map(|u| (0..u.len()).filter(|&i| u[i]).collect())
            .collect();
        train_pairs = train_pairs.reindex(&index_maps(&train, &cols));
        train_truth = train_truth.map(|t| t.subset(&cols));
        train = train
            .iter()
            .zip(&cols)
            .map(|(d, c)| d.subset(c))
            .collect::<flexcmh::Result<_>>()?;
    }
    Ok(Prepared {
        train,
        train_pairs,
        test,
        train_truth,
    })
}

pub fn train_model(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<ModelState> {
    Ok(train(&prepared.train, &prepared.train_pairs, &cfg.train)?)
}

/// One results CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    pub setting: String,
    pub mode: String,
    pub bits: usize,
    pub query: String,
    pub database: String,
    pub baseline: String,
    pub map: f64,
    pub precision_at_k: f64,
    pub queries: usize,
}

pub const RESULT_HEADER: &str = "seed,setting,mode,bits,query,database,baseline,map,precision_at_k,queries";

impl ResultRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.6},{:.6},{}",
            self.seed,
            self.setting,
            self.mode,
            self.bits,
            self.query,
            self.database,
            self.baseline,
            self.map,
            self.precision_at_k,
            self.queries
        )
    }
}

/// Out-of-sample codes for every sample of `data` (modality `m`).
pub fn encode_modality(model: &ModelState, m: usize, data: &ModalityDataset, centers: ndarray::ArrayView2<f64>) -> Result<BinaryCodeSet> {
    let x = model.prepare(m, data.features().view());
    let z = model.factors[m].z.view();
    let codes = x
        .columns()
        .into_iter()
        .map(|col| encode(col, z, centers))
        .collect::<flexcmh::Result<Vec<Code>>>()?;
    Ok(BinaryCodeSet::new(centers.ncols(), data.sample_ids().to_vec(), codes)?)
}

fn relevance(query: &ModalityDataset, db: &ModalityDataset) -> Result<Vec<HashSet<String>>> {
    let (Some(ql), Some(dl)) = (query.labels(), db.labels()) else {
        bail!(flexcmh::Error::MissingLabels(format!(
            "evaluation needs labels on {:?} and {:?}",
            query.name(),
            db.name()
        )));
    };
    Ok(ql
        .iter()
        .map(|q| {
            dl.iter()
                .zip(db.sample_ids())
                .filter(|(d, _)| labels_intersect(q, d))
                .map(|(_, id)| id.clone())
                .collect()
        })
        .collect())
}

fn ordered_pairs(cfg: &ExperimentConfig, model: &ModelState) -> Result<Vec<(usize, usize)>> {
    let pick = |name: &Option<String>| -> Result<Option<usize>> {
        name.as_ref().map(|n| model.modality_index(n)).transpose().map_err(Into::into)
    };
    let (q, d) = (pick(&cfg.eval.query)?, pick(&cfg.eval.database)?);
    let n = model.num_modalities();
    Ok((0..n)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .filter(|&(a, b)| a != b && q.is_none_or(|q| q == a) && d.is_none_or(|d| d == b))
        .collect())
}

/// Cross-modal retrieval on the held-out samples for every configured
/// code length and ordered modality pair.
pub fn evaluate_model(cfg: &ExperimentConfig, model: &ModelState, prepared: &Prepared) -> Result<Vec<ResultRow>> {
    if prepared.test.len() != model.num_modalities() {
        bail!(
            "model has {} modalities but the data has {}",
            model.num_modalities(),
            prepared.test.len()
        );
    }
    for (d, name) in prepared.test.iter().zip(&model.names) {
        if d.name() != name {
            bail!(flexcmh::Error::UnknownModality(format!(
                "model modality {name:?} does not match data modality {:?}",
                d.name()
            )));
        }
    }
    let pairs = ordered_pairs(cfg, model)?;
    let mut rows = Vec::new();
    for &bits in &cfg.eval.bits {
        let codebook = model.codebook(bits)?;
        let codes = prepared
            .test
            .iter()
            .enumerate()
            .map(|(m, d)| encode_modality(model, m, d, codebook[m].centers.view()))
            .collect::<Result<Vec<_>>>()?;
        let random = if cfg.eval.random_baseline {
            Some(
                prepared
                    .test
                    .iter()
                    .enumerate()
                    .map(|(m, d)| {
                        random_codes(
                            d.sample_ids().to_vec(),
                            bits,
                            rng::derive(cfg.train.seed, ((bits as u64) << 8) | m as u64),
                        )
                    })
                    .collect::<flexcmh::Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        for &(q, d) in &pairs {
            let rel = relevance(&prepared.test[q], &prepared.test[d])?;
            let mut variants = vec![("none", &codes)];
            if let Some(r) = &random {
                variants.push(("random", r));
            }
            for (baseline, set) in variants {
                let queries: Vec<(Code, HashSet<String>)> = set[q]
                    .codes()
                    .iter()
                    .cloned()
                    .zip(rel.iter().cloned())
                    .collect();
                let top_k = cfg.eval.top_k.min(set[d].len());
                let scores = evaluate(&queries, &set[d], top_k)?;
                rows.push(ResultRow {
                    seed: cfg.train.seed,
                    setting: cfg.setting.as_str().to_string(),
                    mode: model.config.mode.to_string(),
                    bits,
                    query: model.names[q].clone(),
                    database: model.names[d].clone(),
                    baseline: baseline.to_string(),
                    map: scores.map,
                    precision_at_k: scores.precision_at_k,
                    queries: scores.queries,
                });
            }
        }
    }
    Ok(rows)
}

/// Prepares, trains and evaluates in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ModelState, Vec<ResultRow>)> {
    let prepared = prepare(cfg)?;
    let model = train_model(cfg, &prepared)?;
    let rows = evaluate_model(cfg, &model, &prepared)?;
    Ok((model, rows))
}

/// Mean MAP over the rows of one baseline kind.
pub fn mean_map(rows: &[ResultRow], baseline: &str) -> f64 {
    let picked: Vec<f64> = rows
        .iter()
        .filter(|r| r.baseline == baseline)
        .map(|r| r.map)
        .collect();
    picked.iter().sum::<f64>() / picked.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use flexcmh::data::SyntheticSpec;
    use flexcmh::trainer::TrainConfig;

    fn config(pf: f64, setting: Setting) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(
            DataSource::Synthetic(SyntheticSpec {
                pair_fraction: pf,
                ..SyntheticSpec::planted(3, 60, 8, 8.0, 4)
            }),
            TrainConfig::new(3, 4),
        );
        cfg.setting = setting;
        cfg.train.max_iters = 5;
        cfg.eval.bits = vec![4];
        cfg
    }

    #[test]
    fn split_keeps_pairs_together() {
        let cfg = config(1.0, Setting::Paired);
        let (data, pairs, _) = load_source(&cfg).unwrap();
        let (train, test) = split(&data, &pairs, 0.7, 3);
        let total: usize = train.iter().chain(&test).map(Vec::len).sum();
        assert_eq!(total, 120);
        let n_train: usize = train.iter().map(Vec::len).sum();
        assert!((n_train as i64 - 84).abs() <= 2, "{n_train}");
        for p in pairs.iter() {
            assert_eq!(train[p.a].contains(&p.i), train[p.b].contains(&p.j));
        }
    }

    #[test]
    fn settings_shape_the_training_data() {
        let paired = prepare(&config(1.0, Setting::Paired)).unwrap();
        let n_pairs = paired.train_pairs.len();
        assert_eq!(n_pairs, paired.train[0].len());

        let weak = prepare(&config(1.0, Setting::WeakShuffled)).unwrap();
        assert_eq!(weak.train_pairs.len(), (0.5 * n_pairs as f64).round() as usize);

        let mut trusting = config(1.0, Setting::WeakShuffled);
        trusting.trust_shuffled = true;
        let trusting = prepare(&trusting).unwrap();
        assert_eq!(trusting.train_pairs.len(), n_pairs);

        let dropped = prepare(&config(1.0, Setting::WeakDropped)).unwrap();
        let n1 = paired.train[1].len();
        assert_eq!(dropped.train[1].len(), n1 - (0.1 * n1 as f64).ceil() as usize);
        assert_eq!(dropped.train_truth.as_ref().unwrap().correspondence[1].len(), dropped.train[1].len());

        assert!(prepare(&config(1.0, Setting::Unpaired)).unwrap().train_pairs.is_empty());

        let mut only = config(1.0, Setting::WeakShuffled);
        only.paired_only = true;
        let only = prepare(&only).unwrap();
        assert_eq!(only.train[0].len(), only.train_pairs.len());
        assert_eq!(only.train[1].len(), only.train_pairs.len());
    }

    #[test]
    fn evaluation_rows_cover_ordered_pairs() {
        let mut cfg = config(0.5, Setting::Paired);
        cfg.eval.random_baseline = true;
        let (_, rows) = run_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.iter().filter(|r| r.baseline == "random").count(), 2);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.map)));
        cfg.eval.query = Some("m1".into());
        cfg.eval.random_baseline = false;
        let (_, rows) = run_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].query.as_str(), rows[0].database.as_str()), ("m1", "m0"));
        cfg.eval.query = Some("nope".into());
        assert!(run_experiment(&cfg).is_err());
    }
}
