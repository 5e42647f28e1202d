//! End-to-end acceptance checks. Each prints one PASS/FAIL line.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use flexcmh::data::{generate_synthetic, GroundTruth, SyntheticSpec};
use flexcmh::factorization::{hard_assign, kmeans, seminmf_init_traced};
use flexcmh::hashindex::{average_precision, hamming, search, BinaryCodeSet, Code, Hit, RetrievalResult};
use flexcmh::matching::PermutationPlan;
use flexcmh::rng;
use flexcmh::trainer::{alignment_error, gradient_check, train, Mode, TrainConfig};
use flexcmh_cli::commands;
use flexcmh_cli::pipeline::{run_experiment, ResultRow};
use flexcmh_cli::{DataSource, ExperimentConfig, Setting};
use ndarray::Array2;
use rand::Rng;

// Criteria are timed one at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(n: usize, what: &str, pass: bool, detail: String, elapsed: Duration, limit: Option<Duration>) -> bool {
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let ok = pass && in_time;
    let limit = limit.map(|l| format!(" / limit {}s", l.as_secs())).unwrap_or_default();
    // written to the raw handle so the line shows without --nocapture
    let _ = writeln!(
        std::io::stderr(),
        "{} criterion {n} ({what}): {detail} [{:.1}s{limit}]",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    ok
}

fn planted(pair_fraction: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        pair_fraction,
        ..SyntheticSpec::planted(5, 100, 20, 8.0, seed)
    }
}

fn experiment(spec: SyntheticSpec, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(DataSource::Synthetic(spec), TrainConfig::new(5, 16));
    cfg.set_seed(seed);
    cfg
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn learned_map(rows: &[ResultRow]) -> f64 {
    mean(&rows.iter().filter(|r| r.baseline == "none").map(|r| r.map).collect::<Vec<_>>())
}

fn random_map(rows: &[ResultRow]) -> f64 {
    mean(&rows.iter().filter(|r| r.baseline == "random").map(|r| r.map).collect::<Vec<_>>())
}

#[test]
fn criterion_1_gradients() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let checks: Vec<_> = (0..20).map(|s| gradient_check(s, 0.0).unwrap()).collect();
    let worst = checks.iter().map(|c| c.h_error.max(c.z_error)).fold(0.0, f64::max);
    let pass = checks.iter().all(|c| c.passed());
    let ok = verdict(
        1,
        "gradient correctness",
        pass,
        format!("max relative error {worst:.2e} over 20 instances (tolerance 1e-4)"),
        start.elapsed(),
        Some(Duration::from_secs(10)),
    );
    assert!(ok);
}

fn exhaustive_inertia(points: &Array2<f64>, k: usize) -> f64 {
    let n = points.ncols();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            for r in 0..points.nrows() {
                let m = members.iter().map(|&i| points[[r, i]]).sum::<f64>() / members.len() as f64;
                total += members.iter().map(|&i| (points[[r, i]] - m).powi(2)).sum::<f64>();
            }
        }
        best = best.min(total);
        let mut pos = 0;
        loop {
            if pos == n {
                return best;
            }
            labels[pos] += 1;
            if labels[pos] < k {
                break;
            }
            labels[pos] = 0;
            pos += 1;
        }
    }
}

fn ranking(relevance: &[bool]) -> (RetrievalResult, HashSet<String>) {
    let hits = (0..relevance.len())
        .map(|i| Hit {
            id: format!("d{i}"),
            distance: i as u32,
        })
        .collect();
    let relevant = (0..relevance.len())
        .filter(|&i| relevance[i])
        .map(|i| format!("d{i}"))
        .collect();
    (RetrievalResult { hits }, relevant)
}

#[test]
fn criterion_2_oracles() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut r = rng::seeded(2, 0);

    let mut kmeans_bad = 0;
    let instances = 300;
    for t in 0..instances {
        let n = r.random_range(1..=8);
        let k = r.random_range(1..=3.min(n));
        let d = r.random_range(1..=3);
        let points = Array2::from_shape_fn((d, n), |_| r.random_range(-5.0..5.0));
        let got = kmeans(points.view(), k, t, 100).unwrap().inertia;
        let want = exhaustive_inertia(&points, k);
        if (got - want).abs() > 1e-9 * want.max(1.0) {
            kmeans_bad += 1;
        }
    }

    let mut search_bad = 0;
    for t in 0..40 {
        let n = r.random_range(1..=500);
        let bits = r.random_range(1..=64);
        let codes: Vec<Code> = (0..n)
            .map(|_| Code::from_bits(&(0..bits).map(|_| r.random::<bool>() as u8).collect::<Vec<_>>()).unwrap())
            .collect();
        let ids: Vec<String> = (0..n).map(|i| format!("x{:03}", (i * 7919 + t) % 1000)).collect();
        let ids: Vec<String> = ids.iter().enumerate().map(|(i, s)| format!("{s}-{i}")).collect();
        let db = BinaryCodeSet::new(bits, ids.clone(), codes.clone()).unwrap();
        let query = codes[r.random_range(0..n)].clone();
        let mut oracle: Vec<(u32, &String)> = codes.iter().zip(&ids).map(|(c, id)| (hamming(&query, c).unwrap(), id)).collect();
        oracle.sort();
        let got = search(&query, &db, n).unwrap();
        let same = got
            .hits
            .iter()
            .zip(&oracle)
            .all(|(h, (d, id))| h.distance == *d && &h.id == *id);
        if !same || got.hits.len() != n {
            search_bad += 1;
        }
    }

    let patterns: [(&[bool], f64); 3] = [
        (&[true, true, false], 1.0),
        (&[false, true], 0.5),
        (&[true, false, true], (1.0 + 2.0 / 3.0) / 2.0),
    ];
    let ap_bad = patterns
        .iter()
        .filter(|(pattern, want)| {
            let (rank, rel) = ranking(pattern);
            (average_precision(&rank, &rel).unwrap() - want).abs() > 1e-12
        })
        .count();

    let ok = verdict(
        2,
        "oracle equivalence",
        kmeans_bad + search_bad + ap_bad == 0,
        format!(
            "k-means {kmeans_bad}/{instances} off the exhaustive optimum, search {search_bad}/40 off the full sort, AP {ap_bad}/3 off"
        ),
        start.elapsed(),
        Some(Duration::from_secs(30)),
    );
    assert!(ok);
}

fn majority(labels: &[usize], assignment: &[usize], cluster: usize) -> Option<usize> {
    let mut counts = std::collections::BTreeMap::new();
    for (a, l) in assignment.iter().zip(labels) {
        if *a == cluster {
            *counts.entry(*l).or_insert(0) += 1;
        }
    }
    counts.into_iter().max_by_key(|&(l, c)| (c, std::cmp::Reverse(l))).map(|(l, _)| l)
}

/// Fraction of cluster matches joining clusters with the same planted
/// majority cluster.
fn cluster_match_accuracy(plan: &PermutationPlan, assignments: &[Vec<usize>], truth: &GroundTruth) -> f64 {
    let mut total = 0;
    let mut right = 0;
    for block in &plan.blocks {
        let ls = truth.clusters_of_modality(block.source);
        let lt = truth.clusters_of_modality(block.target);
        for m in &block.matches {
            total += 1;
            let a = majority(&ls, &assignments[block.source], m.source.1);
            let b = majority(&lt, &assignments[block.target], m.target.1);
            if a.is_some() && a == b {
                right += 1;
            }
        }
    }
    right as f64 / total.max(1) as f64
}

#[test]
fn criterion_3_planted_recovery() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut accuracies = Vec::new();
    let mut errors = Vec::new();
    for seed in 0..20 {
        let (data, pairs, truth) = generate_synthetic(&planted(0.0, seed)).unwrap();
        let mut config = TrainConfig::new(5, 16);
        config.seed = seed;
        let model = train(&data, &pairs, &config).unwrap();
        let assignments: Vec<Vec<usize>> = model.factors.iter().map(|f| hard_assign(f.h.view())).collect();
        accuracies.push(cluster_match_accuracy(&model.plan, &assignments, &truth));
        let clusters: Vec<Vec<usize>> = (0..data.len()).map(|m| truth.clusters_of_modality(m)).collect();
        errors.push(alignment_error(&model.plan, &clusters).unwrap_or(1.0));
    }
    let min_acc = accuracies.iter().cloned().fold(1.0, f64::min);
    let max_err = errors.iter().cloned().fold(0.0, f64::max);
    let ok = verdict(
        3,
        "planted correspondence recovery",
        min_acc == 1.0 && max_err <= 0.05,
        format!("worst cluster match accuracy {:.1}%, worst alignment error {:.2}% over 20 seeds", 100.0 * min_acc, 100.0 * max_err),
        start.elapsed(),
        Some(Duration::from_secs(60)),
    );
    assert!(ok);
}

#[test]
fn criterion_4_joint_benefit() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut maps = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..10 {
        for (slot, mode) in [Mode::Joint, Mode::Nj, Mode::Nc].into_iter().enumerate() {
            let mut cfg = experiment(planted(0.5, seed), seed);
            cfg.set_mode(mode);
            let (_, rows) = run_experiment(&cfg).unwrap();
            maps[slot].push(learned_map(&rows));
        }
    }
    let [joint, nj, nc] = maps.map(|m| mean(&m));
    let ok = verdict(
        4,
        "joint optimization benefit",
        joint >= nj && joint >= nc && joint - nj >= 0.02,
        format!("mean MAP joint {joint:.4}, nJ {nj:.4}, nC {nc:.4}; joint - nJ = {:.4} (needs >= 0.02)", joint - nj),
        start.elapsed(),
        Some(Duration::from_secs(300)),
    );
    assert!(ok);
}

#[test]
fn criterion_5_weak_pairing() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (mut full, mut only, mut random) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..10 {
        let mut cfg = experiment(planted(1.0, seed), seed);
        cfg.setting = Setting::WeakShuffled;
        cfg.keep_fraction = 0.5;
        cfg.eval.random_baseline = true;
        let (_, rows) = run_experiment(&cfg).unwrap();
        full.push(learned_map(&rows));
        random.push(random_map(&rows));
        cfg.paired_only = true;
        cfg.eval.random_baseline = false;
        let (_, rows) = run_experiment(&cfg).unwrap();
        only.push(learned_map(&rows));
    }
    let (full, only, random) = (mean(&full), mean(&only), mean(&random));
    let ok = verdict(
        5,
        "weak-pairing robustness",
        full - random >= 0.15 && full >= only,
        format!("mean MAP all data {full:.4}, paired-only {only:.4}, random {random:.4}"),
        start.elapsed(),
        Some(Duration::from_secs(300)),
    );
    assert!(ok);
}

#[test]
fn criterion_6_unequal_sizes() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut cfg = experiment(planted(1.0, 6), 6);
    cfg.setting = Setting::WeakDropped;
    cfg.drop_fraction = 0.1;
    cfg.eval.random_baseline = true;
    let (model, rows) = run_experiment(&cfg).unwrap();
    let sizes: Vec<usize> = model.factors.iter().map(|f| f.h.ncols()).collect();
    let (learned, random) = (learned_map(&rows), random_map(&rows));
    let ok = verdict(
        6,
        "unequal-size flexibility",
        sizes[1] < sizes[0] && learned - random >= 0.10,
        format!("training sizes {sizes:?}, MAP {learned:.4} vs random {random:.4}"),
        start.elapsed(),
        Some(Duration::from_secs(120)),
    );
    assert!(ok);
}

#[test]
fn criterion_7_seminmf_monotone() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut worst_rise = f64::NEG_INFINITY;
    for seed in 0..20 {
        let mut r = rng::seeded(seed, 7);
        let d = r.random_range(2..=10);
        let n = r.random_range(10..=60);
        let k = r.random_range(2..=5);
        let x = Array2::from_shape_fn((d, n), |_| r.random_range(-3.0..3.0));
        let (_, losses) = seminmf_init_traced(x.view(), k, seed, 50).unwrap();
        for w in losses.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
    }
    let ok = verdict(
        7,
        "SemiNMF monotonicity",
        worst_rise <= 1e-9,
        format!("largest loss increase {worst_rise:.2e} over 20 instances x 50 rounds"),
        start.elapsed(),
        None,
    );
    assert!(ok);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            for (name, body) in files(&path) {
                out.push((format!("{}/{name}", path.file_name().unwrap().to_string_lossy()), body));
            }
        } else {
            out.push((path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_8_determinism() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = experiment(planted(0.5, 8), 8);
        cfg.eval.random_baseline = true;
        cfg.output = tmp.path().join(run);
        commands::train(&cfg).unwrap();
        commands::eval(&cfg, false).unwrap();
        outputs.push(files(&cfg.output));
    }
    let identical = outputs[0] == outputs[1];
    let ok = verdict(
        8,
        "determinism",
        identical && !outputs[0].is_empty(),
        format!("{} output files, byte-identical: {identical}", outputs[0].len()),
        start.elapsed(),
        None,
    );
    assert!(ok);
}

#[test]
fn criterion_9_three_modalities() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let spec = SyntheticSpec {
        num_modalities: 3,
        samples_per_modality: vec![100, 100, 100],
        dims_per_modality: vec![64, 64, 20],
        pair_fraction: 0.5,
        ..SyntheticSpec::planted(5, 100, 20, 8.0, 9)
    };
    let mut cfg = experiment(spec, 9);
    cfg.eval.random_baseline = true;
    let (_, rows) = run_experiment(&cfg).unwrap();
    let learned: Vec<&ResultRow> = rows.iter().filter(|r| r.baseline == "none").collect();
    let above = learned
        .iter()
        .filter(|l| {
            rows.iter()
                .any(|r| r.baseline == "random" && r.query == l.query && r.database == l.database && l.map > r.map)
        })
        .count();
    let ok = verdict(
        9,
        "three-modality run",
        learned.len() == 6 && above == 6,
        format!("{} ordered-pair rows, {above} above random", learned.len()),
        start.elapsed(),
        Some(Duration::from_secs(180)),
    );
    assert!(ok);
}
