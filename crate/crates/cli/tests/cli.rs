use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

fn flexcmh(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexcmh"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn synthetic(modalities: usize, pair_fraction: f64) -> serde_json::Value {
    json!({
        "num_modalities": modalities,
        "clusters": 3,
        "samples_per_modality": vec![60; modalities],
        "dims_per_modality": vec![8; modalities],
        "cluster_separation": 8.0,
        "pair_fraction": pair_fraction,
        "seed": 4
    })
}

fn write_config(dir: &Path, body: serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    path
}

fn config(dir: &Path, modalities: usize) -> PathBuf {
    write_config(
        dir,
        json!({
            "data": {"synthetic": synthetic(modalities, 0.5)},
            "train": {"k": 3, "b": 8, "max_iters": 10},
            "eval": {"bits": [8], "top_k": 5},
            "output": "out"
        }),
    )
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn synth_writes_dataset_files() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        json!({
            "data": {"synthetic": {
                "num_modalities": 2, "clusters": 4,
                "samples_per_modality": [100, 100], "dims_per_modality": [6, 9],
                "cluster_separation": 8.0, "pair_fraction": 0.5, "seed": 1
            }},
            "train": {"k": 4, "b": 8}
        }),
    );
    for out in ["a", "b"] {
        let run = flexcmh(&["synth", "config.json", "--out", out], dir.path());
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    }
    let a = dir.path().join("a");
    let matrices = fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
        .count();
    assert_eq!(matrices, 2);
    for f in ["manifest.json", "pairs.txt", "truth.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(lines(&a.join("pairs.txt")).len(), 50);
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(dir.path().join("b").join(&name)).unwrap());
    }
}

#[test]
fn train_from_generated_manifest() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), 2);
    assert_eq!(code(&flexcmh(&["synth", "config.json", "--out", "data"], dir.path())), 0);
    write_config(
        dir.path(),
        json!({
            "data": {"manifest": "data/manifest.json"},
            "train": {"k": 3, "b": 8, "max_iters": 10},
            "eval": {"bits": [8]}
        }),
    );
    let run = flexcmh(&["train", "config.json", "--mode", "nj"], dir.path());
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let header = fs::read_to_string(dir.path().join("out/model/model.json")).unwrap();
    assert!(header.contains("\"mode\": \"nj\""));
    let trace = lines(&dir.path().join("out/trace.csv"));
    assert_eq!(trace[0], "iter,L_c,L_s,L_q,total");
    assert!(trace.len() - 1 <= 11);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/plan.json")).unwrap()).unwrap();
    assert_eq!(report["blocks"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_rows_and_append() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), 2);
    assert_eq!(code(&flexcmh(&["train", "config.json"], dir.path())), 0);
    let results = dir.path().join("out/results.csv");

    assert_eq!(code(&flexcmh(&["eval", "config.json"], dir.path())), 0);
    let first = lines(&results);
    assert_eq!(first[0], "seed,setting,mode,bits,query,database,baseline,map,precision_at_k,queries");
    assert_eq!(first.len(), 3);

    // Reloading the saved model gives the same numbers.
    assert_eq!(code(&flexcmh(&["eval", "config.json"], dir.path())), 0);
    assert_eq!(lines(&results), first);

    assert_eq!(code(&flexcmh(&["eval", "config.json", "--append"], dir.path())), 0);
    let appended = lines(&results);
    assert_eq!(appended.len(), 5);
    assert_eq!(appended[3..], first[1..]);
}

#[test]
fn random_baseline_rows() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        json!({
            "data": {"synthetic": synthetic(2, 0.5)},
            "train": {"k": 3, "b": 8, "max_iters": 10},
            "eval": {"bits": [8], "random_baseline": true}
        }),
    );
    assert_eq!(code(&flexcmh(&["train", "config.json"], dir.path())), 0);
    assert_eq!(code(&flexcmh(&["eval", "config.json"], dir.path())), 0);
    let rows = lines(&dir.path().join("out/results.csv"));
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.iter().filter(|r| r.contains(",random,")).count(), 2);
}

#[test]
fn three_modalities_give_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), 3);
    assert_eq!(code(&flexcmh(&["train", "config.json"], dir.path())), 0);
    assert_eq!(code(&flexcmh(&["eval", "config.json"], dir.path())), 0);
    assert_eq!(lines(&dir.path().join("out/results.csv")).len(), 7);
}

#[test]
fn unknown_eval_modality_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        json!({
            "data": {"synthetic": synthetic(2, 0.5)},
            "train": {"k": 3, "b": 8, "max_iters": 5},
            "eval": {"bits": [8], "query": "photos"}
        }),
    );
    assert_eq!(code(&flexcmh(&["train", "config.json"], dir.path())), 0);
    let run = flexcmh(&["eval", "config.json"], dir.path());
    assert_eq!(code(&run), 1);
    assert!(String::from_utf8_lossy(&run.stderr).contains("photos"));
}

#[test]
fn gradcheck_reports_forty_checks() {
    let dir = tempfile::tempdir().unwrap();
    let run = flexcmh(&["gradcheck"], dir.path());
    assert_eq!(code(&run), 0);
    let out = String::from_utf8_lossy(&run.stdout);
    assert_eq!(out.lines().count(), 40);
    assert!(out.lines().all(|l| l.ends_with(" ok")));

    let run = flexcmh(&["gradcheck", "--perturb", "0.01"], dir.path());
    assert_eq!(code(&run), 2);
    assert_eq!(String::from_utf8_lossy(&run.stdout).lines().count(), 40);
}

#[test]
fn sweep_lambda_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), 2);
    let args = ["sweep", "config.json", "--param", "lambda", "--values", "0.001,1,100"];
    assert_eq!(code(&flexcmh(&args, dir.path())), 0);
    let first = fs::read(dir.path().join("out/sweep_lambda.csv")).unwrap();
    let rows: Vec<String> = String::from_utf8(first.clone()).unwrap().lines().map(String::from).collect();
    assert_eq!(rows[0], "param,value,seed,setting,mode,bits,map,precision_at_k");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("lambda,0.001,"));
    assert_eq!(code(&flexcmh(&args, dir.path())), 0);
    assert_eq!(fs::read(dir.path().join("out/sweep_lambda.csv")).unwrap(), first);
}

#[test]
fn k_sweep_peaks_at_the_planted_cluster_count() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        json!({
            "data": {"synthetic": {
                "num_modalities": 2, "clusters": 5,
                "samples_per_modality": [100, 100], "dims_per_modality": [20, 20],
                "cluster_separation": 8.0, "pair_fraction": 0.5, "seed": 3
            }},
            "train": {"k": 5, "b": 5, "seed": 3},
            "eval": {"bits": [5]}
        }),
    );
    let run = flexcmh(&["sweep", "config.json", "--param", "k", "--values", "2,3,5,8,12"], dir.path());
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let maps: Vec<(String, f64)> = lines(&dir.path().join("out/sweep_k.csv"))[1..]
        .iter()
        .map(|r| {
            let f: Vec<&str> = r.split(',').collect();
            (f[1].to_string(), f[6].parse().unwrap())
        })
        .collect();
    let at_true = maps.iter().find(|(k, _)| k == "5").unwrap().1;
    assert!(maps.iter().all(|(_, m)| *m <= at_true), "{maps:?}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&flexcmh(&["train", "missing.json"], dir.path())), 1);
    assert_eq!(code(&flexcmh(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&flexcmh(&["--help"], dir.path())), 0);
    assert_eq!(code(&flexcmh(&[], dir.path())), 1);

    write_config(
        dir.path(),
        json!({"data": {"synthetic": synthetic(2, 0.5)}, "train": {"k": 1, "b": 8}}),
    );
    assert_eq!(code(&flexcmh(&["train", "config.json"], dir.path())), 1);

    // Features this large overflow the objective.
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    for m in ["a", "b"] {
        let rows: Vec<String> = (0..3)
            .map(|r| (0..12).map(|i| format!("{:e}", 1e200 * (1.0 + ((r * 12 + i) % 5) as f64))).collect::<Vec<_>>().join(","))
            .collect();
        fs::write(data.join(format!("{m}.csv")), rows.join("\n") + "\n").unwrap();
    }
    fs::write(
        data.join("manifest.json"),
        json!({"modalities": {"a": {"matrix": "a.csv"}, "b": {"matrix": "b.csv"}}}).to_string(),
    )
    .unwrap();
    write_config(
        dir.path(),
        json!({"data": {"manifest": "data/manifest.json"}, "train": {"k": 2, "b": 2, "max_iters": 3}}),
    );
    let run = flexcmh(&["train", "config.json"], dir.path());
    assert_eq!(code(&run), 2, "{}", String::from_utf8_lossy(&run.stderr));
}
