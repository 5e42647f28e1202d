use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flexcmh::data::{generate_synthetic, save_modality, save_pairs, DatasetManifest};
use flexcmh::trainer::{gradient_check, load_model, save_model, ModelState, GRADCHECK_TOLERANCE};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};
use crate::pipeline::{self, ResultRow, RESULT_HEADER};
use crate::NumericFailure;

pub const MODEL_DIR: &str = "model";
pub const TRACE_FILE: &str = "trace.csv";
pub const PLAN_FILE: &str = "plan.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAIRS_FILE: &str = "pairs.txt";
pub const TRUTH_FILE: &str = "truth.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("cannot write {}", path.display()))
}

/// Writes the synthetic modalities, pairs, ground truth and a manifest that
/// `train` can consume. Returns the manifest path.
pub fn synth(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let DataSource::Synthetic(spec) = &cfg.data else {
        bail!("synth needs a synthetic data block in the config");
    };
    let (data, pairs, truth) = generate_synthetic(spec)?;
    let out = &cfg.output;
    create_dir(out)?;
    let mut modalities = IndexMap::new();
    for d in &data {
        modalities.insert(d.name().to_string(), save_modality(out, d)?);
    }
    save_pairs(out.join(PAIRS_FILE), &pairs, &data)?;
    write(&out.join(TRUTH_FILE), &(serde_json::to_string_pretty(&truth)? + "\n"))?;
    let manifest = DatasetManifest {
        modalities,
        pairs: Some(PAIRS_FILE.into()),
        truth: Some(TRUTH_FILE.into()),
    };
    let path = out.join(MANIFEST_FILE);
    manifest.save(&path)?;
    Ok(path)
}

pub fn trace_csv(model: &ModelState) -> String {
    let mut out = String::from("iter,L_c,L_s,L_q,total\n");
    for row in &model.trace {
        let o = &row.objective;
        let _ = writeln!(out, "{},{:.12e},{:.12e},{:.12e},{:.12e}", row.iter, o.l_c, o.l_s, o.l_q, o.total);
    }
    out
}

/// Trains on the training split and writes the model directory, the
/// objective trace and the alignment report.
pub fn train(cfg: &ExperimentConfig) -> Result<ModelState> {
    let prepared = pipeline::prepare(cfg)?;
    let model = pipeline::train_model(cfg, &prepared)?;
    let out = &cfg.output;
    create_dir(out)?;
    save_model(out.join(MODEL_DIR), &model)?;
    write(&out.join(TRACE_FILE), &trace_csv(&model))?;
    let report = model.plan.report(&prepared.train);
    write(&out.join(PLAN_FILE), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(model)
}

pub fn results_csv(rows: &[ResultRow], header: bool) -> String {
    let mut out = String::new();
    if header {
        out.push_str(RESULT_HEADER);
        out.push('\n');
    }
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

/// Evaluates the trained model in `<output>/model` on the held-out split.
/// With `append`, rows are added to an existing results file.
pub fn eval(cfg: &ExperimentConfig, append: bool) -> Result<Vec<ResultRow>> {
    let dir = cfg.output.join(MODEL_DIR);
    let model = load_model(&dir).with_context(|| format!("cannot load model from {}", dir.display()))?;
    let prepared = pipeline::prepare(cfg)?;
    let rows = pipeline::evaluate_model(cfg, &model, &prepared)?;
    let path = cfg.output.join(RESULTS_FILE);
    if append && path.exists() {
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .with_context(|| format!("cannot append to {}", path.display()))?;
        f.write_all(results_csv(&rows, false).as_bytes())?;
    } else {
        write(&path, &results_csv(&rows, true))?;
    }
    Ok(rows)
}

pub const GRADCHECK_SEEDS: u64 = 20;

/// Checks the analytic gradients on 20 seeded instances starting at
/// `first_seed`, returning one report line per check.
pub fn gradcheck(first_seed: u64, perturb: f64) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    let mut failed = 0;
    for seed in first_seed..first_seed + GRADCHECK_SEEDS {
        let check = gradient_check(seed, perturb)?;
        for (factor, err) in [("H", check.h_error), ("Z", check.z_error)] {
            let ok = err <= GRADCHECK_TOLERANCE;
            if !ok {
                failed += 1;
            }
            lines.push(format!("seed {seed} {factor} rel_error {err:.3e} {}", if ok { "ok" } else { "FAIL" }));
        }
    }
    if failed > 0 {
        return Err(NumericFailure { lines, failed }.into());
    }
    Ok(lines)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Lambda,
    K,
}

impl SweepParam {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::K => "k",
        }
    }
}

pub const SWEEP_HEADER: &str = "param,value,seed,setting,mode,bits,map,precision_at_k";

/// One train and eval run per value; one row per value and code length
/// holding the mean over query/database pairs.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<String> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for &v in values {
        let mut run = cfg.clone();
        match param {
            SweepParam::Lambda => run.train.lambda = v,
            SweepParam::K => {
                if v < 1.0 || v.fract() != 0.0 {
                    bail!("k values must be positive integers, got {v}");
                }
                run.train.k = v as usize;
            }
        }
        run.validate()?;
        let (_, rows) = pipeline::run_experiment(&run)?;
        for &bits in &run.eval.bits {
            let picked: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| r.bits == bits && r.baseline == "none")
                .collect();
            let n = picked.len().max(1) as f64;
            let map = picked.iter().map(|r| r.map).sum::<f64>() / n;
            let p = picked.iter().map(|r| r.precision_at_k).sum::<f64>() / n;
            let _ = writeln!(
                out,
                "{},{v},{},{},{},{bits},{map:.6},{p:.6}",
                param.as_str(),
                run.train.seed,
                run.setting.as_str(),
                run.train.mode
            );
        }
    }
    create_dir(&cfg.output)?;
    write(&cfg.output.join(format!("sweep_{}.csv", param.as_str())), &out)?;
    Ok(out)
}
