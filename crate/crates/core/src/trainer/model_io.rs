use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Binarization, ModelState, Scaler, TraceRow, TrainConfig};
use crate::data::{load_matrix_csv, save_matrix_csv};
use crate::error::{Error, Result};
use crate::factorization::FactorState;
use crate::hashindex::{load_codes, save_codes_text, BinaryCodeSet};
use crate::matching::PermutationPlan;

const HEADER: &str = "model.json";
const PLAN: &str = "plan.json";
const CODES: &str = "codes.txt";

#[derive(Debug, Serialize, Deserialize)]
struct Shape {
    dim: usize,
    k: usize,
    samples: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    names: Vec<String>,
    reference: usize,
    shapes: Vec<Shape>,
    bin_assignments: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scalers: Option<Vec<Scaler>>,
    trace: Vec<TraceRow>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes a model directory: `model.json`, `plan.json`, `z_<m>.csv`,
/// `h_<m>.csv`, `bins_<m>.csv` and the shared codes in `codes.txt`.
pub fn save_model(dir: impl AsRef<Path>, state: &ModelState) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = Header {
        config: state.config.clone(),
        names: state.names.clone(),
        reference: state.reference,
        shapes: state
            .factors
            .iter()
            .map(|f| Shape {
                dim: f.z.nrows(),
                k: f.k(),
                samples: f.h.ncols(),
            })
            .collect(),
        bin_assignments: state.bins.iter().map(|b| b.assignment.clone()).collect(),
        scalers: state.scalers.clone(),
        trace: state.trace.clone(),
    };
    write_json(&dir.join(HEADER), &header)?;
    write_json(&dir.join(PLAN), &state.plan)?;
    for (m, (f, b)) in state.factors.iter().zip(&state.bins).enumerate() {
        save_matrix_csv(dir.join(format!("z_{m}.csv")), &f.z)?;
        save_matrix_csv(dir.join(format!("h_{m}.csv")), &f.h)?;
        save_matrix_csv(dir.join(format!("bins_{m}.csv")), &b.centers)?;
    }
    let codes = BinaryCodeSet::from_matrix(state.codes.view(), state.reference_ids.clone())?;
    save_codes_text(dir.join(CODES), &codes)
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelState> {
    let dir = dir.as_ref();
    let header: Header = read_json(&dir.join(HEADER))?;
    let plan: PermutationPlan = read_json(&dir.join(PLAN))?;
    let mut factors = Vec::with_capacity(header.names.len());
    let mut bins = Vec::with_capacity(header.names.len());
    for (m, shape) in header.shapes.iter().enumerate() {
        let z = load_matrix_csv(dir.join(format!("z_{m}.csv")))?;
        let h = load_matrix_csv(dir.join(format!("h_{m}.csv")))?;
        let centers = load_matrix_csv(dir.join(format!("bins_{m}.csv")))?;
        if z.dim() != (shape.dim, shape.k) || h.dim() != (shape.k, shape.samples) {
            return Err(Error::Shape(format!(
                "modality #{m}: stored factors are {:?} and {:?}, header says {shape:?}",
                z.dim(),
                h.dim()
            )));
        }
        let assignment = header
            .bin_assignments
            .get(m)
            .cloned()
            .ok_or_else(|| Error::Shape(format!("no bin assignment for modality #{m}")))?;
        factors.push(FactorState { z, h });
        bins.push(Binarization { centers, assignment });
    }
    let codes = load_codes(dir.join(CODES))?;
    let state = ModelState {
        config: header.config,
        names: header.names,
        factors,
        plan,
        reference: header.reference,
        reference_ids: codes.ids().to_vec(),
        bins,
        codes: codes.to_matrix(),
        scalers: header.scalers,
        trace: header.trace,
    };
    state
        .plan
        .check(&state.factors.iter().map(|f| f.h.dim()).collect::<Vec<_>>())?;
    Ok(state)
}
