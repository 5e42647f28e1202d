use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{KnownPair, LabelSet, ModalityDataset, PairSet};
use crate::error::{Error, Result};

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads a matrix CSV: one line per feature dimension, one field per sample.
pub fn load_matrix_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let row = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut count = 0;
        for (col, field) in line.split(',').enumerate() {
            let field = field.trim();
            let v: f64 = field.parse().map_err(|_| {
                Error::parse(path, row, format!("field {} is not a number: {field:?}", col + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(
                    path,
                    row,
                    format!("field {} is not finite: {field}", col + 1),
                ));
            }
            values.push(v);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(Error::parse(
                    path,
                    row,
                    format!("expected {w} fields, found {count}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::EmptyFile { path: path.into() })?;
    Array2::from_shape_vec((rows, width), values).map_err(|e| Error::Shape(e.to_string()))
}

pub fn save_matrix_csv(path: impl AsRef<Path>, matrix: &Array2<f64>) -> Result<()> {
    let mut out = String::new();
    for row in matrix.rows() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    write_file(path.as_ref(), &out)
}

pub fn read_ids(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = read_to_string(path.as_ref())?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_ids(path: impl AsRef<Path>, ids: &[String]) -> Result<()> {
    let mut out = ids.join("\n");
    out.push('\n');
    write_file(path.as_ref(), &out)
}

/// Reads `id,label1;label2;...` lines and returns label sets in `ids` order.
pub fn load_labels(path: impl AsRef<Path>, ids: &[String]) -> Result<Vec<LabelSet>> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut by_id = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, labels) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(path, lineno + 1, "expected `id,label;label`"))?;
        let set: LabelSet = labels
            .split(';')
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if by_id.insert(id.trim().to_string(), set).is_some() {
            return Err(Error::parse(path, lineno + 1, format!("duplicate id {id:?}")));
        }
    }
    ids.iter()
        .map(|id| {
            by_id.remove(id).ok_or_else(|| Error::UnknownSample {
                modality: path.display().to_string(),
                id: id.clone(),
            })
        })
        .collect()
}

pub fn save_labels(path: impl AsRef<Path>, ids: &[String], labels: &[LabelSet]) -> Result<()> {
    let mut out = String::new();
    for (id, set) in ids.iter().zip(labels) {
        let joined: Vec<&str> = set.iter().map(String::as_str).collect();
        out.push_str(&format!("{id},{}\n", joined.join(";")));
    }
    write_file(path.as_ref(), &out)
}

/// Loads a matrix CSV. Sample ids come from a sidecar `<stem>.ids` file
/// when present, otherwise they default to column indices.
pub fn load_modality(path: impl AsRef<Path>, name: &str) -> Result<ModalityDataset> {
    let path = path.as_ref();
    let features = load_matrix_csv(path)?;
    let sidecar = path.with_extension("ids");
    if sidecar.exists() {
        let ids = read_ids(&sidecar)?;
        ModalityDataset::new(name, features, ids, None)
    } else {
        ModalityDataset::unlabeled(name, features)
    }
}

/// Writes `<dir>/<name>.csv`, `<name>.ids` and, when labelled, `<name>.labels`.
pub fn save_modality(dir: impl AsRef<Path>, dataset: &ModalityDataset) -> Result<ManifestEntry> {
    let dir = dir.as_ref();
    let matrix = PathBuf::from(format!("{}.csv", dataset.name()));
    let ids = PathBuf::from(format!("{}.ids", dataset.name()));
    save_matrix_csv(dir.join(&matrix), dataset.features())?;
    write_ids(dir.join(&ids), dataset.sample_ids())?;
    let labels = match dataset.labels() {
        Some(l) => {
            let p = PathBuf::from(format!("{}.labels", dataset.name()));
            save_labels(dir.join(&p), dataset.sample_ids(), l)?;
            Some(p)
        }
        None => None,
    };
    Ok(ManifestEntry {
        matrix,
        ids: Some(ids),
        labels,
    })
}

/// Reads a pair manifest (`modalityA,idA,modalityB,idB`, `#` comments).
pub fn load_pairs(path: impl AsRef<Path>, datasets: &[ModalityDataset]) -> Result<PairSet> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut set = PairSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let row = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                row,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let locate = |m: &str, id: &str| -> Result<(usize, usize)> {
            let mi = datasets
                .iter()
                .position(|d| d.name() == m)
                .ok_or_else(|| Error::UnknownModality(m.to_string()))?;
            let si = datasets[mi].index_of(id).ok_or_else(|| Error::UnknownSample {
                modality: m.to_string(),
                id: id.to_string(),
            })?;
            Ok((mi, si))
        };
        let (a, i) = locate(fields[0], fields[1])?;
        let (b, j) = locate(fields[2], fields[3])?;
        match set.insert(KnownPair::new(a, i, b, j), datasets) {
            Err(Error::DuplicatePair(p)) => {
                return Err(Error::DuplicatePair(format!("{p} at {}:{row}", path.display())))
            }
            other => other?,
        }
    }
    Ok(set)
}

pub fn save_pairs(
    path: impl AsRef<Path>,
    pairs: &PairSet,
    datasets: &[ModalityDataset],
) -> Result<()> {
    let mut out = String::new();
    for p in pairs.iter() {
        let (da, db) = (&datasets[p.a], &datasets[p.b]);
        out.push_str(&format!(
            "{},{},{},{}\n",
            da.name(),
            da.sample_ids()[p.i],
            db.name(),
            db.sample_ids()[p.j]
        ));
    }
    write_file(path.as_ref(), &out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub matrix: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

/// JSON dataset manifest. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub modalities: IndexMap<String, ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        write_file(path.as_ref(), &body)
    }

    pub fn load_datasets(&self, base: &Path) -> Result<(Vec<ModalityDataset>, PairSet)> {
        let mut datasets = Vec::with_capacity(self.modalities.len());
        for (name, entry) in &self.modalities {
            let features = load_matrix_csv(base.join(&entry.matrix))?;
            let ids = match &entry.ids {
                Some(p) => read_ids(base.join(p))?,
                None => (0..features.ncols()).map(|i| i.to_string()).collect(),
            };
            let labels = match &entry.labels {
                Some(p) => Some(load_labels(base.join(p), &ids)?),
                None => None,
            };
            datasets.push(ModalityDataset::new(name.clone(), features, ids, labels)?);
        }
        let pairs = match &self.pairs {
            Some(p) => load_pairs(base.join(p), &datasets)?,
            None => PairSet::new(),
        };
        Ok((datasets, pairs))
    }
}

/// Loads every modality and the pair manifest referenced by a JSON manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(Vec<ModalityDataset>, PairSet)> {
    let path = path.as_ref();
    let manifest: DatasetManifest = serde_json::from_str(&read_to_string(path)?)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    manifest.load_datasets(base)
}
