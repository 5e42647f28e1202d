//! Bit-packed binary codes, Hamming ranking, out-of-sample encoding and
//! retrieval metrics.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::squared_distance;
use crate::rng;

const MAGIC: &[u8; 4] = b"FXH1";

/// Projected-gradient iterations used by [`encode`].
pub const NNLS_ITERS: usize = 200;
/// Stop once no coordinate of the NNLS iterate moves more than this.
pub const NNLS_TOL: f64 = 1e-8;

fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// One packed code; bit `t` lives in word `t / 64`, position `t % 64`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Code {
    bits: usize,
    words: Vec<u64>,
}

impl Code {
    pub fn zeros(bits: usize) -> Self {
        Self {
            bits,
            words: vec![0; words_for(bits)],
        }
    }

    /// One-hot code with bit `index` set.
    pub fn one_hot(bits: usize, index: usize) -> Self {
        let mut c = Self::zeros(bits);
        c.set(index, true);
        c
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        let mut c = Self::zeros(bits.len());
        for (t, &v) in bits.iter().enumerate() {
            match v {
                0 => {}
                1 => c.set(t, true),
                _ => return Err(Error::InvalidArgument(format!("bit value {v} is not 0 or 1"))),
            }
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.bits
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn get(&self, t: usize) -> bool {
        self.words[t / 64] >> (t % 64) & 1 == 1
    }

    pub fn set(&mut self, t: usize, value: bool) {
        assert!(t < self.bits, "bit {t} out of range for {} bits", self.bits);
        let mask = 1u64 << (t % 64);
        if value {
            self.words[t / 64] |= mask;
        } else {
            self.words[t / 64] &= !mask;
        }
    }

    pub fn to_bits(&self) -> Vec<u8> {
        (0..self.bits).map(|t| self.get(t) as u8).collect()
    }

    pub fn to_string_bits(&self) -> String {
        (0..self.bits).map(|t| if self.get(t) { '1' } else { '0' }).collect()
    }
}

/// Number of differing bits.
pub fn hamming(a: &Code, b: &Code) -> Result<u32> {
    if a.bits != b.bits {
        return Err(Error::Shape(format!(
            "code lengths differ: {} vs {}",
            a.bits, b.bits
        )));
    }
    Ok(a.words
        .iter()
        .zip(&b.words)
        .map(|(x, y)| (x ^ y).count_ones())
        .sum())
}

/// Immutable set of equal-length codes with sample ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryCodeSet {
    bits: usize,
    ids: Vec<String>,
    codes: Vec<Code>,
}

impl BinaryCodeSet {
    pub fn new(bits: usize, ids: Vec<String>, codes: Vec<Code>) -> Result<Self> {
        if bits == 0 {
            return Err(Error::InvalidArgument("codes need at least one bit".into()));
        }
        if ids.len() != codes.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} codes",
                ids.len(),
                codes.len()
            )));
        }
        if let Some(c) = codes.iter().find(|c| c.bits != bits) {
            return Err(Error::Shape(format!("code of {} bits in a {bits}-bit set", c.bits)));
        }
        Ok(Self { bits, ids, codes })
    }

    /// From a `b x N` {0,1} matrix, one code per column.
    pub fn from_matrix(matrix: ArrayView2<u8>, ids: Vec<String>) -> Result<Self> {
        let codes = matrix
            .columns()
            .into_iter()
            .map(|col| Code::from_bits(&col.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(matrix.nrows(), ids, codes)
    }

    pub fn to_matrix(&self) -> Array2<u8> {
        let mut out = Array2::zeros((self.bits, self.codes.len()));
        for (i, c) in self.codes.iter().enumerate() {
            for t in 0..self.bits {
                out[[t, i]] = c.get(t) as u8;
            }
        }
        out
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn codes(&self) -> &[Code] {
        &self.codes
    }

    pub fn code(&self, i: usize) -> &Code {
        &self.codes[i]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub distance: u32,
}

/// Ranked hits, ascending by distance, ties by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

/// The `top_k` nearest database codes by Hamming distance.
pub fn search(query: &Code, db: &BinaryCodeSet, top_k: usize) -> Result<RetrievalResult> {
    if top_k == 0 || top_k > db.len() {
        return Err(Error::InvalidArgument(format!(
            "top_k = {top_k} must lie in [1, {}]",
            db.len()
        )));
    }
    let mut scored = db
        .codes
        .iter()
        .zip(&db.ids)
        .map(|(c, id)| Ok((hamming(query, c)?, id)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_unstable();
    Ok(RetrievalResult {
        hits: scored
            .into_iter()
            .take(top_k)
            .map(|(distance, id)| Hit {
                id: id.clone(),
                distance,
            })
            .collect(),
    })
}

/// Average precision of a ranking; zero when nothing relevant is ranked.
pub fn average_precision(ranking: &RetrievalResult, relevant: &HashSet<String>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::InvalidArgument("relevant set is empty".into()));
    }
    let mut found = 0usize;
    let mut total = 0.0;
    for (r, hit) in ranking.hits.iter().enumerate() {
        if relevant.contains(&hit.id) {
            found += 1;
            total += found as f64 / (r + 1) as f64;
        }
    }
    Ok(if found == 0 { 0.0 } else { total / found as f64 })
}

/// Fraction of the first `k` hits that are relevant.
pub fn precision_at_k(ranking: &RetrievalResult, relevant: &HashSet<String>, k: usize) -> f64 {
    let k = k.min(ranking.hits.len());
    if k == 0 {
        return 0.0;
    }
    ranking.hits[..k]
        .iter()
        .filter(|h| relevant.contains(&h.id))
        .count() as f64
        / k as f64
}

/// Retrieval quality of a query set against a database.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub map: f64,
    pub precision_at_k: f64,
    /// Queries with at least one relevant database item.
    pub queries: usize,
}

/// Mean AP over full Hamming rankings plus mean precision@`top_k`.
/// Queries without any relevant database item are skipped.
pub fn evaluate(
    queries: &[(Code, HashSet<String>)],
    db: &BinaryCodeSet,
    top_k: usize,
) -> Result<RetrievalScores> {
    let mut ap = 0.0;
    let mut prec = 0.0;
    let mut used = 0usize;
    for (code, relevant) in queries {
        if relevant.is_empty() {
            continue;
        }
        let ranking = search(code, db, db.len())?;
        ap += average_precision(&ranking, relevant)?;
        prec += precision_at_k(&ranking, relevant, top_k);
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArgument(
            "no query has a relevant database item".into(),
        ));
    }
    Ok(RetrievalScores {
        map: ap / used as f64,
        precision_at_k: prec / used as f64,
        queries: used,
    })
}

pub fn mean_average_precision(queries: &[(Code, HashSet<String>)], db: &BinaryCodeSet) -> Result<f64> {
    Ok(evaluate(queries, db, 1)?.map)
}

fn spectral_norm_sq(z: ArrayView2<f64>) -> f64 {
    let gram = z.t().dot(&z);
    let mut v = Array1::<f64>::ones(gram.nrows());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = gram.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = w.dot(&v) / v.dot(&v);
        v = w / norm;
        if (next - lambda).abs() <= 1e-12 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// `argmin_{h >= 0} ||x - Z h||^2` by projected gradient with step
/// `1 / ||Z^T Z||`.
pub fn nnls(z: ArrayView2<f64>, x: ArrayView1<f64>, iters: usize, tol: f64) -> Result<Array1<f64>> {
    if z.nrows() != x.len() {
        return Err(Error::Shape(format!(
            "feature vector has {} entries but Z has {} rows",
            x.len(),
            z.nrows()
        )));
    }
    let lip = spectral_norm_sq(z);
    if lip <= 0.0 || !lip.is_finite() {
        return Err(Error::Degenerate("Z is all zero".into()));
    }
    // power iteration slightly underestimates; pad the constant
    let step = 1.0 / (lip * (1.0 + 1e-6));
    let gram = z.t().dot(&z);
    let ztx = z.t().dot(&x);
    let mut h = Array1::<f64>::zeros(z.ncols());
    for _ in 0..iters {
        let grad = gram.dot(&h) - &ztx;
        let next = (&h - &(grad * step)).mapv(|v| v.max(0.0));
        let moved = next
            .iter()
            .zip(&h)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        h = next;
        if moved < tol {
            break;
        }
    }
    Ok(h)
}

/// Index of the nearest column of `centers` (lowest index on ties).
pub fn nearest_center(h: ArrayView1<f64>, centers: ArrayView2<f64>) -> usize {
    centers
        .columns()
        .into_iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (c, col)| {
            let d = squared_distance(h, col);
            if d < best.1 {
                (c, d)
            } else {
                best
            }
        })
        .0
}

/// Out-of-sample code: NNLS against `Z`, then the one-hot code of the
/// nearest binarization centre (`centers` is `k x b`).
pub fn encode(x: ArrayView1<f64>, z: ArrayView2<f64>, centers: ArrayView2<f64>) -> Result<Code> {
    if centers.nrows() != z.ncols() {
        return Err(Error::Shape(format!(
            "centres have {} rows but Z has {} columns",
            centers.nrows(),
            z.ncols()
        )));
    }
    let h = nnls(z, x, NNLS_ITERS, NNLS_TOL)?;
    Ok(Code::one_hot(centers.ncols(), nearest_center(h.view(), centers)))
}

/// Uniformly random codes, one per id.
pub fn random_codes(ids: Vec<String>, bits: usize, seed: u64) -> Result<BinaryCodeSet> {
    let mut rng = rng::seeded(seed, 0xC0DE);
    let codes = ids
        .iter()
        .map(|_| {
            let mut c = Code::zeros(bits);
            for t in 0..bits {
                c.set(t, rng.random::<bool>());
            }
            c
        })
        .collect();
    BinaryCodeSet::new(bits, ids, codes)
}

/// Text code file: `b N`, then `id bits` per line.
pub fn save_codes_text(path: impl AsRef<Path>, set: &BinaryCodeSet) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("{} {}\n", set.bits, set.len());
    for (id, code) in set.ids.iter().zip(&set.codes) {
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("id {id:?} cannot be written to a code file")));
        }
        out.push_str(id);
        out.push(' ');
        out.push_str(&code.to_string_bits());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Packed code file: `FXH1`, little-endian `u32` b and N, then each code in
/// `ceil(b / 8)` bytes (bit `t` in byte `t / 8`, least significant first),
/// then the ids as `u32` length plus UTF-8 bytes.
pub fn save_codes_binary(path: impl AsRef<Path>, set: &BinaryCodeSet) -> Result<()> {
    let path = path.as_ref();
    let width = set.bits.div_ceil(8);
    let mut out = Vec::with_capacity(12 + set.len() * width);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(set.bits as u32).to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for code in &set.codes {
        let mut row = vec![0u8; width];
        for t in 0..set.bits {
            if code.get(t) {
                row[t / 8] |= 1 << (t % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    for id in &set.ids {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads either code file variant.
pub fn load_codes(path: impl AsRef<Path>) -> Result<BinaryCodeSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        parse_binary(path, &bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::parse(path, 1, "not UTF-8 text"))?;
        parse_text(path, &text)
    }
}

fn parse_text(path: &Path, text: &str) -> Result<BinaryCodeSet> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::EmptyFile {
        path: path.to_path_buf(),
    })?;
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(path, 1, format!("bad header field {t:?}"))))
        .collect::<Result<_>>()?;
    let [bits, n] = nums[..] else {
        return Err(Error::parse(path, 1, "header must be `b N`"));
    };
    let mut ids = Vec::with_capacity(n);
    let mut codes = Vec::with_capacity(n);
    for (row, line) in lines.enumerate() {
        let row = row + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (Some(id), Some(code), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::parse(path, row, "expected `id bits`"));
        };
        if code.len() != bits {
            return Err(Error::parse(path, row, format!("code has {} bits, expected {bits}", code.len())));
        }
        let raw: Vec<u8> = code
            .bytes()
            .map(|c| match c {
                b'0' => Ok(0),
                b'1' => Ok(1),
                _ => Err(Error::parse(path, row, format!("invalid bit character {:?}", c as char))),
            })
            .collect::<Result<_>>()?;
        ids.push(id.to_string());
        codes.push(Code::from_bits(&raw)?);
    }
    if codes.len() != n {
        return Err(Error::parse(path, 1, format!("header promises {n} codes, found {}", codes.len())));
    }
    BinaryCodeSet::new(bits, ids, codes)
}

fn parse_binary(path: &Path, bytes: &[u8]) -> Result<BinaryCodeSet> {
    let truncated = || Error::parse(path, 0, "truncated packed code file");
    let u32_at = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(truncated)
    };
    let bits = u32_at(4)? as usize;
    let n = u32_at(8)? as usize;
    let width = bits.div_ceil(8);
    let mut at = 12;
    let mut codes = Vec::with_capacity(n);
    for _ in 0..n {
        let row = bytes.get(at..at + width).ok_or_else(truncated)?;
        let mut c = Code::zeros(bits);
        for t in 0..bits {
            c.set(t, row[t / 8] >> (t % 8) & 1 == 1);
        }
        codes.push(c);
        at += width;
    }
    let ids = if at == bytes.len() {
        (0..n).map(|i| i.to_string()).collect()
    } else {
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32_at(at)? as usize;
            let raw = bytes.get(at + 4..at + 4 + len).ok_or_else(truncated)?;
            ids.push(
                String::from_utf8(raw.to_vec()).map_err(|_| Error::parse(path, 0, "id is not UTF-8"))?,
            );
            at += 4 + len;
        }
        ids
    };
    BinaryCodeSet::new(bits, ids, codes)
}
