//! Dataset ingestion and vertical splitting.
//!
//! Loaders produce a [`Dataset`] (features + optional labels); `vertical_split`
//! partitions its columns into two party shards with identical row order,
//! labels going to party A only. A [`SplitManifest`] records the assignment so
//! the split can be replayed or audited, and `merge_shards` undoes it exactly.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },
    #[error("dataset has no rows")]
    Empty,
    #[error("m_A must satisfy 1 <= m_A < {m}, got {m_a}")]
    BadSplit { m_a: usize, m: usize },
    #[error("source dataset has no labels; party A's shard requires them")]
    MissingLabels,
    #[error("label {0} at row {1} is not 0/1")]
    NonBinaryLabel(u8, usize),
    #[error("digit label {0} at row {1} outside 0..=9")]
    DigitOutOfRange(u8, usize),
    #[error("manifest does not match shards: {0}")]
    ManifestMismatch(String),
    #[error("shard shapes disagree: {0}")]
    ShapeMismatch(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which side of the vertical split a shard belongs to. Party A holds the
/// labels and drives training; party B holds only features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartyRole {
    A,
    B,
}

impl PartyRole {
    pub fn peer(self) -> PartyRole {
        match self {
            PartyRole::A => PartyRole::B,
            PartyRole::B => PartyRole::A,
        }
    }
}

impl fmt::Display for PartyRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartyRole::A => write!(f, "A"),
            PartyRole::B => write!(f, "B"),
        }
    }
}

/// Row-major feature storage. Sparse rows hold strictly increasing
/// `(column, value)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureMatrix {
    Dense { cols: usize, data: Vec<f64> },
    Sparse { cols: usize, rows: Vec<Vec<(usize, f64)>> },
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        match self {
            FeatureMatrix::Dense { cols, data } => {
                if *cols == 0 {
                    0
                } else {
                    data.len() / cols
                }
            }
            FeatureMatrix::Sparse { rows, .. } => rows.len(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            FeatureMatrix::Dense { cols, .. } => *cols,
            FeatureMatrix::Sparse { cols, .. } => *cols,
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, FeatureMatrix::Sparse { .. })
    }

    pub fn nonzeros(&self) -> usize {
        match self {
            FeatureMatrix::Dense { data, .. } => data.iter().filter(|v| **v != 0.0).count(),
            FeatureMatrix::Sparse { rows, .. } => rows.iter().map(Vec::len).sum(),
        }
    }

    /// Dot product of row `i` with a weight slice of length `cols`.
    pub fn dot_row(&self, i: usize, weights: &[f64]) -> f64 {
        match self {
            FeatureMatrix::Dense { cols, data } => {
                let row = &data[i * cols..(i + 1) * cols];
                row.iter().zip(weights).map(|(x, w)| x * w).sum()
            }
            FeatureMatrix::Sparse { rows, .. } => {
                rows[i].iter().map(|&(j, x)| x * weights[j]).sum()
            }
        }
    }

    /// Visits `(column, value)` for row `i`: every column when dense, the
    /// stored entries when sparse.
    pub fn for_each_in_row<F: FnMut(usize, f64)>(&self, i: usize, mut f: F) {
        match self {
            FeatureMatrix::Dense { cols, data } => {
                for (j, &x) in data[i * cols..(i + 1) * cols].iter().enumerate() {
                    f(j, x);
                }
            }
            FeatureMatrix::Sparse { rows, .. } => {
                for &(j, x) in &rows[i] {
                    f(j, x);
                }
            }
        }
    }

    /// New matrix containing the contiguous row range (for worker shards).
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> FeatureMatrix {
        match self {
            FeatureMatrix::Dense { cols, data } => FeatureMatrix::Dense {
                cols: *cols,
                data: data[range.start * cols..range.end * cols].to_vec(),
            },
            FeatureMatrix::Sparse { cols, rows } => FeatureMatrix::Sparse {
                cols: *cols,
                rows: rows[range].to_vec(),
            },
        }
    }

    /// New matrix containing the listed source columns, in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> FeatureMatrix {
        match self {
            FeatureMatrix::Dense { cols, data } => {
                let n = self.rows();
                let mut out = Vec::with_capacity(n * keep.len());
                for i in 0..n {
                    let row = &data[i * cols..(i + 1) * cols];
                    out.extend(keep.iter().map(|&j| row[j]));
                }
                FeatureMatrix::Dense {
                    cols: keep.len(),
                    data: out,
                }
            }
            FeatureMatrix::Sparse { cols, rows } => {
                let mut local_of = vec![usize::MAX; *cols];
                for (local, &src) in keep.iter().enumerate() {
                    local_of[src] = local;
                }
                let new_rows = rows
                    .iter()
                    .map(|row| {
                        let mut picked: Vec<(usize, f64)> = row
                            .iter()
                            .filter(|(j, _)| local_of[*j] != usize::MAX)
                            .map(|&(j, x)| (local_of[j], x))
                            .collect();
                        picked.sort_unstable_by_key(|&(j, _)| j);
                        picked
                    })
                    .collect();
                FeatureMatrix::Sparse {
                    cols: keep.len(),
                    rows: new_rows,
                }
            }
        }
    }
}

/// A loaded source dataset, before any vertical split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: FeatureMatrix,
    pub labels: Option<Vec<u8>>,
    pub column_names: Vec<String>,
}

/// One party's shard of a vertically split dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct VerticalDataset {
    pub role: PartyRole,
    pub features: FeatureMatrix,
    pub labels: Option<Vec<u8>>,
    pub column_names: Vec<String>,
}

impl VerticalDataset {
    pub fn rows(&self) -> usize {
        self.features.rows()
    }

    pub fn cols(&self) -> usize {
        self.features.cols()
    }

    /// Checks the shard invariants: A carries 0/1 labels for every row, B
    /// carries none; sparse rows strictly increasing and in range; all
    /// values finite.
    pub fn validate(&self) -> Result<(), DataError> {
        match (self.role, &self.labels) {
            (PartyRole::A, Some(labels)) => {
                if labels.len() != self.rows() {
                    return Err(DataError::ShapeMismatch(format!(
                        "{} labels for {} rows",
                        labels.len(),
                        self.rows()
                    )));
                }
                for (i, &y) in labels.iter().enumerate() {
                    if y > 1 {
                        return Err(DataError::NonBinaryLabel(y, i));
                    }
                }
            }
            (PartyRole::A, None) => return Err(DataError::MissingLabels),
            (PartyRole::B, Some(_)) => {
                return Err(DataError::ShapeMismatch(
                    "party B shard must not carry labels".into(),
                ))
            }
            (PartyRole::B, None) => {}
        }
        if self.column_names.len() != self.cols() {
            return Err(DataError::ShapeMismatch(format!(
                "{} column names for {} columns",
                self.column_names.len(),
                self.cols()
            )));
        }
        validate_matrix(&self.features)
    }
}

fn validate_matrix(features: &FeatureMatrix) -> Result<(), DataError> {
    match features {
        FeatureMatrix::Dense { data, .. } => {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(DataError::ShapeMismatch("non-finite feature value".into()));
            }
        }
        FeatureMatrix::Sparse { cols, rows } => {
            for (i, row) in rows.iter().enumerate() {
                let mut prev = None;
                for &(j, x) in row {
                    if j >= *cols {
                        return Err(DataError::ShapeMismatch(format!(
                            "row {i}: index {j} out of {cols} columns"
                        )));
                    }
                    if prev.is_some_and(|p| j <= p) {
                        return Err(DataError::ShapeMismatch(format!(
                            "row {i}: indices not strictly increasing at {j}"
                        )));
                    }
                    if !x.is_finite() {
                        return Err(DataError::ShapeMismatch(format!(
                            "row {i}: non-finite value at {j}"
                        )));
                    }
                    prev = Some(j);
                }
            }
        }
    }
    Ok(())
}

/// Recorded column assignment of a vertical split; replaying it reproduces
/// the split bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub checksum: String,
    pub n: usize,
    pub m_a: usize,
    pub m_b: usize,
    pub columns_a: Vec<usize>,
    pub columns_b: Vec<usize>,
    pub seed: Option<u64>,
}

// ---------------------------------------------------------------------------
// loaders

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Loads a headered CSV. A column named `label` (any position) becomes the
/// label vector; all other cells must parse as finite f64.
pub fn load_dense_csv(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let label_col = headers.iter().position(|h| h == "label");
    let column_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != label_col)
        .map(|(_, h)| h.to_string())
        .collect();

    let cols = column_names.len();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        for (j, cell) in record.iter().enumerate() {
            if Some(j) == label_col {
                labels.push(parse_label_cell(cell).ok_or_else(|| {
                    parse_err(path, line, format!("label {cell:?} is not an integer 0..=255"))
                })?);
            } else {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(path, line, format!("non-numeric cell {cell:?}")))?;
                if !v.is_finite() {
                    return Err(parse_err(path, line, format!("non-finite cell {cell:?}")));
                }
                data.push(v);
            }
        }
    }
    if data.is_empty() && labels.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(Dataset {
        features: FeatureMatrix::Dense { cols, data },
        labels: label_col.map(|_| labels),
        column_names,
    })
}

fn parse_label_cell(cell: &str) -> Option<u8> {
    let cell = cell.trim();
    if let Ok(v) = cell.parse::<u8>() {
        return Some(v);
    }
    // tolerate float-formatted integers like "3.0"
    let f: f64 = cell.parse().ok()?;
    if f.is_finite() && f.fract() == 0.0 && (0.0..=255.0).contains(&f) {
        Some(f as u8)
    } else {
        None
    }
}

/// Loads LIBSVM-format text (`label idx:val ...`, 1-based indices). Labels
/// map `{-1, 0} -> 0` and `{+1, 1} -> 1`; indices become 0-based and must be
/// strictly increasing within a line.
pub fn load_libsvm(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut max_index = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line?;
        let text = line.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let mut tokens = text.split_whitespace();
        let label_tok = tokens.next().unwrap();
        let label = match label_tok {
            "-1" | "0" => 0u8,
            "1" | "+1" => 1u8,
            other => {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("label {other:?} not in {{-1, 0, +1, 1}}"),
                ))
            }
        };
        let mut row = Vec::new();
        let mut prev: Option<usize> = None;
        for tok in tokens {
            let (idx_s, val_s) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(path, line_no, format!("malformed token {tok:?}")))?;
            let one_based: usize = idx_s
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("bad index {idx_s:?}")))?;
            if one_based == 0 {
                return Err(parse_err(path, line_no, "index 0 in 1-based format"));
            }
            let j = one_based - 1;
            if prev.is_some_and(|p| j <= p) {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("indices not strictly increasing at {one_based}"),
                ));
            }
            let v: f64 = val_s
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("bad value {val_s:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line_no, format!("non-finite value {val_s:?}")));
            }
            prev = Some(j);
            max_index = max_index.max(one_based);
            row.push((j, v));
        }
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let column_names = (0..max_index).map(|j| format!("f{j}")).collect();
    Ok(Dataset {
        features: FeatureMatrix::Sparse {
            cols: max_index,
            rows,
        },
        labels: Some(labels),
        column_names,
    })
}

/// Maps digit labels 0..=9 to parity classes: odd -> 1, even -> 0.
pub fn binarize_digits(labels: &[u8]) -> Result<Vec<u8>, DataError> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if d > 9 {
                Err(DataError::DigitOutOfRange(d, i))
            } else {
                Ok(d % 2)
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// vertical split

/// Partitions columns into party shards. With `seed: None` the first `m_a`
/// columns go to A; with a seed the assignment is a reproducible shuffle.
/// Row order is untouched on both sides, and labels go only to A.
pub fn vertical_split(
    source: &Dataset,
    m_a: usize,
    seed: Option<u64>,
) -> Result<(VerticalDataset, VerticalDataset, SplitManifest), DataError> {
    let m = source.features.cols();
    let n = source.features.rows();
    if m_a == 0 || m_a >= m {
        return Err(DataError::BadSplit { m_a, m });
    }
    let labels = source.labels.as_ref().ok_or(DataError::MissingLabels)?;
    for (i, &y) in labels.iter().enumerate() {
        if y > 1 {
            return Err(DataError::NonBinaryLabel(y, i));
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    if let Some(s) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    let columns_a = order[..m_a].to_vec();
    let columns_b = order[m_a..].to_vec();
    let manifest = SplitManifest {
        checksum: dataset_checksum(source),
        n,
        m_a,
        m_b: m - m_a,
        columns_a,
        columns_b,
        seed,
    };
    let (a, b) = shards_from_manifest(source, &manifest, labels);
    Ok((a, b, manifest))
}

/// Replays a recorded split against a source dataset, verifying the checksum.
pub fn apply_manifest(
    source: &Dataset,
    manifest: &SplitManifest,
) -> Result<(VerticalDataset, VerticalDataset), DataError> {
    let actual = dataset_checksum(source);
    if actual != manifest.checksum {
        return Err(DataError::ManifestMismatch(format!(
            "checksum {actual} != recorded {}",
            manifest.checksum
        )));
    }
    let labels = source.labels.as_ref().ok_or(DataError::MissingLabels)?;
    Ok(shards_from_manifest(source, manifest, labels))
}

fn shards_from_manifest(
    source: &Dataset,
    manifest: &SplitManifest,
    labels: &[u8],
) -> (VerticalDataset, VerticalDataset) {
    let pick_names = |cols: &[usize]| -> Vec<String> {
        cols.iter()
            .map(|&j| source.column_names.get(j).cloned().unwrap_or_default())
            .collect()
    };
    let a = VerticalDataset {
        role: PartyRole::A,
        features: source.features.select_columns(&manifest.columns_a),
        labels: Some(labels.to_vec()),
        column_names: pick_names(&manifest.columns_a),
    };
    let b = VerticalDataset {
        role: PartyRole::B,
        features: source.features.select_columns(&manifest.columns_b),
        labels: None,
        column_names: pick_names(&manifest.columns_b),
    };
    (a, b)
}

/// Inverse of `vertical_split`: reassembles the source dataset from the two
/// shards and the manifest. The result's checksum equals the recorded one.
pub fn merge_shards(
    a: &VerticalDataset,
    b: &VerticalDataset,
    manifest: &SplitManifest,
) -> Result<Dataset, DataError> {
    if a.rows() != b.rows() || a.rows() != manifest.n {
        return Err(DataError::ShapeMismatch(format!(
            "row counts A={} B={} manifest={}",
            a.rows(),
            b.rows(),
            manifest.n
        )));
    }
    if a.cols() != manifest.columns_a.len() || b.cols() != manifest.columns_b.len() {
        return Err(DataError::ManifestMismatch(format!(
            "column counts A={} B={} vs manifest {}+{}",
            a.cols(),
            b.cols(),
            manifest.columns_a.len(),
            manifest.columns_b.len()
        )));
    }
    let m = manifest.m_a + manifest.m_b;
    let n = manifest.n;
    let mut column_names = vec![String::new(); m];
    for (local, &src) in manifest.columns_a.iter().enumerate() {
        column_names[src] = a.column_names[local].clone();
    }
    for (local, &src) in manifest.columns_b.iter().enumerate() {
        column_names[src] = b.column_names[local].clone();
    }

    let features = if a.features.is_sparse() || b.features.is_sparse() {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (shard, columns) in [(a, &manifest.columns_a), (b, &manifest.columns_b)] {
            for (i, row) in rows.iter_mut().enumerate() {
                shard
                    .features
                    .for_each_in_row(i, |local, x| {
                        if x != 0.0 || shard.features.is_sparse() {
                            row.push((columns[local], x));
                        }
                    });
            }
        }
        for row in &mut rows {
            row.sort_unstable_by_key(|&(j, _)| j);
        }
        FeatureMatrix::Sparse { cols: m, rows }
    } else {
        let mut data = vec![0.0f64; n * m];
        for (shard, columns) in [(a, &manifest.columns_a), (b, &manifest.columns_b)] {
            for i in 0..n {
                shard
                    .features
                    .for_each_in_row(i, |local, x| data[i * m + columns[local]] = x);
            }
        }
        FeatureMatrix::Dense { cols: m, data }
    };

    Ok(Dataset {
        features,
        labels: a.labels.clone(),
        column_names,
    })
}

/// SHA-256 over a canonical byte serialization (bit patterns of every value,
/// labels, column names). Two datasets hash equal iff identical.
pub fn dataset_checksum(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(b"names\0");
    for name in &dataset.column_names {
        h.update(name.as_bytes());
        h.update([0u8]);
    }
    match &dataset.features {
        FeatureMatrix::Dense { cols, data } => {
            h.update(b"dense\0");
            h.update((*cols as u64).to_le_bytes());
            for v in data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        FeatureMatrix::Sparse { cols, rows } => {
            h.update(b"sparse\0");
            h.update((*cols as u64).to_le_bytes());
            for row in rows {
                h.update((row.len() as u64).to_le_bytes());
                for (j, v) in row {
                    h.update((*j as u64).to_le_bytes());
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
    }
    match &dataset.labels {
        Some(labels) => {
            h.update(b"labels\0");
            h.update(labels);
        }
        None => h.update(b"nolabels\0"),
    }
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

// ---------------------------------------------------------------------------
// standardization

/// Per-column affine transform `x -> (x - mean) / std`, fitted locally on one
/// party's shard. For sparse data only the scale is applied (centering would
/// densify), with moments still computed over all rows (zeros included).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub center: bool,
}

pub fn fit_standardizer(features: &FeatureMatrix) -> Standardizer {
    let n = features.rows().max(1);
    let m = features.cols();
    let mut sum = vec![0.0f64; m];
    let mut sum_sq = vec![0.0f64; m];
    for i in 0..features.rows() {
        features.for_each_in_row(i, |j, x| {
            sum[j] += x;
            sum_sq[j] += x * x;
        });
    }
    let means: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let stds: Vec<f64> = sum_sq
        .iter()
        .zip(&means)
        .map(|(sq, mean)| {
            let var = (sq / n as f64 - mean * mean).max(0.0);
            let sd = var.sqrt();
            if sd > 0.0 { sd } else { 1.0 }
        })
        .collect();
    Standardizer {
        means,
        stds,
        center: !features.is_sparse(),
    }
}

impl Standardizer {
    pub fn apply(&self, features: &mut FeatureMatrix) -> Result<(), DataError> {
        if self.means.len() != features.cols() {
            return Err(DataError::ShapeMismatch(format!(
                "standardizer fitted on {} columns, applied to {}",
                self.means.len(),
                features.cols()
            )));
        }
        match features {
            FeatureMatrix::Dense { cols, data } => {
                for (idx, v) in data.iter_mut().enumerate() {
                    let j = idx % *cols;
                    *v = if self.center {
                        (*v - self.means[j]) / self.stds[j]
                    } else {
                        *v / self.stds[j]
                    };
                }
            }
            FeatureMatrix::Sparse { rows, .. } => {
                for row in rows {
                    for (j, v) in row {
                        *v /= self.stds[*j];
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// shard files

/// Writes a shard as CSV: feature columns under their names, plus a trailing
/// `label` column when the shard has labels.
pub fn save_dense_csv(path: impl AsRef<Path>, shard: &VerticalDataset) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut header: Vec<&str> = shard.column_names.iter().map(String::as_str).collect();
    if shard.labels.is_some() {
        header.push("label");
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..shard.rows() {
        let mut cells: Vec<String> = Vec::with_capacity(shard.cols() + 1);
        shard.features.for_each_in_row(i, |_, x| cells.push(format!("{x}")));
        if let Some(labels) = &shard.labels {
            cells.push(labels[i].to_string());
        }
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a shard in LIBSVM format. Label-less shards (party B) get a
/// placeholder label of 0 on every line, which `load_shard` discards again.
pub fn save_libsvm(path: impl AsRef<Path>, shard: &VerticalDataset) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..shard.rows() {
        let label = shard.labels.as_ref().map_or(0, |l| l[i]);
        let mut line = label.to_string();
        shard.features.for_each_in_row(i, |j, x| {
            if x != 0.0 {
                line.push_str(&format!(" {}:{x}", j + 1));
            }
        });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a shard back for one party, inferring CSV vs LIBSVM from the
/// extension (`.csv` → dense, anything else → sparse). Party B shards drop
/// any label column.
pub fn load_shard(path: impl AsRef<Path>, role: PartyRole) -> Result<VerticalDataset, DataError> {
    let path = path.as_ref();
    let is_csv = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false);
    let loaded = if is_csv {
        load_dense_csv(path)?
    } else {
        load_libsvm(path)?
    };
    let shard = VerticalDataset {
        role,
        labels: match role {
            PartyRole::A => Some(loaded.labels.ok_or(DataError::MissingLabels)?),
            PartyRole::B => None,
        },
        features: loaded.features,
        column_names: loaded.column_names,
    };
    shard.validate()?;
    Ok(shard)
}

// ---------------------------------------------------------------------------
// synthetic data

/// Synthetic digit-image dataset: 784 pixel columns in 0..=255 and labels
/// 0..=9, generated from ten fixed class templates plus per-row noise.
/// Deterministic in the seed.
pub fn gen_digits(n: usize, seed: u64) -> Dataset {
    const PIXELS: usize = 784;
    const ACTIVE_PER_CLASS: usize = 140;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut templates = Vec::with_capacity(10);
    for _ in 0..10 {
        let mut order: Vec<usize> = (0..PIXELS).collect();
        order.shuffle(&mut rng);
        let mut template = vec![0u8; PIXELS];
        for &p in &order[..ACTIVE_PER_CLASS] {
            template[p] = rng.gen_range(120..=255);
        }
        templates.push(template);
    }
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = (i % 10) as u8;
        let template = &templates[digit as usize];
        for &t in template {
            let v = if t > 0 {
                if rng.gen_bool(0.1) {
                    0 // dropout
                } else {
                    (i32::from(t) + rng.gen_range(-25..=25)).clamp(0, 255) as u8
                }
            } else if rng.gen_bool(0.05) {
                rng.gen_range(1..=40)
            } else {
                0
            };
            data.push(f64::from(v));
        }
        labels.push(digit);
    }
    Dataset {
        features: FeatureMatrix::Dense { cols: PIXELS, data },
        labels: Some(labels),
        column_names: (0..PIXELS).map(|j| format!("p{j}")).collect(),
    }
}

/// Two-class dataset drawn from a logistic model: standard-normal features,
/// labels sampled with probability `sigmoid(2 · x·w)` for a random unit-ish
/// weight vector. Deterministic in the seed.
pub fn gen_blobs(n: usize, m: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_true: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let normal = rand_distr::StandardNormal;
    let mut data = Vec::with_capacity(n * m);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut z = 0.0;
        for j in 0..m {
            let x: f64 = rng.sample(normal);
            z += x * w_true[j];
            data.push(x);
        }
        let p = 1.0 / (1.0 + (-2.0 * z).exp());
        labels.push(u8::from(rng.gen_bool(p)));
    }
    Dataset {
        features: FeatureMatrix::Dense { cols: m, data },
        labels: Some(labels),
        column_names: (0..m).map(|j| format!("x{j}")).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(content: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn dense_csv_literal() {
        let f = write_temp("a,b\n1.0,2.0\n3.5,-4.25\n", ".csv");
        let ds = load_dense_csv(f.path()).unwrap();
        assert_eq!(ds.column_names, vec!["a", "b"]);
        assert_eq!(
            ds.features,
            FeatureMatrix::Dense {
                cols: 2,
                data: vec![1.0, 2.0, 3.5, -4.25]
            }
        );
        assert!(ds.labels.is_none());
    }

    #[test]
    fn dense_csv_with_labels() {
        let f = write_temp("x,label,y\n1,0,2\n3,1,4\n", ".csv");
        let ds = load_dense_csv(f.path()).unwrap();
        assert_eq!(ds.column_names, vec!["x", "y"]);
        assert_eq!(ds.labels, Some(vec![0, 1]));
        assert_eq!(
            ds.features,
            FeatureMatrix::Dense {
                cols: 2,
                data: vec![1.0, 2.0, 3.0, 4.0]
            }
        );
    }

    #[test]
    fn dense_csv_header_only_is_empty() {
        let f = write_temp("a,b\n", ".csv");
        assert!(matches!(load_dense_csv(f.path()), Err(DataError::Empty)));
    }

    #[test]
    fn dense_csv_ragged_row_reports_line() {
        let f = write_temp("a,b\n1,2\n3\n", ".csv");
        match load_dense_csv(f.path()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dense_csv_bad_cell_reports_line() {
        let f = write_temp("a,b\n1,2\n3,potato\n", ".csv");
        match load_dense_csv(f.path()) {
            Err(DataError::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("potato"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let nan = write_temp("a\nNaN\n", ".csv");
        assert!(load_dense_csv(nan.path()).is_err());
    }

    #[test]
    fn libsvm_basic_lines() {
        let f = write_temp("1 3:2.5\n-1\n+1 1:1 4:-0.5\n", ".libsvm");
        let ds = load_libsvm(f.path()).unwrap();
        assert_eq!(ds.labels, Some(vec![1, 0, 1]));
        assert_eq!(
            ds.features,
            FeatureMatrix::Sparse {
                cols: 4,
                rows: vec![vec![(2, 2.5)], vec![], vec![(0, 1.0), (3, -0.5)]]
            }
        );
    }

    #[test]
    fn libsvm_rejects_bad_lines() {
        for (content, needle) in [
            ("1 3:2.5 2:1.0\n", "increasing"),
            ("1 0:2.5\n", "index 0"),
            ("1 3=2.5\n", "malformed"),
            ("5 1:1\n", "label"),
            ("1 2:abc\n", "bad value"),
        ] {
            let f = write_temp(content, ".libsvm");
            match load_libsvm(f.path()) {
                Err(DataError::Parse { line, msg, .. }) => {
                    assert_eq!(line, 1, "{content:?}");
                    assert!(msg.contains(needle), "{content:?} -> {msg}");
                }
                other => panic!("{content:?}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn binarize_cases() {
        assert_eq!(binarize_digits(&[0, 1, 2, 3]).unwrap(), vec![0, 1, 0, 1]);
        assert_eq!(binarize_digits(&[0, 2, 4, 6, 8]).unwrap(), vec![0; 5]);
        assert!(matches!(
            binarize_digits(&[1, 10]),
            Err(DataError::DigitOutOfRange(10, 1))
        ));
    }

    fn demo_dataset() -> Dataset {
        Dataset {
            features: FeatureMatrix::Dense {
                cols: 4,
                data: (0..20).map(f64::from).collect(),
            },
            labels: Some(vec![0, 1, 0, 1, 1]),
            column_names: vec!["c0".into(), "c1".into(), "c2".into(), "c3".into()],
        }
    }

    #[test]
    fn split_contiguous_default() {
        let ds = demo_dataset();
        let (a, b, manifest) = vertical_split(&ds, 2, None).unwrap();
        assert_eq!(manifest.columns_a, vec![0, 1]);
        assert_eq!(manifest.columns_b, vec![2, 3]);
        assert_eq!(a.column_names, vec!["c0", "c1"]);
        assert_eq!(b.column_names, vec!["c2", "c3"]);
        assert_eq!(a.labels, Some(vec![0, 1, 0, 1, 1]));
        assert!(b.labels.is_none());
        a.validate().unwrap();
        b.validate().unwrap();
        assert_eq!(
            a.features,
            FeatureMatrix::Dense {
                cols: 2,
                data: vec![0., 1., 4., 5., 8., 9., 12., 13., 16., 17.]
            }
        );
    }

    #[test]
    fn split_rejects_bad_m_a() {
        let ds = demo_dataset();
        assert!(matches!(
            vertical_split(&ds, 4, None),
            Err(DataError::BadSplit { m_a: 4, m: 4 })
        ));
        assert!(vertical_split(&ds, 0, None).is_err());
        let mut unlabeled = ds.clone();
        unlabeled.labels = None;
        assert!(matches!(
            vertical_split(&unlabeled, 2, None),
            Err(DataError::MissingLabels)
        ));
    }

    #[test]
    fn split_merge_roundtrip_dense() {
        let ds = demo_dataset();
        for seed in [None, Some(7u64), Some(99)] {
            let (a, b, manifest) = vertical_split(&ds, 2, seed).unwrap();
            let merged = merge_shards(&a, &b, &manifest).unwrap();
            assert_eq!(merged, ds, "seed {seed:?}");
            assert_eq!(dataset_checksum(&merged), manifest.checksum);
        }
    }

    #[test]
    fn split_merge_roundtrip_sparse() {
        let ds = Dataset {
            features: FeatureMatrix::Sparse {
                cols: 6,
                rows: vec![
                    vec![(0, 1.0), (5, -2.0)],
                    vec![],
                    vec![(1, 3.0), (2, 4.0), (4, 0.5)],
                ],
            },
            labels: Some(vec![1, 0, 1]),
            column_names: (0..6).map(|j| format!("f{j}")).collect(),
        };
        for seed in [None, Some(3u64)] {
            let (a, b, manifest) = vertical_split(&ds, 2, seed).unwrap();
            a.validate().unwrap();
            b.validate().unwrap();
            let merged = merge_shards(&a, &b, &manifest).unwrap();
            assert_eq!(merged, ds, "seed {seed:?}");
        }
    }

    #[test]
    fn manifest_replay_is_bit_exact() {
        let ds = demo_dataset();
        let (a1, b1, manifest) = vertical_split(&ds, 3, Some(42)).unwrap();
        let (a2, b2, manifest2) = vertical_split(&ds, 3, Some(42)).unwrap();
        assert_eq!(manifest, manifest2);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        let (a3, b3) = apply_manifest(&ds, &manifest).unwrap();
        assert_eq!(a1, a3);
        assert_eq!(b1, b3);

        let mut other = ds.clone();
        if let FeatureMatrix::Dense { data, .. } = &mut other.features {
            data[0] += 1.0;
        }
        assert!(matches!(
            apply_manifest(&other, &manifest),
            Err(DataError::ManifestMismatch(_))
        ));
    }

    #[test]
    fn row_alignment_sentinels() {
        // column 0 carries the row id; after a shuffled split the id column
        // sits on one side and must still agree with merged row order.
        let n = 11;
        let ds = Dataset {
            features: FeatureMatrix::Dense {
                cols: 3,
                data: (0..n).flat_map(|i| [i as f64, 100.0 + i as f64, -(i as f64)]).collect(),
            },
            labels: Some((0..n).map(|i| (i % 2) as u8).collect()),
            column_names: vec!["id".into(), "v".into(), "w".into()],
        };
        let (a, b, manifest) = vertical_split(&ds, 1, Some(5)).unwrap();
        let merged = merge_shards(&a, &b, &manifest).unwrap();
        if let FeatureMatrix::Dense { cols, data } = &merged.features {
            for i in 0..n {
                assert_eq!(data[i * cols], i as f64);
                assert_eq!(data[i * cols + 1], 100.0 + i as f64);
            }
        } else {
            panic!("dense expected");
        }
    }

    #[test]
    fn manifest_json_shape() {
        let ds = demo_dataset();
        let (_, _, manifest) = vertical_split(&ds, 2, Some(9)).unwrap();
        let json = serde_json::to_value(&manifest).unwrap();
        for key in ["checksum", "n", "m_a", "m_b", "columns_a", "columns_b", "seed"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        let back: SplitManifest = serde_json::from_value(json).unwrap();
        assert_eq!(back, manifest);
    }

    #[test]
    fn standardize_dense() {
        let mut features = FeatureMatrix::Dense {
            cols: 2,
            data: vec![1.0, 5.0, 3.0, 5.0, 5.0, 5.0],
        };
        let std = fit_standardizer(&features);
        std.apply(&mut features).unwrap();
        if let FeatureMatrix::Dense { data, .. } = &features {
            let col0: Vec<f64> = vec![data[0], data[2], data[4]];
            let mean: f64 = col0.iter().sum::<f64>() / 3.0;
            let var: f64 = col0.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
            // constant column: centered to zero, no NaN from zero variance
            assert_eq!(data[1], 0.0);
            assert_eq!(data[3], 0.0);
        } else {
            panic!("dense expected");
        }
    }

    #[test]
    fn standardize_sparse_keeps_pattern() {
        let mut features = FeatureMatrix::Sparse {
            cols: 3,
            rows: vec![vec![(0, 4.0)], vec![(0, -4.0), (2, 1.0)], vec![]],
        };
        let std = fit_standardizer(&features);
        assert!(!std.center);
        std.apply(&mut features).unwrap();
        if let FeatureMatrix::Sparse { rows, .. } = &features {
            assert_eq!(rows[2], vec![]);
            assert_eq!(rows[0].len(), 1);
            assert!(rows[0][0].1.is_finite());
        } else {
            panic!("sparse expected");
        }
    }

    #[test]
    fn shard_file_roundtrips() {
        let ds = demo_dataset();
        let (a, b, _) = vertical_split(&ds, 2, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let a_path = dir.path().join("a.csv");
        let b_path = dir.path().join("b.csv");
        save_dense_csv(&a_path, &a).unwrap();
        save_dense_csv(&b_path, &b).unwrap();
        assert_eq!(load_shard(&a_path, PartyRole::A).unwrap(), a);
        assert_eq!(load_shard(&b_path, PartyRole::B).unwrap(), b);

        let sparse = VerticalDataset {
            role: PartyRole::B,
            features: FeatureMatrix::Sparse {
                cols: 5,
                rows: vec![vec![(1, 0.25), (4, -3.5)], vec![]],
            },
            labels: None,
            column_names: (0..5).map(|j| format!("f{j}")).collect(),
        };
        let s_path = dir.path().join("b.libsvm");
        save_libsvm(&s_path, &sparse).unwrap();
        let loaded = load_shard(&s_path, PartyRole::B).unwrap();
        // trailing all-zero columns are not representable in LIBSVM, so only
        // compare up to the last populated column
        assert_eq!(loaded.features, FeatureMatrix::Sparse {
            cols: 5,
            rows: vec![vec![(1, 0.25), (4, -3.5)], vec![]],
        });
    }

    #[test]
    fn gen_blobs_is_learnable_and_deterministic() {
        let ds = gen_blobs(200, 6, 31);
        assert_eq!(ds.features.rows(), 200);
        assert_eq!(ds.features.cols(), 6);
        let labels = ds.labels.as_ref().unwrap();
        assert!(labels.iter().any(|&y| y == 0) && labels.iter().any(|&y| y == 1));
        assert_eq!(gen_blobs(200, 6, 31), ds);
        assert_ne!(gen_blobs(200, 6, 32), ds);
    }

    #[test]
    fn gen_digits_shape_and_balance() {
        let ds = gen_digits(500, 1);
        assert_eq!(ds.features.cols(), 784);
        assert_eq!(ds.features.rows(), 500);
        let labels = ds.labels.as_ref().unwrap();
        assert!(labels.iter().all(|&d| d <= 9));
        let binary = binarize_digits(labels).unwrap();
        let pos = binary.iter().filter(|&&y| y == 1).count() as f64 / 500.0;
        assert!((0.4..=0.6).contains(&pos), "positive fraction {pos}");
        if let FeatureMatrix::Dense { data, .. } = &ds.features {
            assert!(data.iter().all(|&v| (0.0..=255.0).contains(&v)));
        }
        assert_eq!(gen_digits(500, 1), ds);
    }

    #[test]
    fn mnist_shape_if_available() {
        let Ok(path) = std::env::var("MNIST_CSV") else {
            eprintln!("MNIST_CSV unset; skipping");
            return;
        };
        let ds = load_dense_csv(path).unwrap();
        assert_eq!(ds.features.rows(), 70_000);
        assert_eq!(ds.features.cols(), 784);
        let binary = binarize_digits(ds.labels.as_ref().unwrap()).unwrap();
        let pos = binary.iter().filter(|&&y| y == 1).count() as f64 / 70_000.0;
        assert!((0.45..=0.55).contains(&pos), "positive fraction {pos}");
    }

    #[test]
    fn citeseer_nonzeros_if_available() {
        let Ok(path) = std::env::var("CITESEER_LIBSVM") else {
            eprintln!("CITESEER_LIBSVM unset; skipping");
            return;
        };
        let ds = load_libsvm(path).unwrap();
        assert_eq!(ds.features.nonzeros(), 512_267);
    }
}
