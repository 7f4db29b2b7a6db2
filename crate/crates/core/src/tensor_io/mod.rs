//! Matrices, logit/feature containers, file IO and per-row logit sorting.
//!
//! Everything is held as row-major `f64` regardless of the on-disk dtype.
//! Loaded data is validated once (finite entries, consistent shapes) and is
//! immutable afterwards.

mod npy;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single column vector.
    pub fn column_vector(values: Vec<f64>) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact on an empty-width matrix would panic
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.iter_rows().map(|row| row[c]).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Errors with the first non-finite position, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite {
                row: i / self.cols,
                col: i % self.cols,
            }),
            None => Ok(()),
        }
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Concatenates matrices with equal column counts top to bottom.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::Shape(format!(
                    "cannot stack {} columns onto {cols}",
                    m.cols
                )));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix { rows, cols, data })
    }
}

/// Logits of a classifier: one row per sample, one column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix(Matrix);

impl LogitMatrix {
    pub fn new(data: Matrix) -> Result<Self> {
        if data.rows == 0 {
            return Err(Error::Empty("logit matrix has no rows"));
        }
        if data.cols < 2 {
            return Err(Error::Shape(format!(
                "logit matrix needs at least 2 classes, found {}",
                data.cols
            )));
        }
        data.check_finite()?;
        Ok(LogitMatrix(data))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn n_samples(&self) -> usize {
        self.0.rows
    }

    pub fn n_classes(&self) -> usize {
        self.0.cols
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.0.row(r)
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.0.iter_rows()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        Self::new(self.0.select_rows(indices))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Train,
    Test,
    Pseudo,
}

/// Logits with every row sorted in descending order; column `i` holds the
/// (i+1)-th largest logit of each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedLogitMatrix {
    data: Matrix,
    provenance: Provenance,
}

impl SortedLogitMatrix {
    /// Wraps rows that are already sorted descending. Fails if any row is not.
    pub fn from_presorted(data: Matrix, provenance: Provenance) -> Result<Self> {
        let data = LogitMatrix::new(data)?.into_matrix();
        for (r, row) in data.iter_rows().enumerate() {
            if let Some(i) = row.windows(2).position(|w| w[0] < w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "row {r} is not sorted descending at rank {}",
                    i + 1
                )));
            }
        }
        Ok(SortedLogitMatrix { data, provenance })
    }

    pub fn n_samples(&self) -> usize {
        self.data.rows
    }

    pub fn n_classes(&self) -> usize {
        self.data.cols
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.data.row(r)
    }

    /// Values of 1-based rank `rank` across all samples.
    pub fn rank_column(&self, rank: usize) -> Vec<f64> {
        self.data.column(rank - 1)
    }

    /// Seeded uniform subsample of `d` rows without replacement, original
    /// row order preserved. Returns a clone when `d >= n_samples`.
    pub fn subsample(&self, d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("subsample size must be >= 1".into()));
        }
        if d >= self.n_samples() {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, self.n_samples(), d).into_vec();
        picked.sort_unstable();
        Ok(SortedLogitMatrix {
            data: self.data.select_rows(&picked),
            provenance: self.provenance,
        })
    }
}

/// Penultimate-layer activations: one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Matrix);

impl FeatureMatrix {
    pub fn new(data: Matrix) -> Result<Self> {
        if data.rows == 0 || data.cols == 0 {
            return Err(Error::Empty("feature matrix has no rows or columns"));
        }
        data.check_finite()?;
        Ok(FeatureMatrix(data))
    }

    pub fn n_samples(&self) -> usize {
        self.0.rows
    }

    pub fn dim(&self) -> usize {
        self.0.cols
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.0.row(r)
    }
}

/// Final linear layer: `logits = weights · z + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// C x d, stored row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    dim: usize,
}

impl LinearHead {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weights.rows != bias.len() {
            return Err(Error::Shape(format!(
                "head has {} weight rows but {} biases",
                weights.rows,
                bias.len()
            )));
        }
        if weights.rows < 2 || weights.cols == 0 {
            return Err(Error::Shape(format!(
                "head must map d >= 1 features to C >= 2 classes, got {}x{}",
                weights.rows, weights.cols
            )));
        }
        weights.check_finite()?;
        if let Some(c) = bias.iter().position(|b| !b.is_finite()) {
            return Err(Error::NonFinite { row: c, col: 0 });
        }
        Ok(LinearHead {
            dim: weights.cols,
            weights: weights.into_vec(),
            bias,
        })
    }

    /// All-zero head; forwards every input to uniform logits.
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        LinearHead {
            weights: vec![0.0; n_classes * dim],
            bias: vec![0.0; n_classes],
            dim,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> Matrix {
        Matrix::new(self.n_classes(), self.dim, self.weights.clone()).expect("consistent head")
    }

    pub fn weight_row(&self, c: usize) -> &[f64] {
        &self.weights[c * self.dim..(c + 1) * self.dim]
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Logits for a single feature vector. `z.len()` must equal `dim()`.
    pub fn forward_row(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.dim);
        for (c, o) in out.iter_mut().enumerate() {
            let w = self.weight_row(c);
            *o = w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.bias[c];
        }
    }
}

/// Integer class labels in `[0, C)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(Vec<usize>);

impl LabelVector {
    pub fn new(labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Labels("label vector is empty".into()));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(Error::Labels(format!(
                "label {l} at row {i} is outside [0, {n_classes})"
            )));
        }
        Ok(LabelVector(labels))
    }

    /// Reads labels stored as a single numeric column of whole numbers.
    pub fn from_matrix(m: &Matrix, n_classes: usize) -> Result<Self> {
        if m.cols() != 1 {
            return Err(Error::Labels(format!(
                "labels must be a single column, found {} columns",
                m.cols()
            )));
        }
        let labels = m
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= 0.0 && v.fract() == 0.0 && v < usize::MAX as f64 {
                    Ok(v as usize)
                } else {
                    Err(Error::Labels(format!("row {i}: {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(labels, n_classes)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn distinct_count(&self) -> usize {
        let mut seen = self.0.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

/// Everything one pipeline run consumes.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train_logits: LogitMatrix,
    pub train_features: Option<FeatureMatrix>,
    pub train_labels: Option<LabelVector>,
    pub head: Option<LinearHead>,
    pub id_test_logits: LogitMatrix,
    pub ood_logits: Vec<(String, LogitMatrix)>,
}

impl DatasetBundle {
    pub fn validate(&self) -> Result<()> {
        let c = self.train_logits.n_classes();
        let check = |m: &LogitMatrix| {
            if m.n_classes() == c {
                Ok(())
            } else {
                Err(Error::ClassMismatch {
                    expected: c,
                    found: m.n_classes(),
                })
            }
        };
        check(&self.id_test_logits)?;
        for (_, m) in &self.ood_logits {
            check(m)?;
        }
        if let Some(features) = &self.train_features {
            let head = self.head.as_ref().ok_or_else(|| {
                Error::InvalidArgument("train features supplied without a head".into())
            })?;
            if head.dim() != features.dim() {
                return Err(Error::Shape(format!(
                    "head expects {} features, train features have {}",
                    head.dim(),
                    features.dim()
                )));
            }
        }
        if let Some(head) = &self.head {
            if head.n_classes() != c {
                return Err(Error::ClassMismatch {
                    expected: c,
                    found: head.n_classes(),
                });
            }
        }
        if let Some(labels) = &self.train_labels {
            if labels.len() != self.train_logits.n_samples() {
                return Err(Error::Shape(format!(
                    "{} labels for {} training rows",
                    labels.len(),
                    self.train_logits.n_samples()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Npy,
    Csv,
}

impl Format {
    /// Picks the format from a `.npy` / `.csv` extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("npy") => Ok(Format::Npy),
            Some("csv") => Ok(Format::Csv),
            _ => Err(Error::InvalidArgument(format!(
                "cannot infer format of {}; use a .npy or .csv extension",
                path.display()
            ))),
        }
    }
}

/// Loads a matrix, promoting to f64. 1-d arrays become N x 1.
pub fn load_matrix(path: &Path, format: Format) -> Result<Matrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let m = match format {
        Format::Npy => {
            let raw = npy::read(&mut reader)?;
            let (rows, cols) = match raw.shape.as_slice() {
                [n] => (*n, 1),
                [r, c] => (*r, *c),
                _ => unreachable!("npy reader only returns rank 1 or 2"),
            };
            Matrix::new(rows, cols, raw.values)?
        }
        Format::Csv => read_csv(reader)?,
    };
    if m.is_empty() {
        return Err(Error::Empty("file contains no values"));
    }
    m.check_finite()?;
    Ok(m)
}

/// Loads a matrix, inferring the format from the extension.
pub fn load_matrix_auto(path: &Path) -> Result<Matrix> {
    load_matrix(path, Format::from_path(path)?)
}

pub fn save_matrix(matrix: &Matrix, path: &Path, format: Format) -> Result<()> {
    write_file(path, |w| match format {
        Format::Npy => npy::write(w, &[matrix.rows, matrix.cols], &matrix.data),
        Format::Csv => write_csv(w, matrix),
    })
}

/// Saves a vector: 1-d npy, or one value per line as csv.
pub fn save_vector(values: &[f64], path: &Path, format: Format) -> Result<()> {
    write_file(path, |w| match format {
        Format::Npy => npy::write(w, &[values.len()], values),
        Format::Csv => {
            for v in values {
                writeln!(w, "{v}")?;
            }
            Ok(())
        }
    })
}

fn write_file(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn read_csv<R: std::io::Read>(reader: R) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let expected = *cols.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::RaggedRow {
                row: r,
                expected,
                found: record.len(),
            });
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Csv(format!("row {r}, column {c}: {field:?} is not a number"))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row: r, col: c });
            }
            data.push(v);
        }
        rows += 1;
    }
    Matrix::new(rows, cols.unwrap_or(0), data)
}

fn write_csv<W: Write>(w: &mut W, m: &Matrix) -> std::io::Result<()> {
    for row in m.iter_rows() {
        let mut first = true;
        for v in row {
            if !first {
                w.write_all(b",")?;
            }
            // Display for f64 is the shortest string that parses back exactly
            write!(w, "{v}")?;
            first = false;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// `logits[r][c] = Σ_j weights[c][j] · features[r][j] + bias[c]`.
pub fn apply_head(features: &FeatureMatrix, head: &LinearHead) -> Result<LogitMatrix> {
    if features.dim() != head.dim() {
        return Err(Error::Shape(format!(
            "features have dimension {}, head expects {}",
            features.dim(),
            head.dim()
        )));
    }
    let c = head.n_classes();
    let mut out = Matrix::zeros(features.n_samples(), c);
    out.data
        .par_chunks_mut(c)
        .zip(features.0.data.par_chunks(features.dim()))
        .for_each(|(o, z)| head.forward_row(z, o));
    LogitMatrix::new(out)
}

/// Class indices of `row` ordered by descending logit; equal logits keep
/// ascending class order.
pub fn descending_order(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx
}

/// Sorts every row descending. The input is left untouched.
pub fn sort_logits_desc(logits: &LogitMatrix, provenance: Provenance) -> SortedLogitMatrix {
    let mut data = logits.0.clone();
    let c = data.cols;
    data.data
        .par_chunks_mut(c)
        .for_each(|row| row.sort_by(|a, b| b.total_cmp(a)));
    SortedLogitMatrix { data, provenance }
}
