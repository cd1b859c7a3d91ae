//! Numeric containers shared by every stage of the pipeline.

use std::fmt;

use thiserror::Error;

/// Number of retained flow attributes (duration, protocol, ports, packets,
/// bytes, flags).
pub const NUM_FEATURES: usize = 7;

/// Number of traffic classes after filtering.
pub const NUM_CLASSES: usize = 3;

/// Names of the encoded feature columns, in storage order.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "duration", "protocol", "src_port", "dst_port", "packets", "bytes", "flags",
];

/// Traffic class label. The numeric code is fixed across all workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FlowClass {
    Normal = 0,
    Attacker = 1,
    Victim = 2,
}

impl FlowClass {
    pub const ALL: [FlowClass; NUM_CLASSES] =
        [FlowClass::Normal, FlowClass::Attacker, FlowClass::Victim];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    /// Parse a class token, ignoring case and surrounding whitespace.
    /// Tokens outside the retained classes (e.g. `suspicious`) yield `None`.
    pub fn from_token(token: &str) -> Option<Self> {
        match token.trim().to_ascii_lowercase().as_str() {
            "normal" => Some(FlowClass::Normal),
            "attacker" => Some(FlowClass::Attacker),
            "victim" => Some(FlowClass::Victim),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FlowClass::Normal => "normal",
            FlowClass::Attacker => "attacker",
            FlowClass::Victim => "victim",
        }
    }
}

impl fmt::Display for FlowClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("buffer of length {len} is not a multiple of row width {cols}")]
    Ragged { len: usize, cols: usize },
    #[error("{rows} feature rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("row {row} has width {got}, expected {expected}")]
    RowWidth { row: usize, got: usize, expected: usize },
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if cols == 0 || !data.len().is_multiple_of(cols) {
            return Err(ShapeError::Ragged { len: data.len(), cols });
        }
        Ok(Self { rows: data.len() / cols, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(cols: usize, rows: &[R]) -> Result<Self, ShapeError> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(ShapeError::RowWidth { row: i, got: r.len(), expected: cols });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<(), ShapeError> {
        if row.len() != self.cols {
            return Err(ShapeError::RowWidth { row: self.rows, got: row.len(), expected: self.cols });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }
}

/// Feature matrix plus one class code per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn empty(dim: usize) -> Self {
        Self { features: Matrix::zeros(0, dim), labels: Vec::new() }
    }

    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self, ShapeError> {
        if features.rows() != labels.len() {
            return Err(ShapeError::LabelCount { rows: features.rows(), labels: labels.len() });
        }
        for (r, row) in features.iter_rows().enumerate() {
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(ShapeError::NonFinite { row: r, col: c });
            }
        }
        Ok(Self { features, labels })
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R], labels: Vec<usize>) -> Result<Self, ShapeError> {
        Self::new(Matrix::from_rows(dim, rows)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn push(&mut self, row: &[f64], label: usize) -> Result<(), ShapeError> {
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(ShapeError::NonFinite { row: self.len(), col: c });
        }
        self.features.push_row(row)?;
        self.labels.push(label);
        Ok(())
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self { features: Matrix { rows: indices.len(), cols: dim, data }, labels }
    }

    /// Stack datasets of equal width. Returns `None` for an empty slice.
    pub fn concat(parts: &[&LabeledDataset]) -> Option<Self> {
        let dim = parts.first()?.dim();
        let mut out = Self::empty(dim);
        for p in parts {
            assert_eq!(p.dim(), dim, "concat of datasets with different widths");
            out.features.data.extend_from_slice(p.features.as_slice());
            out.features.rows += p.len();
            out.labels.extend_from_slice(&p.labels);
        }
        Some(out)
    }

    /// Per-class row counts for codes `0..n_classes`; larger codes are ignored.
    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &l in &self.labels {
            if l < n_classes {
                counts[l] += 1;
            }
        }
        counts
    }

    /// Row indices grouped by class code, each list ascending.
    pub fn indices_by_class(&self, n_classes: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            if l < n_classes {
                out[l].push(i);
            }
        }
        out
    }

    /// Replace the features with `f(row)` for every row.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let mut features = self.features.clone();
        for r in 0..self.len() {
            let src = self.features.row(r);
            f(src, features.row_mut(r));
        }
        Self { features, labels: self.labels.clone() }
    }
}
