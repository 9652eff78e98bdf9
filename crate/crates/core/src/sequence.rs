use crate::error::{Error, Result};

/// Record label as stored in caches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Coherent,
    Corrupted,
    Unlabeled,
}

impl Label {
    pub fn code(self) -> u8 {
        match self {
            Label::Coherent => 0,
            Label::Corrupted => 1,
            Label::Unlabeled => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Coherent),
            1 => Some(Label::Corrupted),
            2 => Some(Label::Unlabeled),
            _ => None,
        }
    }
}

/// A `positions × dim` matrix of encoder outputs, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub id: String,
    pub label: Label,
    positions: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingSequence {
    pub fn new(id: impl Into<String>, positions: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if positions == 0 || dim == 0 {
            return Err(Error::data(format!(
                "sequence must be non-empty, got {positions}x{dim}"
            )));
        }
        if data.len() != positions * dim {
            return Err(Error::data(format!(
                "sequence data has {} values, {positions}x{dim} needs {}",
                data.len(),
                positions * dim
            )));
        }
        Ok(EmbeddingSequence {
            id: id.into(),
            label: Label::Coherent,
            positions,
            dim,
            data,
        })
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn same_shape(&self, other: &EmbeddingSequence) -> bool {
        self.positions == other.positions && self.dim == other.dim
    }

    /// Mean Euclidean norm of the rows.
    pub fn mean_row_norm(&self) -> f64 {
        let total: f64 = (0..self.positions).map(|t| norm(self.row(t))).sum();
        total / self.positions as f64
    }

    /// Indices of rows that differ from `other` by more than `tol` in any
    /// coordinate. Both sequences must have the same shape.
    pub fn differing_rows(&self, other: &EmbeddingSequence, tol: f64) -> Vec<usize> {
        debug_assert!(self.same_shape(other));
        (0..self.positions)
            .filter(|&t| self.row(t).iter().zip(other.row(t)).any(|(a, b)| (a - b).abs() > tol))
            .collect()
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}
