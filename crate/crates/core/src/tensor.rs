//! Dense parameter tensors and named parameter sets.
//!
//! Parameters are stored in f32 (the checkpoint wire format) while all
//! arithmetic throughout the crate promotes to f64, so tolerances on
//! gradients and path equivalence are limited by f64 rounding only.

use crate::{Error, Result};

/// Row-major dense matrix of f32 parameters. Vectors (biases) are
/// `rows x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// `out[r] = bias_or_zero + sum_c self[r,c] * x[c]`, accumulated in f64.
    /// Accumulation starts at the bias and walks columns in order; the tape
    /// path uses the identical order so both forwards agree bit for bit.
    pub fn matvec_into(&self, x: &[f64], bias: Option<&Mat>, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for r in 0..self.rows {
            let mut acc = match bias {
                Some(b) => b.data[r] as f64,
                None => 0.0,
            };
            for (w, xv) in self.row(r).iter().zip(x) {
                acc += *w as f64 * xv;
            }
            out[r] = acc;
        }
    }
}

/// Identifier of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors. Order is the identity
/// used by gradient maps, the optimizer and the checkpoint container.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    mats: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, mat: Mat) -> ParamId {
        self.names.push(name.into());
        self.mats.push(mat);
        ParamId(self.mats.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn mat(&self, id: ParamId) -> &Mat {
        &self.mats[id.0]
    }

    pub fn mat_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.mats[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|id| self.mat(id))
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(|n| n.as_str()).zip(self.mats.iter())
    }

    /// Total scalar parameter count.
    pub fn total_scalars(&self) -> usize {
        self.mats.iter().map(|m| m.len()).sum()
    }

    pub fn zero_grads(&self) -> GradMap {
        GradMap { grads: self.mats.iter().map(|m| vec![0.0; m.len()]).collect() }
    }
}

/// Per-parameter gradients, in f64, parallel to a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradMap {
    grads: Vec<Vec<f64>>,
}

impl GradMap {
    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn by_name<'a>(&'a self, params: &ParamSet, name: &str) -> Option<&'a [f64]> {
        params.id(name).map(|id| self.grad(id))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise accumulate another gradient map (fixed order).
    pub fn add_assign(&mut self, other: &GradMap) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x *= k;
            }
        }
    }

    /// Global L2 norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
