//! Dense f64 matrices, activation and squashing functions with derivatives.
//!
//! Deliberately plain: row-major `Vec<f64>` storage and hand-written kernels.
//! Gradients elsewhere in the crate are hand-derived per layer, so the only
//! primitives needed here are affine maps, a few transposed products, and
//! elementwise maps.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major dense matrix. `data.len() == rows * cols` always holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Single-row matrix, convenient for vector-valued tests.
    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Extract a contiguous block of rows `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows);
        Self {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Gather rows by index, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        out
    }
}

/// `a * b` with the textbook triple loop, ikj order for cache friendliness.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch(format!(
            "matmul {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Batched affine map `x W^T + b`: inputs are row-stacked (`batch x in`),
/// weights follow the `out x in` convention (row j holds unit j's weights).
pub fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if x.cols != w.cols || w.rows != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "affine x={}x{} w={}x{} b={}",
            x.rows,
            x.cols,
            w.rows,
            w.cols,
            b.len()
        )));
    }
    let mut out = Matrix::zeros(x.rows, w.rows);
    for r in 0..x.rows {
        let x_row = x.row(r);
        let out_row = out.row_mut(r);
        for j in 0..w.rows {
            let w_row = w.row(j);
            let mut acc = b[j];
            for (xi, wi) in x_row.iter().zip(w_row.iter()) {
                acc += xi * wi;
            }
            out_row[j] = acc;
        }
    }
    Ok(out)
}

/// `delta^T x` accumulated over the batch: gradient of an affine layer's
/// weights given upstream deltas (`batch x out`) and inputs (`batch x in`).
pub fn grad_weight(delta: &Matrix, x: &Matrix) -> Result<Matrix> {
    if delta.rows != x.rows {
        return Err(Error::ShapeMismatch(format!(
            "grad_weight batch {} vs {}",
            delta.rows, x.rows
        )));
    }
    let mut out = Matrix::zeros(delta.cols, x.cols);
    for r in 0..delta.rows {
        let d_row = delta.row(r);
        let x_row = x.row(r);
        for (j, &dj) in d_row.iter().enumerate() {
            let out_row = out.row_mut(j);
            for (o, &xi) in out_row.iter_mut().zip(x_row.iter()) {
                *o += dj * xi;
            }
        }
    }
    Ok(out)
}

/// Column sums of `delta`: bias gradient of an affine layer.
pub fn grad_bias(delta: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; delta.cols];
    for r in 0..delta.rows {
        for (o, &d) in out.iter_mut().zip(delta.row(r).iter()) {
            *o += d;
        }
    }
    out
}

/// `delta W`: gradient w.r.t. an affine layer's input (`batch x in`).
pub fn grad_input(delta: &Matrix, w: &Matrix) -> Result<Matrix> {
    if delta.cols != w.rows {
        return Err(Error::ShapeMismatch(format!(
            "grad_input delta={}x{} w={}x{}",
            delta.rows, delta.cols, w.rows, w.cols
        )));
    }
    let mut out = Matrix::zeros(delta.rows, w.cols);
    for r in 0..delta.rows {
        let d_row = delta.row(r);
        let out_row = out.row_mut(r);
        for (j, &dj) in d_row.iter().enumerate() {
            let w_row = w.row(j);
            for (o, &wji) in out_row.iter_mut().zip(w_row.iter()) {
                *o += dj * wji;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Activation and squashing functions
// ---------------------------------------------------------------------------

/// Hidden-layer activation `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Sigmoid,
    Relu,
    Tanh,
}

impl ActivationKind {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Tanh => x.tanh(),
        }
    }

    /// Derivative as a function of the pre-activation. The ReLU subgradient
    /// at exactly 0 is taken as 0 so estimator gradients stay bounded.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    /// True for activations with `f(x) >= 0` everywhere (ReLU, sigmoid).
    pub fn non_negative(self) -> bool {
        !matches!(self, ActivationKind::Tanh)
    }

    pub fn apply_matrix(self, x: &Matrix) -> Matrix {
        x.map(|v| self.apply(v))
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
        };
        f.write_str(name)
    }
}

/// Squashing function `s` used above stochastic layers. Both kinds satisfy
/// `|s''(x)| <= 1` everywhere, which the transfer bounds rely on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SquashKind {
    Sigmoid,
    Tanh,
}

impl SquashKind {
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            SquashKind::Sigmoid => sigmoid(x),
            SquashKind::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            SquashKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            SquashKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    /// `(s(0), s'(0))`: sigmoid gives (0.5, 0.25), tanh gives (0.0, 1.0).
    pub fn at_zero(self) -> (f64, f64) {
        match self {
            SquashKind::Sigmoid => (0.5, 0.25),
            SquashKind::Tanh => (0.0, 1.0),
        }
    }
}

impl std::fmt::Display for SquashKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SquashKind::Sigmoid => "sigmoid",
            SquashKind::Tanh => "tanh",
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable log(sum(exp(xs))).
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}
