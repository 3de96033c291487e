//! Dense row-major `f64` tensors and the pure kernels the model is built from.
//!
//! Every kernel here is a plain function of its inputs. The autodiff graph in
//! [`crate::autodiff`] calls these for its forward values, so a value computed
//! through the graph and one computed by calling a kernel directly agree bitwise.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..16])
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 3 {
            return Err(Error::Contract(format!(
                "rank {} tensors are not supported",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows when viewed as a matrix whose columns are the last axis.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.data.len() / self.cols().max(1),
        }
    }

    /// Extent of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a single value, found shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Elementwise non-linearities selectable from configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    /// Identity; useful for isolating layers in tests.
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64, slope: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid_scalar(x),
            Activation::Linear => x,
        }
    }

    /// Derivative at input `x` given the already computed output `y`.
    pub fn derivative(self, x: f64, y: f64, slope: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Linear => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
        }
    }
}

/// An activation together with its leaky slope (ignored by the other kinds).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Act {
    pub kind: Activation,
    pub slope: f64,
}

impl Act {
    pub fn new(kind: Activation, slope: f64) -> Self {
        Act { kind, slope }
    }
}

pub fn check_slope(slope: f64) -> Result<()> {
    if !(0.0..1.0).contains(&slope) {
        return Err(Error::Config(format!("leaky relu slope {slope} outside [0, 1)")));
    }
    Ok(())
}

pub fn check_dropout_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
    }
    Ok(())
}

/// `a[M×K] · b[K×N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a[M×K] · b[N×K]ᵀ`, the shape used by every fully connected layer.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1] {
        return Err(Error::dim("matmul_nt", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(dot(a_row, &b.data[j * k..(j + 1) * k]));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[K×M]ᵀ · b[K×N]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0] {
        return Err(Error::dim("matmul_tn", &a.shape, &b.shape));
    }
    let (k, m, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a.data[p * m..(p + 1) * m];
        let b_row = &b.data[p * n..(p + 1) * n];
        for (i, &aval) in a_row.iter().enumerate() {
            if aval == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aval * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `x[B×Din] · w[Dout×Din]ᵀ + bias[Dout]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mut out = matmul_nt(x, w)?;
    if let Some(b) = bias {
        if b.len() != w.shape[0] {
            return Err(Error::dim("linear bias", &w.shape, &b.shape));
        }
        let n = b.len();
        for row in out.data.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

fn softmax_slice(v: &[f64], out: &mut [f64]) -> Result<()> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

/// Max-shifted softmax over a vector.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    let mut out = vec![0.0; v.len()];
    softmax_slice(&v.data, &mut out)?;
    Tensor::new(v.shape.clone(), out)
}

/// Softmax applied independently to every row (last axis).
pub fn softmax_rows(v: &Tensor) -> Result<Tensor> {
    let c = v.cols();
    let mut out = vec![0.0; v.len()];
    if c > 0 {
        for (src, dst) in v.data.chunks(c).zip(out.chunks_mut(c)) {
            softmax_slice(src, dst)?;
        }
    }
    Tensor::new(v.shape.clone(), out)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(v: &Tensor) -> Tensor {
    v.map(sigmoid_scalar)
}

pub fn leaky_relu(v: &Tensor, slope: f64) -> Result<Tensor> {
    check_slope(slope)?;
    Ok(v.map(|x| Activation::LeakyRelu.apply(x, slope)))
}

/// Effective weight `W[i] = gain[i] · direction[i] / ‖direction[i]‖₂`.
pub fn weight_norm_weight(direction: &Tensor, gain: &Tensor) -> Result<Tensor> {
    if direction.rank() != 2 || gain.len() != direction.shape[0] {
        return Err(Error::dim("weight_norm", &direction.shape, &gain.shape));
    }
    let mut out = direction.clone();
    for (i, &g) in gain.data.iter().enumerate() {
        let row = out.row_mut(i);
        let norm = row_norm(row);
        if norm <= 1e-12 {
            return Err(Error::DegenerateParameter(format!(
                "weight-norm direction row {i} has norm {norm:e}"
            )));
        }
        let scale = g / norm;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok(out)
}

pub(crate) fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn weight_norm_linear(x: &Tensor, direction: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let w = weight_norm_weight(direction, gain)?;
    linear(x, &w, Some(bias))
}

/// Inverted-dropout keep mask: each entry is 0 with probability `p`, else `1/(1−p)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_dropout_rate(p)?;
    let keep = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect())
}

pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, training: bool, rng: &mut R) -> Result<Tensor> {
    check_dropout_rate(p)?;
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), p, rng)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
    })
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
