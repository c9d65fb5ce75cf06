//! Dense row-major `f64` tensors and the handful of pure operations the model
//! is built from.

use crate::error::{Error, Result};

use super::rng::Rng;

/// Dense multi-dimensional array of `f64` values in row-major order.
///
/// Tensors are immutable values once built; every operation returns a fresh
/// tensor. `product(shape) == data.len()` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || expect != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// 1x1 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Row vector of shape `[1, n]`.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    /// Rank-1 vector of shape `[n]`.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count, treating rank-1 tensors as single rows.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Column count, treating rank-1 tensors as single rows.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same-shaped tensor with `f` applied to every element.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Standard matrix product of a `[m, k]` and a `[k, n]` tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if ka != kb || a.shape().len() > 2 || b.shape().len() > 2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: [m, n]`, `b: [k, n]`, producing `[m, k]`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let k = b.rows();
    debug_assert_eq!(b.cols(), n);
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a.data[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b.data[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        shape: vec![m, k],
        data: out,
    }
}

/// `aᵀ · b` for `a: [m, k]`, `b: [m, n]`, producing `[k, n]`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(b.rows(), m);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![k, n],
        data: out,
    }
}

/// Log of the sum of exponentials with max-subtraction. Returns `-inf` for a
/// slice of all `-inf` entries.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `x[i] - logsumexp(x)` over all elements, numerically stable.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    if x.is_empty() {
        return Err(Error::EmptyInput("log_softmax"));
    }
    let lse = logsumexp(x.data());
    let data = x.data().iter().map(|&v| v - lse).collect();
    Ok(Tensor {
        shape: x.shape().to_vec(),
        data,
    })
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else
/// `1/(1-rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidDropoutRate(rate));
    }
    let keep = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

/// Inverted dropout: zeroes elements with probability `rate` and scales the
/// survivors by `1/(1-rate)` in training mode; the exact identity otherwise.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut Rng, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidDropoutRate(rate));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.shape(), rate, rng)?;
    let data = x
        .data()
        .iter()
        .zip(mask.data())
        .map(|(v, m)| v * m)
        .collect();
    Ok(Tensor {
        shape: x.shape().to_vec(),
        data,
    })
}

pub(crate) fn ew_add(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

pub(crate) fn ew_mul(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}
