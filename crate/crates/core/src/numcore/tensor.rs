use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
///
/// Most of the crate works with rank-2 tensors; ops that act "per slice"
/// (softmax, layernorm) treat the last axis as the slice and fold the
/// leading axes into rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis (1 for rank-0).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-range copy `[start, start + len)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if self.shape.len() != 2 || start + len > self.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: self.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let c = self.cols();
        Ok(Self {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rounds every element to the nearest `f32`. Parameters are kept
    /// `f32`-representable so checkpoints in the feature-file format
    /// restore them exactly.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Plain matrix product `a[m×k] @ b[k×n]`, accumulating over `k` in
/// ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor {
        shape: vec![c, r],
        data,
    }
}

/// Max-subtracted softmax over each slice of the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data.clone();
    if c == 0 {
        return Tensor {
            shape: x.shape.clone(),
            data: out,
        };
    }
    for row in out.chunks_mut(c) {
        softmax_slice(row);
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

/// In-place max-subtracted softmax of one slice.
pub fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Layer normalization over the last axis, `eps` inside the square root.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::Shape {
            op: "layernorm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(d.max(1)) {
        let (mean, inv_std) = moments(row);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv_std * gain.data[j] + bias.data[j];
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Mean and `1/sqrt(var + eps)` of a slice (population variance).
pub(crate) fn moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYERNORM_EPS).sqrt())
}
