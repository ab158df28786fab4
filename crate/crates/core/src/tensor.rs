//! Dense row-major f64 tensors.
//!
//! `Tensor` is a plain value: a shape plus a flat row-major buffer.
//! Differentiable computation lives in [`crate::graph`]; the methods here
//! are construction, indexing and the non-differentiable numeric helpers
//! the evaluation harness needs (dot products, norms, cosine similarity).

use crate::error::{CoreError, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense n-dimensional array of f64 in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and flat row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::DimError {
                op: "from_vec",
                detail: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        if numel != data.len() {
            return Err(CoreError::DimError {
                op: "from_vec",
                detail: format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an m-by-n matrix from rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(CoreError::Contract("matrix needs at least one row".into()));
        }
        let n = rows[0].len();
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(CoreError::DimError {
                    op: "matrix",
                    detail: format!("ragged rows: {} vs {}", r.len(), n),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::from_vec(vec![m, n], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Standard-normal entries drawn from `rng`, optionally scaled.
    pub fn randn<R: Rng>(shape: Vec<usize>, scale: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * scale
            })
            .collect();
        Tensor { shape, data }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(CoreError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-d tensor, or 1 for a vector.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(CoreError::DimError {
                op: "reshape",
                detail: format!(
                    "cannot reshape {} elements into {shape:?}",
                    self.data.len()
                ),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "dot",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mean over all elements.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Row `i` of a matrix as an owned vector tensor.
    pub fn row_tensor(&self, i: usize) -> Tensor {
        Tensor::vector(self.row(i).to_vec())
    }
}

/// Cosine similarity between two equal-length vectors, in [-1, 1].
///
/// Computed as dot / sqrt(|a|^2 * |b|^2) so that `cosine_sim(v, v)` is
/// exactly 1 for any finite nonzero v.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.numel() != b.numel() || a.numel() == 0 {
        return Err(CoreError::ShapeMismatch {
            op: "cosine_sim",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let na: f64 = a.data().iter().map(|v| v * v).sum();
    let nb: f64 = b.data().iter().map(|v| v * v).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(CoreError::Contract(
            "cosine_sim of a zero-norm vector".into(),
        ));
    }
    let dot: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x * y)
        .sum();
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}
