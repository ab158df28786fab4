//! Reverse-mode differentiation on a flat operation tape.
//!
//! A [`Graph`] owns every tensor produced during one forward computation.
//! Ops append a node (op kind + input ids) and return a [`TensorId`];
//! node order is creation order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] visits each node exactly once in
//! reverse. Gradients accumulate (add, never overwrite) until
//! [`Graph::zero_grad`] clears them, mirroring the usual training-loop
//! semantics.
//!
//! The op set is deliberately small: 2-d matmul, a few elementwise maps,
//! row-wise softmax/log-softmax/KL, the negative-disentanglement
//! renormalization, layer norm, and shape plumbing (concat, slice,
//! permute, diagonal). Broadcasting is limited to scalar-tensor products
//! and row-wise bias adds.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Floor applied to denominators inside KL before taking logs.
pub const KL_FLOOR: f64 = 1e-12;

/// Handle to a tensor stored in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    MulElem { a: TensorId, b: TensorId },
    AddRowBias { a: TensorId, bias: TensorId },
    ScaleConst { a: TensorId, c: f64 },
    MulScalar { a: TensorId, s: TensorId },
    DivScalar { a: TensorId, s: TensorId },
    Exp { a: TensorId },
    Ln { a: TensorId },
    Abs { a: TensorId },
    Tanh { a: TensorId },
    Relu { a: TensorId },
    SoftmaxRows { a: TensorId },
    LogSoftmaxRows { a: TensorId },
    KlRows { p: TensorId, q: TensorId },
    NegDisentangle { p: TensorId },
    LayerNormRows { x: TensorId, gain: TensorId, bias: TensorId },
    NormalizeRows { a: TensorId },
    ConcatCols { parts: Vec<TensorId> },
    ConcatRows { parts: Vec<TensorId> },
    SliceCols { a: TensorId, start: usize, end: usize },
    PermuteRows { a: TensorId, perm: Vec<usize> },
    TakeDiag { a: TensorId },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    Detach,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Operation tape recording one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Inserts a trainable leaf; gradients will be collected for it.
    pub fn param(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts a non-trainable leaf (data, targets, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a tensor, if it participated in backward.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn val(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn require_matrix(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let t = self.val(id);
        if t.shape().len() != 2 {
            return Err(CoreError::DimError {
                op,
                detail: format!("expected a matrix, got shape {:?}", t.shape()),
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    // ── binary ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.require_matrix(a, "matmul")?;
        let (k2, n) = self.require_matrix(b, "matmul")?;
        if k != k2 {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                left: self.val(a).shape().to_vec(),
                right: self.val(b).shape().to_vec(),
            });
        }
        let out = matmul_raw(self.val(a).data(), self.val(b).data(), m, k, n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out)?,
            Op::MatMul { a, b },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.require_matrix(a, "transpose")?;
        let src = self.val(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor::from_vec(vec![n, m], out)?, Op::Transpose { a }, rg))
    }

    fn same_shape(&self, a: TensorId, b: TensorId, op: &'static str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(CoreError::ShapeMismatch {
                op,
                left: self.val(a).shape().to_vec(),
                right: self.val(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = zip2(self.val(a).data(), self.val(b).data(), |x, y| x + y);
        let shape = self.val(a).shape().to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<f64> = zip2(self.val(a).data(), self.val(b).data(), |x, y| x - y);
        let shape = self.val(a).shape().to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Sub { a, b }, rg))
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul_elem")?;
        let out: Vec<f64> = zip2(self.val(a).data(), self.val(b).data(), |x, y| x * y);
        let shape = self.val(a).shape().to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::MulElem { a, b }, rg))
    }

    /// Adds a width-n bias vector to every row of an m-by-n matrix.
    pub fn add_row_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.require_matrix(a, "add_row_bias")?;
        if self.val(bias).shape() != [n] {
            return Err(CoreError::ShapeMismatch {
                op: "add_row_bias",
                left: self.val(a).shape().to_vec(),
                right: self.val(bias).shape().to_vec(),
            });
        }
        let av = self.val(a).data();
        let bv = self.val(bias).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = av[i * n + j] + bv[j];
            }
        }
        let rg = self.needs_grad(&[a, bias]);
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out)?,
            Op::AddRowBias { a, bias },
            rg,
        ))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.val(a).data().iter().map(|x| c * x).collect();
        let shape = self.val(a).shape().to_vec();
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::ScaleConst { a, c }, rg))
    }

    fn require_scalar(&self, s: TensorId, op: &'static str) -> Result<f64> {
        let t = self.val(s);
        if t.numel() != 1 {
            return Err(CoreError::DimError {
                op,
                detail: format!("expected a scalar tensor, got shape {:?}", t.shape()),
            });
        }
        Ok(t.data()[0])
    }

    /// Multiplies every element by a one-element tensor (learnable scale).
    pub fn mul_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let sv = self.require_scalar(s, "mul_scalar")?;
        let out: Vec<f64> = self.val(a).data().iter().map(|x| x * sv).collect();
        let shape = self.val(a).shape().to_vec();
        let rg = self.needs_grad(&[a, s]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::MulScalar { a, s }, rg))
    }

    /// Divides every element by a one-element tensor (e.g. a temperature).
    pub fn div_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let sv = self.require_scalar(s, "div_scalar")?;
        if sv == 0.0 {
            return Err(CoreError::Contract("division by zero scalar".into()));
        }
        let out: Vec<f64> = self.val(a).data().iter().map(|x| x / sv).collect();
        let shape = self.val(a).shape().to_vec();
        let rg = self.needs_grad(&[a, s]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::DivScalar { a, s }, rg))
    }

    // ── elementwise maps ────────────────────────────────────────────────

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.val(a).data().iter().map(|x| x.exp()).collect();
        let shape = self.val(a).shape().to_vec();
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Exp { a }, rg))
    }

    pub fn ln(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.val(a).data().iter().map(|x| x.ln()).collect();
        let shape = self.val(a).shape().to_vec();
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Ln { a }, rg))
    }

    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.val(a).data().iter().map(|x| x.abs()).collect();
        let shape = self.val(a).shape().to_vec();
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Abs { a }, rg))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.val(a).data().iter().map(|x| x.tanh()).collect();
        let shape = self.val(a).shape().to_vec();
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Tanh { a }, rg))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.val(a).data().iter().map(|x| x.max(0.0)).collect();
        let shape = self.val(a).shape().to_vec();
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Relu { a }, rg))
    }

    // ── row-wise ops ────────────────────────────────────────────────────

    /// Row-wise softmax with max subtraction; rows sum to 1.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.require_matrix(a, "softmax_rows")?;
        let src = self.val(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(&src[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out)?,
            Op::SoftmaxRows { a },
            rg,
        ))
    }

    pub fn log_softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.require_matrix(a, "log_softmax_rows")?;
        let src = self.val(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out)?,
            Op::LogSoftmaxRows { a },
            rg,
        ))
    }

    /// Mean over rows of KL(p_row || q_row), with q floored at [`KL_FLOOR`]
    /// before the log and `0 * log 0` treated as 0.
    ///
    /// Both arguments must be row-stochastic (each row sums to 1 within
    /// 1e-6); violating rows are a contract error.
    pub fn kl_rows(&mut self, p: TensorId, q: TensorId) -> Result<TensorId> {
        let (m, n) = self.require_matrix(p, "kl_rows")?;
        self.same_shape(p, q, "kl_rows")?;
        let pv = self.val(p).data();
        let qv = self.val(q).data();
        for i in 0..m {
            for (name, v) in [("p", pv), ("q", qv)] {
                let s: f64 = v[i * n..(i + 1) * n].iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(CoreError::Contract(format!(
                        "kl_rows: {name} row {i} sums to {s}, not 1"
                    )));
                }
            }
        }
        let mut total = 0.0;
        for i in 0..m {
            let mut row = 0.0;
            for j in 0..n {
                let pij = pv[i * n + j];
                if pij > 0.0 {
                    let qij = qv[i * n + j].max(KL_FLOOR);
                    row += pij * (pij / qij).ln();
                }
            }
            total += row;
        }
        let rg = self.needs_grad(&[p, q]);
        Ok(self.push(
            Tensor::scalar(total / m as f64),
            Op::KlRows { p, q },
            rg,
        ))
    }

    /// Removes each row's diagonal entry and renormalizes the rest through
    /// an exp-reweighting: out[i][j] = exp(p[i][j]) / sum_{k != i} exp(p[i][k]).
    ///
    /// Input is N-by-N, output N-by-(N-1).
    pub fn neg_disentangle(&mut self, p: TensorId) -> Result<TensorId> {
        let (m, n) = self.require_matrix(p, "neg_disentangle")?;
        if m != n || n < 2 {
            return Err(CoreError::DimError {
                op: "neg_disentangle",
                detail: format!("expected a square matrix with n >= 2, got {m}x{n}"),
            });
        }
        let pv = self.val(p).data();
        let mut out = vec![0.0; m * (n - 1)];
        for i in 0..m {
            let mut z = 0.0;
            for j in 0..n {
                if j != i {
                    z += pv[i * n + j].exp();
                }
            }
            let mut c = 0;
            for j in 0..n {
                if j != i {
                    out[i * (n - 1) + c] = pv[i * n + j].exp() / z;
                    c += 1;
                }
            }
        }
        let rg = self.needs_grad(&[p]);
        Ok(self.push(
            Tensor::from_vec(vec![m, n - 1], out)?,
            Op::NegDisentangle { p },
            rg,
        ))
    }

    /// Per-row layer normalization with learnable gain and bias.
    pub fn layer_norm_rows(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let (m, n) = self.require_matrix(x, "layer_norm_rows")?;
        if self.val(gain).shape() != [n] || self.val(bias).shape() != [n] {
            return Err(CoreError::DimError {
                op: "layer_norm_rows",
                detail: format!(
                    "gain/bias must have shape [{n}], got {:?} and {:?}",
                    self.val(gain).shape(),
                    self.val(bias).shape()
                ),
            });
        }
        let xv = self.val(x).data();
        let gv = self.val(gain).data();
        let bv = self.val(bias).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let rg = self.needs_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out)?,
            Op::LayerNormRows { x, gain, bias },
            rg,
        ))
    }

    /// Scales each row to unit L2 norm (norm floored at 1e-12).
    pub fn normalize_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.require_matrix(a, "normalize_rows")?;
        let src = self.val(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out)?,
            Op::NormalizeRows { a },
            rg,
        ))
    }

    // ── shape plumbing ──────────────────────────────────────────────────

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(CoreError::Contract("concat_cols of zero parts".into()));
        }
        let (m, _) = self.require_matrix(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.require_matrix(p, "concat_cols")?;
            if mp != m {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.val(parts[0]).shape().to_vec(),
                    right: self.val(p).shape().to_vec(),
                });
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.val(p).data();
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(
            Tensor::from_vec(vec![m, total], out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(CoreError::Contract("concat_rows of zero parts".into()));
        }
        let (_, n) = self.require_matrix(parts[0], "concat_rows")?;
        let mut total_rows = 0;
        for &p in parts {
            let (mp, np) = self.require_matrix(p, "concat_rows")?;
            if np != n {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.val(parts[0]).shape().to_vec(),
                    right: self.val(p).shape().to_vec(),
                });
            }
            total_rows += mp;
        }
        let mut out = Vec::with_capacity(total_rows * n);
        for &p in parts {
            out.extend_from_slice(self.val(p).data());
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(
            Tensor::from_vec(vec![total_rows, n], out)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Copies columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (m, n) = self.require_matrix(a, "slice_cols")?;
        if start >= end || end > n {
            return Err(CoreError::DimError {
                op: "slice_cols",
                detail: format!("range {start}..{end} out of bounds for width {n}"),
            });
        }
        let w = end - start;
        let src = self.val(a).data();
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&src[i * n + start..i * n + end]);
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(
            Tensor::from_vec(vec![m, w], out)?,
            Op::SliceCols { a, start, end },
            rg,
        ))
    }

    /// Reorders rows: output row k is input row `perm[k]`.
    pub fn permute_rows(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId> {
        let (m, n) = self.require_matrix(a, "permute_rows")?;
        if perm.len() != m {
            return Err(CoreError::DimError {
                op: "permute_rows",
                detail: format!("perm has {} entries for {m} rows", perm.len()),
            });
        }
        let mut seen = vec![false; m];
        for &p in perm {
            if p >= m || seen[p] {
                return Err(CoreError::Contract(format!(
                    "permute_rows: invalid permutation entry {p}"
                )));
            }
            seen[p] = true;
        }
        let src = self.val(a).data();
        let mut out = vec![0.0; m * n];
        for (k, &p) in perm.iter().enumerate() {
            out[k * n..(k + 1) * n].copy_from_slice(&src[p * n..(p + 1) * n]);
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out)?,
            Op::PermuteRows {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Extracts the diagonal of a square matrix as a vector.
    pub fn take_diag(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.require_matrix(a, "take_diag")?;
        if m != n {
            return Err(CoreError::DimError {
                op: "take_diag",
                detail: format!("expected a square matrix, got {m}x{n}"),
            });
        }
        let src = self.val(a).data();
        let out: Vec<f64> = (0..m).map(|i| src[i * n + i]).collect();
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor::vector(out), Op::TakeDiag { a }, rg))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.val(a).data().iter().sum();
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { a }, rg))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let t = self.val(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.needs_grad(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll { a }, rg))
    }

    /// Copies a value while cutting it out of the gradient flow.
    pub fn detach(&mut self, a: TensorId) -> TensorId {
        let v = self.val(a).clone();
        self.push(v, Op::Detach, false)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Each call adds one unit of
    /// upstream gradient; results accumulate across calls until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.val(loss).numel() != 1 {
            return Err(CoreError::Contract(format!(
                "backward from non-scalar tensor of shape {:?}",
                self.val(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // nothing trainable upstream
        }
        // fresh working buffers per sweep; persistent grads only collect
        // each sweep's result, so repeated backward calls add up cleanly
        let mut work: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = work[i].take() else { continue };
            self.backprop_node(&mut work, i, &g);
            add_into(&mut self.nodes[i].grad, &g);
        }
        Ok(())
    }

    fn accum(&self, work: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        add_into(&mut work[id.0], delta);
    }

    fn backprop_node(&self, work: &mut [Option<Vec<f64>>], out_idx: usize, g: &[f64]) {
        match &self.nodes[out_idx].op {
            Op::Leaf | Op::Detach => {}

            Op::MatMul { a, b } => {
                let (m, k) = {
                    let s = self.val(*a).shape();
                    (s[0], s[1])
                };
                let n = self.val(*b).shape()[1];
                // dA = G * B^T
                let bv = self.val(*b).data();
                let mut bt = vec![0.0; n * k];
                for i in 0..k {
                    for j in 0..n {
                        bt[j * k + i] = bv[i * n + j];
                    }
                }
                let da = matmul_raw(g, &bt, m, n, k);
                // dB = A^T * G
                let av = self.val(*a).data();
                let mut at = vec![0.0; k * m];
                for i in 0..m {
                    for j in 0..k {
                        at[j * m + i] = av[i * k + j];
                    }
                }
                let db = matmul_raw(&at, g, k, m, n);
                self.accum(work, *a, &da);
                self.accum(work, *b, &db);
            }

            Op::Transpose { a } => {
                let (m, n) = {
                    let s = self.val(*a).shape();
                    (s[0], s[1])
                };
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.accum(work, *a, &da);
            }

            Op::Add { a, b } => {
                self.accum(work, *a, g);
                self.accum(work, *b, g);
            }

            Op::Sub { a, b } => {
                self.accum(work, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accum(work, *b, &neg);
            }

            Op::MulElem { a, b } => {
                let da: Vec<f64> = zip2(g, self.val(*b).data(), |x, y| x * y);
                let db: Vec<f64> = zip2(g, self.val(*a).data(), |x, y| x * y);
                self.accum(work, *a, &da);
                self.accum(work, *b, &db);
            }

            Op::AddRowBias { a, bias } => {
                self.accum(work, *a, g);
                let n = self.val(*bias).numel();
                let m = g.len() / n;
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
                self.accum(work, *bias, &db);
            }

            Op::ScaleConst { a, c } => {
                let da: Vec<f64> = g.iter().map(|x| c * x).collect();
                self.accum(work, *a, &da);
            }

            Op::MulScalar { a, s } => {
                let sv = self.val(*s).data()[0];
                let da: Vec<f64> = g.iter().map(|x| x * sv).collect();
                let ds: f64 = g
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(x, av)| x * av)
                    .sum();
                self.accum(work, *a, &da);
                self.accum(work, *s, &[ds]);
            }

            Op::DivScalar { a, s } => {
                let sv = self.val(*s).data()[0];
                let da: Vec<f64> = g.iter().map(|x| x / sv).collect();
                let ds: f64 = g
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(x, av)| -x * av / (sv * sv))
                    .sum();
                self.accum(work, *a, &da);
                self.accum(work, *s, &[ds]);
            }

            Op::Exp { a } => {
                let out = self.nodes[out_idx].value.data();
                let da: Vec<f64> = zip2(g, out, |x, e| x * e);
                self.accum(work, *a, &da);
            }

            Op::Ln { a } => {
                let da: Vec<f64> = zip2(g, self.val(*a).data(), |x, v| x / v);
                self.accum(work, *a, &da);
            }

            Op::Abs { a } => {
                let da: Vec<f64> = zip2(g, self.val(*a).data(), |x, v| x * v.signum() * ((*v != 0.0) as u8 as f64));
                self.accum(work, *a, &da);
            }

            Op::Tanh { a } => {
                let out = self.nodes[out_idx].value.data();
                let da: Vec<f64> = zip2(g, out, |x, t| x * (1.0 - t * t));
                self.accum(work, *a, &da);
            }

            Op::Relu { a } => {
                let da: Vec<f64> = zip2(g, self.val(*a).data(), |x, v| if *v > 0.0 { *x } else { 0.0 });
                self.accum(work, *a, &da);
            }

            Op::SoftmaxRows { a } => {
                let out = self.nodes[out_idx].value.clone();
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let ov = out.data();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let dotgy: f64 = (0..n).map(|j| g[i * n + j] * ov[i * n + j]).sum();
                    for j in 0..n {
                        da[i * n + j] = ov[i * n + j] * (g[i * n + j] - dotgy);
                    }
                }
                self.accum(work, *a, &da);
            }

            Op::LogSoftmaxRows { a } => {
                let out = self.nodes[out_idx].value.clone();
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let ov = out.data();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let gsum: f64 = g[i * n..(i + 1) * n].iter().sum();
                    for j in 0..n {
                        da[i * n + j] = g[i * n + j] - ov[i * n + j].exp() * gsum;
                    }
                }
                self.accum(work, *a, &da);
            }

            Op::KlRows { p, q } => {
                let gs = g[0];
                let (m, n) = {
                    let s = self.val(*p).shape();
                    (s[0], s[1])
                };
                let pv = self.val(*p).data().to_vec();
                let qv = self.val(*q).data().to_vec();
                let inv_m = 1.0 / m as f64;
                let mut dp = vec![0.0; m * n];
                let mut dq = vec![0.0; m * n];
                for idx in 0..m * n {
                    let pij = pv[idx].max(KL_FLOOR);
                    let qraw = qv[idx];
                    let qij = qraw.max(KL_FLOOR);
                    dp[idx] = gs * ((pij / qij).ln() + 1.0) * inv_m;
                    // clamped q entries are constants
                    dq[idx] = if qraw > KL_FLOOR {
                        gs * (-pv[idx] / qij) * inv_m
                    } else {
                        0.0
                    };
                }
                self.accum(work, *p, &dp);
                self.accum(work, *q, &dq);
            }

            Op::NegDisentangle { p } => {
                let out = self.nodes[out_idx].value.clone();
                let n = self.val(*p).shape()[0];
                let ov = out.data();
                let mut dp = vec![0.0; n * n];
                for i in 0..n {
                    let grow = &g[i * (n - 1)..(i + 1) * (n - 1)];
                    let yrow = &ov[i * (n - 1)..(i + 1) * (n - 1)];
                    let dotgy: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    let mut c = 0;
                    for j in 0..n {
                        if j != i {
                            dp[i * n + j] = yrow[c] * (grow[c] - dotgy);
                            c += 1;
                        }
                    }
                }
                self.accum(work, *p, &dp);
            }

            Op::LayerNormRows { x, gain, bias } => {
                let (m, n) = {
                    let s = self.val(*x).shape();
                    (s[0], s[1])
                };
                let xv = self.val(*x).data().to_vec();
                let gv = self.val(*gain).data().to_vec();
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let grow = &g[i * n..(i + 1) * n];
                    let dxh: Vec<f64> = (0..n).map(|j| grow[j] * gv[j]).collect();
                    let mean_dxh = dxh.iter().sum::<f64>() / n as f64;
                    let mean_dxh_xhat =
                        dxh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dx[i * n + j] = inv * (dxh[j] - mean_dxh - xhat[j] * mean_dxh_xhat);
                    }
                }
                self.accum(work, *x, &dx);
                self.accum(work, *gain, &dgain);
                self.accum(work, *bias, &dbias);
            }

            Op::NormalizeRows { a } => {
                let (m, n) = {
                    let s = self.val(*a).shape();
                    (s[0], s[1])
                };
                let av = self.val(*a).data().to_vec();
                let ov = self.nodes[out_idx].value.data().to_vec();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let row = &av[i * n..(i + 1) * n];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let yrow = &ov[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let gy: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        da[i * n + j] = (grow[j] - yrow[j] * gy) / norm;
                    }
                }
                self.accum(work, *a, &da);
            }

            Op::ConcatCols { parts } => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.val(p).shape()[1]).collect();
                let total: usize = widths.iter().sum();
                let m = g.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut dp = vec![0.0; m * w];
                    for i in 0..m {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    self.accum(work, p, &dp);
                    off += w;
                }
            }

            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let numel = self.val(p).numel();
                    let dp = g[off..off + numel].to_vec();
                    self.accum(work, p, &dp);
                    off += numel;
                }
            }

            Op::SliceCols { a, start, end } => {
                let (m, n) = {
                    let s = self.val(*a).shape();
                    (s[0], s[1])
                };
                let w = end - start;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.accum(work, *a, &da);
            }

            Op::PermuteRows { a, perm } => {
                let (m, n) = {
                    let s = self.val(*a).shape();
                    (s[0], s[1])
                };
                let mut da = vec![0.0; m * n];
                for (k, &p) in perm.iter().enumerate() {
                    for j in 0..n {
                        da[p * n + j] += g[k * n + j];
                    }
                }
                self.accum(work, *a, &da);
            }

            Op::TakeDiag { a } => {
                let n = self.val(*a).shape()[0];
                let mut da = vec![0.0; n * n];
                for i in 0..n {
                    da[i * n + i] = g[i];
                }
                self.accum(work, *a, &da);
            }

            Op::SumAll { a } => {
                let da = vec![g[0]; self.val(*a).numel()];
                self.accum(work, *a, &da);
            }

            Op::MeanAll { a } => {
                let numel = self.val(*a).numel();
                let da = vec![g[0] / numel as f64; numel];
                self.accum(work, *a, &da);
            }
        }
    }
}

fn zip2(a: &[f64], b: &[f64], f: impl Fn(&f64, &f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(x, y)| f(x, y)).collect()
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(buf) => {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Plain 2-d matrix product, row-major.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}
