//! Dense row-major matrix arithmetic and the closed set of differentiable
//! operations used by the training stack: affine maps, ReLU, softmax,
//! cross-entropy, temperature KL, MSE, normalized entropy and gradient
//! reversal. Everything is 64-bit and allocation-per-op; there is no
//! computation graph.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TensorResult<T> = Result<T, TensorError>;

/// Errors from tensor construction and the exported operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("tensor shape must have positive dimensions, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("data length {got} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },
    #[error("{context}: shapes {left:?} and {right:?} do not conform")]
    ShapeMismatch {
        context: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("label {label} at position {index} is outside [0, {class_count})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        class_count: usize,
    },
    #[error("temperature must be positive, got {temperature}")]
    NonPositiveTemperature { temperature: f64 },
    #[error("weight {value} at row {row} is outside [0, 1]")]
    WeightOutOfRange { row: usize, value: f64 },
    #[error("row {row} is not a probability vector (sum {sum})")]
    NotProbabilityRow { row: usize, sum: f64 },
    #[error("row {row}, column {col} holds negative probability {value}")]
    NegativeProbability { row: usize, col: usize, value: f64 },
    #[error("softmax and entropy need at least 2 columns, got {cols}")]
    TooFewClasses { cols: usize },
}

/// Dense real matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Unvalidated wire form; [`Tensor`] deserialization funnels through
/// [`Tensor::new`] so shape invariants survive hand-edited files.
#[derive(Deserialize)]
struct RawTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = TensorError;

    fn try_from(raw: RawTensor) -> TensorResult<Self> {
        Tensor::new(raw.rows, raw.cols, raw.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> TensorResult<Self> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Build from row slices; all rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> TensorResult<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != c {
                return Err(TensorError::ShapeMismatch {
                    context: "from_rows",
                    left: (1, c),
                    right: (1 + i, row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows of this tensor selected by `indices`, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> TensorResult<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate rows of `a` above rows of `b`.
    pub fn vstack(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        if a.cols != b.cols {
            return Err(TensorError::ShapeMismatch {
                context: "vstack",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        Ok(Tensor {
            rows: a.rows + b.rows,
            cols: a.cols,
            data,
        })
    }

    fn check_same_shape(&self, other: &Tensor, context: &'static str) -> TensorResult<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                context,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

/// A value together with the gradient taken against some differentiation
/// target; `grad` always has the target's shape.
#[derive(Debug, Clone)]
pub struct GradPair {
    pub value: Tensor,
    pub grad: Tensor,
}

/// `input · weight + bias`, broadcasting the 1-row bias over the batch.
pub fn affine_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> TensorResult<Tensor> {
    if input.cols != weight.rows {
        return Err(TensorError::ShapeMismatch {
            context: "affine_forward input/weight",
            left: input.shape(),
            right: weight.shape(),
        });
    }
    if bias.rows != 1 || bias.cols != weight.cols {
        return Err(TensorError::ShapeMismatch {
            context: "affine_forward weight/bias",
            left: weight.shape(),
            right: bias.shape(),
        });
    }
    let (b, din, dout) = (input.rows, weight.rows, weight.cols);
    let mut out = vec![0.0; b * dout];
    for i in 0..b {
        out[i * dout..(i + 1) * dout].copy_from_slice(&bias.data);
        for k in 0..din {
            let x = input.data[i * din + k];
            if x == 0.0 {
                continue;
            }
            let wrow = &weight.data[k * dout..(k + 1) * dout];
            let orow = &mut out[i * dout..(i + 1) * dout];
            for j in 0..dout {
                orow[j] += x * wrow[j];
            }
        }
    }
    debug_assert!(out.iter().all(|v| v.is_finite()));
    Tensor::new(b, dout, out)
}

/// Analytic gradients of the affine map: returns
/// `(grad_input, grad_weight, grad_bias)` for `upstream = dL/d(output)`.
pub fn affine_backward(
    upstream: &Tensor,
    cached_input: &Tensor,
    weight: &Tensor,
) -> TensorResult<(Tensor, Tensor, Tensor)> {
    if upstream.cols != weight.cols || upstream.rows != cached_input.rows {
        return Err(TensorError::ShapeMismatch {
            context: "affine_backward upstream",
            left: upstream.shape(),
            right: (cached_input.rows, weight.cols),
        });
    }
    if cached_input.cols != weight.rows {
        return Err(TensorError::ShapeMismatch {
            context: "affine_backward input/weight",
            left: cached_input.shape(),
            right: weight.shape(),
        });
    }
    let (b, din, dout) = (upstream.rows, weight.rows, weight.cols);

    // grad_input = upstream · Wᵀ
    let mut gin = vec![0.0; b * din];
    for i in 0..b {
        let urow = &upstream.data[i * dout..(i + 1) * dout];
        for k in 0..din {
            let wrow = &weight.data[k * dout..(k + 1) * dout];
            let mut acc = 0.0;
            for j in 0..dout {
                acc += urow[j] * wrow[j];
            }
            gin[i * din + k] = acc;
        }
    }

    // grad_weight = inputᵀ · upstream
    let mut gw = vec![0.0; din * dout];
    for i in 0..b {
        let urow = &upstream.data[i * dout..(i + 1) * dout];
        for k in 0..din {
            let x = cached_input.data[i * din + k];
            if x == 0.0 {
                continue;
            }
            let grow = &mut gw[k * dout..(k + 1) * dout];
            for j in 0..dout {
                grow[j] += x * urow[j];
            }
        }
    }

    // grad_bias = column sums of upstream
    let mut gb = vec![0.0; dout];
    for i in 0..b {
        let urow = &upstream.data[i * dout..(i + 1) * dout];
        for j in 0..dout {
            gb[j] += urow[j];
        }
    }

    Ok((
        Tensor::new(b, din, gin)?,
        Tensor::new(din, dout, gw)?,
        Tensor::new(1, dout, gb)?,
    ))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Masks `upstream` where the cached input was ≤ 0; the derivative at
/// exactly 0 is taken as 0.
pub fn relu_backward(upstream: &Tensor, cached_input: &Tensor) -> TensorResult<Tensor> {
    upstream.check_same_shape(cached_input, "relu_backward")?;
    let data = upstream
        .data
        .iter()
        .zip(&cached_input.data)
        .map(|(&u, &x)| if x > 0.0 { u } else { 0.0 })
        .collect();
    Ok(Tensor {
        rows: upstream.rows,
        cols: upstream.cols,
        data,
    })
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax(logits: &Tensor) -> TensorResult<Tensor> {
    if logits.cols < 2 {
        return Err(TensorError::TooFewClasses { cols: logits.cols });
    }
    let mut out = logits.clone();
    for i in 0..out.rows {
        let row = &mut out.data[i * out.cols..(i + 1) * out.cols];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Row-wise log-softmax, shares the stabilization of [`softmax`].
fn log_softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for i in 0..out.rows {
        let row = &mut out.data[i * out.cols..(i + 1) * out.cols];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Mean cross-entropy of `logits` against integer labels, with the gradient
/// `(softmax − onehot) / B` on the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> TensorResult<(f64, Tensor)> {
    if labels.len() != logits.rows {
        return Err(TensorError::ShapeMismatch {
            context: "cross_entropy labels",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    for (i, &label) in labels.iter().enumerate() {
        if label >= logits.cols {
            return Err(TensorError::LabelOutOfRange {
                index: i,
                label,
                class_count: logits.cols,
            });
        }
    }
    let b = logits.rows as f64;
    let logp = log_softmax(logits);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        loss -= logp.get(i, label);
    }
    loss /= b;

    let mut grad = softmax(logits)?;
    for (i, &label) in labels.iter().enumerate() {
        let v = grad.get(i, label);
        grad.set(i, label, v - 1.0);
    }
    let grad = grad.scale(1.0 / b);
    Ok((loss, grad))
}

/// Per-sample cross-entropy losses as a B×1 tensor plus the gradient of the
/// batch mean on the logits. The mean of `value` equals the loss returned by
/// [`cross_entropy`].
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[usize]) -> TensorResult<GradPair> {
    let (_, grad) = cross_entropy(logits, labels)?;
    let logp = log_softmax(logits);
    let mut per = Vec::with_capacity(logits.rows);
    for (i, &label) in labels.iter().enumerate() {
        per.push(-logp.get(i, label));
    }
    Ok(GradPair {
        value: Tensor::new(logits.rows, 1, per)?,
        grad,
    })
}

/// Batch-mean weighted KL between the row distributions of
/// `softmax(teacher/τ)` and `softmax(student/τ)`. The teacher side is a
/// constant: the returned gradient is on the student logits only.
pub fn kl_divergence(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    temperature: f64,
    weights: &Tensor,
) -> TensorResult<(f64, Tensor)> {
    teacher_logits.check_same_shape(student_logits, "kl_divergence logits")?;
    if !(temperature > 0.0) {
        return Err(TensorError::NonPositiveTemperature { temperature });
    }
    if weights.rows != teacher_logits.rows || weights.cols != 1 {
        return Err(TensorError::ShapeMismatch {
            context: "kl_divergence weights",
            left: weights.shape(),
            right: (teacher_logits.rows, 1),
        });
    }
    for (i, &w) in weights.data.iter().enumerate() {
        if !(0.0..=1.0).contains(&w) {
            return Err(TensorError::WeightOutOfRange { row: i, value: w });
        }
    }
    let b = teacher_logits.rows;
    let c = teacher_logits.cols;
    let bf = b as f64;
    let t_scaled = teacher_logits.scale(1.0 / temperature);
    let s_scaled = student_logits.scale(1.0 / temperature);
    let logp = log_softmax(&t_scaled);
    let logq = log_softmax(&s_scaled);

    let mut loss = 0.0;
    let mut grad = Tensor::zeros(b, c);
    for i in 0..b {
        let w = weights.get(i, 0);
        let mut kl = 0.0;
        for j in 0..c {
            // p and q both come from exp(log_softmax) so identical logits
            // give an exactly zero loss and gradient.
            let p = logp.get(i, j).exp();
            let q = logq.get(i, j).exp();
            if p > 0.0 {
                kl += p * (logp.get(i, j) - logq.get(i, j));
            }
            grad.set(i, j, w * (q - p) / (bf * temperature));
        }
        loss += w * kl;
    }
    Ok((loss / bf, grad))
}

/// Mean squared elementwise difference with the gradient on `b`.
pub fn mse(a: &Tensor, b: &Tensor) -> TensorResult<(f64, Tensor)> {
    a.check_same_shape(b, "mse")?;
    let count = (a.rows * a.cols) as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(a.rows, a.cols);
    for idx in 0..a.data.len() {
        let d = b.data[idx] - a.data[idx];
        loss += d * d;
        grad.data[idx] = 2.0 * d / count;
    }
    Ok((loss / count, grad))
}

/// Row entropies normalized by log(class count), each in [0, 1]; rows must
/// be probability vectors. `0·log 0` is taken as 0.
pub fn normalized_entropy(probs: &Tensor) -> TensorResult<Tensor> {
    if probs.cols < 2 {
        return Err(TensorError::TooFewClasses { cols: probs.cols });
    }
    let log_c = (probs.cols as f64).ln();
    let mut out = Vec::with_capacity(probs.rows);
    for i in 0..probs.rows {
        let row = probs.row(i);
        let mut sum = 0.0;
        for (j, &p) in row.iter().enumerate() {
            if p < 0.0 {
                return Err(TensorError::NegativeProbability {
                    row: i,
                    col: j,
                    value: p,
                });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(TensorError::NotProbabilityRow { row: i, sum });
        }
        let mut h = 0.0;
        for &p in row {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        out.push(h / log_c);
    }
    Tensor::new(probs.rows, 1, out)
}

/// Identity in the forward direction.
pub fn gradient_reversal_forward(input: &Tensor) -> Tensor {
    input.clone()
}

/// `−lambda · upstream`: the backward half of the reversal coupling.
pub fn gradient_reversal_backward(upstream: &Tensor, lambda: f64) -> Tensor {
    upstream.map(|v| -lambda * v)
}
