//! Dense row-major tensors and the differentiable primitives the layers are
//! built from.
//!
//! Every forward primitive has an explicit vector-Jacobian product next to it.
//! Backward functions take the same operands the forward call saw plus the
//! upstream gradient; nothing is recorded implicitly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("holds {} values, expected {expected}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        check_shape(shape).expect("tensor dimensions must be positive");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("vector must be non-empty")
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the final axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("shape is non-empty")
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "every dimension must be at least 1".into(),
        });
    }
    Ok(())
}

fn expect_rank<T>(t: &Tensor<T>, rank: usize, op: &'static str) -> Result<()> {
    if t.shape.len() != rank {
        return Err(Error::InvalidShape {
            shape: t.shape.clone(),
            reason: format!("{op} expects a rank-{rank} tensor"),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// matmul

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Gradients of `a · b` with respect to `a` and `b`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    if grad.shape != [m, n] {
        return Err(Error::ShapeMismatch {
            op: "matmul_backward",
            lhs: vec![m, n],
            rhs: grad.shape.clone(),
        });
    }
    // ga = g · bᵀ
    let mut ga = vec![T::zero(); m * k];
    for i in 0..m {
        let g_row = &grad.data[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b.data[p * n..(p + 1) * n];
            ga[i * k + p] = g_row.iter().zip(b_row).map(|(&g, &bv)| g * bv).sum();
        }
    }
    // gb = aᵀ · g
    let mut gb = vec![T::zero(); k * n];
    for i in 0..m {
        let g_row = &grad.data[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == T::zero() {
                continue;
            }
            let gb_row = &mut gb[p * n..(p + 1) * n];
            for (o, &g) in gb_row.iter_mut().zip(g_row) {
                *o = *o + av * g;
            }
        }
    }
    Ok((Tensor::new(vec![m, k], ga)?, Tensor::new(vec![k, n], gb)?))
}

// ---------------------------------------------------------------------------
// conv1d: valid cross-correlation, stride 1

/// `input[L, Cin]`, `kernels[f, k, Cin]`, `bias[f]` → `[L - k + 1, f]`.
pub fn conv1d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (len, cin, filters, k) = conv_dims(input, kernels, bias)?;
    let out_len = len - k + 1;
    let mut out = vec![T::zero(); out_len * filters];
    for t in 0..out_len {
        let window = &input.data[t * cin..(t + k) * cin];
        for f in 0..filters {
            let kern = &kernels.data[f * k * cin..(f + 1) * k * cin];
            let acc: T = window.iter().zip(kern).map(|(&x, &w)| x * w).sum();
            out[t * filters + f] = acc + bias.data[f];
        }
    }
    Tensor::new(vec![out_len, filters], out)
}

/// Returns gradients for `(input, kernels, bias)`.
pub fn conv1d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let filters = kernels.shape[0];
    let bias = Tensor::zeros(&[filters]);
    let (len, cin, filters, k) = conv_dims(input, kernels, &bias)?;
    let out_len = len - k + 1;
    if grad.shape != [out_len, filters] {
        return Err(Error::ShapeMismatch {
            op: "conv1d_backward",
            lhs: vec![out_len, filters],
            rhs: grad.shape.clone(),
        });
    }
    let mut gi = vec![T::zero(); len * cin];
    let mut gk = vec![T::zero(); filters * k * cin];
    let mut gb = vec![T::zero(); filters];
    for t in 0..out_len {
        for f in 0..filters {
            let g = grad.data[t * filters + f];
            if g == T::zero() {
                continue;
            }
            gb[f] = gb[f] + g;
            let kern = &kernels.data[f * k * cin..(f + 1) * k * cin];
            let gkern = &mut gk[f * k * cin..(f + 1) * k * cin];
            let window = &input.data[t * cin..(t + k) * cin];
            let gwin = &mut gi[t * cin..(t + k) * cin];
            for j in 0..k * cin {
                gkern[j] = gkern[j] + g * window[j];
                gwin[j] = gwin[j] + g * kern[j];
            }
        }
    }
    Ok((
        Tensor::new(input.shape.clone(), gi)?,
        Tensor::new(kernels.shape.clone(), gk)?,
        Tensor::new(vec![filters], gb)?,
    ))
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    expect_rank(input, 2, "conv1d")?;
    expect_rank(kernels, 3, "conv1d")?;
    let (len, cin) = (input.shape[0], input.shape[1]);
    let (filters, k, kcin) = (kernels.shape[0], kernels.shape[1], kernels.shape[2]);
    if kcin != cin || bias.shape != [filters] {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            lhs: input.shape.clone(),
            rhs: kernels.shape.clone(),
        });
    }
    if len < k {
        return Err(Error::Degenerate {
            op: "conv1d",
            reason: format!("input length {len} is shorter than kernel size {k}"),
        });
    }
    Ok((len, cin, filters, k))
}

/// Zero-pads the leading axis of a `[L, C]` tensor.
pub fn pad_rows<T: Scalar>(input: &Tensor<T>, before: usize, after: usize) -> Result<Tensor<T>> {
    expect_rank(input, 2, "pad_rows")?;
    let c = input.shape[1];
    let mut data = vec![T::zero(); before * c];
    data.extend_from_slice(&input.data);
    data.extend(std::iter::repeat_n(T::zero(), after * c));
    Tensor::new(vec![input.shape[0] + before + after, c], data)
}

pub fn pad_rows_backward<T: Scalar>(
    grad: &Tensor<T>,
    before: usize,
    after: usize,
) -> Result<Tensor<T>> {
    expect_rank(grad, 2, "pad_rows_backward")?;
    let (len, c) = (grad.shape[0], grad.shape[1]);
    if len <= before + after {
        return Err(Error::Degenerate {
            op: "pad_rows_backward",
            reason: format!("gradient of length {len} cannot drop {before}+{after} rows"),
        });
    }
    let data = grad.data[before * c..(len - after) * c].to_vec();
    Tensor::new(vec![len - before - after, c], data)
}

// ---------------------------------------------------------------------------
// maxpool1d: window 2, stride 2

#[derive(Debug, Clone, PartialEq)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    /// Flat input index that won each output cell.
    pub argmax: Vec<usize>,
}

/// Non-overlapping window-2 max over the leading axis of `[L, C]`.
///
/// Odd lengths drop the trailing row. Ties resolve to the lower index.
pub fn maxpool1d<T: Scalar>(input: &Tensor<T>) -> Result<Pooled<T>> {
    expect_rank(input, 2, "maxpool1d")?;
    let (len, c) = (input.shape[0], input.shape[1]);
    let out_len = len / 2;
    if out_len == 0 {
        return Err(Error::Degenerate {
            op: "maxpool1d",
            reason: format!("length {len} pools to an empty output"),
        });
    }
    let mut out = Vec::with_capacity(out_len * c);
    let mut argmax = Vec::with_capacity(out_len * c);
    for t in 0..out_len {
        for ch in 0..c {
            let i0 = (2 * t) * c + ch;
            let i1 = (2 * t + 1) * c + ch;
            let (a, b) = (input.data[i0], input.data[i1]);
            if b > a {
                out.push(b);
                argmax.push(i1);
            } else {
                out.push(a);
                argmax.push(i0);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(vec![out_len, c], out)?,
        argmax,
    })
}

pub fn maxpool1d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    if grad.len() != argmax.len() {
        return Err(Error::ShapeMismatch {
            op: "maxpool1d_backward",
            lhs: vec![argmax.len()],
            rhs: grad.shape.clone(),
        });
    }
    let mut gi = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(&grad.data) {
        gi.data[idx] = gi.data[idx] + g;
    }
    Ok(gi)
}

// ---------------------------------------------------------------------------
// concat along the final axis

pub fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(Error::Degenerate {
        op: "concat",
        reason: "no parts".into(),
    })?;
    let lead = &first.shape[..first.shape.len() - 1];
    for p in parts {
        if &p.shape[..p.shape.len() - 1] != lead {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    let rows = first.rows();
    let width: usize = parts.iter().map(|p| p.last_dim()).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    let mut shape = lead.to_vec();
    shape.push(width);
    Tensor::new(shape, data)
}

/// Splits a gradient on the concatenated tensor back into per-part slices.
pub fn concat_backward<T: Scalar>(widths: &[usize], grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let total: usize = widths.iter().sum();
    if grad.last_dim() != total {
        return Err(Error::ShapeMismatch {
            op: "concat_backward",
            lhs: widths.to_vec(),
            rhs: grad.shape.clone(),
        });
    }
    let rows = grad.rows();
    let lead = &grad.shape[..grad.shape.len() - 1];
    let mut offset = 0;
    let mut out = Vec::with_capacity(widths.len());
    for &w in widths {
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&grad.row(r)[offset..offset + w]);
        }
        let mut shape = lead.to_vec();
        shape.push(w);
        out.push(Tensor::new(shape, data)?);
        offset += w;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// activations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Tanh,
    /// Row-wise over the final axis.
    Softmax,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activate<T: Scalar>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    match kind {
        Activation::Linear => x.clone(),
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Tanh => x.map(|v| v.tanh()),
        Activation::Softmax => {
            let w = x.last_dim();
            let mut data = x.data.clone();
            for row in data.chunks_mut(w) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total = total + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / total;
                }
            }
            Tensor {
                shape: x.shape.clone(),
                data,
            }
        }
    }
}

/// Vector-Jacobian product of `activate(kind, input) == output`.
pub fn activation_backward<T: Scalar>(
    kind: Activation,
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    if grad.shape != output.shape || input.shape != output.shape {
        return Err(Error::ShapeMismatch {
            op: "activation_backward",
            lhs: output.shape.clone(),
            rhs: grad.shape.clone(),
        });
    }
    let one = T::one();
    let data: Vec<T> = match kind {
        Activation::Linear => grad.data.clone(),
        Activation::Relu => input
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect(),
        Activation::Sigmoid => output
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&y, &g)| g * y * (one - y))
            .collect(),
        Activation::Tanh => output
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&y, &g)| g * (one - y * y))
            .collect(),
        Activation::Softmax => {
            let w = output.last_dim();
            let mut out = Vec::with_capacity(output.len());
            for (y, g) in output.data.chunks(w).zip(grad.data.chunks(w)) {
                let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                out.extend(y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)));
            }
            out
        }
    };
    Tensor::new(output.shape.clone(), data)
}
