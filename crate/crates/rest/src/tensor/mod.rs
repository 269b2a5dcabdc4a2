//! Minimal dense f32 tensor with reverse-mode automatic differentiation.
//!
//! Row-major layout, explicit dims, copy-on-slice. Reductions (dot products,
//! sums, mse, norms) accumulate in f64 so downstream equivalence oracles can
//! hold tight tolerances. The compute graph is a DAG of `Arc` nodes; backward
//! traverses it once in reverse topological order.

mod backward;
pub mod adam;
pub mod io;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{RestError, Result};
use crate::rng::Rng;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Arc<Node>,
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) dims: Vec<usize>,
    pub(crate) data: Vec<f32>,
    /// True when this node is a grad-requiring leaf or depends on one.
    pub(crate) requires_grad: bool,
    pub(crate) grad: Mutex<Option<Vec<f32>>>,
    pub(crate) op: Op,
}

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, f32),
    // The offset is not needed by the backward rule, only the input.
    AddScalar(Tensor, #[allow(dead_code)] f32),
    Matmul(Tensor, Tensor),
    Transpose2(Tensor),
    Softmax(Tensor, usize),
    Concat(Vec<Tensor>, usize),
    Slice { x: Tensor, axis: usize, start: usize },
    Reshape(Tensor),
    SumAll(Tensor),
    MeanAll(Tensor),
    Mse(Tensor, Tensor),
    CosineSim(Tensor, Tensor),
    LayerNorm { x: Tensor, gain: Tensor, bias: Tensor },
    Gelu(Tensor),
    Exp(Tensor),
    Log(Tensor),
    BroadcastRows(Tensor, usize),
}

fn shape_err(msg: String) -> RestError {
    RestError::Shape(msg)
}

pub(crate) fn numel_of(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl Tensor {
    fn make(dims: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(numel_of(&dims), data.len());
        Tensor {
            inner: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                dims,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Tensor> {
        if numel_of(dims) != data.len() {
            return Err(shape_err(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                numel_of(dims),
                data.len()
            )));
        }
        Ok(Tensor::make(dims.to_vec(), data, false, Op::Leaf))
    }

    pub fn zeros(dims: &[usize]) -> Tensor {
        Tensor::make(dims.to_vec(), vec![0.0; numel_of(dims)], false, Op::Leaf)
    }

    pub fn full(dims: &[usize], value: f32) -> Tensor {
        Tensor::make(dims.to_vec(), vec![value; numel_of(dims)], false, Op::Leaf)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::make(vec![1], vec![value], false, Op::Leaf)
    }

    pub fn randn(dims: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::make(dims.to_vec(), rng.normal_vec(numel_of(dims)), false, Op::Leaf)
    }

    /// A grad-requiring leaf (trainable parameter).
    pub fn param(dims: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let t = Tensor::from_vec(dims, data)?;
        Ok(t.requiring_grad())
    }

    /// Copy of this tensor as a grad-requiring leaf.
    pub fn requiring_grad(&self) -> Tensor {
        Tensor::make(self.dims().to_vec(), self.data().to_vec(), true, Op::Leaf)
    }

    /// Copy of this tensor as a constant leaf, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.dims().to_vec(), self.data().to_vec(), false, Op::Leaf)
    }

    pub fn dims(&self) -> &[usize] {
        &self.inner.dims
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Checked assertion that every element is finite.
    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.inner.data.iter().any(|v| !v.is_finite()) {
            return Err(RestError::Training(format!("non-finite values in {what}")));
        }
        Ok(())
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    fn grad_flag(inputs: &[&Tensor]) -> bool {
        inputs.iter().any(|t| t.requires_grad())
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::make(
            self.dims().to_vec(),
            data,
            Tensor::grad_flag(&[self, other]),
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::make(
            self.dims().to_vec(),
            data,
            Tensor::grad_flag(&[self, other]),
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::make(
            self.dims().to_vec(),
            data,
            Tensor::grad_flag(&[self, other]),
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data().iter().map(|a| -a).collect();
        Tensor::make(
            self.dims().to_vec(),
            data,
            self.requires_grad(),
            Op::Neg(self.clone()),
        )
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|a| a * c).collect();
        Tensor::make(
            self.dims().to_vec(),
            data,
            self.requires_grad(),
            Op::Scale(self.clone(), c),
        )
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|a| a + c).collect();
        Tensor::make(
            self.dims().to_vec(),
            data,
            self.requires_grad(),
            Op::AddScalar(self.clone(), c),
        )
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.exp()).collect();
        Tensor::make(
            self.dims().to_vec(),
            data,
            self.requires_grad(),
            Op::Exp(self.clone()),
        )
    }

    pub fn log(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.ln()).collect();
        Tensor::make(
            self.dims().to_vec(),
            data,
            self.requires_grad(),
            Op::Log(self.clone()),
        )
    }

    pub fn gelu(&self) -> Tensor {
        let data = self.data().iter().map(|&a| gelu_forward(a)).collect();
        Tensor::make(
            self.dims().to_vec(),
            data,
            self.requires_grad(),
            Op::Gelu(self.clone()),
        )
    }

    // ---- linear algebra ----

    /// Matrix product over the trailing two axes. Leading batch axes must be
    /// identical, or absent on one side (that side is broadcast).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ad, bd) = (self.dims(), other.dims());
        if ad.len() < 2 || bd.len() < 2 {
            return Err(shape_err(format!(
                "matmul needs rank >= 2, got {ad:?} x {bd:?}"
            )));
        }
        let (m, k) = (ad[ad.len() - 2], ad[ad.len() - 1]);
        let (k2, n) = (bd[bd.len() - 2], bd[bd.len() - 1]);
        if k != k2 {
            return Err(shape_err(format!(
                "matmul inner dims differ: {ad:?} x {bd:?}"
            )));
        }
        let abatch = &ad[..ad.len() - 2];
        let bbatch = &bd[..bd.len() - 2];
        let batch_dims: Vec<usize> = if abatch == bbatch {
            abatch.to_vec()
        } else if abatch.is_empty() {
            bbatch.to_vec()
        } else if bbatch.is_empty() {
            abatch.to_vec()
        } else {
            return Err(shape_err(format!(
                "matmul batch dims incompatible: {ad:?} x {bd:?}"
            )));
        };
        let nb = numel_of(&batch_dims).max(1);
        let mut out = vec![0.0f32; nb * m * n];
        let a_stride = if abatch.is_empty() { 0 } else { m * k };
        let b_stride = if bbatch.is_empty() { 0 } else { k * n };
        for b in 0..nb {
            matmul2(
                &self.data()[b * a_stride..b * a_stride + m * k],
                &other.data()[b * b_stride..b * b_stride + k * n],
                &mut out[b * m * n..(b + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut dims = batch_dims;
        dims.push(m);
        dims.push(n);
        Ok(Tensor::make(
            dims,
            out,
            Tensor::grad_flag(&[self, other]),
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    /// Swap the trailing two axes.
    pub fn transpose2(&self) -> Result<Tensor> {
        let d = self.dims();
        if d.len() < 2 {
            return Err(shape_err(format!("transpose2 needs rank >= 2, got {d:?}")));
        }
        let (m, n) = (d[d.len() - 2], d[d.len() - 1]);
        let nb = numel_of(&d[..d.len() - 2]).max(1);
        let mut out = vec![0.0f32; self.numel()];
        for b in 0..nb {
            let src = &self.data()[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut dims = d.to_vec();
        let len = dims.len();
        dims.swap(len - 2, len - 1);
        Ok(Tensor::make(
            dims,
            out,
            self.requires_grad(),
            Op::Transpose2(self.clone()),
        ))
    }

    /// Numerically stable softmax over `axis` (max subtraction, f64 sums).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let d = self.dims();
        if axis >= d.len() {
            return Err(shape_err(format!("softmax axis {axis} out of range for {d:?}")));
        }
        let mut out = vec![0.0f32; self.numel()];
        for_each_lane(d, axis, |lane| {
            let max = lane
                .iter()
                .map(|&i| self.data()[i])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for &i in lane {
                let e = (self.data()[i] - max).exp();
                out[i] = e;
                sum += e as f64;
            }
            for &i in lane {
                out[i] = (out[i] as f64 / sum) as f32;
            }
        });
        Ok(Tensor::make(
            d.to_vec(),
            out,
            self.requires_grad(),
            Op::Softmax(self.clone(), axis),
        ))
    }

    /// Layer normalization over the last axis, then per-feature gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let d = self.dims();
        let feat = *d.last().ok_or_else(|| shape_err("layer_norm on rank-0".into()))?;
        if gain.dims() != [feat] || bias.dims() != [feat] {
            return Err(shape_err(format!(
                "layer_norm gain/bias must be [{feat}], got {:?}/{:?}",
                gain.dims(),
                bias.dims()
            )));
        }
        let rows = self.numel() / feat;
        let mut out = vec![0.0f32; self.numel()];
        for r in 0..rows {
            let x = &self.data()[r * feat..(r + 1) * feat];
            let (mean, var) = mean_var(x);
            let inv = 1.0 / (var + LN_EPS as f64).sqrt();
            for j in 0..feat {
                let xn = ((x[j] as f64 - mean) * inv) as f32;
                out[r * feat + j] = xn * gain.data()[j] + bias.data()[j];
            }
        }
        Ok(Tensor::make(
            d.to_vec(),
            out,
            Tensor::grad_flag(&[self, gain, bias]),
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
            },
        ))
    }

    // ---- shape ----

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        if numel_of(dims) != self.numel() {
            return Err(shape_err(format!(
                "reshape {:?} -> {:?} changes element count",
                self.dims(),
                dims
            )));
        }
        Ok(Tensor::make(
            dims.to_vec(),
            self.data().to_vec(),
            self.requires_grad(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Copy `len` indices starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let d = self.dims();
        if axis >= d.len() || start + len > d[axis] {
            return Err(shape_err(format!(
                "slice [{start}..{}] on axis {axis} of {d:?}",
                start + len
            )));
        }
        let outer: usize = d[..axis].iter().product();
        let inner: usize = d[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d[axis] * inner + start * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut dims = d.to_vec();
        dims[axis] = len;
        Ok(Tensor::make(
            dims,
            out,
            self.requires_grad(),
            Op::Slice {
                x: self.clone(),
                axis,
                start,
            },
        ))
    }

    /// Repeat a single row [1, d] (or [d]) into [n, d].
    pub fn broadcast_rows(&self, n: usize) -> Result<Tensor> {
        let d = self.dims();
        let feat = match d {
            [f] => *f,
            [1, f] => *f,
            _ => {
                return Err(shape_err(format!(
                    "broadcast_rows expects [d] or [1, d], got {d:?}"
                )))
            }
        };
        let mut out = Vec::with_capacity(n * feat);
        for _ in 0..n {
            out.extend_from_slice(self.data());
        }
        Ok(Tensor::make(
            vec![n, feat],
            out,
            self.requires_grad(),
            Op::BroadcastRows(self.clone(), n),
        ))
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        Tensor::make(
            vec![1],
            vec![s as f32],
            self.requires_grad(),
            Op::SumAll(self.clone()),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        Tensor::make(
            vec![1],
            vec![(s / self.numel() as f64) as f32],
            self.requires_grad(),
            Op::MeanAll(self.clone()),
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mse")?;
        let s: f64 = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        Ok(Tensor::make(
            vec![1],
            vec![(s / self.numel() as f64) as f32],
            Tensor::grad_flag(&[self, other]),
            Op::Mse(self.clone(), other.clone()),
        ))
    }

    /// Cosine similarity over flattened views; defined as 0 when either
    /// operand is (near-)zero.
    pub fn cosine_sim(&self, other: &Tensor) -> Result<Tensor> {
        if self.numel() != other.numel() {
            return Err(shape_err(format!(
                "cosine_sim: element counts {} and {} differ",
                self.numel(),
                other.numel()
            )));
        }
        let (dot, na, nb) = dot_norms(self.data(), other.data());
        let val = if na < COS_EPS || nb < COS_EPS {
            0.0
        } else {
            (dot / (na * nb)) as f32
        };
        Ok(Tensor::make(
            vec![1],
            vec![val],
            Tensor::grad_flag(&[self, other]),
            Op::CosineSim(self.clone(), other.clone()),
        ))
    }
}

pub(crate) const LN_EPS: f32 = 1e-5;
pub(crate) const COS_EPS: f64 = 1e-12;

/// Concatenate along `axis`. All other dims must agree.
pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
    if tensors.is_empty() {
        return Err(shape_err("concat of zero tensors".into()));
    }
    let rank = tensors[0].dims().len();
    if axis >= rank {
        return Err(shape_err(format!(
            "concat axis {axis} out of range for rank {rank}"
        )));
    }
    for t in tensors {
        if t.dims().len() != rank {
            return Err(shape_err("concat rank mismatch".into()));
        }
        for (ax, (a, b)) in t.dims().iter().zip(tensors[0].dims()).enumerate() {
            if ax != axis && a != b {
                return Err(shape_err(format!(
                    "concat: shapes {:?} and {:?} differ off axis {axis}",
                    t.dims(),
                    tensors[0].dims()
                )));
            }
        }
    }
    let mut dims = tensors[0].dims().to_vec();
    dims[axis] = tensors.iter().map(|t| t.dims()[axis]).sum();
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(numel_of(&dims));
    for o in 0..outer {
        for t in tensors {
            let la = t.dims()[axis];
            out.extend_from_slice(&t.data()[o * la * inner..(o + 1) * la * inner]);
        }
    }
    let rg = tensors.iter().any(|t| t.requires_grad());
    Ok(Tensor::make(dims, out, rg, Op::Concat(tensors.to_vec(), axis)))
}

fn matmul2(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += a[i * k + p] as f64 * b[p * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
}

pub(crate) fn mean_var(x: &[f32]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean: f64 = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

pub(crate) fn dot_norms(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    (dot, na.sqrt(), nb.sqrt())
}

pub(crate) fn gelu_forward(x: f32) -> f32 {
    // tanh approximation; the backward rule differentiates this exact form.
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Visit each 1-D lane along `axis`, passing the flat indices of the lane.
pub(crate) fn for_each_lane(dims: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let la = dims[axis];
    let mut lane = vec![0usize; la];
    for o in 0..outer {
        for i in 0..inner {
            for (j, slot) in lane.iter_mut().enumerate() {
                *slot = o * la * inner + j * inner + i;
            }
            f(&lane);
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims())?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}
