//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! The engine is deliberately small: rank-1 and rank-2 `f64` tensors, the
//! handful of ops that multilayer perceptrons and the training losses need,
//! and a [`Tape`] that records every op in topological order. A forward pass
//! is built by pushing leaves onto a fresh tape and combining the returned
//! [`Var`] handles; [`Tape::backward`] then walks the nodes in reverse once
//! and returns a [`Gradients`] table that callers fold into their parameter
//! tensors with [`Gradients::accumulate`].
//!
//! Ops that act "along the last axis" treat a tensor of shape `[.., n]` as a
//! matrix with `n` columns and `len / n` rows.
//!
//! ```
//! use drdfl::autodiff::{Tape, Tensor};
//!
//! let mut x = Tensor::vector(vec![1.0, 2.0, 3.0]).requiring_grad();
//! let mut tape = Tape::new();
//! let v = tape.leaf(&x);
//! let sq = tape.mul(v, v).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! grads.accumulate(v, &mut x).unwrap();
//! assert_eq!(x.grad().unwrap(), &[2.0, 4.0, 6.0]);
//! ```

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on the variance used inside [`Tape::gaussian_sample`].
pub const SAMPLE_MIN_VARIANCE: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Numerically stable `ln Σ exp(v_i)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Dense row-major array of `f64` with an optional gradient slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stack equal-length rows into a `[rows.len(), cols]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    /// Width of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Gather rows by index into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `g` into the gradient slot, creating it if absent.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `p ← p − lr·∇p` for every parameter. Gradients are left in place.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64) -> Result<()> {
    for p in params.iter_mut() {
        let grad = p.grad.as_ref().ok_or(Error::MissingGrad)?;
        for (w, g) in p.data.iter_mut().zip(grad) {
            *w -= lr * g;
        }
    }
    Ok(())
}

pub fn zero_grad(params: &mut [&mut Tensor]) {
    for p in params.iter_mut() {
        p.zero_grad();
    }
}

/// `c += op(a)·op(b)` for row-major `op(a): [n, k]`, `op(b): [k, m]`.
#[allow(clippy::too_many_arguments)]
fn gemm(n: usize, k: usize, m: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    if n == 0 || k == 0 || m == 0 {
        return;
    }
    // Row-major strides; a transposed operand swaps them.
    let (rsa, csa) = if a_t { (1, n as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (m as isize, 1) };
    // SAFETY: slices hold n·k, k·m and n·m elements laid out as described.
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), m as isize, 1,
        );
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat(Vec<Var>),
    Narrow(Var, usize),
    Clamp(Var, f64, f64),
    GaussianSample { mu: Var, logvar: Var, eps: Vec<f64> },
    Pick(Var, Vec<usize>),
    GaussLogDensity { z: Var, mu: Var, logvar: Var },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn cols_of(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Record a leaf; it is differentiated iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Record a differentiable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    /// Record a constant leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a), false, self.value(b), false, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, ng)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a[n, m] + b[m]`, broadcasting `b` over rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = cols_of(self.shape(a));
        if self.shape(b) != [m] {
            return Err(Error::shape("add_bias", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % m])
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddBias(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        check_finite("exp", self.value(a))?;
        let v = self.map(a, Op::Exp(a), f64::exp);
        check_finite("exp", self.value(v))?;
        Ok(v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::NonFinite { op: "log" });
        }
        Ok(self.map(a, Op::Log(a), f64::ln))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    fn rowwise(&mut self, op_name: &'static str, a: Var) -> Result<(usize, usize, Vec<f64>)> {
        let vals = self.value(a);
        check_finite(op_name, vals)?;
        let m = cols_of(self.shape(a));
        Ok((vals.len() / m, m, vals.to_vec()))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (n, m, vals) = self.rowwise("softmax", a)?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &vals[i * m..(i + 1) * m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = (x - max).exp();
                z += *o;
            }
            out[i * m..(i + 1) * m].iter_mut().for_each(|o| *o /= z);
        }
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Softmax(a), ng))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (n, m, vals) = self.rowwise("log_softmax", a)?;
        let mut out = vals;
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax(a), ng))
    }

    /// Row-wise log-sum-exp; drops the last axis.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let (n, m, vals) = self.rowwise("log_sum_exp", a)?;
        let out: Vec<f64> = (0..n).map(|i| log_sum_exp(&vals[i * m..(i + 1) * m])).collect();
        let mut shape = self.shape(a).to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::LogSumExp(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(vec![], vec![s], Op::Mean(a), ng)
    }

    /// Row sums; drops the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let m = cols_of(self.shape(a));
        let out: Vec<f64> = self.value(a).chunks(m).map(|r| r.iter().sum()).collect();
        let mut shape = self.shape(a).to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(a);
        self.push(shape, out, Op::SumLast(a), ng)
    }

    /// Concatenate along the last axis; all inputs share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", &[], &[]))?;
        let rows = self.value(first).len() / cols_of(self.shape(first));
        let lead: Vec<usize> = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            widths.push(cols_of(s));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let m = cols_of(self.shape(a));
        if len == 0 || start + len > m {
            return Err(Error::shape("narrow", self.shape(a), &[start, len]));
        }
        let out: Vec<f64> = self
            .value(a)
            .chunks(m)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::Narrow(a, start), ng))
    }

    /// Reparameterized draw `μ + σ⊙ε`, `σ² = max(exp(logvar), 1e-12)`,
    /// with `ε` from `rng`.
    pub fn gaussian_sample<R: Rng + ?Sized>(&mut self, mu: Var, logvar: Var, rng: &mut R) -> Result<Var> {
        let eps: Vec<f64> = (0..self.value(mu).len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.gaussian_sample_with(mu, logvar, eps)
    }

    /// As [`Tape::gaussian_sample`] with caller-provided noise.
    pub fn gaussian_sample_with(&mut self, mu: Var, logvar: Var, eps: Vec<f64>) -> Result<Var> {
        self.same_shape("gaussian_sample", mu, logvar)?;
        if eps.len() != self.value(mu).len() {
            return Err(Error::shape("gaussian_sample", self.shape(mu), &[eps.len()]));
        }
        check_finite("gaussian_sample", self.value(mu))?;
        let floor = SAMPLE_MIN_VARIANCE.ln();
        let out: Vec<f64> = self
            .value(mu)
            .iter()
            .zip(self.value(logvar))
            .zip(&eps)
            .map(|((&m, &lv), &e)| m + (0.5 * lv.max(floor)).exp() * e)
            .collect();
        check_finite("gaussian_sample", &out)?;
        let ng = self.ng(mu) || self.ng(logvar);
        let shape = self.shape(mu).to_vec();
        Ok(self.push(shape, out, Op::GaussianSample { mu, logvar, eps }, ng))
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let m = cols_of(self.shape(a));
        let n = self.value(a).len() / m;
        if idx.len() != n {
            return Err(Error::shape("pick", self.shape(a), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= m) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: m,
            });
        }
        let vals = self.value(a);
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| vals[i * m + j]).collect();
        let ng = self.ng(a);
        Ok(self.push(vec![n], out, Op::Pick(a, idx.to_vec()), ng))
    }

    /// Diagonal Gaussian log-densities of every row of `z[B, d]` under each
    /// of `K` components `(mu[K, d], logvar[K, d])`; result is `[B, K]`.
    pub fn gauss_log_density(&mut self, z: Var, mu: Var, logvar: Var) -> Result<Var> {
        self.same_shape("gauss_log_density", mu, logvar)?;
        let (sz, sm) = (self.shape(z), self.shape(mu));
        if sz.len() != 2 || sm.len() != 2 || sz[1] != sm[1] {
            return Err(Error::shape("gauss_log_density", sz, sm));
        }
        let (b, d, k) = (sz[0], sz[1], sm[0]);
        check_finite("gauss_log_density", self.value(z))?;
        let (zv, mv, lv) = (self.value(z), self.value(mu), self.value(logvar));
        let mut out = vec![0.0; b * k];
        for r in 0..b {
            let zr = &zv[r * d..(r + 1) * d];
            for c in 0..k {
                let mut acc = 0.0;
                for j in 0..d {
                    let diff = zr[j] - mv[c * d + j];
                    let l = lv[c * d + j];
                    acc += LN_2PI + l + diff * diff * (-l).exp();
                }
                out[r * k + c] = -0.5 * acc;
            }
        }
        check_finite("gauss_log_density", &out)?;
        let ng = self.ng(z) || self.ng(mu) || self.ng(logvar);
        Ok(self.push(vec![b, k], out, Op::GaussLogDensity { z, mu, logvar }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::NotScalar(self.node(loss).shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.ng(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA += G·Bᵀ, dB += Aᵀ·G
                acc(*a, &mut |ga| gemm(n, m, k, g, false, bv, true, ga));
                acc(*b, &mut |gb| gemm(k, n, m, av, true, g, false, gb));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::AddBias(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(*b, &mut |gb| {
                    let m = gb.len();
                    g.iter().enumerate().for_each(|(i, x)| gb[i % m] += x);
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += s * x)),
            Op::AddScalar(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x)),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out[i];
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / av[i];
                    }
                })
            }
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Square(a) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += 2.0 * av[i] * g[i];
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] >= *lo && av[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let m = cols_of(&node.shape);
                acc(*a, &mut |ga| {
                    for (r, (grow, orow)) in g.chunks(m).zip(out.chunks(m)).enumerate() {
                        let dot: f64 = grow.iter().zip(orow).map(|(x, y)| x * y).sum();
                        for j in 0..m {
                            ga[r * m + j] += orow[j] * (grow[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let m = cols_of(&node.shape);
                acc(*a, &mut |ga| {
                    for (r, (grow, orow)) in g.chunks(m).zip(out.chunks(m)).enumerate() {
                        let total: f64 = grow.iter().sum();
                        for j in 0..m {
                            ga[r * m + j] += grow[j] - orow[j].exp() * total;
                        }
                    }
                })
            }
            Op::LogSumExp(a) => {
                let av = self.value(*a);
                let m = cols_of(self.shape(*a));
                acc(*a, &mut |ga| {
                    for (r, row) in av.chunks(m).enumerate() {
                        let lse = out[r];
                        for j in 0..m {
                            ga[r * m + j] += g[r] * (row[j] - lse).exp();
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => acc(*a, &mut |ga| {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|o| *o += s)
            }),
            Op::SumLast(a) => {
                let m = cols_of(self.shape(*a));
                acc(*a, &mut |ga| ga.iter_mut().enumerate().for_each(|(i, o)| *o += g[i / m]))
            }
            Op::Concat(parts) => {
                let total = cols_of(&node.shape);
                let rows = out.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = cols_of(self.shape(p));
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Narrow(a, start) => {
                let m = cols_of(self.shape(*a));
                let w = cols_of(&node.shape);
                acc(*a, &mut |ga| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        for j in 0..w {
                            ga[r * m + start + j] += grow[j];
                        }
                    }
                })
            }
            Op::GaussianSample { mu, logvar, eps } => {
                let floor = SAMPLE_MIN_VARIANCE.ln();
                let lv = self.value(*logvar);
                acc(*mu, &mut |gm| gm.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(*logvar, &mut |gl| {
                    for i in 0..gl.len() {
                        if lv[i] > floor {
                            gl[i] += g[i] * eps[i] * 0.5 * (0.5 * lv[i]).exp();
                        }
                    }
                });
            }
            Op::Pick(a, idx) => {
                let m = cols_of(self.shape(*a));
                acc(*a, &mut |ga| {
                    for (i, &j) in idx.iter().enumerate() {
                        ga[i * m + j] += g[i];
                    }
                })
            }
            Op::GaussLogDensity { z, mu, logvar } => {
                let (b, d) = (self.shape(*z)[0], self.shape(*z)[1]);
                let k = self.shape(*mu)[0];
                let (zv, mv, lv) = (self.value(*z), self.value(*mu), self.value(*logvar));
                // scaled[r, c, j] = (z - mu) * exp(-logvar)
                let scaled = |r: usize, c: usize, j: usize| (zv[r * d + j] - mv[c * d + j]) * (-lv[c * d + j]).exp();
                acc(*z, &mut |gz| {
                    for r in 0..b {
                        for c in 0..k {
                            let gr = g[r * k + c];
                            for j in 0..d {
                                gz[r * d + j] -= gr * scaled(r, c, j);
                            }
                        }
                    }
                });
                acc(*mu, &mut |gm| {
                    for r in 0..b {
                        for c in 0..k {
                            let gr = g[r * k + c];
                            for j in 0..d {
                                gm[c * d + j] += gr * scaled(r, c, j);
                            }
                        }
                    }
                });
                acc(*logvar, &mut |gl| {
                    for r in 0..b {
                        for c in 0..k {
                            let gr = g[r * k + c];
                            for j in 0..d {
                                let diff = zv[r * d + j] - mv[c * d + j];
                                let q = diff * diff * (-lv[c * d + j]).exp();
                                gl[c * d + j] -= 0.5 * gr * (1.0 - q);
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Fold the gradient of `v` into `target.grad`. Unreached leaves
    /// contribute zeros so the slot is always populated.
    pub fn accumulate(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.len()]),
        }
    }
}
