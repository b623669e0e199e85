//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is a classic Wengert list: a [`Tape`] records every primitive
//! applied to tensors that require gradients, in execution order, and
//! [`backward`] replays the list once in reverse, accumulating adjoints into
//! each operand. Tensors are immutable after construction; only the gradient
//! slot is written during the backward pass.
//!
//! Leaves that should receive gradients are created through [`Tape::watch`].
//! Everything else (inputs, frozen parameters) is built with [`Tensor::new`]
//! and participates in forward math without being recorded.
//!
//! Element types are generic over [`Real`]: `f64` keeps gradient oracles
//! tight in tests, `f32` is what training runs and stored weights use.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::rc::{Rc, Weak};

use thiserror::Error;

/// Floating-point element of a [`Tensor`].
pub trait Real:
    Copy
    + PartialOrd
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    /// Gauss error function; the basis of the exact gelu.
    fn erf(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    // Evaluated in f64 and rounded once; keeps both element types on the
    // same erf, so an f32 forward pass agrees with the f64 oracle to 1 ulp.
    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
}

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("log: inputs must be strictly positive, found {value}")]
    LogDomain { value: f64 },
    #[error("gather_rows: index {index} out of bounds for {rows} rows")]
    IndexOutOfBounds { index: usize, rows: usize },
    #[error("backward: root must be a scalar, got shape {got:?}")]
    RootNotScalar { got: Vec<usize> },
    #[error("backward: tape already consumed; build a fresh graph before differentiating again")]
    TapeConsumed,
    #[error("backward: root is not attached to a live tape")]
    NoTape,
    #[error("{op}: operands were recorded on different tapes")]
    TapeMismatch { op: &'static str },
    #[error("finite_diff_check: function produced a non-finite value")]
    NonFiniteValue,
}

type Result<T> = std::result::Result<T, AutodiffError>;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

struct Inner<E: Real> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    tape: Option<Weak<TapeCore<E>>>,
}

/// Dense n-dimensional array in row-major order, optionally carrying a
/// gradient of identical shape.
pub struct Tensor<E: Real = f32> {
    inner: Rc<Inner<E>>,
}

impl<E: Real> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Real> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E: Real> Tensor<E> {
    /// Constant tensor (no gradient, not recorded).
    pub fn new(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(AutodiffError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::raw(data, shape.to_vec(), false, None))
    }

    pub fn scalar(v: E) -> Self {
        Self::raw(vec![v], vec![], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(
            vec![E::ZERO; shape.iter().product()],
            shape.to_vec(),
            false,
            None,
        )
    }

    fn raw(
        data: Vec<E>,
        shape: Vec<usize>,
        requires_grad: bool,
        tape: Option<Weak<TapeCore<E>>>,
    ) -> Self {
        Self {
            inner: Rc::new(Inner {
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                tape,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Scalar value of a rank-0 / single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    fn accumulate(&self, delta: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn tape(&self) -> Option<Rc<TapeCore<E>>> {
        self.inner.tape.as_ref().and_then(Weak::upgrade)
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

enum Rule<E: Real> {
    Matmul {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    AddSame {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    AddBias {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    MulScalar {
        a: Tensor<E>,
        s: E,
    },
    Conv1d {
        x: Tensor<E>,
        w: Tensor<E>,
        stride: usize,
    },
    Gelu {
        x: Tensor<E>,
    },
    Relu {
        x: Tensor<E>,
    },
    Softmax {
        x: Tensor<E>,
    },
    Log {
        x: Tensor<E>,
    },
    Abs {
        x: Tensor<E>,
    },
    Sum {
        x: Tensor<E>,
    },
    Mean {
        x: Tensor<E>,
    },
    MeanPoolTime {
        x: Tensor<E>,
    },
    GatherRows {
        x: Tensor<E>,
        idx: Rc<Vec<usize>>,
    },
    Reshape {
        x: Tensor<E>,
    },
    StackRows {
        xs: Vec<Tensor<E>>,
    },
}

struct Entry<E: Real> {
    out: Tensor<E>,
    rule: Rule<E>,
}

struct TapeCore<E: Real> {
    entries: RefCell<Vec<Entry<E>>>,
    consumed: Cell<bool>,
}

/// Recorder for one forward pass. Single-threaded; workers that evaluate
/// batches in parallel must each own a private tape.
pub struct Tape<E: Real = f32> {
    core: Rc<TapeCore<E>>,
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Self {
            core: Rc::new(TapeCore {
                entries: RefCell::new(Vec::new()),
                consumed: Cell::new(false),
            }),
        }
    }

    /// Creates a differentiable leaf on this tape.
    pub fn watch(&self, data: Vec<E>, shape: &[usize]) -> Result<Tensor<E>> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(AutodiffError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::raw(
            data,
            shape.to_vec(),
            true,
            Some(Rc::downgrade(&self.core)),
        ))
    }

    pub fn len(&self) -> usize {
        self.core.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Resolves the tape shared by `inputs` (all taped inputs must agree).
fn joint_tape<E: Real>(op: &'static str, inputs: &[&Tensor<E>]) -> Result<Option<Rc<TapeCore<E>>>> {
    let mut found: Option<Rc<TapeCore<E>>> = None;
    for t in inputs {
        if let Some(core) = t.tape() {
            match &found {
                None => found = Some(core),
                Some(prev) => {
                    if !Rc::ptr_eq(prev, &core) {
                        return Err(AutodiffError::TapeMismatch { op });
                    }
                }
            }
        }
    }
    Ok(found)
}

fn record<E: Real>(
    tape: Option<Rc<TapeCore<E>>>,
    data: Vec<E>,
    shape: Vec<usize>,
    rule: impl FnOnce() -> Rule<E>,
) -> Tensor<E> {
    match tape {
        Some(core) => {
            let out = Tensor::raw(data, shape, true, Some(Rc::downgrade(&core)));
            core.entries.borrow_mut().push(Entry {
                out: out.clone(),
                rule: rule(),
            });
            out
        }
        None => Tensor::raw(data, shape, false, None),
    }
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

fn gelu_value<E: Real>(x: E) -> E {
    // Exact Gaussian-CDF form: x * Phi(x), Phi(x) = (1 + erf(x / sqrt(2))) / 2.
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (E::ONE + (x * inv_sqrt2).erf())
}

fn gelu_slope<E: Real>(x: E) -> E {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let phi_cdf = half * (E::ONE + (x * inv_sqrt2).erf());
    let pdf = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * half).exp();
    phi_cdf + x * pdf
}

/// Softmax over the rows of `data`, each of length `cols`, stabilized by
/// max-subtraction.
fn softmax_rows<E: Real>(data: &[E], cols: usize, out: &mut [E]) {
    for (row, orow) in data.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mut m = row[0];
        for &v in row {
            m = m.maximum(v);
        }
        let mut z = E::ZERO;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o = *o / z;
        }
    }
}

impl<E: Real> Tensor<E> {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![E::ZERO; m * n];
        matmul_into(self.data(), rhs.data(), m, k, n, &mut out);
        let tape = joint_tape("matmul", &[self, rhs])?;
        Ok(record(tape, out, vec![m, n], || Rule::Matmul {
            a: self.clone(),
            b: rhs.clone(),
        }))
    }

    /// Elementwise addition; also accepts a rank-1 bias broadcast over the
    /// last axis (the only broadcast this engine performs).
    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() == rhs.shape() {
            let data: Vec<E> = self
                .data()
                .iter()
                .zip(rhs.data())
                .map(|(&a, &b)| a + b)
                .collect();
            let tape = joint_tape("add", &[self, rhs])?;
            return Ok(record(tape, data, self.shape().to_vec(), || {
                Rule::AddSame {
                    a: self.clone(),
                    b: rhs.clone(),
                }
            }));
        }
        let last = *self.shape().last().unwrap_or(&0);
        if rhs.shape().len() == 1 && rhs.shape()[0] == last && !self.shape().is_empty() {
            let n = last;
            let data: Vec<E> = self
                .data()
                .iter()
                .enumerate()
                .map(|(i, &a)| a + rhs.data()[i % n])
                .collect();
            let tape = joint_tape("add", &[self, rhs])?;
            return Ok(record(tape, data, self.shape().to_vec(), || {
                Rule::AddBias {
                    a: self.clone(),
                    b: rhs.clone(),
                }
            }));
        }
        Err(AutodiffError::ShapeMismatch {
            op: "add",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        })
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.add(&rhs.mul_scalar(-E::ONE))
    }

    pub fn mul_scalar(&self, s: E) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&a| a * s).collect();
        let tape = joint_tape("mul_scalar", &[self]).expect("single input");
        record(tape, data, self.shape().to_vec(), || Rule::MulScalar {
            a: self.clone(),
            s,
        })
    }

    /// Valid (no padding) 1-d convolution over the leading time axis.
    /// Input `(t, c_in)`, kernel `(c_out, c_in, k)`, output `(t_out, c_out)`
    /// with `t_out = (t - k) / stride + 1`. Time-major layout keeps the
    /// per-channel bias a last-axis broadcast.
    pub fn conv1d(&self, kernel: &Tensor<E>, stride: usize) -> Result<Tensor<E>> {
        let (xs, ws) = (self.shape(), kernel.shape());
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv1d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (t, c_in) = (xs[0], xs[1]);
        let (c_out, k) = (ws[0], ws[2]);
        if stride == 0 || t < k {
            return Err(AutodiffError::BadShape {
                op: "conv1d",
                expected: format!("time axis >= kernel {k} and stride >= 1"),
                got: xs.to_vec(),
            });
        }
        let t_out = (t - k) / stride + 1;
        let mut out = vec![E::ZERO; t_out * c_out];
        let x = self.data();
        let w = kernel.data();
        for to in 0..t_out {
            for co in 0..c_out {
                let mut acc = E::ZERO;
                for ci in 0..c_in {
                    let woff = (co * c_in + ci) * k;
                    for kk in 0..k {
                        acc += x[(to * stride + kk) * c_in + ci] * w[woff + kk];
                    }
                }
                out[to * c_out + co] = acc;
            }
        }
        let tape = joint_tape("conv1d", &[self, kernel])?;
        Ok(record(tape, out, vec![t_out, c_out], || Rule::Conv1d {
            x: self.clone(),
            w: kernel.clone(),
            stride,
        }))
    }

    /// Exact (Gaussian-CDF) gelu.
    pub fn gelu(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&v| gelu_value(v)).collect();
        let tape = joint_tape("gelu", &[self]).expect("single input");
        record(tape, data, self.shape().to_vec(), || Rule::Gelu {
            x: self.clone(),
        })
    }

    pub fn relu(&self) -> Tensor<E> {
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&v| if v > E::ZERO { v } else { E::ZERO })
            .collect();
        let tape = joint_tape("relu", &[self]).expect("single input");
        record(tape, data, self.shape().to_vec(), || Rule::Relu {
            x: self.clone(),
        })
    }

    /// Softmax over the last axis, stabilized by max-subtraction.
    pub fn softmax(&self) -> Result<Tensor<E>> {
        let cols = *self.shape().last().ok_or_else(|| AutodiffError::BadShape {
            op: "softmax",
            expected: "rank >= 1".into(),
            got: self.shape().to_vec(),
        })?;
        if cols == 0 {
            return Err(AutodiffError::BadShape {
                op: "softmax",
                expected: "non-empty last axis".into(),
                got: self.shape().to_vec(),
            });
        }
        let mut out = vec![E::ZERO; self.len()];
        softmax_rows(self.data(), cols, &mut out);
        let tape = joint_tape("softmax", &[self])?;
        Ok(record(tape, out, self.shape().to_vec(), || Rule::Softmax {
            x: self.clone(),
        }))
    }

    /// Elementwise natural log; rejects non-positive (and NaN) inputs.
    pub fn log(&self) -> Result<Tensor<E>> {
        for &v in self.data() {
            if v.partial_cmp(&E::ZERO) != Some(std::cmp::Ordering::Greater) {
                return Err(AutodiffError::LogDomain { value: v.to_f64() });
            }
        }
        let data: Vec<E> = self.data().iter().map(|&v| v.ln()).collect();
        let tape = joint_tape("log", &[self])?;
        Ok(record(tape, data, self.shape().to_vec(), || Rule::Log {
            x: self.clone(),
        }))
    }

    pub fn abs(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&v| v.abs()).collect();
        let tape = joint_tape("abs", &[self]).expect("single input");
        record(tape, data, self.shape().to_vec(), || Rule::Abs {
            x: self.clone(),
        })
    }

    /// Sum of all elements; returns a scalar tensor.
    pub fn sum(&self) -> Tensor<E> {
        let mut acc = E::ZERO;
        for &v in self.data() {
            acc += v;
        }
        let tape = joint_tape("sum", &[self]).expect("single input");
        record(tape, vec![acc], vec![], || Rule::Sum { x: self.clone() })
    }

    /// Mean of all elements; returns a scalar tensor.
    pub fn mean(&self) -> Tensor<E> {
        let mut acc = E::ZERO;
        for &v in self.data() {
            acc += v;
        }
        let n = E::from_f64(self.len() as f64);
        let tape = joint_tape("mean", &[self]).expect("single input");
        record(tape, vec![acc / n], vec![], || Rule::Mean {
            x: self.clone(),
        })
    }

    /// Mean over the leading time axis of a `(time, channels)` tensor,
    /// yielding `(channels,)`.
    pub fn mean_pool_time(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(AutodiffError::BadShape {
                op: "mean_pool_time",
                expected: "(time, channels) with time >= 1".into(),
                got: s.to_vec(),
            });
        }
        let (t, c) = (s[0], s[1]);
        let inv_t = E::from_f64(1.0 / t as f64);
        let mut out = vec![E::ZERO; c];
        for (ci, o) in out.iter_mut().enumerate() {
            let mut acc = E::ZERO;
            for ti in 0..t {
                acc += self.data()[ti * c + ci];
            }
            *o = acc * inv_t;
        }
        let tape = joint_tape("mean_pool_time", &[self])?;
        Ok(record(tape, out, vec![c], || Rule::MeanPoolTime {
            x: self.clone(),
        }))
    }

    /// Selects rows (leading-axis slices) by index. On a rank-1 tensor this
    /// selects elements. The backward pass scatter-adds into the source,
    /// which is exactly the indicator-sum that routes weight gradients onto
    /// shared codebook entries.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.is_empty() {
            return Err(AutodiffError::BadShape {
                op: "gather_rows",
                expected: "rank >= 1".into(),
                got: s.to_vec(),
            });
        }
        let rows = s[0];
        let row_len: usize = s[1..].iter().product();
        for &i in idx {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfBounds { index: i, rows });
            }
        }
        let mut out = Vec::with_capacity(idx.len() * row_len);
        for &i in idx {
            out.extend_from_slice(&self.data()[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&s[1..]);
        let tape = joint_tape("gather_rows", &[self])?;
        let idx = Rc::new(idx.to_vec());
        Ok(record(tape, out, shape, || Rule::GatherRows {
            x: self.clone(),
            idx,
        }))
    }

    /// Shape change over the same row-major data.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(AutodiffError::BadShape {
                op: "reshape",
                expected: format!("product == {}", self.len()),
                got: shape.to_vec(),
            });
        }
        let tape = joint_tape("reshape", &[self])?;
        Ok(record(tape, self.data().to_vec(), shape.to_vec(), || {
            Rule::Reshape { x: self.clone() }
        }))
    }

    /// Stacks rank-1 tensors of equal length into a `(rows, len)` matrix.
    pub fn stack_rows(rows: &[Tensor<E>]) -> Result<Tensor<E>> {
        let first = rows.first().ok_or_else(|| AutodiffError::BadShape {
            op: "stack_rows",
            expected: "at least one row".into(),
            got: vec![],
        })?;
        let n = first.len();
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            if r.shape().len() != 1 || r.len() != n {
                return Err(AutodiffError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: first.shape().to_vec(),
                    rhs: r.shape().to_vec(),
                });
            }
            data.extend_from_slice(r.data());
        }
        let refs: Vec<&Tensor<E>> = rows.iter().collect();
        let tape = joint_tape("stack_rows", &refs)?;
        Ok(record(tape, data, vec![rows.len(), n], || {
            Rule::StackRows { xs: rows.to_vec() }
        }))
    }
}

pub(crate) fn matmul_into<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let bo = p * n;
            let oo = i * n;
            for j in 0..n {
                out[oo + j] += av * b[bo + j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Reverse pass from a scalar root: populates the gradient of every watched
/// leaf that contributed to it. Adjoints accumulate additively across
/// fan-out. Each tape may be differentiated once.
pub fn backward<E: Real>(root: &Tensor<E>) -> Result<()> {
    if root.len() != 1 {
        return Err(AutodiffError::RootNotScalar {
            got: root.shape().to_vec(),
        });
    }
    let core = root.tape().ok_or(AutodiffError::NoTape)?;
    if core.consumed.get() {
        return Err(AutodiffError::TapeConsumed);
    }
    core.consumed.set(true);
    root.accumulate(&[E::ONE]);

    let entries = core.entries.borrow();
    for entry in entries.iter().rev() {
        let g = match entry.out.inner.grad.borrow().clone() {
            Some(g) => g,
            None => continue, // not on a path to the root
        };
        apply_rule(&entry.rule, &entry.out, &g);
    }
    Ok(())
}

fn apply_rule<E: Real>(rule: &Rule<E>, out: &Tensor<E>, g: &[E]) {
    match rule {
        Rule::Matmul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                // dA = g . B^T
                let mut da = vec![E::ZERO; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = E::ZERO;
                        for j in 0..n {
                            acc += g[i * n + j] * b.data()[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                a.accumulate(&da);
            }
            if b.requires_grad() {
                // dB = A^T . g
                let mut db = vec![E::ZERO; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let av = a.data()[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                b.accumulate(&db);
            }
        }
        Rule::AddSame { a, b } => {
            if a.requires_grad() {
                a.accumulate(g);
            }
            if b.requires_grad() {
                b.accumulate(g);
            }
        }
        Rule::AddBias { a, b } => {
            if a.requires_grad() {
                a.accumulate(g);
            }
            if b.requires_grad() {
                let n = b.len();
                let mut db = vec![E::ZERO; n];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % n] += gv;
                }
                b.accumulate(&db);
            }
        }
        Rule::MulScalar { a, s } => {
            if a.requires_grad() {
                let da: Vec<E> = g.iter().map(|&gv| gv * *s).collect();
                a.accumulate(&da);
            }
        }
        Rule::Conv1d { x, w, stride } => {
            let (t, c_in) = (x.shape()[0], x.shape()[1]);
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            let t_out = (t - k) / stride + 1;
            if x.requires_grad() {
                let mut dx = vec![E::ZERO; t * c_in];
                for to in 0..t_out {
                    for co in 0..c_out {
                        let gv = g[to * c_out + co];
                        for ci in 0..c_in {
                            let woff = (co * c_in + ci) * k;
                            for kk in 0..k {
                                dx[(to * stride + kk) * c_in + ci] += gv * w.data()[woff + kk];
                            }
                        }
                    }
                }
                x.accumulate(&dx);
            }
            if w.requires_grad() {
                let mut dw = vec![E::ZERO; c_out * c_in * k];
                for to in 0..t_out {
                    for co in 0..c_out {
                        let gv = g[to * c_out + co];
                        for ci in 0..c_in {
                            let woff = (co * c_in + ci) * k;
                            for kk in 0..k {
                                dw[woff + kk] += gv * x.data()[(to * stride + kk) * c_in + ci];
                            }
                        }
                    }
                }
                w.accumulate(&dw);
            }
        }
        Rule::Gelu { x } => {
            if x.requires_grad() {
                let dx: Vec<E> = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * gelu_slope(v))
                    .collect();
                x.accumulate(&dx);
            }
        }
        Rule::Relu { x } => {
            if x.requires_grad() {
                let dx: Vec<E> = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > E::ZERO { gv } else { E::ZERO })
                    .collect();
                x.accumulate(&dx);
            }
        }
        Rule::Softmax { x } => {
            if x.requires_grad() {
                let cols = *out.shape().last().unwrap();
                let y = out.data();
                let mut dx = vec![E::ZERO; y.len()];
                for r in 0..y.len() / cols {
                    let o = r * cols;
                    let mut dot = E::ZERO;
                    for j in 0..cols {
                        dot += y[o + j] * g[o + j];
                    }
                    for j in 0..cols {
                        dx[o + j] = y[o + j] * (g[o + j] - dot);
                    }
                }
                x.accumulate(&dx);
            }
        }
        Rule::Log { x } => {
            if x.requires_grad() {
                let dx: Vec<E> = x.data().iter().zip(g).map(|(&v, &gv)| gv / v).collect();
                x.accumulate(&dx);
            }
        }
        Rule::Abs { x } => {
            if x.requires_grad() {
                // Subgradient 0 at the kink.
                let dx: Vec<E> = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        if v > E::ZERO {
                            gv
                        } else if v < E::ZERO {
                            -gv
                        } else {
                            E::ZERO
                        }
                    })
                    .collect();
                x.accumulate(&dx);
            }
        }
        Rule::Sum { x } => {
            if x.requires_grad() {
                let dx = vec![g[0]; x.len()];
                x.accumulate(&dx);
            }
        }
        Rule::Mean { x } => {
            if x.requires_grad() {
                let v = g[0] * E::from_f64(1.0 / x.len() as f64);
                let dx = vec![v; x.len()];
                x.accumulate(&dx);
            }
        }
        Rule::MeanPoolTime { x } => {
            if x.requires_grad() {
                let (t, c) = (x.shape()[0], x.shape()[1]);
                let inv_t = E::from_f64(1.0 / t as f64);
                let mut dx = vec![E::ZERO; t * c];
                for ci in 0..c {
                    let gv = g[ci] * inv_t;
                    for ti in 0..t {
                        dx[ti * c + ci] = gv;
                    }
                }
                x.accumulate(&dx);
            }
        }
        Rule::GatherRows { x, idx } => {
            if x.requires_grad() {
                let row_len: usize = x.shape()[1..].iter().product();
                let mut dx = vec![E::ZERO; x.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..row_len {
                        dx[i * row_len + j] += g[r * row_len + j];
                    }
                }
                x.accumulate(&dx);
            }
        }
        Rule::Reshape { x } => {
            if x.requires_grad() {
                x.accumulate(g);
            }
        }
        Rule::StackRows { xs } => {
            let n = xs.first().map(Tensor::len).unwrap_or(0);
            for (r, x) in xs.iter().enumerate() {
                if x.requires_grad() {
                    x.accumulate(&g[r * n..(r + 1) * n]);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    /// Max over checked coordinates of
    /// `|grad - central_difference| / max(1, |grad|)`.
    pub max_rel_error: f64,
    /// Coordinates skipped because the one-sided differences disagree
    /// (the function has a kink there, e.g. `abs` at zero).
    pub excluded: Vec<usize>,
    pub checked: usize,
}

// One-sided slopes disagreeing by more than this (relative) flag a kink.
const KINK_THRESHOLD: f64 = 5e-2;

/// Compares the reverse-mode gradient of `f` at `x` against central finite
/// differences with step `eps`, coordinate by coordinate.
pub fn finite_diff_check<E, F>(f: F, x: &Tensor<E>, eps: f64) -> Result<FiniteDiffReport>
where
    E: Real,
    F: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    let tape = Tape::new();
    let leaf = tape.watch(x.data().to_vec(), x.shape())?;
    let y = f(&leaf)?;
    if y.len() != 1 {
        return Err(AutodiffError::RootNotScalar {
            got: y.shape().to_vec(),
        });
    }
    if !y.item().is_finite() {
        return Err(AutodiffError::NonFiniteValue);
    }
    backward(&y)?;
    let grad = leaf.grad().unwrap_or_else(|| vec![E::ZERO; x.len()]);

    let eval = |data: Vec<E>| -> Result<f64> {
        let v = f(&Tensor::new(data, x.shape())?)?;
        let val = v.item().to_f64();
        if !val.is_finite() {
            return Err(AutodiffError::NonFiniteValue);
        }
        Ok(val)
    };
    let base = eval(x.data().to_vec())?;

    let mut max_rel = 0.0f64;
    let mut excluded = Vec::new();
    let mut checked = 0usize;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] = E::from_f64(plus[i].to_f64() + eps);
        let mut minus = x.data().to_vec();
        minus[i] = E::from_f64(minus[i].to_f64() - eps);
        let fp = eval(plus)?;
        let fm = eval(minus)?;
        let d_plus = (fp - base) / eps;
        let d_minus = (base - fm) / eps;
        let scale = 1.0f64.max(d_plus.abs()).max(d_minus.abs());
        if (d_plus - d_minus).abs() > KINK_THRESHOLD * scale {
            excluded.push(i);
            continue;
        }
        let central = (fp - fm) / (2.0 * eps);
        let ad = grad[i].to_f64();
        let rel = (ad - central).abs() / 1.0f64.max(ad.abs());
        if rel > max_rel {
            max_rel = rel;
        }
        checked += 1;
    }
    Ok(FiniteDiffReport {
        max_rel_error: max_rel,
        excluded,
        checked,
    })
}
