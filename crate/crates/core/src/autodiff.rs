//! Tape-based reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradients of every node that transitively depends on a trainable leaf.
//! The tape is generic over the element type so the same network code runs in
//! `f32` for training and in `f64` for finite-difference gradient checks.
//!
//! Convolutions use a channels-last layout: `[batch, length, channels]`.

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::rc::Rc;

use ndarray::{linalg::general_mat_mul, Array2, ArrayD, ArrayView2, Axis, IxDyn, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};

pub type Tensor<T> = ArrayD<T>;

/// Floating point element types the tape can run on.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite conversion")
    }
    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Sigmoid(Var),
    Mish(Var),
    Elu(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    SoftmaxLast(Var),
    LayerNormLast { x: Var, eps: f64 },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    GatherLast { x: Var, index: Vec<usize> },
    Conv1d { x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize },
    ConvT1d { x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize },
}

impl Op {
    fn describe(&self) -> (&'static str, Vec<Var>) {
        use Op::*;
        match self {
            Leaf => ("leaf", vec![]),
            Add(a, b) => ("add", vec![*a, *b]),
            Sub(a, b) => ("sub", vec![*a, *b]),
            Mul(a, b) => ("mul", vec![*a, *b]),
            Scale(x, _) => ("scale", vec![*x]),
            AddScalar(x) => ("add_scalar", vec![*x]),
            MatMul(a, b) => ("matmul", vec![*a, *b]),
            Bmm { a, b, .. } => ("bmm", vec![*a, *b]),
            Sigmoid(x) => ("sigmoid", vec![*x]),
            Mish(x) => ("mish", vec![*x]),
            Elu(x) => ("elu", vec![*x]),
            Tanh(x) => ("tanh", vec![*x]),
            Relu(x) => ("relu", vec![*x]),
            Exp(x) => ("exp", vec![*x]),
            Log(x) => ("log", vec![*x]),
            Abs(x) => ("abs", vec![*x]),
            Square(x) => ("square", vec![*x]),
            Clamp { x, .. } => ("clamp", vec![*x]),
            SoftmaxLast(x) => ("softmax", vec![*x]),
            LayerNormLast { x, .. } => ("layer_norm", vec![*x]),
            SumAll(x) => ("sum_all", vec![*x]),
            MeanAll(x) => ("mean_all", vec![*x]),
            SumAxis { x, .. } => ("sum_axis", vec![*x]),
            Reshape(x) => ("reshape", vec![*x]),
            Permute { x, .. } => ("permute", vec![*x]),
            Narrow { x, .. } => ("narrow", vec![*x]),
            Concat { parts, .. } => ("concat", parts.clone()),
            GatherLast { x, .. } => ("gather_last", vec![*x]),
            Conv1d { x, w, b, .. } => ("conv1d", vec![*x, *w, *b]),
            ConvT1d { x, w, b, .. } => ("conv_transpose1d", vec![*x, *w, *b]),
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if `v` received none.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(IxDyn(like)))
    }
}

/// Operation tape.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn standard<T: Scalar>(a: Tensor<T>) -> Tensor<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn as_2d<T: Scalar>(a: &Tensor<T>, rows: usize, cols: usize) -> ArrayView2<'_, T> {
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("contiguous tensor reshaped to 2d")
}

fn reshape<T: Scalar>(a: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    standard(a)
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape preserves element count")
}

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    let extra = out.ndim() - shape.len();
    for _ in 0..extra {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn mish_fwd<T: Scalar>(x: T) -> T {
    // softplus(x) = ln(1 + e^x), evaluated stably
    let sp = if x > T::of(20.0) { x } else { x.exp().ln_1p() };
    x * sp.tanh()
}

fn mish_grad<T: Scalar>(x: T) -> T {
    let sp = if x > T::of(20.0) { x } else { x.exp().ln_1p() };
    let th = sp.tanh();
    let sig = T::one() / (T::one() + (-x).exp());
    th + x * (T::one() - th * th) * sig
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// im2col for a channels-last 1d convolution; rows are `(batch, out_pos)`,
/// columns `(tap, in_channel)`.
fn im2col<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize, pad: usize, lout: usize) -> Array2<T> {
    let (b, lin, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<T>::zeros((b * lout, kernel * cin));
    {
        let cs = cols.as_slice_mut().expect("fresh array");
        let width = kernel * cin;
        for bi in 0..b {
            for t in 0..lout {
                let row = &mut cs[(bi * lout + t) * width..(bi * lout + t + 1) * width];
                for k in 0..kernel {
                    let pos = (t * stride + k) as isize - pad as isize;
                    if pos < 0 || pos as usize >= lin {
                        continue;
                    }
                    let src = &xs[(bi * lin + pos as usize) * cin..(bi * lin + pos as usize + 1) * cin];
                    row[k * cin..(k + 1) * cin].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back to the input.
fn col2im<T: Scalar>(
    cols: &Array2<T>,
    shape: &[usize],
    kernel: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) -> Tensor<T> {
    let (b, lin, cin) = (shape[0], shape[1], shape[2]);
    let mut dx = Tensor::<T>::zeros(IxDyn(shape));
    let cs = cols.as_slice().expect("standard layout");
    let ds = dx.as_slice_mut().expect("fresh array");
    let width = kernel * cin;
    for bi in 0..b {
        for t in 0..lout {
            let row = &cs[(bi * lout + t) * width..(bi * lout + t + 1) * width];
            for k in 0..kernel {
                let pos = (t * stride + k) as isize - pad as isize;
                if pos < 0 || pos as usize >= lin {
                    continue;
                }
                let dst = &mut ds[(bi * lin + pos as usize) * cin..(bi * lin + pos as usize + 1) * cin];
                for (d, &v) in dst.iter_mut().zip(&row[k * cin..(k + 1) * cin]) {
                    *d += v;
                }
            }
        }
    }
    dx
}

pub fn conv1d_out_len(lin: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (lin + 2 * pad - kernel) / stride + 1
}

pub fn conv_t1d_out_len(lin: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (lin - 1) * stride + kernel - 2 * pad
}

/// `out = a @ b`; tiny products skip the packing overhead of the blocked kernel.
fn mm_into<T: Scalar>(a: &ArrayView2<'_, T>, b: &ArrayView2<'_, T>, out: &mut ndarray::ArrayViewMut2<'_, T>) {
    let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());
    if m * k * n > 4096 {
        general_mat_mul(T::one(), a, b, T::zero(), out);
        return;
    }
    for i in 0..m {
        for j in 0..n {
            let mut s = T::zero();
            for p in 0..k {
                s = s + a[[i, p]] * b[[p, j]];
            }
            out[[i, j]] = s;
        }
    }
}

fn matmul2<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = Array2::<T>::zeros((a.nrows(), b.ncols()));
    general_mat_mul(T::one(), &a, &b, T::zero(), &mut out);
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A tape whose nodes never require gradients (inference).
    pub fn no_grad() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad: requires_grad && self.grad_enabled });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Every node in tape order with its operation name and operands.
    pub fn ops(&self) -> Vec<(Var, &'static str, Vec<Var>)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let (name, inputs) = n.op.describe();
                (Var(i), name, inputs)
            })
            .collect()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on a non-scalar node");
        *val.iter().next().expect("one element")
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(standard(value), Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(standard(value), Op::Leaf, true)
    }

    /// Copies `v` into a fresh leaf that blocks gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let val = (*self.value(v)).clone();
        self.push(val, Op::Leaf, false)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(&Tensor<T>, &Tensor<T>) -> Tensor<T>, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = standard(f(&va, &vb));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let vx = self.value(x);
        let out = vx.mapv(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let cc = T::of(c);
        self.unary(x, move |v| v * cc, Op::Scale(x, c))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let cc = T::of(c);
        self.unary(x, move |v| v + cc, Op::AddScalar(x))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn mish(&self, x: Var) -> Var {
        self.unary(x, mish_fwd, Op::Mish(x))
    }

    pub fn elu(&self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { v.exp() - T::one() }, Op::Elu(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(x, move |v| v.max(l).min(h), Op::Clamp { x, lo, hi })
    }

    /// `a[..., k] @ b[k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.ndim(), 2, "matmul rhs must be 2d");
        let k = *va.shape().last().expect("non-scalar lhs");
        assert_eq!(k, vb.shape()[0], "matmul inner dims {:?} x {:?}", va.shape(), vb.shape());
        let rows = va.len() / k;
        let out = matmul2(as_2d(&va, rows, k), vb.view().into_dimensionality().expect("2d"));
        let mut shape = va.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = vb.shape()[1];
        let out = reshape(out.into_dyn(), &shape);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// Batched matmul of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` if `trans_b`).
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let n = if trans_b { vb.shape()[1] } else { vb.shape()[2] };
        let mut out = Tensor::<T>::zeros(IxDyn(&[bs, m, n]));
        for i in 0..bs {
            let ai = va.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().expect("2d");
            let bi = vb.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().expect("2d");
            let bi = if trans_b { bi.reversed_axes() } else { bi };
            debug_assert_eq!(bi.nrows(), k);
            let mut oi = out.index_axis_mut(Axis(0), i).into_dimensionality::<ndarray::Ix2>().expect("2d");
            mm_into(&ai, &bi, &mut oi);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Bmm { a, b, trans_b }, rg)
    }

    pub fn softmax_last(&self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = (*vx).clone();
        for mut row in out.lanes_mut(Axis(vx.ndim() - 1)) {
            let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s: T = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxLast(x), rg)
    }

    /// Normalizes over the last axis (no affine part).
    pub fn layer_norm_last(&self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let mut out = (*vx).clone();
        let e = T::of(eps);
        for mut row in out.lanes_mut(Axis(vx.ndim() - 1)) {
            let n = T::of(row.len() as f64);
            let mean = row.sum() / n;
            let var = row.fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let inv = T::one() / (var + e).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let rg = self.rg(x);
        self.push(out, Op::LayerNormLast { x, eps }, rg)
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::from_elem(IxDyn(&[]), s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.sum() / T::of(vx.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::from_elem(IxDyn(&[]), s), Op::MeanAll(x), rg)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Var {
        let out = self.value(x).sum_axis(Axis(axis));
        let rg = self.rg(x);
        self.push(out, Op::SumAxis { x, axis }, rg)
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let out = reshape((*self.value(x)).clone(), shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Var {
        let out = standard((*self.value(x)).clone().permuted_axes(IxDyn(axes)));
        let rg = self.rg(x);
        self.push(out, Op::Permute { x, axes: axes.to_vec() }, rg)
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_axis(Axis(axis), (start..start + len).into()).to_owned();
        let rg = self.rg(x);
        self.push(standard(out), Op::Narrow { x, axis, start }, rg)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(standard(out), Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// Picks `x[r, index[r]]` for each row `r` of the flattened leading dims.
    pub fn gather_last(&self, x: Var, index: &[usize]) -> Var {
        let vx = self.value(x);
        let a = *vx.shape().last().expect("non-scalar");
        let rows = vx.len() / a;
        assert_eq!(rows, index.len(), "one index per row");
        let flat = as_2d(&vx, rows, a);
        let vals: Vec<T> = index.iter().enumerate().map(|(r, &i)| flat[[r, i]]).collect();
        let shape = &vx.shape()[..vx.ndim() - 1];
        let out = Tensor::from_shape_vec(IxDyn(shape), vals).expect("gather shape");
        let rg = self.rg(x);
        self.push(out, Op::GatherLast { x, index: index.to_vec() }, rg)
    }

    /// Channels-last 1d convolution: `x [B, L, Cin]`, `w [K*Cin, Cout]`, `b [Cout]`.
    pub fn conv1d(&self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (bs, lin) = (vx.shape()[0], vx.shape()[1]);
        let cout = vw.shape()[1];
        let lout = conv1d_out_len(lin, kernel, stride, pad);
        let cols = im2col(&vx, kernel, stride, pad, lout);
        let mut out = matmul2(cols.view(), vw.view().into_dimensionality().expect("2d"));
        out += &vb.view().into_dimensionality::<ndarray::Ix1>().expect("1d bias");
        let out = reshape(out.into_dyn(), &[bs, lout, cout]);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Conv1d { x, w, b, kernel, stride, pad }, rg)
    }

    /// Channels-last transposed 1d convolution: `x [B, L, Cin]`, `w [Cin, K*Cout]`, `b [Cout]`.
    pub fn conv_t1d(&self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (bs, lin, cin) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let cout = vb.len();
        let lout = conv_t1d_out_len(lin, kernel, stride, pad);
        let y = matmul2(as_2d(&vx, bs * lin, cin), vw.view().into_dimensionality().expect("2d"));
        let mut out = Tensor::<T>::zeros(IxDyn(&[bs, lout, cout]));
        {
            let ys = y.as_slice().expect("standard");
            let os = out.as_slice_mut().expect("fresh");
            for bi in 0..bs {
                for t in 0..lin {
                    let row = &ys[(bi * lin + t) * kernel * cout..(bi * lin + t + 1) * kernel * cout];
                    for k in 0..kernel {
                        let pos = (t * stride + k) as isize - pad as isize;
                        if pos < 0 || pos as usize >= lout {
                            continue;
                        }
                        let dst = &mut os[(bi * lout + pos as usize) * cout..(bi * lout + pos as usize + 1) * cout];
                        for (d, &v) in dst.iter_mut().zip(&row[k * cout..(k + 1) * cout]) {
                            *d += v;
                        }
                    }
                }
            }
            let bsl = vb.as_slice().expect("bias");
            for chunk in os.chunks_mut(cout) {
                for (d, &bv) in chunk.iter_mut().zip(bsl) {
                    *d += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::ConvT1d { x, w, b, kernel, stride, pad }, rg)
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        let rv = &nodes[root.0].value;
        assert_eq!(rv.len(), 1, "backward root must be a scalar");
        grads[root.0] = Some(Tensor::from_elem(rv.raw_dim(), T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var, g: Tensor<T>) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => *e += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let g = match &nodes[i].op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let out = &nodes[i].value;
            let val = |v: Var| &nodes[v.0].value;
            let need = |v: Var| nodes[v.0].requires_grad;
            match &nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if need(*a) {
                        acc(&mut grads, &nodes, *a, reduce_to(&g, val(*a).shape()));
                    }
                    if need(*b) {
                        let gb = if g.shape() == val(*b).shape() { g } else { reduce_to(&g, val(*b).shape()) };
                        acc(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::Sub(a, b) => {
                    if need(*a) {
                        acc(&mut grads, &nodes, *a, reduce_to(&g, val(*a).shape()));
                    }
                    if need(*b) {
                        acc(&mut grads, &nodes, *b, reduce_to(&g.mapv(|v| -v), val(*b).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        let ga = standard(&g * &**val(*b));
                        acc(&mut grads, &nodes, *a, reduce_to(&ga, val(*a).shape()));
                    }
                    if need(*b) {
                        let gb = standard(&g * &**val(*a));
                        acc(&mut grads, &nodes, *b, reduce_to(&gb, val(*b).shape()));
                    }
                }
                Op::Scale(x, c) => {
                    let c = T::of(*c);
                    acc(&mut grads, &nodes, *x, g.mapv(|v| v * c));
                }
                Op::AddScalar(x) => acc(&mut grads, &nodes, *x, g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let k = vb.shape()[0];
                    let n = vb.shape()[1];
                    let rows = va.len() / k;
                    let g2 = as_2d(&g, rows, n);
                    if need(*a) {
                        let vb2: ArrayView2<T> = vb.view().into_dimensionality().expect("2d");
                        let ga = matmul2(g2, vb2.t());
                        acc(&mut grads, &nodes, *a, reshape(ga.into_dyn(), va.shape()));
                    }
                    if need(*b) {
                        let gb = matmul2(as_2d(va, rows, k).t(), g2);
                        acc(&mut grads, &nodes, *b, gb.into_dyn());
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let (va, vb) = (val(*a), val(*b));
                    let bs = va.shape()[0];
                    let mut ga = need(*a).then(|| Tensor::<T>::zeros(va.raw_dim()));
                    let mut gb = need(*b).then(|| Tensor::<T>::zeros(vb.raw_dim()));
                    for bi in 0..bs {
                        let gi = g.index_axis(Axis(0), bi).into_dimensionality::<ndarray::Ix2>().expect("2d");
                        let ai = va.index_axis(Axis(0), bi).into_dimensionality::<ndarray::Ix2>().expect("2d");
                        let bmat = vb.index_axis(Axis(0), bi).into_dimensionality::<ndarray::Ix2>().expect("2d");
                        if let Some(ga) = ga.as_mut() {
                            let mut gai = ga.index_axis_mut(Axis(0), bi).into_dimensionality::<ndarray::Ix2>().expect("2d");
                            // out = a @ B' where B' = b or b^T
                            if *trans_b {
                                mm_into(&gi, &bmat, &mut gai);
                            } else {
                                mm_into(&gi, &bmat.t(), &mut gai);
                            }
                        }
                        if let Some(gb) = gb.as_mut() {
                            let mut gbi = gb.index_axis_mut(Axis(0), bi).into_dimensionality::<ndarray::Ix2>().expect("2d");
                            if *trans_b {
                                mm_into(&gi.t(), &ai, &mut gbi);
                            } else {
                                mm_into(&ai.t(), &gi, &mut gbi);
                            }
                        }
                    }
                    if let Some(ga) = ga {
                        acc(&mut grads, &nodes, *a, ga);
                    }
                    if let Some(gb) = gb {
                        acc(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&**out).for_each(|d, &s| *d *= s * (T::one() - s));
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Mish(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&**val(*x)).for_each(|d, &v| *d *= mish_grad(v));
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Elu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(&**val(*x))
                        .for_each(|d, &v| *d *= if v > T::zero() { T::one() } else { v.exp() });
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Tanh(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&**out).for_each(|d, &y| *d *= T::one() - y * y);
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(&**val(*x))
                        .for_each(|d, &v| *d *= if v > T::zero() { T::one() } else { T::zero() });
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Exp(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&**out).for_each(|d, &y| *d *= y);
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Log(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&**val(*x)).for_each(|d, &v| *d = *d / v);
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Abs(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&**val(*x)).for_each(|d, &v| {
                        *d *= if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    });
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Square(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&**val(*x)).for_each(|d, &v| *d *= v + v);
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let (l, h) = (T::of(*lo), T::of(*hi));
                    let mut gx = g;
                    Zip::from(&mut gx).and(&**val(*x)).for_each(|d, &v| {
                        if v < l || v > h {
                            *d = T::zero();
                        }
                    });
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::SoftmaxLast(x) => {
                    let mut gx = g;
                    let last = out.ndim() - 1;
                    for (mut gr, yr) in gx.lanes_mut(Axis(last)).into_iter().zip(out.lanes(Axis(last))) {
                        let dot = gr.iter().zip(yr.iter()).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv);
                        Zip::from(&mut gr).and(&yr).for_each(|d, &y| *d = y * (*d - dot));
                    }
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::LayerNormLast { x, eps } => {
                    let vx = val(*x);
                    let mut gx = g;
                    let last = out.ndim() - 1;
                    let e = T::of(*eps);
                    for ((mut gr, yr), xr) in gx
                        .lanes_mut(Axis(last))
                        .into_iter()
                        .zip(out.lanes(Axis(last)))
                        .zip(vx.lanes(Axis(last)))
                    {
                        let n = T::of(xr.len() as f64);
                        let mean = xr.sum() / n;
                        let var = xr.fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
                        let inv = T::one() / (var + e).sqrt();
                        let gmean = gr.sum() / n;
                        let gy = gr.iter().zip(yr.iter()).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv) / n;
                        Zip::from(&mut gr).and(&yr).for_each(|d, &y| *d = inv * (*d - gmean - y * gy));
                    }
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::SumAll(x) => {
                    let gv = *g.iter().next().expect("scalar");
                    acc(&mut grads, &nodes, *x, Tensor::from_elem(val(*x).raw_dim(), gv));
                }
                Op::MeanAll(x) => {
                    let vx = val(*x);
                    let gv = *g.iter().next().expect("scalar") / T::of(vx.len() as f64);
                    acc(&mut grads, &nodes, *x, Tensor::from_elem(vx.raw_dim(), gv));
                }
                Op::SumAxis { x, axis } => {
                    let shape = val(*x).shape().to_vec();
                    let gx = g.insert_axis(Axis(*axis)).broadcast(IxDyn(&shape)).expect("broadcast").to_owned();
                    acc(&mut grads, &nodes, *x, standard(gx));
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    acc(&mut grads, &nodes, *x, reshape(g, &shape));
                }
                Op::Permute { x, axes } => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    acc(&mut grads, &nodes, *x, standard(g.permuted_axes(IxDyn(&inv))));
                }
                Op::Narrow { x, axis, start } => {
                    let mut gx = Tensor::<T>::zeros(val(*x).raw_dim());
                    let len = g.shape()[*axis];
                    gx.slice_axis_mut(Axis(*axis), (*start..*start + len).into()).assign(&g);
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::Concat { parts, axis } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        if need(p) {
                            let gp = g.slice_axis(Axis(*axis), (off..off + len).into()).to_owned();
                            acc(&mut grads, &nodes, p, standard(gp));
                        }
                        off += len;
                    }
                }
                Op::GatherLast { x, index } => {
                    let vx = val(*x);
                    let a = *vx.shape().last().expect("non-scalar");
                    let mut gx = Array2::<T>::zeros((index.len(), a));
                    for (r, (&i, &gv)) in index.iter().zip(g.iter()).enumerate() {
                        gx[[r, i]] += gv;
                    }
                    acc(&mut grads, &nodes, *x, reshape(gx.into_dyn(), vx.shape()));
                }
                Op::Conv1d { x, w, b, kernel, stride, pad } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let (bs, lout, cout) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                    let g2 = as_2d(&g, bs * lout, cout);
                    let vw2: ArrayView2<T> = vw.view().into_dimensionality().expect("2d");
                    if need(*x) {
                        let dcols = matmul2(g2, vw2.t());
                        let dx = col2im(&dcols, vx.shape(), *kernel, *stride, *pad, lout);
                        acc(&mut grads, &nodes, *x, dx);
                    }
                    if need(*w) {
                        let cols = im2col(vx, *kernel, *stride, *pad, lout);
                        acc(&mut grads, &nodes, *w, matmul2(cols.t(), g2).into_dyn());
                    }
                    if need(*b) {
                        acc(&mut grads, &nodes, *b, g2.sum_axis(Axis(0)).into_dyn());
                    }
                }
                Op::ConvT1d { x, w, b, kernel, stride, pad } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let (bs, lin, cin) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                    let (lout, cout) = (g.shape()[1], g.shape()[2]);
                    // dY[(b,t), (k,c)] = g[b, t*s - p + k, c]
                    let mut dy = Array2::<T>::zeros((bs * lin, kernel * cout));
                    {
                        let gs = g.as_slice().expect("standard");
                        let ds = dy.as_slice_mut().expect("fresh");
                        for bi in 0..bs {
                            for t in 0..lin {
                                let row = &mut ds[(bi * lin + t) * kernel * cout..(bi * lin + t + 1) * kernel * cout];
                                for k in 0..*kernel {
                                    let pos = (t * stride + k) as isize - *pad as isize;
                                    if pos < 0 || pos as usize >= lout {
                                        continue;
                                    }
                                    let src = &gs[(bi * lout + pos as usize) * cout..(bi * lout + pos as usize + 1) * cout];
                                    row[k * cout..(k + 1) * cout].copy_from_slice(src);
                                }
                            }
                        }
                    }
                    let vw2: ArrayView2<T> = vw.view().into_dimensionality().expect("2d");
                    if need(*x) {
                        let dx = matmul2(dy.view(), vw2.t());
                        acc(&mut grads, &nodes, *x, reshape(dx.into_dyn(), vx.shape()));
                    }
                    if need(*w) {
                        let dw = matmul2(as_2d(vx, bs * lin, cin).t(), dy.view());
                        acc(&mut grads, &nodes, *w, dw.into_dyn());
                    }
                    if need(*b) {
                        acc(&mut grads, &nodes, *b, as_2d(&g, bs * lout, cout).sum_axis(Axis(0)).into_dyn());
                    }
                }
            }
        }
        Grads { grads }
    }
}

/// Shorthand for building a tensor from a flat vector.
pub fn tensor<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::from_shape_vec(IxDyn(shape), data).expect("shape matches data length")
}

/// Converts a tensor between element types.
pub fn cast<A: Scalar, B: Scalar>(t: &Tensor<A>) -> Tensor<B> {
    t.mapv(|v| B::of(v.as_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` with respect to every entry of `x0`.
    fn numeric_grad(f: &dyn Fn(&Tensor<f64>) -> f64, x0: &Tensor<f64>) -> Tensor<f64> {
        let h = 1e-6;
        let mut out = Tensor::zeros(x0.raw_dim());
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            out.as_slice_mut().unwrap()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) * 2.0 - 1.0
            })
            .collect();
        tensor(shape, data)
    }

    fn check(build: &dyn Fn(&Graph<f64>, Var) -> Var, x0: Tensor<f64>) {
        let g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&g, x);
        let analytic = g.backward(y).get(x).cloned().unwrap();
        let f = |xv: &Tensor<f64>| {
            let g = Graph::new();
            let x = g.constant(xv.clone());
            let y = build(&g, x);
            g.scalar(y)
        };
        let numeric = numeric_grad(&f, &x0);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-3);
            assert!((a - n).abs() / denom < 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn elementwise_grads() {
        let x0 = pseudo(&[3, 4], 1);
        check(&|g, x| { let y = g.mish(x); g.sum_all(y) }, x0.clone());
        check(&|g, x| { let y = g.sigmoid(x); let y = g.square(y); g.sum_all(y) }, x0.clone());
        check(&|g, x| { let y = g.elu(x); g.mean_all(y) }, x0.clone());
        check(&|g, x| { let y = g.tanh(x); g.sum_all(y) }, x0.clone());
        check(&|g, x| { let y = g.exp(x); let y = g.add_scalar(y, 1.0); let y = g.log(y); g.sum_all(y) }, x0.clone());
    }

    #[test]
    fn softmax_and_layer_norm_grads() {
        let w = pseudo(&[2, 3, 5], 7);
        check(
            &|g, x| {
                let y = g.softmax_last(x);
                let c = g.constant(w.clone());
                let y = g.mul(y, c);
                g.sum_all(y)
            },
            pseudo(&[2, 3, 5], 2),
        );
        check(
            &|g, x| {
                let y = g.layer_norm_last(x, 1e-5);
                let c = g.constant(w.clone());
                let y = g.mul(y, c);
                g.sum_all(y)
            },
            pseudo(&[2, 3, 5], 3),
        );
    }

    #[test]
    fn matmul_bmm_grads() {
        let b = pseudo(&[4, 3], 11);
        check(&|g, x| { let c = g.constant(b.clone()); let y = g.matmul(x, c); let y = g.square(y); g.sum_all(y) }, pseudo(&[2, 5, 4], 4));
        let a = pseudo(&[2, 5, 4], 12);
        check(&|g, x| { let c = g.constant(a.clone()); let y = g.matmul(c, x); let y = g.square(y); g.sum_all(y) }, pseudo(&[4, 3], 5));
        let bb = pseudo(&[2, 3, 4], 13);
        check(&|g, x| { let c = g.constant(bb.clone()); let y = g.bmm(x, c, true); let y = g.square(y); g.sum_all(y) }, pseudo(&[2, 5, 4], 6));
        check(&|g, x| { let c = g.constant(bb.clone()); let y = g.bmm(c, x, false); let y = g.square(y); g.sum_all(y) }, pseudo(&[2, 4, 2], 8));
        check(&|g, x| { let c = g.constant(a.clone()); let y = g.bmm(c, x, true); let y = g.square(y); g.sum_all(y) }, pseudo(&[2, 3, 4], 9));
    }

    #[test]
    fn conv_grads() {
        let w = pseudo(&[5 * 3, 2], 21);
        let b = pseudo(&[2], 22);
        for (stride, pad) in [(1, 2), (2, 1), (2, 2)] {
            check(
                &|g, x| {
                    let (wc, bc) = (g.constant(w.clone()), g.constant(b.clone()));
                    let y = g.conv1d(x, wc, bc, 5, stride, pad);
                    let y = g.square(y);
                    g.sum_all(y)
                },
                pseudo(&[2, 7, 3], 23),
            );
        }
        let x0 = pseudo(&[2, 7, 3], 24);
        check(
            &|g, wv| {
                let (xc, bc) = (g.constant(x0.clone()), g.constant(b.clone()));
                let y = g.conv1d(xc, wv, bc, 5, 2, 1);
                let y = g.square(y);
                g.sum_all(y)
            },
            w.clone(),
        );
        let wt = pseudo(&[3, 4 * 2], 25);
        check(
            &|g, x| {
                let (wc, bc) = (g.constant(wt.clone()), g.constant(b.clone()));
                let y = g.conv_t1d(x, wc, bc, 4, 2, 1);
                let y = g.square(y);
                g.sum_all(y)
            },
            pseudo(&[2, 4, 3], 26),
        );
        let xt = pseudo(&[2, 4, 3], 27);
        check(
            &|g, wv| {
                let (xc, bc) = (g.constant(xt.clone()), g.constant(b.clone()));
                let y = g.conv_t1d(xc, wv, bc, 4, 2, 1);
                let y = g.square(y);
                g.sum_all(y)
            },
            wt.clone(),
        );
    }

    #[test]
    fn conv_t_matches_direct_definition() {
        let x = pseudo(&[1, 3, 2], 31);
        let w = pseudo(&[2, 4 * 3], 32);
        let b = tensor(&[3], vec![0.0; 3]);
        let g = Graph::<f64>::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b));
        let y = g.value(g.conv_t1d(xv, wv, bv, 4, 2, 1));
        assert_eq!(y.shape(), &[1, 6, 3]);
        let mut expect = vec![0.0; 18];
        for t in 0..3 {
            for k in 0..4 {
                let pos = (t * 2 + k) as isize - 1;
                if !(0..6).contains(&pos) {
                    continue;
                }
                for co in 0..3 {
                    for ci in 0..2 {
                        expect[pos as usize * 3 + co] += x[[0, t, ci]] * w[[ci, k * 3 + co]];
                    }
                }
            }
        }
        for (a, e) in y.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_op_grads() {
        let w = pseudo(&[3, 2, 4], 41);
        check(
            &|g, x| {
                let p = g.permute(x, &[2, 0, 1]);
                let r = g.reshape(p, &[4, 6]);
                let n = g.narrow(r, 1, 1, 3);
                let s = g.sum_axis(n, 0);
                let y = g.square(s);
                let c = g.concat(&[y, s], 0);
                let _ = &w;
                g.sum_all(c)
            },
            pseudo(&[3, 2, 4], 42),
        );
        check(
            &|g, x| {
                let y = g.gather_last(x, &[0, 2, 1]);
                let y = g.square(y);
                g.sum_all(y)
            },
            pseudo(&[3, 3], 43),
        );
        let bias = pseudo(&[4], 44);
        check(
            &|g, x| {
                let b = g.param(bias.clone());
                let y = g.add(x, b);
                let m = g.mul(y, x);
                let s = g.sub(m, b);
                g.sum_all(s)
            },
            pseudo(&[3, 4], 45),
        );
    }

    #[test]
    fn no_grad_graph_records_no_gradients() {
        let g = Graph::<f32>::no_grad();
        let x = g.param(tensor(&[2], vec![1.0, 2.0]));
        let y = g.sum_all(x);
        let grads = g.backward(y);
        assert!(grads.get(x).is_none());
    }
}
