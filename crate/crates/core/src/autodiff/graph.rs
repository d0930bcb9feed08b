use std::cell::{Cell, Ref, RefCell};

use super::kernels::{
    col2im, conv2d_direct, conv2d_direct_backward, conv2d_im2col, conv2d_im2col_backward, im2col,
    invert, matmul_nn, matmul_nt, matmul_tn, ConvGeom,
};
use super::tensor::Tensor;
use crate::error::{usage, Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which convolution kernel the `conv2d` primitive runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    #[default]
    Im2col,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Neg,
    Tanh,
    Sinh,
    Cosh,
    Acosh,
    Atanh,
    Asinh,
    Sqrt,
    Exp,
    Log,
    Relu,
    Square,
    Sinhc,
    AcoshRatio,
}

/// Below this distance from the removable singularity the series forms are
/// used; their truncation error is then about one unit roundoff.
fn series_threshold<T: Scalar>() -> T {
    T::epsilon().sqrt().sqrt()
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Tanh => "tanh",
            Unary::Sinh => "sinh",
            Unary::Cosh => "cosh",
            Unary::Acosh => "arccosh",
            Unary::Atanh => "atanh",
            Unary::Asinh => "asinh",
            Unary::Sqrt => "sqrt",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Relu => "relu",
            Unary::Square => "square",
            Unary::Sinhc => "sinhc",
            Unary::AcoshRatio => "acosh_ratio",
        }
    }

    fn forward<T: Scalar>(self, x: T) -> T {
        let one = T::one();
        match self {
            Unary::Neg => -x,
            Unary::Tanh => x.tanh(),
            Unary::Sinh => x.sinh(),
            Unary::Cosh => x.cosh(),
            Unary::Acosh => x.max(one + T::eps_acosh()).acosh(),
            Unary::Atanh => {
                let lim = one - T::eps_acosh();
                x.max(-lim).min(lim).atanh()
            }
            Unary::Asinh => x.asinh(),
            Unary::Sqrt => x.sqrt(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Relu => x.max(T::zero()),
            Unary::Square => x * x,
            Unary::Sinhc => {
                if x.abs() < series_threshold() {
                    one + x * x / T::c(6.0)
                } else {
                    x.sinh() / x
                }
            }
            Unary::AcoshRatio => {
                let e = x - one;
                if e.abs() < series_threshold() {
                    one - e / T::c(3.0) + T::c(2.0 / 15.0) * e * e - T::c(2.0 / 35.0) * e * e * e
                } else {
                    x.acosh() / (e * (x + one)).sqrt()
                }
            }
        }
    }

    /// Derivative given input `x` and output `y`. Clamped regions have zero slope.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            Unary::Neg => -one,
            Unary::Tanh => one - y * y,
            Unary::Sinh => x.cosh(),
            Unary::Cosh => x.sinh(),
            Unary::Acosh => {
                if x > one + T::eps_acosh() {
                    one / ((x - one) * (x + one)).sqrt()
                } else {
                    T::zero()
                }
            }
            Unary::Atanh => {
                if x.abs() < one - T::eps_acosh() {
                    one / ((one - x) * (one + x))
                } else {
                    T::zero()
                }
            }
            Unary::Asinh => one / (x * x + one).sqrt(),
            Unary::Sqrt => {
                if y > T::zero() {
                    T::c(0.5) / y
                } else {
                    T::zero()
                }
            }
            Unary::Exp => y,
            Unary::Log => one / x,
            Unary::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::Square => T::c(2.0) * x,
            Unary::Sinhc => {
                if x.abs() < series_threshold() {
                    x / T::c(3.0) + x * x * x / T::c(30.0)
                } else {
                    (x * x.cosh() - x.sinh()) / (x * x)
                }
            }
            Unary::AcoshRatio => {
                let e = x - one;
                if e.abs() < series_threshold() {
                    -one / T::c(3.0) + T::c(4.0 / 15.0) * e - T::c(6.0 / 35.0) * e * e
                } else {
                    (one - x * y) / (e * (x + one))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn forward<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    /// Partial derivatives `(∂/∂a, ∂/∂b)`.
    fn partials<T: Scalar>(self, a: T, b: T) -> (T, T) {
        match self {
            Binary::Add => (T::one(), T::one()),
            Binary::Sub => (T::one(), -T::one()),
            Binary::Mul => (b, a),
            Binary::Div => (T::one() / b, -a / (b * b)),
        }
    }
}

enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, algo: ConvAlgo },
    Unfold { x: Var, geom: ConvGeom },
    Sum(Var),
    SumAxis(Var),
    Reshape(Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, idx: Vec<usize> },
    GatherCols { x: Var, idx: Vec<usize> },
    Broadcast(Var),
    NormRows(Var),
    Cayley { a: Var, inv: Vec<T> },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Unary(_, x)
            | Op::Unfold { x, .. }
            | Op::Sum(x)
            | Op::SumAxis(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Slice { x, .. }
            | Op::Gather { x, .. }
            | Op::GatherCols { x, .. }
            | Op::Broadcast(x)
            | Op::NormRows(x)
            | Op::Cayley { a: x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Reverse-mode differentiation tape over dense tensors.
///
/// Nodes are appended in evaluation order, which is therefore a topological
/// order; [`Graph::backward`] walks it in reverse and accumulates (`+=`) into
/// parents. Every forward value is checked for NaN/inf unless checks are
/// disabled with [`Graph::set_checks`].
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    checks: Cell<bool>,
    conv_algo: Cell<ConvAlgo>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Shape obtained by broadcasting size-1 axes (or a rank-0 operand).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    if a.is_empty() {
        return Some(b.to_vec());
    }
    if b.is_empty() {
        return Some(a.to_vec());
    }
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For every element of `out`, the flat index of the broadcast source element.
fn source_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if src.is_empty() || src.iter().product::<usize>() == 1 {
        return vec![0; n];
    }
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Flat source indices of both operands for each output element of a
/// broadcast binary op. Rank ≤ 2 shapes use strides directly.
fn pair_indices(a: &[usize], b: &[usize], out: &[usize]) -> Vec<(usize, usize)> {
    let strides = |s: &[usize]| match *s {
        [] => Some((0, 0)),
        [c] => Some((0, usize::from(c != 1))),
        [r, c] => Some((if r == 1 { 0 } else { c }, usize::from(c != 1))),
        _ => None,
    };
    let dims = match *out {
        [] => Some((1, 1)),
        [c] => Some((1, c)),
        [r, c] => Some((r, c)),
        _ => None,
    };
    if let (Some((or, oc)), Some((ars, acs)), Some((brs, bcs))) = (dims, strides(a), strides(b)) {
        let mut v = Vec::with_capacity(or * oc);
        for i in 0..or {
            for j in 0..oc {
                v.push((i * ars + j * acs, i * brs + j * bcs));
            }
        }
        return v;
    }
    source_index(a, out).into_iter().zip(source_index(b, out)).collect()
}

fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let map = source_index(shape, g.shape());
    let mut out = Tensor::zeros(shape);
    let d = out.data_mut();
    for (i, v) in map.iter().zip(g.data()) {
        d[*i] += *v;
    }
    out
}

fn expand<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        return t.clone();
    }
    let map = source_index(t.shape(), shape);
    let data = map.iter().map(|i| t.data()[*i]).collect();
    Tensor::new(shape.to_vec(), data).expect("broadcast shape")
}

/// `(outer, dim, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), checks: Cell::new(true), conv_algo: Cell::new(ConvAlgo::Im2col) }
    }

    /// Enable or disable the per-op finiteness check (disabled for benchmarks).
    pub fn set_checks(&self, on: bool) {
        self.checks.set(on);
    }

    pub fn set_conv_algo(&self, algo: ConvAlgo) {
        self.conv_algo.set(algo);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, name: &str) -> Result<Var> {
        if self.checks.get() && !value.all_finite() {
            return Err(Error::NonFinite {
                op: name.to_string(),
                detail: format!("output of shape {:?}", value.shape()),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node { value, op, requires_grad });
        Ok(Var(nodes.len() - 1))
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let value = {
            let n = self.nodes.borrow();
            let (x, y) = (&n[a.0].value, &n[b.0].value);
            if x.shape() == y.shape() {
                let data = x.data().iter().zip(y.data()).map(|(p, q)| kind.forward(*p, *q)).collect();
                Tensor::new(x.shape().to_vec(), data)?
            } else {
                let shape = broadcast_shape(x.shape(), y.shape()).ok_or_else(|| {
                    usage(format!("{}: incompatible shapes {:?} and {:?}", kind.name(), x.shape(), y.shape()))
                })?;
                let (xd, yd) = (x.data(), y.data());
                let data =
                    pair_indices(x.shape(), y.shape(), &shape).into_iter().map(|(i, j)| kind.forward(xd[i], yd[j])).collect();
                Tensor::new(shape, data)?
            }
        };
        self.push(value, Op::Binary(kind, a, b), kind.name())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Multiply by a constant.
    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), "scale")
    }

    /// Add a constant.
    pub fn add_scalar(&self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), "add_scalar")
    }

    fn unary(&self, kind: Unary, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| kind.forward(v));
        self.push(value, Op::Unary(kind, x), kind.name())
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sinh(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Sinh, x)
    }

    pub fn cosh(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Cosh, x)
    }

    /// `arccosh` with its argument clamped to `≥ 1 + eps`.
    pub fn acosh(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Acosh, x)
    }

    /// `atanh` with its argument clamped to `|x| ≤ 1 − eps`.
    pub fn atanh(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Atanh, x)
    }

    pub fn asinh(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Asinh, x)
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    /// `sinh(x) / x`, continuous through 0.
    pub fn sinhc(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Sinhc, x)
    }

    /// `arccosh(x) / √(x² − 1)`, continuous through 1 (where it equals 1).
    pub fn acosh_ratio(&self, x: Var) -> Result<Var> {
        self.unary(Unary::AcoshRatio, x)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let n = self.nodes.borrow();
            let (x, y) = (&n[a.0].value, &n[b.0].value);
            if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
                return Err(usage(format!("matmul: incompatible shapes {:?} and {:?}", x.shape(), y.shape())));
            }
            let (m, k, p) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            Tensor::new(vec![m, p], matmul_nn(x.data(), y.data(), m, k, p))?
        };
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    fn conv_geom(&self, x: Var, kh: usize, kw: usize, cout: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(usage(format!("conv2d: input must be NHWC, got shape {s:?}")));
        }
        let geom = ConvGeom { batch: s[0], height: s[1], width: s[2], cin: s[3], kh, kw, cout, stride, pad };
        if !geom.valid() {
            return Err(usage(format!("conv2d: invalid geometry {geom:?}")));
        }
        Ok(geom)
    }

    /// 2-D convolution of NHWC input `x` with a `[kh, kw, cin, cout]` kernel.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_with(x, w, stride, pad, self.conv_algo.get())
    }

    pub fn conv2d_with(&self, x: Var, w: Var, stride: usize, pad: usize, algo: ConvAlgo) -> Result<Var> {
        let ws = self.shape(w);
        if ws.len() != 4 {
            return Err(usage(format!("conv2d: kernel must be [kh, kw, cin, cout], got {ws:?}")));
        }
        let geom = self.conv_geom(x, ws[0], ws[1], ws[3], stride, pad)?;
        if ws[2] != geom.cin {
            return Err(usage(format!("conv2d: kernel expects {} input channels, input has {}", ws[2], geom.cin)));
        }
        let value = {
            let n = self.nodes.borrow();
            let (xv, wv) = (n[x.0].value.data(), n[w.0].value.data());
            let out = match algo {
                ConvAlgo::Im2col => conv2d_im2col(xv, wv, &geom),
                ConvAlgo::Direct => conv2d_direct(xv, wv, &geom),
            };
            Tensor::new(vec![geom.batch, geom.out_height(), geom.out_width(), geom.cout], out)?
        };
        self.push(value, Op::Conv2d { x, w, geom, algo }, "conv2d")
    }

    /// Unfold NHWC input into `[B·Ho·Wo, kh·kw·C]` window rows (zero padding).
    pub fn unfold(&self, x: Var, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(x, kh, kw, 0, stride, pad)?;
        let value = {
            let cols = im2col(self.value(x).data(), &geom);
            Tensor::new(vec![geom.out_pixels(), geom.window()], cols)?
        };
        self.push(value, Op::Unfold { x, geom }, "unfold")
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(&self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), "sum")
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let v = self.value(x);
            if axis >= v.rank() {
                return Err(usage(format!("sum_axis: axis {axis} out of range for {:?}", v.shape())));
            }
            let (outer, dim, inner) = split_axis(v.shape(), axis);
            let mut out = vec![T::zero(); outer * inner];
            let d = v.data();
            for o in 0..outer {
                for k in 0..dim {
                    let src = &d[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                    for (acc, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += *s;
                    }
                }
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = 1;
            Tensor::new(shape, out)?
        };
        self.push(value, Op::SumAxis(x), "sum_axis")
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let dim = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        self.scale(s, T::one() / T::from_usize(dim).unwrap())
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), "reshape")
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let value = {
            let v = self.value(x);
            if v.rank() != 2 {
                return Err(usage("transpose: expects a 2-D tensor"));
            }
            transpose2(&v)
        };
        self.push(value, Op::Transpose(x), "transpose")
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let value = {
            let n = self.nodes.borrow();
            let first = &n[parts.first().ok_or_else(|| usage("concat: no inputs"))?.0].value;
            let rank = first.rank();
            if axis >= rank {
                return Err(usage("concat: axis out of range"));
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = 0;
            for p in parts {
                let s = n[p.0].value.shape();
                if s.len() != rank || s.iter().enumerate().any(|(d, v)| d != axis && *v != first.shape()[d]) {
                    return Err(usage(format!("concat: incompatible shapes {:?} and {s:?}", first.shape())));
                }
                shape[axis] += s[axis];
            }
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &n[p.0].value;
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, data)?
        };
        self.push(value, Op::Concat { parts: parts.to_vec(), axis }, "concat")
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = {
            let v = self.value(x);
            if axis >= v.rank() || start + len > v.shape()[axis] {
                return Err(usage(format!("slice: [{start}, {}) out of range on axis {axis} of {:?}", start + len, v.shape())));
            }
            let (outer, dim, inner) = split_axis(v.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                data.extend_from_slice(&v.data()[base..base + len * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        self.push(value, Op::Slice { x, axis, start }, "slice")
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let axis = self.shape(x).len().saturating_sub(1);
        self.slice(x, axis, start, len)
    }

    /// Select rows (axis 0) by index; indices may repeat.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = {
            let v = self.value(x);
            let rows = v.shape().first().copied().unwrap_or(0);
            let inner = v.len() / rows.max(1);
            let mut data = Vec::with_capacity(idx.len() * inner);
            for &i in idx {
                if i >= rows {
                    return Err(usage(format!("gather_rows: index {i} out of range ({rows} rows)")));
                }
                data.extend_from_slice(&v.data()[i * inner..(i + 1) * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[0] = idx.len();
            Tensor::new(shape, data)?
        };
        self.push(value, Op::Gather { x, idx: idx.to_vec() }, "gather_rows")
    }

    /// Select columns of a 2-D tensor by index; indices may repeat.
    pub fn gather_cols(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = {
            let v = self.value(x);
            if v.rank() != 2 {
                return Err(usage("gather_cols: expects a 2-D tensor"));
            }
            let (rows, cols) = (v.shape()[0], v.shape()[1]);
            if let Some(bad) = idx.iter().find(|i| **i >= cols) {
                return Err(usage(format!("gather_cols: index {bad} out of range ({cols} columns)")));
            }
            let mut data = Vec::with_capacity(rows * idx.len());
            for r in v.data().chunks(cols) {
                data.extend(idx.iter().map(|i| r[*i]));
            }
            Tensor::new(vec![rows, idx.len()], data)?
        };
        self.push(value, Op::GatherCols { x, idx: idx.to_vec() }, "gather_cols")
    }

    /// Materialize `x` broadcast to `shape`.
    pub fn broadcast(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let v = self.value(x);
            if broadcast_shape(v.shape(), shape).as_deref() != Some(shape) {
                return Err(usage(format!("broadcast: cannot broadcast {:?} to {shape:?}", v.shape())));
            }
            expand(&v, shape)
        };
        self.push(value, Op::Broadcast(x), "broadcast")
    }

    /// L2 norm along the last axis (kept with size 1). A tiny offset under the
    /// square root keeps the value and slope finite at zero.
    pub fn norm_rows(&self, x: Var) -> Result<Var> {
        let value = {
            let v = self.value(x);
            let c = v.cols();
            let tiny = T::min_positive_value();
            let data: Vec<T> = v.data().chunks(c.max(1)).map(|r| (r.iter().map(|a| *a * *a).sum::<T>() + tiny).sqrt()).collect();
            let mut shape = v.shape().to_vec();
            if let Some(last) = shape.last_mut() {
                *last = 1;
            }
            Tensor::new(shape, data)?
        };
        self.push(value, Op::NormRows(x), "norm_rows")
    }

    /// Cayley transform `(I − A)(I + A)⁻¹` of a square matrix.
    pub fn cayley(&self, a: Var) -> Result<Var> {
        let (value, inv) = {
            let v = self.value(a);
            if v.rank() != 2 || v.shape()[0] != v.shape()[1] {
                return Err(usage("cayley: expects a square matrix"));
            }
            let n = v.shape()[0];
            let mut ipa = v.data().to_vec();
            let mut ima: Vec<T> = v.data().iter().map(|x| -*x).collect();
            for i in 0..n {
                ipa[i * n + i] += T::one();
                ima[i * n + i] += T::one();
            }
            let inv = invert(&ipa, n).ok_or_else(|| crate::error::domain("cayley: I + A is singular"))?;
            (Tensor::new(vec![n, n], matmul_nn(&ima, &inv, n, n, n))?, inv)
        };
        self.push(value, Op::Cayley { a, inv }, "cayley")
    }

    /// Reverse-mode sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let rv = &nodes[root.0].value;
        if rv.len() != 1 {
            return Err(usage(format!("backward: root must be scalar, got shape {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.requires_grad {
                for (p, dp) in vjp(&nodes, &node.op, &node.value, &g)? {
                    if !nodes[p.0].requires_grad {
                        continue;
                    }
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&dp),
                        slot => *slot = Some(dp),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn transpose2<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (v.shape()[0], v.shape()[1]);
    let mut data = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = v.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data).expect("transpose shape")
}

/// Vector-Jacobian products of one node with respect to its parents.
fn vjp<T: Scalar>(nodes: &[Node<T>], op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
    let val = |v: &Var| &nodes[v.0].value;
    let needs = |v: &Var| nodes[v.0].requires_grad;
    Ok(match op {
        Op::Leaf => vec![],
        Op::Binary(kind, a, b) => {
            let (x, y) = (val(a), val(b));
            if x.shape() == y.shape() {
                let (na, nb) = (needs(a), needs(b));
                let mut da = Vec::with_capacity(if na { x.len() } else { 0 });
                let mut db = Vec::with_capacity(if nb { x.len() } else { 0 });
                for ((p, q), gv) in x.data().iter().zip(y.data()).zip(g.data()) {
                    let (pa, pb) = kind.partials(*p, *q);
                    if na {
                        da.push(*gv * pa);
                    }
                    if nb {
                        db.push(*gv * pb);
                    }
                }
                let mut res = Vec::with_capacity(2);
                if na {
                    res.push((*a, Tensor::new(x.shape().to_vec(), da)?));
                }
                if nb {
                    res.push((*b, Tensor::new(y.shape().to_vec(), db)?));
                }
                res
            } else {
                let mut da = vec![T::zero(); x.len()];
                let mut db = vec![T::zero(); y.len()];
                let (xd, yd) = (x.data(), y.data());
                for ((i, j), gv) in pair_indices(x.shape(), y.shape(), g.shape()).into_iter().zip(g.data()) {
                    let (pa, pb) = kind.partials(xd[i], yd[j]);
                    da[i] += *gv * pa;
                    db[j] += *gv * pb;
                }
                let mut res = Vec::with_capacity(2);
                if needs(a) {
                    res.push((*a, Tensor::new(x.shape().to_vec(), da)?));
                }
                if needs(b) {
                    res.push((*b, Tensor::new(y.shape().to_vec(), db)?));
                }
                res
            }
        }
        Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
        Op::AddScalar(x) => vec![(*x, g.clone())],
        Op::Unary(kind, x) => {
            let xv = val(x);
            let data = xv
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((xi, yi), gi)| *gi * kind.derivative(*xi, *yi))
                .collect();
            vec![(*x, Tensor::new(xv.shape().to_vec(), data)?)]
        }
        Op::MatMul(a, b) => {
            let (x, y) = (val(a), val(b));
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            let mut res = Vec::new();
            if needs(a) {
                res.push((*a, Tensor::new(vec![m, k], matmul_nt(g.data(), y.data(), m, n, k))?));
            }
            if needs(b) {
                res.push((*b, Tensor::new(vec![k, n], matmul_tn(x.data(), g.data(), m, k, n))?));
            }
            res
        }
        Op::Conv2d { x, w, geom, algo } => {
            let (xv, wv) = (val(x), val(w));
            let (dx, dw) = match algo {
                ConvAlgo::Im2col => conv2d_im2col_backward(xv.data(), wv.data(), g.data(), geom, (needs(x), needs(w))),
                ConvAlgo::Direct => {
                    let (dx, dw) = conv2d_direct_backward(xv.data(), wv.data(), g.data(), geom);
                    (Some(dx), Some(dw))
                }
            };
            let mut res = Vec::with_capacity(2);
            if let Some(dx) = dx {
                res.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            if let Some(dw) = dw {
                res.push((*w, Tensor::new(wv.shape().to_vec(), dw)?));
            }
            res
        }
        Op::Unfold { x, geom } => {
            vec![(*x, Tensor::new(val(x).shape().to_vec(), col2im(g.data(), geom))?)]
        }
        Op::Sum(x) => vec![(*x, Tensor::full(val(x).shape(), g.item()))],
        Op::SumAxis(x) => vec![(*x, expand(g, val(x).shape()))],
        Op::Reshape(x) => vec![(*x, g.clone().reshape(val(x).shape())?)],
        Op::Transpose(x) => vec![(*x, transpose2(g))],
        Op::Concat { parts, axis } => {
            let shape = g.shape();
            let (outer, _, inner) = split_axis(shape, *axis);
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for p in parts {
                let ps = val(p).shape().to_vec();
                let len = ps[*axis];
                let mut data = Vec::with_capacity(ps.iter().product());
                for o in 0..outer {
                    let base = (o * shape[*axis] + offset) * inner;
                    data.extend_from_slice(&g.data()[base..base + len * inner]);
                }
                offset += len;
                res.push((*p, Tensor::new(ps, data)?));
            }
            res
        }
        Op::Slice { x, axis, start } => {
            let xs = val(x).shape().to_vec();
            let (outer, dim, inner) = split_axis(&xs, *axis);
            let len = g.shape()[*axis];
            let mut dx = Tensor::zeros(&xs);
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                let src = o * len * inner;
                dx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![(*x, dx)]
        }
        Op::Gather { x, idx } => {
            let xs = val(x).shape().to_vec();
            let inner = val(x).len() / xs[0].max(1);
            let mut dx = Tensor::zeros(&xs);
            for (r, &i) in idx.iter().enumerate() {
                let dst = &mut dx.data_mut()[i * inner..(i + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&g.data()[r * inner..(r + 1) * inner]) {
                    *d += *s;
                }
            }
            vec![(*x, dx)]
        }
        Op::GatherCols { x, idx } => {
            let xs = val(x).shape().to_vec();
            let mut dx = Tensor::zeros(&xs);
            for (dst, src) in dx.data_mut().chunks_mut(xs[1]).zip(g.data().chunks(idx.len())) {
                for (i, v) in idx.iter().zip(src) {
                    dst[*i] += *v;
                }
            }
            vec![(*x, dx)]
        }
        Op::Broadcast(x) => vec![(*x, reduce_to(g, val(x).shape()))],
        Op::NormRows(x) => {
            let xv = val(x);
            let c = xv.cols().max(1);
            let mut dx = xv.clone();
            for (r, row) in dx.data_mut().chunks_mut(c).enumerate() {
                let f = g.data()[r] / out.data()[r];
                for v in row.iter_mut() {
                    *v *= f;
                }
            }
            vec![(*x, dx)]
        }
        Op::Cayley { a, inv } => {
            // dQ = −(I + Q) dA B with B = (I + A)⁻¹, so dL/dA = −(I + Q)ᵀ G Bᵀ.
            let n = out.shape()[0];
            let mut ipq = out.data().to_vec();
            for i in 0..n {
                ipq[i * n + i] += T::one();
            }
            let t = matmul_tn(&ipq, g.data(), n, n, n);
            let da: Vec<T> = matmul_nt(&t, inv, n, n, n).into_iter().map(|v| -v).collect();
            vec![(*a, Tensor::new(vec![n, n], da)?)]
        }
    })
}
