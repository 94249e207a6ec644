use std::cell::{Ref, RefCell};

use super::{Scalar, Tensor, TensorError};

type Id = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    co: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.c
    }
}

enum Op<T> {
    Leaf,
    Constant,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, T),
    AddScalar(Id),
    Matmul(Id, Id),
    Conv2d { x: Id, w: Id, b: Option<Id>, geom: ConvGeom, cols: Vec<T> },
    Permute(Id, Vec<usize>),
    Reshape(Id),
    BroadcastTo(Id),
    Sum(Id),
    Mean(Id),
    SumAxis(Id, usize),
    Exp(Id),
    Log(Id),
    Tanh(Id),
    LeakyRelu(Id, T),
    Sigmoid(Id),
    Square(Id),
    Clamp(Id, T, T),
    Concat(Vec<Id>, usize),
    Slice(Id, usize, usize),
    Upsample2x(Id),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-pass record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so node ids are a topological
/// order of the graph. A tape is meant to live for one forward/backward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: Id,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that is never differentiated.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let op = if requires_grad { op } else if matches!(op, Op::Leaf) { Op::Leaf } else { Op::Constant };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn requires(&self, ids: &[Id]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Every node is visited once, in reverse insertion order. Leaves created
    /// with [`Tape::param`] that the loss does not reach get zero gradients.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        let mut out = Gradients { grads: Vec::with_capacity(nodes.len()) };
        out.grads.resize_with(nodes.len(), || None);
        if root.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                out.grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            backward_node(&nodes, id, &g, &mut grads);
        }
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && out.grads[id].is_none() {
                out.grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(out)
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a parameter leaf; `None` for constants and interior nodes.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.iter().product::<usize>() == 1
        || (small.len() <= big.len() && big[big.len() - small.len()..] == *small)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b || (na >= nb && is_suffix(a, b)) {
        Ok(a.to_vec())
    } else if is_suffix(b, a) {
        Ok(b.to_vec())
    } else {
        Err(TensorError::shape(op, format!("cannot broadcast {a:?} with {b:?}")))
    }
}

/// Folds a gradient of `len_out` elements onto a suffix-broadcast operand.
fn reduce_to<T: Scalar>(g: Vec<T>, len: usize) -> Vec<T> {
    if g.len() == len {
        return g;
    }
    let mut out = vec![T::zero(); len];
    for chunk in g.chunks(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += *v;
        }
    }
    out
}

fn accum<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: Id, g: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.patch();
    let mut cols = vec![T::zero(); g.rows() * kk];
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((n * g.ho + oy) * g.wo + ox) * kk;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let dst = row + (ky * g.k + kx) * g.c;
                        cols[dst..dst + g.c].copy_from_slice(&x[src..src + g.c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.patch();
    let mut x = vec![T::zero(); g.n * g.h * g.w * g.c];
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((n * g.ho + oy) * g.wo + ox) * kk;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let src = row + (ky * g.k + kx) * g.c;
                        for (d, s) in x[dst..dst + g.c].iter_mut().zip(&cols[src..src + g.c]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
    x
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], id: Id, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let val = |i: Id| &nodes[i].value;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            accum(nodes, grads, *a, reduce_to(g.to_vec(), val(*a).numel()));
            accum(nodes, grads, *b, reduce_to(g.to_vec(), val(*b).numel()));
        }
        Op::Sub(a, b) => {
            accum(nodes, grads, *a, reduce_to(g.to_vec(), val(*a).numel()));
            let neg = g.iter().map(|v| -*v).collect();
            accum(nodes, grads, *b, reduce_to(neg, val(*b).numel()));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if nodes[*a].requires_grad {
                let ga = g.iter().enumerate().map(|(i, v)| *v * bv[i % bv.len()]).collect();
                accum(nodes, grads, *a, reduce_to(ga, av.len()));
            }
            if nodes[*b].requires_grad {
                let gb = g.iter().enumerate().map(|(i, v)| *v * av[i % av.len()]).collect();
                accum(nodes, grads, *b, reduce_to(gb, bv.len()));
            }
        }
        Op::Scale(a, c) => accum(nodes, grads, *a, g.iter().map(|v| *v * *c).collect()),
        Op::AddScalar(a) => accum(nodes, grads, *a, g.to_vec()),
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[*a].requires_grad {
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, n as isize, 1, bv.data(), 1, n as isize, T::zero(), &mut ga, k as isize, 1);
                accum(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, av.data(), 1, k as isize, g, n as isize, 1, T::zero(), &mut gb, n as isize, 1);
                accum(nodes, grads, *b, gb);
            }
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let (rows, kk, co) = (geom.rows(), geom.patch(), geom.co);
            if nodes[*w].requires_grad {
                let mut gw = vec![T::zero(); kk * co];
                T::gemm(kk, rows, co, cols, 1, kk as isize, g, co as isize, 1, T::zero(), &mut gw, co as isize, 1);
                accum(nodes, grads, *w, gw);
            }
            if let Some(b) = b {
                if nodes[*b].requires_grad {
                    accum(nodes, grads, *b, reduce_to(g.to_vec(), co));
                }
            }
            if nodes[*x].requires_grad {
                let mut gcols = vec![T::zero(); rows * kk];
                let wv = val(*w).data();
                T::gemm(rows, co, kk, g, co as isize, 1, wv, 1, co as isize, T::zero(), &mut gcols, kk as isize, 1);
                accum(nodes, grads, *x, col2im(&gcols, geom));
            }
        }
        Op::Permute(a, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            let (_, ga) = permute_data(g, node.value.shape(), &inverse);
            accum(nodes, grads, *a, ga);
        }
        Op::Reshape(a) => accum(nodes, grads, *a, g.to_vec()),
        Op::BroadcastTo(a) => accum(nodes, grads, *a, reduce_to(g.to_vec(), val(*a).numel())),
        Op::Sum(a) => accum(nodes, grads, *a, vec![g[0]; val(*a).numel()]),
        Op::Mean(a) => {
            let n = val(*a).numel();
            accum(nodes, grads, *a, vec![g[0] / T::lit(n as f64); n]);
        }
        Op::SumAxis(a, axis) => {
            let (outer, len, inner) = split_axis(val(*a).shape(), *axis);
            let mut ga = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    ga.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            accum(nodes, grads, *a, ga);
        }
        Op::Exp(a) => {
            let y = node.value.data();
            accum(nodes, grads, *a, g.iter().zip(y).map(|(g, y)| *g * *y).collect());
        }
        Op::Log(a) => {
            let x = val(*a).data();
            accum(nodes, grads, *a, g.iter().zip(x).map(|(g, x)| *g / *x).collect());
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            accum(nodes, grads, *a, g.iter().zip(y).map(|(g, y)| *g * (T::one() - *y * *y)).collect());
        }
        Op::LeakyRelu(a, slope) => {
            let x = val(*a).data();
            let ga = g.iter().zip(x).map(|(g, x)| if *x > T::zero() { *g } else { *g * *slope }).collect();
            accum(nodes, grads, *a, ga);
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            accum(nodes, grads, *a, g.iter().zip(y).map(|(g, y)| *g * *y * (T::one() - *y)).collect());
        }
        Op::Square(a) => {
            let x = val(*a).data();
            let two = T::lit(2.0);
            accum(nodes, grads, *a, g.iter().zip(x).map(|(g, x)| *g * two * *x).collect());
        }
        Op::Clamp(a, lo, hi) => {
            let x = val(*a).data();
            let ga = g
                .iter()
                .zip(x)
                .map(|(g, x)| if *x < *lo || *x > *hi { T::zero() } else { *g })
                .collect();
            accum(nodes, grads, *a, ga);
        }
        Op::Concat(parts, axis) => {
            let out_shape = node.value.shape();
            let (outer, _, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            let total = out_shape[*axis] * inner;
            for &p in parts {
                let width = val(p).shape()[*axis] * inner;
                if nodes[p].requires_grad {
                    let mut gp = Vec::with_capacity(outer * width);
                    for o in 0..outer {
                        let start = o * total + offset;
                        gp.extend_from_slice(&g[start..start + width]);
                    }
                    accum(nodes, grads, p, gp);
                }
                offset += width;
            }
        }
        Op::Slice(a, axis, start) => {
            let in_shape = val(*a).shape();
            let (outer, len, inner) = split_axis(in_shape, *axis);
            let width = node.value.shape()[*axis] * inner;
            let mut ga = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                ga[dst..dst + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            accum(nodes, grads, *a, ga);
        }
        Op::Upsample2x(a) => {
            let s = val(*a).shape();
            let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
            let mut ga = vec![T::zero(); n * h * w * c];
            for b in 0..n {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let src = ((b * 2 * h + y) * 2 * w + x) * c;
                        let dst = ((b * h + y / 2) * w + x / 2) * c;
                        for ch in 0..c {
                            ga[dst + ch] += g[src + ch];
                        }
                    }
                }
            }
            accum(nodes, grads, *a, ga);
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    /// Value of a single-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Owned copy of the node's value.
    pub fn tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t, T>, op: &'static str) -> Result<(), TensorError> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::shape(op, "operands live on different tapes"))
        }
    }

    fn unary(&self, op: Op<T>, value: Tensor<T>) -> Var<'t, T> {
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t, T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool), TensorError> {
        self.same_tape(other, name)?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let data = (0..n).map(|i| f(ad[i % ad.len()], bd[i % bd.len()])).collect();
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok((Tensor::new(shape, data)?, rg))
    }

    /// Elementwise sum; the smaller operand may broadcast over leading axes.
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (v, rg) = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.tape.push(v, Op::Add(self.id, other.id), rg))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (v, rg) = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.tape.push(v, Op::Sub(self.id, other.id), rg))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (v, rg) = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.tape.push(v, Op::Mul(self.id, other.id), rg))
    }

    /// Copy of the value that is cut off from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.tensor())
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * c);
        self.unary(Op::Scale(self.id, c), v)
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x + c);
        self.unary(Op::AddScalar(self.id), v)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(other, "matmul")?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        let v = Tensor::new(vec![m, n], out)?;
        drop((a, b));
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(v, Op::Matmul(self.id, other.id), rg))
    }

    /// 2-D convolution over NHWC input with a `[k, k, c_in, c_out]` kernel.
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(weight, "conv2d")?;
        let (x, w) = (self.value(), weight.value());
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sw[1] || sx[3] != sw[2] || stride == 0 {
            return Err(TensorError::shape("conv2d", format!("input {sx:?}, kernel {sw:?}, stride {stride}")));
        }
        let (n, h, wd, c, k, co) = (sx[0], sx[1], sx[2], sx[3], sw[0], sw[3]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(TensorError::shape("conv2d", format!("kernel {k} larger than padded input {sx:?}")));
        }
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            c,
            k,
            co,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(x.data(), &geom);
        let (rows, kk) = (geom.rows(), geom.patch());
        let mut out = vec![T::zero(); rows * co];
        T::gemm(rows, kk, co, &cols, kk as isize, 1, w.data(), co as isize, 1, T::zero(), &mut out, co as isize, 1);
        let mut ids = vec![self.id, weight.id];
        if let Some(b) = bias {
            self.same_tape(b, "conv2d")?;
            let bv = b.value();
            if bv.shape() != [co] {
                return Err(TensorError::shape("conv2d", format!("bias {:?} for {co} channels", bv.shape())));
            }
            for row in out.chunks_mut(co) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += *bb;
                }
            }
            ids.push(b.id);
        }
        drop((x, w));
        let v = Tensor::new(vec![n, geom.ho, geom.wo, co], out)?;
        let rg = self.tape.requires(&ids);
        let op = Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), geom, cols: if rg { cols } else { Vec::new() } };
        Ok(self.tape.push(v, op, rg))
    }

    /// Axis permutation; `transpose` for rank 2 is `permute(&[1, 0])`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..v.rank()).collect::<Vec<_>>() {
            return Err(TensorError::shape("permute", format!("axes {axes:?} for {:?}", v.shape())));
        }
        let (shape, data) = permute_data(v.data(), v.shape(), axes);
        let out = Tensor::new(shape, data)?;
        drop(v);
        Ok(self.unary(Op::Permute(self.id, axes.to_vec()), out))
    }

    pub fn transpose(&self) -> Result<Var<'t, T>, TensorError> {
        self.permute(&[1, 0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let out = self.value().clone().reshaped(shape.to_vec())?;
        Ok(self.unary(Op::Reshape(self.id), out))
    }

    /// Tiles over leading axes; `self` must be a suffix of `shape` or a scalar.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        if !is_suffix(shape, v.shape()) {
            return Err(TensorError::shape("broadcast", format!("{:?} -> {shape:?}", v.shape())));
        }
        let n: usize = shape.iter().product();
        let d = v.data();
        let out = Tensor::new(shape.to_vec(), (0..n).map(|i| d[i % d.len()]).collect())?;
        drop(v);
        Ok(self.unary(Op::BroadcastTo(self.id), out))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum();
        self.unary(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let v = self.value();
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        drop(v);
        self.unary(Op::Mean(self.id), Tensor::scalar(s))
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(TensorError::shape("sum_axis", format!("axis {axis} of {:?}", v.shape())));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for (i, acc) in out[o * inner..(o + 1) * inner].iter_mut().enumerate() {
                    *acc += d[base + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        drop(v);
        Ok(self.unary(Op::SumAxis(self.id, axis), Tensor::new(shape, out)?))
    }

    /// Collapses all but the leading axis: `[b, ...] → [b]`.
    pub fn sum_per_row(&self) -> Result<Var<'t, T>, TensorError> {
        let shape = self.shape();
        let b = *shape.first().ok_or_else(|| TensorError::shape("sum_per_row", "rank 0"))?;
        let rest = self.numel() / b;
        self.reshape(&[b, rest])?.sum_axis(1)
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn exp(&self) -> Var<'t, T> {
        let v = self.value().map(|x| x.exp());
        self.unary(Op::Exp(self.id), v)
    }

    /// Natural log; non-positive inputs are rejected.
    pub fn log(&self) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|x| **x <= T::zero() || x.is_nan()) {
            return Err(TensorError::Domain { op: "log", value: bad.to_f64().unwrap_or(f64::NAN) });
        }
        let out = v.map(|x| x.ln());
        drop(v);
        Ok(self.unary(Op::Log(self.id), out))
    }

    pub fn tanh(&self) -> Var<'t, T> {
        let v = self.value().map(|x| x.tanh());
        self.unary(Op::Tanh(self.id), v)
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'t, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { x * slope });
        self.unary(Op::LeakyRelu(self.id, slope), v)
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let v = self.value().map(sigmoid);
        self.unary(Op::Sigmoid(self.id), v)
    }

    pub fn square(&self) -> Var<'t, T> {
        let v = self.value().map(|x| x * x);
        self.unary(Op::Square(self.id), v)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the input was clipped.
    pub fn clamp(&self, lo: T, hi: T) -> Var<'t, T> {
        let v = self.value().map(|x| x.max(lo).min(hi));
        self.unary(Op::Clamp(self.id, lo, hi), v)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let tape = first.tape;
        let mut shape = first.shape();
        if axis >= shape.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} of {shape:?}")));
        }
        let mut total = 0;
        for p in parts {
            first.same_tape(p, "concat")?;
            let s = p.shape();
            let mut probe = s.clone();
            probe[axis] = shape[axis];
            if probe != shape {
                return Err(TensorError::shape("concat", format!("{:?} vs {s:?} on axis {axis}", first.shape())));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            for o in 0..outer {
                for v in &values {
                    let width = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * width..(o + 1) * width]);
                }
            }
        }
        shape[axis] = total;
        let ids: Vec<Id> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(Tensor::new(shape, data)?, Op::Concat(ids, axis), rg))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        if axis >= v.rank() || len == 0 || start + len > v.shape()[axis] {
            return Err(TensorError::shape("slice", format!("{start}+{len} on axis {axis} of {:?}", v.shape())));
        }
        let (outer, full, inner) = split_axis(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        drop(v);
        Ok(self.unary(Op::Slice(self.id, axis, start), Tensor::new(shape, data)?))
    }

    /// Nearest-neighbour 2× upsampling of an NHWC batch.
    pub fn upsample2x(&self) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        let s = v.shape();
        if s.len() != 4 {
            return Err(TensorError::shape("upsample2x", format!("expected NHWC, got {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let d = v.data();
        let mut out = Vec::with_capacity(n * 4 * h * w * c);
        for b in 0..n {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let src = ((b * h + y / 2) * w + x / 2) * c;
                    out.extend_from_slice(&d[src..src + c]);
                }
            }
        }
        let shape = vec![n, 2 * h, 2 * w, c];
        drop(v);
        Ok(self.unary(Op::Upsample2x(self.id), Tensor::new(shape, out)?))
    }
}
