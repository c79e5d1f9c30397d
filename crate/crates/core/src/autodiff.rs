//! Reverse-mode differentiation over [`DenseArray`] values.
//!
//! A [`Graph`] is an append-only arena of nodes. Every node records the
//! operation that produced it and handles to its inputs, which always have
//! smaller indices, so creation order is a valid topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Gradients accumulate across backward passes until [`Graph::zero_grad`].

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The fixed vocabulary of differentiable operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    MatMul,
    Conv2d,
    AddBroadcast,
    MulBroadcast,
    Relu,
    Sigmoid,
    Log,
    Exp,
    LogSigmoid,
    PowConst,
    MaxConst,
    SmoothL1,
    Softmax,
    Sum,
    Mean,
    Gather,
    Concat,
    Reshape,
    L2Norm,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::AddBroadcast,
        OpKind::MulBroadcast,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Log,
        OpKind::Exp,
        OpKind::LogSigmoid,
        OpKind::PowConst,
        OpKind::MaxConst,
        OpKind::SmoothL1,
        OpKind::Softmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Gather,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::L2Norm,
    ];
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    AddBroadcast { x: Var, b: Var, span: Span },
    MulBroadcast { x: Var, s: Var, span: Span },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    LogSigmoid(Var),
    PowConst(Var, f64),
    MaxConst(Var, f64),
    SmoothL1(Var, f64),
    Softmax { x: Var, span: Span },
    Sum { x: Var, map: Vec<usize> },
    Mean { x: Var, map: Vec<usize>, count: usize },
    Gather { x: Var, indices: Vec<usize> },
    Concat { inputs: Vec<Var>, outer: usize, widths: Vec<usize> },
    Reshape(Var),
    L2Norm { x: Var, span: Span },
}

/// Decomposition of a shape around a contiguous block of axes as
/// `outer × mid × inner`.
#[derive(Debug, Clone, Copy)]
struct Span {
    outer: usize,
    mid: usize,
    inner: usize,
}

impl Span {
    fn around(shape: &[usize], start: usize, end: usize) -> Self {
        Span {
            outer: shape[..start].iter().product(),
            mid: shape[start..end].iter().product(),
            inner: shape[end..].iter().product(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfold one image (`c × h × w`) into a `patch × positions` matrix.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let l = self.positions();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &image[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-add columns back into an image.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let l = self.positions();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut image[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` where `a` is logically `m×k` and `b` is `k×n`, either
/// possibly stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Node {
    value: DenseArray,
    grad: Option<DenseArray>,
    op: Op,
    requires_grad: bool,
}

/// Arena holding one differentiable computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

fn same_shape(op: &str, a: &DenseArray, b: &DenseArray) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err(op, format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape())))
    }
}

/// Maps every element of `shape` to its slot in the reduction over `axes`.
fn reduction_map(op: &str, shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if axes.iter().any(|&a| a >= shape.len()) {
        return Err(shape_err(op, format!("axes {axes:?} out of range for shape {shape:?}")));
    }
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let mut out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let len: usize = shape.iter().product();
    let mut map = Vec::with_capacity(len);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..len {
        let slot = kept.iter().fold(0, |acc, &a| acc * shape[a] + idx[a]);
        map.push(slot);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out_shape, map))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseArray, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node_op(&mut self, value: DenseArray, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`; zeros if nothing has reached it.
    pub fn grad(&self, v: Var) -> DenseArray {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| DenseArray::zeros(node.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<DenseArray> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(DenseArray::from_parts(va.shape().to_vec(), data))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> DenseArray {
        self.value(a).map(f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.node_op(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.node_op(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.node_op(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.node_op(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.unary(a, |x| x * factor);
        self.node_op(v, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let v = self.unary(a, |x| x + offset);
        self.node_op(v, Op::AddScalar(a), &[a])
    }

    /// `1 - a`, a common building block.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let name = if trans_b { "matmul_nt" } else { "matmul" };
        if va.rank() != 2 || vb.rank() != 2 {
            return Err(shape_err(name, format!("needs 2-D operands, got {:?} and {:?}", va.shape(), vb.shape())));
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (kb, n) = if trans_b { (vb.shape()[1], vb.shape()[0]) } else { (vb.shape()[0], vb.shape()[1]) };
        if k != kb {
            return Err(shape_err(name, format!("inner dimensions differ: {:?} x {:?}", va.shape(), vb.shape())));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), trans_b, 0.0, &mut out);
        let value = DenseArray::from_parts(vec![m, n], out);
        Ok(self.node_op(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Matrix product `a·b` of 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product `a·bᵀ` of 2-D operands.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// 2-D cross-correlation of `x: [N, C, H, W]` with `w: [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 4 || vw.rank() != 4 || vx.shape()[1] != vw.shape()[1] || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} incompatible with kernel {:?} (stride {stride})", vx.shape(), vw.shape()),
            ));
        }
        let (n, c, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (o, kh, kw) = (vw.shape()[0], vw.shape()[2], vw.shape()[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d", format!("kernel {:?} larger than padded input {:?}", vw.shape(), vx.shape())));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { n, c, h, w: wd, o, kh, kw, stride, pad, oh, ow };
        let (p, l) = (geom.patch(), geom.positions());
        let mut cols = vec![0.0; n * p * l];
        let mut out = vec![0.0; n * o * l];
        let img = c * h * wd;
        for b in 0..n {
            let cb = &mut cols[b * p * l..(b + 1) * p * l];
            geom.im2col(&vx.data()[b * img..(b + 1) * img], cb);
            gemm(o, p, l, vw.data(), false, cb, false, 0.0, &mut out[b * o * l..(b + 1) * o * l]);
        }
        let value = DenseArray::from_parts(vec![n, o, oh, ow], out);
        Ok(self.node_op(value, Op::Conv2d { x, w, geom, cols }, &[x, w]))
    }

    fn broadcast_span(&self, name: &str, x: Var, b: Var, axis: usize) -> Result<Span> {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        let end = axis + sb.len();
        if end > sx.len() || sx[axis..end] != *sb {
            return Err(shape_err(name, format!("operand {sb:?} does not match {sx:?} at axis {axis}")));
        }
        Ok(Span::around(sx, axis, end))
    }

    /// `x + b`, where `b`'s shape equals the block of `x`'s shape starting at
    /// `axis`; `b` is repeated over all other axes.
    pub fn add_broadcast(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let span = self.broadcast_span("add_broadcast", x, b, axis)?;
        let (vx, vb) = (self.value(x), self.value(b));
        let mut out = vx.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += vb.data()[(i / span.inner) % span.mid];
        }
        let value = DenseArray::from_parts(vx.shape().to_vec(), out);
        Ok(self.node_op(value, Op::AddBroadcast { x, b, span }, &[x, b]))
    }

    /// `x ⊙ s` with the same broadcasting rule as [`Graph::add_broadcast`].
    pub fn mul_broadcast(&mut self, x: Var, s: Var, axis: usize) -> Result<Var> {
        let span = self.broadcast_span("mul_broadcast", x, s, axis)?;
        let (vx, vs) = (self.value(x), self.value(s));
        let mut out = vx.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v *= vs.data()[(i / span.inner) % span.mid];
        }
        let value = DenseArray::from_parts(vx.shape().to_vec(), out);
        Ok(self.node_op(value, Op::MulBroadcast { x, s, span }, &[x, s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| x.max(0.0));
        self.node_op(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.unary(a, sigmoid);
        self.node_op(v, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::ln);
        self.node_op(v, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::exp);
        self.node_op(v, Op::Exp(a), &[a])
    }

    /// Numerically stable `ln(sigmoid(a))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.unary(a, log_sigmoid);
        self.node_op(v, Op::LogSigmoid(a), &[a])
    }

    /// Elementwise `a^p` for a constant exponent; intended for `a ≥ 0`.
    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let v = self.unary(a, |x| x.powf(p));
        self.node_op(v, Op::PowConst(a, p), &[a])
    }

    /// Elementwise `max(a, c)`.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.unary(a, |x| x.max(c));
        self.node_op(v, Op::MaxConst(a, c), &[a])
    }

    /// Elementwise Huber-style smooth L1 with transition point `beta`.
    pub fn smooth_l1(&mut self, a: Var, beta: f64) -> Var {
        let v = self.unary(a, |x| smooth_l1(x, beta));
        self.node_op(v, Op::SmoothL1(a, beta), &[a])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {:?}", vx.shape())));
        }
        let span = Span::around(vx.shape(), axis, axis + 1);
        let mut out = vx.data().to_vec();
        for o in 0..span.outer {
            for i in 0..span.inner {
                let at = |m: usize| (o * span.mid + m) * span.inner + i;
                let max = (0..span.mid).map(|m| out[at(m)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for m in 0..span.mid {
                    let e = (out[at(m)] - max).exp();
                    out[at(m)] = e;
                    total += e;
                }
                for m in 0..span.mid {
                    out[at(m)] /= total;
                }
            }
        }
        let value = DenseArray::from_parts(vx.shape().to_vec(), out);
        Ok(self.node_op(value, Op::Softmax { x, span }, &[x]))
    }

    /// Sum over `axes`; the reduced axes are removed (all removed → shape `[1]`).
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (out_shape, map) = reduction_map("sum", self.value(x).shape(), axes)?;
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, &slot) in self.value(x).data().iter().zip(&map) {
            out[slot] += v;
        }
        let value = DenseArray::from_parts(out_shape, out);
        Ok(self.node_op(value, Op::Sum { x, map }, &[x]))
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (out_shape, map) = reduction_map("mean", self.value(x).shape(), axes)?;
        let out_len: usize = out_shape.iter().product();
        let count = self.value(x).len() / out_len;
        let mut out = vec![0.0; out_len];
        for (v, &slot) in self.value(x).data().iter().zip(&map) {
            out[slot] += v;
        }
        out.iter_mut().for_each(|v| *v /= count as f64);
        let value = DenseArray::from_parts(out_shape, out);
        Ok(self.node_op(value, Op::Mean { x, map, count }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.sum(x, &axes).expect("full reduction is always valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.mean(x, &axes).expect("full reduction is always valid")
    }

    /// Selects flat elements of `x` by index into a new array of `shape`.
    /// Repeated indices are allowed; their gradients accumulate.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vx.len()) {
            return Err(shape_err("gather", format!("index {bad} out of bounds for {:?}", vx.shape())));
        }
        if shape.iter().product::<usize>() != indices.len() {
            return Err(shape_err("gather", format!("{} indices cannot fill shape {shape:?}", indices.len())));
        }
        let out = indices.iter().map(|&i| vx.data()[i]).collect();
        let value = DenseArray::new(shape.to_vec(), out)?;
        Ok(self.node_op(value, Op::Gather { x, indices }, &[x]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("shape {s:?} incompatible with {base:?} along axis {axis}")));
            }
            widths.push(s[axis..].iter().product::<usize>());
        }
        let outer: usize = base[..axis].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &wd) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * wd..(o + 1) * wd]);
            }
        }
        let mut shape = base;
        shape[axis] = inputs.iter().map(|&v| self.value(v).shape()[axis]).sum();
        let value = DenseArray::from_parts(shape, out);
        Ok(self.node_op(value, Op::Concat { inputs: inputs.to_vec(), outer, widths }, inputs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshaped(shape)
            .map_err(|_| shape_err("reshape", format!("{:?} cannot become {shape:?}", self.value(x).shape())))?;
        Ok(self.node_op(value, Op::Reshape(x), &[x]))
    }

    /// Euclidean norm along `axis`, which is removed from the shape.
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(shape_err("l2_norm", format!("axis {axis} out of range for {:?}", vx.shape())));
        }
        let span = Span::around(vx.shape(), axis, axis + 1);
        let mut out = vec![0.0; span.outer * span.inner];
        for o in 0..span.outer {
            for m in 0..span.mid {
                for i in 0..span.inner {
                    let v = vx.data()[(o * span.mid + m) * span.inner + i];
                    out[o * span.inner + i] += v * v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        let mut shape: Vec<usize> = vx.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = DenseArray::from_parts(shape, out);
        Ok(self.node_op(value, Op::L2Norm { x, span }, &[x]))
    }

    /// Accumulates `d root / d node` into every reachable node that requires
    /// gradients. `root` must hold a single element.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward: root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            propagate(&self.nodes, i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(DenseArray::from_parts(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

/// Adjoint buffer for `v`, allocated on first use.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn elementwise(nodes: &[Node], adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
    if let Some(buf) = slot(nodes, adj, v) {
        for (i, b) in buf.iter_mut().enumerate() {
            *b += f(i, g.get(i).copied().unwrap_or(0.0));
        }
    }
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let out = nodes[i].value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            elementwise(nodes, adj, *a, g, |_, gi| gi);
            elementwise(nodes, adj, *b, g, |_, gi| gi);
        }
        Op::Sub(a, b) => {
            elementwise(nodes, adj, *a, g, |_, gi| gi);
            elementwise(nodes, adj, *b, g, |_, gi| -gi);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            elementwise(nodes, adj, *a, g, |k, gi| gi * vb[k]);
            elementwise(nodes, adj, *b, g, |k, gi| gi * va[k]);
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            elementwise(nodes, adj, *a, g, |k, gi| gi / vb[k]);
            elementwise(nodes, adj, *b, g, |k, gi| -gi * va[k] / (vb[k] * vb[k]));
        }
        Op::Scale(a, f) => elementwise(nodes, adj, *a, g, |_, gi| gi * f),
        Op::AddScalar(a) | Op::Reshape(a) => elementwise(nodes, adj, *a, g, |_, gi| gi),
        Op::MatMul { a, b, trans_b } => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k) = (sa[0], sa[1]);
            let n = if *trans_b { sb[0] } else { sb[1] };
            let (va, vb) = (val(*a), val(*b));
            if let Some(buf) = slot(nodes, adj, *a) {
                // dA = G·Bᵀ, or G·B when B was used transposed.
                gemm(m, n, k, g, false, vb, !*trans_b, 1.0, buf);
            }
            if let Some(buf) = slot(nodes, adj, *b) {
                if *trans_b {
                    // d(Bᵀ) = Aᵀ·G, so dB = Gᵀ·A with shape n×k.
                    gemm(n, m, k, g, true, va, false, 1.0, buf);
                } else {
                    gemm(k, m, n, va, true, g, false, 1.0, buf);
                }
            }
        }
        Op::Conv2d { x, w, geom, cols } => {
            let (p, l, o) = (geom.patch(), geom.positions(), geom.o);
            if let Some(buf) = slot(nodes, adj, *w) {
                for b in 0..geom.n {
                    gemm(o, l, p, &g[b * o * l..(b + 1) * o * l], false, &cols[b * p * l..(b + 1) * p * l], true, 1.0, buf);
                }
            }
            let vw = val(*w);
            if let Some(buf) = slot(nodes, adj, *x) {
                let img = geom.c * geom.h * geom.w;
                let mut dcols = vec![0.0; p * l];
                for b in 0..geom.n {
                    gemm(p, o, l, vw, true, &g[b * o * l..(b + 1) * o * l], false, 0.0, &mut dcols);
                    geom.col2im(&dcols, &mut buf[b * img..(b + 1) * img]);
                }
            }
        }
        Op::AddBroadcast { x, b, span } => {
            elementwise(nodes, adj, *x, g, |_, gi| gi);
            if let Some(buf) = slot(nodes, adj, *b) {
                for (k, &gi) in g.iter().enumerate() {
                    buf[(k / span.inner) % span.mid] += gi;
                }
            }
        }
        Op::MulBroadcast { x, s, span } => {
            let (vx, vs) = (val(*x), val(*s));
            elementwise(nodes, adj, *x, g, |k, gi| gi * vs[(k / span.inner) % span.mid]);
            if let Some(buf) = slot(nodes, adj, *s) {
                for (k, &gi) in g.iter().enumerate() {
                    buf[(k / span.inner) % span.mid] += gi * vx[k];
                }
            }
        }
        Op::Relu(a) => {
            let va = val(*a);
            elementwise(nodes, adj, *a, g, |k, gi| if va[k] > 0.0 { gi } else { 0.0 });
        }
        Op::Sigmoid(a) => elementwise(nodes, adj, *a, g, |k, gi| gi * out[k] * (1.0 - out[k])),
        Op::Log(a) => {
            let va = val(*a);
            elementwise(nodes, adj, *a, g, |k, gi| gi / va[k]);
        }
        Op::Exp(a) => elementwise(nodes, adj, *a, g, |k, gi| gi * out[k]),
        Op::LogSigmoid(a) => {
            let va = val(*a);
            elementwise(nodes, adj, *a, g, |k, gi| gi * sigmoid(-va[k]));
        }
        Op::PowConst(a, p) => {
            let va = val(*a);
            elementwise(nodes, adj, *a, g, |k, gi| if *p == 0.0 { 0.0 } else { gi * p * va[k].powf(p - 1.0) });
        }
        Op::MaxConst(a, c) => {
            let va = val(*a);
            elementwise(nodes, adj, *a, g, |k, gi| if va[k] > *c { gi } else { 0.0 });
        }
        Op::SmoothL1(a, beta) => {
            let va = val(*a);
            elementwise(nodes, adj, *a, g, |k, gi| {
                let x = va[k];
                if x.abs() < *beta {
                    gi * x / beta
                } else {
                    gi * x.signum()
                }
            });
        }
        Op::Softmax { x, span } => {
            if let Some(buf) = slot(nodes, adj, *x) {
                for o in 0..span.outer {
                    for i in 0..span.inner {
                        let at = |m: usize| (o * span.mid + m) * span.inner + i;
                        let dot: f64 = (0..span.mid).map(|m| g[at(m)] * out[at(m)]).sum();
                        for m in 0..span.mid {
                            buf[at(m)] += out[at(m)] * (g[at(m)] - dot);
                        }
                    }
                }
            }
        }
        Op::Sum { x, map } => elementwise(nodes, adj, *x, g, |k, _| g[map[k]]),
        Op::Mean { x, map, count } => elementwise(nodes, adj, *x, g, |k, _| g[map[k]] / *count as f64),
        Op::Gather { x, indices } => {
            if let Some(buf) = slot(nodes, adj, *x) {
                for (&idx, &gi) in indices.iter().zip(g) {
                    buf[idx] += gi;
                }
            }
        }
        Op::Concat { inputs, outer, widths } => {
            let total: usize = widths.iter().sum();
            let mut start = 0;
            for (&v, &wd) in inputs.iter().zip(widths) {
                if let Some(buf) = slot(nodes, adj, v) {
                    for o in 0..*outer {
                        for (b, &gi) in buf[o * wd..(o + 1) * wd].iter_mut().zip(&g[o * total + start..]) {
                            *b += gi;
                        }
                    }
                }
                start += wd;
            }
        }
        Op::L2Norm { x, span } => {
            let vx = val(*x);
            if let Some(buf) = slot(nodes, adj, *x) {
                for o in 0..span.outer {
                    for m in 0..span.mid {
                        for i in 0..span.inner {
                            let k = (o * span.mid + m) * span.inner + i;
                            let r = o * span.inner + i;
                            if out[r] > 0.0 {
                                buf[k] += g[r] * vx[k] / out[r];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Central-difference estimate of the gradient of a scalar function.
pub fn finite_difference_gradient(
    f: impl Fn(&DenseArray) -> f64,
    x: &DenseArray,
    epsilon: f64,
) -> Result<DenseArray> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut probe = x.clone();
    let mut grad = DenseArray::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let up = f(&probe);
        probe.data_mut()[i] = orig - epsilon;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * epsilon);
    }
    Ok(grad)
}

/// Relative error used by the gradient checks:
/// `max|a - b| / max(max|a|, max|b|)`, zero when both vanish.
pub fn relative_error(analytic: &DenseArray, numeric: &DenseArray) -> f64 {
    let linf = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0, f64::max);
    let diff = linf(&mut analytic.data().iter().zip(numeric.data()).map(|(a, b)| (a - b).abs()));
    let scale = linf(&mut analytic.data().iter().chain(numeric.data()).map(|v| v.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
