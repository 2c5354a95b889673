//! Expression graph nodes and the forward pass of every primitive.
//!
//! Values are computed eagerly when a node is built. A node keeps its
//! operands only when at least one of them depends on a variable, so graphs
//! built purely from constants are not retained.

use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::precision;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, numel, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a node of the computation graph.
///
/// Node ids grow monotonically, so every operand has a smaller id than the
/// nodes built from it. The backward pass relies on that ordering.
#[derive(Clone)]
pub struct Expr(Rc<Node>);

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) value: Tensor,
    pub(crate) origin: Origin,
}

pub(crate) enum Origin {
    Constant,
    Variable,
    Op { op: Op, inputs: Vec<Expr> },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    MatMul {
        ta: bool,
        tb: bool,
    },
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Sqrt,
    Clamp {
        lo: f64,
        hi: f64,
    },
    SumAll,
    SumTo {
        shape: Vec<usize>,
    },
    BroadcastTo {
        shape: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Gather {
        index: Rc<[usize]>,
        width: usize,
        shape: Vec<usize>,
    },
    ScatterAdd {
        index: Rc<[usize]>,
        width: usize,
        shape: Vec<usize>,
    },
    Concat {
        axis: usize,
        sizes: Vec<usize>,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Pad {
        axis: usize,
        start: usize,
        total: usize,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Sqrt => "sqrt",
            Op::Clamp { .. } => "clamp",
            Op::SumAll => "sum",
            Op::SumTo { .. } => "sum_to",
            Op::BroadcastTo { .. } => "broadcast_to",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
        }
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.0.origin {
            Origin::Constant => "constant",
            Origin::Variable => "variable",
            Origin::Op { op, .. } => op.name(),
        };
        f.debug_struct("Expr")
            .field("id", &self.0.id)
            .field("kind", &kind)
            .field("shape", &self.0.value.shape())
            .finish()
    }
}

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Expr {
    fn leaf(value: Tensor, origin: Origin) -> Expr {
        Expr(Rc::new(Node {
            id: next_id(),
            value,
            origin,
        }))
    }

    /// A value that is never differentiated.
    pub fn constant(value: Tensor) -> Expr {
        Expr::leaf(value, Origin::Constant)
    }

    pub fn scalar(value: f64) -> Expr {
        Expr::constant(Tensor::scalar(value))
    }

    /// A differentiable input.
    pub fn variable(value: Tensor) -> Expr {
        Expr::leaf(value, Origin::Variable)
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// True when the node depends on at least one variable.
    pub fn requires_grad(&self) -> bool {
        !matches!(self.0.origin, Origin::Constant)
    }

    pub fn is_variable(&self) -> bool {
        matches!(self.0.origin, Origin::Variable)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Expr {
        if self.requires_grad() {
            Expr::constant(self.0.value.clone())
        } else {
            self.clone()
        }
    }

    pub(crate) fn node(&self) -> &Node {
        &self.0
    }

    fn from_op(op: Op, inputs: Vec<Expr>, mut data: Vec<f64>, shape: Vec<usize>) -> Expr {
        precision::round_in_place(&mut data);
        let value = Tensor::from_parts(shape, data);
        if inputs.iter().any(Expr::requires_grad) {
            Expr::leaf(value, Origin::Op { op, inputs })
        } else {
            Expr::constant(value)
        }
    }

    // ---- elementwise binary with broadcasting ----

    fn binary(&self, other: &Expr, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Expr> {
        let a = self.value();
        let b = other.value();
        let data = if a.shape() == b.shape() {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect::<Vec<_>>()
        } else {
            let shape = broadcast_shape(op.name(), a.shape(), b.shape())?;
            let sa = broadcast_strides(a.shape(), &shape);
            let sb = broadcast_strides(b.shape(), &shape);
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; numel(&shape)];
            for_each_broadcast(&shape, &[&sa, &sb], |flat, o| {
                out[flat] = f(ad[o[0]], bd[o[1]]);
            });
            return Ok(Expr::from_op(op, vec![self.clone(), other.clone()], out, shape));
        };
        Ok(Expr::from_op(
            op,
            vec![self.clone(), other.clone()],
            data,
            a.shape().to_vec(),
        ))
    }

    pub fn add(&self, other: &Expr) -> Result<Expr> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Expr) -> Result<Expr> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Expr) -> Result<Expr> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Expr) -> Result<Expr> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    // ---- elementwise unary ----

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Expr {
        let v = self.value();
        let data = v.data().iter().map(|&x| f(x)).collect();
        Expr::from_op(op, vec![self.clone()], data, v.shape().to_vec())
    }

    pub fn neg(&self) -> Expr {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn scale(&self, c: f64) -> Expr {
        self.unary(Op::Scale(c), |x| c * x)
    }

    pub fn exp(&self) -> Expr {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Expr {
        self.unary(Op::Log, f64::ln)
    }

    pub fn sigmoid(&self) -> Expr {
        self.unary(Op::Sigmoid, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&self) -> Expr {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn relu(&self) -> Expr {
        self.unary(Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sqrt(&self) -> Expr {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Expr> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        Ok(self.unary(Op::Clamp { lo, hi }, |x| x.clamp(lo, hi)))
    }

    // ---- linear algebra ----

    /// `op(self) · op(other)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&self, other: &Expr, ta: bool, tb: bool) -> Result<Expr> {
        let a = self.value();
        let b = other.value();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        };
        let (ar, ac) = a.dims2("matmul").map_err(|_| mismatch())?;
        let (br, bc) = b.dims2("matmul").map_err(|_| mismatch())?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            // row/column strides of the (possibly transposed) operands
            let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
            let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
            // SAFETY: the strides describe in-bounds views of `a` (ar×ac) and
            // `b` (br×bc), and `out` is an m×n row-major buffer.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a.data().as_ptr(),
                    rsa,
                    csa,
                    b.data().as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Ok(Expr::from_op(
            Op::MatMul { ta, tb },
            vec![self.clone(), other.clone()],
            out,
            vec![m, n],
        ))
    }

    pub fn matmul(&self, other: &Expr) -> Result<Expr> {
        self.matmul_t(other, false, false)
    }

    // ---- reductions and shape ----

    pub fn sum(&self) -> Expr {
        let s = self.value().sum();
        Expr::from_op(Op::SumAll, vec![self.clone()], vec![s], Vec::new())
    }

    /// Sums broadcast dimensions away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Expr> {
        let v = self.value();
        if v.shape() == shape {
            return Ok(self.clone());
        }
        let full = broadcast_shape("sum_to", shape, v.shape())?;
        if full != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "sum_to",
                left: v.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let strides = broadcast_strides(shape, v.shape());
        let mut out = vec![0.0; numel(shape)];
        let d = v.data();
        for_each_broadcast(v.shape(), &[&strides], |flat, o| out[o[0]] += d[flat]);
        Ok(Expr::from_op(
            Op::SumTo { shape: shape.to_vec() },
            vec![self.clone()],
            out,
            shape.to_vec(),
        ))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Expr> {
        let v = self.value();
        if v.shape() == shape {
            return Ok(self.clone());
        }
        let full = broadcast_shape("broadcast_to", v.shape(), shape)?;
        if full != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                left: v.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let strides = broadcast_strides(v.shape(), shape);
        let mut out = vec![0.0; numel(shape)];
        let d = v.data();
        for_each_broadcast(shape, &[&strides], |flat, o| out[flat] = d[o[0]]);
        Ok(Expr::from_op(
            Op::BroadcastTo { shape: shape.to_vec() },
            vec![self.clone()],
            out,
            shape.to_vec(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Expr> {
        let v = self.value();
        if numel(shape) != v.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: v.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        if v.shape() == shape {
            return Ok(self.clone());
        }
        Ok(Expr::from_op(
            Op::Reshape { shape: shape.to_vec() },
            vec![self.clone()],
            v.to_vec(),
            shape.to_vec(),
        ))
    }

    /// Copies chunks of `width` consecutive values: chunk `m` of the output is
    /// chunk `index[m]` of the input. With `width` equal to the row length this
    /// is a row lookup.
    pub fn gather(&self, index: Rc<[usize]>, width: usize, shape: &[usize]) -> Result<Expr> {
        let v = self.value();
        let chunks = chunk_count("gather", v, width)?;
        if numel(shape) != index.len() * width {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: vec![index.len(), width],
                right: shape.to_vec(),
            });
        }
        let d = v.data();
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index.iter() {
            if i >= chunks {
                return Err(Error::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    len: chunks,
                });
            }
            out.extend_from_slice(&d[i * width..(i + 1) * width]);
        }
        Ok(Expr::from_op(
            Op::Gather {
                index,
                width,
                shape: shape.to_vec(),
            },
            vec![self.clone()],
            out,
            shape.to_vec(),
        ))
    }

    /// Adjoint of [`Expr::gather`]: chunk `m` of the input is added into chunk
    /// `index[m]` of a zero tensor of `shape`.
    pub fn scatter_add(&self, index: Rc<[usize]>, width: usize, shape: &[usize]) -> Result<Expr> {
        let v = self.value();
        if width == 0 || v.len() != index.len() * width || numel(shape) % width != 0 {
            return Err(Error::ShapeMismatch {
                op: "scatter_add",
                left: v.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let chunks = numel(shape) / width;
        let d = v.data();
        let mut out = vec![0.0; numel(shape)];
        for (m, &i) in index.iter().enumerate() {
            if i >= chunks {
                return Err(Error::IndexOutOfRange {
                    op: "scatter_add",
                    index: i,
                    len: chunks,
                });
            }
            let dst = &mut out[i * width..(i + 1) * width];
            for (o, s) in dst.iter_mut().zip(&d[m * width..(m + 1) * width]) {
                *o += s;
            }
        }
        Ok(Expr::from_op(
            Op::ScatterAdd {
                index,
                width,
                shape: shape.to_vec(),
            },
            vec![self.clone()],
            out,
            shape.to_vec(),
        ))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Expr], axis: usize) -> Result<Expr> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base.to_vec(),
                    right: s.to_vec(),
                });
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &sz) in parts.iter().zip(&sizes) {
                let d = p.value().data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        Ok(Expr::from_op(Op::Concat { axis, sizes }, parts.to_vec(), out, shape))
    }

    /// Sub-range `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Expr> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: shape.to_vec(),
                right: vec![axis, start, len],
            });
        }
        let (outer, dim, inner) = split_axis(shape, axis);
        let d = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            out.extend_from_slice(&d[base + start * inner..base + (start + len) * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        Ok(Expr::from_op(
            Op::Slice { axis, start, len },
            vec![self.clone()],
            out,
            new_shape,
        ))
    }

    /// Places `self` at offset `start` along `axis` of a zero tensor whose
    /// extent along that axis is `total`.
    pub fn pad(&self, axis: usize, start: usize, total: usize) -> Result<Expr> {
        let shape = self.shape();
        if axis >= shape.len() || start + shape[axis] > total {
            return Err(Error::ShapeMismatch {
                op: "pad",
                left: shape.to_vec(),
                right: vec![axis, start, total],
            });
        }
        let (outer, dim, inner) = split_axis(shape, axis);
        let d = self.value().data();
        let mut out = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = o * total * inner + start * inner;
            out[dst..dst + dim * inner].copy_from_slice(&d[o * dim * inner..(o + 1) * dim * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = total;
        Ok(Expr::from_op(
            Op::Pad { axis, start, total },
            vec![self.clone()],
            out,
            new_shape,
        ))
    }
}

fn chunk_count(op: &'static str, v: &Tensor, width: usize) -> Result<usize> {
    if width == 0 || v.len() % width != 0 {
        return Err(Error::ShapeMismatch {
            op,
            left: v.shape().to_vec(),
            right: vec![width],
        });
    }
    Ok(v.len() / width)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}
