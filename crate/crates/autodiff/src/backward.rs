//! Reverse-mode differentiation.
//!
//! Every vector-Jacobian product is written with the same graph operations
//! as the forward pass. With `create_graph` the adjoints are ordinary graph
//! nodes and can be differentiated again; without it the operands are
//! detached first, so every adjoint is a constant and nothing is retained.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::expr::{Expr, Op, Origin};
use crate::tensor::Tensor;

/// Gradients of the scalar `output` with respect to each of `wrt`.
///
/// Entries of `wrt` that `output` does not depend on get zero gradients.
pub fn grad(output: &Expr, wrt: &[Expr], create_graph: bool) -> Result<Vec<Expr>> {
    if output.value().len() != 1 {
        return Err(Error::NonScalar(output.shape().to_vec()));
    }

    let targets: HashSet<u64> = wrt.iter().map(Expr::id).collect();
    let nodes = ancestors(output);

    // nodes on some path between a target and the output, in creation order
    let mut relevant: HashSet<u64> = HashSet::new();
    for e in &nodes {
        let on_path = targets.contains(&e.id())
            || match &e.node().origin {
                Origin::Op { inputs, .. } => inputs.iter().any(|i| relevant.contains(&i.id())),
                _ => false,
            };
        if on_path {
            relevant.insert(e.id());
        }
    }

    let mut adjoints: HashMap<u64, Expr> = HashMap::new();
    if relevant.contains(&output.id()) {
        adjoints.insert(output.id(), Expr::constant(Tensor::ones(output.shape())));
    }

    for e in nodes.iter().rev() {
        if !relevant.contains(&e.id()) {
            continue;
        }
        let Origin::Op { op, inputs } = &e.node().origin else {
            continue;
        };
        let Some(g) = adjoints.get(&e.id()).cloned() else {
            continue;
        };
        let needed: Vec<bool> = inputs.iter().map(|i| relevant.contains(&i.id())).collect();
        if !needed.iter().any(|&n| n) {
            continue;
        }
        let (inputs_v, out_v, g_v) = if create_graph {
            (inputs.clone(), e.clone(), g)
        } else {
            (
                inputs.iter().map(Expr::detach).collect::<Vec<_>>(),
                e.detach(),
                g.detach(),
            )
        };
        let contributions = vjp(op, &inputs_v, &out_v, &g_v, &needed)?;
        for ((input, contribution), need) in inputs.iter().zip(contributions).zip(needed) {
            let (true, Some(c)) = (need, contribution) else {
                continue;
            };
            if !c.value().is_finite() {
                return Err(Error::NonFiniteGradient { op: op.name() });
            }
            let acc = match adjoints.remove(&input.id()) {
                Some(prev) => prev.add(&c)?,
                None => c,
            };
            adjoints.insert(input.id(), acc);
        }
    }

    Ok(wrt
        .iter()
        .map(|w| {
            adjoints
                .get(&w.id())
                .cloned()
                .unwrap_or_else(|| Expr::constant(Tensor::zeros(w.shape())))
        })
        .collect())
}

/// All nodes reachable from `root` through operands, sorted by id.
fn ancestors(root: &Expr) -> Vec<Expr> {
    let mut seen: HashSet<u64> = HashSet::new();
    let mut out = Vec::new();
    let mut stack = vec![root.clone()];
    while let Some(e) = stack.pop() {
        if !seen.insert(e.id()) {
            continue;
        }
        if let Origin::Op { inputs, .. } = &e.node().origin {
            for i in inputs {
                if i.requires_grad() && !seen.contains(&i.id()) {
                    stack.push(i.clone());
                }
            }
        }
        out.push(e);
    }
    out.sort_by_key(Expr::id);
    out
}

fn mask(x: &Tensor, keep: impl Fn(f64) -> bool) -> Expr {
    Expr::constant(x.map(|v| if keep(v) { 1.0 } else { 0.0 }))
}

fn vjp(op: &Op, x: &[Expr], y: &Expr, g: &Expr, needed: &[bool]) -> Result<Vec<Option<Expr>>> {
    let one = |e: Result<Expr>| -> Result<Vec<Option<Expr>>> { Ok(vec![Some(e?)]) };
    match op {
        Op::Add => Ok(vec![
            opt(needed[0], || g.sum_to(x[0].shape()))?,
            opt(needed[1], || g.sum_to(x[1].shape()))?,
        ]),
        Op::Sub => Ok(vec![
            opt(needed[0], || g.sum_to(x[0].shape()))?,
            opt(needed[1], || g.neg().sum_to(x[1].shape()))?,
        ]),
        Op::Mul => Ok(vec![
            opt(needed[0], || g.mul(&x[1])?.sum_to(x[0].shape()))?,
            opt(needed[1], || g.mul(&x[0])?.sum_to(x[1].shape()))?,
        ]),
        Op::Div => Ok(vec![
            opt(needed[0], || g.div(&x[1])?.sum_to(x[0].shape()))?,
            // d(a/b)/db = -(a/b)/b
            opt(needed[1], || g.mul(y)?.div(&x[1])?.neg().sum_to(x[1].shape()))?,
        ]),
        Op::Neg => one(Ok(g.neg())),
        Op::Scale(c) => one(Ok(g.scale(*c))),
        Op::MatMul { ta, tb } => {
            let (a, b) = (&x[0], &x[1]);
            let (ta, tb) = (*ta, *tb);
            Ok(vec![
                opt(needed[0], || {
                    if ta {
                        b.matmul_t(g, tb, true)
                    } else {
                        g.matmul_t(b, false, !tb)
                    }
                })?,
                opt(needed[1], || {
                    if tb {
                        g.matmul_t(a, true, ta)
                    } else {
                        a.matmul_t(g, !ta, false)
                    }
                })?,
            ])
        }
        Op::Exp => one(g.mul(y)),
        Op::Log => one(g.div(&x[0])),
        // σ' = y - y²
        Op::Sigmoid => one(g.mul(&y.sub(&y.mul(y)?)?)),
        // tanh' = 1 - y²
        Op::Tanh => one(g.sub(&g.mul(y)?.mul(y)?)),
        Op::Relu => one(g.mul(&mask(x[0].value(), |v| v > 0.0))),
        Op::Sqrt => one(Ok(g.div(y)?.scale(0.5))),
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            one(g.mul(&mask(x[0].value(), |v| v >= lo && v <= hi)))
        }
        Op::SumAll => one(g.reshape(&[])?.broadcast_to(x[0].shape())),
        Op::SumTo { .. } => one(g.broadcast_to(x[0].shape())),
        Op::BroadcastTo { .. } => one(g.sum_to(x[0].shape())),
        Op::Reshape { .. } => one(g.reshape(x[0].shape())),
        Op::Gather { index, width, .. } => one(g.scatter_add(index.clone(), *width, x[0].shape())),
        Op::ScatterAdd { index, width, .. } => one(g.gather(index.clone(), *width, x[0].shape())),
        Op::Concat { axis, sizes } => {
            let mut start = 0;
            let mut out = Vec::with_capacity(sizes.len());
            for (&len, &need) in sizes.iter().zip(needed) {
                out.push(opt(need, || g.slice(*axis, start, len))?);
                start += len;
            }
            Ok(out)
        }
        Op::Slice { axis, start, .. } => one(g.pad(*axis, *start, x[0].shape()[*axis])),
        Op::Pad { axis, start, .. } => one(g.slice(*axis, *start, x[0].shape()[*axis])),
    }
}

fn opt(needed: bool, f: impl FnOnce() -> Result<Expr>) -> Result<Option<Expr>> {
    if needed {
        f().map(Some)
    } else {
        Ok(None)
    }
}
