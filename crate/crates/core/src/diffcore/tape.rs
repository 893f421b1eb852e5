use std::cell::{Cell, Ref, RefCell};

use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Neg(usize),
    Log(usize),
    Exp(usize),
    Tanh(usize),
    FloorAt(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Softmax(usize),
    /// Row-wise L2 normalization; saves the per-row norms.
    Normalize(usize, Vec<f64>),
    Cosine(usize, usize),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    MeanPoolRows(usize, usize),
    /// `out[g] = sum_j w[g * group + j] * in[g * group + j]`, weights constant.
    GroupWeightedSum(usize, usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a differentiable computation.
///
/// Node ids are assigned in creation order, which is a topological order of
/// the graph, so the backward sweep simply walks ids in descending order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    spent: Cell<bool>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by one backward sweep, indexed by variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if `var` requires grad and
    /// participated in the graph.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros for a non-participating var.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Re-arms the tape so `backward` may run again. Gradients are never
    /// accumulated across sweeps; each sweep returns a fresh [`Gradients`].
    pub fn reset(&self) {
        self.spent.set(false);
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, name: &str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if self.spent.replace(true) {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !nodes[root.id].requires_grad {
            return Ok(Gradients {
                grads: vec![None; nodes.len()],
            });
        }
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out = Vec::with_capacity(nodes.len());
        for (id, g) in grads.into_iter().enumerate() {
            let node = &nodes[id];
            match g {
                Some(g) if node.requires_grad => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("gradient of node {id}")));
                    }
                    out.push(Some(Tensor::from_parts(node.value.shape().to_vec(), g)));
                }
                _ => out.push(None),
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, |s| add_into(s, g));
            accumulate(grads, nodes, b, |s| add_into(s, g));
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, |s| add_into(s, g));
            accumulate(grads, nodes, b, |s| {
                for (s, g) in s.iter_mut().zip(g) {
                    *s -= g;
                }
            });
        }
        &Op::Mul(a, b) => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            accumulate(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            });
            accumulate(grads, nodes, b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            });
        }
        &Op::Scale(a, c) => accumulate(grads, nodes, a, |s| {
            for (s, g) in s.iter_mut().zip(g) {
                *s += c * g;
            }
        }),
        &Op::AddScalar(a) => accumulate(grads, nodes, a, |s| add_into(s, g)),
        &Op::Neg(a) => accumulate(grads, nodes, a, |s| {
            for (s, g) in s.iter_mut().zip(g) {
                *s -= g;
            }
        }),
        &Op::Log(a) => {
            let x = nodes[a].value.data();
            accumulate(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] / x[i];
                }
            });
        }
        &Op::Exp(a) => accumulate(grads, nodes, a, |s| {
            for i in 0..s.len() {
                s[i] += g[i] * y[i];
            }
        }),
        &Op::Tanh(a) => accumulate(grads, nodes, a, |s| {
            for i in 0..s.len() {
                s[i] += g[i] * (1.0 - y[i] * y[i]);
            }
        }),
        &Op::FloorAt(a, eps) => {
            let x = nodes[a].value.data();
            accumulate(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    if x[i] > eps {
                        s[i] += g[i];
                    }
                }
            });
        }
        &Op::MatMul(a, b) => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let ad = av.data();
            let bd = bv.data();
            // dA = G * B^T
            accumulate(grads, nodes, a, |s| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        s[i * k + p] += dot(grow, &bd[p * n..(p + 1) * n]);
                    }
                }
            });
            // dB = A^T * G
            accumulate(grads, nodes, b, |s| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let srow = &mut s[p * n..(p + 1) * n];
                        for (sv, gv) in srow.iter_mut().zip(grow) {
                            *sv += aip * gv;
                        }
                    }
                }
            });
        }
        &Op::Transpose(a) => {
            let (r, c) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
            accumulate(grads, nodes, a, |s| {
                for i in 0..r {
                    for j in 0..c {
                        s[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        &Op::Sum(a) => accumulate(grads, nodes, a, |s| {
            for v in s.iter_mut() {
                *v += g[0];
            }
        }),
        &Op::Mean(a) => accumulate(grads, nodes, a, |s| {
            let n = s.len() as f64;
            for v in s.iter_mut() {
                *v += g[0] / n;
            }
        }),
        &Op::SumLast(a) => {
            let c = nodes[a].value.cols();
            accumulate(grads, nodes, a, |s| {
                for (r, row) in s.chunks_mut(c).enumerate() {
                    for v in row {
                        *v += g[r];
                    }
                }
            });
        }
        &Op::Softmax(a) => {
            let c = node.value.cols();
            accumulate(grads, nodes, a, |s| {
                for r in 0..s.len() / c {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let inner = dot(yr, gr);
                    for i in 0..c {
                        s[r * c + i] += yr[i] * (gr[i] - inner);
                    }
                }
            });
        }
        Op::Normalize(a, norms) => {
            let c = node.value.cols();
            accumulate(grads, nodes, *a, |s| {
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let inner = dot(yr, gr);
                    for i in 0..c {
                        s[r * c + i] += (gr[i] - yr[i] * inner) / n;
                    }
                }
            });
        }
        &Op::Cosine(a, b) => {
            let u = nodes[a].value.data();
            let v = nodes[b].value.data();
            let nu = dot(u, u).sqrt();
            let nv = dot(v, v).sqrt();
            let c = y[0];
            let g0 = g[0];
            accumulate(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g0 * (v[i] / (nu * nv) - c * u[i] / (nu * nu));
                }
            });
            accumulate(grads, nodes, b, |s| {
                for i in 0..s.len() {
                    s[i] += g0 * (u[i] / (nu * nv) - c * v[i] / (nv * nv));
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                let gs = &g[offset..offset + n];
                accumulate(grads, nodes, p, |s| add_into(s, gs));
                offset += n;
            }
        }
        &Op::Reshape(a) => accumulate(grads, nodes, a, |s| add_into(s, g)),
        &Op::MeanPoolRows(a, group) => {
            let c = node.value.cols();
            accumulate(grads, nodes, a, |s| {
                let inv = 1.0 / group as f64;
                for (r, row) in s.chunks_mut(c).enumerate() {
                    let gr = &g[(r / group) * c..(r / group + 1) * c];
                    for (v, gv) in row.iter_mut().zip(gr) {
                        *v += gv * inv;
                    }
                }
            });
        }
        Op::GroupWeightedSum(a, group, w) => {
            let c = node.value.cols();
            accumulate(grads, nodes, *a, |s| {
                for (r, row) in s.chunks_mut(c).enumerate() {
                    let wr = w[r];
                    if wr == 0.0 {
                        continue;
                    }
                    let gr = &g[(r / group) * c..(r / group + 1) * c];
                    for (v, gv) in row.iter_mut().zip(gr) {
                        *v += wr * gv;
                    }
                }
            });
        }
    }
}

fn add_into(s: &mut [f64], g: &[f64]) {
    for (s, g) in s.iter_mut().zip(g) {
        *s += g;
    }
}

fn same_shape(name: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{name}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    /// Borrow of the forward value; do not hold across further ops.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.value_of(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Constant copy of this value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn unary(&self, name: &str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let out = {
            let x = self.value_ref();
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        };
        self.tape.record(name, out, op, &[self.id])
    }

    fn binary(&self, other: Var<'t>, name: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let out = {
            let a = self.value_ref();
            let b = other.value_ref();
            same_shape(name, &a, &b)?;
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        self.tape.record(name, out, op, &[self.id, other.id])
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", Op::AddScalar(self.id), |v| v + c)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.unary("neg", Op::Neg(self.id), |v| -v)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value_ref().data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        self.unary("log", Op::Log(self.id), f64::ln)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), f64::exp)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", Op::Tanh(self.id), f64::tanh)
    }

    /// `max(x, eps)` elementwise; zero gradient where the floor is active.
    pub fn floor_at(&self, eps: f64) -> Result<Var<'t>> {
        self.unary("floor_at", Op::FloorAt(self.id, eps), |v| v.max(eps))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let a = self.value_ref();
            let b = other.value_ref();
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::Dimension(format!(
                    "matmul: cannot multiply {:?} by {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ad = a.data();
            let bd = b.data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for (o, bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                        *o += aip * bv;
                    }
                }
            }
            Tensor::from_parts(vec![m, n], out)
        };
        self.tape.record("matmul", out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let out = {
            let a = self.value_ref();
            if a.shape().len() != 2 {
                return Err(Error::Dimension(format!("transpose needs a matrix, got {:?}", a.shape())));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let d = a.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], out)
        };
        self.tape.record("transpose", out, Op::Transpose(self.id), &[self.id])
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s: f64 = self.value_ref().data().iter().sum();
        self.tape.record("sum", Tensor::from_parts(vec![1], vec![s]), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let out = {
            let x = self.value_ref();
            if x.is_empty() {
                return Err(Error::Dimension("mean of an empty tensor".into()));
            }
            x.data().iter().sum::<f64>() / x.len() as f64
        };
        self.tape.record("mean", Tensor::from_parts(vec![1], vec![out]), Op::Mean(self.id), &[self.id])
    }

    /// Sum along the last axis: `[r x c] -> [r]`.
    pub fn sum_last(&self) -> Result<Var<'t>> {
        let out = {
            let x = self.value_ref();
            let c = x.cols();
            let sums: Vec<f64> = x.data().chunks(c).map(|row| row.iter().sum()).collect();
            Tensor::from_parts(vec![sums.len()], sums)
        };
        self.tape.record("sum_last", out, Op::SumLast(self.id), &[self.id])
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let out = {
            let x = self.value_ref();
            let c = x.cols();
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(c) {
                out.extend(softmax_row(row));
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        self.tape.record("softmax", out, Op::Softmax(self.id), &[self.id])
    }

    /// L2 normalization of each row (of the whole vector for 1-D input).
    pub fn l2_normalize(&self) -> Result<Var<'t>> {
        let (out, norms) = {
            let x = self.value_ref();
            let c = x.cols();
            let mut out = Vec::with_capacity(x.len());
            let mut norms = Vec::with_capacity(x.rows());
            for (r, row) in x.data().chunks(c).enumerate() {
                let n = dot(row, row).sqrt();
                if n == 0.0 {
                    return Err(Error::DegenerateVector(format!("l2_normalize: row {r} has zero norm")));
                }
                norms.push(n);
                out.extend(row.iter().map(|v| v / n));
            }
            (Tensor::from_parts(x.shape().to_vec(), out), norms)
        };
        self.tape.record("l2_normalize", out, Op::Normalize(self.id, norms), &[self.id])
    }

    pub fn cosine_similarity(&self, other: Var<'t>) -> Result<Var<'t>> {
        let c = {
            let u = self.value_ref();
            let v = other.value_ref();
            same_shape("cosine_similarity", &u, &v)?;
            let nu = u.norm();
            let nv = v.norm();
            if nu == 0.0 || nv == 0.0 {
                return Err(Error::DegenerateVector("cosine_similarity of a zero-norm vector".into()));
            }
            (u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0)
        };
        self.tape.record(
            "cosine_similarity",
            Tensor::from_parts(vec![1], vec![c]),
            Op::Cosine(self.id, other.id),
            &[self.id, other.id],
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let out = self.value_ref().reshaped(shape)?;
        self.tape.record("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    /// Mean over consecutive groups of `group` rows: `[g*group x c] -> [g x c]`.
    pub fn mean_pool_rows(&self, group: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.value_ref();
            let c = x.cols();
            if group == 0 || x.rows() % group != 0 {
                return Err(Error::Dimension(format!(
                    "mean_pool_rows: {} rows not divisible into groups of {group}",
                    x.rows()
                )));
            }
            let groups = x.rows() / group;
            let mut out = vec![0.0; groups * c];
            for r in 0..x.rows() {
                let o = &mut out[(r / group) * c..(r / group + 1) * c];
                for (ov, xv) in o.iter_mut().zip(x.row(r)) {
                    *ov += xv;
                }
            }
            let inv = 1.0 / group as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            Tensor::from_parts(vec![groups, c], out)
        };
        self.tape.record("mean_pool_rows", out, Op::MeanPoolRows(self.id, group), &[self.id])
    }

    /// Weighted sum over consecutive groups of rows with constant weights,
    /// one weight per input row.
    pub fn group_weighted_sum(&self, group: usize, weights: Vec<f64>) -> Result<Var<'t>> {
        let out = {
            let x = self.value_ref();
            let c = x.cols();
            if group == 0 || x.rows() % group != 0 || weights.len() != x.rows() {
                return Err(Error::Dimension(format!(
                    "group_weighted_sum: {} rows, group {group}, {} weights",
                    x.rows(),
                    weights.len()
                )));
            }
            let groups = x.rows() / group;
            let mut out = vec![0.0; groups * c];
            for r in 0..x.rows() {
                let w = weights[r];
                if w == 0.0 {
                    continue;
                }
                let o = &mut out[(r / group) * c..(r / group + 1) * c];
                for (ov, xv) in o.iter_mut().zip(x.row(r)) {
                    *ov += w * xv;
                }
            }
            Tensor::from_parts(vec![groups, c], out)
        };
        self.tape.record(
            "group_weighted_sum",
            out,
            Op::GroupWeightedSum(self.id, group, weights),
            &[self.id],
        )
    }
}

impl Tape {
    /// Stacks the given tensors along the row axis. All parts must share the
    /// last-axis width; the result is `[total_rows x width]`.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_rows of nothing".into()));
        }
        let out = {
            let width = parts[0].value_ref().cols();
            let mut data = Vec::new();
            for p in parts {
                let v = p.value_ref();
                if v.cols() != width {
                    return Err(Error::Dimension(format!(
                        "concat_rows: width {} vs {width}",
                        v.cols()
                    )));
                }
                data.extend_from_slice(v.data());
            }
            Tensor::from_parts(vec![data.len() / width, width], data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.record("concat_rows", out, Op::ConcatRows(ids.clone()), &ids)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
