//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]; nodes only reference
//! earlier nodes, so creation order is already a topological order and
//! [`Tape::backward`] walks it once in reverse. Gradients of nodes used more
//! than once are accumulated.
//!
//! ```
//! use glclef::numcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::row_vector(vec![1.0, 2.0]));
//! let y = tape.dot(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(&tape, x).data(), &[2.0, 4.0]);
//! ```

use super::tensor::{matmul_at_into, matmul_bt_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Right operand may be a `1 × n` row broadcast over the left operand's rows.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    /// Natural log of `max(x, floor)`.
    Log(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    SoftmaxRows(Var),
    Dot(Var, Var),
    Sum(Var),
    Mean(Var),
    NormalizeRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled if none reached it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let [r, c] = tape.value(v).shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.rows(), src.cols(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
        a.shape() == b.shape() || (b.rows() == 1 && b.cols() == a.cols())
    }

    /// Elementwise `a + b`; `b` may be a single row added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_like(a, b, false)
    }

    /// Elementwise `a - b`, same broadcasting rule as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_like(a, b, true)
    }

    fn add_like(&mut self, a: Var, b: Var, negate: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !Self::broadcast_ok(av, bv) {
            return Err(Error::dim(format!(
                "add {}x{} and {}x{}",
                av.rows(),
                av.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let cols = av.cols();
        let sign = if negate { -1.0 } else { 1.0 };
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if bv.rows() == av.rows() {
                    bv.data()[i]
                } else {
                    bv.data()[i % cols]
                };
                x + sign * y
            })
            .collect();
        let value = Tensor::new(av.rows(), cols, data)?;
        let rg = self.rg(&[a, b]);
        let op = if negate { Op::Sub(a, b) } else { Op::Add(a, b) };
        Ok(self.push(value, op, rg))
    }

    /// Elementwise product of equal-shape operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "mul {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(av.rows(), av.cols(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x, 0.0), f64::ln)
    }

    /// `ln(max(x, floor))`; entries at or below the floor get zero gradient.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::Log(x, floor), |v| v.max(floor).ln())
    }

    /// Stacks operands vertically; all must have the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::dim(format!(
                    "concat_rows: {} columns vs {cols}",
                    t.cols()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins operands side by side; all must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::dim(format!(
                    "concat_cols: {} rows vs {rows}",
                    t.rows()
                )));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() || len == 0 {
            return Err(Error::dim(format!(
                "slice_rows {start}..{} of {} rows",
                start + len,
                t.rows()
            )));
        }
        let value = Tensor::new(
            len,
            t.cols(),
            t.data()[start * t.cols()..(start + len) * t.cols()].to_vec(),
        )?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows(x, start), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols() || len == 0 {
            return Err(Error::dim(format!(
                "slice_cols {start}..{} of {} columns",
                start + len,
                t.cols()
            )));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let value = Tensor::new(t.rows(), len, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    /// Row lookup (embedding gather); indices may repeat.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::contract(format!(
                    "row index {id} out of range for {} rows",
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(ids.len(), t.cols(), data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.cols() == 0 {
            return Err(Error::dim("softmax over zero columns"));
        }
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            data.extend(softmax(t.row(r)));
        }
        let value = Tensor::new(t.rows(), t.cols(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Inner product of two equal-shape operands, as a `1 × 1` tensor.
    pub fn dot(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.shape() != qv.shape() {
            return Err(Error::dim(format!(
                "dot of {:?} and {:?}",
                pv.shape(),
                qv.shape()
            )));
        }
        let s = pv.data().iter().zip(qv.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[p, q]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(p, q), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Scales every row to unit L2 norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            let norm = l2_norm(row);
            if norm == 0.0 {
                return Err(Error::contract(format!("cannot normalize zero row {r}")));
            }
            data.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::new(t.rows(), t.cols(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::NormalizeRows(x), rg))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { leaves });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(Tensor::new(y.rows(), y.cols(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, p) = (av.rows(), av.cols(), bv.cols());
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        matmul_bt_into(&g, bv.data(), ga, m, p, k);
                    }
                    if let Some(gb) = self.slot(&mut grads, *b) {
                        matmul_at_into(av.data(), &g, gb, m, k, p);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -1.0
                    } else {
                        1.0
                    };
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        add_assign(ga, &g);
                    }
                    let cols = y.cols();
                    if let Some(gb) = self.slot(&mut grads, *b) {
                        if gb.len() == g.len() {
                            for (d, s) in gb.iter_mut().zip(&g) {
                                *d += sign * s;
                            }
                        } else {
                            for (idx, s) in g.iter().enumerate() {
                                gb[idx % cols] += sign * s;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        for ((d, s), o) in ga.iter_mut().zip(&g).zip(bv.data()) {
                            *d += s * o;
                        }
                    }
                    if let Some(gb) = self.slot(&mut grads, *b) {
                        for ((d, s), o) in gb.iter_mut().zip(&g).zip(av.data()) {
                            *d += s * o;
                        }
                    }
                }
                Op::Scale(x, f) => {
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for (d, s) in gx.iter_mut().zip(&g) {
                            *d += s * f;
                        }
                    }
                }
                Op::Tanh(x) => {
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for ((d, s), yv) in gx.iter_mut().zip(&g).zip(y.data()) {
                            *d += s * (1.0 - yv * yv);
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for ((d, s), yv) in gx.iter_mut().zip(&g).zip(y.data()) {
                            *d += s * yv * (1.0 - yv);
                        }
                    }
                }
                Op::Exp(x) => {
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for ((d, s), yv) in gx.iter_mut().zip(&g).zip(y.data()) {
                            *d += s * yv;
                        }
                    }
                }
                Op::Log(x, floor) => {
                    let xv = self.value(*x);
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for ((d, s), &v) in gx.iter_mut().zip(&g).zip(xv.data()) {
                            if v > *floor {
                                *d += s / v;
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if let Some(gp) = self.slot(&mut grads, p) {
                            add_assign(gp, &g[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = y.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if let Some(gp) = self.slot(&mut grads, p) {
                            for r in 0..y.rows() {
                                add_assign(
                                    &mut gp[r * w..(r + 1) * w],
                                    &g[r * total + offset..r * total + offset + w],
                                );
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceRows(x, start) => {
                    let cols = y.cols();
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        add_assign(&mut gx[start * cols..start * cols + g.len()], &g);
                    }
                }
                Op::SliceCols(x, start) => {
                    let src_cols = self.value(*x).cols();
                    let w = y.cols();
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for r in 0..y.rows() {
                            add_assign(
                                &mut gx[r * src_cols + start..r * src_cols + start + w],
                                &g[r * w..(r + 1) * w],
                            );
                        }
                    }
                }
                Op::GatherRows(table, ids) => {
                    let cols = y.cols();
                    if let Some(gt) = self.slot(&mut grads, *table) {
                        for (r, &id) in ids.iter().enumerate() {
                            add_assign(
                                &mut gt[id * cols..(id + 1) * cols],
                                &g[r * cols..(r + 1) * cols],
                            );
                        }
                    }
                }
                Op::Transpose(x) => {
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        let (rows, cols) = (y.rows(), y.cols());
                        for r in 0..rows {
                            for c in 0..cols {
                                gx[c * rows + r] += g[r * cols + c];
                            }
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let cols = y.cols();
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &g[r * cols..(r + 1) * cols];
                            let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                gx[r * cols + c] += yr[c] * (gr[c] - inner);
                            }
                        }
                    }
                }
                Op::Dot(p, q) => {
                    let s = g[0];
                    let (pv, qv) = (self.value(*p), self.value(*q));
                    if let Some(gp) = self.slot(&mut grads, *p) {
                        for (d, o) in gp.iter_mut().zip(qv.data()) {
                            *d += s * o;
                        }
                    }
                    if let Some(gq) = self.slot(&mut grads, *q) {
                        for (d, o) in gq.iter_mut().zip(pv.data()) {
                            *d += s * o;
                        }
                    }
                }
                Op::Sum(x) | Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let s = if matches!(node.op, Op::Mean(_)) {
                        g[0] / n as f64
                    } else {
                        g[0]
                    };
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        gx.iter_mut().for_each(|d| *d += s);
                    }
                }
                Op::NormalizeRows(x) => {
                    let xv = self.value(*x);
                    let cols = y.cols();
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &g[r * cols..(r + 1) * cols];
                            let norm = l2_norm(xv.row(r));
                            let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                gx[r * cols + c] += (gr[c] - yr[c] * inner) / norm;
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves })
    }

    /// Gradient buffer for `v`, allocated on first use; `None` when `v`
    /// does not take part in differentiation.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let id = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let v = tape.constant(t(&[&[3.0], &[4.0]]));
        let out = tape.matmul(id, v).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

        let zero = tape.constant(Tensor::zeros(2, 2));
        let any = tape.constant(t(&[&[1.5, -2.0, 7.0], &[0.25, 9.0, -1.0]]));
        let out = tape.matmul(zero, any).unwrap();
        assert_eq!(tape.value(out), &Tensor::zeros(2, 3));

        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t(&[&[5.0], &[6.0]]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[17.0, 39.0]);

        assert!(matches!(tape.matmul(b, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[0.0, 0.0], &[1000.0, 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        let yv = tape.value(y);
        assert_eq!(yv.row(0), &[0.5, 0.5]);
        assert!((yv.get(1, 0) - 1.0).abs() < 1e-12);
        assert!(yv.get(1, 1) >= 0.0 && yv.get(1, 1) < 1e-300);
        assert!(yv.is_finite());

        let x = tape.constant(t(&[&[1.0, 2.0, 3.0]]));
        let y = tape.softmax_rows(x).unwrap();
        let expected = [0.0900306, 0.2447285, 0.6652410];
        for (got, want) in tape.value(y).data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn dot_examples() {
        let mut tape = Tape::new();
        let e1 = tape.constant(Tensor::row_vector(vec![1.0, 0.0, 0.0]));
        let e2 = tape.constant(Tensor::row_vector(vec![0.0, 1.0, 0.0]));
        let d = tape.dot(e1, e1).unwrap();
        assert_eq!(tape.value(d).item().unwrap(), 1.0);
        let d = tape.dot(e1, e2).unwrap();
        assert_eq!(tape.value(d).item().unwrap(), 0.0);
        let p = tape.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let q = tape.constant(Tensor::row_vector(vec![4.0, 5.0, 6.0]));
        let d = tape.dot(p, q).unwrap();
        assert_eq!(tape.value(d).item().unwrap(), 32.0);
        let short = tape.constant(Tensor::row_vector(vec![1.0]));
        assert!(matches!(tape.dot(p, short), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_square_and_constant() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row_vector(vec![1.0, 2.0]));
        let y = tape.dot(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(&tape, x).data(), &[2.0, 4.0]);

        let c = tape.constant(Tensor::scalar(3.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(&tape, x).data(), &[0.0, 0.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        // f(x) = sum(x * x) + sum(x) -> 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row_vector(vec![0.5, -3.0]));
        let sq = tape.mul(x, x).unwrap();
        let a = tape.sum(sq);
        let b = tape.sum(x);
        let f = tape.add(a, b).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(&tape, x).data(), &[2.0, -5.0]);
    }

    #[test]
    fn broadcast_add_sums_bias_gradient() {
        let mut tape = Tape::new();
        let m = tape.param(Tensor::zeros(3, 2));
        let b = tape.param(Tensor::row_vector(vec![1.0, 2.0]));
        let s = tape.add(m, b).unwrap();
        assert_eq!(tape.value(s).row(2), &[1.0, 2.0]);
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn gather_and_slices_route_gradients() {
        let mut tape = Tape::new();
        let table = tape.param(t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let g = tape.gather_rows(table, &[2, 0, 2]).unwrap();
        let right = tape.slice_cols(g, 1, 1).unwrap();
        let last = tape.slice_rows(right, 2, 1).unwrap();
        assert_eq!(tape.value(last).item().unwrap(), 6.0);
        let s = tape.sum(right);
        let grads = tape.backward(s).unwrap();
        assert_eq!(
            grads.wrt(&tape, table).data(),
            &[0.0, 1.0, 0.0, 0.0, 0.0, 2.0]
        );
        assert!(matches!(
            tape.gather_rows(table, &[3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(1, 3));
        assert!(matches!(tape.normalize_rows(z), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.param(t(&[&[0.1, 0.7, -0.3], &[0.2, 0.9, 0.4]]));
            let b = tape.param(t(&[&[0.3], &[-0.8], &[0.5]]));
            let m = tape.matmul(a, b).unwrap();
            let s = tape.softmax_rows(m).unwrap();
            let l = tape.log(s);
            let out = tape.sum(l);
            tape.value(out).item().unwrap().to_bits()
        };
        assert_eq!(run(), run());
    }
}
