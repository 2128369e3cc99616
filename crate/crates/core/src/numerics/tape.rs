//! Reverse-mode gradient recording over [`Tensor2D`] values.
//!
//! A [`Tape`] lives for one forward pass. Every operation appends a node
//! holding its value and the indices of its inputs; [`Tape::backward`] walks
//! the nodes in reverse and accumulates adjoints. Parameter leaves remember
//! their [`ParamStore`] name so gradients can be written back afterwards.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::{sigmoid_scalar, softmax_rows_masked, Activation, Tensor2D, SIGMOID_CLAMP};
use crate::error::{GuardianError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Clamp(usize, f64, f64),
    Transpose(usize),
    Softmax(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<Option<usize>>),
    ConcatRows(Vec<usize>),
    Sum(usize),
    BceLogits(usize, Tensor2D),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor2D,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
    params: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2D> {
        self.grads[v.0].as_ref()
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, &idx) in &self.params {
            if let Some(g) = &self.grads[idx] {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, a: &Tensor2D, b: &Tensor2D) -> GuardianError {
    GuardianError::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
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

    fn push(&mut self, value: Tensor2D, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    /// Records a constant input (no gradient is reported for it).
    pub fn constant(&mut self, value: Tensor2D) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a named parameter from `store`. Reading the same name twice
    /// returns the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(idx) = self
            .nodes
            .iter()
            .position(|n| matches!(&n.op, Op::Param(p) if p == name))
        {
            return Ok(Var(idx));
        }
        let value = store
            .value(name)
            .ok_or_else(|| GuardianError::InvalidArgument(format!("unknown parameter {name}")))?
            .clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err("add_row", av, bv));
        }
        let mut value = av.clone();
        let cols = av.cols();
        for (i, v) in value.values_mut().iter_mut().enumerate() {
            *v += bv.values()[i % cols];
        }
        Ok(self.push(value, Op::AddRow(a.0, bias.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a.0, c))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::Offset(a.0))
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Var {
        let value = super::tensor::activation(kind, self.value(a));
        let op = match kind {
            Activation::Relu => Op::Relu(a.0),
            Activation::Sigmoid => Op::Sigmoid(a.0),
        };
        self.push(value, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(Activation::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a.0))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(a.0, lo, hi))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows_masked(self.value(a), None);
        self.push(value, Op::Softmax(a.0))
    }

    /// Row softmax in which columns with `mask[c] == false` get zero weight.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.cols() || !mask.iter().any(|&m| m) {
            return Err(GuardianError::InvalidArgument(format!(
                "softmax mask of length {} for {} columns",
                mask.len(),
                av.cols()
            )));
        }
        let value = softmax_rows_masked(av, Some(&mask));
        Ok(self.push(value, Op::Softmax(a.0)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(GuardianError::Shape {
                op: "slice_cols",
                left: av.shape(),
                right: (start, len),
            });
        }
        let value = av.slice_cols(start, len);
        Ok(self.push(value, Op::SliceCols(a.0, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Tensor2D::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows {
                return Err(GuardianError::Shape {
                    op: "concat_cols",
                    left: (rows, offset),
                    right: pv.shape(),
                });
            }
            for r in 0..rows {
                for c in 0..pv.cols() {
                    value.set(r, offset + c, pv.get(r, c));
                }
            }
            offset += pv.cols();
        }
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    /// Selects rows by index; `None` yields a zero row with no gradient path.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<Option<usize>>) -> Result<Var> {
        let av = self.value(a);
        if let Some(bad) = indices.iter().flatten().find(|&&i| i >= av.rows()) {
            return Err(GuardianError::Shape {
                op: "gather_rows",
                left: av.shape(),
                right: (*bad, 1),
            });
        }
        let value = av.gather_rows(&indices);
        Ok(self.push(value, Op::GatherRows(a.0, indices)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |p| self.value(*p).cols());
        let mut values = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != cols {
                return Err(GuardianError::Shape {
                    op: "concat_rows",
                    left: (values.len() / cols.max(1), cols),
                    right: pv.shape(),
                });
            }
            values.extend_from_slice(pv.values());
        }
        let rows = values.len().checked_div(cols).unwrap_or(0);
        let value = Tensor2D::new(rows, cols, values)?;
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    /// Sum of all elements as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor2D::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a.0))
    }

    /// Mean binary cross-entropy between `sigmoid(clamp(logits))` and 0/1
    /// targets, averaged over every entry. Returns a 1x1 tensor.
    pub fn bce_logits(&mut self, logits: Var, targets: Tensor2D) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(shape_err("bce_logits", lv, &targets));
        }
        let n = lv.len().max(1) as f64;
        let total: f64 = lv
            .values()
            .iter()
            .zip(targets.values())
            .map(|(&x, &a)| {
                let x = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
                // -log sigmoid(x) = softplus(-x), -log(1 - sigmoid(x)) = softplus(x)
                a * softplus(-x) + (1.0 - a) * softplus(x)
            })
            .sum();
        Ok(self.push(Tensor2D::scalar(total / n), Op::BceLogits(logits.0, targets)))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(GuardianError::InvalidArgument(format!(
                "backward requires a scalar output, got {:?}",
                out.shape()
            )));
        }
        if !out.is_finite() {
            return Err(GuardianError::NonFinite("backward seed".into()));
        }
        let mut grads: Vec<Option<Tensor2D>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor2D::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((name.clone(), i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, g: &Tensor2D, grads: &mut [Option<Tensor2D>]) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        let mut send = |i: usize, delta: Tensor2D| match &mut grads[i] {
            Some(acc) => acc.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                send(*a, g.matmul(&val(*b).transpose())?);
                send(*b, val(*a).transpose().matmul(g)?);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                send(*a, g.hadamard(val(*b))?);
                send(*b, g.hadamard(val(*a))?);
            }
            Op::AddRow(a, b) => {
                send(*a, g.clone());
                let mut col_sums = Tensor2D::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        col_sums.set(0, c, col_sums.get(0, c) + g.get(r, c));
                    }
                }
                send(*b, col_sums);
            }
            Op::Scale(a, c) => send(*a, g.scale(*c)),
            Op::Offset(a) => send(*a, g.clone()),
            Op::Relu(a) => send(*a, g.zip_with(val(*a), "relu'", |gv, x| if x > 0.0 { gv } else { 0.0 })?),
            Op::Sigmoid(a) => {
                let d = g.zip_with(val(*a), "sigmoid'", |gv, x| {
                    if x.abs() > SIGMOID_CLAMP {
                        0.0
                    } else {
                        let s = sigmoid_scalar(x);
                        gv * s * (1.0 - s)
                    }
                })?;
                send(*a, d);
            }
            Op::Exp(a) => send(*a, g.hadamard(&node.value)?),
            Op::Clamp(a, lo, hi) => {
                let d = g.zip_with(val(*a), "clamp'", |gv, x| if x < *lo || x > *hi { 0.0 } else { gv })?;
                send(*a, d);
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Softmax(a) => {
                // dx_j = s_j (g_j - sum_k g_k s_k), row by row; masked s_j = 0.
                let s = &node.value;
                let mut d = Tensor2D::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    let dot: f64 = g.row(r).iter().zip(s.row(r)).map(|(x, y)| x * y).sum();
                    for c in 0..s.cols() {
                        d.set(r, c, s.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                send(*a, d);
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let mut d = Tensor2D::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        d.set(r, start + c, g.get(r, c));
                    }
                }
                send(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    send(p, g.slice_cols(offset, w));
                    offset += w;
                }
            }
            Op::GatherRows(a, indices) => {
                let src = val(*a);
                let mut d = Tensor2D::zeros(src.rows(), src.cols());
                for (dst, idx) in indices.iter().enumerate() {
                    if let Some(i) = idx {
                        for c in 0..src.cols() {
                            d.set(*i, c, d.get(*i, c) + g.get(dst, c));
                        }
                    }
                }
                send(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).rows();
                    let idx: Vec<Option<usize>> = (offset..offset + n).map(Some).collect();
                    send(p, g.gather_rows(&idx));
                    offset += n;
                }
            }
            Op::Sum(a) => {
                let src = val(*a);
                send(*a, Tensor2D::filled(src.rows(), src.cols(), g.item()));
            }
            Op::BceLogits(a, targets) => {
                let src = val(*a);
                let n = src.len().max(1) as f64;
                let scale = g.item() / n;
                let d = src.zip_with(targets, "bce'", |x, t| {
                    if x.abs() > SIGMOID_CLAMP {
                        0.0
                    } else {
                        scale * (sigmoid_scalar(x) - t)
                    }
                })?;
                send(*a, d);
            }
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2D {
        Tensor2D::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Central differences over every entry of every constant leaf.
    fn numeric_grad(build: &dyn Fn(&mut Tape, &[Tensor2D]) -> Var, inputs: &[Tensor2D], which: usize) -> Tensor2D {
        let eps = 1e-6;
        let mut out = Tensor2D::zeros(inputs[which].rows(), inputs[which].cols());
        for i in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which].values_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[which].values_mut()[i] -= eps;
            let mut tp = Tape::new();
            let fp = build(&mut tp, &plus);
            let mut tm = Tape::new();
            let fm = build(&mut tm, &minus);
            out.values_mut()[i] = (tp.value(fp).item() - tm.value(fm).item()) / (2.0 * eps);
        }
        out
    }

    fn check(build: &dyn Fn(&mut Tape, &[Tensor2D]) -> Var, inputs: &[Tensor2D]) {
        let mut tape = Tape::new();
        let out = build(&mut tape, inputs);
        let grads = tape.backward(out).unwrap();
        for (which, _) in inputs.iter().enumerate() {
            let analytic = grads.get(Var(which)).cloned().unwrap_or_else(|| Tensor2D::zeros(inputs[which].rows(), inputs[which].cols()));
            let numeric = numeric_grad(build, inputs, which);
            assert!(
                analytic.max_abs_diff(&numeric) < 1e-6,
                "input {which}: analytic {analytic:?} numeric {numeric:?}"
            );
        }
    }

    #[test]
    fn matmul_relu_sum_gradient() {
        let build = |tape: &mut Tape, xs: &[Tensor2D]| {
            let a = tape.constant(xs[0].clone());
            let b = tape.constant(xs[1].clone());
            let m = tape.matmul(a, b).unwrap();
            let r = tape.relu(m);
            let sq = tape.mul(r, r).unwrap();
            tape.sum(sq)
        };
        check(&build, &[t(&[&[0.3, -1.2], &[0.7, 0.4]]), t(&[&[1.1, -0.5, 0.2], &[0.3, 0.9, -0.8]])]);
    }

    #[test]
    fn masked_softmax_attention_gradient() {
        let build = |tape: &mut Tape, xs: &[Tensor2D]| {
            let q = tape.constant(xs[0].clone());
            let k = tape.constant(xs[1].clone());
            let kt = tape.transpose(k);
            let s = tape.matmul(q, kt).unwrap();
            let w = tape.softmax_rows_masked(s, vec![true, false, true]).unwrap();
            let v = tape.matmul(w, k).unwrap();
            let e = tape.exp(v);
            let c = tape.slice_cols(e, 1, 1).unwrap();
            tape.sum(c)
        };
        check(&build, &[t(&[&[0.2, -0.4], &[1.0, 0.5]]), t(&[&[0.1, 0.3], &[-0.7, 0.2], &[0.5, 0.5]])]);
    }

    #[test]
    fn structural_ops_gradient() {
        let build = |tape: &mut Tape, xs: &[Tensor2D]| {
            let a = tape.constant(xs[0].clone());
            let b = tape.constant(xs[1].clone());
            let g = tape.gather_rows(a, vec![Some(1), None, Some(1), Some(0)]).unwrap();
            let rows = tape.concat_rows(&[g, a]).unwrap();
            let biased = tape.add_row(rows, b).unwrap();
            let cols = tape.concat_cols(&[biased, rows]).unwrap();
            let c = tape.clamp(cols, -0.5, 0.9);
            let s = tape.activation(Activation::Sigmoid, c);
            let o = tape.offset(s, -0.25);
            let sc = tape.scale(o, 3.0);
            let sq = tape.mul(sc, sc).unwrap();
            tape.sum(sq)
        };
        check(&build, &[t(&[&[0.1, -0.2], &[0.4, 0.35]]), t(&[&[0.05, -0.1]])]);
    }

    #[test]
    fn bce_logits_gradient_and_value() {
        let targets = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let build = move |tape: &mut Tape, xs: &[Tensor2D]| {
            let l = tape.constant(xs[0].clone());
            tape.bce_logits(l, targets.clone()).unwrap()
        };
        check(&build, &[t(&[&[0.3, -1.0], &[2.0, 0.1]])]);

        let mut tape = Tape::new();
        let z = tape.constant(Tensor2D::zeros(3, 3));
        let l = tape.bce_logits(z, Tensor2D::identity(3)).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor2D::zeros(2, 2));
        assert!(tape.backward(a).is_err());
    }
}
