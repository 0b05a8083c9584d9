//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A `Tape` records every operation during the forward pass; `backward`
//! replays the tape in reverse, accumulating adjoints. Nodes are appended in
//! dependency order, so a single reverse sweep visits each node exactly once.
//! Adjoints accumulate additively, which is what makes fan-out (one belief
//! feeding every later value term of a reasoning chain) come out right.
//!
//! The tape is rebuilt from scratch on every optimization step. No graph
//! caching, no dynamic shapes; all arithmetic is `f64`.

use std::collections::BTreeMap;

use crate::diffcore::mat::Mat;
use crate::error::{Result, SspgError};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
#[allow(dead_code)] // Shift's constant and StopGrad's parent exist for Debug output.
enum Op {
    /// Source node. `param` names a trainable parameter whose gradient is
    /// collected by `backward`; `None` means constant input.
    Leaf { param: Option<String> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    DivElem(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// rows x cols plus a 1 x cols bias broadcast over rows.
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Atanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Softplus(NodeId),
    Sqrt(NodeId),
    Clamp(NodeId, f64, f64),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// rows x cols -> rows x 1, summing across columns.
    RowSum(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols { src: NodeId, start: usize, len: usize },
    /// rows x cols -> rows x 1 stable log-sum-exp across columns.
    LogSumExpRows(NodeId),
    Transpose(NodeId),
    /// out[i] = src[indices[i]]; duplicate indices allowed.
    GatherRows { src: NodeId, indices: Vec<usize> },
    /// Identity forward, blocks the backward pass.
    StopGrad(NodeId),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is collected for it.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Trainable leaf; `backward` reports its adjoint under `name`.
    /// The same name may be bound more than once on one tape (e.g. a weight
    /// used by several chain steps); adjoints of all bindings are summed.
    pub fn param(&mut self, name: &str, value: Mat) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                param: Some(name.to_string()),
            },
        )
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, what: &str) -> Result<(Mat, Mat)> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(SspgError::dimension(
                what,
                format!("{:?}", va.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        Ok((va.clone(), vb.clone()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = self.binary_same_shape(a, b, "add")?;
        Ok(self.push(va.zip_map(&vb, |x, y| x + y), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = self.binary_same_shape(a, b, "sub")?;
        Ok(self.push(va.zip_map(&vb, |x, y| x - y), Op::Sub(a, b)))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = self.binary_same_shape(a, b, "mul_elem")?;
        Ok(self.push(va.zip_map(&vb, |x, y| x * y), Op::MulElem(a, b)))
    }

    pub fn div_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = self.binary_same_shape(a, b, "div_elem")?;
        Ok(self.push(va.zip_map(&vb, |x, y| x / y), Op::DivElem(a, b)))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| k * x);
        self.push(v, Op::Scale(a, k))
    }

    pub fn shift(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x + k);
        self.push(v, Op::Shift(a, k))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(SspgError::dimension(
                "add_row",
                format!("(1, {})", va.cols()),
                format!("{:?}", vb.shape()),
            ));
        }
        let mut out = va.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let v = out.get(i, j) + vb.get(0, j);
                out.set(i, j, v);
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn atanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::atanh);
        self.push(v, Op::Atanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    /// `ln(1 + exp(x))`, computed as `max(x, 0) + ln(1 + exp(-|x|))` so it
    /// never overflows.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(v, Op::Softplus(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// Values pass through inside `(lo, hi)`; the gradient is zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Mat::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let n = (v.rows() * v.cols()) as f64;
        let s: f64 = v.data().iter().sum::<f64>() / n;
        self.push(Mat::scalar(s), Op::MeanAll(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let mut out = Mat::zeros(v.rows(), 1);
        for i in 0..v.rows() {
            out.set(i, 0, v.row(i).iter().sum());
        }
        self.push(out, Op::RowSum(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rows() != vb.rows() {
            return Err(SspgError::dimension(
                "concat_cols",
                format!("{} rows", va.rows()),
                format!("{} rows", vb.rows()),
            ));
        }
        let mut out = Mat::zeros(va.rows(), va.cols() + vb.cols());
        for i in 0..va.rows() {
            for j in 0..va.cols() {
                out.set(i, j, va.get(i, j));
            }
            for j in 0..vb.cols() {
                out.set(i, va.cols() + j, vb.get(i, j));
            }
        }
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = &self.nodes[src.0].value;
        if start + len > v.cols() {
            return Err(SspgError::dimension(
                "slice_cols",
                format!("start+len <= {}", v.cols()),
                format!("{}+{}", start, len),
            ));
        }
        let mut out = Mat::zeros(v.rows(), len);
        for i in 0..v.rows() {
            for j in 0..len {
                out.set(i, j, v.get(i, start + j));
            }
        }
        Ok(self.push(out, Op::SliceCols { src, start, len }))
    }

    /// Stable per-row log-sum-exp. The max shift cancels in the derivative,
    /// which is exactly the per-row softmax.
    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let mut out = Mat::zeros(v.rows(), 1);
        for i in 0..v.rows() {
            let row = v.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                out.set(i, 0, f64::NEG_INFINITY);
                continue;
            }
            let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            out.set(i, 0, m + s.ln());
        }
        self.push(out, Op::LogSumExpRows(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let mut out = Mat::zeros(v.cols(), v.rows());
        for i in 0..v.rows() {
            for j in 0..v.cols() {
                out.set(j, i, v.get(i, j));
            }
        }
        self.push(out, Op::Transpose(a))
    }

    /// Reindex rows: `out[i] = src[indices[i]]`. Gradients scatter-add back
    /// through duplicate indices.
    pub fn gather_rows(&mut self, src: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let v = &self.nodes[src.0].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.rows()) {
            return Err(SspgError::dimension(
                "gather_rows",
                format!("indices < {}", v.rows()),
                format!("{bad}"),
            ));
        }
        let mut out = Mat::zeros(indices.len(), v.cols());
        for (i, &src_row) in indices.iter().enumerate() {
            for j in 0..v.cols() {
                out.set(i, j, v.get(src_row, j));
            }
        }
        Ok(self.push(out, Op::GatherRows { src, indices }))
    }

    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.clone();
        self.push(v, Op::StopGrad(a))
    }

    /// Reverse sweep from a scalar `root`. Returns the gradients of every
    /// trainable leaf, keyed by parameter name, with duplicate bindings of
    /// the same name summed. Can be called repeatedly on one tape (each call
    /// starts from fresh adjoints), which is how per-term gradient audits
    /// are done.
    pub fn backward(&mut self, root: NodeId) -> Result<BTreeMap<String, Mat>> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(SspgError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut adjoints: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        adjoints[root.0] = Some(Mat::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let grad = match adjoints[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf { .. } => {
                    adjoints[idx] = Some(grad);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoints, a, &grad, 1.0);
                    self.accumulate(&mut adjoints, b, &grad, 1.0);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adjoints, a, &grad, 1.0);
                    self.accumulate(&mut adjoints, b, &grad, -1.0);
                }
                Op::MulElem(a, b) => {
                    let ga = grad.zip_map(&self.nodes[b.0].value, |g, y| g * y);
                    let gb = grad.zip_map(&self.nodes[a.0].value, |g, x| g * x);
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                    self.accumulate(&mut adjoints, b, &gb, 1.0);
                }
                Op::DivElem(a, b) => {
                    let vb = &self.nodes[b.0].value;
                    let ga = grad.zip_map(vb, |g, y| g / y);
                    let out = &self.nodes[idx].value;
                    let gb_part = grad.zip_map(out, |g, c| g * c);
                    let gb = gb_part.zip_map(vb, |gc, y| -gc / y);
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                    self.accumulate(&mut adjoints, b, &gb, 1.0);
                }
                Op::Neg(a) => self.accumulate(&mut adjoints, a, &grad, -1.0),
                Op::Scale(a, k) => self.accumulate(&mut adjoints, a, &grad, k),
                Op::Shift(a, _) => self.accumulate(&mut adjoints, a, &grad, 1.0),
                Op::MatMul(a, b) => {
                    let ga = grad.matmul_nt(&self.nodes[b.0].value)?;
                    let gb = self.nodes[a.0].value.matmul_tn(&grad)?;
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                    self.accumulate(&mut adjoints, b, &gb, 1.0);
                }
                Op::AddRow(a, bias) => {
                    self.accumulate(&mut adjoints, a, &grad, 1.0);
                    let mut gb = Mat::zeros(1, grad.cols());
                    for i in 0..grad.rows() {
                        for j in 0..grad.cols() {
                            gb.set(0, j, gb.get(0, j) + grad.get(i, j));
                        }
                    }
                    self.accumulate(&mut adjoints, bias, &gb, 1.0);
                }
                Op::Relu(a) => {
                    // Subgradient 0 at the kink.
                    let ga = grad.zip_map(&self.nodes[a.0].value, |g, x| if x > 0.0 { g } else { 0.0 });
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                }
                Op::Tanh(a) => {
                    let ga = grad.zip_map(&self.nodes[idx].value, |g, y| g * (1.0 - y * y));
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                }
                Op::Atanh(a) => {
                    let ga = grad.zip_map(&self.nodes[a.0].value, |g, x| g / (1.0 - x * x));
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                }
                Op::Exp(a) => {
                    let ga = grad.zip_map(&self.nodes[idx].value, |g, y| g * y);
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                }
                Op::Ln(a) => {
                    let ga = grad.zip_map(&self.nodes[a.0].value, |g, x| g / x);
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                }
                Op::Softplus(a) => {
                    // d/dx softplus = sigmoid(x).
                    let ga = grad.zip_map(&self.nodes[a.0].value, |g, x| g / (1.0 + (-x).exp()));
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                }
                Op::Sqrt(a) => {
                    // Zero subgradient at zero keeps ensemble-spread terms
                    // finite when all members agree.
                    let ga = grad.zip_map(&self.nodes[idx].value, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 });
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = grad.zip_map(&self.nodes[a.0].value, |g, x| if x > lo && x < hi { g } else { 0.0 });
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                }
                Op::SumAll(a) => {
                    let g = grad.get(0, 0);
                    let shape = self.nodes[a.0].value.shape();
                    let ga = Mat::filled(shape.0, shape.1, g);
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                }
                Op::MeanAll(a) => {
                    let shape = self.nodes[a.0].value.shape();
                    let n = (shape.0 * shape.1) as f64;
                    let ga = Mat::filled(shape.0, shape.1, grad.get(0, 0) / n);
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                }
                Op::RowSum(a) => {
                    let shape = self.nodes[a.0].value.shape();
                    let mut ga = Mat::zeros(shape.0, shape.1);
                    for i in 0..shape.0 {
                        for j in 0..shape.1 {
                            ga.set(i, j, grad.get(i, 0));
                        }
                    }
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].value.cols();
                    let cb = self.nodes[b.0].value.cols();
                    let rows = grad.rows();
                    let mut ga = Mat::zeros(rows, ca);
                    let mut gb = Mat::zeros(rows, cb);
                    for i in 0..rows {
                        for j in 0..ca {
                            ga.set(i, j, grad.get(i, j));
                        }
                        for j in 0..cb {
                            gb.set(i, j, grad.get(i, ca + j));
                        }
                    }
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                    self.accumulate(&mut adjoints, b, &gb, 1.0);
                }
                Op::SliceCols { src, start, len } => {
                    let shape = self.nodes[src.0].value.shape();
                    let mut gs = Mat::zeros(shape.0, shape.1);
                    for i in 0..shape.0 {
                        for j in 0..len {
                            gs.set(i, start + j, grad.get(i, j));
                        }
                    }
                    self.accumulate(&mut adjoints, src, &gs, 1.0);
                }
                Op::LogSumExpRows(a) => {
                    let va = &self.nodes[a.0].value;
                    let out = &self.nodes[idx].value;
                    let mut ga = Mat::zeros(va.rows(), va.cols());
                    for i in 0..va.rows() {
                        let lse = out.get(i, 0);
                        if !lse.is_finite() {
                            continue;
                        }
                        for j in 0..va.cols() {
                            ga.set(i, j, grad.get(i, 0) * (va.get(i, j) - lse).exp());
                        }
                    }
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                }
                Op::Transpose(a) => {
                    let mut ga = Mat::zeros(grad.cols(), grad.rows());
                    for i in 0..grad.rows() {
                        for j in 0..grad.cols() {
                            ga.set(j, i, grad.get(i, j));
                        }
                    }
                    self.accumulate(&mut adjoints, a, &ga, 1.0);
                }
                Op::GatherRows { src, indices } => {
                    let shape = self.nodes[src.0].value.shape();
                    let mut gs = Mat::zeros(shape.0, shape.1);
                    for (i, &src_row) in indices.iter().enumerate() {
                        for j in 0..grad.cols() {
                            gs.set(src_row, j, gs.get(src_row, j) + grad.get(i, j));
                        }
                    }
                    self.accumulate(&mut adjoints, src, &gs, 1.0);
                }
                Op::StopGrad(_) => {}
            }
        }

        let mut grads = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(adj) = &adjoints[idx] {
                    grads
                        .entry(name.clone())
                        .and_modify(|g: &mut Mat| g.add_scaled(adj, 1.0))
                        .or_insert_with(|| adj.clone());
                }
            }
        }
        Ok(grads)
    }

    fn accumulate(&self, adjoints: &mut [Option<Mat>], target: NodeId, grad: &Mat, scale: f64) {
        match &mut adjoints[target.0] {
            Some(acc) => acc.add_scaled(grad, scale),
            None => {
                let mut g = Mat::zeros(grad.rows(), grad.cols());
                g.add_scaled(grad, scale);
                adjoints[target.0] = Some(g);
            }
        }
    }
}

/// Worst-coordinate report from [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
}

/// Compare tape gradients against central finite differences.
///
/// `build` must construct the full graph from scratch for a given parameter
/// assignment and return the scalar root; it is re-invoked with perturbed
/// parameters, so any noise it consumes must be baked in as constants. The
/// relative error uses `|fd - analytic| / max(|fd|, |analytic|, floor)`.
pub fn grad_check(
    build: &dyn Fn(&mut Tape, &BTreeMap<String, Mat>) -> Result<NodeId>,
    params: &BTreeMap<String, Mat>,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let root = build(&mut tape, params)?;
    let grads = tape.backward(root)?;

    let eval = |ps: &BTreeMap<String, Mat>| -> Result<f64> {
        let mut t = Tape::new();
        let r = build(&mut t, ps)?;
        Ok(t.value(r).get(0, 0))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (name, p) in params {
        for i in 0..p.rows() {
            for j in 0..p.cols() {
                let mut plus = params.clone();
                plus.get_mut(name).unwrap().set(i, j, p.get(i, j) + h);
                let mut minus = params.clone();
                minus.get_mut(name).unwrap().set(i, j, p.get(i, j) - h);
                let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
                let an = grads.get(name).map(|g| g.get(i, j)).unwrap_or(0.0);
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(floor);
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = format!("{name}[{i},{j}]: analytic {an} vs fd {fd}");
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(tape: &mut Tape, root: NodeId, name: &str) -> Mat {
        tape.backward(root).unwrap().remove(name).unwrap()
    }

    #[test]
    fn square_gradient() {
        // f(w) = w^2 at w = 3 -> df/dw = 6
        let mut tape = Tape::new();
        let w = tape.param("w", Mat::scalar(3.0));
        let f = tape.mul_elem(w, w).unwrap();
        let g = grad_of(&mut tape, f, "w");
        assert_eq!(g.get(0, 0), 6.0);
    }

    #[test]
    fn inactive_relu_gradient_is_zero() {
        // f(w) = relu(-w) at w = 1 -> df/dw = 0
        let mut tape = Tape::new();
        let w = tape.param("w", Mat::scalar(1.0));
        let neg = tape.neg(w);
        let f = tape.relu(neg);
        let g = grad_of(&mut tape, f, "w");
        assert_eq!(g.get(0, 0), 0.0);
    }

    #[test]
    fn fanout_accumulates() {
        // f = w*w + w -> df/dw = 2w + 1
        let mut tape = Tape::new();
        let w = tape.param("w", Mat::scalar(2.0));
        let sq = tape.mul_elem(w, w).unwrap();
        let f = tape.add(sq, w).unwrap();
        let g = grad_of(&mut tape, f, "w");
        assert_eq!(g.get(0, 0), 5.0);
    }

    #[test]
    fn backward_of_sum_is_sum_of_backwards() {
        // Linearity of adjoints: grad(f + g) = grad(f) + grad(g).
        let build = |tape: &mut Tape| -> (NodeId, NodeId, NodeId) {
            let w = tape.param("w", Mat::from_vec(1, 2, vec![0.3, -0.7]));
            let t = tape.tanh(w);
            let f = tape.sum_all(t);
            let e = tape.exp(w);
            let g = tape.sum_all(e);
            (f, g, w)
        };
        let mut tape = Tape::new();
        let (f, g, _) = build(&mut tape);
        let total = tape.add(f, g).unwrap();
        let g_total = grad_of(&mut tape, total, "w");

        let mut tape2 = Tape::new();
        let (f2, g2, _) = build(&mut tape2);
        let gf = grad_of(&mut tape2, f2, "w");
        let gg = grad_of(&mut tape2, g2, "w");
        for j in 0..2 {
            let sum = gf.get(0, j) + gg.get(0, j);
            assert!((g_total.get(0, j) - sum).abs() < 1e-15);
        }
    }

    #[test]
    fn stop_grad_blocks() {
        let mut tape = Tape::new();
        let w = tape.param("w", Mat::scalar(2.0));
        let frozen = tape.stop_grad(w);
        let f = tape.mul_elem(w, frozen).unwrap();
        let g = grad_of(&mut tape, f, "w");
        // d/dw [w * const(2)] = 2, not 4.
        assert_eq!(g.get(0, 0), 2.0);
    }

    #[test]
    fn non_scalar_root_is_a_contract_error() {
        let mut tape = Tape::new();
        let w = tape.param("w", Mat::from_vec(1, 2, vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(SspgError::Contract(_))));
    }

    #[test]
    fn duplicate_param_bindings_sum() {
        // Bind the same name twice; grads must add across bindings.
        let mut tape = Tape::new();
        let w1 = tape.param("w", Mat::scalar(3.0));
        let w2 = tape.param("w", Mat::scalar(3.0));
        let f = tape.mul_elem(w1, w2).unwrap();
        let g = grad_of(&mut tape, f, "w");
        assert_eq!(g.get(0, 0), 6.0);
    }

    #[test]
    fn log_sum_exp_matches_naive_and_softmax_grad() {
        let mut tape = Tape::new();
        let x = tape.param("x", Mat::from_vec(1, 3, vec![-1.0, 0.5, 2.0]));
        let lse = tape.log_sum_exp_rows(x);
        let naive: f64 = [-1.0f64, 0.5, 2.0].iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((tape.value(lse).get(0, 0) - naive).abs() < 1e-12);
        let g = grad_of(&mut tape, lse, "x");
        let z: f64 = [-1.0f64, 0.5, 2.0].iter().map(|v| v.exp()).sum();
        for (j, v) in [-1.0f64, 0.5, 2.0].iter().enumerate() {
            assert!((g.get(0, j) - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_difference_over_op_zoo() {
        // Exercise every smooth op in one graph against central differences.
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Mat::from_vec(2, 3, vec![0.3, -0.2, 0.45, 0.11, -0.6, 0.25]));
        params.insert("b".to_string(), Mat::from_vec(1, 3, vec![0.05, -0.1, 0.2]));
        params.insert("u".to_string(), Mat::from_vec(3, 2, vec![0.4, -0.3, 0.2, 0.6, -0.5, 0.1]));

        let build = |tape: &mut Tape, ps: &BTreeMap<String, Mat>| -> Result<NodeId> {
            let x = tape.constant(Mat::from_vec(4, 2, vec![0.1, -0.4, 0.8, 0.3, -0.7, 0.2, 0.5, -0.1]));
            let w = tape.param("w", ps["w"].clone());
            let b = tape.param("b", ps["b"].clone());
            let u = tape.param("u", ps["u"].clone());
            let h = tape.matmul(x, w)?;
            let h = tape.add_row(h, b)?;
            let h = tape.tanh(h);
            let h = tape.matmul(h, u)?;
            let e = tape.exp(h);
            let one = tape.shift(e, 1.0);
            let l = tape.ln(one);
            let sq = tape.mul_elem(l, l)?;
            let lo = tape.scale(sq, 0.5);
            let s = tape.row_sum(lo);
            let lse_in = tape.concat_cols(s, lo)?;
            let lse = tape.log_sum_exp_rows(lse_in);
            let denom = tape.constant(Mat::filled(4, 1, 1.3));
            let d = tape.div_elem(lse, denom)?;
            Ok(tape.mean_all(d))
        };
        let report = grad_check(&build, &params, 1e-5, 1e-8).unwrap();
        assert!(report.max_rel_err <= 1e-6, "{}", report.worst);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let w = tape.param("w", Mat::from_vec(1, 4, vec![0.1, 0.2, 0.3, 0.4]));
            let t = tape.tanh(w);
            let e = tape.exp(t);
            let m = tape.mean_all(e);
            tape.value(m).get(0, 0)
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
