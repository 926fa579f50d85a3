//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Every forward operation appends one node holding its value, its opcode
//! and parent indices. Because parents always precede children, a single
//! reverse walk from the loss node accumulates exact gradients. Constants
//! and anything behind a stop-gradient never receive accumulators, so
//! frozen branches cost nothing and contribute nothing.

use std::rc::Rc;

use crate::error::{DlfmError, Result};
use crate::gradcore::svd::{svd_backward, svd_thin, SvdFactors};
use crate::gradcore::tensor::Tensor;

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    DivElem(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    LayerNorm { x: NodeId, eps: f64 },
    StopGrad,
    SvdU { a: NodeId, factors: Rc<SvdFactors> },
    SvdS { a: NodeId, factors: Rc<SvdFactors> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient accumulators produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    /// How many SVD backward calls hit the near-degenerate clamp.
    pub degenerate_svd_events: usize,
}

impl Gradients {
    /// Gradient for a node, if any flowed into it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a node, or zeros of the given shape.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Registers a differentiable input. Panics on non-finite values,
    /// which are never legal on the tape.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        assert!(value.all_finite(), "var: non-finite input");
        self.push(value, Op::Leaf, true)
    }

    /// Registers a fixed input that will not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        assert!(value.all_finite(), "constant: non-finite input");
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn emit(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(DlfmError::NonFinite { op: name });
        }
        Ok(self.push(value, op, needs_grad))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.emit(value, Op::Add(a, b), needs, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.emit(value, Op::Sub(a, b), needs, "sub")
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul_elem(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.emit(value, Op::MulElem(a, b), needs, "mul_elem")
    }

    pub fn div_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), "div_elem", |x, y| x / y)?;
        let needs = self.needs(a) || self.needs(b);
        self.emit(value, Op::DivElem(a, b), needs, "div_elem")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.emit(value, Op::Matmul(a, b), needs, "matmul")
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let value = self.value(a).scale(k);
        let needs = self.needs(a);
        self.emit(value, Op::Scale(a, k), needs, "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let value = self.value(a).map(|v| v + k);
        let needs = self.needs(a);
        self.emit(value, Op::AddScalar(a), needs, "add_scalar")
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let value = self.value(a).reshape(rows, cols)?;
        let needs = self.needs(a);
        self.emit(value, Op::Reshape(a), needs, "reshape")
    }

    /// Full reduction to a 1x1 scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.emit(value, Op::Sum(a), needs, "sum")
    }

    /// Mean over all entries, built from sum and scale.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(f64::abs);
        let needs = self.needs(a);
        self.emit(value, Op::Abs(a), needs, "abs")
    }

    /// max(0, x) elementwise.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| v.max(0.0));
        let needs = self.needs(a);
        self.emit(value, Op::Relu(a), needs, "relu")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(f64::tanh);
        let needs = self.needs(a);
        self.emit(value, Op::Tanh(a), needs, "tanh")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.needs(a);
        self.emit(value, Op::Sigmoid(a), needs, "sigmoid")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(f64::exp);
        let needs = self.needs(a);
        self.emit(value, Op::Exp(a), needs, "exp")
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(f64::sqrt);
        let needs = self.needs(a);
        self.emit(value, Op::Sqrt(a), needs, "sqrt")
    }

    /// Normalizes all entries to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let t = self.value(x);
        let n = t.len() as f64;
        let mu = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let denom = (var + eps).sqrt();
        let value = t.map(|v| (v - mu) / denom);
        let needs = self.needs(x);
        self.emit(value, Op::LayerNorm { x, eps }, needs, "layer_norm")
    }

    /// Identity in value, opaque to gradients.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(value, Op::StopGrad, false)
    }

    /// Thin SVD of a matrix node. Returns the `u` node (r x k) and the
    /// singular-value node (1 x k); both route gradients back to `a`.
    pub fn svd(&mut self, a: NodeId) -> Result<(NodeId, NodeId)> {
        let factors = Rc::new(svd_thin(self.value(a))?);
        let needs = self.needs(a);
        let u = self.emit(
            factors.u.clone(),
            Op::SvdU { a, factors: Rc::clone(&factors) },
            needs,
            "svd",
        )?;
        let s = self.emit(factors.s_row(), Op::SvdS { a, factors }, needs, "svd")?;
        Ok((u, s))
    }

    /// Convenience: Frobenius inner product of two equal-shape nodes.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let prod = self.mul_elem(a, b)?;
        self.sum(prod)
    }

    /// Reverse accumulation from a scalar loss node. Returns one gradient
    /// per reachable differentiable node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.shape() != (1, 1) {
            return Err(DlfmError::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be 1x1, got {:?}", loss_value.shape()),
            });
        }
        if !self.nodes[loss.0].needs_grad {
            // A loss built purely from constants has zero gradient
            // everywhere; return an empty accumulator set.
            return Ok(Gradients {
                grads: vec![None; self.nodes.len()],
                degenerate_svd_events: 0,
            });
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut degenerate = 0usize;

        for id in (0..=loss.0).rev() {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            if !g.all_finite() {
                return Err(DlfmError::NonFinite { op: "backward" });
            }
            match &self.nodes[id].op {
                Op::Leaf | Op::StopGrad => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone())?;
                    self.accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone())?;
                    self.accumulate(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::MulElem(a, b) => {
                    let ga = g.mul_elem(self.value(*b))?;
                    let gb = g.mul_elem(self.value(*a))?;
                    self.accumulate(&mut grads, *a, ga)?;
                    self.accumulate(&mut grads, *b, gb)?;
                }
                Op::DivElem(a, b) => {
                    let bv = self.value(*b);
                    let ga = g.zip(bv, "div_elem", |gi, bi| gi / bi)?;
                    let av = self.value(*a);
                    let gb = Tensor::from_fn(bv.rows(), bv.cols(), |r, c| {
                        -g.at(r, c) * av.at(r, c) / (bv.at(r, c) * bv.at(r, c))
                    });
                    self.accumulate(&mut grads, *a, ga)?;
                    self.accumulate(&mut grads, *b, gb)?;
                }
                Op::Matmul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    let gb = self.value(*a).transpose().matmul(&g)?;
                    self.accumulate(&mut grads, *a, ga)?;
                    self.accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(a, k) => {
                    self.accumulate(&mut grads, *a, g.scale(*k))?;
                }
                Op::AddScalar(a) => {
                    self.accumulate(&mut grads, *a, g)?;
                }
                Op::Reshape(a) => {
                    let pv = self.value(*a);
                    self.accumulate(&mut grads, *a, g.reshape(pv.rows(), pv.cols())?)?;
                }
                Op::Sum(a) => {
                    let pv = self.value(*a);
                    let gs = g.scalar_value()?;
                    self.accumulate(&mut grads, *a, Tensor::filled(pv.rows(), pv.cols(), gs))?;
                }
                Op::Abs(a) => {
                    // Subgradient 0 at the kink.
                    let gp = g.zip(self.value(*a), "abs", |gi, xi| {
                        if xi > 0.0 {
                            gi
                        } else if xi < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })?;
                    self.accumulate(&mut grads, *a, gp)?;
                }
                Op::Relu(a) => {
                    let gp = g.zip(self.value(*a), "relu", |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                    self.accumulate(&mut grads, *a, gp)?;
                }
                Op::Tanh(a) => {
                    let gp = g.zip(&self.nodes[id].value, "tanh", |gi, yi| gi * (1.0 - yi * yi))?;
                    self.accumulate(&mut grads, *a, gp)?;
                }
                Op::Sigmoid(a) => {
                    let gp = g.zip(&self.nodes[id].value, "sigmoid", |gi, yi| gi * yi * (1.0 - yi))?;
                    self.accumulate(&mut grads, *a, gp)?;
                }
                Op::Exp(a) => {
                    let gp = g.zip(&self.nodes[id].value, "exp", |gi, yi| gi * yi)?;
                    self.accumulate(&mut grads, *a, gp)?;
                }
                Op::Sqrt(a) => {
                    let gp = g.zip(&self.nodes[id].value, "sqrt", |gi, yi| gi * 0.5 / yi)?;
                    self.accumulate(&mut grads, *a, gp)?;
                }
                Op::LayerNorm { x, eps } => {
                    let xv = self.value(*x);
                    let n = xv.len() as f64;
                    let mu = xv.sum() / n;
                    let var = xv.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let denom = (var + eps).sqrt();
                    let y = &self.nodes[id].value;
                    let g_mean = g.sum() / n;
                    let gy_mean = g.dot(y)? / n;
                    let gp = Tensor::from_fn(xv.rows(), xv.cols(), |r, c| {
                        (g.at(r, c) - g_mean - y.at(r, c) * gy_mean) / denom
                    });
                    self.accumulate(&mut grads, *x, gp)?;
                }
                Op::SvdU { a, factors } => {
                    let k = factors.s.len();
                    let out = svd_backward(factors, &g, &Tensor::zeros(1, k))?;
                    if out.degenerate {
                        degenerate += 1;
                    }
                    self.accumulate(&mut grads, *a, out.grad_a)?;
                }
                Op::SvdS { a, factors } => {
                    let zeros_u = Tensor::zeros(factors.u.rows(), factors.u.cols());
                    let out = svd_backward(factors, &zeros_u, &g)?;
                    self.accumulate(&mut grads, *a, out.grad_a)?;
                }
            }
        }

        Ok(Gradients { grads, degenerate_svd_events: degenerate })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], parent: NodeId, contribution: Tensor) -> Result<()> {
        if !self.nodes[parent.0].needs_grad {
            return Ok(());
        }
        match &mut grads[parent.0] {
            Some(existing) => existing.add_scaled_assign(&contribution, 1.0)?,
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }
}

/// Compares reverse-mode gradients of a scalar-valued tape program against
/// central finite differences at every coordinate of `x`.
///
/// Returns the maximum relative error, with denominators floored at 1e-8
/// so coordinates where both gradients vanish report zero error. The
/// builder `f` is re-run on perturbed copies of `x`; branches that must
/// stay frozen during differencing should be captured as constants inside
/// `f` rather than derived from the variable node.
pub fn check_gradients<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(DlfmError::InvalidInput("check_gradients: step must be positive".into()));
    }

    let mut tape = Tape::new();
    let xid = tape.var(x.clone());
    let loss = f(&mut tape, xid)?;
    if tape.value(loss).shape() != (1, 1) {
        return Err(DlfmError::ShapeMismatch {
            op: "check_gradients",
            detail: format!("loss must be 1x1, got {:?}", tape.value(loss).shape()),
        });
    }
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(xid, x.rows(), x.cols());

    let eval = |point: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.var(point.clone());
        let l = f(&mut t, id)?;
        t.value(l).scalar_value()
    };

    let mut max_rel = 0.0_f64;
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let mut plus = x.clone();
            plus.set(r, c, plus.at(r, c) + step);
            let mut minus = x.clone();
            minus.set(r, c, minus.at(r, c) - step);
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let an = analytic.at(r, c);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::row(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul_elem(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn stop_grad_freezes_one_factor() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::row(vec![1.0, 2.0]));
        let frozen = tape.stop_grad(x);
        let prod = tape.mul_elem(frozen, x).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
        assert!(grads.get(frozen).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::row(vec![2.0]));
        let c = tape.constant(Tensor::row(vec![5.0]));
        let prod = tape.mul_elem(x, c).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::row(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn abs_subgradient_is_zero_at_kink() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::row(vec![-2.0, 0.0, 3.0]));
        let a = tape.abs(x).unwrap();
        let loss = tape.sum(a).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn tanh_matmul_chain_checks_under_1e6() {
        let w = random_tensor(8, 8, 31);
        let x = random_tensor(1, 8, 32);
        let err = check_gradients(
            |tape, xid| {
                let wid = tape.constant(w.clone());
                let h = tape.matmul(xid, wid)?;
                let t = tape.tanh(h)?;
                tape.sum(t)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn frozen_branch_checks_on_live_branch_only() {
        // sum(x0 o x) with the first factor captured at the evaluation
        // point, the finite-difference analogue of a stop-gradient pair.
        let x = Tensor::row(vec![1.0, 2.0]);
        let x0 = x.clone();
        let err = check_gradients(
            |tape, xid| {
                let frozen = tape.constant(x0.clone());
                let prod = tape.mul_elem(frozen, xid)?;
                tape.sum(prod)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x = Tensor::row(vec![0.4, 1.3, 0.7, 2.1]);
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, NodeId) -> Result<NodeId>>)> = vec![
            ("sigmoid", Box::new(|t: &mut Tape, x: NodeId| {
                let s = t.sigmoid(x)?;
                t.sum(s)
            })),
            ("exp", Box::new(|t: &mut Tape, x: NodeId| {
                let e = t.exp(x)?;
                t.sum(e)
            })),
            ("sqrt", Box::new(|t: &mut Tape, x: NodeId| {
                let s = t.sqrt(x)?;
                t.sum(s)
            })),
            ("div", Box::new(|t: &mut Tape, x: NodeId| {
                let c = t.constant(Tensor::row(vec![2.0, 3.0, 0.5, 1.5]));
                let d = t.div_elem(c, x)?;
                t.sum(d)
            })),
            ("layer_norm", Box::new(|t: &mut Tape, x: NodeId| {
                let n = t.layer_norm(x, 1e-5)?;
                let w = t.constant(Tensor::row(vec![0.3, -1.2, 0.8, 0.1]));
                let p = t.mul_elem(n, w)?;
                t.sum(p)
            })),
        ];
        for (name, f) in cases {
            let err = check_gradients(f, &x, 1e-6).unwrap();
            assert!(err < 1e-5, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn svd_nodes_route_gradients_to_the_matrix() {
        let a = random_tensor(4, 3, 77);
        let wu = random_tensor(4, 3, 78);
        let ws = random_tensor(1, 3, 79);
        let err = check_gradients(
            |tape, aid| {
                let (u, s) = tape.svd(aid)?;
                let wu_id = tape.constant(wu.clone());
                let ws_id = tape.constant(ws.clone());
                let lu = tape.dot(u, wu_id)?;
                let ls = tape.dot(s, ws_id)?;
                tape.add(lu, ls)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn nuclear_norm_gradient_checks() {
        let a = random_tensor(3, 3, 99);
        let err = check_gradients(
            |tape, aid| {
                let (_u, s) = tape.svd(aid)?;
                tape.sum(s)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn matmul_gradients_flow_to_both_operands() {
        let a = random_tensor(3, 4, 1);
        let b = random_tensor(4, 2, 2);
        let err_a = check_gradients(
            |tape, aid| {
                let bid = tape.constant(b.clone());
                let m = tape.matmul(aid, bid)?;
                let sq = tape.mul_elem(m, m)?;
                tape.sum(sq)
            },
            &a,
            1e-5,
        )
        .unwrap();
        let err_b = check_gradients(
            |tape, bid| {
                let aid = tape.constant(a.clone());
                let m = tape.matmul(aid, bid)?;
                let sq = tape.mul_elem(m, m)?;
                tape.sum(sq)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err_a < 1e-6 && err_b < 1e-6, "errs {err_a} {err_b}");
    }

    #[test]
    fn loss_of_constants_only_yields_empty_gradients() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let s = tape.sum(c).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.degenerate_svd_events, 0);
    }
}
