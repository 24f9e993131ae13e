//! Tape-based reverse-mode differentiation over tensor values.
//!
//! Every operation appends a node holding its forward value. A node can only
//! name inputs that already exist on the same tape, so the recorded graph is
//! acyclic by construction. `backward` walks the tape once in reverse and
//! accumulates adjoints, summing contributions from every child.
//!
//! Adjoints are only propagated through *active* nodes, i.e. nodes with at
//! least one parameter among their ancestors. Constants never receive one.

use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::linalg::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a node on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Constant,
    Parameter,
    Add,
    Sub,
    Matmul,
    Hadamard,
    Scale(f64),
    /// Elementwise `1 / (1 + e^{-x})`.
    Sigmoid,
    /// Elementwise integer power, evaluated as repeated Hadamard products.
    Power(u32),
    /// Sum of squared entries, a 1x1 result.
    SumOfSquares,
    /// Mean of all entries, a 1x1 result.
    Mean,
    /// Column gather; the adjoint scatters back, adding on repeats.
    SelectColumns(Vec<usize>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Constant => "constant",
            OpKind::Parameter => "parameter",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Matmul => "matmul",
            OpKind::Hadamard => "hadamard",
            OpKind::Scale(_) => "scale",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Power(_) => "power",
            OpKind::SumOfSquares => "sum_of_squares",
            OpKind::Mean => "mean",
            OpKind::SelectColumns(_) => "select_columns",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Constant | OpKind::Parameter => 0,
            OpKind::Add | OpKind::Sub | OpKind::Matmul | OpKind::Hadamard => 2,
            _ => 1,
        }
    }
}

/// Parses the argument-free kinds, plus `scale:<s>` and `power:<n>`.
impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unsupported = || Error::UnsupportedOp(s.to_string());
        Ok(match s {
            "constant" => OpKind::Constant,
            "parameter" => OpKind::Parameter,
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "matmul" => OpKind::Matmul,
            "hadamard" => OpKind::Hadamard,
            "sigmoid" => OpKind::Sigmoid,
            "sum_of_squares" => OpKind::SumOfSquares,
            "mean" => OpKind::Mean,
            _ => match s.split_once(':') {
                Some(("scale", v)) => OpKind::Scale(v.parse().map_err(|_| unsupported())?),
                Some(("power", v)) => OpKind::Power(v.parse().map_err(|_| unsupported())?),
                _ => return Err(unsupported()),
            },
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug)]
struct Node {
    kind: OpKind,
    inputs: Vec<NodeId>,
    value: Tensor,
    active: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.index].value
    }

    pub fn kind(&self, id: NodeId) -> &OpKind {
        &self.nodes[id.index].kind
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.index].inputs
    }

    /// Ids of every node recorded so far, in recording order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(|index| NodeId { tape: self.id, index })
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, value: Tensor, active: bool) -> NodeId {
        let id = NodeId {
            tape: self.id,
            index: self.nodes.len(),
        };
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            active,
        });
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Constant, Vec::new(), value, false)
    }

    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Parameter, Vec::new(), value, true)
    }

    /// Records an operation on existing nodes and computes its forward value.
    ///
    /// Leaf kinds carry their own value and go through [`Tape::constant`] or
    /// [`Tape::parameter`] instead.
    pub fn record(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(kind, OpKind::Constant | OpKind::Parameter) {
            return Err(Error::UnsupportedOp(format!(
                "{} nodes are created with Tape::{}",
                kind.name(),
                kind.name()
            )));
        }
        if inputs.len() != kind.arity() {
            return Err(Error::InvalidInput(format!(
                "{} expects {} inputs, got {}",
                kind.name(),
                kind.arity(),
                inputs.len()
            )));
        }
        for id in inputs {
            if id.tape != self.id || id.index >= self.nodes.len() {
                return Err(Error::InvalidInput(format!(
                    "node {} does not belong to this tape",
                    id.index
                )));
            }
        }
        let val = |i: usize| &self.nodes[inputs[i].index].value;
        let value = match &kind {
            OpKind::Add => val(0).add(val(1))?,
            OpKind::Sub => val(0).sub(val(1))?,
            OpKind::Matmul => val(0).matmul(val(1))?,
            OpKind::Hadamard => val(0).hadamard(val(1))?,
            OpKind::Scale(s) => val(0).scale(*s),
            OpKind::Sigmoid => val(0).map(sigmoid),
            OpKind::Power(n) => val(0).hadamard_power(*n)?,
            OpKind::SumOfSquares => Tensor::scalar(val(0).sum_of_squares()),
            OpKind::Mean => {
                let v = val(0);
                if v.is_empty() {
                    return Err(Error::InvalidInput("mean of an empty tensor".into()));
                }
                Tensor::scalar(v.sum() / v.len() as f64)
            }
            OpKind::SelectColumns(idx) => val(0).select_columns(idx)?,
            OpKind::Constant | OpKind::Parameter => unreachable!(),
        };
        let active = inputs.iter().any(|id| self.nodes[id.index].active);
        Ok(self.push(kind, inputs.to_vec(), value, active))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sub, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Matmul, &[a, b])
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Hadamard, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.record(OpKind::Scale(s), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sigmoid, &[a])
    }

    pub fn power(&mut self, a: NodeId, n: u32) -> Result<NodeId> {
        if n == 0 {
            return Err(Error::InvalidInput("power must be >= 1".into()));
        }
        self.record(OpKind::Power(n), &[a])
    }

    pub fn sum_of_squares(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::SumOfSquares, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Mean, &[a])
    }

    pub fn select_columns(&mut self, a: NodeId, columns: Vec<usize>) -> Result<NodeId> {
        self.record(OpKind::SelectColumns(columns), &[a])
    }

    /// Adds a column bias: `a + bias * 1^T` for a `rows x 1` bias node.
    pub fn add_column_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let cols = self.value(a).cols();
        let ones = self.constant(Tensor::ones(1, cols));
        let wide = self.matmul(bias, ones)?;
        self.add(a, wide)
    }

    /// Reverse pass from a scalar loss node. The loss adjoint is seeded with 1.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check_owned(loss)?;
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::InvalidLoss(shape));
        }
        self.backward_seeded(loss, Tensor::scalar(1.0))
    }

    /// Reverse pass with an arbitrary adjoint seed on `output`.
    pub fn backward_seeded(&self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        self.check_owned(output)?;
        if seed.shape() != self.value(output).shape() {
            return Err(Error::Dimension {
                op: "backward seed",
                left: self.value(output).shape(),
                right: seed.shape(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.index + 1];
        adj[output.index] = Some(seed);
        for i in (0..=output.index).rev() {
            let node = &self.nodes[i];
            if !node.active || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            adjoints: adj,
        })
    }

    fn check_owned(&self, id: NodeId) -> Result<()> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(Error::InvalidInput("node does not belong to this tape".into()));
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let input = |k: usize| &self.nodes[node.inputs[k].index];
        let wants = |k: usize| input(k).active;
        let mut contribute = |k: usize, delta: Tensor| -> Result<()> {
            let slot = &mut adj[node.inputs[k].index];
            match slot {
                Some(acc) => acc.add_assign(&delta)?,
                None => *slot = Some(delta),
            }
            Ok(())
        };
        match &node.kind {
            OpKind::Add => {
                for k in 0..2 {
                    if wants(k) {
                        contribute(k, g.clone())?;
                    }
                }
            }
            OpKind::Sub => {
                if wants(0) {
                    contribute(0, g.clone())?;
                }
                if wants(1) {
                    contribute(1, g.scale(-1.0))?;
                }
            }
            OpKind::Matmul => {
                // C = A B: dA = G B^T, dB = A^T G
                if wants(0) {
                    contribute(0, g.matmul_nt(&input(1).value)?)?;
                }
                if wants(1) {
                    contribute(1, input(0).value.matmul_tn(g)?)?;
                }
            }
            OpKind::Hadamard => {
                if wants(0) {
                    contribute(0, g.hadamard(&input(1).value)?)?;
                }
                if wants(1) {
                    contribute(1, g.hadamard(&input(0).value)?)?;
                }
            }
            OpKind::Scale(s) => contribute(0, g.scale(*s))?,
            OpKind::Sigmoid => {
                let y = &node.value;
                let mut d = g.clone();
                for (dv, yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *dv *= yv * (1.0 - yv);
                }
                contribute(0, d)?;
            }
            OpKind::Power(n) => {
                let x = &input(0).value;
                let deriv = if *n == 1 {
                    Tensor::ones(x.rows(), x.cols())
                } else {
                    x.hadamard_power(n - 1)?.scale(f64::from(*n))
                };
                contribute(0, g.hadamard(&deriv)?)?;
            }
            OpKind::SumOfSquares => {
                let x = &input(0).value;
                contribute(0, x.scale(2.0 * g.get(0, 0)))?;
            }
            OpKind::Mean => {
                let x = &input(0).value;
                let v = g.get(0, 0) / x.len() as f64;
                contribute(0, Tensor::filled(x.rows(), x.cols(), v))?;
            }
            OpKind::SelectColumns(idx) => {
                let x = &input(0).value;
                let mut d = Tensor::zeros(x.rows(), x.cols());
                let m = idx.len();
                for i in 0..x.rows() {
                    for (k, &j) in idx.iter().enumerate() {
                        let cur = d.get(i, j);
                        d.set(i, j, cur + g.data()[i * m + k]);
                    }
                }
                contribute(0, d)?;
            }
            OpKind::Constant | OpKind::Parameter => {}
        }
        Ok(())
    }
}

/// Adjoints produced by one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `id`, if the reverse pass reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        if id.tape != self.tape {
            return None;
        }
        self.adjoints.get(id.index).and_then(Option::as_ref)
    }

    /// Adjoint of `id`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

/// Jacobian `E x D` of a taped map at `x` (a `D x 1` column), one reverse
/// pass per output component.
pub fn jacobian<F>(f: F, x: &Tensor) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, NodeId) -> Result<NodeId>,
{
    if x.cols() != 1 {
        return Err(Error::InvalidInput(format!(
            "jacobian input must be a column, got {:?}",
            x.shape()
        )));
    }
    let mut tape = Tape::new();
    let input = tape.parameter(x.clone());
    let output = f(&mut tape, input)?;
    let y = tape.value(output).clone();
    if !y.is_finite() {
        return Err(Error::Numeric("non-finite output in jacobian".into()));
    }
    let (e, d) = (y.len(), x.rows());
    let mut jac = Tensor::zeros(e, d);
    for row in 0..e {
        let mut seed = Tensor::zeros(y.rows(), y.cols());
        seed.data_mut()[row] = 1.0;
        let grads = tape.backward_seeded(output, seed)?;
        if let Some(g) = grads.get(input) {
            for (col, v) in g.data().iter().enumerate() {
                jac.set(row, col, *v);
            }
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn add_of_constants() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::column(&[1.0, 2.0]));
        let b = t.constant(Tensor::column(&[3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_of_zero() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(a).unwrap();
        assert_eq!(t.value(s).data(), &[0.5]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let p = t.parameter(Tensor::scalar(3.0));
        let j = t.hadamard(p, p).unwrap();
        let g = t.backward(j).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[6.0]);
        assert_eq!(g.get(j).unwrap().data(), &[1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let p = t.parameter(Tensor::scalar(0.0));
        let s = t.sigmoid(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.25]);
    }

    #[test]
    fn matmul_chain_matches_linalg() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = rand_tensor(3, 4, &mut rng);
        let x = rand_tensor(4, 1, &mut rng);
        let b = rand_tensor(4, 1, &mut rng);
        let mut t = Tape::new();
        let (wn, xn, bn) = (t.parameter(w.clone()), t.constant(x.clone()), t.parameter(b.clone()));
        let s = t.add(xn, bn).unwrap();
        let y = t.matmul(wn, s).unwrap();
        assert_eq!(t.value(y), &w.matmul(&x.add(&b).unwrap()).unwrap());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let p = t.parameter(Tensor::column(&[1.0, 2.0]));
        assert!(matches!(t.backward(p), Err(Error::InvalidLoss((2, 1)))));
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(matches!("tanh".parse::<OpKind>(), Err(Error::UnsupportedOp(_))));
        assert_eq!("power:3".parse::<OpKind>().unwrap(), OpKind::Power(3));
        let mut t = Tape::new();
        assert!(matches!(t.record(OpKind::Constant, &[]), Err(Error::UnsupportedOp(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 1));
        let b = t.constant(Tensor::zeros(3, 1));
        assert!(matches!(t.add(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(t.hadamard(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn foreign_node_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.constant(Tensor::scalar(1.0));
        let b = t2.constant(Tensor::scalar(1.0));
        assert!(t2.add(a, b).is_err());
    }

    #[test]
    fn gradients_accumulate_over_children() {
        // J = sum((p + p)^2) + sum(p^2) = 5 p^2 -> 10 p
        let mut t = Tape::new();
        let p = t.parameter(Tensor::column(&[1.5, -2.0]));
        let pp = t.add(p, p).unwrap();
        let a = t.sum_of_squares(pp).unwrap();
        let b = t.sum_of_squares(p).unwrap();
        let j = t.add(a, b).unwrap();
        let g = t.backward(j).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[15.0, -20.0]);
    }

    #[test]
    fn linear_jacobian_is_matrix() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let am = a.clone();
        let j = jacobian(
            move |t, x| {
                let an = t.constant(am);
                t.matmul(an, x)
            },
            &Tensor::column(&[0.3, -0.7]),
        )
        .unwrap();
        assert_eq!(j, a);
    }

    #[test]
    fn square_jacobian_is_diagonal() {
        let j = jacobian(|t, x| t.hadamard(x, x), &Tensor::column(&[1.0, 2.0])).unwrap();
        assert_eq!(j.data(), &[2.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn constants_get_no_adjoint() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0));
        let p = t.parameter(Tensor::scalar(3.0));
        let y = t.hadamard(c, p).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[2.0]);
    }
}
