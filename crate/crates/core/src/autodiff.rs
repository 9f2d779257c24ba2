//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is a Wengert list: every operation appends a node holding its
//! value and the ids of its inputs, so node order is a topological order.
//! [`Graph::grad`] walks the list backwards and expresses every adjoint with
//! the same recorded operations. Gradients are therefore nodes themselves and
//! can be differentiated again, which is how a penalty on a gradient (such as
//! the squared difference of two gradients) gets its own backward pass.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, ConvGeom, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    SumTo(Var),
    Im2Col(Var, ConvGeom),
    Col2Im(Var, ConvGeom),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => [Some(a), Some(b)],
            Neg(a) | Scale(a, _) | Exp(a) | Log(a) | Sqrt(a) | Relu(a) | Transpose(a)
            | Reshape(a) | Permute(a, _) | BroadcastTo(a) | SumTo(a) | Im2Col(a, _)
            | Col2Im(a, _) => [Some(a), None],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Which kind of backward pass a [`Graph::grad`] call represents. Only used
/// for the pass counters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardKind {
    /// Gradient of a training loss.
    Loss,
    /// Gradient of a penalty built from other gradients.
    Regularizer,
}

/// Instrumentation counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassCounts {
    pub forward: usize,
    pub loss_backward: usize,
    pub regularizer_backward: usize,
}

impl std::ops::AddAssign for PassCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.forward += rhs.forward;
        self.loss_backward += rhs.loss_backward;
        self.regularizer_backward += rhs.regularizer_backward;
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    counts: PassCounts,
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

    pub fn counts(&self) -> PassCounts {
        self.counts
    }

    /// Called by model code once per full forward evaluation.
    pub fn record_forward(&mut self) {
        self.counts.forward += 1;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of `v`'s value as a constant; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    /// Broadcasts both operands to a common shape, inserting tape nodes only
    /// where a shape actually changes.
    fn align(&mut self, a: Var, b: Var) -> Result<(Var, Var)> {
        if self.shape(a) == self.shape(b) {
            return Ok((a, b));
        }
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let a = self.broadcast_to(a, &shape)?;
        let b = self.broadcast_to(b, &shape)?;
        Ok((a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align(a, b)?;
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push_op(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align(a, b)?;
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push_op(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align(a, b)?;
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push_op(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align(a, b)?;
        let value = self.value(a).div(self.value(b))?;
        Ok(self.push_op(value, Op::Div(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        self.push_op(value, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        self.push_op(value, Op::Scale(a, k))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push_op(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push_op(value, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push_op(value, Op::Sqrt(a))
    }

    /// `max(x, 0)`; the derivative at 0 is taken to be 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_op(value, Op::Relu(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose2d()?;
        Ok(self.push_op(value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let value = self.value(a).reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        Ok(self.push_op(value, Op::Permute(a, axes.to_vec())))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let value = self.value(a).broadcast_to(shape)?;
        Ok(self.push_op(value, Op::BroadcastTo(a)))
    }

    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let value = self.value(a).sum_to(shape)?;
        Ok(self.push_op(value, Op::SumTo(a)))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.sum_to(a, &[])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        Ok(self.scale(s, 1.0 / n))
    }

    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Result<Var> {
        let value = self.value(a).im2col(&geom)?;
        Ok(self.push_op(value, Op::Im2Col(a, geom)))
    }

    pub fn col2im(&mut self, a: Var, geom: ConvGeom) -> Result<Var> {
        let value = self.value(a).col2im(&geom)?;
        Ok(self.push_op(value, Op::Col2Im(a, geom)))
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum(sq)
    }

    /// Reverse sweep from the scalar `root`. Returns one gradient node per
    /// entry of `wrt` (a zero constant when `root` does not depend on it).
    ///
    /// Adjoints are recorded on this graph, so a returned gradient can itself
    /// be fed into another `grad` call.
    pub fn grad(&mut self, root: Var, wrt: &[Var], kind: BackwardKind) -> Result<Vec<Var>> {
        let root_shape = self.shape(root).to_vec();
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        match kind {
            BackwardKind::Loss => self.counts.loss_backward += 1,
            BackwardKind::Regularizer => self.counts.regularizer_backward += 1,
        }

        // Nodes lying on some path from a `wrt` leaf to the root.
        let end = root.0 + 1;
        let mut needed = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needed[w.0] = true;
            }
        }
        for i in 0..end {
            if needed[i] || !self.nodes[i].requires_grad {
                continue;
            }
            needed[i] = self.nodes[i]
                .op
                .inputs()
                .iter()
                .flatten()
                .any(|v| needed[v.0]);
        }

        let mut grads: Vec<Option<Var>> = vec![None; end];
        if needed[root.0] {
            grads[root.0] = Some(self.constant(Tensor::ones(&root_shape)));
        }
        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            if !needed[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.adjoints(Var(i), &op, g)? {
                if !needed[input.0] {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0] {
                    Some(acc) => self.add(acc, contrib)?,
                    None => contrib,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(*w).to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            })
            .collect())
    }

    /// Convenience: gradient values of a loss, cloned off the tape.
    pub fn gradients(&mut self, root: Var, wrt: &[Var], kind: BackwardKind) -> Result<Vec<Tensor>> {
        let vars = self.grad(root, wrt, kind)?;
        Ok(vars.into_iter().map(|v| self.value(v).clone()).collect())
    }

    /// Vector-Jacobian products of one node, built from recorded ops.
    fn adjoints(&mut self, out: Var, op: &Op, g: Var) -> Result<Vec<(Var, Var)>> {
        let needs = |graph: &Self, v: Var| graph.nodes[v.0].requires_grad;
        Ok(match *op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => {
                let nb = self.neg(g);
                vec![(a, g), (b, nb)]
            }
            Op::Mul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if needs(self, a) {
                    v.push((a, self.mul(g, b)?));
                }
                if needs(self, b) {
                    v.push((b, self.mul(g, a)?));
                }
                v
            }
            Op::Div(a, b) => {
                let mut v = Vec::with_capacity(2);
                if needs(self, a) {
                    v.push((a, self.div(g, b)?));
                }
                if needs(self, b) {
                    let t = self.mul(g, out)?;
                    let t = self.div(t, b)?;
                    v.push((b, self.neg(t)));
                }
                v
            }
            Op::Neg(a) => vec![(a, self.neg(g))],
            Op::Scale(a, k) => vec![(a, self.scale(g, k))],
            Op::Exp(a) => vec![(a, self.mul(g, out)?)],
            Op::Log(a) => vec![(a, self.div(g, a)?)],
            Op::Sqrt(a) => {
                let two_out = self.scale(out, 2.0);
                vec![(a, self.div(g, two_out)?)]
            }
            Op::Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                vec![(a, self.mul(g, mask)?)]
            }
            Op::MatMul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if needs(self, a) {
                    let bt = self.transpose(b)?;
                    v.push((a, self.matmul(g, bt)?));
                }
                if needs(self, b) {
                    let at = self.transpose(a)?;
                    v.push((b, self.matmul(at, g)?));
                }
                v
            }
            Op::Transpose(a) => vec![(a, self.transpose(g)?)],
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.reshape(g, &shape)?)]
            }
            Op::Permute(a, ref axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                vec![(a, self.permute(g, &inverse)?)]
            }
            Op::BroadcastTo(a) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.sum_to(g, &shape)?)]
            }
            Op::SumTo(a) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.broadcast_to(g, &shape)?)]
            }
            Op::Im2Col(a, geom) => vec![(a, self.col2im(g, geom)?)],
            Op::Col2Im(a, geom) => vec![(a, self.im2col(g, geom)?)],
        })
    }
}
