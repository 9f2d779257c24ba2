//! Scalar objectives over a [`ParamSet`] and the finite-difference
//! Hessian-vector product built on top of them.

use crate::autodiff::{BackwardKind, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{GradientSet, ParamSet};

/// A differentiable scalar function of the parameters.
pub trait Objective {
    fn loss(&self, params: &ParamSet) -> Result<f64>;

    /// Loss together with gradients for every trainable entry.
    fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, GradientSet)>;
}

/// Parameter leaves of one [`ParamSet`] placed on a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
    trainable: Vec<bool>,
}

impl Bound {
    pub fn new(graph: &mut Graph, params: &ParamSet) -> Self {
        let mut names = Vec::with_capacity(params.len());
        let mut vars = Vec::with_capacity(params.len());
        let mut trainable = Vec::with_capacity(params.len());
        for e in params.entries() {
            names.push(e.name.clone());
            vars.push(graph.leaf(e.tensor.clone(), e.trainable));
            trainable.push(e.trainable);
        }
        Self {
            names,
            vars,
            trainable,
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.vars
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(v, _)| *v)
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.names
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Packs gradient nodes (ordered like [`Bound::trainable_vars`]).
    pub fn gradient_set(&self, graph: &Graph, grads: &[Var]) -> GradientSet {
        GradientSet::new(
            self.trainable_names()
                .into_iter()
                .zip(grads)
                .map(|(n, g)| (n, graph.value(*g).clone()))
                .collect(),
        )
    }
}

/// Objective given as a closure that records the loss on a fresh graph.
/// The closure receives one variable per parameter entry, in order.
pub struct TapeObjective<F> {
    f: F,
}

impl<F> TapeObjective<F>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> Objective for TapeObjective<F>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    fn loss(&self, params: &ParamSet) -> Result<f64> {
        let mut graph = Graph::new();
        let bound = Bound::new(&mut graph, params);
        let root = (self.f)(&mut graph, bound.vars())?;
        scalar_value(&graph, root)
    }

    fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, GradientSet)> {
        let mut graph = Graph::new();
        let bound = Bound::new(&mut graph, params);
        let root = (self.f)(&mut graph, bound.vars())?;
        graph.record_forward();
        let loss = scalar_value(&graph, root)?;
        let grads = graph.grad(root, &bound.trainable_vars(), BackwardKind::Loss)?;
        Ok((loss, bound.gradient_set(&graph, &grads)))
    }
}

pub(crate) fn scalar_value(graph: &Graph, root: Var) -> Result<f64> {
    graph
        .value(root)
        .item()
        .ok_or_else(|| Error::NonScalarRoot(graph.shape(root).to_vec()))
}

/// Forward-difference Hessian-vector product
/// `(grad L(W + h v) - grad L(W)) / h`, both gradients from the same objective.
pub fn hvp_fd(
    objective: &dyn Objective,
    params: &ParamSet,
    v: &GradientSet,
    h: f64,
) -> Result<GradientSet> {
    let (_, base) = objective.loss_and_grad(params)?;
    hvp_fd_from(objective, params, &base, v, h)
}

/// [`hvp_fd`] reusing an already computed gradient at `params`.
pub fn hvp_fd_from(
    objective: &dyn Objective,
    params: &ParamSet,
    base_grad: &GradientSet,
    v: &GradientSet,
    h: f64,
) -> Result<GradientSet> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    v.check_matches(params)?;
    let shifted = params.offset(h, v)?;
    let (_, moved) = objective.loss_and_grad(&shifted)?;
    let mut diff = moved.sub(base_grad)?;
    for (_, t) in diff.iter_mut() {
        for x in t.data_mut() {
            *x /= h;
        }
    }
    Ok(diff)
}
