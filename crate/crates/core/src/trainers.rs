//! Update rules: plain SGD, the first-order-only perturbed gradient, the
//! gradient-l1 penalty and HERO (perturbed gradient plus a penalty on the
//! change of gradient along a layer-scaled perturbation), all driven by
//! SGD with momentum, coupled weight decay and a cosine learning rate.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardKind, PassCounts};
use crate::data::{batches, LabeledBatch, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{self, BnMode, ForwardRecord, ModelSpec};
use crate::objective::{hvp_fd_from, Bound, Objective};
use crate::params::{GradientSet, ParamKind, ParamSet};
use crate::robustness::hessian_norm_metric;
use crate::seeds::{indexed_seed, sub_seed};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Sgd,
    FirstOrder,
    GradL1,
    Hero,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::FirstOrder => "first_order",
            Self::GradL1 => "grad_l1",
            Self::Hero => "hero",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

/// How the layer perturbation is scaled from the layer gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationScaling {
    /// `z = ||W||_2 * g / ||g||_2`, so `||z||_2 == ||W||_2`.
    #[default]
    LayerNorm,
    /// `z = (W * W) / ||W||_2 * g / ||g||_2`, elementwise.
    Elementwise,
}

fn default_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_h() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub rule: Rule,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Hessian penalty strength.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Perturbation step.
    #[serde(default = "default_h")]
    pub h: f64,
    /// Gradient-l1 penalty strength.
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub perturbation_scaling: PerturbationScaling,
    #[serde(default)]
    pub augment_flip: bool,
}

impl TrainerConfig {
    pub fn new(rule: Rule) -> Self {
        Self {
            rule,
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            gamma: default_gamma(),
            h: default_h(),
            beta: 0.0,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            schedule: Schedule::Cosine,
            perturbation_scaling: PerturbationScaling::LayerNorm,
            augment_flip: false,
        }
    }

    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |ok: bool, field: &str, msg: String| {
            if !ok {
                v.push(format!("{prefix}.{field}: {msg}"));
            }
        };
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", format!("must be > 0, got {}", self.lr));
        check(
            (0.0..1.0).contains(&self.momentum),
            "momentum",
            format!("must lie in [0, 1), got {}", self.momentum),
        );
        check(self.weight_decay >= 0.0, "weight_decay", format!("must be >= 0, got {}", self.weight_decay));
        check(self.gamma >= 0.0, "gamma", format!("must be >= 0, got {}", self.gamma));
        check(self.h >= 0.0, "h", format!("must be >= 0, got {}", self.h));
        check(self.beta >= 0.0, "beta", format!("must be >= 0, got {}", self.beta));
        check(self.epochs >= 1, "epochs", "must be >= 1".into());
        check(self.batch_size >= 1, "batch_size", "must be >= 1".into());
        if matches!(self.rule, Rule::Hero | Rule::FirstOrder) {
            check(
                self.h > 0.0,
                "h",
                format!("rule {} needs a positive perturbation step, got {}", self.rule.as_str(), self.h),
            );
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("trainer");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(t, total, self.lr),
            Schedule::Constant => self.lr,
        }
    }
}

/// `lr0 * (1 + cos(pi t / T)) / 2`, with `t` clamped to `[0, T]`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    let total = total.max(1);
    let t = t.min(total) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t / total as f64).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub step: usize,
    pub total_steps: usize,
    pub velocity: GradientSet,
    pub lr: f64,
}

impl TrainerState {
    pub fn new(params: &ParamSet, total_steps: usize) -> Self {
        Self {
            step: 0,
            total_steps,
            velocity: params.zeros_like_trainable(),
            lr: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub grad_norm: f64,
    /// `sum_i ||grad L(W*) - g_i||^2` over the perturbed layers.
    pub regularizer: Option<f64>,
    pub z_norms: Vec<(String, f64)>,
    pub lr: f64,
    pub passes: PassCounts,
}

/// Something whose training loss can be recorded on a tape.
pub trait LossModel {
    /// Records the training-mode loss of `params` on `batch`.
    fn record_loss(&self, params: &ParamSet, batch: &LabeledBatch) -> Result<ForwardRecord>;
}

impl LossModel for ModelSpec {
    fn record_loss(&self, params: &ParamSet, batch: &LabeledBatch) -> Result<ForwardRecord> {
        models::forward(self, params, batch, BnMode::Train)
    }
}

/// `L(w) = 1/2 w^T A w + b^T w` over a single weight entry named `w`; the
/// batch is ignored. A small closed-form test bench for the update rules.
#[derive(Clone, Debug)]
pub struct QuadraticLoss {
    pub a: Tensor,
    pub b: Tensor,
}

impl QuadraticLoss {
    pub fn new(a: Tensor, b: Option<Tensor>) -> Result<Self> {
        let d = a.shape()[0];
        if a.shape() != [d, d] {
            return Err(Error::InvalidArgument(format!("A must be square, got {:?}", a.shape())));
        }
        let b = b.unwrap_or_else(|| Tensor::zeros(&[d]));
        a.reshape(&[d, d])?;
        if b.shape() != [d] {
            return Err(Error::ShapeMismatch {
                context: "quadratic linear term".into(),
                expected: vec![d],
                got: b.shape().to_vec(),
            });
        }
        Ok(Self { a, b })
    }

    pub fn params(&self, w: &[f64]) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(w.to_vec()), ParamKind::Weight)?;
        Ok(p)
    }

    /// A dummy one-sample batch.
    pub fn batch() -> LabeledBatch {
        LabeledBatch {
            inputs: Tensor::zeros(&[1, 1]),
            labels: vec![0],
        }
    }
}

impl LossModel for QuadraticLoss {
    fn record_loss(&self, params: &ParamSet, _batch: &LabeledBatch) -> Result<ForwardRecord> {
        let mut graph = crate::autodiff::Graph::new();
        let bound = Bound::new(&mut graph, params);
        let w = bound.var("w")?;
        let d = self.b.numel();
        let col = graph.reshape(w, &[d, 1])?;
        let a = graph.constant(self.a.clone());
        let aw = graph.matmul(a, col)?;
        let aw = graph.reshape(aw, &[d])?;
        let waw = graph.mul(w, aw)?;
        let quad = graph.sum(waw)?;
        let quad = graph.scale(quad, 0.5);
        let b = graph.constant(self.b.clone());
        let bw = graph.mul(b, w)?;
        let lin = graph.sum(bw)?;
        let loss = graph.add(quad, lin)?;
        graph.record_forward();
        Ok(ForwardRecord {
            graph,
            bound,
            logits: loss,
            loss,
            batch_stats: Default::default(),
        })
    }
}

/// Training-mode loss of a [`LossModel`] on one fixed batch.
pub struct BatchObjective<'a, M: ?Sized> {
    model: &'a M,
    batch: &'a LabeledBatch,
}

impl<'a, M: ?Sized> BatchObjective<'a, M> {
    pub fn new(model: &'a M, batch: &'a LabeledBatch) -> Self {
        Self { model, batch }
    }
}

impl<M: LossModel + ?Sized> Objective for BatchObjective<'_, M> {
    fn loss(&self, params: &ParamSet) -> Result<f64> {
        Ok(self.model.record_loss(params, self.batch)?.loss_value())
    }

    fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, GradientSet)> {
        let mut rec = self.model.record_loss(params, self.batch)?;
        let loss = rec.loss_value();
        Ok((loss, rec.backward()?))
    }
}

/// Per-layer perturbation `z^i` from the layer gradient. Entries that are not
/// perturbable, and layers whose gradient norm is below `1e-12`, map to zero.
pub fn layer_perturbation(params: &ParamSet, grads: &GradientSet, scaling: PerturbationScaling) -> Result<GradientSet> {
    grads.check_matches(params)?;
    let entries = params
        .trainable()
        .zip(grads.iter())
        .map(|(p, (name, g))| {
            let gn = g.norm_l2();
            let z = if !p.perturbable() || gn < 1e-12 {
                Tensor::zeros(g.shape())
            } else {
                let wn = p.tensor.norm_l2();
                match scaling {
                    PerturbationScaling::LayerNorm => g.scale(wn / gn),
                    PerturbationScaling::Elementwise => {
                        if wn == 0.0 {
                            Tensor::zeros(g.shape())
                        } else {
                            p.tensor.zip_map(g, |w, gi| w * w / wn * gi / gn)?
                        }
                    }
                }
            };
            Ok((name.clone(), z))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientSet::new(entries))
}

fn perturbed_names(params: &ParamSet) -> Vec<String> {
    params.trainable().filter(|e| e.perturbable()).map(|e| e.name.clone()).collect()
}

fn ensure_finite(step: usize, what: &str, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            what: what.to_string(),
        })
    }
}

/// Update direction of one step together with what the step observed.
pub struct StepDirection {
    pub direction: GradientSet,
    pub metrics: StepMetrics,
    pub batch_stats: models::BatchStats,
    /// The layer perturbation `z` of the perturbed rules.
    pub perturbation: Option<GradientSet>,
    /// `grad G` at the perturbed point, when the penalty is active.
    pub penalty_grad: Option<GradientSet>,
}

/// Computes the composite update direction of `cfg.rule` at `params` on
/// `batch` without touching `params`.
pub fn step_direction<M: LossModel + ?Sized>(
    model: &M,
    params: &ParamSet,
    cfg: &TrainerConfig,
    batch: &LabeledBatch,
    step: usize,
) -> Result<StepDirection> {
    match cfg.rule {
        Rule::Sgd => plain_direction(model, params, cfg, batch, step, 0.0),
        Rule::GradL1 => plain_direction(model, params, cfg, batch, step, cfg.beta),
        Rule::FirstOrder => perturbed_direction(model, params, cfg, batch, step, 0.0),
        Rule::Hero => perturbed_direction(model, params, cfg, batch, step, cfg.gamma),
    }
}

/// `g + beta * H sign(g) + alpha W`; `beta == 0` is plain SGD.
fn plain_direction<M: LossModel + ?Sized>(
    model: &M,
    params: &ParamSet,
    cfg: &TrainerConfig,
    batch: &LabeledBatch,
    step: usize,
    beta: f64,
) -> Result<StepDirection> {
    let mut rec = model.record_loss(params, batch)?;
    let loss = rec.loss_value();
    ensure_finite(step, "loss", loss.is_finite())?;
    let grad = rec.backward()?;
    ensure_finite(step, "gradient", grad.is_finite())?;
    let mut passes = rec.graph.counts();

    let mut direction = grad.clone();
    if beta > 0.0 {
        let sign = grad.map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
        let w_norm = params.trainable().map(|e| e.tensor.norm_l2().powi(2)).sum::<f64>().sqrt();
        let n = params.trainable().map(|e| e.tensor.numel()).sum::<usize>() as f64;
        let h_fd = 1e-3 * (1.0 + w_norm / n.sqrt());
        let objective = BatchObjective::new(model, batch);
        let hv = hvp_fd_from(&objective, params, &grad, &sign, h_fd)?;
        ensure_finite(step, "gradient-l1 term", hv.is_finite())?;
        direction.axpy(beta, &hv)?;
        // one extra forward and backward through the objective
        passes.forward += 1;
        passes.loss_backward += 1;
    }
    direction.axpy_params(cfg.weight_decay, params)?;
    ensure_finite(step, "update", direction.is_finite())?;
    Ok(StepDirection {
        direction,
        metrics: StepMetrics {
            loss,
            grad_norm: grad.norm_l2(),
            regularizer: None,
            z_norms: Vec::new(),
            lr: 0.0,
            passes,
        },
        batch_stats: rec.batch_stats,
        perturbation: None,
        penalty_grad: None,
    })
}

/// `grad L(W + h z) + alpha W + gamma grad G(W + h z)`, where
/// `G = sum_i ||grad_i L(W + h z) - g_i||^2` with the clean gradient `g`
/// held constant. `gamma == 0` is the first-order-only rule.
fn perturbed_direction<M: LossModel + ?Sized>(
    model: &M,
    params: &ParamSet,
    cfg: &TrainerConfig,
    batch: &LabeledBatch,
    step: usize,
    gamma: f64,
) -> Result<StepDirection> {
    if !(cfg.h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "perturbed update needs h > 0, got {}",
            cfg.h
        )));
    }
    // (1) clean gradient
    let mut clean = model.record_loss(params, batch)?;
    let loss = clean.loss_value();
    ensure_finite(step, "loss", loss.is_finite())?;
    let grad = clean.backward()?;
    ensure_finite(step, "gradient", grad.is_finite())?;

    // (2)-(3) layer perturbation applied to a copy; `params` is never modified
    let z = layer_perturbation(params, &grad, cfg.perturbation_scaling)?;
    let perturbed = params.offset(cfg.h, &z)?;

    // (4) perturbed gradient, kept on the tape
    let mut rec = model.record_loss(&perturbed, batch)?;
    ensure_finite(step, "perturbed loss", rec.loss_value().is_finite())?;
    let grad_vars = rec.backward_vars()?;
    let perturbed_grad = rec.bound.gradient_set(&rec.graph, &grad_vars);
    ensure_finite(step, "perturbed gradient", perturbed_grad.is_finite())?;

    // (5) G and, when it is used, its gradient by one more backward pass
    let names = rec.bound.trainable_names();
    let layers = perturbed_names(params);
    let mut penalty = None;
    for (name, gv) in names.iter().zip(&grad_vars) {
        if !layers.contains(name) {
            continue;
        }
        let clean_g = rec.graph.constant(grad.get(name).expect("aligned").clone());
        let diff = rec.graph.sub(*gv, clean_g)?;
        let sq = rec.graph.sum_squares(diff)?;
        penalty = Some(match penalty {
            Some(acc) => rec.graph.add(acc, sq)?,
            None => sq,
        });
    }
    let regularizer = penalty.map(|p| rec.graph.value(p).item().unwrap_or(f64::NAN));

    // (6) composite gradient
    let mut direction = perturbed_grad;
    direction.axpy_params(cfg.weight_decay, params)?;
    let mut penalty_grad = None;
    if gamma > 0.0 {
        if let Some(p) = penalty {
            let wrt = rec.bound.trainable_vars();
            let dg = rec.graph.grad(p, &wrt, BackwardKind::Regularizer)?;
            let dg = rec.bound.gradient_set(&rec.graph, &dg);
            ensure_finite(step, "regularizer gradient", dg.is_finite())?;
            direction.axpy(gamma, &dg)?;
            penalty_grad = Some(dg);
        }
    }
    ensure_finite(step, "update", direction.is_finite())?;

    let mut passes = clean.graph.counts();
    passes += rec.graph.counts();
    let z_norms = z
        .iter()
        .filter(|(n, _)| layers.contains(n))
        .map(|(n, t)| (n.clone(), t.norm_l2()))
        .collect();
    Ok(StepDirection {
        direction,
        metrics: StepMetrics {
            loss,
            grad_norm: grad.norm_l2(),
            regularizer,
            z_norms,
            lr: 0.0,
            passes,
        },
        // running statistics follow the clean pass only
        batch_stats: clean.batch_stats,
        perturbation: Some(z),
        penalty_grad,
    })
}

/// `v <- mu v + d`, `W <- W - lr v`, then advances the step counter.
pub fn apply_update(params: &mut ParamSet, state: &mut TrainerState, cfg: &TrainerConfig, direction: &GradientSet) -> Result<f64> {
    let lr = cfg.lr_at(state.step, state.total_steps);
    for ((_, v), (_, d)) in state.velocity.iter_mut().zip(direction.iter()) {
        v.expect_same_shape(d, "momentum buffer")?;
        for (vi, di) in v.data_mut().iter_mut().zip(d.data()) {
            *vi = cfg.momentum * *vi + di;
        }
    }
    params.add_scaled(-lr, &state.velocity)?;
    state.lr = lr;
    state.step += 1;
    Ok(lr)
}

/// One optimizer step of `cfg.rule`.
pub fn step<M: LossModel + ?Sized>(
    model: &M,
    params: &mut ParamSet,
    state: &mut TrainerState,
    cfg: &TrainerConfig,
    batch: &LabeledBatch,
) -> Result<StepMetrics> {
    let StepDirection {
        direction,
        mut metrics,
        batch_stats,
        ..
    } = step_direction(model, params, cfg, batch, state.step)?;
    batch_stats.apply(params)?;
    metrics.lr = apply_update(params, state, cfg, &direction)?;
    Ok(metrics)
}

fn step_as<M: LossModel + ?Sized>(
    rule: Rule,
    model: &M,
    params: &mut ParamSet,
    state: &mut TrainerState,
    cfg: &TrainerConfig,
    batch: &LabeledBatch,
) -> Result<StepMetrics> {
    let cfg = TrainerConfig { rule, ..cfg.clone() };
    step(model, params, state, &cfg, batch)
}

pub fn sgd_step<M: LossModel + ?Sized>(
    model: &M,
    params: &mut ParamSet,
    state: &mut TrainerState,
    cfg: &TrainerConfig,
    batch: &LabeledBatch,
) -> Result<StepMetrics> {
    step_as(Rule::Sgd, model, params, state, cfg, batch)
}

pub fn grad_l1_step<M: LossModel + ?Sized>(
    model: &M,
    params: &mut ParamSet,
    state: &mut TrainerState,
    cfg: &TrainerConfig,
    batch: &LabeledBatch,
) -> Result<StepMetrics> {
    step_as(Rule::GradL1, model, params, state, cfg, batch)
}

pub fn first_order_step<M: LossModel + ?Sized>(
    model: &M,
    params: &mut ParamSet,
    state: &mut TrainerState,
    cfg: &TrainerConfig,
    batch: &LabeledBatch,
) -> Result<StepMetrics> {
    step_as(Rule::FirstOrder, model, params, state, cfg, batch)
}

pub fn hero_step<M: LossModel + ?Sized>(
    model: &M,
    params: &mut ParamSet,
    state: &mut TrainerState,
    cfg: &TrainerConfig,
    batch: &LabeledBatch,
) -> Result<StepMetrics> {
    step_as(Rule::Hero, model, params, state, cfg, batch)
}

/// Per-epoch diagnostics switches.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    /// Track the Hessian-norm metric every this many epochs (0 disables);
    /// the final epoch is always tracked when enabled.
    pub hessian_interval: usize,
    pub hessian_h: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            hessian_interval: 0,
            hessian_h: 0.5,
            eval_batch_size: 500,
        }
    }
}

/// One row per epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_loss: Option<f64>,
    pub eval_acc: Option<f64>,
    pub hessian_norm: Option<f64>,
    /// Epoch mean of `||z^i||_2` per perturbed layer.
    pub z_norms: Vec<(String, f64)>,
    /// Epoch mean of the gradient-difference penalty.
    pub regularizer: Option<f64>,
    pub lr: f64,
    pub wall_ms: u128,
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub records: Vec<MetricsRecord>,
    pub passes: PassCounts,
}

/// Full training run, deterministic under `(cfg, seed)`: initialization uses
/// the `init` sub-seed and epoch `e` shuffles with the `shuffle`/`e` seed.
pub fn train(
    spec: &ModelSpec,
    train_set: &LabeledDataset,
    eval_set: Option<&LabeledDataset>,
    cfg: &TrainerConfig,
    seed: u64,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let mut params = models::build(spec, sub_seed(seed, "init"))?;
    train_from(spec, &mut params, train_set, eval_set, cfg, seed, options).map(|(records, passes)| TrainOutcome {
        params,
        records,
        passes,
    })
}

/// [`train`] starting from given parameters.
pub fn train_from(
    spec: &ModelSpec,
    params: &mut ParamSet,
    train_set: &LabeledDataset,
    eval_set: Option<&LabeledDataset>,
    cfg: &TrainerConfig,
    seed: u64,
    options: &TrainOptions,
) -> Result<(Vec<MetricsRecord>, PassCounts)> {
    spec.validate()?;
    cfg.validate()?;
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut state = TrainerState::new(params, per_epoch * cfg.epochs);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut passes = PassCounts::default();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut reg_sum = 0.0;
        let mut reg_seen = 0usize;
        let mut z_sums: Vec<(String, f64)> = Vec::new();
        let epoch_batches = batches(
            train_set,
            cfg.batch_size,
            indexed_seed(seed, "shuffle", epoch as u64),
            cfg.augment_flip,
        )?;
        for batch in &epoch_batches {
            let m = step(spec, params, &mut state, cfg, batch)?;
            passes += m.passes;
            if let Some(r) = m.regularizer {
                reg_sum += r;
                reg_seen += 1;
            }
            for (name, z) in m.z_norms {
                match z_sums.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, s)) => *s += z,
                    None => z_sums.push((name, z)),
                }
            }
        }
        let steps = epoch_batches.len().max(1) as f64;
        let (train_loss, train_acc) = models::evaluate(spec, params, train_set, options.eval_batch_size)?;
        let (eval_loss, eval_acc) = match eval_set {
            Some(ds) => {
                let (l, a) = models::evaluate(spec, params, ds, options.eval_batch_size)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let last = epoch + 1 == cfg.epochs;
        let hessian_norm = if options.hessian_interval > 0 && ((epoch + 1) % options.hessian_interval == 0 || last) {
            Some(hessian_norm_metric(spec, params, train_set, options.hessian_h, options.eval_batch_size)?)
        } else {
            None
        };
        records.push(MetricsRecord {
            epoch: epoch + 1,
            train_loss,
            train_acc,
            eval_loss,
            eval_acc,
            hessian_norm,
            z_norms: z_sums.into_iter().map(|(n, s)| (n, s / steps)).collect(),
            regularizer: (reg_seen > 0).then(|| reg_sum / reg_seen as f64),
            lr: state.lr,
            wall_ms: started.elapsed().as_millis(),
        });
    }
    Ok((records, passes))
}
