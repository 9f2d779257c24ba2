//! Perturbation-robustness diagnostics: closed-form lower bounds on the
//! weight perturbation needed to raise the loss by `c`, a brute-force oracle
//! for the true minimum, the curvature-along-perturbation metric tracked
//! during training, and 2-D loss contours.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledBatch, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{self, BnMode, ModelObjective, ModelSpec};
use crate::objective::{hvp_fd_from, Objective};
use crate::params::{GradientSet, ParamSet};
use crate::seeds::indexed_seed;
use crate::tensor::Tensor;
use crate::trainers::{layer_perturbation, PerturbationScaling};

/// Search interval upper end for the minimal radius.
pub const R_MAX: f64 = 1e3;
/// Absolute tolerance of the radius bisection.
pub const RADIUS_TOL: f64 = 1e-9;

fn check_bound_args(g: f64, v: f64, c: f64) -> Result<()> {
    if !(g >= 0.0 && g.is_finite()) {
        return Err(Error::InvalidArgument(format!("gradient norm must be finite and >= 0, got {g}")));
    }
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::InvalidArgument(format!("top eigenvalue must be finite and >= 0, got {v}")));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("loss increase must be > 0, got {c}")));
    }
    if g == 0.0 && v == 0.0 {
        return Err(Error::InvalidArgument(
            "zero gradient with zero curvature: no finite perturbation raises the loss".into(),
        ));
    }
    Ok(())
}

/// Lower bound on the l2 radius: `(g/v)(sqrt(1 + 2vc/g^2) - 1)`, evaluated
/// as `2c / (sqrt(g^2 + 2vc) + g)` so that `v -> 0` gives `c/g` and `g -> 0`
/// gives `sqrt(2c/v)` without cancellation.
pub fn lower_bound_l2(g_norm2: f64, v: f64, c: f64) -> Result<f64> {
    check_bound_args(g_norm2, v, c)?;
    Ok(2.0 * c / ((g_norm2 * g_norm2 + 2.0 * v * c).sqrt() + g_norm2))
}

/// Lower bound on the l-infinity radius with `g_norm1 = ||g||_1` and `n`
/// perturbed coordinates: `(|g|/(nv))(sqrt(1 + 2nvc/|g|^2) - 1)`.
pub fn lower_bound_linf(g_norm1: f64, v: f64, c: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one perturbed coordinate".into()));
    }
    check_bound_args(g_norm1, v, c)?;
    let nv = n as f64 * v;
    Ok(2.0 * c / ((g_norm1 * g_norm1 + 2.0 * nv * c).sqrt() + g_norm1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L2,
    Linf,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LossFamily {
    /// `L(w) = 1/2 w^T A w + b^T w` with symmetric `A`.
    Quadratic { a: DMatrix<f64>, b: DVector<f64> },
    /// Mean logistic loss of `sigmoid(x_i . w)` against labels in `{0, 1}`.
    Logistic { x: DMatrix<f64>, y: Vec<f64> },
}

/// A small loss with closed-form gradient and Hessian at a point `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticProblem {
    pub family: LossFamily,
    pub w: DVector<f64>,
}

impl AnalyticProblem {
    pub fn quadratic(a: DMatrix<f64>, b: DVector<f64>, w: DVector<f64>) -> Result<Self> {
        let d = w.len();
        if a.shape() != (d, d) || b.len() != d {
            return Err(Error::ShapeMismatch {
                context: "quadratic problem".into(),
                expected: vec![d, d],
                got: vec![a.nrows(), a.ncols()],
            });
        }
        if (&a - a.transpose()).abs().max() > 1e-12 * (1.0 + a.abs().max()) {
            return Err(Error::InvalidArgument("quadratic Hessian must be symmetric".into()));
        }
        Ok(Self {
            family: LossFamily::Quadratic { a, b },
            w,
        })
    }

    /// The local model `g^T d + 1/2 d^T H d` written as a quadratic at zero.
    pub fn local_quadratic(g: DVector<f64>, h: DMatrix<f64>) -> Result<Self> {
        let d = g.len();
        Self::quadratic(h, g, DVector::zeros(d))
    }

    pub fn logistic(x: DMatrix<f64>, y: Vec<f64>, w: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() || x.ncols() != w.len() || y.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "logistic problem".into(),
                expected: vec![y.len(), w.len()],
                got: vec![x.nrows(), x.ncols()],
            });
        }
        Ok(Self {
            family: LossFamily::Logistic { x, y },
            w,
        })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn loss_at(&self, w: &DVector<f64>) -> f64 {
        match &self.family {
            LossFamily::Quadratic { a, b } => 0.5 * w.dot(&(a * w)) + b.dot(w),
            LossFamily::Logistic { x, y } => {
                let z = x * w;
                let total: f64 = z
                    .iter()
                    .zip(y)
                    .map(|(&z, &y)| softplus(z) - y * z)
                    .sum();
                total / y.len() as f64
            }
        }
    }

    pub fn gradient_at(&self, w: &DVector<f64>) -> DVector<f64> {
        match &self.family {
            LossFamily::Quadratic { a, b } => a * w + b,
            LossFamily::Logistic { x, y } => {
                let z = x * w;
                let r = DVector::from_iterator(y.len(), z.iter().zip(y).map(|(&z, &y)| sigmoid(z) - y));
                x.transpose() * r / y.len() as f64
            }
        }
    }

    pub fn hessian_at(&self, w: &DVector<f64>) -> DMatrix<f64> {
        match &self.family {
            LossFamily::Quadratic { a, .. } => a.clone(),
            LossFamily::Logistic { x, y } => {
                let z = x * w;
                let s = DVector::from_iterator(y.len(), z.iter().map(|&z| sigmoid(z) * (1.0 - sigmoid(z))));
                x.transpose() * DMatrix::from_diagonal(&s) * x / y.len() as f64
            }
        }
    }

    pub fn gradient(&self) -> DVector<f64> {
        self.gradient_at(&self.w)
    }

    pub fn hessian(&self) -> DMatrix<f64> {
        self.hessian_at(&self.w)
    }

    /// Largest Hessian eigenvalue at `w`.
    pub fn top_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.hessian()).eigenvalues.max()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Maximum of `g^T d + 1/2 d^T H d` over a norm ball.
trait BallMaximizer {
    fn max_increase(&self, r: f64) -> f64;
}

/// Exact l2 trust-region maximizer from the eigendecomposition of `H`.
struct L2Ball {
    lambdas: Vec<f64>,
    g_hat: Vec<f64>,
}

impl L2Ball {
    fn new(g: &DVector<f64>, h: &DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(h.clone());
        let g_hat = eig.eigenvectors.transpose() * g;
        Self {
            lambdas: eig.eigenvalues.iter().copied().collect(),
            g_hat: g_hat.iter().copied().collect(),
        }
    }

    fn value(&self, coords: impl Iterator<Item = (usize, f64)>) -> f64 {
        coords
            .map(|(i, d)| self.g_hat[i] * d + 0.5 * self.lambdas[i] * d * d)
            .sum()
    }

    /// `||d(lambda)||` for `(lambda I - H) d = g`, skipping `skip` indices.
    fn norm_at(&self, lambda: f64, skip: &[bool]) -> f64 {
        self.g_hat
            .iter()
            .zip(&self.lambdas)
            .zip(skip)
            .filter(|(_, &s)| !s)
            .map(|((g, l), _)| (g / (lambda - l)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl BallMaximizer for L2Ball {
    fn max_increase(&self, r: f64) -> f64 {
        if r == 0.0 {
            return 0.0;
        }
        let top = self.lambdas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = self.lambdas.iter().fold(1.0f64, |m, l| m.max(l.abs()));
        let g_norm = self.g_hat.iter().map(|g| g * g).sum::<f64>().sqrt();
        let none = vec![false; self.lambdas.len()];

        // negative definite: the unconstrained maximizer may be inside
        if top < 0.0 && self.norm_at(0.0, &none) <= r {
            return self.value(self.g_hat.iter().zip(&self.lambdas).map(|(g, l)| -g / l).enumerate());
        }
        let floor = top.max(0.0);
        // eigen-directions at the floor with a vanishing gradient component
        let degenerate: Vec<bool> = self.lambdas.iter().map(|l| floor - l <= 1e-12 * scale).collect();
        let hard = degenerate
            .iter()
            .zip(&self.g_hat)
            .all(|(&d, g)| !d || g.abs() <= 1e-14 * g_norm.max(f64::MIN_POSITIVE));
        if hard && degenerate.iter().any(|&d| d) {
            let partial = self.norm_at(floor, &degenerate);
            if partial <= r {
                let rest = (r * r - partial * partial).max(0.0);
                let inner = self.value(
                    self.g_hat
                        .iter()
                        .zip(&self.lambdas)
                        .zip(&degenerate)
                        .enumerate()
                        .filter(|(_, (_, &d))| !d)
                        .map(|(i, ((g, l), _))| (i, g / (floor - l))),
                );
                return inner + 0.5 * floor * rest;
            }
        }
        // boundary solution: ||d(lambda)|| = r for lambda in (floor, floor + |g|/r]
        let mut lo = floor;
        let mut hi = floor + g_norm / r;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.norm_at(mid, &none) > r {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.value(self.g_hat.iter().zip(&self.lambdas).map(|(g, l)| g / (hi - l)).enumerate())
    }
}

/// l-infinity ball: every corner for `d <= 8` plus seeded projected ascent.
struct LinfBox {
    g: DVector<f64>,
    h: DMatrix<f64>,
    seed: u64,
}

impl LinfBox {
    const STARTS: usize = 16;
    const ITERS: usize = 300;
    const MAX_ENUM_DIM: usize = 8;

    fn model(&self, d: &DVector<f64>) -> f64 {
        self.g.dot(d) + 0.5 * d.dot(&(&self.h * d))
    }
}

impl BallMaximizer for LinfBox {
    fn max_increase(&self, r: f64) -> f64 {
        let n = self.g.len();
        let mut best = 0.0f64;
        if n <= Self::MAX_ENUM_DIM {
            for mask in 0u32..(1 << n) {
                let d = DVector::from_iterator(n, (0..n).map(|i| if mask >> i & 1 == 1 { r } else { -r }));
                best = best.max(self.model(&d));
            }
        }
        let lip = self.h.iter().map(|x| x.abs()).sum::<f64>().max(1e-12);
        let step = 1.0 / lip;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        for _ in 0..Self::STARTS {
            let mut d = DVector::from_iterator(n, (0..n).map(|_| rng.gen_range(-r..=r)));
            for _ in 0..Self::ITERS {
                let grad = &self.g + &self.h * &d;
                d += grad * step;
                d.apply(|x| *x = x.clamp(-r, r));
            }
            best = best.max(self.model(&d));
        }
        best
    }
}

fn bisect_radius(c: f64, feasible: impl Fn(f64) -> bool) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("loss increase must be > 0, got {c}")));
    }
    if !feasible(R_MAX) {
        return Err(Error::Infeasible { r_max: R_MAX });
    }
    let (mut lo, mut hi) = (0.0, R_MAX);
    while hi - lo > RADIUS_TOL {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Smallest radius whose ball contains a perturbation raising the local
/// quadratic model `g^T d + 1/2 d^T H d` by at least `c`, to within
/// [`RADIUS_TOL`].
pub fn min_perturbation_bruteforce(problem: &AnalyticProblem, c: f64, norm: Norm) -> Result<f64> {
    min_perturbation_seeded(problem, c, norm, 0)
}

/// [`min_perturbation_bruteforce`] with an explicit seed for the ascent starts.
pub fn min_perturbation_seeded(problem: &AnalyticProblem, c: f64, norm: Norm, seed: u64) -> Result<f64> {
    let g = problem.gradient();
    let h = problem.hessian();
    let solver: Box<dyn BallMaximizer> = match norm {
        Norm::L2 => Box::new(L2Ball::new(&g, &h)),
        Norm::Linf => Box::new(LinfBox { g, h, seed }),
    };
    bisect_radius(c, |r| solver.max_increase(r) >= c)
}

/// Same search on the exact loss `L(w + d) - L(w)`, maximized by projected
/// gradient ascent from the quadratic-model maximizer directions and seeded
/// random starts. Exposes where the quadratic model misjudges the minimum.
pub fn min_perturbation_true_loss(problem: &AnalyticProblem, c: f64, norm: Norm, seed: u64) -> Result<f64> {
    let n = problem.dim();
    let base = problem.loss_at(&problem.w);
    let project = |d: &mut DVector<f64>, r: f64| match norm {
        Norm::L2 => {
            let m = d.norm();
            if m > r {
                *d *= r / m;
            }
        }
        Norm::Linf => d.apply(|x| *x = x.clamp(-r, r)),
    };
    let max_increase = |r: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g0 = problem.gradient();
        let mut starts = vec![match norm {
            Norm::L2 => g0.clone() * (r / g0.norm().max(1e-300)),
            Norm::Linf => g0.map(|x| r * x.signum()),
        }];
        for _ in 0..LinfBox::STARTS {
            let mut d = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            project(&mut d, r);
            starts.push(d);
        }
        let mut best = 0.0f64;
        for mut d in starts {
            let mut step = r.max(1e-12);
            let mut f = problem.loss_at(&(&problem.w + &d)) - base;
            for _ in 0..200 {
                let g = problem.gradient_at(&(&problem.w + &d));
                let gn = g.norm();
                if gn == 0.0 {
                    break;
                }
                let mut cand = &d + g * (step / gn);
                project(&mut cand, r);
                let fc = problem.loss_at(&(&problem.w + &cand)) - base;
                if fc > f {
                    d = cand;
                    f = fc;
                } else {
                    step *= 0.5;
                    if step < 1e-12 * r.max(1.0) {
                        break;
                    }
                }
            }
            best = best.max(f);
        }
        best
    };
    bisect_radius(c, |r| max_increase(r) >= c)
}

/// One random problem of the bound sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub trial: usize,
    pub dim: usize,
    pub c: f64,
    pub v: f64,
    pub g_norm2: f64,
    pub g_norm1: f64,
    pub lower_bound_l2: f64,
    pub lower_bound_linf: f64,
    pub bruteforce_l2: f64,
    pub bruteforce_linf: f64,
    /// `bruteforce / lower_bound`, at least one when the bound holds.
    pub slack_l2: f64,
    pub slack_linf: f64,
}

impl BoundReport {
    /// Evaluates both bounds and both brute-force radii of the local model;
    /// `n` for the l-infinity bound is the number of coordinates.
    pub fn evaluate(trial: usize, g: &DVector<f64>, h: &DMatrix<f64>, c: f64, seed: u64) -> Result<Self> {
        let problem = AnalyticProblem::local_quadratic(g.clone(), h.clone())?;
        let v = problem.top_eigenvalue().max(0.0);
        let g_norm2 = g.norm();
        let g_norm1 = g.lp_norm(1);
        let lower_bound_l2 = lower_bound_l2(g_norm2, v, c)?;
        let lower_bound_linf = lower_bound_linf(g_norm1, v, c, g.len())?;
        let bruteforce_l2 = min_perturbation_seeded(&problem, c, Norm::L2, seed)?;
        let bruteforce_linf = min_perturbation_seeded(&problem, c, Norm::Linf, seed)?;
        Ok(Self {
            trial,
            dim: g.len(),
            c,
            v,
            g_norm2,
            g_norm1,
            lower_bound_l2,
            lower_bound_linf,
            bruteforce_l2,
            bruteforce_linf,
            slack_l2: bruteforce_l2 / lower_bound_l2,
            slack_linf: bruteforce_linf / lower_bound_linf,
        })
    }

    pub fn violated(&self, tol: f64) -> (bool, bool) {
        (
            self.bruteforce_l2 < self.lower_bound_l2 - tol,
            self.bruteforce_linf < self.lower_bound_linf - tol,
        )
    }
}

/// Random PSD problem: `d` uniform in `[2, dim_max]`, `H = B B^T / d` with a
/// random rank, Gaussian `g` of random scale, `c` uniform in `[0.01, 1]`.
pub fn random_problem(seed: u64, dim_max: usize) -> (DVector<f64>, DMatrix<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(2..=dim_max.max(2));
    let rank = rng.gen_range(1..=d);
    let h_scale = rng.gen_range(0.1..5.0);
    let b = DMatrix::from_fn(d, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    let h = (&b * b.transpose()) * (h_scale / d as f64);
    let h = (&h + h.transpose()) * 0.5;
    let g_scale = rng.gen_range(0.1..3.0);
    let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * g_scale);
    let c = rng.gen_range(0.01..=1.0);
    (g, h, c)
}

pub const BOUND_TOL: f64 = 1e-6;

/// `trials` random problems in parallel, reported in trial order.
pub fn bound_sweep(trials: usize, dim_max: usize, seed: u64) -> Result<Vec<BoundReport>> {
    if dim_max < 2 {
        return Err(Error::InvalidArgument(format!("dim_max must be >= 2, got {dim_max}")));
    }
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let s = indexed_seed(seed, "bound", i as u64);
            let (g, h, c) = random_problem(s, dim_max);
            BoundReport::evaluate(i, &g, &h, c, s)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundSummary {
    pub trials: usize,
    pub violations_l2: usize,
    pub violations_linf: usize,
    pub median_slack_l2: Option<f64>,
    pub median_slack_linf: Option<f64>,
}

impl BoundSummary {
    pub fn violations(&self) -> usize {
        self.violations_l2 + self.violations_linf
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    })
}

pub fn summarize(reports: &[BoundReport]) -> BoundSummary {
    let mut s2: Vec<f64> = reports.iter().map(|r| r.slack_l2).collect();
    let mut si: Vec<f64> = reports.iter().map(|r| r.slack_linf).collect();
    BoundSummary {
        trials: reports.len(),
        violations_l2: reports.iter().filter(|r| r.violated(BOUND_TOL).0).count(),
        violations_linf: reports.iter().filter(|r| r.violated(BOUND_TOL).1).count(),
        median_slack_l2: median(&mut s2),
        median_slack_linf: median(&mut si),
    }
}

/// Header row followed by one row per report.
pub fn write_bounds_csv<W: Write>(reports: &[BoundReport], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record([
        "trial",
        "dim",
        "c",
        "v",
        "g_norm2",
        "g_norm1",
        "lower_bound_l2",
        "lower_bound_linf",
        "bruteforce_l2",
        "bruteforce_linf",
        "slack_l2",
        "slack_linf",
    ])?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `||H z||_2` over the perturbable entries, with `H z` from a forward
/// difference of step `h` and `z` the layer-scaled gradient direction.
pub fn curvature_along_perturbation(objective: &dyn Objective, params: &ParamSet, h: f64) -> Result<f64> {
    let (_, grad) = objective.loss_and_grad(params)?;
    let z = layer_perturbation(params, &grad, PerturbationScaling::LayerNorm)?;
    let hz = hvp_fd_from(objective, params, &grad, &z, h)?;
    Ok(perturbable_norm(params, &hz))
}

fn perturbable_norm(params: &ParamSet, g: &GradientSet) -> f64 {
    params
        .trainable()
        .zip(g.iter())
        .filter(|(e, _)| e.perturbable())
        .map(|(_, (_, t))| t.norm_l2().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Dataset mean of [`curvature_along_perturbation`] over fixed in-order
/// batches of `batch_size`, weighted by batch size, with batch normalization
/// in evaluation mode.
pub fn hessian_norm_metric(
    spec: &ModelSpec,
    params: &ParamSet,
    dataset: &LabeledDataset,
    h: f64,
    batch_size: usize,
) -> Result<f64> {
    let batches: Vec<LabeledBatch> = dataset.sequential_batches(batch_size.max(1)).collect();
    let parts = batches
        .par_iter()
        .map(|batch| {
            let objective = ModelObjective {
                spec,
                batch,
                mode: BnMode::Eval,
            };
            curvature_along_perturbation(&objective, params, h).map(|m| m * batch.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.iter().sum::<f64>() / dataset.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContourGrid {
    pub half_width: f64,
    pub steps: usize,
}

impl ContourGrid {
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            v.push(format!("{prefix}.half_width: must be > 0, got {}", self.half_width));
        }
        if self.steps < 3 || self.steps % 2 == 0 {
            v.push(format!("{prefix}.steps: must be odd and >= 3, got {}", self.steps));
        }
        v
    }

    /// Symmetric coordinates with an exact zero in the middle.
    pub fn coords(&self) -> Vec<f64> {
        let last = (self.steps - 1) as f64;
        (0..self.steps)
            .map(|i| self.half_width * (2.0 * i as f64 - last) / last)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Contour {
    pub coords: Vec<f64>,
    /// `losses[i][j]` is the loss at `(coords[i], coords[j])`.
    pub losses: Vec<Vec<f64>>,
}

impl Contour {
    pub fn center(&self) -> f64 {
        let m = self.coords.len() / 2;
        self.losses[m][m]
    }

    /// `a,b,loss` rows, `a` outermost.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["a", "b", "loss"])?;
        for (i, a) in self.coords.iter().enumerate() {
            for (j, b) in self.coords.iter().enumerate() {
                w.serialize((a, b, self.losses[i][j]))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Gaussian direction rescaled per perturbable entry to that entry's norm;
/// other entries are zero.
pub fn normalized_direction(params: &ParamSet, rng: &mut ChaCha8Rng) -> GradientSet {
    GradientSet::new(
        params
            .trainable()
            .map(|e| {
                let shape = e.tensor.shape();
                if !e.perturbable() {
                    return (e.name.clone(), Tensor::zeros(shape));
                }
                let raw: Vec<f64> = (0..e.tensor.numel()).map(|_| rng.sample(StandardNormal)).collect();
                let raw = Tensor::new(shape.to_vec(), raw).expect("numel matches");
                let n = raw.norm_l2();
                let scale = if n > 0.0 { e.tensor.norm_l2() / n } else { 0.0 };
                (e.name.clone(), raw.scale(scale))
            })
            .collect(),
    )
}

/// Loss of `params + a d1 + b d2` over the grid for two seeded directions.
/// The center cell is evaluated on `params` itself.
pub fn loss_contour_with(
    loss: &(dyn Fn(&ParamSet) -> Result<f64> + Sync),
    params: &ParamSet,
    grid: &ContourGrid,
    seed: u64,
) -> Result<Contour> {
    if let Some(v) = grid.violations("contour").pop() {
        return Err(Error::InvalidArgument(v));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = normalized_direction(params, &mut rng);
    let d2 = normalized_direction(params, &mut rng);
    let coords = grid.coords();
    let cells: Vec<(f64, f64)> = coords
        .iter()
        .flat_map(|&a| coords.iter().map(move |&b| (a, b)))
        .collect();
    let values = cells
        .par_iter()
        .map(|&(a, b)| {
            if a == 0.0 && b == 0.0 {
                return loss(params);
            }
            let mut moved = params.offset(a, &d1)?;
            moved.add_scaled(b, &d2)?;
            loss(&moved)
        })
        .collect::<Result<Vec<_>>>()?;
    let losses = values.chunks(coords.len()).map(|r| r.to_vec()).collect();
    Ok(Contour { coords, losses })
}

/// Evaluation-mode dataset loss over a contour grid.
pub fn loss_contour(
    spec: &ModelSpec,
    params: &ParamSet,
    dataset: &LabeledDataset,
    grid: &ContourGrid,
    seed: u64,
    batch_size: usize,
) -> Result<Contour> {
    let loss = |p: &ParamSet| models::evaluate(spec, p, dataset, batch_size).map(|(l, _)| l);
    loss_contour_with(&loss, params, grid, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::trainers::{BatchObjective, QuadraticLoss};

    const ALIGNED: f64 = 0.366_025_403_784_438_6;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(v))
    }

    #[test]
    fn l2_bound_values() {
        assert!((lower_bound_l2(1.0, 2.0, 0.5).unwrap() - ALIGNED).abs() < 1e-15);
        assert_eq!(lower_bound_l2(2.0, 0.0, 0.5).unwrap(), 0.25);
        assert_eq!(lower_bound_l2(2.0, 0.0, 1.0).unwrap(), 0.5);
        assert!(lower_bound_l2(0.0, 0.0, 1.0).is_err());
        assert!(lower_bound_l2(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn l2_bound_matches_textbook_form() {
        for &(g, v, c) in &[(1.0f64, 2.0f64, 0.5f64), (0.3, 7.0, 0.1), (5.0, 0.01, 0.9)] {
            let textbook = g / v * ((1.0 + 2.0 * v * c / (g * g)).sqrt() - 1.0);
            let got = lower_bound_l2(g, v, c).unwrap();
            assert!((got - textbook).abs() <= 1e-12 * textbook, "{got} {textbook}");
        }
    }

    #[test]
    fn linf_bound_reduces_in_one_dimension() {
        assert_eq!(lower_bound_linf(1.0, 2.0, 0.5, 1).unwrap(), lower_bound_l2(1.0, 2.0, 0.5).unwrap());
        assert!(lower_bound_linf(1.0, 2.0, 0.5, 0).is_err());
    }

    #[test]
    fn bounds_decrease_in_v() {
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for k in 0..50 {
            let v = 0.1 * k as f64;
            let cur = (lower_bound_l2(0.7, v, 0.3).unwrap(), lower_bound_linf(1.3, v, 0.3, 5).unwrap());
            assert!(cur.0 < prev.0 && cur.1 < prev.1);
            prev = cur;
        }
    }

    #[test]
    fn aligned_case_meets_bound() {
        let p = AnalyticProblem::local_quadratic(DVector::from_row_slice(&[1.0, 0.0]), diag(&[2.0, 0.0])).unwrap();
        let r = min_perturbation_bruteforce(&p, 0.5, Norm::L2).unwrap();
        assert!((r - ALIGNED).abs() < 1e-6, "{r}");
    }

    #[test]
    fn linear_problems_are_holder_tight() {
        let g = DVector::from_row_slice(&[0.5, -1.5, 2.0]);
        let p = AnalyticProblem::local_quadratic(g.clone(), DMatrix::zeros(3, 3)).unwrap();
        let r2 = min_perturbation_bruteforce(&p, 0.7, Norm::L2).unwrap();
        assert!((r2 - 0.7 / g.norm()).abs() < 1e-6);
        let ri = min_perturbation_bruteforce(&p, 0.7, Norm::Linf).unwrap();
        assert!((ri - 0.7 / 4.0).abs() < 1e-6);
    }

    #[test]
    fn hard_case_and_negative_curvature() {
        // gradient orthogonal to the top eigenvector
        let p = AnalyticProblem::local_quadratic(DVector::from_row_slice(&[0.0, 1.0]), diag(&[4.0, 1.0])).unwrap();
        let r = min_perturbation_bruteforce(&p, 0.5, Norm::L2).unwrap();
        // for r >= 1/3 the maximum is 2 r^2 + 1/6
        assert!((r - (1.0f64 / 6.0).sqrt()).abs() < 1e-6, "{r}");
        // concave model: the increase saturates at g^T H^-1 g / 2
        let p = AnalyticProblem::local_quadratic(DVector::from_row_slice(&[1.0]), diag(&[-1.0])).unwrap();
        assert!((min_perturbation_bruteforce(&p, 0.3, Norm::L2).unwrap() - (1.0 - 0.4f64.sqrt())).abs() < 1e-6);
        assert!(matches!(
            min_perturbation_bruteforce(&p, 0.6, Norm::L2),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn small_sweep_has_no_violations() {
        let reports = bound_sweep(40, 8, 11).unwrap();
        let s = summarize(&reports);
        assert_eq!(s.violations(), 0);
        assert!(s.median_slack_l2.unwrap() >= 1.0 - 1e-6);
        assert_eq!(reports, bound_sweep(40, 8, 11).unwrap());
    }

    #[test]
    fn true_loss_matches_quadratic_on_quadratics() {
        let p = AnalyticProblem::quadratic(diag(&[2.0, 0.5]), DVector::from_row_slice(&[0.3, -0.2]), DVector::from_row_slice(&[0.4, 1.0]))
            .unwrap();
        for norm in [Norm::L2, Norm::Linf] {
            let a = min_perturbation_bruteforce(&p, 0.4, norm).unwrap();
            let b = min_perturbation_true_loss(&p, 0.4, norm, 5).unwrap();
            assert!((a - b).abs() < 1e-5, "{norm:?}: {a} vs {b}");
        }
    }

    #[test]
    fn logistic_derivatives() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, -1.1]);
        let p = AnalyticProblem::logistic(x, vec![1.0, 0.0, 1.0], DVector::from_row_slice(&[0.2, -0.4])).unwrap();
        let g = p.gradient();
        let eps = 1e-6;
        for i in 0..2 {
            let mut e = DVector::zeros(2);
            e[i] = eps;
            let fd = (p.loss_at(&(&p.w + &e)) - p.loss_at(&(&p.w - &e))) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-8);
        }
        assert!(p.top_eigenvalue() > 0.0);
    }

    #[test]
    fn quadratic_curvature_metric_is_exact() {
        let a = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let q = QuadraticLoss::new(a, None).unwrap();
        let p = q.params(&[1.0, 1.0]).unwrap();
        let batch = QuadraticLoss::batch();
        let obj = BatchObjective::new(&q, &batch);
        // g = (2, 4), z = sqrt(2) g / sqrt(20), A z
        let s = 2f64.sqrt() / 20f64.sqrt();
        let want = (16.0f64 + 256.0).sqrt() * s;
        let got = curvature_along_perturbation(&obj, &p, 0.5).unwrap();
        assert!((got - want).abs() < 1e-12 * want);
    }

    #[test]
    fn linear_model_has_flat_metric_and_planar_contour() {
        let spec = ModelSpec::mlp(&[3, 2]);
        let params = models::build(&spec, 4).unwrap();
        let ds = crate::data::make_synthetic(crate::data::SyntheticKind::Gaussians, 12, 2, 1).unwrap();
        let ds = LabeledDataset::new(
            Tensor::new(vec![12, 3], ds.inputs().data().iter().cycle().take(36).copied().collect()).unwrap(),
            ds.labels().to_vec(),
            2,
        )
        .unwrap();
        // the linear score w.x is linear in the weights
        let score = |p: &ParamSet| -> Result<f64> {
            let logits = models::predict(&spec, p, ds.inputs(), BnMode::Eval)?;
            Ok(logits.data().iter().sum())
        };
        let grid = ContourGrid { half_width: 1.0, steps: 5 };
        let c = loss_contour_with(&score, &params, &grid, 9).unwrap();
        for i in 0..5 {
            for j in 1..4 {
                let along_b = c.losses[i][j - 1] - 2.0 * c.losses[i][j] + c.losses[i][j + 1];
                let along_a = c.losses[j - 1][i] - 2.0 * c.losses[j][i] + c.losses[j + 1][i];
                assert!(along_a.abs() <= 1e-9 && along_b.abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn linear_objective_has_zero_curvature() {
        let obj = crate::objective::TapeObjective::new(|g: &mut crate::autodiff::Graph, v: &[crate::autodiff::Var]| {
            let c = g.constant(Tensor::from_vec(vec![0.3, -1.2, 2.5]));
            let cw = g.mul(c, v[0])?;
            g.sum(cw)
        });
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(vec![0.1, 0.7, -0.4]), ParamKind::Weight).unwrap();
        assert!(curvature_along_perturbation(&obj, &p, 0.5).unwrap() <= 1e-8);
    }

    #[test]
    fn contour_center_is_plain_loss() {
        let spec = ModelSpec::mlp(&[2, 5, 3]);
        let params = models::build(&spec, 2).unwrap();
        let ds = crate::data::make_synthetic(crate::data::SyntheticKind::Gaussians, 30, 3, 1).unwrap();
        let grid = ContourGrid { half_width: 0.5, steps: 3 };
        let c = loss_contour(&spec, &params, &ds, &grid, 3, 7).unwrap();
        let (plain, _) = models::evaluate(&spec, &params, &ds, 7).unwrap();
        assert_eq!(c.center().to_bits(), plain.to_bits());
        assert_ne!(c.losses[0][0], c.losses[2][2]);
        assert_eq!(grid.coords(), vec![-0.5, 0.0, 0.5]);
        assert!(ContourGrid { half_width: 1.0, steps: 4 }.violations("c").len() == 1);
    }

    #[test]
    fn direction_is_layer_normalized() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::from_vec(vec![3.0, 4.0]), ParamKind::Weight).unwrap();
        p.push("b", Tensor::from_vec(vec![1.0]), ParamKind::Bias).unwrap();
        let d = normalized_direction(&p, &mut ChaCha8Rng::seed_from_u64(0));
        assert!((d.get("a").unwrap().norm_l2() - 5.0).abs() < 1e-12);
        assert_eq!(d.get("b").unwrap().data(), &[0.0]);
    }
}
