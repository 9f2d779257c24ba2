//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! exits non-zero when any of them fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use hero_core::data::{self, LabeledBatch, NoiseSpec, SyntheticKind};
use hero_core::experiment::{self, ExperimentConfig};
use hero_core::models::{self, BnMode, ModelSpec};
use hero_core::quantizer::{quantize_tensor, Grid, QuantSpec, RangePolicy};
use hero_core::robustness::{self, lower_bound_l2, lower_bound_linf, median, AnalyticProblem, Norm};
use hero_core::trainers::{
    first_order_step, grad_l1_step, hero_step, sgd_step, step_direction, BatchObjective, QuadraticLoss, Rule,
    StepMetrics, TrainerConfig, TrainerState,
};
use hero_core::{hvp_fd, GradientSet, ParamSet, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_hero-lab")
}

// ---------------------------------------------------------------------------
// 1, 2: perturbation bounds

fn bound_suite() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bounds.csv");
    let start = Instant::now();
    let out = Command::new(bin())
        .args(["bound-check", "--trials", "1000", "--dim-max", "8", "--out"])
        .arg(&csv)
        .env("HERO_LAB_THREADS", "1")
        .output()
        .unwrap();
    let elapsed = start.elapsed();
    if !out.status.success() {
        return Err(format!("bound-check exited with {}", out.status));
    }
    let line = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = line.split_whitespace().collect();
    let violations: usize = fields[3].parse().unwrap();
    let median_l2 = fields[fields.len() - 3];

    let mut aligned = 0.0f64;
    for (v, s, c) in [(1.0, 0.5, 0.1), (4.0, 2.0, 0.7), (0.3, 0.01, 1.0), (2.5, 1.0, 0.05)] {
        for d in [2, 5, 8] {
            let mut h = DMatrix::zeros(d, d);
            h[(0, 0)] = v;
            let mut g = DVector::zeros(d);
            g[0] = s;
            let problem = AnalyticProblem::local_quadratic(g, h).unwrap();
            let brute = robustness::min_perturbation_bruteforce(&problem, c, Norm::L2).unwrap();
            aligned = aligned.max((brute - lower_bound_l2(s, v, c).unwrap()).abs());
        }
    }
    check(
        violations == 0 && aligned <= 1e-5 && elapsed <= Duration::from_secs(120),
        format!(
            "violations {violations}, median l2 slack {median_l2}, aligned gap {aligned:.2e}, {:.1}s single-threaded",
            elapsed.as_secs_f64()
        ),
    )
}

fn linf_limit() -> Outcome {
    let mut worst = 0.0f64;
    for n in [10, 100] {
        for c in [0.01, 0.1, 0.5, 1.0, 5.0] {
            for v in [0.1, 0.5, 1.0, 3.0, 10.0] {
                let got = lower_bound_linf(1e-9, v, c, n).unwrap();
                let want = (2.0 * c / (n as f64 * v)).sqrt();
                worst = worst.max((got - want).abs() / want);
            }
        }
    }
    check(worst <= 1e-4, format!("max relative deviation {worst:.2e} over 50 points"))
}

// ---------------------------------------------------------------------------
// 3: autodiff

fn random_batch(rng: &mut ChaCha8Rng, spec: &ModelSpec, n: usize) -> LabeledBatch {
    let mut shape = vec![n];
    shape.extend(&spec.input_shape);
    let data = (0..n * spec.input_len()).map(|_| rng.sample(StandardNormal)).collect();
    LabeledBatch {
        inputs: Tensor::new(shape, data).unwrap(),
        labels: (0..n).map(|_| rng.gen_range(0..spec.classes)).collect(),
    }
}

fn random_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    let classes = rng.gen_range(2..=4);
    let bn = rng.gen_bool(0.5);
    if rng.gen_bool(0.5) {
        let mut widths = vec![rng.gen_range(2..=6)];
        for _ in 0..rng.gen_range(1..=2) {
            widths.push(rng.gen_range(2..=6));
        }
        widths.push(classes);
        ModelSpec {
            batch_norm: bn,
            ..ModelSpec::mlp(&widths)
        }
    } else {
        let side = rng.gen_range(4..=6);
        let channels: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(2..=3)).collect();
        ModelSpec {
            batch_norm: bn,
            ..ModelSpec::smallconv(&[rng.gen_range(1..=2), side, side], &channels, classes)
        }
    }
}

/// Built parameters plus Gaussian noise on every entry, so zero biases do not
/// park pre-activations exactly on a ReLU kink.
fn random_params(rng: &mut ChaCha8Rng, spec: &ModelSpec, seed: u64) -> ParamSet {
    let mut p = models::build(spec, seed).unwrap();
    for e in p.entries_mut() {
        for x in e.tensor.data_mut() {
            *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

fn nudged(params: &ParamSet, name: &str, i: usize, delta: f64) -> ParamSet {
    let mut p = params.clone();
    p.entries_mut().iter_mut().find(|e| e.name == name).unwrap().tensor.data_mut()[i] += delta;
    p
}

fn gradient_check() -> Outcome {
    const STEP: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    for trial in 0..50 {
        let spec = random_spec(&mut rng);
        let params = random_params(&mut rng, &spec, trial);
        let n = rng.gen_range(3..=5);
        let batch = random_batch(&mut rng, &spec, n);
        let loss = |p: &ParamSet| models::forward(&spec, p, &batch, BnMode::Train).unwrap().loss_value();
        let grad = models::forward(&spec, &params, &batch, BnMode::Train).unwrap().backward().unwrap();
        for (name, g) in grad.iter() {
            for i in 0..g.numel() {
                let numeric =
                    (loss(&nudged(&params, name, i, STEP)) - loss(&nudged(&params, name, i, -STEP))) / (2.0 * STEP);
                let a = g.data()[i];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
                coords += 1;
            }
        }
    }

    let mut hvp_worst = 0.0f64;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let d = rng.gen_range(2..=10);
        let b = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = (&b + b.transpose()) * 0.5;
        let q = QuadraticLoss::new(
            Tensor::new(vec![d, d], a.transpose().as_slice().to_vec()).unwrap(),
            Some(Tensor::from_vec((0..d).map(|_| rng.sample(StandardNormal)).collect())),
        )
        .unwrap();
        let w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let params = q.params(&w).unwrap();
        let batch = QuadraticLoss::batch();
        let obj = BatchObjective::new(&q, &batch);
        let dir = GradientSet::new(vec![("w".into(), Tensor::from_vec(v.clone()))]);
        let got = hvp_fd(&obj, &params, &dir, 1e-3).unwrap();
        let want = &a * DVector::from_vec(v);
        let got = DVector::from_vec(got.get("w").unwrap().data().to_vec());
        hvp_worst = hvp_worst.max((&got - &want).norm() / want.norm());
    }
    check(
        worst <= 1e-4 && hvp_worst <= 1e-10,
        format!("gradient check {coords} coordinates, max relative error {worst:.2e}; hvp_fd max relative error {hvp_worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 4, 5, 12: trainer

type StepFn =
    fn(&ModelSpec, &mut ParamSet, &mut TrainerState, &TrainerConfig, &LabeledBatch) -> hero_core::Result<StepMetrics>;

fn bits(p: &ParamSet) -> Vec<u64> {
    p.entries()
        .iter()
        .flat_map(|e| e.tensor.data().iter())
        .chain(p.buffers().iter().flat_map(|(_, t)| t.data().iter()))
        .map(|x| x.to_bits())
        .collect()
}

fn identical_trajectories(seed: u64, a: (StepFn, TrainerConfig), b: (StepFn, TrainerConfig)) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_spec(&mut rng);
    let mut pa = models::build(&spec, seed).unwrap();
    let mut pb = pa.clone();
    let mut sa = TrainerState::new(&pa, 10);
    let mut sb = TrainerState::new(&pb, 10);
    (0..10).all(|_| {
        let batch = random_batch(&mut rng, &spec, 6);
        (a.0)(&spec, &mut pa, &mut sa, &a.1, &batch).unwrap();
        (b.0)(&spec, &mut pb, &mut sb, &b.1, &batch).unwrap();
        bits(&pa) == bits(&pb)
    })
}

fn reduction_identities() -> Outcome {
    let hero = TrainerConfig {
        gamma: 0.0,
        ..TrainerConfig::new(Rule::Hero)
    };
    let fo = TrainerConfig::new(Rule::FirstOrder);
    let l1 = TrainerConfig {
        beta: 0.0,
        ..TrainerConfig::new(Rule::GradL1)
    };
    let sgd = TrainerConfig::new(Rule::Sgd);
    let pair1 = identical_trajectories(5, (hero_step, hero), (first_order_step, fo));
    let pair2 = identical_trajectories(6, (grad_l1_step, l1), (sgd_step, sgd));
    check(
        pair1 && pair2,
        format!("hero(gamma=0) == first_order: {pair1}; grad_l1(beta=0) == sgd: {pair2}; 10 steps each"),
    )
}

fn hero_closed_form() -> Outcome {
    let mut worst_g = 0.0f64;
    let mut worst_w = 0.0f64;
    let mut worst_z = 0.0f64;
    for trial in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + trial);
        let d = rng.gen_range(2..=6);
        let b = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = (&b + b.transpose()) * 0.5;
        let q = QuadraticLoss::new(Tensor::new(vec![d, d], a.transpose().as_slice().to_vec()).unwrap(), None).unwrap();
        let w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let params = q.params(&w).unwrap();
        for h in [0.25, 0.5, 1.0, 2.0] {
            let cfg = TrainerConfig {
                h,
                gamma: 0.1,
                ..TrainerConfig::new(Rule::Hero)
            };
            let out = step_direction(&q, &params, &cfg, &QuadraticLoss::batch(), 0).unwrap();
            let z = DVector::from_vec(out.perturbation.unwrap().get("w").unwrap().data().to_vec());
            let az = &a * &z;
            let g_want = h * h * az.norm_squared();
            worst_g = worst_g.max((out.metrics.regularizer.unwrap() - g_want).abs() / g_want);
            let grad = DVector::from_vec(out.penalty_grad.unwrap().get("w").unwrap().data().to_vec());
            let ata_z = a.transpose() * &az;
            // gradient with respect to the perturbed weights, and by the chain
            // rule W* = W + h z the gradient with respect to z
            let wrt_w = &ata_z * (2.0 * h);
            let wrt_z = &ata_z * (2.0 * h * h);
            worst_w = worst_w.max((&grad - &wrt_w).norm() / wrt_w.norm());
            worst_z = worst_z.max((&grad * h - &wrt_z).norm() / wrt_z.norm());
        }
    }
    check(
        worst_g <= 1e-8 && worst_w <= 1e-8 && worst_z <= 1e-8,
        format!(
            "G vs h^2|Az|^2 {worst_g:.2e}; dG/dW* vs 2h A^T A z {worst_w:.2e}; dG/dz vs 2h^2 A^T A z {worst_z:.2e}"
        ),
    )
}

fn step_cost() -> Outcome {
    let spec = ModelSpec {
        batch_norm: true,
        ..ModelSpec::mlp(&[20, 16, 10])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut params = models::build(&spec, 12).unwrap();
    let mut state = TrainerState::new(&params, 5);
    let cfg = TrainerConfig::new(Rule::Hero);
    let mut counts = Vec::new();
    for _ in 0..5 {
        let batch = random_batch(&mut rng, &spec, 16);
        let p = hero_step(&spec, &mut params, &mut state, &cfg, &batch).unwrap().passes;
        counts.push((p.forward, p.loss_backward, p.regularizer_backward));
    }
    check(
        counts.iter().all(|c| c.1 == 2 && c.2 == 1),
        format!("per step (forward, loss backward, regularizer backward) = {:?}", counts[0]),
    )
}

// ---------------------------------------------------------------------------
// 6: quantizer

fn quantizer_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut failures = Vec::new();
    for t in 0..100 {
        let n = rng.gen_range(1..=400);
        let scale: f64 = rng.gen_range(1e-3..10.0);
        let mut values: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
        if t % 10 == 0 {
            values[0] *= 50.0;
        }
        let tensor = Tensor::from_vec(values.clone());
        for b in [2, 4, 8] {
            let spec = QuantSpec::new(b, RangePolicy::MinmaxAsymmetric).unwrap();
            let q = quantize_tensor(&tensor, &spec);
            let half = Grid::fit(&values, &spec).map_or(0.0, |g| g.step / 2.0);
            let bounded = values.iter().zip(q.data()).all(|(a, b)| (a - b).abs() <= half);
            let again = quantize_tensor(&q, &spec);
            let idempotent = again.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            let mut distinct: Vec<u64> = q.data().iter().map(|x| x.to_bits()).collect();
            distinct.sort_unstable();
            distinct.dedup();
            let levels = distinct.len() as u64 <= spec.levels();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
            let monotone = order.windows(2).all(|w| q.data()[w[0]] <= q.data()[w[1]]);
            if !(bounded && idempotent && levels && monotone) {
                failures.push(format!("tensor {t} bits {b}"));
            }
        }
    }
    check(failures.is_empty(), format!("300 cases, failures {failures:?}"))
}

// ---------------------------------------------------------------------------
// 7, 8, 9: desk-scale runs

struct RunResult {
    eval_acc: f64,
    hessian_norm: f64,
    acc4: f64,
}

impl RunResult {
    fn drop4(&self) -> f64 {
        self.eval_acc - self.acc4
    }
}

struct DeskRuns {
    clean: Vec<(Rule, Vec<RunResult>)>,
    noisy: Vec<(Rule, Vec<RunResult>)>,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

impl DeskRuns {
    fn get<'a>(set: &'a [(Rule, Vec<RunResult>)], rule: Rule) -> &'a [RunResult] {
        &set.iter().find(|(r, _)| *r == rule).unwrap().1
    }
}

fn med(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    median(&mut v).unwrap()
}

fn desk_config(dir: &Path, rule: Rule, noise: f64, seed: u64) -> ExperimentConfig {
    let text = format!(
        r#"{{
  "schema_version": 1,
  "model": {{"kind": "mlp", "widths": [784, 64, 10], "input_shape": [784], "classes": 10}},
  "data": {{"source": "idx", "train_images": "train-images", "train_labels": "train-labels",
           "test_images": "test-images", "test_labels": "test-labels"}},
  "noise": {{"ratio": {noise}}},
  "trainer": {{"rule": "{}", "lr": 0.1, "momentum": 0.9, "weight_decay": 1e-4, "h": 0.5, "gamma": 0.1,
              "epochs": 30, "batch_size": 128}},
  "quant": {{"bits": [2, 3, 4, 6, 8]}},
  "diagnostics": {{"hessian_interval": 30}},
  "seed": {seed},
  "output_dir": "runs/{}-{noise}-{seed}"
}}"#,
        rule.as_str(),
        rule.as_str()
    );
    ExperimentConfig::from_json(&text, dir).unwrap()
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let train = data::make_synthetic(SyntheticKind::Glyphs, 4000, 10, 1).unwrap();
        let test = data::make_synthetic(SyntheticKind::Glyphs, 2000, 10, 2).unwrap();
        data::write_idx(&train, &dir.path().join("train-images"), &dir.path().join("train-labels")).unwrap();
        data::write_idx(&test, &dir.path().join("test-images"), &dir.path().join("test-labels")).unwrap();
        let start = Instant::now();
        let sweep = |rules: &[Rule], noise: f64| -> Vec<(Rule, Vec<RunResult>)> {
            rules
                .iter()
                .map(|&rule| {
                    let runs = (0..3)
                        .map(|seed| {
                            let summary = experiment::run(&desk_config(dir.path(), rule, noise, seed)).unwrap();
                            let last = summary.records.last().unwrap();
                            RunResult {
                                eval_acc: last.eval_acc.unwrap(),
                                hessian_norm: last.hessian_norm.unwrap(),
                                acc4: summary.sweep.iter().find(|r| r.bits == 4).unwrap().eval_acc,
                            }
                        })
                        .collect();
                    (rule, runs)
                })
                .collect()
        };
        let clean = sweep(&[Rule::Sgd, Rule::FirstOrder, Rule::Hero], 0.0);
        let noisy = sweep(&[Rule::Sgd, Rule::Hero], 0.6);
        DeskRuns {
            clean,
            noisy,
            elapsed: start.elapsed(),
            _dir: dir,
        }
    })
}

fn generalization() -> Outcome {
    let runs = desk_runs();
    let sgd = DeskRuns::get(&runs.clean, Rule::Sgd);
    let hero = DeskRuns::get(&runs.clean, Rule::Hero);
    let hn_sgd = med(sgd.iter().map(|r| r.hessian_norm));
    let hn_hero = med(hero.iter().map(|r| r.hessian_norm));
    let acc_sgd = med(sgd.iter().map(|r| r.eval_acc));
    let acc_hero = med(hero.iter().map(|r| r.eval_acc));
    check(
        hn_hero <= 0.5 * hn_sgd && acc_hero >= acc_sgd - 0.002 && runs.elapsed <= Duration::from_secs(15 * 60),
        format!(
            "median hessian norm hero {hn_hero:.4} vs sgd {hn_sgd:.4}; median test acc hero {acc_hero:.4} vs sgd {acc_sgd:.4}; 15 runs in {:.0}s",
            runs.elapsed.as_secs_f64()
        ),
    )
}

fn quantization() -> Outcome {
    let runs = desk_runs();
    let drop = |rule| med(DeskRuns::get(&runs.clean, rule).iter().map(RunResult::drop4));
    let acc = |rule| med(DeskRuns::get(&runs.clean, rule).iter().map(|r| r.eval_acc));
    let (d_sgd, d_fo, d_hero) = (drop(Rule::Sgd), drop(Rule::FirstOrder), drop(Rule::Hero));
    check(
        d_hero < d_sgd && d_hero <= d_fo,
        format!(
            "median 4-bit drop hero {d_hero:.4}, sgd {d_sgd:.4}, first_order {d_fo:.4} (full-precision acc hero {:.4}, sgd {:.4}, first_order {:.4})",
            acc(Rule::Hero),
            acc(Rule::Sgd),
            acc(Rule::FirstOrder)
        ),
    )
}

fn noisy_labels() -> Outcome {
    let runs = desk_runs();
    let acc_sgd = med(DeskRuns::get(&runs.noisy, Rule::Sgd).iter().map(|r| r.eval_acc));
    let acc_hero = med(DeskRuns::get(&runs.noisy, Rule::Hero).iter().map(|r| r.eval_acc));
    check(
        acc_hero - acc_sgd >= 0.01,
        format!("median clean test acc at 60% noise hero {acc_hero:.4} vs sgd {acc_sgd:.4}"),
    )
}

// ---------------------------------------------------------------------------
// 10, 11: data and determinism

fn noise_statistics() -> Outcome {
    let (n, k, ratio) = (4000usize, 10usize, 0.6);
    let ds = data::make_synthetic(SyntheticKind::Gaussians, n, k, 0).unwrap();
    let expected = ratio * (k - 1) as f64 / k as f64;
    // round(ratio * N) labels are redrawn, each changes with probability (K-1)/K
    let redrawn = (ratio * n as f64).round();
    let p = (k - 1) as f64 / k as f64;
    let sigma = (redrawn * p * (1.0 - p)).sqrt() / n as f64;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let noisy = data::inject_symmetric_noise(&ds, &NoiseSpec { ratio, seed }).unwrap();
        let changed = noisy.labels().iter().zip(ds.labels()).filter(|(a, b)| a != b).count();
        worst = worst.max((changed as f64 / n as f64 - expected).abs() / sigma);
    }
    check(worst <= 3.0, format!("max deviation {worst:.2} sigma from {expected} over 20 seeds"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{
  "schema_version": 1,
  "model": {"kind": "mlp", "widths": [2, 16, 4], "input_shape": [2], "classes": 4, "batch_norm": true},
  "data": {"source": "synthetic", "kind": "spirals", "train_size": 400, "test_size": 200},
  "noise": {"ratio": 0.2},
  "trainer": {"rule": "hero", "h": 0.05, "epochs": 6, "batch_size": 32},
  "diagnostics": {"hessian_interval": 2},
  "seed": 42,
  "output_dir": "out"
}"#,
    )
    .unwrap();
    let run = || {
        let status = Command::new(bin()).args(["train", "--config"]).arg(&config).status().unwrap();
        assert!(status.success());
        std::fs::read(dir.path().join("out/metrics.csv")).unwrap()
    };
    let first = run();
    let second = run();
    check(
        first == second,
        format!("two train invocations, metrics.csv {} bytes, identical: {}", first.len(), first == second),
    )
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 perturbation bound suite", bound_suite),
        ("2 l-infinity bound small-gradient limit", linf_limit),
        ("3 autodiff and hvp correctness", gradient_check),
        ("4 reduction identities", reduction_identities),
        ("5 hero penalty closed form", hero_closed_form),
        ("6 quantizer invariants", quantizer_invariants),
        ("7 desk-scale generalization", generalization),
        ("8 desk-scale quantization", quantization),
        ("9 noisy-label accuracy", noisy_labels),
        ("10 noise injection statistics", noise_statistics),
        ("11 determinism", determinism),
        ("12 step cost", step_cost),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
