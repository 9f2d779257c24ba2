//! Declarative experiment configuration and the artifacts a run leaves on
//! disk: `config.resolved.json`, `metrics.csv`, `timing.csv`,
//! `checkpoint.bin`, `quant_sweep.csv` and optionally `contour.csv`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, IdxOptions, LabeledDataset, NoiseSpec, SyntheticKind};
use crate::error::{Error, Result};
use crate::models::{self, ModelSpec};
use crate::params::ParamSet;
use crate::quantizer::{self, QuantSpec, RangePolicy, SweepRow};
use crate::robustness::{self, ContourGrid};
use crate::seeds::{indexed_seed, sub_seed};
use crate::trainers::{self, MetricsRecord, TrainOptions, TrainerConfig};

pub const SCHEMA_VERSION: u32 = 1;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const TIMING_CSV: &str = "timing.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const QUANT_CSV: &str = "quant_sweep.csv";
pub const CONTOUR_CSV: &str = "contour.csv";

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        mean: f64,
        #[serde(default = "one")]
        std: f64,
    },
    Synthetic {
        kind: SyntheticKind,
        train_size: usize,
        test_size: usize,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Fraction of training labels redrawn uniformly; the test set stays clean.
    #[serde(default)]
    pub ratio: f64,
}

fn default_bits() -> Vec<u32> {
    vec![2, 3, 4, 6, 8]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    #[serde(default = "default_bits")]
    pub bits: Vec<u32>,
    #[serde(default)]
    pub range_policy: RangePolicy,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: default_bits(),
            range_policy: RangePolicy::default(),
        }
    }
}

fn default_hessian_h() -> f64 {
    0.5
}
fn default_eval_batch() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    /// Track the curvature metric every this many epochs; 0 disables it.
    #[serde(default)]
    pub hessian_interval: usize,
    /// Finite-difference step of the curvature metric.
    #[serde(default = "default_hessian_h")]
    pub hessian_h: f64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub contour: Option<ContourGrid>,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            hessian_interval: 0,
            hessian_h: default_hessian_h(),
            eval_batch_size: default_eval_batch(),
            contour: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelSpec,
    pub data: DataSource,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub diagnostics: Diagnostics,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Every violated constraint across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            v.push(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        v.extend(self.model.violations("model"));
        v.extend(self.trainer.violations("trainer"));
        v.extend(
            NoiseSpec {
                ratio: self.noise.ratio,
                seed: 0,
            }
            .violations("noise"),
        );
        for &b in &self.quant.bits {
            if QuantSpec::new(b, self.quant.range_policy).is_err() {
                v.push(format!(
                    "quant.bits: {b} outside [{}, {}]",
                    QuantSpec::MIN_BITS,
                    QuantSpec::MAX_BITS
                ));
            }
        }
        let d = &self.diagnostics;
        if !(d.hessian_h > 0.0 && d.hessian_h.is_finite()) {
            v.push(format!("diagnostics.hessian_h: must be > 0, got {}", d.hessian_h));
        }
        if d.eval_batch_size == 0 {
            v.push("diagnostics.eval_batch_size: must be >= 1".into());
        }
        if let Some(grid) = &d.contour {
            v.extend(grid.violations("diagnostics.contour"));
        }
        match &self.data {
            DataSource::Synthetic {
                kind,
                train_size,
                test_size,
            } => {
                let classes = self.model.classes;
                if *train_size < classes.max(2) {
                    v.push(format!("data.train_size: need at least {} samples, got {train_size}", classes.max(2)));
                }
                if *test_size < classes.max(2) {
                    v.push(format!("data.test_size: need at least {} samples, got {test_size}", classes.max(2)));
                }
                let expected: &[usize] = match kind {
                    SyntheticKind::Gaussians | SyntheticKind::Spirals => &[2],
                    SyntheticKind::Glyphs => &[1, 28, 28],
                };
                if self.model.input_len() != expected.iter().product::<usize>() {
                    v.push(format!(
                        "model.input_shape: {:?} does not fit {kind:?} samples of shape {expected:?}",
                        self.model.input_shape
                    ));
                }
            }
            DataSource::Idx { std, .. } => {
                if !(*std > 0.0) {
                    v.push(format!("data.std: must be > 0, got {std}"));
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Parses and validates JSON text; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &mut self.data
        {
            fix(train_images);
            fix(train_labels);
            fix(test_images);
            fix(test_labels);
        }
    }

    /// Pretty JSON with every default written out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            hessian_interval: self.diagnostics.hessian_interval,
            hessian_h: self.diagnostics.hessian_h,
            eval_batch_size: self.diagnostics.eval_batch_size,
        }
    }
}

/// Training set (with label noise applied) and clean test set.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let classes = cfg.model.classes;
    let (train, test) = match &cfg.data {
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            mean,
            std,
        } => {
            let opts = IdxOptions {
                mean: *mean,
                std: *std,
                classes: Some(classes),
            };
            (
                data::load_idx(train_images, train_labels, &opts)?,
                data::load_idx(test_images, test_labels, &opts)?,
            )
        }
        DataSource::Synthetic {
            kind,
            train_size,
            test_size,
        } => (
            data::make_synthetic(*kind, *train_size, classes, indexed_seed(cfg.seed, "data", 0))?,
            data::make_synthetic(*kind, *test_size, classes, indexed_seed(cfg.seed, "data", 1))?,
        ),
    };
    if train.sample_len() != cfg.model.input_len() {
        return Err(Error::Config(vec![format!(
            "model.input_shape: {:?} does not fit samples of shape {:?}",
            cfg.model.input_shape,
            train.sample_shape()
        )]));
    }
    let train = if cfg.noise.ratio > 0.0 {
        data::inject_symmetric_noise(
            &train,
            &NoiseSpec {
                ratio: cfg.noise.ratio,
                seed: sub_seed(cfg.seed, "noise"),
            },
        )?
    } else {
        train
    };
    Ok((train, test))
}

/// Names of the per-layer perturbation columns of `metrics.csv`.
pub fn z_columns(spec: &ModelSpec) -> Result<Vec<String>> {
    let params = models::build(spec, 0)?;
    Ok(params.trainable().filter(|e| e.perturbable()).map(|e| e.name.clone()).collect())
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per epoch; diagnostics that a rule does not produce are empty.
pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], z_names: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "epoch",
        "train_loss",
        "train_acc",
        "eval_loss",
        "eval_acc",
        "hessian_norm",
        "regularizer",
        "lr",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(z_names.iter().map(|n| format!("z_norm.{n}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.train_acc.to_string(),
            opt(r.eval_loss),
            opt(r.eval_acc),
            opt(r.hessian_norm),
            opt(r.regularizer),
            r.lr.to_string(),
        ];
        for name in z_names {
            row.push(opt(r.z_norms.iter().find(|(n, _)| n == name).map(|(_, z)| *z)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "wall_ms"])?;
    for r in records {
        w.write_record([r.epoch.to_string(), r.wall_ms.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// The last epoch row of a `metrics.csv`, keyed by column name.
pub fn read_final_metrics(path: &Path) -> Result<Vec<(String, String)>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let last = r
        .records()
        .last()
        .transpose()?
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no rows", path.display())))?;
    Ok(header.into_iter().zip(last.iter().map(String::from)).collect())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub sweep: Vec<SweepRow>,
}

/// Runs the configured experiment and writes its artifacts.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let (train_set, test_set) = load_data(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join(RESOLVED_CONFIG), cfg.to_json() + "\n")?;

    let outcome = trainers::train(
        &cfg.model,
        &train_set,
        Some(&test_set),
        &cfg.trainer,
        cfg.seed,
        &cfg.train_options(),
    )?;
    write_metrics_csv(&outcome.records, &z_columns(&cfg.model)?, create(&cfg.output_dir.join(METRICS_CSV))?)?;
    write_timing_csv(&outcome.records, create(&cfg.output_dir.join(TIMING_CSV))?)?;
    outcome.params.save(&cfg.output_dir.join(CHECKPOINT))?;

    let batch = cfg.diagnostics.eval_batch_size;
    let sweep = quantizer::sweep(
        &cfg.model,
        &outcome.params,
        &test_set,
        &cfg.quant.bits,
        cfg.quant.range_policy,
        batch,
    )?;
    quantizer::write_sweep_csv(&sweep, create(&cfg.output_dir.join(QUANT_CSV))?)?;

    if let Some(grid) = &cfg.diagnostics.contour {
        let contour = robustness::loss_contour(
            &cfg.model,
            &outcome.params,
            &test_set,
            grid,
            sub_seed(cfg.seed, "contour"),
            batch,
        )?;
        contour.write_csv(create(&cfg.output_dir.join(CONTOUR_CSV))?)?;
    }
    Ok(RunSummary {
        output_dir: cfg.output_dir.clone(),
        records: outcome.records,
        sweep,
    })
}

/// Final metrics and sweep of one configuration, taken from a previous run
/// when its resolved config matches, otherwise from a fresh run.
pub fn run_or_load(cfg: &ExperimentConfig) -> Result<(Vec<(String, String)>, Vec<SweepRow>)> {
    let dir = &cfg.output_dir;
    let previous = fs::read_to_string(dir.join(RESOLVED_CONFIG))
        .ok()
        .and_then(|t| serde_json::from_str::<ExperimentConfig>(&t).ok());
    let cached = previous.as_ref() == Some(cfg) && dir.join(METRICS_CSV).exists() && dir.join(QUANT_CSV).exists();
    if !cached {
        run(cfg)?;
    }
    Ok((read_final_metrics(&dir.join(METRICS_CSV))?, read_sweep_csv(&dir.join(QUANT_CSV))?))
}

/// Side-by-side final accuracies and quantized accuracies, one row per config.
pub fn compare<W: Write>(configs: &[(String, ExperimentConfig)], out: W) -> Result<()> {
    let mut rows = Vec::new();
    let mut bits: Vec<u32> = Vec::new();
    for (label, cfg) in configs {
        let (fin, sweep) = run_or_load(cfg)?;
        for r in &sweep {
            if r.bits != 0 && !bits.contains(&r.bits) {
                bits.push(r.bits);
            }
        }
        rows.push((label.clone(), cfg, fin, sweep));
    }
    bits.sort_unstable();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["config", "rule", "seed", "train_acc", "eval_acc", "gap", "hessian_norm"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(bits.iter().map(|b| format!("acc_{b}bit")));
    w.write_record(&header)?;
    for (label, cfg, fin, sweep) in rows {
        let get = |k: &str| fin.iter().find(|(n, _)| n == k).map(|(_, v)| v.clone()).unwrap_or_default();
        let gap = match (get("train_acc").parse::<f64>(), get("eval_acc").parse::<f64>()) {
            (Ok(a), Ok(b)) => (a - b).to_string(),
            _ => String::new(),
        };
        let mut row = vec![
            label,
            cfg.trainer.rule.as_str().to_string(),
            cfg.seed.to_string(),
            get("train_acc"),
            get("eval_acc"),
            gap,
            get("hessian_norm"),
        ];
        for b in &bits {
            row.push(
                sweep
                    .iter()
                    .find(|r| r.bits == *b)
                    .map(|r| r.eval_acc.to_string())
                    .unwrap_or_default(),
            );
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Model, parameters and clean test set for a finished run directory.
pub fn load_run(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(ParamSet, LabeledDataset)> {
    let params = ParamSet::load(checkpoint)?;
    let (_, test) = load_data(cfg)?;
    Ok((params, test))
}
