use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use hero_core::experiment::{self, ExperimentConfig, RESOLVED_CONFIG};
use hero_core::quantizer::{self, QuantSpec, RangePolicy};
use hero_core::robustness::{self, ContourGrid};
use hero_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Curvature-regularized training lab.
#[derive(Parser)]
#[command(name = "hero-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Post-training quantization sweep of a checkpoint.
    QuantSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bit widths: a range `2..16` or a list `2,4,8`.
        #[arg(long, default_value = "2..16")]
        bits: String,
        /// Run configuration; defaults to the resolved config next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_policy)]
        range_policy: Option<RangePolicy>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare closed-form perturbation bounds with brute-force minima.
    BoundCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 8)]
        dim_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss over a plane spanned by two random layer-normalized directions.
    Contour {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        half_width: f64,
        #[arg(long, default_value_t = 41)]
        steps: usize,
        /// Direction seed; defaults to the run's contour seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run (or reuse) several configurations and join their final metrics.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_policy(s: &str) -> Result<RangePolicy, String> {
    match s {
        "minmax_asymmetric" => Ok(RangePolicy::MinmaxAsymmetric),
        "absmax_symmetric" => Ok(RangePolicy::AbsmaxSymmetric),
        other => Err(format!("unknown range policy `{other}`")),
    }
}

fn parse_bits(s: &str) -> anyhow::Result<Vec<u32>> {
    let bits = if let Some((lo, hi)) = s.split_once("..") {
        let lo: u32 = lo.trim().parse().with_context(|| format!("bad range start in `{s}`"))?;
        let hi: u32 = hi.trim().trim_start_matches('=').parse().with_context(|| format!("bad range end in `{s}`"))?;
        (lo..=hi).collect()
    } else {
        s.split(',')
            .map(|b| b.trim().parse::<u32>().with_context(|| format!("bad bit width `{b}`")))
            .collect::<anyhow::Result<Vec<_>>>()?
    };
    if bits.is_empty() {
        bail!(Error::Config(vec![format!("--bits: `{s}` selects no bit widths")]));
    }
    let bad: Vec<String> = bits
        .iter()
        .filter_map(|&b| QuantSpec::new(b, RangePolicy::default()).err())
        .map(|e| format!("--bits: {e}"))
        .collect();
    if !bad.is_empty() {
        bail!(Error::Config(bad));
    }
    Ok(bits)
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn run_config(checkpoint: &Path, config: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    let path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(RESOLVED_CONFIG),
    };
    ExperimentConfig::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("HERO_LAB_THREADS") else {
        return Ok(());
    };
    let threads: usize = match value.trim().parse() {
        Ok(n) if n >= 1 => n,
        _ => bail!(Error::Config(vec![format!("HERO_LAB_THREADS: expected a positive integer, got `{value}`")])),
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let summary = experiment::run(&cfg)?;
            if let Some(last) = summary.records.last() {
                println!(
                    "epoch {} train_acc {:.4} eval_acc {} -> {}",
                    last.epoch,
                    last.train_acc,
                    last.eval_acc.map(|a| format!("{a:.4}")).unwrap_or_default(),
                    summary.output_dir.display()
                );
            }
        }
        Command::QuantSweep {
            checkpoint,
            bits,
            config,
            range_policy,
            out,
        } => {
            let bits = parse_bits(&bits)?;
            let cfg = run_config(&checkpoint, config.as_deref())?;
            let (params, test) = experiment::load_run(&cfg, &checkpoint)?;
            let rows = quantizer::sweep(
                &cfg.model,
                &params,
                &test,
                &bits,
                range_policy.unwrap_or(cfg.quant.range_policy),
                cfg.diagnostics.eval_batch_size,
            )?;
            quantizer::write_sweep_csv(&rows, output(out.as_deref())?)?;
        }
        Command::BoundCheck {
            trials,
            dim_max,
            seed,
            out,
        } => {
            let reports = robustness::bound_sweep(trials, dim_max, seed)?;
            robustness::write_bounds_csv(&reports, output(out.as_deref())?)?;
            let s = robustness::summarize(&reports);
            let fmt = |m: Option<f64>| m.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into());
            let line = format!(
                "trials {} violations {} (l2 {}, linf {}) median_slack_l2 {} median_slack_linf {}",
                s.trials,
                s.violations(),
                s.violations_l2,
                s.violations_linf,
                fmt(s.median_slack_l2),
                fmt(s.median_slack_linf)
            );
            // keep stdout clean when it carries the CSV
            if out.is_some() {
                println!("{line}");
            } else {
                eprintln!("{line}");
            }
        }
        Command::Contour {
            checkpoint,
            half_width,
            steps,
            seed,
            config,
            out,
        } => {
            let cfg = run_config(&checkpoint, config.as_deref())?;
            let grid = ContourGrid { half_width, steps };
            let v = grid.violations("contour");
            if !v.is_empty() {
                bail!(Error::Config(v));
            }
            let (params, test) = experiment::load_run(&cfg, &checkpoint)?;
            let seed = seed.unwrap_or_else(|| hero_core::seeds::sub_seed(cfg.seed, "contour"));
            let contour = robustness::loss_contour(&cfg.model, &params, &test, &grid, seed, cfg.diagnostics.eval_batch_size)?;
            contour.write_csv(output(out.as_deref())?)?;
        }
        Command::Compare { configs, out } => {
            let loaded = configs
                .iter()
                .map(|p| {
                    ExperimentConfig::load(p)
                        .map(|c| (p.display().to_string(), c))
                        .with_context(|| format!("loading {}", p.display()))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            experiment::compare(&loaded, output(out.as_deref())?)?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::NonFinite { .. }) => EXIT_NUMERIC,
        _ if err.chain().any(|e| e.downcast_ref::<std::num::ParseIntError>().is_some()) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
                Some(Error::Config(violations)) => {
                    eprintln!("error: invalid configuration");
                    for v in violations {
                        eprintln!("  - {v}");
                    }
                }
                _ => eprintln!("error: {err:#}"),
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
