//! Post-training linear uniform weight quantization.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{self, ModelSpec};
use crate::params::{ParamKind, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangePolicy {
    /// Levels span `[min, max]` of the tensor.
    #[default]
    MinmaxAsymmetric,
    /// Levels span `[-max|x|, max|x|]`.
    AbsmaxSymmetric,
}

/// Per-tensor uniform quantizer applied to weight tensors only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub bits: u32,
    #[serde(default)]
    pub range_policy: RangePolicy,
}

impl QuantSpec {
    pub const MIN_BITS: u32 = 2;
    pub const MAX_BITS: u32 = 16;

    pub fn new(bits: u32, range_policy: RangePolicy) -> Result<Self> {
        let spec = Self { bits, range_policy };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if (Self::MIN_BITS..=Self::MAX_BITS).contains(&self.bits) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "bit width must lie in [{}, {}], got {}",
                Self::MIN_BITS,
                Self::MAX_BITS,
                self.bits
            )))
        }
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }
}

/// The level grid of one tensor: `lo + k * step` for `k < levels - 1` and
/// exactly `hi` for the last level, so the range endpoints are reproduced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    pub levels: u64,
}

impl Grid {
    /// `None` when the range is degenerate (constant tensor).
    pub fn fit(values: &[f64], spec: &QuantSpec) -> Option<Self> {
        let (lo, hi) = match spec.range_policy {
            RangePolicy::MinmaxAsymmetric => values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x))),
            RangePolicy::AbsmaxSymmetric => {
                let m = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                (-m, m)
            }
        };
        if !(hi > lo) {
            return None;
        }
        let levels = spec.levels();
        Some(Self {
            lo,
            hi,
            step: (hi - lo) / (levels - 1) as f64,
            levels,
        })
    }

    pub fn level(&self, k: u64) -> f64 {
        if k + 1 >= self.levels {
            self.hi
        } else {
            self.lo + k as f64 * self.step
        }
    }

    /// Nearest level; exact ties go to the even index.
    pub fn quantize(&self, x: f64) -> f64 {
        let top = (self.levels - 1) as f64;
        let guess = ((x - self.lo) / self.step).round_ties_even().clamp(0.0, top) as u64;
        let mut best = guess;
        let mut best_d = (x - self.level(guess)).abs();
        for k in [guess.wrapping_sub(1), guess + 1] {
            if k >= self.levels {
                continue;
            }
            let d = (x - self.level(k)).abs();
            if d < best_d || (d == best_d && k % 2 == 0) {
                best = k;
                best_d = d;
            }
        }
        self.level(best)
    }
}

/// Quantizes every element of `t`; constant tensors come back unchanged.
pub fn quantize_tensor(t: &Tensor, spec: &QuantSpec) -> Tensor {
    match Grid::fit(t.data(), spec) {
        Some(grid) => t.map(|x| grid.quantize(x)),
        None => t.clone(),
    }
}

/// Quantized copy of `params`: weight tensors are mapped onto their grids,
/// biases, normalization parameters and running statistics are untouched.
pub fn quantize_params(params: &ParamSet, spec: &QuantSpec) -> Result<ParamSet> {
    spec.validate()?;
    if let Some(e) = params.entries().iter().find(|e| !e.tensor.is_finite()) {
        return Err(Error::InvalidArgument(format!("cannot quantize non-finite tensor {}", e.name)));
    }
    let mut out = params.clone();
    for e in out.entries_mut() {
        if e.kind == ParamKind::Weight {
            e.tensor = quantize_tensor(&e.tensor, spec);
        }
    }
    Ok(out)
}

/// One row of a precision sweep; `bits == 0` is full precision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bits: u32,
    pub eval_loss: f64,
    pub eval_acc: f64,
}

/// Full-precision evaluation followed by one evaluation per bit width.
pub fn sweep(
    spec: &ModelSpec,
    params: &ParamSet,
    dataset: &LabeledDataset,
    bits: &[u32],
    policy: RangePolicy,
    batch_size: usize,
) -> Result<Vec<SweepRow>> {
    let quant = bits
        .iter()
        .map(|&b| QuantSpec::new(b, policy))
        .collect::<Result<Vec<_>>>()?;
    let (eval_loss, eval_acc) = models::evaluate(spec, params, dataset, batch_size)?;
    let mut rows = vec![SweepRow {
        bits: 0,
        eval_loss,
        eval_acc,
    }];
    for q in quant {
        let qp = quantize_params(params, &q)?;
        let (eval_loss, eval_acc) = models::evaluate(spec, &qp, dataset, batch_size)?;
        rows.push(SweepRow {
            bits: q.bits,
            eval_loss,
            eval_acc,
        });
    }
    Ok(rows)
}

/// Writes `bits,eval_loss,eval_acc` rows.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
