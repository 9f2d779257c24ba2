//! Desk-scale model zoo: a ReLU multilayer perceptron and a small
//! convolutional network with optional batch normalization, both expressed as
//! recorded graph operations so every model supports double backward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardKind, Graph, Var};
use crate::data::{LabeledBatch, LabeledDataset};
use crate::error::{Error, Result};
use crate::objective::{scalar_value, Bound, Objective};
use crate::params::{GradientSet, ParamKind, ParamSet};
use crate::tensor::{ConvGeom, Tensor};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    #[serde(rename = "smallconv")]
    SmallConv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

fn default_kernel() -> usize {
    3
}

/// Architecture description. For `mlp`, `widths` lists every layer width
/// including input and output (`[784, 64, 10]`); for `smallconv`, `channels`
/// lists the output channels of each convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ArchKind,
    #[serde(default)]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub batch_norm: bool,
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl ModelSpec {
    pub fn mlp(widths: &[usize]) -> Self {
        Self {
            kind: ArchKind::Mlp,
            widths: widths.to_vec(),
            channels: Vec::new(),
            kernel: default_kernel(),
            activation: Activation::Relu,
            batch_norm: false,
            input_shape: vec![widths.first().copied().unwrap_or(0)],
            classes: widths.last().copied().unwrap_or(0),
        }
    }

    pub fn smallconv(input_shape: &[usize], channels: &[usize], classes: usize) -> Self {
        Self {
            kind: ArchKind::SmallConv,
            widths: Vec::new(),
            channels: channels.to_vec(),
            kernel: default_kernel(),
            activation: Activation::Relu,
            batch_norm: true,
            input_shape: input_shape.to_vec(),
            classes,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Every violated constraint, prefixed with `prefix`.
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        if self.classes < 2 {
            v.push(format!("{prefix}.classes: must be >= 2, got {}", self.classes));
        }
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            v.push(format!("{prefix}.input_shape: dimensions must be positive, got {:?}", self.input_shape));
        }
        match self.kind {
            ArchKind::Mlp => {
                if self.widths.len() < 2 {
                    v.push(format!("{prefix}.widths: need input and output widths, got {:?}", self.widths));
                } else {
                    if self.widths.iter().any(|&w| w == 0) {
                        v.push(format!("{prefix}.widths: must be positive, got {:?}", self.widths));
                    }
                    if self.widths[0] != self.input_len() {
                        v.push(format!(
                            "{prefix}.widths: first width {} does not match input size {}",
                            self.widths[0],
                            self.input_len()
                        ));
                    }
                    if *self.widths.last().unwrap() != self.classes {
                        v.push(format!(
                            "{prefix}.widths: last width {} does not match classes {}",
                            self.widths.last().unwrap(),
                            self.classes
                        ));
                    }
                }
            }
            ArchKind::SmallConv => {
                if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
                    v.push(format!("{prefix}.channels: need positive channel counts, got {:?}", self.channels));
                }
                if self.kernel == 0 || self.kernel % 2 == 0 {
                    v.push(format!("{prefix}.kernel: must be odd, got {}", self.kernel));
                }
                if self.input_shape.len() != 3 {
                    v.push(format!(
                        "{prefix}.input_shape: smallconv expects [channels, height, width], got {:?}",
                        self.input_shape
                    ));
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("model");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Names and shapes of every parameter in construction order.
    fn layout(&self) -> Vec<(String, Vec<usize>, ParamKind, usize)> {
        let mut out = Vec::new();
        match self.kind {
            ArchKind::Mlp => {
                let last = self.widths.len() - 2;
                for (i, w) in self.widths.windows(2).enumerate() {
                    out.push((format!("fc{i}.weight"), vec![w[0], w[1]], ParamKind::Weight, w[0]));
                    out.push((format!("fc{i}.bias"), vec![w[1]], ParamKind::Bias, w[0]));
                    if self.batch_norm && i < last {
                        out.push((format!("bn{i}.scale"), vec![w[1]], ParamKind::BnScale, 0));
                        out.push((format!("bn{i}.shift"), vec![w[1]], ParamKind::BnShift, 0));
                    }
                }
            }
            ArchKind::SmallConv => {
                let mut c_in = self.input_shape[0];
                for (i, &c) in self.channels.iter().enumerate() {
                    let fan_in = c_in * self.kernel * self.kernel;
                    out.push((
                        format!("conv{i}.weight"),
                        vec![c, c_in, self.kernel, self.kernel],
                        ParamKind::Weight,
                        fan_in,
                    ));
                    out.push((format!("conv{i}.bias"), vec![c], ParamKind::Bias, fan_in));
                    if self.batch_norm {
                        out.push((format!("bn{i}.scale"), vec![c], ParamKind::BnScale, 0));
                        out.push((format!("bn{i}.shift"), vec![c], ParamKind::BnShift, 0));
                    }
                    c_in = c;
                }
                out.push(("head.weight".into(), vec![c_in, self.classes], ParamKind::Weight, c_in));
                out.push(("head.bias".into(), vec![self.classes], ParamKind::Bias, c_in));
            }
        }
        out
    }

    fn bn_layers(&self) -> Vec<(usize, usize)> {
        if !self.batch_norm {
            return Vec::new();
        }
        match self.kind {
            ArchKind::Mlp => self.widths[1..self.widths.len() - 1]
                .iter()
                .copied()
                .enumerate()
                .collect(),
            ArchKind::SmallConv => self.channels.iter().copied().enumerate().collect(),
        }
    }
}

/// Kaiming-uniform weights, zero biases, unit batch-norm scales and zero
/// shifts. The same `(spec, seed)` always yields the same bits.
pub fn build(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape, kind, fan_in) in spec.layout() {
        let tensor = match kind {
            ParamKind::Weight => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(shape, data)?
            }
            ParamKind::Bias | ParamKind::BnShift => Tensor::zeros(&shape),
            ParamKind::BnScale => Tensor::ones(&shape),
        };
        params.push(name, tensor, kind)?;
    }
    for (i, width) in spec.bn_layers() {
        params.push_buffer(format!("bn{i}.running_mean"), Tensor::zeros(&[width]));
        params.push_buffer(format!("bn{i}.running_var"), Tensor::ones(&[width]));
    }
    Ok(params)
}

/// How batch normalization computes its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics. The caller decides whether to fold them into the
    /// running averages (see [`ForwardRecord::batch_stats`]).
    Train,
    /// Tracked running statistics.
    Eval,
}

/// Per-layer batch mean and (biased) variance observed in a training pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub layers: Vec<(usize, Tensor, Tensor, usize)>,
}

impl BatchStats {
    /// `running = m * running + (1 - m) * batch`, using the unbiased variance.
    pub fn apply(&self, params: &mut ParamSet) -> Result<()> {
        for (i, mean, var, count) in &self.layers {
            let unbias = *count as f64 / (*count as f64 - 1.0);
            let rm = params.buffer_mut(&format!("bn{i}.running_mean"))?;
            for (r, m) in rm.data_mut().iter_mut().zip(mean.data()) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            let rv = params.buffer_mut(&format!("bn{i}.running_var"))?;
            for (r, v) in rv.data_mut().iter_mut().zip(var.data()) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbias;
            }
        }
        Ok(())
    }
}

fn check_params(spec: &ModelSpec, params: &ParamSet) -> Result<()> {
    for (name, shape, _, _) in spec.layout() {
        let t = params.tensor(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ParamShape {
                name,
                expected: shape,
                got: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn batch_size_of(spec: &ModelSpec, inputs: &Tensor) -> Result<usize> {
    let per = spec.input_len();
    let b = inputs.shape().first().copied().unwrap_or(0);
    if b == 0 || inputs.numel() != b * per {
        let mut expected = vec![b.max(1)];
        expected.extend(&spec.input_shape);
        return Err(Error::ShapeMismatch {
            context: "model input".into(),
            expected,
            got: inputs.shape().to_vec(),
        });
    }
    Ok(b)
}

/// Records the logits of `spec` on `graph`.
pub fn logits_on_graph(
    spec: &ModelSpec,
    graph: &mut Graph,
    bound: &Bound,
    params: &ParamSet,
    inputs: Var,
    mode: BnMode,
    stats: &mut BatchStats,
) -> Result<Var> {
    let batch = graph.shape(inputs)[0];
    if mode == BnMode::Train && spec.batch_norm && batch < 2 {
        return Err(Error::BatchNormSingleSample(batch));
    }
    match spec.kind {
        ArchKind::Mlp => {
            let mut x = graph.reshape(inputs, &[batch, spec.input_len()])?;
            let layers = spec.widths.len() - 1;
            for i in 0..layers {
                let w = bound.var(&format!("fc{i}.weight"))?;
                let b = bound.var(&format!("fc{i}.bias"))?;
                x = graph.matmul(x, w)?;
                x = graph.add(x, b)?;
                if i + 1 < layers {
                    if spec.batch_norm {
                        let width = spec.widths[i + 1];
                        x = batch_norm(graph, bound, params, x, i, &[1, width], mode, stats)?;
                    }
                    x = graph.relu(x);
                }
            }
            Ok(x)
        }
        ArchKind::SmallConv => {
            let (mut c, mut h, mut w) = (spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]);
            let mut x = graph.reshape(inputs, &[batch, c, h, w])?;
            let n_conv = spec.channels.len();
            for (i, &out_c) in spec.channels.iter().enumerate() {
                let geom = ConvGeom {
                    batch,
                    channels: c,
                    height: h,
                    width: w,
                    kernel: spec.kernel,
                    padding: spec.kernel / 2,
                };
                let (ho, wo) = geom.output_hw();
                let cols = graph.im2col(x, geom)?;
                let weight = bound.var(&format!("conv{i}.weight"))?;
                let wmat = graph.reshape(weight, &[out_c, c * spec.kernel * spec.kernel])?;
                let wt = graph.transpose(wmat)?;
                let y = graph.matmul(cols, wt)?;
                let y = graph.reshape(y, &[batch, ho, wo, out_c])?;
                let y = graph.permute(y, &[0, 3, 1, 2])?;
                let bias = bound.var(&format!("conv{i}.bias"))?;
                let bias = graph.reshape(bias, &[1, out_c, 1, 1])?;
                let mut y = graph.add(y, bias)?;
                if spec.batch_norm {
                    y = batch_norm(graph, bound, params, y, i, &[1, out_c, 1, 1], mode, stats)?;
                }
                y = graph.relu(y);
                (c, h, w) = (out_c, ho, wo);
                if i + 1 < n_conv && h % 2 == 0 && w % 2 == 0 {
                    // 2x2 average pooling
                    let r = graph.reshape(y, &[batch, c, h / 2, 2, w / 2, 2])?;
                    let s = graph.sum_to(r, &[batch, c, h / 2, 1, w / 2, 1])?;
                    let s = graph.reshape(s, &[batch, c, h / 2, w / 2])?;
                    y = graph.scale(s, 0.25);
                    h /= 2;
                    w /= 2;
                }
                x = y;
            }
            let pooled = graph.sum_to(x, &[batch, c, 1, 1])?;
            let pooled = graph.reshape(pooled, &[batch, c])?;
            let pooled = graph.scale(pooled, 1.0 / (h * w) as f64);
            let hw = bound.var("head.weight")?;
            let hb = bound.var("head.bias")?;
            let out = graph.matmul(pooled, hw)?;
            graph.add(out, hb)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn batch_norm(
    graph: &mut Graph,
    bound: &Bound,
    params: &ParamSet,
    x: Var,
    layer: usize,
    stat_shape: &[usize],
    mode: BnMode,
    stats: &mut BatchStats,
) -> Result<Var> {
    let scale = bound.var(&format!("bn{layer}.scale"))?;
    let shift = bound.var(&format!("bn{layer}.shift"))?;
    let scale = graph.reshape(scale, stat_shape)?;
    let shift = graph.reshape(shift, stat_shape)?;
    let normalized = match mode {
        BnMode::Train => {
            let count = graph.value(x).numel() / stat_shape.iter().product::<usize>();
            let inv = 1.0 / count as f64;
            let sum = graph.sum_to(x, stat_shape)?;
            let mean = graph.scale(sum, inv);
            let centered = graph.sub(x, mean)?;
            let sq = graph.mul(centered, centered)?;
            let sq_sum = graph.sum_to(sq, stat_shape)?;
            let var = graph.scale(sq_sum, inv);
            let width: usize = stat_shape.iter().product();
            stats.layers.push((
                layer,
                graph.value(mean).reshape(&[width])?,
                graph.value(var).reshape(&[width])?,
                count,
            ));
            let eps = graph.constant(Tensor::scalar(BN_EPS));
            let var_eps = graph.add(var, eps)?;
            let std = graph.sqrt(var_eps);
            graph.div(centered, std)?
        }
        BnMode::Eval => {
            let rm = params.buffer(&format!("bn{layer}.running_mean"))?.reshape(stat_shape)?;
            let rv = params.buffer(&format!("bn{layer}.running_var"))?;
            let std = rv.map(|v| (v + BN_EPS).sqrt()).reshape(stat_shape)?;
            let rm = graph.constant(rm);
            let std = graph.constant(std);
            let centered = graph.sub(x, rm)?;
            graph.div(centered, std)?
        }
    };
    let y = graph.mul(normalized, scale)?;
    graph.add(y, shift)
}

/// Mean softmax cross-entropy of `logits` (`[B, K]`) against integer labels.
pub fn cross_entropy(graph: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = graph.shape(logits).to_vec();
    let (b, k) = match shape[..] {
        [b, k] => (b, k),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "logits must be [batch, classes], got {shape:?}"
            )))
        }
    };
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            context: "labels".into(),
            expected: vec![b],
            got: vec![labels.len()],
        });
    }
    let mut onehot = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        onehot[i * k + y] = 1.0;
    }
    // The row max is a constant shift; it cancels in the log-softmax.
    let vals = graph.value(logits).data();
    let maxes: Vec<f64> = vals
        .chunks(k)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let maxes = graph.constant(Tensor::new(vec![b, 1], maxes)?);
    let shifted = graph.sub(logits, maxes)?;
    let e = graph.exp(shifted);
    let se = graph.sum_to(e, &[b, 1])?;
    let lse = graph.log(se);
    let logp = graph.sub(shifted, lse)?;
    let onehot = graph.constant(Tensor::new(vec![b, k], onehot)?);
    let picked = graph.mul(logp, onehot)?;
    let total = graph.sum(picked)?;
    Ok(graph.scale(total, -1.0 / b as f64))
}

/// Result of a recorded forward pass; replayable by [`ForwardRecord::backward`].
pub struct ForwardRecord {
    pub graph: Graph,
    pub bound: Bound,
    pub logits: Var,
    pub loss: Var,
    pub batch_stats: BatchStats,
}

impl ForwardRecord {
    pub fn loss_value(&self) -> f64 {
        self.graph.value(self.loss).item().unwrap_or(f64::NAN)
    }

    /// Gradients of the loss for every trainable parameter.
    pub fn backward(&mut self) -> Result<GradientSet> {
        let wrt = self.bound.trainable_vars();
        let grads = self.graph.grad(self.loss, &wrt, BackwardKind::Loss)?;
        Ok(self.bound.gradient_set(&self.graph, &grads))
    }

    /// Gradient nodes left on the tape for further differentiation.
    pub fn backward_vars(&mut self) -> Result<Vec<Var>> {
        let wrt = self.bound.trainable_vars();
        self.graph.grad(self.loss, &wrt, BackwardKind::Loss)
    }
}

/// Mean cross-entropy on `batch`, recorded for a later backward pass.
pub fn forward(spec: &ModelSpec, params: &ParamSet, batch: &LabeledBatch, mode: BnMode) -> Result<ForwardRecord> {
    check_params(spec, params)?;
    batch_size_of(spec, &batch.inputs)?;
    let mut graph = Graph::new();
    let bound = Bound::new(&mut graph, params);
    let inputs = graph.constant(batch.inputs.clone());
    let mut batch_stats = BatchStats::default();
    let logits = logits_on_graph(spec, &mut graph, &bound, params, inputs, mode, &mut batch_stats)?;
    let loss = cross_entropy(&mut graph, logits, &batch.labels)?;
    graph.record_forward();
    Ok(ForwardRecord {
        graph,
        bound,
        logits,
        loss,
        batch_stats,
    })
}

/// Logits `[B, K]` without recording gradients.
pub fn predict(spec: &ModelSpec, params: &ParamSet, inputs: &Tensor, mode: BnMode) -> Result<Tensor> {
    check_params(spec, params)?;
    batch_size_of(spec, inputs)?;
    let mut graph = Graph::new();
    let mut frozen = params.clone();
    for e in frozen.entries_mut() {
        e.trainable = false;
    }
    let bound = Bound::new(&mut graph, &frozen);
    let x = graph.constant(inputs.clone());
    let mut stats = BatchStats::default();
    let logits = logits_on_graph(spec, &mut graph, &bound, params, x, mode, &mut stats)?;
    Ok(graph.value(logits).clone())
}

/// Summed cross-entropy and correct-prediction count of logits.
pub(crate) fn score(logits: &Tensor, labels: &[usize]) -> (f64, usize) {
    let k = logits.shape()[1];
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        // first maximal index wins ties
        let arg = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        if arg.0 == y {
            correct += 1;
        }
    }
    (loss, correct)
}

/// Mean loss and accuracy in evaluation mode over fixed, in-order batches.
pub fn evaluate(spec: &ModelSpec, params: &ParamSet, data: &LabeledDataset, batch_size: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    for batch in data.sequential_batches(batch_size) {
        let logits = predict(spec, params, &batch.inputs, BnMode::Eval)?;
        let (l, c) = score(&logits, &batch.labels);
        loss += l;
        correct += c;
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Mean cross-entropy of a model on one fixed batch, as an [`Objective`].
/// Batch normalization running statistics are never updated through it.
pub struct ModelObjective<'a> {
    pub spec: &'a ModelSpec,
    pub batch: &'a LabeledBatch,
    pub mode: BnMode,
}

impl Objective for ModelObjective<'_> {
    fn loss(&self, params: &ParamSet) -> Result<f64> {
        let logits = predict(self.spec, params, &self.batch.inputs, self.mode)?;
        let (l, _) = score(&logits, &self.batch.labels);
        Ok(l / self.batch.len() as f64)
    }

    fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, GradientSet)> {
        let mut rec = forward(self.spec, params, self.batch, self.mode)?;
        let loss = scalar_value(&rec.graph, rec.loss)?;
        Ok((loss, rec.backward()?))
    }
}
