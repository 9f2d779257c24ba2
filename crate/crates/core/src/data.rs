//! Datasets: IDX ingestion and export, synthetic generators, symmetric label
//! noise and seeded mini-batching.

use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Inputs of shape `[N, ...]` with one label in `[0, classes)` per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::InvalidArgument("dataset must hold at least one sample".into()));
        }
        if n != labels.len() {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.sample_len();
        &self.inputs.data()[i * d..(i + 1) * d]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Gathers the listed samples into a batch.
    pub fn gather(&self, indices: &[usize]) -> LabeledBatch {
        let d = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        LabeledBatch {
            inputs: Tensor::new(shape, data).expect("gathered shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Fixed in-order batches, last one possibly partial.
    pub fn sequential_batches(&self, batch_size: usize) -> impl Iterator<Item = LabeledBatch> + '_ {
        let bs = batch_size.max(1);
        (0..self.len())
            .step_by(bs)
            .map(move |start| self.gather(&(start..(start + bs).min(self.len())).collect::<Vec<_>>()))
    }

    /// Same inputs, different labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.inputs.clone(), labels, self.classes)
    }

    /// Applies `(x - mean) / std` to every input value.
    pub fn normalized(&self, mean: f64, std: f64) -> Self {
        Self {
            inputs: self.inputs.map(|x| (x - mean) / std),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

// ---------------------------------------------------------------------------
// IDX

/// Pixel normalization applied after scaling bytes to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdxOptions {
    pub mean: f64,
    pub std: f64,
    /// Class count; inferred as `max(label) + 1` (at least 2) when absent.
    pub classes: Option<usize>,
}

impl Default for IdxOptions {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
            classes: None,
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            found: bytes.len(),
        })
}

fn read_idx(path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let found = be_u32(&bytes, 0, path)?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let shape = (0..dims)
        .map(|i| be_u32(&bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * dims;
    let needed = header + shape.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    Ok((shape, bytes[header..needed].to_vec()))
}

/// Reads an IDX image file (`0x00000803`, dims `N, rows, cols`) and label file
/// (`0x00000801`, dim `N`). Inputs come out as `[N, 1, rows, cols]`.
pub fn load_idx(images_path: &Path, labels_path: &Path, options: &IdxOptions) -> Result<LabeledDataset> {
    let (ishape, pixels) = read_idx(images_path, IDX_IMAGES_MAGIC, 3)?;
    let (lshape, raw_labels) = read_idx(labels_path, IDX_LABELS_MAGIC, 1)?;
    if ishape[0] != lshape[0] {
        return Err(Error::CountMismatch {
            images: ishape[0],
            labels: lshape[0],
        });
    }
    if options.std <= 0.0 || !options.std.is_finite() {
        return Err(Error::InvalidArgument(format!("normalization std must be positive, got {}", options.std)));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = options
        .classes
        .unwrap_or_else(|| labels.iter().copied().max().map_or(2, |m| (m + 1).max(2)));
    let data = pixels
        .iter()
        .map(|&b| (b as f64 / 255.0 - options.mean) / options.std)
        .collect();
    let inputs = Tensor::new(vec![ishape[0], 1, ishape[1], ishape[2]], data)?;
    LabeledDataset::new(inputs, labels, classes)
}

/// Writes a dataset as IDX image and label files. Values are expected in
/// `[0, 1]`; they are clamped and rounded to bytes. Samples that are not 2-D
/// images are written as `1 x len` rows.
pub fn write_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = ds.sample_shape();
    let (rows, cols) = match shape {
        [r, c] | [1, r, c] => (*r, *c),
        _ => (1, ds.sample_len()),
    };
    if ds.classes() > 256 {
        return Err(Error::InvalidArgument("IDX labels are single bytes".into()));
    }
    let mut img = Vec::with_capacity(16 + ds.inputs().numel());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [ds.len(), rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.inputs().data().iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::File::create(images_path)?.write_all(&img)?;

    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels().iter().map(|&l| l as u8));
    std::fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic data

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Isotropic unit-variance Gaussian blobs in 2-D.
    Gaussians,
    /// Interleaved noisy spiral arms in 2-D.
    Spirals,
    /// 28x28 stroke images in `[0, 1]`, one stroke template per class.
    Glyphs,
}

/// Balanced labels (`i mod K`) with deterministic generation under `seed`.
pub fn make_synthetic(kind: SyntheticKind, n: usize, classes: usize, seed: u64) -> Result<LabeledDataset> {
    if classes < 2 || n < classes {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs N >= K >= 2, got N={n}, K={classes}"
        )));
    }
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let inputs = match kind {
        SyntheticKind::Gaussians => {
            // Neighbouring means sit 8 standard deviations apart.
            let radius = 4.0 / (std::f64::consts::PI / classes as f64).sin();
            let mut data = Vec::with_capacity(2 * n);
            for &y in &labels {
                let angle = 2.0 * std::f64::consts::PI * y as f64 / classes as f64;
                data.push(radius * angle.cos() + unit.sample(&mut rng));
                data.push(radius * angle.sin() + unit.sample(&mut rng));
            }
            Tensor::new(vec![n, 2], data)?
        }
        SyntheticKind::Spirals => {
            let mut data = Vec::with_capacity(2 * n);
            for &y in &labels {
                let t: f64 = rng.gen_range(0.05..1.0);
                let angle = 4.0 * t + 2.0 * std::f64::consts::PI * y as f64 / classes as f64;
                data.push(t * angle.cos() + 0.03 * unit.sample(&mut rng));
                data.push(t * angle.sin() + 0.03 * unit.sample(&mut rng));
            }
            Tensor::new(vec![n, 2], data)?
        }
        SyntheticKind::Glyphs => {
            let templates = glyph_templates(classes);
            let mut data = Vec::with_capacity(n * GLYPH_SIDE * GLYPH_SIDE);
            for &y in &labels {
                render_glyph(&templates[y], &mut rng, &mut data);
            }
            Tensor::new(vec![n, 1, GLYPH_SIDE, GLYPH_SIDE], data)?
        }
    };
    LabeledDataset::new(inputs, labels, classes)
}

const GLYPH_SIDE: usize = 28;
const GLYPH_TEMPLATE_SEED: u64 = 0x6c79_7068_7331;

/// Stroke polylines per class. Independent of the dataset seed so train and
/// test splits drawn with different seeds share the same classes.
fn glyph_templates(classes: usize) -> Vec<Vec<[f64; 2]>> {
    let mut rng = ChaCha8Rng::seed_from_u64(GLYPH_TEMPLATE_SEED);
    (0..classes)
        .map(|_| {
            let points = rng.gen_range(4..=5);
            (0..points)
                .map(|_| [rng.gen_range(7.0..21.0), rng.gen_range(6.0..22.0)])
                .collect()
        })
        .collect()
}

fn render_glyph(template: &[[f64; 2]], rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let angle: f64 = rng.gen_range(-0.3..0.3);
    let scale: f64 = rng.gen_range(0.8..1.2);
    let shift = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
    let thickness: f64 = rng.gen_range(1.0..2.4);
    let (s, c) = angle.sin_cos();
    let centre = 14.0;
    let points: Vec<[f64; 2]> = template
        .iter()
        .map(|p| {
            let x = p[0] - centre + 1.1 * unit.sample(rng);
            let y = p[1] - centre + 1.1 * unit.sample(rng);
            [
                centre + shift[0] + scale * (c * x - s * y),
                centre + shift[1] + scale * (s * x + c * y),
            ]
        })
        .collect();
    for py in 0..GLYPH_SIDE {
        for px in 0..GLYPH_SIDE {
            let q = [px as f64 + 0.5, py as f64 + 0.5];
            let d = points
                .windows(2)
                .map(|seg| segment_distance(q, seg[0], seg[1]))
                .fold(f64::INFINITY, f64::min);
            let ink = (1.0 - (d - 0.5 * thickness)).clamp(0.0, 1.0);
            let noisy = ink + 0.15 * unit.sample(rng);
            out.push(noisy.clamp(0.0, 1.0));
        }
    }
}

fn segment_distance(q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let aq = [q[0] - a[0], q[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((aq[0] * ab[0] + aq[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [aq[0] - t * ab[0], aq[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

// ---------------------------------------------------------------------------
// Label noise

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        if (0.0..=1.0).contains(&self.ratio) {
            Vec::new()
        } else {
            vec![format!("{prefix}.ratio: must lie in [0, 1], got {}", self.ratio)]
        }
    }
}

/// Picks `round(ratio * N)` distinct samples uniformly and redraws each of
/// their labels uniformly over all classes (the true class included).
pub fn inject_symmetric_noise(ds: &LabeledDataset, spec: &NoiseSpec) -> Result<LabeledDataset> {
    if let Some(v) = spec.violations("noise").pop() {
        return Err(Error::InvalidArgument(v));
    }
    let n = ds.len();
    let picked = (spec.ratio * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = ds.labels().to_vec();
    for i in index::sample(&mut rng, n, picked.min(n)).into_iter() {
        labels[i] = rng.gen_range(0..ds.classes());
    }
    ds.with_labels(labels)
}

// ---------------------------------------------------------------------------
// Batching

/// Mirrors each row of an image (last axis is width) in place.
pub fn flip_horizontal(sample: &mut [f64], width: usize) {
    for row in sample.chunks_mut(width) {
        row.reverse();
    }
}

/// One epoch of shuffled batches keyed on `epoch_seed`; the last partial
/// batch is kept. With `flip`, image samples are mirrored with probability
/// one half each.
pub fn batches(ds: &LabeledDataset, batch_size: usize, epoch_seed: u64, flip: bool) -> Result<Vec<LabeledBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let width = match ds.sample_shape() {
        s if s.len() >= 2 => Some(s[s.len() - 1]),
        _ => None,
    };
    let per = ds.sample_len();
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let mut batch = ds.gather(idx);
            if let (true, Some(w)) = (flip, width) {
                for s in batch.inputs.data_mut().chunks_mut(per) {
                    if rng.gen_bool(0.5) {
                        flip_horizontal(s, w);
                    }
                }
            }
            batch
        })
        .collect())
}
