//! Named parameter collections and their gradients.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamKind {
    fn code(self) -> u8 {
        match self {
            Self::Weight => 0,
            Self::Bias => 1,
            Self::BnScale => 2,
            Self::BnShift => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Self::Weight,
            1 => Self::Bias,
            2 => Self::BnScale,
            3 => Self::BnShift,
            other => return Err(Error::Checkpoint(format!("unknown parameter kind {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
    pub trainable: bool,
}

impl ParamEntry {
    /// Only trainable weight tensors are perturbed or quantized.
    pub fn perturbable(&self) -> bool {
        self.trainable && self.kind == ParamKind::Weight
    }
}

/// Ordered model parameters plus non-trainable state buffers (batch-norm
/// running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    buffers: Vec<(String, Tensor)>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HEROCKP1";

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.entries.push(ParamEntry {
            name,
            tensor,
            kind,
            trainable: true,
        });
        Ok(())
    }

    pub fn push_buffer(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.buffers.push((name.into(), tensor));
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn buffers(&self) -> &[(String, Tensor)] {
        &self.buffers
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        entry.trainable = trainable;
        Ok(())
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.trainable)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Zero gradient for every trainable entry.
    pub fn zeros_like_trainable(&self) -> GradientSet {
        GradientSet {
            entries: self
                .trainable()
                .map(|e| (e.name.clone(), Tensor::zeros(e.tensor.shape())))
                .collect(),
        }
    }

    /// `self[k] += scale * delta[k]` for every entry of `delta`.
    pub fn add_scaled(&mut self, scale: f64, delta: &GradientSet) -> Result<()> {
        for (name, d) in delta.iter() {
            let entry = self
                .entries
                .iter_mut()
                .find(|e| &e.name == name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            entry.tensor.axpy(scale, d)?;
        }
        Ok(())
    }

    /// Copy with `scale * delta` added.
    pub fn offset(&self, scale: f64, delta: &GradientSet) -> Result<Self> {
        let mut out = self.clone();
        out.add_scaled(scale, delta)?;
        Ok(out)
    }

    /// Binary checkpoint: magic, entry/buffer counts, then per item the name,
    /// kind and flags followed by the tensor in its own wire format.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        w.write_all(&(self.buffers.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            write_name(w, &e.name)?;
            w.write_all(&[e.kind.code(), e.trainable as u8])?;
            e.tensor.write_to(w)?;
        }
        for (name, t) in &self.buffers {
            write_name(w, name)?;
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let n_entries = read_u64(r)? as usize;
        let n_buffers = read_u64(r)? as usize;
        let mut set = ParamSet::new();
        for _ in 0..n_entries {
            let name = read_name(r)?;
            let mut flags = [0u8; 2];
            r.read_exact(&mut flags)?;
            let kind = ParamKind::from_code(flags[0])?;
            let tensor = Tensor::read_from(r)?;
            set.push(name.clone(), tensor, kind)?;
            set.set_trainable(&name, flags[1] != 0)?;
        }
        for _ in 0..n_buffers {
            let name = read_name(r)?;
            let tensor = Tensor::read_from(r)?;
            set.push_buffer(name, tensor);
        }
        Ok(set)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn write_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_name<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u64(r)? as usize;
    if len > 4096 {
        return Err(Error::Checkpoint(format!("implausible name length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Per-parameter tensors keyed by name, in parameter order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    entries: Vec<(String, Tensor)>,
}

impl GradientSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n, t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (&*n, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn norm_l2(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.entries.iter().map(|(_, t)| t.norm_l1()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> Self {
        Self {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.map(f))).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(move |x| k * x)
    }

    /// `self += k * other`, matched by position and name.
    pub fn axpy(&mut self, k: f64, other: &GradientSet) -> Result<()> {
        self.check_aligned(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.axpy(k, b)?;
        }
        Ok(())
    }

    /// `self += k * W` over the trainable parameters.
    pub fn axpy_params(&mut self, k: f64, params: &ParamSet) -> Result<()> {
        for (name, g) in self.entries.iter_mut() {
            g.axpy(k, params.tensor(name)?)?;
        }
        Ok(())
    }

    pub fn sub(&self, other: &GradientSet) -> Result<Self> {
        self.check_aligned(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((n, a), (_, b))| Ok((n.clone(), a.sub(b)?)))
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn dot(&self, other: &GradientSet) -> Result<f64> {
        self.check_aligned(other)?;
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|((_, a), (_, b))| a.dot(b))
            .sum()
    }

    fn check_aligned(&self, other: &GradientSet) -> Result<()> {
        if self.entries.len() != other.entries.len()
            || self.entries.iter().zip(&other.entries).any(|((a, _), (b, _))| a != b)
        {
            return Err(Error::InvalidArgument(format!(
                "gradient sets differ in keys: {:?} vs {:?}",
                self.names().collect::<Vec<_>>(),
                other.names().collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    /// Checks keys and shapes against the trainable entries of `params`.
    pub fn check_matches(&self, params: &ParamSet) -> Result<()> {
        let trainable: Vec<&ParamEntry> = params.trainable().collect();
        if trainable.len() != self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient set has {} entries, parameter set has {} trainable",
                self.entries.len(),
                trainable.len()
            )));
        }
        for (p, (name, t)) in trainable.iter().zip(&self.entries) {
            if &p.name != name {
                return Err(Error::MissingParam(name.clone()));
            }
            if p.tensor.shape() != t.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: p.tensor.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}
