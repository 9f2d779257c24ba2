//! Dense row-major `f64` tensors.
//!
//! Everything here is eager and allocation-per-op. The autodiff tape in
//! [`crate::autodiff`] records these kernels and replays their adjoints.

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: context.to_string(),
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a / b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|x| k * x)
    }

    /// `self += k * other`.
    pub fn axpy(&mut self, k: f64, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).sum()
    }

    pub fn norm_linf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix("matmul lhs")?;
        let (k2, n) = other.as_matrix("matmul rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "matmul inner dimension".into(),
                expected: vec![m, k],
                got: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: slices are sized m*k, k*n and m*n with the row-major
            // strides passed below.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr(),
                    k as isize,
                    1,
                    other.data.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    fn as_matrix(&self, context: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidArgument(format!(
                "{context}: expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let (r, c) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// General axis permutation: `out.shape[i] = self.shape[axes[i]]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidArgument(format!(
                "permutation {axes:?} invalid for rank {rank}"
            )));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.numel());
        for_each_index(&out_shape, |idx| {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
        });
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// Numpy-style broadcast to `shape` (trailing dimensions aligned).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let src_strides = broadcast_strides(&self.shape, shape)?;
        let mut out = Vec::with_capacity(shape.iter().product());
        for_each_index(shape, |idx| {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
        });
        Ok(Self {
            shape: shape.to_vec(),
            data: out,
        })
    }

    /// Adjoint of [`Tensor::broadcast_to`]: sums over broadcast dimensions.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        let dst_strides = broadcast_strides(shape, &self.shape)?;
        let mut out = vec![0.0; shape.iter().product()];
        let mut k = 0;
        for_each_index(&self.shape, |idx| {
            let off: usize = idx.iter().zip(&dst_strides).map(|(i, s)| i * s).sum();
            out[off] += self.data[k];
            k += 1;
        });
        Ok(Self {
            shape: shape.to_vec(),
            data: out,
        })
    }

    /// Unfolds `[B, C, H, W]` into patch rows `[B*Ho*Wo, C*k*k]`.
    pub fn im2col(&self, geom: &ConvGeom) -> Result<Self> {
        geom.check_input(&self.shape)?;
        let (ho, wo) = geom.output_hw();
        let kk = geom.kernel * geom.kernel;
        let cols = geom.channels * kk;
        let mut out = vec![0.0; geom.batch * ho * wo * cols];
        for b in 0..geom.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    for c in 0..geom.channels {
                        for ky in 0..geom.kernel {
                            let iy = (oy + ky) as isize - geom.padding as isize;
                            if iy < 0 || iy >= geom.height as isize {
                                continue;
                            }
                            for kx in 0..geom.kernel {
                                let ix = (ox + kx) as isize - geom.padding as isize;
                                if ix < 0 || ix >= geom.width as isize {
                                    continue;
                                }
                                let src = ((b * geom.channels + c) * geom.height + iy as usize)
                                    * geom.width
                                    + ix as usize;
                                out[row * cols + c * kk + ky * geom.kernel + kx] = self.data[src];
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            shape: vec![geom.batch * ho * wo, cols],
            data: out,
        })
    }

    /// Adjoint of [`Tensor::im2col`]: scatter-adds patch rows back into an image.
    pub fn col2im(&self, geom: &ConvGeom) -> Result<Self> {
        let (ho, wo) = geom.output_hw();
        let kk = geom.kernel * geom.kernel;
        let cols = geom.channels * kk;
        let expected = [geom.batch * ho * wo, cols];
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                context: "col2im".into(),
                expected: expected.to_vec(),
                got: self.shape.clone(),
            });
        }
        let mut out = vec![0.0; geom.batch * geom.channels * geom.height * geom.width];
        for b in 0..geom.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    for c in 0..geom.channels {
                        for ky in 0..geom.kernel {
                            let iy = (oy + ky) as isize - geom.padding as isize;
                            if iy < 0 || iy >= geom.height as isize {
                                continue;
                            }
                            for kx in 0..geom.kernel {
                                let ix = (ox + kx) as isize - geom.padding as isize;
                                if ix < 0 || ix >= geom.width as isize {
                                    continue;
                                }
                                let dst = ((b * geom.channels + c) * geom.height + iy as usize)
                                    * geom.width
                                    + ix as usize;
                                out[dst] += self.data[row * cols + c * kk + ky * geom.kernel + kx];
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            shape: vec![geom.batch, geom.channels, geom.height, geom.width],
            data: out,
        })
    }

    /// Writes `rank: u64`, `dims: [u64]`, then values, all little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.rank() as u64).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let rank = read_u64(r)? as usize;
        if rank > 16 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor shape {shape:?} overflows")))?;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::new(shape, data)
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Geometry of a stride-1 square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn output_hw(&self) -> (usize, usize) {
        (
            self.height + 2 * self.padding + 1 - self.kernel,
            self.width + 2 * self.padding + 1 - self.kernel,
        )
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let expected = [self.batch, self.channels, self.height, self.width];
        if shape != expected {
            return Err(Error::ShapeMismatch {
                context: "im2col input".into(),
                expected: expected.to_vec(),
                got: shape.to_vec(),
            });
        }
        Ok(())
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides into `src` for each axis of `dst` (0 on broadcast axes).
fn broadcast_strides(src: &[usize], dst: &[usize]) -> Result<Vec<usize>> {
    if src.len() > dst.len() {
        return Err(Error::ShapeMismatch {
            context: "broadcast".into(),
            expected: dst.to_vec(),
            got: src.to_vec(),
        });
    }
    let offset = dst.len() - src.len();
    let src_strides = strides(src);
    let mut out = vec![0; dst.len()];
    for (i, &d) in dst.iter().enumerate() {
        if i < offset {
            continue;
        }
        let s = src[i - offset];
        if s == d {
            out[i] = src_strides[i - offset];
        } else if s != 1 {
            return Err(Error::ShapeMismatch {
                context: "broadcast".into(),
                expected: dst.to_vec(),
                got: src.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Result shape of broadcasting `a` against `b`.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    context: "broadcast".into(),
                    expected: a.to_vec(),
                    got: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Visits every multi-index of `shape` in row-major order.
fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.iter().any(|&d| d == 0) {
        return;
    }
    let mut idx = vec![0; shape.len()];
    loop {
        f(&idx);
        let mut axis = shape.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}
