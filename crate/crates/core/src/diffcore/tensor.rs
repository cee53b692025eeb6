//! Dense multi-dimensional value array.
//!
//! The canonical image layout is channels x height x width, with an
//! optional leading batch dimension. Disparity maps are height x width.
//! Storage is `f64`; all gradient tolerances in the test suite assume
//! 64-bit accumulation.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major value array. Immutable after creation; gradients live
/// on the tape, not here.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` matches `shape` and every
    /// value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "tensor",
                format!("data length {} != product of shape {:?}", data.len(), shape),
            ));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "tensor",
                index: idx,
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor without the finiteness scan. For internal op outputs
    /// whose inputs were already validated; the tape re-checks on push.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Uniform random tensor in `[lo, hi)`.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(lo, hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// In-place access for the optimizer; tape values stay immutable.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// True when the tensor holds exactly one value.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Interprets the tensor as height x width.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::shape(
                "tensor",
                format!("expected rank-2 shape, got {:?}", self.shape),
            )),
        }
    }

    /// Interprets the tensor as channels x height x width.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(
                "tensor",
                format!("expected rank-3 shape, got {:?}", self.shape),
            )),
        }
    }

    /// Spatial dimensions (height, width) of a rank-2/3/4 tensor.
    pub fn spatial(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] | [_, h, w] | [_, _, h, w] => Ok((h, w)),
            _ => Err(Error::shape(
                "tensor",
                format!("expected spatial tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let w = self.shape[self.shape.len() - 1];
        self.data[i * w + j]
    }

    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j]
    }

    /// Horizontal mirror along the width axis (last dimension).
    pub fn mirror_w(&self) -> Tensor {
        let w = *self.shape.last().expect("mirror_w on rank-0 tensor");
        let rows = self.data.len() / w;
        let mut out = Vec::with_capacity(self.data.len());
        for r in 0..rows {
            let row = &self.data[r * w..(r + 1) * w];
            out.extend(row.iter().rev());
        }
        Tensor::from_parts(self.shape.clone(), out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}
