//! Differentiable horizontal backward warping along scanlines.
//!
//! Rectified stereo reduces image formation to a 1-D resampling problem:
//! each output pixel reads the source row at `x = j + s * d(i, j)` and
//! linearly interpolates its two integer neighbors. The sign `s` is the
//! sampling direction.
//!
//! Geometry convention: a left pixel `(i, j)` matches right pixel
//! `(i, j - d)`, so reconstructing the left image samples the right one
//! leftward (`s = -1`) and reconstructing the right image samples the
//! left one rightward (`s = +1`). The synthetic scene generator uses the
//! same convention; its reconstruction-identity tests fail loudly if the
//! two ever disagree.
//!
//! Out-of-range coordinates clamp to the border, which keeps the sampler
//! continuous and avoids injecting zeros into the photometric loss.

use crate::diffcore::{Tape, TapeOp, Tensor, Values, Var};
use crate::error::{Error, Result};

/// Which way along the row the source is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleDirection {
    /// `s = -1`: sample toward smaller column indices. Used to
    /// reconstruct the left view from the right one.
    Leftward,
    /// `s = +1`: sample toward larger column indices. Used to
    /// reconstruct the right view from the left one.
    Rightward,
}

impl SampleDirection {
    pub fn sign(self) -> f64 {
        match self {
            SampleDirection::Leftward => -1.0,
            SampleDirection::Rightward => 1.0,
        }
    }
}

struct SampleOp {
    source: Var,
    disparity: Var,
    sign: f64,
}

/// Resolved sampling position for one output pixel.
struct SamplePos {
    x0: usize,
    x1: usize,
    frac: f64,
    interior: bool,
}

fn resolve(x: f64, width: usize) -> SamplePos {
    let max_x = (width - 1) as f64;
    let clamped = x.clamp(0.0, max_x);
    let x0 = clamped.floor();
    let x1 = (x0 + 1.0).min(max_x);
    SamplePos {
        x0: x0 as usize,
        x1: x1 as usize,
        frac: clamped - x0,
        interior: x > 0.0 && x < max_x,
    }
}

impl TapeOp for SampleOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.source, self.disparity]
    }
    fn grads(&self, vals: &Values<'_>, _out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let source = vals.value(self.source);
        let disp = vals.value(self.disparity);
        let (channels, h, w) = source_dims(source);
        let mut dsrc = vec![0.0; source.numel()];
        let mut ddisp = vec![0.0; disp.numel()];
        for i in 0..h {
            for j in 0..w {
                let d = disp.data()[i * w + j];
                let pos = resolve(j as f64 + self.sign * d, w);
                for c in 0..channels {
                    let gv = g[(c * h + i) * w + j];
                    if gv == 0.0 {
                        continue;
                    }
                    let row = (c * h + i) * w;
                    dsrc[row + pos.x0] += gv * (1.0 - pos.frac);
                    dsrc[row + pos.x1] += gv * pos.frac;
                    if pos.interior {
                        let slope = source.data()[row + pos.x1] - source.data()[row + pos.x0];
                        ddisp[i * w + j] += gv * self.sign * slope;
                    }
                }
            }
        }
        vec![Some(dsrc), Some(ddisp)]
    }
}

fn source_dims(source: &Tensor) -> (usize, usize, usize) {
    match source.shape()[..] {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => unreachable!("validated at op construction"),
    }
}

/// Samples `source` along rows at `j + sign(direction) * disparity(i, j)`
/// with linear interpolation and border clamping.
///
/// `source` is CxHxW or HxW; `disparity` is HxW in pixels. Output has the
/// shape of `source`. Differentiable in both arguments; the disparity
/// gradient is `s * (source(x1) - source(x0))` at interior positions.
pub fn bilinear_sample(
    tape: &mut Tape,
    source: Var,
    disparity: Var,
    direction: SampleDirection,
) -> Result<Var> {
    let src = tape.value(source);
    let (channels, h, w) = match src.shape()[..] {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::shape(
                "bilinear_sample",
                format!("source must be rank 2 or 3, got {:?}", src.shape()),
            ))
        }
    };
    let disp = tape.value(disparity);
    if disp.shape() != [h, w] {
        return Err(Error::shape(
            "bilinear_sample",
            format!(
                "disparity shape {:?} != source spatial dims [{h}, {w}]",
                disp.shape()
            ),
        ));
    }
    if let Some(idx) = disp.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "bilinear_sample",
            index: idx,
        });
    }

    let sign = direction.sign();
    let src_data = tape.value(source).data();
    let disp_data = tape.value(disparity).data();
    let mut out = vec![0.0; channels * h * w];
    for i in 0..h {
        for j in 0..w {
            let pos = resolve(j as f64 + sign * disp_data[i * w + j], w);
            for c in 0..channels {
                let row = (c * h + i) * w;
                out[row + j] =
                    (1.0 - pos.frac) * src_data[row + pos.x0] + pos.frac * src_data[row + pos.x1];
            }
        }
    }
    tape.push(
        Tensor::from_parts(tape.value(source).shape().to_vec(), out),
        Box::new(SampleOp {
            source,
            disparity,
            sign,
        }),
    )
}

/// Reconstructs the left view by sampling the right image with the
/// left-aligned disparity map.
pub fn reconstruct_left(tape: &mut Tape, right_image: Var, d_left: Var) -> Result<Var> {
    bilinear_sample(tape, right_image, d_left, SampleDirection::Leftward)
}

/// Reconstructs the right view by sampling the left image with the
/// right-aligned disparity map.
pub fn reconstruct_right(tape: &mut Tape, left_image: Var, d_right: Var) -> Result<Var> {
    bilinear_sample(tape, left_image, d_right, SampleDirection::Rightward)
}

/// Projects the other view's disparity map onto the base view's
/// coordinates by sampling it with the base disparity. Differentiable in
/// both maps, including through the sampling coordinates.
pub fn project_disparity(
    tape: &mut Tape,
    d_other: Var,
    d_base: Var,
    direction: SampleDirection,
) -> Result<Var> {
    let shape = tape.value(d_other).shape();
    if shape.len() != 2 {
        return Err(Error::shape(
            "project_disparity",
            format!("disparity maps must be rank 2, got {shape:?}"),
        ));
    }
    bilinear_sample(tape, d_other, d_base, direction)
}
