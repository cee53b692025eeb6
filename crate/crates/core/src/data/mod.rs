//! Synthetic rectified-stereo scenes with exact ground-truth disparity,
//! plus dataset I/O.
//!
//! The generator composites fronto-parallel textured rectangles over a
//! textured background with the painter's algorithm in both views. Each
//! layer's texture is a function of world coordinates, so for every
//! non-occluded left pixel the right view reproduces it exactly:
//! `right(i, j - d) == left(i, j)` bit for bit. That identity is what
//! lets the warp module's sign convention be verified instead of trusted.
//!
//! Layer disparities must be integer-valued; fractional shifts would put
//! right-view samples between pixel centers and break exactness.
//!
//! Textures are smoothed value noise rather than flat color so the
//! photometric loss has a unique minimum in disparity, and their base
//! brightness rises with layer disparity. That brightness cue is what a
//! single-image network can actually learn from this corpus; without it,
//! depth on held-out scenes would be unpredictable in principle.

mod formats;

pub use formats::{
    load_samples, read_manifest, read_pfm, read_ppm, write_manifest, write_pfm, write_ppm,
    ManifestEntry,
};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::{splitmix64, Rng};

/// Calibrated camera geometry of a rectified pair.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraModel {
    /// Baseline distance between the cameras, meters.
    pub baseline: f64,
    /// Focal length, pixels.
    pub focal: f64,
}

impl CameraModel {
    pub fn new(baseline: f64, focal: f64) -> Result<Self> {
        if baseline <= 0.0 || focal <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "camera baseline and focal must be positive, got b={baseline}, f={focal}"
            )));
        }
        Ok(CameraModel { baseline, focal })
    }

    /// Default desk-scale camera: baseline 0.5 m, focal = image width.
    pub fn default_for_width(width: usize) -> Self {
        CameraModel {
            baseline: 0.5,
            focal: width as f64,
        }
    }
}

/// A rectified left/right pair with optional exact ground truth.
#[derive(Debug, Clone)]
pub struct StereoSample {
    /// 3xHxW, values in [0, 1].
    pub left: Tensor,
    pub right: Tensor,
    /// HxW left-view disparity in pixels, when known.
    pub gt_disparity_left: Option<Tensor>,
    pub camera: CameraModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LayerSpec {
    pub rect: Rect,
    /// Constant disparity of the layer, pixels. Integer-valued.
    pub disparity: f64,
    pub texture_seed: u64,
}

/// Full description of a synthetic scene; rendering is a pure function
/// of this value.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub background_disparity: f64,
    pub layers: Vec<LayerSpec>,
}

impl SceneSpec {
    /// Draws a random scene: 1-3 textured rectangles at distinct integer
    /// disparities over a near-background, all inside the representable
    /// disparity range.
    pub fn random(seed: u64, width: usize, height: usize) -> SceneSpec {
        let mut rng = Rng::new(seed);
        let d_cap = (0.3 * width as f64).floor() as usize;
        let d_hi = d_cap.saturating_sub(1).min(12).max(3);
        let layer_count = 1 + rng.below(3);
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let w = width / 4 + rng.below(width / 3 + 1);
            let h = height / 4 + rng.below(height / 3 + 1);
            let x = rng.below(width - w);
            let y = rng.below(height - h);
            let disparity = (3 + rng.below(d_hi - 2)) as f64;
            layers.push(LayerSpec {
                rect: Rect { x, y, w, h },
                disparity,
                texture_seed: rng.next_u64(),
            });
        }
        SceneSpec {
            seed,
            width,
            height,
            background_disparity: (1 + rng.below(2)) as f64,
            layers,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidScene("zero image dimension".to_string()));
        }
        let d_max = 0.3 * self.width as f64;
        let check_disp = |name: String, d: f64| -> Result<()> {
            if d < 0.0 || d >= d_max {
                return Err(Error::InvalidScene(format!(
                    "{name} disparity {d} outside [0, {d_max})"
                )));
            }
            if d.fract() != 0.0 {
                return Err(Error::InvalidScene(format!(
                    "{name} disparity {d} is not integer-valued"
                )));
            }
            Ok(())
        };
        check_disp("background".to_string(), self.background_disparity)?;
        for (k, layer) in self.layers.iter().enumerate() {
            check_disp(format!("layer {k}"), layer.disparity)?;
            let r = &layer.rect;
            if r.w == 0 || r.h == 0 || r.x + r.w > self.width || r.y + r.h > self.height {
                return Err(Error::InvalidScene(format!(
                    "layer {k} rectangle {r:?} outside {}x{} image",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

/// Brightness range used for the disparity cue in textures.
const CUE_LO: f64 = 0.15;
const CUE_SPAN: f64 = 0.6;
const NOISE_AMPLITUDE: f64 = 0.24;

fn lattice_value(seed: u64, channel: usize, gy: i64, gx: i64) -> f64 {
    let mut s = seed
        ^ (channel as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (gy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (gx as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    (splitmix64(&mut s) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Band-limited value noise in [0, 1): two octaves of bilinearly
/// interpolated lattice noise. Continuous in `x`, so it can be evaluated
/// at shifted world coordinates exactly.
fn value_noise(seed: u64, channel: usize, y: f64, x: f64) -> f64 {
    let mut acc = 0.0;
    for (octave, (spacing, weight)) in [(5.0, 0.65), (2.0, 0.35)].into_iter().enumerate() {
        let oseed = seed.wrapping_add(octave as u64);
        let sx = x / spacing;
        let sy = y / spacing;
        let gx = sx.floor();
        let gy = sy.floor();
        let fx = sx - gx;
        let fy = sy - gy;
        let (gx, gy) = (gx as i64, gy as i64);
        let v00 = lattice_value(oseed, channel, gy, gx);
        let v01 = lattice_value(oseed, channel, gy, gx + 1);
        let v10 = lattice_value(oseed, channel, gy + 1, gx);
        let v11 = lattice_value(oseed, channel, gy + 1, gx + 1);
        let top = v00 + (v01 - v00) * fx;
        let bot = v10 + (v11 - v10) * fx;
        acc += weight * (top + (bot - top) * fy);
    }
    acc
}

/// Texture of one surface, evaluated at left-view world coordinates.
/// Base brightness encodes the surface's disparity.
fn surface_value(
    texture_seed: u64,
    disparity: f64,
    d_norm: f64,
    channel: usize,
    i: usize,
    x: f64,
) -> f64 {
    let base = CUE_LO + CUE_SPAN * (disparity / d_norm);
    let n = value_noise(texture_seed, channel, i as f64, x);
    (base + NOISE_AMPLITUDE * (n - 0.5)).clamp(0.0, 1.0)
}

struct Rendered {
    left: Vec<f64>,
    right: Vec<f64>,
    gt_left: Vec<f64>,
    /// Disparity of the front-most surface at each right-view pixel.
    right_zbuffer: Vec<f64>,
}

fn render(spec: &SceneSpec) -> Result<Rendered> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let d_norm = 0.3 * w as f64;
    let mut left = vec![0.0; 3 * h * w];
    let mut right = vec![0.0; 3 * h * w];
    let mut gt_left = vec![0.0; h * w];
    let mut right_zbuffer = vec![0.0; h * w];

    // background covers both views entirely
    let bg_seed = spec.seed ^ 0xB0B0_5EED_0000_0001;
    let bg_d = spec.background_disparity;
    for i in 0..h {
        for j in 0..w {
            gt_left[i * w + j] = bg_d;
            right_zbuffer[i * w + j] = bg_d;
            for c in 0..3 {
                left[(c * h + i) * w + j] = surface_value(bg_seed, bg_d, d_norm, c, i, j as f64);
                right[(c * h + i) * w + j] =
                    surface_value(bg_seed, bg_d, d_norm, c, i, j as f64 + bg_d);
            }
        }
    }

    // painter's algorithm back to front; nearer (larger d) layers last
    let mut order: Vec<&LayerSpec> = spec.layers.iter().collect();
    order.sort_by(|a, b| a.disparity.total_cmp(&b.disparity));
    for layer in order {
        let r = &layer.rect;
        let d = layer.disparity;
        for i in r.y..r.y + r.h {
            for j in r.x..r.x + r.w {
                gt_left[i * w + j] = d;
                for c in 0..3 {
                    left[(c * h + i) * w + j] =
                        surface_value(layer.texture_seed, d, d_norm, c, i, j as f64);
                }
                // the layer's right-view footprint is shifted d columns left
                let jr = j as f64 - d;
                if jr >= 0.0 {
                    let jr = jr as usize;
                    right_zbuffer[i * w + jr] = d;
                    for c in 0..3 {
                        right[(c * h + i) * w + jr] =
                            surface_value(layer.texture_seed, d, d_norm, c, i, jr as f64 + d);
                    }
                }
            }
        }
    }

    Ok(Rendered {
        left,
        right,
        gt_left,
        right_zbuffer,
    })
}

/// Renders the stereo pair with its exact left-view ground truth.
pub fn generate_scene(spec: &SceneSpec) -> Result<StereoSample> {
    let r = render(spec)?;
    let (w, h) = (spec.width, spec.height);
    Ok(StereoSample {
        left: Tensor::from_parts(vec![3, h, w], r.left),
        right: Tensor::from_parts(vec![3, h, w], r.right),
        gt_disparity_left: Some(Tensor::from_parts(vec![h, w], r.gt_left)),
        camera: CameraModel::default_for_width(w),
    })
}

/// Binary HxW mask of left pixels visible in both views (1 = visible).
///
/// A left pixel is visible when its right-view position lies inside the
/// frame and no nearer surface covers that position, per the generator's
/// z-buffer.
pub fn occlusion_mask(spec: &SceneSpec) -> Result<Tensor> {
    let r = render(spec)?;
    let (w, h) = (spec.width, spec.height);
    let mut mask = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let d = r.gt_left[i * w + j];
            let jr = j as f64 - d;
            if jr >= 0.0 {
                let jr = jr as usize;
                if r.right_zbuffer[i * w + jr] == d {
                    mask[i * w + j] = 1.0;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w], mask))
}
