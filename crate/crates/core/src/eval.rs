//! Disparity-to-depth conversion, evaluation metrics, flip-averaging
//! post-processing, and the dataset evaluation driver.

use std::fmt;
use std::path::Path;

use crate::data::{CameraModel, StereoSample};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// The seven depth metrics plus the D1-all disparity error.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    /// Percentage of valid pixels whose disparity error exceeds both
    /// 3 px and 5% of the ground truth.
    pub d1_all: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixel_count: usize,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "abs_rel", "sq_rel", "rmse", "rmse_log", "d1_all", "d<1.25", "d<1.25^2", "d<1.25^3", "pixels"
        )?;
        write!(
            f,
            "{:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.3} {:>9.4} {:>9.4} {:>9.4} {:>9}",
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.d1_all,
            self.delta1,
            self.delta2,
            self.delta3,
            self.pixel_count
        )
    }
}

/// Depth metrics without the disparity-space D1 term.
#[derive(Debug, Clone, Copy)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixel_count: usize,
}

impl MetricsReport {
    pub fn from_parts(depth: DepthMetrics, d1_all: f64) -> MetricsReport {
        MetricsReport {
            abs_rel: depth.abs_rel,
            sq_rel: depth.sq_rel,
            rmse: depth.rmse,
            rmse_log: depth.rmse_log,
            d1_all,
            delta1: depth.delta1,
            delta2: depth.delta2,
            delta3: depth.delta3,
            pixel_count: depth.pixel_count,
        }
    }
}

/// Recovers capped depth from disparity: `min(b*f / d, cap)`, with
/// disparities at or below `b*f / cap` mapping to the cap so tiny and
/// zero disparities cannot blow up the non-thresholded metrics.
pub fn disparity_to_depth(disparity: &Tensor, camera: &CameraModel, cap: f64) -> Result<Tensor> {
    if !(cap > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "depth cap must be positive, got {cap}"
        )));
    }
    let bf = camera.baseline * camera.focal;
    let threshold = bf / cap;
    Ok(disparity.map(|d| if d <= threshold { cap } else { bf / d }))
}

/// Pixel-pooled accumulator so per-image and dataset-level metrics use
/// the same arithmetic (reduction is associative summation).
#[derive(Debug, Clone, Copy, Default)]
struct DepthSums {
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    sq_log: f64,
    delta1: usize,
    delta2: usize,
    delta3: usize,
    n: usize,
}

impl DepthSums {
    fn add(&mut self, other: &DepthSums) {
        self.abs_rel += other.abs_rel;
        self.sq_rel += other.sq_rel;
        self.sq += other.sq;
        self.sq_log += other.sq_log;
        self.delta1 += other.delta1;
        self.delta2 += other.delta2;
        self.delta3 += other.delta3;
        self.n += other.n;
    }

    fn finish(&self) -> DepthMetrics {
        let n = self.n as f64;
        DepthMetrics {
            abs_rel: self.abs_rel / n,
            sq_rel: self.sq_rel / n,
            rmse: (self.sq / n).sqrt(),
            rmse_log: (self.sq_log / n).sqrt(),
            delta1: self.delta1 as f64 / n,
            delta2: self.delta2 as f64 / n,
            delta3: self.delta3 as f64 / n,
            pixel_count: self.n,
        }
    }
}

fn depth_sums(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<DepthSums> {
    if pred.shape() != gt.shape() || mask.shape() != gt.shape() {
        return Err(Error::shape(
            "depth_metrics",
            format!(
                "pred {:?}, gt {:?}, mask {:?} must agree",
                pred.shape(),
                gt.shape(),
                mask.shape()
            ),
        ));
    }
    let mut sums = DepthSums::default();
    for (i, ((&p, &g), &m)) in pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(mask.data())
        .enumerate()
    {
        if m <= 0.5 {
            continue;
        }
        if p <= 0.0 {
            return Err(Error::NonPositiveDepth {
                index: i,
                which: "prediction",
            });
        }
        if g <= 0.0 {
            return Err(Error::NonPositiveDepth {
                index: i,
                which: "ground truth",
            });
        }
        let diff = p - g;
        sums.abs_rel += diff.abs() / g;
        sums.sq_rel += diff * diff / g;
        sums.sq += diff * diff;
        let dl = p.ln() - g.ln();
        sums.sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        if ratio < 1.25 {
            sums.delta1 += 1;
        }
        if ratio < 1.25 * 1.25 {
            sums.delta2 += 1;
        }
        if ratio < 1.25 * 1.25 * 1.25 {
            sums.delta3 += 1;
        }
        sums.n += 1;
    }
    if sums.n == 0 {
        return Err(Error::EmptyMask { op: "depth_metrics" });
    }
    Ok(sums)
}

/// Eigen-style depth metrics over the valid pixels.
pub fn depth_metrics(pred_depth: &Tensor, gt_depth: &Tensor, mask: &Tensor) -> Result<DepthMetrics> {
    Ok(depth_sums(pred_depth, gt_depth, mask)?.finish())
}

/// KITTI 2015 D1-all: percentage of valid pixels with disparity error
/// above 3 px and above 5% of ground truth.
pub fn d1_all(pred_disp: &Tensor, gt_disp: &Tensor, mask: &Tensor) -> Result<f64> {
    if pred_disp.shape() != gt_disp.shape() || mask.shape() != gt_disp.shape() {
        return Err(Error::shape(
            "d1_all",
            format!(
                "pred {:?}, gt {:?}, mask {:?} must agree",
                pred_disp.shape(),
                gt_disp.shape(),
                mask.shape()
            ),
        ));
    }
    let mut bad = 0usize;
    let mut n = 0usize;
    for ((&p, &g), &m) in pred_disp.data().iter().zip(gt_disp.data()).zip(mask.data()) {
        if m <= 0.5 {
            continue;
        }
        let err = (p - g).abs();
        if err > 3.0 && err > 0.05 * g {
            bad += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask { op: "d1_all" });
    }
    Ok(100.0 * bad as f64 / n as f64)
}

/// Flip-averaging post-processing.
///
/// `d_flipped_run` is the raw disparity predicted on the horizontally
/// flipped image; mirroring it back aligns it with `d_l` but with the
/// disocclusion ramps on the opposite side. The first 5% of columns come
/// from the mirrored map, the last 5% from `d_l`, and the center is
/// their average.
pub fn postprocess(d_l: &Tensor, d_flipped_run: &Tensor) -> Result<Tensor> {
    let (h, w) = d_l.dims2()?;
    if d_flipped_run.shape() != d_l.shape() {
        return Err(Error::shape(
            "postprocess",
            format!(
                "shape {:?} != shape {:?}",
                d_flipped_run.shape(),
                d_l.shape()
            ),
        ));
    }
    let mirrored = d_flipped_run.mirror_w();
    let left_band = (0.05 * w as f64).ceil() as usize;
    let right_band = (0.95 * w as f64).floor() as usize;
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = if j < left_band {
                mirrored.at2(i, j)
            } else if j >= right_band {
                d_l.at2(i, j)
            } else {
                0.5 * (d_l.at2(i, j) + mirrored.at2(i, j))
            };
        }
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

/// Left pixels visible in both views, derived from the ground-truth
/// disparity map alone: a pixel is visible when its right-view column is
/// inside the frame and no pixel in the same row with strictly larger
/// disparity lands on the same column. Exact for the generator's
/// integer-valued maps.
pub fn visibility_from_disparity(gt: &Tensor) -> Result<Tensor> {
    let (h, w) = gt.dims2()?;
    let mut mask = vec![0.0; h * w];
    let mut winner = vec![f64::NEG_INFINITY; w];
    for i in 0..h {
        winner.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for j in 0..w {
            let d = gt.at2(i, j);
            let r = j as f64 - d;
            if r >= -0.5 {
                let rb = (r.round() as usize).min(w - 1);
                if d > winner[rb] {
                    winner[rb] = d;
                }
            }
        }
        for j in 0..w {
            let d = gt.at2(i, j);
            let r = j as f64 - d;
            if r >= -0.5 {
                let rb = (r.round() as usize).min(w - 1);
                if d >= winner[rb] - 1e-9 {
                    mask[i * w + j] = 1.0;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w], mask))
}

/// Bilinear resize (corner-aligned) of an HxW or CxHxW tensor.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = t.spatial()?;
    let channels = t.numel() / (h * w);
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bilinear", "zero output size".to_string()));
    }
    let fy = if out_h > 1 { (h - 1) as f64 / (out_h - 1) as f64 } else { 0.0 };
    let fx = if out_w > 1 { (w - 1) as f64 / (out_w - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &t.data()[c * h * w..(c + 1) * h * w];
        for oi in 0..out_h {
            let y = oi as f64 * fy;
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = y - y0 as f64;
            for oj in 0..out_w {
                let x = oj as f64 * fx;
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = x - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Ok(Tensor::from_parts(shape, out))
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Maximum depth in meters; predictions and ground truth are capped.
    pub depth_cap: f64,
    /// Optional evaluation rectangle; pixels outside are ignored.
    pub crop: Option<CropRect>,
    /// Run the predictor on the flipped image too and combine.
    pub postprocess: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            depth_cap: 80.0,
            crop: None,
            postprocess: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PerImageMetrics {
    pub index: usize,
    pub metrics: MetricsReport,
}

/// Evaluates a disparity predictor over a dataset with ground truth.
///
/// The predictor receives the left and right images and returns the
/// left-view disparity; with post-processing enabled it is called a
/// second time on mirrored inputs. Metrics are restricted to pixels
/// visible in both views (from the ground truth) and to the crop
/// rectangle when given. The dataset report pools pixels across images.
pub fn evaluate<P>(
    samples: &[StereoSample],
    mut predictor: P,
    opts: &EvalOptions,
) -> Result<(MetricsReport, Vec<PerImageMetrics>)>
where
    P: FnMut(&Tensor, &Tensor) -> Result<Tensor>,
{
    if samples.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation set".to_string()));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    let mut pooled = DepthSums::default();
    let mut d1_bad_pooled = 0.0f64;
    let mut d1_n_pooled = 0usize;
    for (index, sample) in samples.iter().enumerate() {
        let gt = sample.gt_disparity_left.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!("sample {index} has no ground-truth disparity"))
        })?;
        let (h, w) = gt.dims2()?;

        let mut pred = predictor(&sample.left, &sample.right)?;
        if opts.postprocess {
            let flipped = predictor(&sample.left.mirror_w(), &sample.right.mirror_w())?;
            pred = postprocess(&pred, &flipped)?;
        }
        if pred.shape() != gt.shape() {
            // resize and rescale disparities to the ground-truth grid
            let (_, pw) = pred.dims2()?;
            let resized = resize_bilinear(&pred, h, w)?;
            pred = resized.map(|v| v * w as f64 / pw as f64);
        }

        let mut mask = visibility_from_disparity(gt)?;
        if let Some(crop) = opts.crop {
            if crop.x + crop.w > w || crop.y + crop.h > h {
                return Err(Error::InvalidConfig(format!(
                    "crop {crop:?} outside {h}x{w} image"
                )));
            }
            let mut cropped = vec![0.0; h * w];
            for i in crop.y..crop.y + crop.h {
                for j in crop.x..crop.x + crop.w {
                    cropped[i * w + j] = mask.at2(i, j);
                }
            }
            mask = Tensor::from_parts(vec![h, w], cropped);
        }

        let d1 = d1_all(&pred, gt, &mask)?;
        let pred_depth = disparity_to_depth(&pred, &sample.camera, opts.depth_cap)?;
        let gt_depth = disparity_to_depth(gt, &sample.camera, opts.depth_cap)?;
        let sums = depth_sums(&pred_depth, &gt_depth, &mask)?;

        per_image.push(PerImageMetrics {
            index,
            metrics: MetricsReport::from_parts(sums.finish(), d1),
        });
        d1_bad_pooled += d1 / 100.0 * sums.n as f64;
        d1_n_pooled += sums.n;
        pooled.add(&sums);
    }
    let report = MetricsReport::from_parts(
        pooled.finish(),
        100.0 * d1_bad_pooled / d1_n_pooled as f64,
    );
    Ok((report, per_image))
}

/// Per-image CSV: image id plus all eight metrics.
pub fn write_metrics_csv(path: &Path, per_image: &[PerImageMetrics]) -> Result<()> {
    use std::io::Write;
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    (|| -> std::io::Result<()> {
        writeln!(
            out,
            "image_id,abs_rel,sq_rel,rmse,rmse_log,d1_all,delta1,delta2,delta3"
        )?;
        for p in per_image {
            let m = &p.metrics;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                p.index, m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.d1_all, m.delta1, m.delta2, m.delta3
            )?;
        }
        out.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, occlusion_mask, SceneSpec};
    use crate::rng::Rng;

    fn cam() -> CameraModel {
        CameraModel {
            baseline: 0.54,
            focal: 721.0,
        }
    }

    #[test]
    fn depth_conversion_examples() {
        let d = Tensor::new(vec![1, 3], vec![38.934, 0.0, 1e-9]).unwrap();
        let depth = disparity_to_depth(&d, &cam(), 80.0).unwrap();
        assert!((depth.data()[0] - 10.0).abs() < 1e-9);
        assert_eq!(depth.data()[1], 80.0);
        assert_eq!(depth.data()[2], 80.0);
    }

    #[test]
    fn depth_disparity_roundtrip_below_cap() {
        let bf = cam().baseline * cam().focal;
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let depth = rng.uniform(5.0, 79.0);
            let disparity = bf / depth;
            let t = Tensor::new(vec![1, 1], vec![disparity]).unwrap();
            let back = disparity_to_depth(&t, &cam(), 80.0).unwrap();
            assert!((back.data()[0] - depth).abs() <= 1e-9);
        }
    }

    #[test]
    fn perfect_predictions_zero_all_errors() {
        let mut rng = Rng::new(2);
        let gt = Tensor::uniform(vec![4, 4], 5.0, 60.0, &mut rng);
        let mask = Tensor::full(vec![4, 4], 1.0);
        let m = depth_metrics(&gt, &gt, &mask).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.delta1, 1.0);
        assert_eq!(m.delta3, 1.0);
    }

    #[test]
    fn uniform_ratio_prediction() {
        let gt = Tensor::full(vec![3, 3], 10.0);
        let pred = gt.map(|v| 1.3 * v);
        let mask = Tensor::full(vec![3, 3], 1.0);
        let m = depth_metrics(&pred, &gt, &mask).unwrap();
        assert!((m.abs_rel - 0.3).abs() < 1e-12);
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 1.0); // 1.3 < 1.5625
    }

    #[test]
    fn depth_metrics_match_loop_oracle() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let pred = Tensor::uniform(vec![4, 4], 1.0, 70.0, &mut rng);
            let gt = Tensor::uniform(vec![4, 4], 1.0, 70.0, &mut rng);
            let mask =
                Tensor::from_parts(vec![4, 4], (0..16).map(|_| if rng.chance(0.8) { 1.0 } else { 0.0 }).collect());
            if mask.data().iter().sum::<f64>() == 0.0 {
                continue;
            }
            let m = depth_metrics(&pred, &gt, &mask).unwrap();

            // independent direct computation
            let mut abs_rel = 0.0;
            let mut sq_rel = 0.0;
            let mut sq = 0.0;
            let mut sq_log = 0.0;
            let mut d1c = 0;
            let mut n = 0.0;
            for i in 0..16 {
                if mask.data()[i] != 1.0 {
                    continue;
                }
                let (p, g) = (pred.data()[i], gt.data()[i]);
                abs_rel += (p - g).abs() / g;
                sq_rel += (p - g) * (p - g) / g;
                sq += (p - g) * (p - g);
                sq_log += (p.ln() - g.ln()).powi(2);
                if (p / g).max(g / p) < 1.25 {
                    d1c += 1;
                }
                n += 1.0;
            }
            assert!((m.abs_rel - abs_rel / n).abs() <= 1e-12);
            assert!((m.sq_rel - sq_rel / n).abs() <= 1e-12);
            assert!((m.rmse - (sq / n).sqrt()).abs() <= 1e-12);
            assert!((m.rmse_log - (sq_log / n).sqrt()).abs() <= 1e-12);
            assert!((m.delta1 - d1c as f64 / n).abs() <= 1e-12);
        }
    }

    #[test]
    fn metric_error_paths() {
        let t = Tensor::full(vec![2, 2], 1.0);
        let empty = Tensor::zeros(vec![2, 2]);
        assert!(matches!(
            depth_metrics(&t, &t, &empty),
            Err(Error::EmptyMask { .. })
        ));
        let bad = Tensor::new(vec![2, 2], vec![1.0, -1.0, 1.0, 1.0]).unwrap();
        let full = Tensor::full(vec![2, 2], 1.0);
        assert!(matches!(
            depth_metrics(&bad, &t, &full),
            Err(Error::NonPositiveDepth { which: "prediction", .. })
        ));
    }

    #[test]
    fn d1_examples() {
        let mask = Tensor::full(vec![2, 2], 1.0);
        let gt = Tensor::full(vec![2, 2], 50.0);
        assert_eq!(d1_all(&gt, &gt, &mask).unwrap(), 0.0);
        let pred = Tensor::full(vec![2, 2], 54.0);
        assert_eq!(d1_all(&pred, &gt, &mask).unwrap(), 100.0);
        let pred = Tensor::full(vec![2, 2], 52.0);
        assert_eq!(d1_all(&pred, &gt, &mask).unwrap(), 0.0);
        // error must exceed BOTH thresholds: 3.5 px on gt 80 is only 4.4%
        let gt = Tensor::full(vec![2, 2], 80.0);
        let pred = Tensor::full(vec![2, 2], 83.5);
        assert_eq!(d1_all(&pred, &gt, &mask).unwrap(), 0.0);
    }

    #[test]
    fn delta_metrics_scale_invariant_and_nested() {
        let mut rng = Rng::new(4);
        let pred = Tensor::uniform(vec![5, 5], 1.0, 50.0, &mut rng);
        let gt = Tensor::uniform(vec![5, 5], 1.0, 50.0, &mut rng);
        let mask = Tensor::full(vec![5, 5], 1.0);
        let m = depth_metrics(&pred, &gt, &mask).unwrap();
        assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
        let c = 3.7;
        let m2 = depth_metrics(&pred.map(|v| c * v), &gt.map(|v| c * v), &mask).unwrap();
        assert_eq!(m.delta1, m2.delta1);
        assert_eq!(m.delta2, m2.delta2);
        assert_eq!(m.delta3, m2.delta3);
    }

    #[test]
    fn rmse_symmetric_abs_rel_not() {
        let mut rng = Rng::new(5);
        let a = Tensor::uniform(vec![4, 4], 2.0, 40.0, &mut rng);
        let b = Tensor::uniform(vec![4, 4], 2.0, 40.0, &mut rng);
        let mask = Tensor::full(vec![4, 4], 1.0);
        let ab = depth_metrics(&a, &b, &mask).unwrap();
        let ba = depth_metrics(&b, &a, &mask).unwrap();
        assert!((ab.rmse - ba.rmse).abs() < 1e-12);
        assert!((ab.rmse_log - ba.rmse_log).abs() < 1e-12);
        assert!((ab.abs_rel - ba.abs_rel).abs() > 1e-6);
    }

    #[test]
    fn postprocess_band_assignment() {
        for w in [20usize, 64, 100] {
            let h = 3;
            let dl = Tensor::full(vec![h, w], 2.0);
            let df = Tensor::full(vec![h, w], 4.0); // mirrored stays 4
            let out = postprocess(&dl, &df).unwrap();
            let left_band = (0.05 * w as f64).ceil() as usize;
            let right_band = (0.95 * w as f64).floor() as usize;
            for j in 0..w {
                let expect = if j < left_band {
                    4.0
                } else if j >= right_band {
                    2.0
                } else {
                    3.0
                };
                assert_eq!(out.at2(1, j), expect, "W={w} column {j}");
            }
        }
        // W=20: exactly column 0 from the mirrored map, column 19 from d_l
        let dl = Tensor::full(vec![1, 20], 2.0);
        let df = Tensor::full(vec![1, 20], 4.0);
        let out = postprocess(&dl, &df).unwrap();
        assert_eq!(out.at2(0, 0), 4.0);
        assert_eq!(out.at2(0, 19), 2.0);
        for j in 1..19 {
            assert_eq!(out.at2(0, j), 3.0);
        }
    }

    #[test]
    fn postprocess_agreement_is_identity_and_output_bounded() {
        let mut rng = Rng::new(6);
        let d = Tensor::uniform(vec![4, 24], 1.0, 8.0, &mut rng);
        // if both runs agree (d" == d), output is d
        let out = postprocess(&d, &d.mirror_w()).unwrap();
        for (a, b) in out.data().iter().zip(d.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // pixelwise bounded by the two sources
        let other = Tensor::uniform(vec![4, 24], 1.0, 8.0, &mut rng);
        let out = postprocess(&d, &other).unwrap();
        let mirrored = other.mirror_w();
        for ((o, a), b) in out.data().iter().zip(d.data()).zip(mirrored.data()) {
            let (lo, hi) = (a.min(*b), a.max(*b));
            assert!(*o >= lo - 1e-12 && *o <= hi + 1e-12);
        }
    }

    #[test]
    fn visibility_matches_generator_mask_on_layered_scene() {
        let spec = SceneSpec {
            seed: 9,
            width: 32,
            height: 12,
            background_disparity: 1.0,
            layers: vec![crate::data::LayerSpec {
                rect: crate::data::Rect {
                    x: 12,
                    y: 2,
                    w: 10,
                    h: 8,
                },
                disparity: 5.0,
                texture_seed: 4,
            }],
        };
        let sample = generate_scene(&spec).unwrap();
        let from_gt = visibility_from_disparity(sample.gt_disparity_left.as_ref().unwrap()).unwrap();
        let from_spec = occlusion_mask(&spec).unwrap();
        assert_eq!(from_gt.data(), from_spec.data());
    }

    #[test]
    fn oracle_predictions_evaluate_near_zero() {
        let samples: Vec<_> = (0..5)
            .map(|i| generate_scene(&SceneSpec::random(30 + i, 32, 16)).unwrap())
            .collect();
        let gts: Vec<Tensor> = samples
            .iter()
            .map(|s| s.gt_disparity_left.clone().unwrap())
            .collect();
        // the predictor is called once per sample, in order
        let mut call = 0usize;
        let (report, per_image) = evaluate(
            &samples,
            |_, _| {
                let gt = gts[call].clone();
                call += 1;
                Ok(gt)
            },
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(per_image.len(), 5);
        assert_eq!(report.d1_all, 0.0);
        assert!(report.abs_rel < 1e-12);
        assert_eq!(report.delta1, 1.0);
        assert!(report.pixel_count > 0);
    }

    #[test]
    fn empty_set_is_an_error() {
        let r = evaluate(&[], |_, _| Ok(Tensor::zeros(vec![2, 2])), &EvalOptions::default());
        assert!(r.is_err());
    }

    #[test]
    fn resize_bilinear_identity_and_shape() {
        let mut rng = Rng::new(7);
        let t = Tensor::uniform(vec![3, 5, 6], 0.0, 1.0, &mut rng);
        let same = resize_bilinear(&t, 5, 6).unwrap();
        assert_eq!(same.data(), t.data());
        let up = resize_bilinear(&t, 10, 12).unwrap();
        assert_eq!(up.shape(), &[3, 10, 12]);
        // corners preserved under corner-aligned resize
        assert!((up.at3(0, 0, 0) - t.at3(0, 0, 0)).abs() < 1e-12);
        assert!((up.at3(2, 9, 11) - t.at3(2, 4, 5)).abs() < 1e-12);
    }
}
