//! Training objective: appearance, smoothness, and left-right consistency
//! terms assembled per scale and summed over the output pyramid.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::warp::{self, SampleDirection};

/// Weights of the loss terms.
///
/// `alpha_ds_base` is divided by the downscale factor of each pyramid
/// level so smoothing is equivalent at every scale.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha_ap: f64,
    pub alpha_lr: f64,
    pub alpha_ds_base: f64,
    /// SSIM-vs-L1 mix inside the appearance term.
    pub ssim_alpha: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_ap: 1.0,
            alpha_lr: 1.0,
            alpha_ds_base: 0.1,
            ssim_alpha: 0.85,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha_ap", self.alpha_ap),
            ("alpha_lr", self.alpha_lr),
            ("alpha_ds_base", self.alpha_ds_base),
            ("ssim_c1", self.ssim_c1),
            ("ssim_c2", self.ssim_c2),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "loss weight {name} must be non-negative, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.ssim_alpha) {
            return Err(Error::InvalidConfig(format!(
                "ssim_alpha must be in [0, 1], got {}",
                self.ssim_alpha
            )));
        }
        Ok(())
    }

    /// Smoothness weight at a pyramid level with downscale factor `r`.
    pub fn alpha_ds(&self, downscale: f64) -> f64 {
        self.alpha_ds_base / downscale
    }
}

/// Per-pixel SSIM over valid 3x3 box windows.
///
/// Output is Cx(H-2)x(W-2). Variances are computed as `E[x^2] - mu^2` and
/// clamped at zero before use.
pub fn ssim_map(tape: &mut Tape, x: Var, y: Var, c1: f64, c2: f64) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    if xs != tape.value(y).shape() {
        return Err(Error::shape(
            "ssim_map",
            format!("shape {:?} != shape {:?}", xs, tape.value(y).shape()),
        ));
    }
    let mu_x = tape.boxmean3(x)?;
    let mu_y = tape.boxmean3(y)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let e_xx = tape.boxmean3(xx)?;
    let e_yy = tape.boxmean3(yy)?;
    let e_xy = tape.boxmean3(xy)?;

    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = {
        let raw = tape.sub(e_xx, mu_xx)?;
        tape.clamp_min(raw, 0.0)?
    };
    let var_y = {
        let raw = tape.sub(e_yy, mu_yy)?;
        tape.clamp_min(raw, 0.0)?
    };
    let cov = tape.sub(e_xy, mu_xy)?;

    let num = {
        let a = tape.mul_scalar(mu_xy, 2.0)?;
        let a = tape.add_scalar(a, c1)?;
        let b = tape.mul_scalar(cov, 2.0)?;
        let b = tape.add_scalar(b, c2)?;
        tape.mul(a, b)?
    };
    let den = {
        let a = tape.add(mu_xx, mu_yy)?;
        let a = tape.add_scalar(a, c1)?;
        let b = tape.add(var_x, var_y)?;
        let b = tape.add_scalar(b, c2)?;
        tape.mul(a, b)?
    };
    tape.div(num, den)
}

/// Photometric reconstruction cost: `alpha * (1 - SSIM)/2 + (1 - alpha) * L1`,
/// averaged over the valid interior so both terms pair up per pixel.
pub fn appearance_loss(tape: &mut Tape, target: Var, recon: Var, w: &LossWeights) -> Result<Var> {
    if tape.value(target).shape() != tape.value(recon).shape() {
        return Err(Error::shape(
            "appearance_loss",
            format!(
                "target shape {:?} != reconstruction shape {:?}",
                tape.value(target).shape(),
                tape.value(recon).shape()
            ),
        ));
    }
    let ssim = ssim_map(tape, target, recon, w.ssim_c1, w.ssim_c2)?;
    let dissim = {
        let neg = tape.mul_scalar(ssim, -0.5)?;
        tape.add_scalar(neg, 0.5)?
    };
    let ssim_term = tape.mean(dissim)?;

    let tc = tape.crop_border(target, 1)?;
    let rc = tape.crop_border(recon, 1)?;
    let diff = tape.sub(tc, rc)?;
    let absdiff = tape.abs(diff)?;
    let l1_term = tape.mean(absdiff)?;

    let a = tape.mul_scalar(ssim_term, w.ssim_alpha)?;
    let b = tape.mul_scalar(l1_term, 1.0 - w.ssim_alpha)?;
    tape.add(a, b)
}

/// Appearance cost restricted to pixels whose whole 3x3 window lies in
/// the valid mask (1 = valid). Used to check the reconstruction identity
/// on non-occluded pixels.
pub fn appearance_loss_masked(
    tape: &mut Tape,
    target: Var,
    recon: Var,
    mask: &Tensor,
    w: &LossWeights,
) -> Result<Var> {
    let (c, h, wd) = tape.value(target).dims3()?;
    if mask.shape() != [h, wd] {
        return Err(Error::shape(
            "appearance_loss_masked",
            format!("mask shape {:?} != image spatial [{h}, {wd}]", mask.shape()),
        ));
    }
    // erode by one: a window is valid only if all nine pixels are
    let (ih, iw) = (h - 2, wd - 2);
    let mut eroded = vec![0.0; ih * iw];
    let mut count = 0usize;
    for i in 0..ih {
        for j in 0..iw {
            let ok = (0..3).all(|di| (0..3).all(|dj| mask.at2(i + di, j + dj) > 0.5));
            if ok {
                eroded[i * iw + j] = 1.0;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask {
            op: "appearance_loss_masked",
        });
    }
    let mut per_channel = Vec::with_capacity(c * ih * iw);
    for _ in 0..c {
        per_channel.extend_from_slice(&eroded);
    }
    let mask_var = tape.leaf(Tensor::from_parts(vec![c, ih, iw], per_channel));
    let denom = (count * c) as f64;

    let ssim = ssim_map(tape, target, recon, w.ssim_c1, w.ssim_c2)?;
    let dissim = {
        let neg = tape.mul_scalar(ssim, -0.5)?;
        tape.add_scalar(neg, 0.5)?
    };
    let masked_dissim = tape.mul(dissim, mask_var)?;
    let ssim_sum = tape.sum(masked_dissim)?;
    let ssim_term = tape.mul_scalar(ssim_sum, 1.0 / denom)?;

    let tc = tape.crop_border(target, 1)?;
    let rc = tape.crop_border(recon, 1)?;
    let diff = tape.sub(tc, rc)?;
    let absdiff = tape.abs(diff)?;
    let masked_l1 = tape.mul(absdiff, mask_var)?;
    let l1_sum = tape.sum(masked_l1)?;
    let l1_term = tape.mul_scalar(l1_sum, 1.0 / denom)?;

    let a = tape.mul_scalar(ssim_term, w.ssim_alpha)?;
    let b = tape.mul_scalar(l1_term, 1.0 - w.ssim_alpha)?;
    tape.add(a, b)
}

/// Edge-aware smoothness: L1 of forward-difference disparity gradients,
/// each weighted by `exp(-mean_c |image gradient|)`, normalized by the
/// full pixel count H*W.
pub fn smoothness_loss(tape: &mut Tape, disparity: Var, image: Var) -> Result<Var> {
    let (h, w) = tape.value(disparity).dims2()?;
    let (_, ih, iw) = tape.value(image).dims3()?;
    if (ih, iw) != (h, w) {
        return Err(Error::shape(
            "smoothness_loss",
            format!("image spatial {ih}x{iw} != disparity {h}x{w}"),
        ));
    }
    let n = (h * w) as f64;

    let dx_d = tape.diff_x(disparity)?;
    let dx_d = tape.abs(dx_d)?;
    let dx_i = tape.diff_x(image)?;
    let dx_i = tape.abs(dx_i)?;
    let dx_i = tape.mean_channels(dx_i)?;
    let wx = {
        let neg = tape.mul_scalar(dx_i, -1.0)?;
        tape.exp(neg)?
    };
    let tx = tape.mul(dx_d, wx)?;
    let tx = tape.sum(tx)?;

    let dy_d = tape.diff_y(disparity)?;
    let dy_d = tape.abs(dy_d)?;
    let dy_i = tape.diff_y(image)?;
    let dy_i = tape.abs(dy_i)?;
    let dy_i = tape.mean_channels(dy_i)?;
    let wy = {
        let neg = tape.mul_scalar(dy_i, -1.0)?;
        tape.exp(neg)?
    };
    let ty = tape.mul(dy_d, wy)?;
    let ty = tape.sum(ty)?;

    let total = tape.add(tx, ty)?;
    tape.mul_scalar(total, 1.0 / n)
}

/// Mean absolute difference between a disparity map and the other view's
/// map projected onto its coordinates. For the left variant pass
/// `(d_l, d_r, Leftward)`; the right variant is `(d_r, d_l, Rightward)`.
/// Gradients flow through both maps, including the sampling coordinates.
pub fn lr_consistency_loss(
    tape: &mut Tape,
    d_base: Var,
    d_other: Var,
    direction: SampleDirection,
) -> Result<Var> {
    if tape.value(d_base).shape() != tape.value(d_other).shape() {
        return Err(Error::shape(
            "lr_consistency_loss",
            format!(
                "shape {:?} != shape {:?}",
                tape.value(d_base).shape(),
                tape.value(d_other).shape()
            ),
        ));
    }
    let projected = warp::project_disparity(tape, d_other, d_base, direction)?;
    let diff = tape.sub(d_base, projected)?;
    let absdiff = tape.abs(diff)?;
    tape.mean(absdiff)
}

/// The six per-scale loss terms plus their weighted combination.
#[derive(Debug, Clone, Copy)]
pub struct ScaleLossBreakdown {
    pub c_ap_l: Var,
    pub c_ap_r: Var,
    pub c_ds_l: Var,
    pub c_ds_r: Var,
    pub c_lr_l: Var,
    pub c_lr_r: Var,
    pub c_total: Var,
}

/// Plain numbers extracted from a breakdown for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleLossValues {
    pub c_ap_l: f64,
    pub c_ap_r: f64,
    pub c_ds_l: f64,
    pub c_ds_r: f64,
    pub c_lr_l: f64,
    pub c_lr_r: f64,
    pub c_total: f64,
}

impl ScaleLossBreakdown {
    pub fn values(&self, tape: &Tape) -> ScaleLossValues {
        ScaleLossValues {
            c_ap_l: tape.scalar(self.c_ap_l),
            c_ap_r: tape.scalar(self.c_ap_r),
            c_ds_l: tape.scalar(self.c_ds_l),
            c_ds_r: tape.scalar(self.c_ds_r),
            c_lr_l: tape.scalar(self.c_lr_l),
            c_lr_r: tape.scalar(self.c_lr_r),
            c_total: tape.scalar(self.c_total),
        }
    }
}

impl ScaleLossValues {
    /// Name and value of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("c_ap_l", self.c_ap_l),
            ("c_ap_r", self.c_ap_r),
            ("c_ds_l", self.c_ds_l),
            ("c_ds_r", self.c_ds_r),
            ("c_lr_l", self.c_lr_l),
            ("c_lr_r", self.c_lr_r),
            ("c_total", self.c_total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Assembles all six terms at one pyramid level.
///
/// The right-image variants swap left for right and sample in the
/// opposite direction. `downscale` is the level's resolution divisor
/// relative to the network input (1, 2, 4, 8).
pub fn scale_loss(
    tape: &mut Tape,
    image_left: Var,
    image_right: Var,
    d_left: Var,
    d_right: Var,
    downscale: f64,
    w: &LossWeights,
) -> Result<ScaleLossBreakdown> {
    let recon_l = warp::reconstruct_left(tape, image_right, d_left)?;
    let c_ap_l = appearance_loss(tape, image_left, recon_l, w)?;
    let recon_r = warp::reconstruct_right(tape, image_left, d_right)?;
    let c_ap_r = appearance_loss(tape, image_right, recon_r, w)?;

    let c_ds_l = smoothness_loss(tape, d_left, image_left)?;
    let c_ds_r = smoothness_loss(tape, d_right, image_right)?;

    let c_lr_l = lr_consistency_loss(tape, d_left, d_right, SampleDirection::Leftward)?;
    let c_lr_r = lr_consistency_loss(tape, d_right, d_left, SampleDirection::Rightward)?;

    let ap = tape.add(c_ap_l, c_ap_r)?;
    let ap = tape.mul_scalar(ap, w.alpha_ap)?;
    let ds = tape.add(c_ds_l, c_ds_r)?;
    let ds = tape.mul_scalar(ds, w.alpha_ds(downscale))?;
    let lr = tape.add(c_lr_l, c_lr_r)?;
    let lr = tape.mul_scalar(lr, w.alpha_lr)?;
    let partial = tape.add(ap, ds)?;
    let c_total = tape.add(partial, lr)?;

    Ok(ScaleLossBreakdown {
        c_ap_l,
        c_ap_r,
        c_ds_l,
        c_ds_r,
        c_lr_l,
        c_lr_r,
        c_total,
    })
}

/// Sums `scale_loss` over pyramid levels with identical per-scale
/// weighting. Level `i` has downscale factor `2^i`; levels are ordered
/// fine to coarse.
pub fn total_loss(
    tape: &mut Tape,
    images: &[(Var, Var)],
    disparities: &[(Var, Var)],
    w: &LossWeights,
) -> Result<(Var, Vec<ScaleLossBreakdown>)> {
    if images.is_empty() {
        return Err(Error::shape("total_loss", "no pyramid levels".to_string()));
    }
    if images.len() != disparities.len() {
        return Err(Error::shape(
            "total_loss",
            format!(
                "{} image levels != {} disparity levels",
                images.len(),
                disparities.len()
            ),
        ));
    }
    let mut breakdowns = Vec::with_capacity(images.len());
    let mut total: Option<Var> = None;
    for (i, (&(il, ir), &(dl, dr))) in images.iter().zip(disparities).enumerate() {
        let b = scale_loss(tape, il, ir, dl, dr, (1u32 << i) as f64, w)?;
        total = Some(match total {
            None => b.c_total,
            Some(t) => tape.add(t, b.c_total)?,
        });
        breakdowns.push(b);
    }
    Ok((total.expect("non-empty levels"), breakdowns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::rng::Rng;

    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;

    #[test]
    fn ssim_of_identical_signals_is_one() {
        let mut rng = Rng::new(1);
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::uniform(vec![3, 5, 6], 0.0, 1.0, &mut rng));
        let s = ssim_map(&mut tape, img, img, C1, C2).unwrap();
        assert_eq!(tape.value(s).shape(), &[3, 3, 4]);
        for v in tape.value(s).data() {
            assert!((v - 1.0).abs() < 1e-12, "got {v}");
        }
    }

    #[test]
    fn ssim_of_constant_zero_vs_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 4, 4]));
        let y = tape.leaf(Tensor::full(vec![1, 4, 4], 1.0));
        let s = ssim_map(&mut tape, x, y, C1, C2).unwrap();
        let expect = C1 / (1.0 + C1);
        for v in tape.value(s).data() {
            assert!((v - expect).abs() < 1e-15, "got {v}, want {expect}");
        }
        assert!((expect - 9.999e-5).abs() < 1e-8);
    }

    /// Independent per-window oracle: explicit means and centered moments.
    fn ssim_window_oracle(x: &Tensor, y: &Tensor, c1: f64, c2: f64) -> Vec<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = Vec::new();
        for ch in 0..c {
            for i in 0..h - 2 {
                for j in 0..w - 2 {
                    let mut xs = [0.0; 9];
                    let mut ys = [0.0; 9];
                    for di in 0..3 {
                        for dj in 0..3 {
                            xs[di * 3 + dj] = x.at3(ch, i + di, j + dj);
                            ys[di * 3 + dj] = y.at3(ch, i + di, j + dj);
                        }
                    }
                    let mx: f64 = xs.iter().sum::<f64>() / 9.0;
                    let my: f64 = ys.iter().sum::<f64>() / 9.0;
                    let vx: f64 = xs.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / 9.0;
                    let vy: f64 = ys.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / 9.0;
                    let cov: f64 = xs
                        .iter()
                        .zip(&ys)
                        .map(|(a, b)| (a - mx) * (b - my))
                        .sum::<f64>()
                        / 9.0;
                    out.push(
                        ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                            / ((mx * mx + my * my + c1) * (vx + vy + c2)),
                    );
                }
            }
        }
        out
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let mut rng = Rng::new(2);
        let x = Tensor::uniform(vec![2, 6, 7], 0.0, 1.0, &mut rng);
        let y = Tensor::uniform(vec![2, 6, 7], 0.0, 1.0, &mut rng);
        let expect = ssim_window_oracle(&x, &y, C1, C2);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let yv = tape.leaf(y);
        let s = ssim_map(&mut tape, xv, yv, C1, C2).unwrap();
        for (a, e) in tape.value(s).data().iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-9, "{a} vs {e}");
        }
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 5]));
        assert!(ssim_map(&mut tape, x, x, C1, C2).is_err());
    }

    #[test]
    fn appearance_zero_on_perfect_reconstruction() {
        let mut rng = Rng::new(3);
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::uniform(vec![3, 5, 7], 0.0, 1.0, &mut rng));
        let w = LossWeights::default();
        let c = appearance_loss(&mut tape, img, img, &w).unwrap();
        assert!(tape.scalar(c).abs() < 1e-12);
    }

    #[test]
    fn appearance_constant_zero_vs_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 5, 5]));
        let y = tape.leaf(Tensor::full(vec![1, 5, 5], 1.0));
        let w = LossWeights::default();
        let c = appearance_loss(&mut tape, x, y, &w).unwrap();
        let expect = 0.85 * (1.0 - C1 / (1.0 + C1)) / 2.0 + 0.15;
        assert!((tape.scalar(c) - expect).abs() < 1e-12);
        assert!((expect - 0.57496).abs() < 1e-5);
    }

    #[test]
    fn appearance_matches_oracle_on_random_pair() {
        let mut rng = Rng::new(4);
        let x = Tensor::uniform(vec![3, 6, 8], 0.0, 1.0, &mut rng);
        let y = Tensor::uniform(vec![3, 6, 8], 0.0, 1.0, &mut rng);
        let w = LossWeights::default();

        let ssim = ssim_window_oracle(&x, &y, w.ssim_c1, w.ssim_c2);
        let n = ssim.len() as f64;
        let ssim_term: f64 = ssim.iter().map(|s| (1.0 - s) / 2.0).sum::<f64>() / n;
        let mut l1 = 0.0;
        for c in 0..3 {
            for i in 1..5 {
                for j in 1..7 {
                    l1 += (x.at3(c, i, j) - y.at3(c, i, j)).abs();
                }
            }
        }
        let expect = w.ssim_alpha * ssim_term + (1.0 - w.ssim_alpha) * l1 / n;

        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let yv = tape.leaf(y);
        let c = appearance_loss(&mut tape, xv, yv, &w).unwrap();
        assert!((tape.scalar(c) - expect).abs() <= 1e-9);
    }

    #[test]
    fn appearance_parts_symmetric_under_swap() {
        let mut rng = Rng::new(5);
        let x = Tensor::uniform(vec![2, 5, 6], 0.0, 1.0, &mut rng);
        let y = Tensor::uniform(vec![2, 5, 6], 0.0, 1.0, &mut rng);
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let yv = tape.leaf(y);
        let ab = appearance_loss(&mut tape, xv, yv, &w).unwrap();
        let ba = appearance_loss(&mut tape, yv, xv, &w).unwrap();
        assert!((tape.scalar(ab) - tape.scalar(ba)).abs() < 1e-12);
    }

    #[test]
    fn smoothness_zero_for_constant_disparity() {
        let mut rng = Rng::new(6);
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::uniform(vec![3, 4, 6], 0.0, 1.0, &mut rng));
        let d = tape.leaf(Tensor::full(vec![4, 6], 3.0));
        let c = smoothness_loss(&mut tape, d, img).unwrap();
        assert_eq!(tape.scalar(c), 0.0);
    }

    #[test]
    fn smoothness_step_on_flat_image_counts_rows() {
        let (h, w) = (4usize, 6usize);
        let mut dvals = vec![0.0; h * w];
        for i in 0..h {
            for j in 3..w {
                dvals[i * w + j] = 1.0;
            }
        }
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::full(vec![3, h, w], 0.5));
        let d = tape.leaf(Tensor::new(vec![h, w], dvals).unwrap());
        let c = smoothness_loss(&mut tape, d, img).unwrap();
        let expect = h as f64 / (h * w) as f64;
        assert!((tape.scalar(c) - expect).abs() < 1e-12);
    }

    #[test]
    fn image_edge_discounts_coincident_disparity_step() {
        let (h, w) = (4usize, 6usize);
        let step_col = 2usize;
        let mut dvals = vec![0.0; h * w];
        let mut ivals = vec![0.2; 1 * h * w];
        for i in 0..h {
            for j in step_col + 1..w {
                dvals[i * w + j] = 1.0;
                ivals[i * w + j] = 0.9;
            }
        }
        let mut tape = Tape::new();
        let flat = tape.leaf(Tensor::full(vec![1, h, w], 0.2));
        let edged = tape.leaf(Tensor::new(vec![1, h, w], ivals).unwrap());
        let d = tape.leaf(Tensor::new(vec![h, w], dvals).unwrap());
        let on_flat = smoothness_loss(&mut tape, d, flat).unwrap();
        let on_edge = smoothness_loss(&mut tape, d, edged).unwrap();
        let ratio = tape.scalar(on_edge) / tape.scalar(on_flat);
        let expect = (-0.7f64).exp();
        assert!((ratio - expect).abs() < 1e-12, "ratio {ratio}");
    }

    #[test]
    fn consistency_zero_for_equal_constants() {
        let mut tape = Tape::new();
        let d = tape.leaf(Tensor::full(vec![4, 5], 2.0));
        let c = lr_consistency_loss(&mut tape, d, d, SampleDirection::Leftward).unwrap();
        assert_eq!(tape.scalar(c), 0.0);
    }

    #[test]
    fn consistency_with_zero_base_is_mean_of_other() {
        let mut tape = Tape::new();
        let zero = tape.leaf(Tensor::zeros(vec![4, 5]));
        let other = tape.leaf(Tensor::full(vec![4, 5], 3.25));
        let c = lr_consistency_loss(&mut tape, zero, other, SampleDirection::Leftward).unwrap();
        assert!((tape.scalar(c) - 3.25).abs() < 1e-12);
    }

    #[test]
    fn consistency_matches_loop_oracle() {
        let mut rng = Rng::new(7);
        let (h, w) = (4usize, 9usize);
        let d_l = Tensor::uniform(vec![h, w], 0.5, 2.0, &mut rng);
        let d_r = Tensor::uniform(vec![h, w], 0.5, 2.0, &mut rng);
        let mut expect = 0.0;
        for i in 0..h {
            for j in 0..w {
                let x = (j as f64 - d_l.at2(i, j)).clamp(0.0, (w - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let f = x - x0 as f64;
                let proj = (1.0 - f) * d_r.at2(i, x0) + f * d_r.at2(i, x1);
                expect += (d_l.at2(i, j) - proj).abs();
            }
        }
        expect /= (h * w) as f64;
        let mut tape = Tape::new();
        let dl = tape.leaf(d_l);
        let dr = tape.leaf(d_r);
        let c = lr_consistency_loss(&mut tape, dl, dr, SampleDirection::Leftward).unwrap();
        assert!((tape.scalar(c) - expect).abs() <= 1e-9);
    }

    #[test]
    fn scale_loss_zero_for_identical_images_zero_disparity() {
        let mut rng = Rng::new(8);
        let img = Tensor::uniform(vec![3, 6, 8], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let il = tape.leaf(img.clone());
        let ir = tape.leaf(img);
        let dz = tape.leaf(Tensor::zeros(vec![6, 8]));
        let w = LossWeights::default();
        let b = scale_loss(&mut tape, il, ir, dz, dz, 1.0, &w).unwrap();
        let v = b.values(&tape);
        assert!(v.c_ap_l.abs() < 1e-12 && v.c_ap_r.abs() < 1e-12);
        assert_eq!(v.c_ds_l, 0.0);
        assert_eq!(v.c_lr_l, 0.0);
        assert!(v.c_total.abs() < 1e-12);
    }

    #[test]
    fn doubling_downscale_halves_smoothness_contribution() {
        let mut rng = Rng::new(9);
        let il = Tensor::uniform(vec![3, 6, 8], 0.0, 1.0, &mut rng);
        let ir = Tensor::uniform(vec![3, 6, 8], 0.0, 1.0, &mut rng);
        let dl = Tensor::uniform(vec![6, 8], 0.5, 2.0, &mut rng);
        let dr = Tensor::uniform(vec![6, 8], 0.5, 2.0, &mut rng);
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let (ilv, irv) = (tape.leaf(il), tape.leaf(ir));
        let (dlv, drv) = (tape.leaf(dl), tape.leaf(dr));
        let b1 = scale_loss(&mut tape, ilv, irv, dlv, drv, 1.0, &w).unwrap();
        let b2 = scale_loss(&mut tape, ilv, irv, dlv, drv, 2.0, &w).unwrap();
        let (v1, v2) = (b1.values(&tape), b2.values(&tape));
        let ds1 = v1.c_total - (v1.c_ap_l + v1.c_ap_r) - (v1.c_lr_l + v1.c_lr_r);
        let ds2 = v2.c_total - (v2.c_ap_l + v2.c_ap_r) - (v2.c_lr_l + v2.c_lr_r);
        assert!((ds1 - 2.0 * ds2).abs() < 1e-12);
        // raw terms are identical; only the weight changes
        assert_eq!(v1.c_ds_l, v2.c_ds_l);
    }

    #[test]
    fn scale_loss_invariant_under_flip_and_swap() {
        let mut rng = Rng::new(10);
        let il = Tensor::uniform(vec![3, 6, 8], 0.0, 1.0, &mut rng);
        let ir = Tensor::uniform(vec![3, 6, 8], 0.0, 1.0, &mut rng);
        let dl = Tensor::uniform(vec![6, 8], 0.5, 2.0, &mut rng);
        let dr = Tensor::uniform(vec![6, 8], 0.5, 2.0, &mut rng);
        let w = LossWeights::default();

        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(il.clone()), tape.leaf(ir.clone()));
        let (c, d) = (tape.leaf(dl.clone()), tape.leaf(dr.clone()));
        let plain = scale_loss(&mut tape, a, b, c, d, 1.0, &w).unwrap();

        // mirror every tensor and exchange left/right roles
        let (fa, fb) = (tape.leaf(ir.mirror_w()), tape.leaf(il.mirror_w()));
        let (fc, fd) = (tape.leaf(dr.mirror_w()), tape.leaf(dl.mirror_w()));
        let flipped = scale_loss(&mut tape, fa, fb, fc, fd, 1.0, &w).unwrap();

        let (pv, fv) = (plain.values(&tape), flipped.values(&tape));
        assert!((pv.c_total - fv.c_total).abs() < 1e-9, "{pv:?} vs {fv:?}");
        assert!((pv.c_ap_l - fv.c_ap_r).abs() < 1e-9);
        assert!((pv.c_ds_l - fv.c_ds_r).abs() < 1e-9);
        assert!((pv.c_lr_l - fv.c_lr_r).abs() < 1e-9);
    }

    #[test]
    fn total_loss_is_sum_of_scales_and_single_scale_degenerates() {
        let mut rng = Rng::new(11);
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let mut images = Vec::new();
        let mut disps = Vec::new();
        for s in 0..4usize {
            let (h, wd) = (24 >> s, 32 >> s);
            images.push((
                tape.leaf(Tensor::uniform(vec![3, h, wd], 0.0, 1.0, &mut rng)),
                tape.leaf(Tensor::uniform(vec![3, h, wd], 0.0, 1.0, &mut rng)),
            ));
            disps.push((
                tape.leaf(Tensor::uniform(vec![h, wd], 0.3, 1.5, &mut rng)),
                tape.leaf(Tensor::uniform(vec![h, wd], 0.3, 1.5, &mut rng)),
            ));
        }
        let (total, parts) = total_loss(&mut tape, &images, &disps, &w).unwrap();
        let sum: f64 = parts.iter().map(|p| tape.scalar(p.c_total)).sum();
        assert!((tape.scalar(total) - sum).abs() < 1e-12);

        let (single, singles) = total_loss(&mut tape, &images[..1], &disps[..1], &w).unwrap();
        let direct = scale_loss(
            &mut tape, images[0].0, images[0].1, disps[0].0, disps[0].1, 1.0, &w,
        )
        .unwrap();
        assert_eq!(singles.len(), 1);
        assert!((tape.scalar(single) - tape.scalar(direct.c_total)).abs() < 1e-12);
    }

    #[test]
    fn loss_terms_pass_grad_check() {
        let mut rng = Rng::new(12);
        let img_l = Tensor::uniform(vec![2, 5, 7], 0.05, 0.95, &mut rng);
        let img_r = Tensor::uniform(vec![2, 5, 7], 0.05, 0.95, &mut rng);
        let d_l = Tensor::uniform(vec![5, 7], 0.3, 1.7, &mut rng);
        let d_r = Tensor::uniform(vec![5, 7], 0.3, 1.7, &mut rng);
        let w = LossWeights::default();

        let o = grad_check(
            |t, v| appearance_loss(t, v[0], v[1], &w),
            &[img_l.clone(), img_r.clone()],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(o.passed, "appearance rel err {}", o.max_rel_error);

        let o = grad_check(
            |t, v| smoothness_loss(t, v[0], v[1]),
            &[d_l.clone(), img_l.clone()],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(o.passed, "smoothness rel err {}", o.max_rel_error);

        let o = grad_check(
            |t, v| lr_consistency_loss(t, v[0], v[1], SampleDirection::Leftward),
            &[d_l, d_r],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(o.passed, "consistency rel err {}", o.max_rel_error);
    }
}
