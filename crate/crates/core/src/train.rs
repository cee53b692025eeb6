//! Adam optimizer, learning-rate schedule, on-the-fly augmentation, and
//! the training loop: sample batch -> augment -> image pyramids ->
//! forward -> total loss -> backward -> parameter update.
//!
//! All randomness derives from a single seed: the shuffle and
//! augmentation streams are split off with `rng::derive_stream`, and
//! network initialization uses the seed in `NetConfig`. Two runs with
//! identical configuration produce identical logs and checkpoints.

use std::path::Path;

use crate::data::StereoSample;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::loss::{self, LossWeights, ScaleLossValues};
use crate::model::{self, InputMode, NetConfig, Parameters};
use crate::rng::{derive_stream, Rng};

/// Stream ids for splitting the master seed.
pub const STREAM_SHUFFLE: u64 = 0;
pub const STREAM_AUGMENT: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_DATAGEN: u64 = 3;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Bias-corrected Adam state: one pair of moment buffers per parameter
/// tensor, plus the shared step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state for parameter tensors of the given sizes, with the
    /// standard beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(sizes: &[usize]) -> AdamState {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &Parameters) -> AdamState {
        AdamState::new(&params.tensors().iter().map(|t| t.numel()).collect::<Vec<_>>())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one parameter buffer in place.
    fn update(&mut self, idx: usize, param: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(param.len(), grad.len());
        debug_assert_eq!(self.m[idx].len(), grad.len());
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// One step over parallel flat buffers (for direct use in tests).
    pub fn step_slices(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.begin_step();
        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(idx, p, g, lr);
        }
    }
}

/// One bias-corrected Adam update of the network parameters.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut Parameters,
    grads: &[Tensor],
    lr: f64,
) -> Result<()> {
    let tensors = params.tensors();
    if grads.len() != tensors.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} tensors", grads.len(), tensors.len()),
        ));
    }
    for (g, t) in grads.iter().zip(&tensors) {
        if g.shape() != t.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient shape {:?} != parameter {:?}", g.shape(), t.shape()),
            ));
        }
    }
    state.begin_step();
    params.for_each_mut(|idx, tensor| {
        state.update(idx, tensor.data_mut(), grads[idx].data(), lr);
    });
    Ok(())
}

// ---------------------------------------------------------------------------
// learning-rate schedule
// ---------------------------------------------------------------------------

/// Piecewise schedule: constant for the first 60% of epochs, then halved
/// for every further 20% bucket. For 50 epochs that is the original
/// constant-for-30-then-halve-every-10 recipe.
pub fn schedule(epoch: usize, base_lr: f64, total_epochs: usize) -> f64 {
    let total = total_epochs as f64;
    let cut = 0.6 * total;
    if (epoch as f64) < cut {
        return base_lr;
    }
    let bucket = 0.2 * total;
    let halvings = 1 + ((epoch as f64 - cut) / bucket).floor() as i32;
    base_lr / 2f64.powi(halvings)
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub color_prob: f64,
    pub gamma_range: (f64, f64),
    pub brightness_range: (f64, f64),
    /// Per-channel scale range, drawn independently per channel.
    pub color_range: (f64, f64),
    /// Seed for standalone use; the trainer derives its own stream.
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            color_prob: 0.5,
            gamma_range: (0.8, 1.2),
            brightness_range: (0.5, 2.0),
            color_range: (0.8, 1.2),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_prob", self.flip_prob), ("color_prob", self.color_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be in [0, 1], got {p}"
                )));
            }
        }
        for (name, (lo, hi)) in [
            ("gamma_range", self.gamma_range),
            ("brightness_range", self.brightness_range),
            ("color_range", self.color_range),
        ] {
            if !(lo <= hi) || lo <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be ordered and positive, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    /// Generator seeded for standalone augmentation.
    pub fn rng(&self) -> Rng {
        Rng::new(self.seed)
    }
}

fn color_transform(image: &Tensor, gamma: f64, brightness: f64, channel: &[f64; 3]) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut data = Vec::with_capacity(c * plane);
    for ch in 0..c {
        let scale = brightness * channel[ch % 3];
        for v in &image.data()[ch * plane..(ch + 1) * plane] {
            data.push((v.powf(gamma) * scale).clamp(0.0, 1.0));
        }
    }
    Tensor::from_parts(image.shape().to_vec(), data)
}

/// On-the-fly augmentation. A horizontal flip mirrors both images and
/// swaps their roles so the pair stays geometrically consistent; the
/// ground-truth map is mirrored along (after a flip it aligns with the
/// mirrored view). Color jitter applies one gamma, one brightness and one
/// per-channel scale identically to both images, clamped to [0, 1].
///
/// Exactly seven draws are consumed per call regardless of which paths
/// trigger, so the random stream stays aligned across configurations.
pub fn augment(sample: &StereoSample, cfg: &AugmentConfig, rng: &mut Rng) -> StereoSample {
    let flip = rng.chance(cfg.flip_prob);
    let color = rng.chance(cfg.color_prob);
    let gamma = rng.uniform(cfg.gamma_range.0, cfg.gamma_range.1);
    let brightness = rng.uniform(cfg.brightness_range.0, cfg.brightness_range.1);
    let channel = [
        rng.uniform(cfg.color_range.0, cfg.color_range.1),
        rng.uniform(cfg.color_range.0, cfg.color_range.1),
        rng.uniform(cfg.color_range.0, cfg.color_range.1),
    ];

    let mut out = sample.clone();
    if flip {
        let left = out.right.mirror_w();
        let right = out.left.mirror_w();
        out.left = left;
        out.right = right;
        out.gt_disparity_left = out.gt_disparity_left.map(|g| g.mirror_w());
    }
    if color {
        out.left = color_transform(&out.left, gamma, brightness, &channel);
        out.right = color_transform(&out.right, gamma, brightness, &channel);
    }
    out
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub base_lr: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            batch_size: 4,
            seed: 1,
            base_lr: 1e-3,
            augment: AugmentConfig::default(),
        }
    }
}

/// Loss values recorded after every optimization step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub c_total: f64,
    /// Batch-averaged per-scale terms, fine to coarse.
    pub scales: Vec<ScaleLossValues>,
}

pub struct TrainOutcome {
    pub params: Parameters,
    pub log: Vec<StepRecord>,
}

fn zero_values() -> ScaleLossValues {
    ScaleLossValues {
        c_ap_l: 0.0,
        c_ap_r: 0.0,
        c_ds_l: 0.0,
        c_ds_r: 0.0,
        c_lr_l: 0.0,
        c_lr_r: 0.0,
        c_total: 0.0,
    }
}

fn accumulate(acc: &mut ScaleLossValues, v: &ScaleLossValues, scale: f64) {
    acc.c_ap_l += v.c_ap_l * scale;
    acc.c_ap_r += v.c_ap_r * scale;
    acc.c_ds_l += v.c_ds_l * scale;
    acc.c_ds_r += v.c_ds_r * scale;
    acc.c_lr_l += v.c_lr_l * scale;
    acc.c_lr_r += v.c_lr_r * scale;
    acc.c_total += v.c_total * scale;
}

/// Rewrites numerical blowups as the training abort error, keeping the
/// step index and the operation that went non-finite.
fn loss_error(step: usize, context: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite { op, .. } => Error::NonFiniteLoss {
            step,
            term: format!("{context} ({op})"),
        },
        other => other,
    }
}

/// Builds the image pyramid and per-sample loss on the step's tape.
fn sample_loss(
    tape: &mut Tape,
    bound: &model::BoundParams,
    sample: &StereoSample,
    weights: &LossWeights,
    step: usize,
) -> Result<(Var, Vec<ScaleLossValues>)> {
    let scales = bound.config().num_scales();
    let left0 = tape.leaf(sample.left.clone());
    let right0 = tape.leaf(sample.right.clone());
    let mut images = vec![(left0, right0)];
    for s in 1..scales {
        let (pl, pr) = images[s - 1];
        images.push((
            tape.avgpool2x(pl).map_err(loss_error(step, "pyramid"))?,
            tape.avgpool2x(pr).map_err(loss_error(step, "pyramid"))?,
        ));
    }
    let right_in = match bound.config().input_mode {
        InputMode::Mono => None,
        InputMode::Stereo => Some(right0),
    };
    let pyramid =
        model::forward(tape, bound, left0, right_in).map_err(loss_error(step, "forward"))?;
    let (total, breakdowns) = loss::total_loss(tape, &images, &pyramid.levels, weights)
        .map_err(loss_error(step, "loss"))?;
    Ok((total, breakdowns.iter().map(|b| b.values(tape)).collect()))
}

/// Trains from scratch on the given samples. Deterministic in the seed:
/// batch order, augmentation draws and initialization are all derived
/// from `opts.seed` and `net.seed`.
pub fn train(
    samples: &[StereoSample],
    net: &NetConfig,
    weights: &LossWeights,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("empty training set".to_string()));
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(Error::InvalidConfig(
            "batch_size and epochs must be positive".to_string(),
        ));
    }
    net.validate()?;
    weights.validate()?;
    opts.augment.validate()?;

    let mut params = model::init(net)?;
    let mut adam = AdamState::for_params(&params);
    let mut shuffle_rng = Rng::new(derive_stream(opts.seed, STREAM_SHUFFLE));
    let mut augment_rng = Rng::new(derive_stream(opts.seed, STREAM_AUGMENT));

    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..opts.epochs {
        let lr = schedule(epoch, opts.base_lr, opts.epochs);
        let mut perm: Vec<usize> = (0..samples.len()).collect();
        shuffle_rng.shuffle(&mut perm);
        for chunk in perm.chunks(opts.batch_size) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let inv = 1.0 / chunk.len() as f64;
            let mut batch_total: Option<Var> = None;
            let mut scale_acc = vec![zero_values(); net.num_scales()];
            for &idx in chunk {
                let sample = augment(&samples[idx], &opts.augment, &mut augment_rng);
                let (item_loss, values) = sample_loss(&mut tape, &bound, &sample, weights, step)?;
                for (acc, v) in scale_acc.iter_mut().zip(&values) {
                    accumulate(acc, v, inv);
                }
                batch_total = Some(match batch_total {
                    None => item_loss,
                    Some(t) => tape.add(t, item_loss).map_err(loss_error(step, "batch"))?,
                });
            }
            let total = batch_total.expect("non-empty chunk");
            let total = tape
                .mul_scalar(total, inv)
                .map_err(loss_error(step, "batch"))?;
            tape.backward(total)?;

            let grads: Vec<Tensor> = bound
                .flat_vars()
                .iter()
                .zip(params.tensors())
                .map(|(v, t)| {
                    tape.grad(*v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
                })
                .collect();
            let c_total = tape.scalar(total);
            drop(tape);
            adam_step(&mut adam, &mut params, &grads, lr)?;

            log.push(StepRecord {
                step,
                epoch,
                lr,
                c_total,
                scales: scale_acc,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome { params, log })
}

/// Writes the loss log as CSV: `step,epoch,lr,c_total` followed by
/// per-scale `c_ap`, `c_ds`, `c_lr` columns suffixed `_s1..`. Each scale
/// column is the sum of the term's left and right variants.
pub fn write_loss_csv(path: &Path, log: &[StepRecord]) -> Result<()> {
    use std::io::Write;
    let scales = log.first().map_or(0, |r| r.scales.len());
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    (|| -> std::io::Result<()> {
        write!(out, "step,epoch,lr,c_total")?;
        for term in ["c_ap", "c_ds", "c_lr"] {
            for s in 1..=scales {
                write!(out, ",{term}_s{s}")?;
            }
        }
        writeln!(out)?;
        for r in log {
            write!(out, "{},{},{},{}", r.step, r.epoch, r.lr, r.c_total)?;
            for f in [
                |v: &ScaleLossValues| v.c_ap_l + v.c_ap_r,
                |v: &ScaleLossValues| v.c_ds_l + v.c_ds_r,
                |v: &ScaleLossValues| v.c_lr_l + v.c_lr_r,
            ] {
                for v in &r.scales {
                    write!(out, ",{}", f(v))?;
                }
            }
            writeln!(out)?;
        }
        out.flush()
    })()
    .map_err(|e| Error::io(path, e))
}
