//! Encoder-decoder disparity network.
//!
//! The encoder is a stack of stride-2 ELU convolutions; the decoder
//! mirrors it with nearest-neighbor upsampling followed by a convolution,
//! concatenating the matching encoder activation as a skip connection at
//! every resolution that has one. A 2-channel 3x3 head at each of the
//! last four decoder resolutions emits left and right disparity maps
//! through a scaled sigmoid, so every prediction lies strictly inside
//! `(0, d_max_ratio * width_at_scale)` by construction.
//!
//! The channel widths are configurable; the defaults are desk-scale so
//! training and exact gradient checking stay cheap.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Single 3-channel left image.
    Mono,
    /// Concatenation of both views: 6 input channels.
    Stereo,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub input_mode: InputMode,
    /// Channels of each stride-2 encoder level; depth >= 4 gives the full
    /// four output scales (fewer levels yield fewer scales, for tests).
    pub encoder_channels: Vec<usize>,
    /// Kernel size of encoder/decoder convolutions. Heads are always 3x3.
    pub kernel_size: usize,
    /// Disparity bound as a fraction of the image width at each scale.
    pub d_max_ratio: f64,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_mode: InputMode::Mono,
            encoder_channels: vec![8, 16, 32, 64],
            kernel_size: 3,
            d_max_ratio: 0.3,
            seed: 1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(Error::InvalidConfig("encoder_channels is empty".to_string()));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig(
                "encoder channel counts must be positive".to_string(),
            ));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(self.d_max_ratio > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "d_max_ratio must be positive, got {}",
                self.d_max_ratio
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Number of disparity output scales: four, or fewer for shallow
    /// test configurations.
    pub fn num_scales(&self) -> usize {
        self.depth().min(4)
    }

    pub fn input_channels(&self) -> usize {
        match self.input_mode {
            InputMode::Mono => 3,
            InputMode::Stereo => 6,
        }
    }

    /// Disparity bound at pyramid level `level` (0 = finest) for a given
    /// input width.
    pub fn d_max(&self, input_width: usize, level: usize) -> f64 {
        self.d_max_ratio * (input_width >> level) as f64
    }

    /// Convolution layers in declaration order: encoder levels, then for
    /// each decoder step its convolution followed by the scale head when
    /// that resolution has one (coarse to fine).
    fn layer_specs(&self) -> Vec<ConvSpec> {
        let depth = self.depth();
        let scales = self.num_scales();
        let k = self.kernel_size;
        let mut specs = Vec::new();
        let mut prev = self.input_channels();
        for &ch in &self.encoder_channels {
            specs.push(ConvSpec {
                in_ch: prev,
                out_ch: ch,
                kernel: k,
            });
            prev = ch;
        }
        for t in 1..=depth {
            let skip = if t < depth {
                self.encoder_channels[depth - 1 - t]
            } else {
                0
            };
            let out = if t < depth {
                self.encoder_channels[depth - 1 - t]
            } else {
                self.encoder_channels[0]
            };
            specs.push(ConvSpec {
                in_ch: prev + skip,
                out_ch: out,
                kernel: k,
            });
            prev = out;
            if t >= depth - scales + 1 {
                specs.push(ConvSpec {
                    in_ch: out,
                    out_ch: 2,
                    kernel: 3,
                });
            }
        }
        specs
    }

    /// Total trainable parameter count:
    /// `sum over convs of out * (in * k^2 + 1)`.
    pub fn param_count(&self) -> usize {
        self.layer_specs()
            .iter()
            .map(|s| s.out_ch * (s.in_ch * s.kernel * s.kernel + 1))
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
}

/// All trainable tensors of a network, in declaration order.
#[derive(Debug, Clone)]
pub struct Parameters {
    config: NetConfig,
    /// weight/bias pairs, one per convolution.
    layers: Vec<(Tensor, Tensor)>,
}

impl Parameters {
    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn count(&self) -> usize {
        self.layers
            .iter()
            .map(|(w, b)| w.numel() + b.numel())
            .sum()
    }

    /// Flat view in declaration order: weight, bias, weight, bias, ...
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    /// Applies an update to every tensor, in declaration order.
    pub(crate) fn for_each_mut(&mut self, mut f: impl FnMut(usize, &mut Tensor)) {
        let mut idx = 0;
        for (w, b) in &mut self.layers {
            f(idx, w);
            idx += 1;
            f(idx, b);
            idx += 1;
        }
    }

    /// Registers every tensor on a tape as a trainable input.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.bind_with(tape, true)
    }

    /// Registers every tensor as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let vars = self
            .layers
            .iter()
            .map(|(w, b)| {
                (
                    tape.input(w.clone(), requires_grad),
                    tape.input(b.clone(), requires_grad),
                )
            })
            .collect();
        BoundParams {
            config: self.config.clone(),
            vars,
        }
    }
}

/// Deterministic fan-in-scaled uniform initialization: weights are drawn
/// from `U(-1/sqrt(in * k^2), 1/sqrt(in * k^2))`, biases start at zero.
pub fn init(config: &NetConfig) -> Result<Parameters> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let layers = config
        .layer_specs()
        .iter()
        .map(|s| {
            let fan_in = s.in_ch * s.kernel * s.kernel;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Tensor::uniform(
                vec![s.out_ch, s.in_ch, s.kernel, s.kernel],
                -bound,
                bound,
                &mut rng,
            );
            let b = Tensor::zeros(vec![s.out_ch]);
            (w, b)
        })
        .collect();
    Ok(Parameters {
        config: config.clone(),
        layers,
    })
}

/// Network parameters registered on a tape.
pub struct BoundParams {
    config: NetConfig,
    vars: Vec<(Var, Var)>,
}

impl BoundParams {
    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Rebuilds the binding from an externally created flat var list
    /// (weight, bias, ...), e.g. inside a gradient-check closure.
    pub fn from_vars(config: &NetConfig, flat: &[Var]) -> Result<Self> {
        let expected = config.layer_specs().len() * 2;
        if flat.len() != expected {
            return Err(Error::shape(
                "bound_params",
                format!("expected {expected} tensors, got {}", flat.len()),
            ));
        }
        Ok(BoundParams {
            config: config.clone(),
            vars: flat.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
        })
    }

    /// Flat var list in declaration order (weight, bias, ...).
    pub fn flat_vars(&self) -> Vec<Var> {
        self.vars.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Left/right disparity pairs per scale, ordered fine to coarse. Level
/// `s` has the input resolution divided by `2^s`.
#[derive(Debug, Clone)]
pub struct DisparityPyramid {
    pub levels: Vec<(Var, Var)>,
}

impl DisparityPyramid {
    /// Finest-scale left-view disparity, the test-time output.
    pub fn finest_left(&self) -> Var {
        self.levels[0].0
    }
}

/// Runs the network. `right` must be present exactly when the config is
/// stereo; mono mode cannot receive (and therefore cannot read) the
/// right image.
pub fn forward(
    tape: &mut Tape,
    params: &BoundParams,
    left: Var,
    right: Option<Var>,
) -> Result<DisparityPyramid> {
    let config = &params.config;
    let depth = config.depth();
    let scales = config.num_scales();
    let (c, h, w) = tape.value(left).dims3()?;
    if c != 3 {
        return Err(Error::shape(
            "forward",
            format!("left image must have 3 channels, got {c}"),
        ));
    }
    let divisor = 1usize << depth;
    if h % divisor != 0 || w % divisor != 0 {
        return Err(Error::shape(
            "forward",
            format!("input {h}x{w} not divisible by 2^{depth}"),
        ));
    }

    let mut x = match (config.input_mode, right) {
        (InputMode::Mono, None) => left,
        (InputMode::Stereo, Some(r)) => {
            if tape.value(r).shape() != tape.value(left).shape() {
                return Err(Error::shape(
                    "forward",
                    format!(
                        "right image shape {:?} != left {:?}",
                        tape.value(r).shape(),
                        tape.value(left).shape()
                    ),
                ));
            }
            tape.concat_channels(&[left, r])?
        }
        (InputMode::Mono, Some(_)) => {
            return Err(Error::shape(
                "forward",
                "mono mode takes no right image".to_string(),
            ))
        }
        (InputMode::Stereo, None) => {
            return Err(Error::shape(
                "forward",
                "stereo mode requires a right image".to_string(),
            ))
        }
    };

    let pad = config.kernel_size / 2;
    let mut next = params.vars.iter().copied();
    let mut take = || next.next().expect("layer_specs and vars agree by construction");

    let mut skips = Vec::with_capacity(depth);
    for _ in 0..depth {
        let (wv, bv) = take();
        x = tape.conv2d(x, wv, bv, 2, pad)?;
        x = tape.elu(x)?;
        skips.push(x);
    }

    let mut coarse_to_fine = Vec::with_capacity(scales);
    for t in 1..=depth {
        x = tape.upsample_nearest2x(x)?;
        if t < depth {
            x = tape.concat_channels(&[x, skips[depth - 1 - t]])?;
        }
        let (wv, bv) = take();
        x = tape.conv2d(x, wv, bv, 1, pad)?;
        x = tape.elu(x)?;
        if t >= depth - scales + 1 {
            let (hw, hb) = take();
            let head = tape.conv2d(x, hw, hb, 1, 1)?;
            let level = depth - t;
            let bounded = tape.sigmoid_scaled(head, config.d_max(w, level))?;
            let d_left = tape.select_channel(bounded, 0)?;
            let d_right = tape.select_channel(bounded, 1)?;
            coarse_to_fine.push((d_left, d_right));
        }
    }
    coarse_to_fine.reverse();
    Ok(DisparityPyramid {
        levels: coarse_to_fine,
    })
}

// ---------------------------------------------------------------------------
// checkpoint format
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"SDEPTH01";

impl Parameters {
    /// Writes the versioned checkpoint: magic, config echo as JSON, then
    /// flat 64-bit little-endian arrays in declaration order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let config_json = serde_json::to_vec(&self.config)?;
        (|| -> std::io::Result<()> {
            out.write_all(CHECKPOINT_MAGIC)?;
            out.write_all(&(config_json.len() as u32).to_le_bytes())?;
            out.write_all(&config_json)?;
            out.write_all(&(self.layers.len() as u32).to_le_bytes())?;
            for (w, b) in &self.layers {
                for t in [w, b] {
                    out.write_all(&(t.numel() as u64).to_le_bytes())?;
                    for v in t.data() {
                        out.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            out.flush()
        })()
        .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Parameters> {
        let mut reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut magic = [0u8; 8];
        reader
            .read_exact(&mut magic)
            .map_err(|_| Error::format(path, "truncated checkpoint"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(
                path,
                format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
            ));
        }
        let mut u32buf = [0u8; 4];
        reader
            .read_exact(&mut u32buf)
            .map_err(|_| Error::format(path, "truncated checkpoint"))?;
        let config_len = u32::from_le_bytes(u32buf) as usize;
        let mut config_json = vec![0u8; config_len];
        reader
            .read_exact(&mut config_json)
            .map_err(|_| Error::format(path, "truncated checkpoint"))?;
        let config: NetConfig = serde_json::from_slice(&config_json)?;
        config.validate()?;
        reader
            .read_exact(&mut u32buf)
            .map_err(|_| Error::format(path, "truncated checkpoint"))?;
        let layer_count = u32::from_le_bytes(u32buf) as usize;
        let specs = config.layer_specs();
        if layer_count != specs.len() {
            return Err(Error::format(
                path,
                format!("{layer_count} layers in file, config implies {}", specs.len()),
            ));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for spec in &specs {
            let w_shape = vec![spec.out_ch, spec.in_ch, spec.kernel, spec.kernel];
            let b_shape = vec![spec.out_ch];
            let mut pair = Vec::with_capacity(2);
            for shape in [w_shape, b_shape] {
                let expected: usize = shape.iter().product();
                let mut u64buf = [0u8; 8];
                reader
                    .read_exact(&mut u64buf)
                    .map_err(|_| Error::format(path, "truncated checkpoint"))?;
                let numel = u64::from_le_bytes(u64buf) as usize;
                if numel != expected {
                    return Err(Error::format(
                        path,
                        format!("tensor length {numel} != expected {expected}"),
                    ));
                }
                let mut raw = vec![0u8; numel * 8];
                reader
                    .read_exact(&mut raw)
                    .map_err(|_| Error::format(path, "truncated checkpoint"))?;
                let data: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect();
                pair.push(Tensor::new(shape, data).map_err(|e| {
                    Error::format(path, format!("invalid tensor data: {e}"))
                })?);
            }
            let b = pair.pop().expect("two tensors pushed");
            let w = pair.pop().expect("two tensors pushed");
            layers.push((w, b));
        }
        Ok(Parameters { config, layers })
    }
}
