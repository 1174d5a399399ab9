//! A small convolutional keypoint detector with a hand-written backward pass.
//!
//! The network is a stack of `[conv → bias → ReLU]` blocks followed by a
//! single-channel linear conv that emits the scoremap logits. All convs keep
//! the spatial size via symmetric-reflection padding.

mod conv;
mod gradcheck;
mod optim;
mod train;

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use conv::Planes;
pub use gradcheck::{run_gradcheck, GradCheckConfig, GradCheckReport, LossKind};
pub use optim::{optimizer_step, OptState};
pub use train::{
    evaluate_pair, train_loop, train_step, PairOutcome, TrainConfig, TrainLog, Matching,
};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::prob::{ScoreMap, MIN_SCOREMAP_SIDE};
use crate::scalar::Real;
use conv::{conv_backward, conv_forward};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    /// Output width of each hidden block.
    pub channel_widths: Vec<usize>,
    pub kernel_size: usize,
    pub num_blocks: usize,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channel_widths: vec![8, 16, 16],
            kernel_size: 5,
            num_blocks: 3,
            seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn new(channel_widths: Vec<usize>, kernel_size: usize, seed: u64) -> Self {
        Self {
            num_blocks: channel_widths.len(),
            channel_widths,
            kernel_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.channel_widths.len() != self.num_blocks {
            return Err(Error::InvalidParameter(format!(
                "num_blocks is {} but {} channel widths were given",
                self.num_blocks,
                self.channel_widths.len()
            )));
        }
        if self.channel_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter("channel widths must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    /// `out × in × k × k`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    fn zeros_like(&self) -> Self {
        Self {
            weights: vec![T::zero(); self.weights.len()],
            bias: vec![T::zero(); self.bias.len()],
            ..*self
        }
    }
}

/// Detector weights. Also used to hold parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams<T> {
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Real> DetectorParams<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(ConvLayer::zeros_like).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Kernel side shared by the layers (the largest, if they differ).
    pub fn kernel_size(&self) -> usize {
        self.layers.iter().map(|l| l.kernel_size).max().unwrap_or(1)
    }

    /// Weight and bias buffers in a fixed order.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Accumulates `other` into `self`.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Rounds every value to the `f32` storage precision of weight files.
    pub fn round_to_storage(&mut self) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = T::lit(v.as_f64() as f32 as f64);
            }
        }
    }

    pub fn convert<U: Real>(&self) -> DetectorParams<U> {
        DetectorParams {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    out_channels: l.out_channels,
                    in_channels: l.in_channels,
                    kernel_size: l.kernel_size,
                    weights: l.weights.iter().map(|v| U::lit(v.as_f64())).collect(),
                    bias: l.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Detector that responds to `1 − image` exactly as `self` responds to
    /// `image`: first-layer kernels are negated and their sums folded into
    /// the bias (exact because reflection padding of a constant is constant).
    pub fn negate_input(&self) -> Self {
        let mut out = self.clone();
        if let Some(first) = out.layers.first_mut() {
            let kk = first.kernel_size * first.kernel_size;
            for o in 0..first.out_channels {
                let ws = &mut first.weights[o * first.in_channels * kk..(o + 1) * first.in_channels * kk];
                let s: T = ws.iter().copied().sum();
                first.bias[o] += s;
                ws.iter_mut().for_each(|w| *w = -*w);
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let mut channels = 1;
        for (i, l) in self.layers.iter().enumerate() {
            let kk = l.kernel_size * l.kernel_size;
            if l.in_channels != channels
                || l.weights.len() != l.out_channels * l.in_channels * kk
                || l.bias.len() != l.out_channels
                || l.kernel_size % 2 == 0
            {
                return Err(Error::InvalidInput(format!("layer {i} has inconsistent shapes")));
            }
            channels = l.out_channels;
        }
        if channels != 1 || self.layers.is_empty() {
            return Err(Error::InvalidInput("detector must end in a single channel".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            for d in [l.out_channels, l.in_channels, l.kernel_size, l.kernel_size] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &w in &l.weights {
                out.extend_from_slice(&(w.as_f64() as f32).to_le_bytes());
            }
            out.extend_from_slice(&(l.bias.len() as u32).to_le_bytes());
            for &b in &l.bias {
                out.extend_from_slice(&(b.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        fn take<const N: usize>(bytes: &mut &[u8]) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            bytes
                .read_exact(&mut buf)
                .map_err(|_| Error::Format("weights file truncated".into()))?;
            Ok(buf)
        }
        fn word(bytes: &mut &[u8]) -> Result<usize> {
            Ok(u32::from_le_bytes(take::<4>(bytes)?) as usize)
        }
        fn floats<T: Real>(bytes: &mut &[u8], n: usize) -> Result<Vec<T>> {
            (0..n)
                .map(|_| Ok(T::lit(f32::from_le_bytes(take::<4>(bytes)?) as f64)))
                .collect()
        }
        if &take::<4>(&mut bytes)? != WEIGHTS_MAGIC {
            return Err(Error::Format("bad weights magic".into()));
        }
        let version = word(&mut bytes)?;
        if version != WEIGHTS_VERSION as usize {
            return Err(Error::Format(format!("unsupported weights version {version}")));
        }
        let count = word(&mut bytes)?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (o, i, kh, kw) = (word(&mut bytes)?, word(&mut bytes)?, word(&mut bytes)?, word(&mut bytes)?);
            if kh != kw {
                return Err(Error::Format("only square kernels are supported".into()));
            }
            let weights = floats(&mut bytes, o * i * kh * kw)?;
            let nb = word(&mut bytes)?;
            let bias = floats(&mut bytes, nb)?;
            layers.push(ConvLayer {
                out_channels: o,
                in_channels: i,
                kernel_size: kh,
                weights,
                bias,
            });
        }
        if !bytes.is_empty() {
            return Err(Error::Format("trailing bytes after weights".into()));
        }
        let params = Self { layers };
        params.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"DADW";
const WEIGHTS_VERSION: u32 = 1;

/// Seeded Glorot-uniform kernels, zero biases. Values are drawn at `f32`
/// storage precision so a freshly initialized detector round-trips exactly
/// through a weights file.
pub fn init_params<T: Real>(cfg: &ArchConfig) -> Result<DetectorParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.kernel_size;
    let mut widths = vec![1];
    widths.extend(&cfg.channel_widths);
    widths.push(1);
    let layers = widths
        .windows(2)
        .map(|pair| {
            let (cin, cout) = (pair[0], pair[1]);
            let bound = (6.0 / ((cin + cout) * k * k) as f64).sqrt();
            let weights = (0..cout * cin * k * k)
                .map(|_| T::lit(rng.gen_range(-bound..bound) as f32 as f64))
                .collect();
            ConvLayer {
                out_channels: cout,
                in_channels: cin,
                kernel_size: k,
                weights,
                bias: vec![T::zero(); cout],
            }
        })
        .collect();
    Ok(DetectorParams { layers })
}

/// What [`backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ActivationCache<T> {
    /// Padded input of every layer.
    padded_inputs: Vec<Planes<T>>,
    /// Pre-activations of every layer (the last one is the scoremap).
    pre_activations: Vec<Planes<T>>,
    height: usize,
    width: usize,
}

impl<T> ActivationCache<T> {
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

fn check_image<T: Real>(params: &DetectorParams<T>, image: &Grid<T>) -> Result<()> {
    let min = MIN_SCOREMAP_SIDE.max(params.kernel_size());
    if image.width() < min || image.height() < min {
        return Err(Error::InvalidInput(format!(
            "image {}x{} is smaller than the {min}x{min} minimum",
            image.height(),
            image.width()
        )));
    }
    if !image.all_finite() {
        return Err(Error::InvalidInput("image has non-finite pixels".into()));
    }
    Ok(())
}

pub fn forward<T: Real>(params: &DetectorParams<T>, image: &Grid<T>) -> Result<(ScoreMap<T>, ActivationCache<T>)> {
    params.validate()?;
    check_image(params, image)?;
    let (h, w) = image.shape();
    let mut x = Planes {
        channels: 1,
        height: h,
        width: w,
        data: image.data().to_vec(),
    };
    let last = params.layers.len() - 1;
    let mut padded_inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    for (li, layer) in params.layers.iter().enumerate() {
        let padded = x.padded(layer.kernel_size / 2);
        let z = conv_forward(&padded, &layer.weights, &layer.bias, layer.out_channels, layer.kernel_size);
        x = if li < last {
            Planes {
                data: z.data.iter().map(|&v| v.max(T::zero())).collect(),
                ..z.clone()
            }
        } else {
            z.clone()
        };
        padded_inputs.push(padded);
        pre_activations.push(z);
    }
    let logits = Grid::from_vec(w, h, x.data)?;
    Ok((
        ScoreMap::new(logits)?,
        ActivationCache {
            padded_inputs,
            pre_activations,
            height: h,
            width: w,
        },
    ))
}

/// Scoremap only.
pub fn predict<T: Real>(params: &DetectorParams<T>, image: &Grid<T>) -> Result<ScoreMap<T>> {
    forward(params, image).map(|(s, _)| s)
}

/// Parameter gradients of a scalar loss whose gradient w.r.t. the scoremap
/// is `grad_scoremap`.
pub fn backward<T: Real>(
    params: &DetectorParams<T>,
    cache: &ActivationCache<T>,
    grad_scoremap: &Grid<T>,
) -> Result<DetectorParams<T>> {
    if grad_scoremap.shape() != cache.shape() || cache.pre_activations.len() != params.layers.len() {
        return Err(Error::InvalidInput(
            "gradient or cache does not match the forward pass".into(),
        ));
    }
    let (h, w) = cache.shape();
    let mut grads = params.zeros_like();
    let mut d_out = Planes {
        channels: 1,
        height: h,
        width: w,
        data: grad_scoremap.data().to_vec(),
    };
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let padded = &cache.padded_inputs[li];
        if padded.channels != layer.in_channels {
            return Err(Error::InvalidInput("cache does not match parameters".into()));
        }
        let (d_w, d_b, d_pad) = conv_backward(padded, &layer.weights, &d_out, layer.kernel_size);
        grads.layers[li].weights = d_w;
        grads.layers[li].bias = d_b;
        if li > 0 {
            let mut d_in = d_pad.fold_padding(layer.kernel_size / 2, h, w);
            let z = &cache.pre_activations[li - 1];
            for (g, &zv) in d_in.data.iter_mut().zip(&z.data) {
                if zv <= T::zero() {
                    *g = T::zero();
                }
            }
            d_out = d_in;
        }
    }
    Ok(grads)
}
