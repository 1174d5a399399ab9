//! Probability machinery over image grids: softmax, masked log-softmax,
//! Gaussian smoothing and KL divergence.
//!
//! Everything here is a pure function of its inputs.

use std::io::{Read, Write};
use std::ops::Deref;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::scalar::Real;

/// Smallest scoremap side accepted by [`ScoreMap::new`].
pub const MIN_SCOREMAP_SIDE: usize = 8;

/// Floor applied to the model distribution before taking its logarithm in KL terms.
pub const KL_FLOOR: f64 = 1e-12;

/// Per-pixel detection logits for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap<T>(Grid<T>);

impl<T: Real> ScoreMap<T> {
    pub fn new(logits: Grid<T>) -> Result<Self> {
        if logits.width() < MIN_SCOREMAP_SIDE || logits.height() < MIN_SCOREMAP_SIDE {
            return Err(Error::InvalidInput(format!(
                "scoremap must be at least {MIN_SCOREMAP_SIDE}x{MIN_SCOREMAP_SIDE}, got {}x{}",
                logits.height(),
                logits.width()
            )));
        }
        if !logits.all_finite() {
            return Err(Error::InvalidInput("scoremap has non-finite logits".into()));
        }
        Ok(Self(logits))
    }

    pub fn logits(&self) -> &Grid<T> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<T> {
        self.0
    }
}

impl<T> Deref for ScoreMap<T> {
    type Target = Grid<T>;
    fn deref(&self) -> &Grid<T> {
        &self.0
    }
}

/// Nonnegative distribution over the pixel grid, summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T>(Grid<T>);

impl<T: Real> ProbMap<T> {
    /// Validates nonnegativity and unit mass.
    pub fn new(probs: Grid<T>) -> Result<Self> {
        if probs.data().iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidInput(
                "probability map has negative or non-finite entries".into(),
            ));
        }
        let total = probs.sum();
        if (total - T::one()).abs() > T::normalization_tolerance(probs.len()) {
            return Err(Error::InvalidInput(format!(
                "probability map sums to {total}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    /// Normalizes a nonnegative grid with positive mass.
    pub fn from_weights(weights: Grid<T>) -> Result<Self> {
        if weights.data().iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidInput(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total = weights.sum();
        if total <= T::zero() {
            return Err(Error::Internal("weights have zero total mass".into()));
        }
        Ok(Self(weights.map(|&v| v / total)))
    }

    pub fn uniform(width: usize, height: usize) -> Self {
        let n = T::from_usize_lossy(width * height);
        Self(Grid::filled(width, height, T::one() / n))
    }

    pub fn probs(&self) -> &Grid<T> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<T> {
        self.0
    }
}

impl<T> Deref for ProbMap<T> {
    type Target = Grid<T>;
    fn deref(&self) -> &Grid<T> {
        &self.0
    }
}

/// Log-probabilities normalized over the true cells of `mask`; masked-out
/// cells hold negative infinity.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbMap<T> {
    logprobs: Grid<T>,
    mask: Mask,
}

impl<T: Real> LogProbMap<T> {
    pub fn logprobs(&self) -> &Grid<T> {
        &self.logprobs
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> T {
        *self.logprobs.get(x, y)
    }

    /// The masked distribution itself, zero outside the mask.
    pub fn probs(&self) -> Grid<T> {
        self.logprobs.map(|&l| if l.is_finite() { l.exp() } else { T::zero() })
    }
}

/// `softmax` over every cell, shifted by the maximum logit.
pub fn softmax_2d<T: Real>(logits: &Grid<T>) -> Result<ProbMap<T>> {
    if !logits.all_finite() {
        return Err(Error::InvalidInput("softmax of non-finite logits".into()));
    }
    let m = logits.max_value();
    let exps = logits.map(|&s| (s - m).exp());
    let z = exps.sum();
    Ok(ProbMap(exps.map(|&e| e / z)))
}

/// Log-softmax whose normalization runs over the true cells of `mask` only.
pub fn masked_log_softmax<T: Real>(logits: &Grid<T>, mask: &Mask) -> Result<LogProbMap<T>> {
    logits.ensure_same_shape(mask, "masked_log_softmax")?;
    if !logits.all_finite() {
        return Err(Error::InvalidInput("log-softmax of non-finite logits".into()));
    }
    let selected = || {
        logits
            .data()
            .iter()
            .zip(mask.data())
            .filter(|(_, &keep)| keep)
            .map(|(&s, _)| s)
    };
    let m = selected().fold(T::neg_infinity(), |a, b| a.max(b));
    if m == T::neg_infinity() {
        return Err(Error::DegenerateMask("mask selects no pixels".into()));
    }
    let lse = m + selected().map(|s| (s - m).exp()).sum::<T>().ln();
    let data = logits
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&s, &keep)| if keep { s - lse } else { T::neg_infinity() })
        .collect();
    Ok(LogProbMap {
        logprobs: Grid::from_vec(logits.width(), logits.height(), data)?,
        mask: mask.clone(),
    })
}

/// Half-sample symmetric reflection (`cba|abcd|dcb`), periodic for offsets
/// larger than the signal.
#[inline]
pub(crate) fn mirror(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let r = i.rem_euclid(period) as usize;
    if r < n {
        r
    } else {
        2 * n - 1 - r
    }
}

/// Sampled Gaussian truncated at `ceil(3σ)` and renormalized to unit sum.
pub fn gaussian_kernel<T: Real>(sigma: T) -> Result<Vec<T>> {
    if !(sigma > T::zero()) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "blur sigma must be positive, got {sigma}"
        )));
    }
    let radius = (T::lit(3.0) * sigma).ceil().to_usize().unwrap_or(0);
    let two_var = T::lit(2.0) * sigma * sigma;
    let mut k: Vec<T> = (0..=2 * radius)
        .map(|i| {
            let d = T::from_usize_lossy(i) - T::from_usize_lossy(radius);
            (-(d * d) / two_var).exp()
        })
        .collect();
    let total: T = k.iter().copied().sum();
    for w in &mut k {
        *w /= total;
    }
    Ok(k)
}

/// Separable Gaussian blur with symmetric-reflection borders.
///
/// The border rule makes the operator self-adjoint with unit column sums, so
/// it conserves mass and maps constants to constants.
pub fn gaussian_blur<T: Real>(map: &Grid<T>, sigma: T) -> Result<Grid<T>> {
    let kernel = gaussian_kernel(sigma)?;
    Ok(blur_with_kernel(map, &kernel))
}

pub(crate) fn blur_with_kernel<T: Real>(map: &Grid<T>, kernel: &[T]) -> Grid<T> {
    let (w, h) = (map.width(), map.height());
    let r = (kernel.len() / 2) as isize;
    let src = map.data();

    let mut tmp = vec![T::zero(); w * h];
    let mut padded = vec![T::zero(); w + 2 * r as usize];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (j, p) in padded.iter_mut().enumerate() {
            *p = row[mirror(j as isize - r, w)];
        }
        let out = &mut tmp[y * w..(y + 1) * w];
        for (x, o) in out.iter_mut().enumerate() {
            *o = kernel
                .iter()
                .zip(&padded[x..x + kernel.len()])
                .map(|(&k, &v)| k * v)
                .sum();
        }
    }

    let mut out = vec![T::zero(); w * h];
    for (ki, &kw) in kernel.iter().enumerate() {
        let dy = ki as isize - r;
        for y in 0..h {
            let sy = mirror(y as isize + dy, h);
            let src_row = &tmp[sy * w..(sy + 1) * w];
            let dst_row = &mut out[y * w..(y + 1) * w];
            for (d, &s) in dst_row.iter_mut().zip(src_row) {
                *d += kw * s;
            }
        }
    }
    Grid::from_vec(w, h, out).expect("shape preserved")
}

/// `Σ t log(t / max(p, floor))` with `0 · log 0 := 0`.
pub fn kl_divergence<T: Real>(t: &ProbMap<T>, p: &ProbMap<T>, floor: T) -> Result<T> {
    kl_grid(t, p, floor)
}

pub(crate) fn kl_grid<T: Real>(t: &Grid<T>, p: &Grid<T>, floor: T) -> Result<T> {
    t.ensure_same_shape(p, "kl_divergence")?;
    Ok(t.data()
        .iter()
        .zip(p.data())
        .filter(|(&ti, _)| ti > T::zero())
        .map(|(&ti, &pi)| ti * (ti.ln() - pi.max(floor).ln()))
        .sum())
}

const DADF_MAGIC: &[u8; 4] = b"DADF";
const DADF_VERSION: u32 = 1;

/// Serializes a grid as `DADF`: magic, u32 version, u32 height, u32 width,
/// then row-major little-endian `f32` values.
pub fn encode_dadf<T: Real>(grid: &Grid<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * grid.len());
    out.extend_from_slice(DADF_MAGIC);
    out.extend_from_slice(&DADF_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    for &v in grid.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_dadf<T: Real>(mut bytes: &[u8]) -> Result<Grid<T>> {
    let mut header = [0u8; 16];
    bytes
        .read_exact(&mut header)
        .map_err(|_| Error::Format("DADF header truncated".into()))?;
    if &header[0..4] != DADF_MAGIC {
        return Err(Error::Format("bad DADF magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    if word(4) != DADF_VERSION {
        return Err(Error::Format(format!("unsupported DADF version {}", word(4))));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 4 * h * w {
        return Err(Error::Format(format!(
            "DADF payload has {} bytes, expected {}",
            bytes.len(),
            4 * h * w
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Grid::from_vec(w, h, data)
}

pub fn write_dadf<T: Real>(path: impl AsRef<Path>, grid: &Grid<T>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_dadf(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_dadf<T: Real>(path: impl AsRef<Path>) -> Result<Grid<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dadf(&bytes)
}
