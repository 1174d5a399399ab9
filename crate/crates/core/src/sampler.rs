//! Balanced top-K keypoint sampling.
//!
//! Training: softmax → density balancing → NMS → top-K.
//! Inference: softmax → NMS → top-K → optional subpixel refinement.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::prob::{gaussian_blur, softmax_2d, ProbMap};
use crate::scalar::Real;

/// Density floor used inside [`kde_balance`].
pub const DENSITY_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint<T> {
    /// Column, in pixels.
    pub x: T,
    /// Row, in pixels.
    pub y: T,
    pub score: T,
}

impl<T: Real> Keypoint<T> {
    pub fn new(x: T, y: T, score: T) -> Self {
        Self { x, y, score }
    }

    /// Nearest integer pixel `(column, row)`.
    pub fn pixel(&self) -> (usize, usize) {
        (
            self.x.round().max(T::zero()).to_usize().unwrap_or(0),
            self.y.round().max(T::zero()).to_usize().unwrap_or(0),
        )
    }
}

/// Keypoints of one image, ordered by descending score with raster tie-break.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet<T> {
    pub keypoints: Vec<Keypoint<T>>,
    /// `(height, width)` of the image the keypoints live in.
    pub source_shape: (usize, usize),
}

impl<T: Real> KeypointSet<T> {
    pub fn new(keypoints: Vec<Keypoint<T>>, source_shape: (usize, usize)) -> Self {
        Self {
            keypoints,
            source_shape,
        }
    }

    pub fn empty(source_shape: (usize, usize)) -> Self {
        Self::new(Vec::new(), source_shape)
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Keypoint<T>> {
        self.keypoints.iter()
    }

    pub fn positions(&self) -> Vec<(T, T)> {
        self.keypoints.iter().map(|k| (k.x, k.y)).collect()
    }

    /// Sorts by descending score; equal scores keep raster (row-major) order.
    pub fn sort_by_score(&mut self) {
        let w = self.source_shape.1;
        self.keypoints.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| raster(a, w).cmp(&raster(b, w)))
        });
    }

    /// Text form: header `x,y,score`, then one keypoint per line with six
    /// fractional digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,score\n");
        for k in &self.keypoints {
            writeln!(out, "{:.6},{:.6},{:.6}", k.x.as_f64(), k.y.as_f64(), k.score.as_f64())
                .unwrap();
        }
        out
    }

    pub fn from_csv(text: &str, source_shape: (usize, usize)) -> Result<Self> {
        let rows = parse_csv_rows(text, "x,y,score", 3)?;
        let keypoints = rows
            .into_iter()
            .map(|r| Keypoint::new(T::lit(r[0]), T::lit(r[1]), T::lit(r[2])))
            .collect();
        Ok(Self::new(keypoints, source_shape))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>, source_shape: (usize, usize)) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, source_shape)
    }
}

fn raster<T: Real>(k: &Keypoint<T>, width: usize) -> usize {
    let (x, y) = k.pixel();
    y * width + x
}

pub(crate) fn parse_csv_rows(text: &str, header: &str, min_cols: usize) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == header => {}
        other => {
            return Err(Error::Format(format!(
                "expected header `{header}`, found `{}`",
                other.unwrap_or("")
            )))
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() < min_cols {
                return Err(Error::Format(format!("line {}: too few columns", i + 2)));
            }
            cols.iter()
                .take(min_cols)
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|_| Error::Format(format!("line {}: bad number `{c}`", i + 2)))
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Inference,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "inference" => Ok(Self::Inference),
            _ => Err(Error::Config(format!("unknown sample mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub k: usize,
    pub nms_window: usize,
    /// Density-estimate σ as a fraction of `min(height, width)`.
    pub kde_sigma_frac: f64,
    pub use_kde: bool,
    pub subpixel: bool,
    pub subpixel_temp: f64,
    pub subpixel_window: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: 512,
            nms_window: 3,
            kde_sigma_frac: 0.02,
            use_kde: true,
            subpixel: true,
            subpixel_temp: 0.5,
            subpixel_window: 3,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        check_window(self.nms_window, "nms_window")?;
        check_window(self.subpixel_window, "subpixel_window")?;
        if !(self.subpixel_temp > 0.0) {
            return Err(Error::InvalidParameter("subpixel_temp must be positive".into()));
        }
        if !(self.kde_sigma_frac > 0.0) {
            return Err(Error::InvalidParameter("kde_sigma_frac must be positive".into()));
        }
        Ok(())
    }
}

fn check_window(window: usize, what: &str) -> Result<()> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "{what} must be odd and at least 3, got {window}"
        )));
    }
    Ok(())
}

/// Density-balanced scores `p / sqrt(max(p * g, floor))`.
pub fn kde_balance<T: Real>(p: &ProbMap<T>, sigma: T) -> Result<Grid<T>> {
    let density = gaussian_blur(p, sigma)?;
    let floor = T::lit(DENSITY_FLOOR);
    Ok(Grid::from_fn(p.width(), p.height(), |x, y| {
        *p.get(x, y) / density.get(x, y).max(floor).sqrt()
    }))
}

/// Keeps pixels that dominate their `window × window` neighbourhood.
///
/// A pixel survives if no neighbour is larger and no raster-earlier neighbour
/// is equal; every other pixel is set to zero.
pub fn nms<T: Real>(scores: &Grid<T>, window: usize) -> Result<Grid<T>> {
    check_window(window, "nms window")?;
    let r = window / 2;
    let (w, h) = (scores.width(), scores.height());
    Ok(Grid::from_fn(w, h, |x, y| {
        let v = *scores.get(x, y);
        let here = y * w + x;
        for ny in y.saturating_sub(r)..=(y + r).min(h - 1) {
            for nx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                let n = *scores.get(nx, ny);
                if n > v || (n == v && ny * w + nx < here) {
                    return T::zero();
                }
            }
        }
        v
    }))
}

/// The `k` highest nonzero cells, descending with raster tie-break.
pub fn top_k<T: Real>(scores: &Grid<T>, k: usize) -> KeypointSet<T> {
    let w = scores.width();
    let mut cells: Vec<(usize, T)> = scores
        .data()
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, v)| *v != T::zero())
        .collect();
    let by_score = |a: &(usize, T), b: &(usize, T)| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    };
    if cells.len() > k {
        cells.select_nth_unstable_by(k - 1, by_score);
        cells.truncate(k);
    }
    cells.sort_by(by_score);
    let keypoints = cells
        .into_iter()
        .map(|(i, v)| Keypoint::new(T::from_usize_lossy(i % w), T::from_usize_lossy(i / w), v))
        .collect();
    KeypointSet::new(keypoints, scores.shape())
}

/// Moves each keypoint to the expectation of a temperature softmax over the
/// (border-clipped) logit patch around it.
pub fn subpixel_refine<T: Real>(
    logits: &Grid<T>,
    kps: &KeypointSet<T>,
    temp: T,
    window: usize,
) -> KeypointSet<T> {
    let r = window / 2;
    let (w, h) = (logits.width(), logits.height());
    let keypoints = kps
        .iter()
        .map(|kp| {
            let (cx, cy) = kp.pixel();
            let (cx, cy) = (cx.min(w - 1), cy.min(h - 1));
            let ys = cy.saturating_sub(r)..=(cy + r).min(h - 1);
            let xs = cx.saturating_sub(r)..=(cx + r).min(w - 1);
            let mut m = T::neg_infinity();
            for y in ys.clone() {
                for x in xs.clone() {
                    m = m.max(*logits.get(x, y));
                }
            }
            let (mut z, mut ex, mut ey) = (T::zero(), T::zero(), T::zero());
            for y in ys.clone() {
                for x in xs.clone() {
                    let wgt = ((*logits.get(x, y) - m) / temp).exp();
                    z += wgt;
                    ex += wgt * (T::from_usize_lossy(x) - T::from_usize_lossy(cx));
                    ey += wgt * (T::from_usize_lossy(y) - T::from_usize_lossy(cy));
                }
            }
            Keypoint::new(
                T::from_usize_lossy(cx) + ex / z,
                T::from_usize_lossy(cy) + ey / z,
                kp.score,
            )
        })
        .collect();
    KeypointSet::new(keypoints, kps.source_shape)
}

/// Full sampling pipeline. Reported scores are the detector probabilities
/// `p(x)` at the selected pixels, also in train mode.
pub fn sample_keypoints<T: Real>(
    logits: &Grid<T>,
    cfg: &SamplerConfig,
    mode: SampleMode,
) -> Result<KeypointSet<T>> {
    cfg.validate()?;
    let p = softmax_2d(logits)?;
    match mode {
        SampleMode::Train => {
            let balanced = if cfg.use_kde {
                let side = T::from_usize_lossy(p.width().min(p.height()));
                kde_balance(&p, T::lit(cfg.kde_sigma_frac) * side)?
            } else {
                p.probs().clone()
            };
            let mut kps = top_k(&nms(&balanced, cfg.nms_window)?, cfg.k);
            for kp in &mut kps.keypoints {
                let (x, y) = kp.pixel();
                kp.score = *p.get(x, y);
            }
            kps.sort_by_score();
            Ok(kps)
        }
        SampleMode::Inference => {
            let kps = top_k(&nms(&p, cfg.nms_window)?, cfg.k);
            if cfg.subpixel {
                Ok(subpixel_refine(
                    logits,
                    &kps,
                    T::lit(cfg.subpixel_temp),
                    cfg.subpixel_window,
                ))
            } else {
                Ok(kps)
            }
        }
    }
}
