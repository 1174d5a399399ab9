//! Merging a light and a dark detector through a generalized mean of their
//! keypoint distributions, the distillation loss, and a discrete checker for
//! local maxima under pointwise maximum.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{backward, forward, optimizer_step, predict, DetectorParams, OptState};
use crate::prob::{kl_grid, softmax_2d, ProbMap, KL_FLOOR};
use crate::sampler::{sample_keypoints, KeypointSet, SampleMode, SamplerConfig};
use crate::scalar::Real;
use crate::synth::{GtKeypoints, Polarity};

/// Order `r` of the generalized mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeOrder {
    Arithmetic,
    Quadratic,
    Max,
}

impl MergeOrder {
    pub fn exponent(self) -> Option<i32> {
        match self {
            Self::Arithmetic => Some(1),
            Self::Quadratic => Some(2),
            Self::Max => None,
        }
    }
}

impl fmt::Display for MergeOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Arithmetic => "1",
            Self::Quadratic => "2",
            Self::Max => "inf",
        })
    }
}

impl FromStr for MergeOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Self::Arithmetic),
            "2" => Ok(Self::Quadratic),
            "inf" | "infinity" | "max" => Ok(Self::Max),
            _ => Err(Error::Config(format!("merge order must be 1, 2 or inf, got `{s}`"))),
        }
    }
}

/// Pointwise `(½(aʳ + bʳ))^{1/r}`; `r = ∞` is the pointwise maximum.
pub fn generalized_mean<T: Real>(a: &Grid<T>, b: &Grid<T>, r: MergeOrder) -> Result<Grid<T>> {
    a.ensure_same_shape(b, "generalized mean")?;
    if a.data().iter().chain(b.data()).any(|&v| !(v >= T::zero())) {
        return Err(Error::InvalidInput(
            "generalized mean needs nonnegative inputs".into(),
        ));
    }
    let half = T::lit(0.5);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match r {
            MergeOrder::Arithmetic => half * (x + y),
            MergeOrder::Quadratic => (half * (x * x + y * y)).sqrt(),
            MergeOrder::Max => x.max(y),
        })
        .collect();
    Grid::from_vec(a.width(), a.height(), data)
}

/// `p_r ∝ M_r(p_dark, p_light)`.
pub fn distill_target<T: Real>(p_light: &ProbMap<T>, p_dark: &ProbMap<T>, r: MergeOrder) -> Result<ProbMap<T>> {
    let m = generalized_mean(p_dark.probs(), p_light.probs(), r)?;
    if m.sum() <= T::zero() {
        return Err(Error::Internal("generalized mean vanished everywhere".into()));
    }
    ProbMap::from_weights(m)
}

/// `KL(target ‖ softmax(S))` and its gradient `softmax(S) − target`.
pub fn distill_loss_and_grad<T: Real>(target: &ProbMap<T>, logits: &Grid<T>) -> Result<(T, Grid<T>)> {
    target.ensure_same_shape(logits, "distillation loss")?;
    let p = softmax_2d(logits)?;
    let loss = kl_grid(target.probs(), p.probs(), T::lit(KL_FLOOR))?;
    let grad = Grid::from_vec(
        p.width(),
        p.height(),
        p.data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect(),
    )?;
    Ok((loss, grad))
}

/// Discrete strict local maxima.
///
/// Pixels are grouped into 8-connected components of equal value. A
/// component is a maximum when every pixel bordering it is strictly smaller;
/// it is reported once, by its raster-first pixel. A constant map therefore
/// has no maxima.
pub fn local_maxima<T: Real>(map: &Grid<T>) -> BTreeSet<(usize, usize)> {
    let (w, h) = (map.width(), map.height());
    let mut seen = vec![false; w * h];
    let mut out = BTreeSet::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] {
            continue;
        }
        let v = map.data()[start];
        let mut is_max = true;
        let mut bordered = false;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    let n = map.data()[j];
                    if n == v {
                        if !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    } else if n > v {
                        is_max = false;
                    } else {
                        bordered = true;
                    }
                }
            }
        }
        if is_max && bordered {
            out.insert((start % w, start / w));
        }
    }
    out
}

/// A compactly supported unimodal bump `a·(1 − (d/R)²)³` sampled on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointFunction {
    pub values: Grid<f64>,
}

impl KeypointFunction {
    /// Bump centered at `(cx, cy)` with radius `radius` and peak `amplitude`,
    /// optionally stretched by `aspect` along an axis at angle `angle`.
    pub fn bump(
        (w, h): (usize, usize),
        (cx, cy): (f64, f64),
        radius: f64,
        amplitude: f64,
        aspect: f64,
        angle: f64,
    ) -> Result<Self> {
        if !(radius > 0.0 && amplitude > 0.0 && aspect > 0.0) {
            return Err(Error::InvalidInput("bump radius, amplitude and aspect must be positive".into()));
        }
        let (c, s) = (angle.cos(), angle.sin());
        let values = Grid::from_fn(w, h, |x, y| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let (u, v) = (c * dx + s * dy, (-s * dx + c * dy) * aspect);
            let q = (u * u + v * v) / (radius * radius);
            if q < 1.0 {
                amplitude * (1.0 - q).powi(3)
            } else {
                0.0
            }
        });
        Self::new(values)
    }

    /// Validates a nonnegative grid with nonempty support and a single local
    /// maximum.
    pub fn new(values: Grid<f64>) -> Result<Self> {
        if values.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("keypoint function must be finite and nonnegative".into()));
        }
        if values.data().iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidInput("keypoint function has empty support".into()));
        }
        let maxima = local_maxima(&values);
        if maxima.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "keypoint function must be unimodal, found {} maxima",
                maxima.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn mode(&self) -> (usize, usize) {
        *local_maxima(&self.values).iter().next().expect("validated unimodal")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeVerdict {
    /// Each function dominates the other around its own mode.
    Partners,
    /// `f` is dominated around its mode by `g`.
    FSubsumed,
    /// `g` is dominated around its mode by `f`.
    GSubsumed,
    /// Neither dominates around its mode.
    BothSubsumed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeCheck {
    pub verdict: MergeVerdict,
    pub merged_maxima: BTreeSet<(usize, usize)>,
    /// Merged maxima are a subset of the union of the component maxima.
    pub no_extra_maxima: bool,
    /// For partners, the merged maxima are exactly both modes; vacuously true
    /// otherwise.
    pub partners_retained: bool,
}

impl MergeCheck {
    pub fn holds(&self) -> bool {
        self.no_extra_maxima && self.partners_retained
    }
}

fn dominates_around(f: &Grid<f64>, g: &Grid<f64>, (mx, my): (usize, usize)) -> bool {
    let (w, h) = (f.width(), f.height());
    (my.saturating_sub(1)..=(my + 1).min(h - 1))
        .all(|y| (mx.saturating_sub(1)..=(mx + 1).min(w - 1)).all(|x| f.get(x, y) > g.get(x, y)))
}

/// Classifies `(f, g)` and checks the maxima of `max(f, g)`.
pub fn check_partner_merge(f: &KeypointFunction, g: &KeypointFunction) -> Result<MergeCheck> {
    f.values.ensure_same_shape(&g.values, "partner check")?;
    let (mf, mg) = (f.mode(), g.mode());
    let f_holds = dominates_around(&f.values, &g.values, mf);
    let g_holds = dominates_around(&g.values, &f.values, mg);
    let verdict = match (f_holds, g_holds) {
        (true, true) => MergeVerdict::Partners,
        (false, true) => MergeVerdict::FSubsumed,
        (true, false) => MergeVerdict::GSubsumed,
        (false, false) => MergeVerdict::BothSubsumed,
    };
    let merged = generalized_mean(&f.values, &g.values, MergeOrder::Max)?;
    let merged_maxima = local_maxima(&merged);
    let union: BTreeSet<_> = [mf, mg].into_iter().collect();
    Ok(MergeCheck {
        verdict,
        no_extra_maxima: merged_maxima.is_subset(&union),
        partners_retained: verdict != MergeVerdict::Partners || merged_maxima == union,
        merged_maxima,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    /// Training images consumed.
    pub steps: usize,
    pub batch_size: usize,
    pub order: MergeOrder,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub weight_decay: f64,
    pub threads: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            order: MergeOrder::Max,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            weight_decay: 1e-4,
            threads: 1,
        }
    }
}

/// Distillation loss of `student` against the merged teachers on `image`,
/// with parameter gradients.
pub fn distill_image<T: Real>(
    light: &DetectorParams<T>,
    dark: &DetectorParams<T>,
    student: &DetectorParams<T>,
    image: &Grid<T>,
    order: MergeOrder,
) -> Result<(T, DetectorParams<T>)> {
    let p_light = softmax_2d(predict(light, image)?.logits())?;
    let p_dark = softmax_2d(predict(dark, image)?.logits())?;
    let target = distill_target(&p_light, &p_dark, order)?;
    let (s, cache) = forward(student, image)?;
    let (loss, grad) = distill_loss_and_grad(&target, s.logits())?;
    Ok((loss, backward(student, &cache, &grad)?))
}

/// Trains `student` on `cfg.steps` images from `data(i)`. Returns the final
/// parameters (rounded to weight-file precision) and the per-image losses.
pub fn distill_train<T: Real>(
    light: &DetectorParams<T>,
    dark: &DetectorParams<T>,
    student: DetectorParams<T>,
    data: &mut dyn FnMut(usize) -> Result<Grid<T>>,
    cfg: &DistillConfig,
) -> Result<(DetectorParams<T>, Vec<T>)> {
    if cfg.batch_size == 0 || cfg.threads == 0 {
        return Err(Error::InvalidParameter("batch_size and threads must be at least 1".into()));
    }
    let mut params = student;
    let mut state = OptState::new(&params).with_hyper(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_opt, cfg.weight_decay);
    state.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut i = 0;
    while i < cfg.steps {
        let n = cfg.batch_size.min(cfg.steps - i);
        let images = (i..i + n).map(&mut *data).collect::<Result<Vec<_>>>()?;
        let p = &params;
        let outcomes: Vec<Result<(T, DetectorParams<T>)>> = pool.install(|| {
            images
                .par_iter()
                .map(|img| distill_image(light, dark, p, img, cfg.order))
                .collect()
        });
        let mut total = params.zeros_like();
        for o in outcomes {
            let (loss, g) = o?;
            losses.push(loss);
            total.add_assign(&g);
        }
        let scale = T::one() / T::from_usize_lossy(n);
        for t in total.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= scale);
        }
        if !total.all_finite() {
            return Err(Error::Numeric("non-finite distillation gradient".into()));
        }
        optimizer_step(&mut params, &total, &mut state)?;
        i += n;
    }
    if cfg.steps > 0 {
        params.round_to_storage();
    }
    Ok((params, losses))
}

/// Fraction of ground-truth keypoints of each polarity that have a detection
/// within `radius` pixels, as `(light, dark)`. `NaN` when a polarity is
/// absent.
pub fn polarity_recall<T: Real>(kps: &KeypointSet<T>, gt: &GtKeypoints<T>, radius: f64) -> (f64, f64) {
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for (&(gx, gy), pol) in gt.points.iter().zip(&gt.polarity) {
        let slot = usize::from(*pol == Polarity::Dark);
        totals[slot] += 1;
        let found = kps
            .iter()
            .any(|k| (k.x.as_f64() - gx.as_f64()).hypot(k.y.as_f64() - gy.as_f64()) <= radius);
        hits[slot] += usize::from(found);
    }
    let frac = |i: usize| {
        if totals[i] == 0 {
            f64::NAN
        } else {
            hits[i] as f64 / totals[i] as f64
        }
    };
    (frac(0), frac(1))
}

/// Pooled polarity recall of a detector over images with ground truth.
pub fn detector_polarity_recall<T: Real>(
    params: &DetectorParams<T>,
    images: &[(Grid<T>, GtKeypoints<T>)],
    sampler: &SamplerConfig,
    radius: f64,
) -> Result<(f64, f64)> {
    let mut hits = [0.0; 2];
    let mut totals = [0.0; 2];
    for (img, gt) in images {
        let kps = sample_keypoints(predict(params, img)?.logits(), sampler, SampleMode::Inference)?;
        let (l, d) = polarity_recall(&kps, gt, radius);
        for (i, (r, n)) in [(l, gt.count(Polarity::Light)), (d, gt.count(Polarity::Dark))].into_iter().enumerate() {
            if n > 0 {
                hits[i] += r * n as f64;
                totals[i] += n as f64;
            }
        }
    }
    Ok((hits[0] / totals[0], hits[1] / totals[1]))
}
