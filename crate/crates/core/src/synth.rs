//! Synthetic training and evaluation pairs.
//!
//! Two generators share [`SceneConfig`]:
//!
//! - the toy model: a gray image with single-pixel light and dark dots, where
//!   image B is an independent re-layout and dot `i` of A corresponds to dot
//!   `i` of B;
//! - planar scenes: anti-aliased light and dark structures on a textured
//!   background, with B rendered through a random homography and optionally
//!   rotated by a multiple of 90° and/or negated.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{
    match_mutual_nn, matmul3, transfer_mask, HomographyTransfer, Inverted, Point, PointTransfer,
};
use crate::grid::{Grid, Mask};
use crate::objective::reward_threshold;
use crate::sampler::{parse_csv_rows, Keypoint, KeypointSet};
use crate::scalar::Real;

const PLACEMENT_TRIES: usize = 1000;
const LAYOUT_RESTARTS: usize = 20;
const HOMOGRAPHY_TRIES: usize = 1000;
const MIN_COVISIBLE: f64 = 0.4;
const SUPERSAMPLE: usize = 4;
const LIGHT_LEVEL: f64 = 0.95;
const DARK_LEVEL: f64 = 0.05;
const TEXTURE_AMPLITUDE: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Light,
    Dark,
}

impl Polarity {
    pub fn flipped(self) -> Self {
        match self {
            Self::Light => Self::Dark,
            Self::Dark => Self::Light,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Light => "light",
            Self::Dark => "dark",
        })
    }
}

impl FromStr for Polarity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "light" => Ok(Self::Light),
            "dark" => Ok(Self::Dark),
            _ => Err(Error::Format(format!("unknown polarity `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Dot,
    Cross,
    Blob,
    Corner,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dot => "dot",
            Self::Cross => "cross",
            Self::Blob => "blob",
            Self::Corner => "corner",
        })
    }
}

impl FromStr for Shape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Self::Dot),
            "cross" => Ok(Self::Cross),
            "blob" => Ok(Self::Blob),
            "corner" => Ok(Self::Corner),
            _ => Err(Error::Config(format!("unknown shape `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationAug {
    Off,
    /// Uniform over the four quarter turns.
    Random,
    /// Always `k` counter-clockwise quarter turns.
    Fixed(u8),
}

impl fmt::Display for RotationAug {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Off => f.write_str("off"),
            Self::Random => f.write_str("random"),
            Self::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for RotationAug {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" | "false" => Ok(Self::Off),
            "random" | "true" => Ok(Self::Random),
            _ => match s.parse::<u8>() {
                Ok(k) if k < 4 => Ok(Self::Fixed(k)),
                _ => Err(Error::Config(format!("rotation must be off, random or 0-3, got `{s}`"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegationAug {
    Off,
    /// `image_b ← 1 − image_b`.
    Rgb,
}

impl fmt::Display for NegationAug {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::Rgb => "rgb",
        })
    }
}

impl FromStr for NegationAug {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "rgb" => Ok(Self::Rgb),
            _ => Err(Error::Config(format!("negation must be off or rgb, got `{s}`"))),
        }
    }
}

/// Ranges of the random homography, in unit-square coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct HomographyMagnitude {
    pub perspective_jitter: f64,
    pub max_translation: f64,
    pub scale_range: (f64, f64),
    /// Radians.
    pub max_rotation: f64,
}

impl HomographyMagnitude {
    pub fn zero() -> Self {
        Self {
            perspective_jitter: 0.0,
            max_translation: 0.0,
            scale_range: (1.0, 1.0),
            max_rotation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.perspective_jitter >= 0.0 && self.max_translation >= 0.0 && self.max_rotation >= 0.0) {
            return Err(Error::InvalidParameter("homography magnitudes must be nonnegative".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidParameter(format!("bad scale range ({lo}, {hi})")));
        }
        Ok(())
    }
}

impl Default for HomographyMagnitude {
    fn default() -> Self {
        Self {
            perspective_jitter: 0.2,
            max_translation: 0.1,
            scale_range: (0.85, 1.15),
            max_rotation: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub num_light: usize,
    pub num_dark: usize,
    pub shape_palette: Vec<Shape>,
    pub background_gray: f64,
    pub rotation_aug: RotationAug,
    pub negation_aug: NegationAug,
    pub homography: HomographyMagnitude,
    pub noise_sigma: f64,
    /// Minimum distance between keypoint centers.
    pub min_separation: f64,
    /// Keypoint centers stay this far from the image border.
    pub margin: f64,
    /// Half-size of the square around each toy dot that carries its
    /// correspondence.
    pub transfer_radius: f64,
}

impl SceneConfig {
    /// 10 light and 10 dark single-pixel dots on a 40×40 gray image.
    pub fn toy() -> Self {
        Self {
            width: 40,
            height: 40,
            num_light: 10,
            num_dark: 10,
            shape_palette: vec![Shape::Dot],
            background_gray: 0.5,
            rotation_aug: RotationAug::Off,
            negation_aug: NegationAug::Off,
            homography: HomographyMagnitude::zero(),
            noise_sigma: 0.0,
            min_separation: 6.0,
            margin: 3.0,
            transfer_radius: 1.0,
        }
    }

    /// 64×64 planar scenes with all four shapes in both polarities.
    pub fn scenes() -> Self {
        Self {
            width: 64,
            height: 64,
            num_light: 6,
            num_dark: 6,
            shape_palette: vec![Shape::Dot, Shape::Cross, Shape::Blob, Shape::Corner],
            background_gray: 0.5,
            rotation_aug: RotationAug::Off,
            negation_aug: NegationAug::Off,
            homography: HomographyMagnitude::default(),
            noise_sigma: 0.01,
            min_separation: 10.0,
            margin: 6.0,
            transfer_radius: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_light + self.num_dark == 0 {
            return Err(Error::InvalidParameter("need at least one keypoint".into()));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidParameter("image sides must be at least 8".into()));
        }
        if self.shape_palette.is_empty() {
            return Err(Error::InvalidParameter("shape palette is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.background_gray) {
            return Err(Error::InvalidParameter("background_gray must lie in [0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::InvalidParameter("noise_sigma and margin must be nonnegative".into()));
        }
        if !(self.min_separation > 2.0 * self.transfer_radius) || !(self.transfer_radius >= 0.0) {
            return Err(Error::InvalidParameter(
                "min_separation must exceed twice the transfer radius".into(),
            ));
        }
        if 2.0 * self.margin >= self.width.min(self.height) as f64 - 1.0 {
            return Err(Error::InvalidParameter("margin leaves no room for keypoints".into()));
        }
        self.homography.validate()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Ground-truth keypoints with a polarity per point.
#[derive(Clone, Debug, PartialEq)]
pub struct GtKeypoints<T> {
    pub points: Vec<Point<T>>,
    pub polarity: Vec<Polarity>,
    /// `(height, width)` of the image they live in.
    pub shape: (usize, usize),
}

impl<T: Real> GtKeypoints<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count(&self, polarity: Polarity) -> usize {
        self.polarity.iter().filter(|&&p| p == polarity).count()
    }

    pub fn to_keypoint_set(&self) -> KeypointSet<T> {
        KeypointSet::new(
            self.points.iter().map(|&(x, y)| Keypoint::new(x, y, T::one())).collect(),
            self.shape,
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,score,polarity\n");
        for (&(x, y), p) in self.points.iter().zip(&self.polarity) {
            out.push_str(&format!("{:.6},{:.6},{:.6},{p}\n", x.as_f64(), y.as_f64(), 1.0));
        }
        out
    }

    pub fn from_csv(text: &str, shape: (usize, usize)) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("x,y,score,polarity") {
            return Err(Error::Format("ground-truth CSV header must be x,y,score,polarity".into()));
        }
        let (mut points, mut polarity) = (Vec::new(), Vec::new());
        for line in lines {
            let (nums, pol) = line
                .trim()
                .rsplit_once(',')
                .ok_or_else(|| Error::Format(format!("bad ground-truth row `{line}`")))?;
            let row = parse_csv_rows(&format!("x,y,score\n{nums}\n"), "x,y,score", 3)?;
            points.push((T::lit(row[0][0]), T::lit(row[0][1])));
            polarity.push(pol.parse()?);
        }
        Ok(Self { points, polarity, shape })
    }
}

/// Toy correspondence by dot identity: points within `radius` (Chebyshev)
/// of dot `i` in one view map to the same offset around dot `i` in the other.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTransfer<T> {
    pub a: Vec<Point<T>>,
    pub b: Vec<Point<T>>,
    pub radius: T,
}

fn label_map<T: Real>(from: &[Point<T>], to: &[Point<T>], radius: T, p: Point<T>) -> Option<Point<T>> {
    from.iter().zip(to).find_map(|(&(fx, fy), &(tx, ty))| {
        let (dx, dy) = (p.0 - fx, p.1 - fy);
        (dx.abs() <= radius && dy.abs() <= radius).then_some((tx + dx, ty + dy))
    })
}

impl<T: Real> PointTransfer<T> for LabelTransfer<T> {
    fn forward(&self, p: Point<T>) -> Option<Point<T>> {
        label_map(&self.a, &self.b, self.radius, p)
    }
    fn backward(&self, p: Point<T>) -> Option<Point<T>> {
        label_map(&self.b, &self.a, self.radius, p)
    }
}

/// Ground-truth A→B transfer of a pair.
#[derive(Clone, Debug, PartialEq)]
pub enum PairTransfer<T> {
    Homography(HomographyTransfer<T>),
    Labels(LabelTransfer<T>),
}

impl<T: Real> PointTransfer<T> for PairTransfer<T> {
    fn forward(&self, p: Point<T>) -> Option<Point<T>> {
        match self {
            Self::Homography(h) => h.forward(p),
            Self::Labels(l) => l.forward(p),
        }
    }
    fn backward(&self, p: Point<T>) -> Option<Point<T>> {
        match self {
            Self::Homography(h) => h.backward(p),
            Self::Labels(l) => l.backward(p),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample<T> {
    pub image_a: Grid<T>,
    pub image_b: Grid<T>,
    pub transfer: PairTransfer<T>,
    pub mask_a: Mask,
    pub mask_b: Mask,
    pub gt_a: GtKeypoints<T>,
    pub gt_b: GtKeypoints<T>,
    pub seed: u64,
    pub rotation_k: u8,
    pub negated_b: bool,
}

impl<T: Real> PairSample<T> {
    /// Checks that every covisible ground-truth keypoint of A transfers onto
    /// its counterpart in B within `tol` pixels, and back.
    pub fn self_check(&self, tol: f64) -> Result<()> {
        let tol = T::lit(tol);
        let mut bi = 0;
        for &pa in &self.gt_a.points {
            let Some(q) = self.transfer.forward(pa) else { continue };
            if !crate::geometry::inside(q, self.gt_b.shape) {
                continue;
            }
            let pb = *self.gt_b.points.get(bi).ok_or_else(|| {
                Error::Internal("fewer ground-truth keypoints in B than covisible in A".into())
            })?;
            bi += 1;
            let back = self
                .transfer
                .backward(pb)
                .ok_or_else(|| Error::Internal("ground-truth keypoint of B has no transfer".into()))?;
            let d_fwd = ((q.0 - pb.0).powi(2) + (q.1 - pb.1).powi(2)).sqrt();
            let d_bwd = ((back.0 - pa.0).powi(2) + (back.1 - pa.1).powi(2)).sqrt();
            if d_fwd > tol || d_bwd > tol {
                return Err(Error::Internal(format!(
                    "ground-truth transfer off by {} px",
                    d_fwd.max(d_bwd).as_f64()
                )));
            }
        }
        if bi != self.gt_b.len() {
            return Err(Error::Internal("extra ground-truth keypoints in B".into()));
        }
        Ok(())
    }

    pub fn convert<U: Real>(&self) -> PairSample<U> {
        let pts = |v: &[Point<T>]| v.iter().map(|&(x, y)| (U::lit(x.as_f64()), U::lit(y.as_f64()))).collect();
        let gt = |g: &GtKeypoints<T>| GtKeypoints {
            points: pts(&g.points),
            polarity: g.polarity.clone(),
            shape: g.shape,
        };
        PairSample {
            image_a: self.image_a.convert(),
            image_b: self.image_b.convert(),
            transfer: match &self.transfer {
                PairTransfer::Homography(h) => PairTransfer::Homography(h.convert()),
                PairTransfer::Labels(l) => PairTransfer::Labels(LabelTransfer {
                    a: pts(&l.a),
                    b: pts(&l.b),
                    radius: U::lit(l.radius.as_f64()),
                }),
            },
            mask_a: self.mask_a.clone(),
            mask_b: self.mask_b.clone(),
            gt_a: gt(&self.gt_a),
            gt_b: gt(&self.gt_b),
            seed: self.seed,
            rotation_k: self.rotation_k,
            negated_b: self.negated_b,
        }
    }
}

/// Seed of pair `index` in a run seeded with `seed`.
pub fn pair_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthMode {
    Toy,
    Scenes,
}

impl fmt::Display for SynthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Toy => "toy",
            Self::Scenes => "scenes",
        })
    }
}

impl FromStr for SynthMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "scenes" => Ok(Self::Scenes),
            _ => Err(Error::Config(format!("mode must be toy or scenes, got `{s}`"))),
        }
    }
}

/// Pair `index` of the deterministic stream `(mode, cfg, seed)`.
pub fn generate_pair<T: Real>(mode: SynthMode, cfg: &SceneConfig, seed: u64, index: u64) -> Result<PairSample<T>> {
    let s = pair_seed(seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let mut sample = match mode {
        SynthMode::Toy => gen_toy_pair(&mut rng, cfg)?,
        SynthMode::Scenes => gen_scene_pair(&mut rng, cfg)?,
    };
    sample.seed = s;
    Ok(sample)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Rejection-samples `n` points pairwise at least `sep` apart, restarting the
/// whole layout when a point cannot be placed.
fn place_points<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    (h, w): (usize, usize),
    margin: f64,
    sep: f64,
    integer: bool,
) -> Result<Vec<(f64, f64)>> {
    let (lo_x, hi_x) = (margin, w as f64 - 1.0 - margin);
    let (lo_y, hi_y) = (margin, h as f64 - 1.0 - margin);
    let mut best = 0;
    for _ in 0..LAYOUT_RESTARTS {
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(n);
        'point: for _ in 0..n {
            for _ in 0..PLACEMENT_TRIES {
                let (x, y) = if integer {
                    (
                        rng.gen_range(lo_x.ceil() as i64..=hi_x.floor() as i64) as f64,
                        rng.gen_range(lo_y.ceil() as i64..=hi_y.floor() as i64) as f64,
                    )
                } else {
                    (uniform(rng, lo_x, hi_x), uniform(rng, lo_y, hi_y))
                };
                if pts.iter().all(|&(px, py)| (px - x).hypot(py - y) >= sep) {
                    pts.push((x, y));
                    continue 'point;
                }
            }
            break;
        }
        if pts.len() == n {
            return Ok(pts);
        }
        best = best.max(pts.len());
    }
    Err(Error::Placement(format!(
        "placed at most {best} of {n} keypoints in {LAYOUT_RESTARTS} attempts"
    )))
}

struct ToyLayout {
    a: Vec<(f64, f64)>,
    b: Vec<(f64, f64)>,
    polarity: Vec<Polarity>,
}

fn toy_layout<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> Result<ToyLayout> {
    cfg.validate()?;
    let n = cfg.num_light + cfg.num_dark;
    let a = place_points(rng, n, cfg.shape(), cfg.margin, cfg.min_separation, true)?;
    let b = place_points(rng, n, cfg.shape(), cfg.margin, cfg.min_separation, true)?;
    let polarity = (0..n)
        .map(|i| if i < cfg.num_light { Polarity::Light } else { Polarity::Dark })
        .collect();
    Ok(ToyLayout { a, b, polarity })
}

fn render_dots(cfg: &SceneConfig, pts: &[(f64, f64)], polarity: &[Polarity]) -> Grid<f64> {
    let mut img = Grid::filled(cfg.width, cfg.height, cfg.background_gray);
    for (&(x, y), p) in pts.iter().zip(polarity) {
        let v = if *p == Polarity::Light { 1.0 } else { 0.0 };
        img.set(x as usize, y as usize, v);
    }
    img
}

fn gt<T: Real>(pts: &[(f64, f64)], polarity: Vec<Polarity>, shape: (usize, usize)) -> GtKeypoints<T> {
    GtKeypoints {
        points: pts.iter().map(|&(x, y)| (T::lit(x), T::lit(y))).collect(),
        polarity,
        shape,
    }
}

/// Toy pair: B is an independent re-layout of the same labeled dots.
pub fn gen_toy_pair<T: Real, R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> Result<PairSample<T>> {
    let layout = toy_layout(rng, cfg)?;
    let image_a = render_dots(cfg, &layout.a, &layout.polarity);
    let image_b = render_dots(cfg, &layout.b, &layout.polarity);
    let gt_a = gt::<T>(&layout.a, layout.polarity.clone(), cfg.shape());
    let gt_b = gt::<T>(&layout.b, layout.polarity, cfg.shape());
    let transfer = LabelTransfer {
        a: gt_a.points.clone(),
        b: gt_b.points.clone(),
        radius: T::lit(cfg.transfer_radius),
    };
    let mask_a = transfer_mask(&transfer, cfg.shape(), cfg.shape());
    let mask_b = transfer_mask(&Inverted(&transfer), cfg.shape(), cfg.shape());
    let sample = PairSample {
        image_a: image_a.convert(),
        image_b: image_b.convert(),
        transfer: PairTransfer::Labels(transfer),
        mask_a,
        mask_b,
        gt_a,
        gt_b,
        seed: 0,
        rotation_k: 0,
        negated_b: false,
    };
    sample.self_check(1e-6)?;
    Ok(sample)
}

fn translation(tx: f64, ty: f64) -> [[f64; 3]; 3] {
    [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]
}

/// Random homography of the unit square: perspective jitter, scale and
/// rotation about the center, then a translation. At least 40 % of the unit
/// square stays inside it after the mapping.
pub fn sample_homography<R: Rng + ?Sized>(rng: &mut R, magnitude: &HomographyMagnitude) -> Result<HomographyTransfer<f64>> {
    magnitude.validate()?;
    let m = magnitude;
    for _ in 0..HOMOGRAPHY_TRIES {
        let px = uniform(rng, -m.perspective_jitter, m.perspective_jitter);
        let py = uniform(rng, -m.perspective_jitter, m.perspective_jitter);
        let s = uniform(rng, m.scale_range.0, m.scale_range.1);
        let theta = uniform(rng, -m.max_rotation, m.max_rotation);
        let tx = uniform(rng, -m.max_translation, m.max_translation);
        let ty = uniform(rng, -m.max_translation, m.max_translation);
        let (c, sn) = (theta.cos(), theta.sin());
        let rs = [[s * c, -s * sn, 0.0], [s * sn, s * c, 0.0], [0.0, 0.0, 1.0]];
        let persp = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]];
        let centered = |mat: &[[f64; 3]; 3]| matmul3(&matmul3(&translation(0.5, 0.5), mat), &translation(-0.5, -0.5));
        let h = matmul3(
            &translation(tx, ty),
            &matmul3(&centered(&rs), &centered(&persp)),
        );
        let Ok(t) = HomographyTransfer::new(h) else { continue };
        if unit_covisibility(&t) >= MIN_COVISIBLE {
            return Ok(t);
        }
    }
    Err(Error::DegenerateTransfer(format!(
        "no acceptable homography after {HOMOGRAPHY_TRIES} draws"
    )))
}

/// Fraction of a 21×21 lattice over the unit square that stays inside it.
pub fn unit_covisibility(t: &HomographyTransfer<f64>) -> f64 {
    let n = 21;
    let mut hit = 0;
    for i in 0..n {
        for j in 0..n {
            let p = (i as f64 / (n - 1) as f64, j as f64 / (n - 1) as f64);
            if let Some((x, y)) = t.forward(p) {
                if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
                    hit += 1;
                }
            }
        }
    }
    hit as f64 / (n * n) as f64
}

/// Unit-square homography expressed in pixel coordinates of a `(h, w)` image.
fn to_pixels(t: &HomographyTransfer<f64>, (h, w): (usize, usize)) -> Result<HomographyTransfer<f64>> {
    let s = [[(w - 1) as f64, 0.0, 0.0], [0.0, (h - 1) as f64, 0.0], [0.0, 0.0, 1.0]];
    let s_inv = [[1.0 / (w - 1) as f64, 0.0, 0.0], [0.0, 1.0 / (h - 1) as f64, 0.0], [0.0, 0.0, 1.0]];
    HomographyTransfer::new(matmul3(&s, &matmul3(t.matrix(), &s_inv)))
}

/// `k` counter-clockwise quarter turns of a `(h, w)` image, as a map from
/// source pixels to pixels of the rotated image.
pub fn rotation_homography(k: u8, (h, w): (usize, usize)) -> HomographyTransfer<f64> {
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    let m = match k % 4 {
        0 => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        1 => [[0.0, 1.0, 0.0], [-1.0, 0.0, wf], [0.0, 0.0, 1.0]],
        2 => [[-1.0, 0.0, wf], [0.0, -1.0, hf], [0.0, 0.0, 1.0]],
        _ => [[0.0, -1.0, hf], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
    };
    HomographyTransfer::new(m).expect("rotations are invertible")
}

struct Structure {
    center: (f64, f64),
    shape: Shape,
    polarity: Polarity,
    angle: f64,
}

impl Structure {
    /// Coverage in `[0, 1]` at a point of the scene plane.
    fn coverage(&self, (x, y): (f64, f64)) -> f64 {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        if dx.abs() > 6.0 || dy.abs() > 6.0 {
            return 0.0;
        }
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (a, b) = (c * dx + s * dy, -s * dx + c * dy);
        let bar = |along: f64, across: f64, lo: f64, hi: f64| along >= lo && along <= hi && across.abs() <= 0.75;
        let inside = match self.shape {
            Shape::Dot => a * a + b * b <= 1.2 * 1.2,
            Shape::Blob => return (-(a * a + b * b) / (2.0 * 1.3 * 1.3)).exp(),
            Shape::Cross => bar(a, b, -3.5, 3.5) || bar(b, a, -3.5, 3.5),
            Shape::Corner => bar(a, b, -0.75, 4.0) || bar(b, a, -0.75, 4.0),
        };
        if inside {
            1.0
        } else {
            0.0
        }
    }
}

struct Scene {
    structures: Vec<Structure>,
    background: f64,
    texture: [f64; 4],
}

impl Scene {
    fn intensity(&self, p: (f64, f64)) -> f64 {
        let [fx, fy, phx, phy] = self.texture;
        let tau = std::f64::consts::TAU;
        let mut v = self.background + TEXTURE_AMPLITUDE * (tau * (fx * p.0 + phx)).sin() * (tau * (fy * p.1 + phy)).sin();
        for st in &self.structures {
            let c = st.coverage(p);
            if c > 0.0 {
                let target = if st.polarity == Polarity::Light { LIGHT_LEVEL } else { DARK_LEVEL };
                v = v * (1.0 - c) + target * c;
                break;
            }
        }
        v
    }

    /// Supersampled rendering of the scene as seen through `to_scene`, which
    /// maps output pixel coordinates onto the scene plane.
    fn render(&self, (h, w): (usize, usize), to_scene: impl Fn((f64, f64)) -> Option<(f64, f64)>) -> Grid<f64> {
        let n = SUPERSAMPLE;
        Grid::from_fn(w, h, |x, y| {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let p = (
                        x as f64 + (j as f64 + 0.5) / n as f64 - 0.5,
                        y as f64 + (i as f64 + 0.5) / n as f64 - 0.5,
                    );
                    acc += to_scene(p).map_or(self.background, |q| self.intensity(q));
                }
            }
            acc / (n * n) as f64
        })
    }
}

fn add_noise<R: Rng + ?Sized>(rng: &mut R, img: &mut Grid<f64>, sigma: f64) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    for v in img.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(())
}

/// Planar scene pair with a homography ground truth.
pub fn gen_scene_pair<T: Real, R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> Result<PairSample<T>> {
    cfg.validate()?;
    let shape_a = cfg.shape();
    let n = cfg.num_light + cfg.num_dark;
    let centers = place_points(rng, n, shape_a, cfg.margin, cfg.min_separation, false)?;
    let structures: Vec<Structure> = centers
        .iter()
        .enumerate()
        .map(|(i, &center)| Structure {
            center,
            shape: *cfg.shape_palette.choose(rng).expect("palette validated nonempty"),
            polarity: if i < cfg.num_light { Polarity::Light } else { Polarity::Dark },
            angle: uniform(rng, 0.0, std::f64::consts::TAU),
        })
        .collect();
    let scene = Scene {
        texture: [
            uniform(rng, 0.5, 1.5) / cfg.width as f64,
            uniform(rng, 0.5, 1.5) / cfg.height as f64,
            rng.gen(),
            rng.gen(),
        ],
        background: cfg.background_gray,
        structures,
    };

    let warp = to_pixels(&sample_homography(rng, &cfg.homography)?, shape_a)?;
    let k = match cfg.rotation_aug {
        RotationAug::Off => 0,
        RotationAug::Random => rng.gen_range(0..4u8),
        RotationAug::Fixed(k) => k,
    };
    let transfer = rotation_homography(k, shape_a).compose(&warp)?;
    let shape_b = if k % 2 == 1 { (shape_a.1, shape_a.0) } else { shape_a };

    let mut image_a = scene.render(shape_a, Some);
    let mut image_b = scene.render(shape_b, |p| transfer.backward(p));
    add_noise(rng, &mut image_a, cfg.noise_sigma)?;
    add_noise(rng, &mut image_b, cfg.noise_sigma)?;
    let negated_b = cfg.negation_aug == NegationAug::Rgb;
    if negated_b {
        image_b = image_b.map(|&v| 1.0 - v);
    }

    let polarity: Vec<Polarity> = scene.structures.iter().map(|s| s.polarity).collect();
    let (mut pts_b, mut pol_b) = (Vec::new(), Vec::new());
    for (&c, &p) in centers.iter().zip(&polarity) {
        if let Some(q) = transfer.forward(c) {
            if crate::geometry::inside(q, shape_b) {
                pts_b.push(q);
                pol_b.push(if negated_b { p.flipped() } else { p });
            }
        }
    }
    let transfer_t: HomographyTransfer<T> = transfer.convert();
    let sample = PairSample {
        image_a: image_a.convert(),
        image_b: image_b.convert(),
        mask_a: transfer_mask(&transfer_t, shape_a, shape_b),
        mask_b: transfer_mask(&Inverted(&transfer_t), shape_b, shape_a),
        transfer: PairTransfer::Homography(transfer_t),
        gt_a: gt(&centers, polarity, shape_a),
        gt_b: gt(&pts_b, pol_b, shape_b),
        seed: 0,
        rotation_k: k,
        negated_b,
    };
    sample.self_check(1e-6)?;
    Ok(sample)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Half the budget on random light dots, half on random dark dots.
    Mixed,
    LightOnly,
    DarkOnly,
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" | "mixed-5-5" => Ok(Self::Mixed),
            "light-only" => Ok(Self::LightOnly),
            "dark-only" => Ok(Self::DarkOnly),
            _ => Err(Error::Config(format!("unknown strategy `{s}`"))),
        }
    }
}

/// Monte Carlo estimate of the toy reward collected by a fixed selection
/// strategy with `budget` keypoints per image: one unit per corresponding dot
/// pair selected in both images.
pub fn expected_strategy_reward<R: Rng + ?Sized>(
    strategy: Strategy,
    cfg: &SceneConfig,
    budget: usize,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let light: Vec<usize> = (0..cfg.num_light).collect();
    let dark: Vec<usize> = (cfg.num_light..cfg.num_light + cfg.num_dark).collect();
    let pick = |rng: &mut R| -> Vec<usize> {
        let (nl, nd) = match strategy {
            Strategy::Mixed => (budget / 2, budget - budget / 2),
            Strategy::LightOnly => (budget, 0),
            Strategy::DarkOnly => (0, budget),
        };
        let mut out: Vec<usize> = light.choose_multiple(rng, nl.min(light.len())).copied().collect();
        out.extend(dark.choose_multiple(rng, nd.min(dark.len())));
        out
    };
    let threshold = 0.5;
    let mut total = 0.0;
    for _ in 0..trials {
        let layout = toy_layout(rng, cfg)?;
        let sel_a = pick(rng);
        let sel_b = pick(rng);
        let set = |pts: &[(f64, f64)], sel: &[usize]| {
            KeypointSet::new(sel.iter().map(|&i| Keypoint::new(pts[i].0, pts[i].1, 1.0)).collect(), cfg.shape())
        };
        let transfer = LabelTransfer {
            a: layout.a.clone(),
            b: layout.b.clone(),
            radius: cfg.transfer_radius,
        };
        let (ab, _) = match_mutual_nn(&set(&layout.a, &sel_a), &set(&layout.b, &sel_b), &transfer, threshold)?;
        total += ab.pairs.iter().map(|m| reward_threshold(m.distance, threshold)).sum::<f64>();
    }
    Ok(total / trials as f64)
}

/// Binary 8-bit PGM (P5).
pub fn encode_pgm(img: &Grid<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Grid<u8>> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Format("only binary P5 PGM is supported".into()));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field `{s}`")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format("only 8-bit PGM is supported".into()));
    }
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Format("truncated PGM data".into()))?;
    Grid::from_vec(w, h, data.to_vec())
}

pub fn quantize<T: Real>(img: &Grid<T>) -> Grid<u8> {
    img.map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn write_pgm<T: Real>(path: impl AsRef<Path>, img: &Grid<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(&quantize(img))).map_err(|e| Error::io(path, e))
}

pub fn read_pgm<T: Real>(path: impl AsRef<Path>) -> Result<Grid<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_pgm(&bytes)?.map(|&v| T::lit(v as f64 / 255.0)))
}

fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    std::fs::write(path, encode_pgm(&mask.map(|&b| if b { 255 } else { 0 }))).map_err(|e| Error::io(path, e))
}

fn read_mask(path: &Path) -> Result<Mask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_pgm(&bytes)?.map(|&v| v >= 128))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Directory name of pair `index`.
pub fn pair_dir_name(index: usize) -> String {
    format!("pair_{index:06}")
}

/// Writes one pair directory. `meta` lines are appended after the pair's own
/// keys.
pub fn write_pair<T: Real>(dir: impl AsRef<Path>, sample: &PairSample<T>, meta: &[(String, String)]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pgm(dir.join("a.pgm"), &sample.image_a)?;
    write_pgm(dir.join("b.pgm"), &sample.image_b)?;
    write_mask(&dir.join("mask_a.pgm"), &sample.mask_a)?;
    write_mask(&dir.join("mask_b.pgm"), &sample.mask_b)?;
    write_text(&dir.join("gt_a.csv"), &sample.gt_a.to_csv())?;
    write_text(&dir.join("gt_b.csv"), &sample.gt_b.to_csv())?;
    let (h, kind, radius) = match &sample.transfer {
        PairTransfer::Homography(h) => (h.convert::<f64>(), "homography", 0.0),
        PairTransfer::Labels(l) => (HomographyTransfer::identity(), "labels", l.radius.as_f64()),
    };
    h.write(dir.join("h.txt"))?;
    let mut text = format!(
        "seed={}\ntransfer={kind}\ntransfer_radius={radius}\nrotation_k={}\nnegated_b={}\n",
        sample.seed, sample.rotation_k, sample.negated_b
    );
    for (k, v) in meta {
        text.push_str(&format!("{k}={v}\n"));
    }
    write_text(&dir.join("meta.txt"), &text)
}

/// `key=value` lines of a meta file.
pub fn read_meta(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Format(format!("bad meta line `{l}`")))
        })
        .collect()
}

/// Loads a pair directory written by [`write_pair`]. Images come back
/// quantized to 8 bits.
pub fn read_pair(dir: impl AsRef<Path>) -> Result<PairSample<f64>> {
    let dir = dir.as_ref();
    let meta = read_meta(dir.join("meta.txt"))?;
    let get = |key: &str| {
        meta.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("meta.txt lacks `{key}`")))
    };
    let parse_err = |key: &str| Error::Format(format!("bad `{key}` in meta.txt"));
    let image_a: Grid<f64> = read_pgm(dir.join("a.pgm"))?;
    let image_b: Grid<f64> = read_pgm(dir.join("b.pgm"))?;
    let gt_text = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let gt_a = GtKeypoints::from_csv(&gt_text("gt_a.csv")?, image_a.shape())?;
    let gt_b = GtKeypoints::from_csv(&gt_text("gt_b.csv")?, image_b.shape())?;
    let transfer = match get("transfer")? {
        "homography" => PairTransfer::Homography(HomographyTransfer::read(dir.join("h.txt"))?),
        "labels" => PairTransfer::Labels(LabelTransfer {
            a: gt_a.points.clone(),
            b: gt_b.points.clone(),
            radius: get("transfer_radius")?.parse().map_err(|_| parse_err("transfer_radius"))?,
        }),
        other => return Err(Error::Format(format!("unknown transfer kind `{other}`"))),
    };
    Ok(PairSample {
        mask_a: read_mask(&dir.join("mask_a.pgm"))?,
        mask_b: read_mask(&dir.join("mask_b.pgm"))?,
        image_a,
        image_b,
        transfer,
        gt_a,
        gt_b,
        seed: get("seed")?.parse().map_err(|_| parse_err("seed"))?,
        rotation_k: get("rotation_k")?.parse().map_err(|_| parse_err("rotation_k"))?,
        negated_b: get("negated_b")?.parse().map_err(|_| parse_err("negated_b"))?,
    })
}

/// Sorted pair directories under a dataset root.
pub fn list_pairs(root: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let root = root.as_ref();
    let mut dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("pair_"))
        })
        .collect();
    dirs.sort();
    Ok(dirs)
}
