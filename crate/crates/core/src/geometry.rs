//! Ground-truth point transfer between two views, covisibility masks and
//! nearest-neighbour match construction.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::sampler::KeypointSet;
use crate::scalar::Real;

pub type Point<T> = (T, T);

/// Maps points of view A into view B and back. `None` marks points without
/// a valid correspondence.
pub trait PointTransfer<T: Real> {
    fn forward(&self, p: Point<T>) -> Option<Point<T>>;
    fn backward(&self, p: Point<T>) -> Option<Point<T>>;
}

/// Planar projective transfer, row-major, scaled so that `h[2][2] = 1`
/// whenever that entry is nonzero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomographyTransfer<T> {
    h: [[T; 3]; 3],
    inv: [[T; 3]; 3],
}

fn det3<T: Real>(m: &[[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inverse3<T: Real>(m: &[[T; 3]; 3]) -> Option<[[T; 3]; 3]> {
    let det = det3(m);
    let scale = m
        .iter()
        .flatten()
        .fold(T::zero(), |a, &b| a.max(b.abs()));
    if !det.is_finite() || scale == T::zero() || det.abs() <= T::lit(1e-12) * scale.powi(3) {
        return None;
    }
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
        [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
        [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
    ];
    Some(adj.map(|row| row.map(|v| v / det)))
}

fn normalized<T: Real>(m: [[T; 3]; 3]) -> [[T; 3]; 3] {
    let s = m[2][2];
    if s != T::zero() {
        m.map(|row| row.map(|v| v / s))
    } else {
        m
    }
}

pub(crate) fn matmul3<T: Real>(a: &[[T; 3]; 3], b: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn project<T: Real>(m: &[[T; 3]; 3], (x, y): Point<T>) -> Option<Point<T>> {
    let xp = m[0][0] * x + m[0][1] * y + m[0][2];
    let yp = m[1][0] * x + m[1][1] * y + m[1][2];
    let wp = m[2][0] * x + m[2][1] * y + m[2][2];
    if wp.abs() < T::lit(1e-9) {
        return None;
    }
    let (u, v) = (xp / wp, yp / wp);
    (u.is_finite() && v.is_finite()).then_some((u, v))
}

impl<T: Real> HomographyTransfer<T> {
    pub fn new(h: [[T; 3]; 3]) -> Result<Self> {
        if h.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateTransfer("non-finite homography".into()));
        }
        let h = normalized(h);
        let inv = inverse3(&h)
            .ok_or_else(|| Error::DegenerateTransfer("homography is singular".into()))?;
        Ok(Self {
            h,
            inv: normalized(inv),
        })
    }

    pub fn identity() -> Self {
        let i = [
            [T::one(), T::zero(), T::zero()],
            [T::zero(), T::one(), T::zero()],
            [T::zero(), T::zero(), T::one()],
        ];
        Self { h: i, inv: i }
    }

    pub fn translation(tx: T, ty: T) -> Self {
        let mut m = Self::identity().h;
        m[0][2] = tx;
        m[1][2] = ty;
        Self::new(m).expect("translations are invertible")
    }

    pub fn matrix(&self) -> &[[T; 3]; 3] {
        &self.h
    }

    pub fn inverse(&self) -> Self {
        Self {
            h: self.inv,
            inv: self.h,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        Self::new(matmul3(&self.h, &other.h))
    }

    pub fn convert<U: Real>(&self) -> HomographyTransfer<U> {
        let c = |m: &[[T; 3]; 3]| m.map(|r| r.map(|v| U::lit(v.as_f64())));
        HomographyTransfer {
            h: c(&self.h),
            inv: c(&self.inv),
        }
    }

    /// Nine whitespace-separated values, row-major.
    pub fn to_text(&self) -> String {
        self.h
            .iter()
            .map(|row| {
                row.iter()
                    .map(|v| format!("{:.17e}", v.as_f64()))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad homography entry `{t}`")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 9 {
            return Err(Error::Format(format!(
                "homography needs 9 values, found {}",
                vals.len()
            )));
        }
        let m = [
            [vals[0], vals[1], vals[2]],
            [vals[3], vals[4], vals[5]],
            [vals[6], vals[7], vals[8]],
        ];
        Self::new(m.map(|r| r.map(T::lit)))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

impl<T: Real> PointTransfer<T> for HomographyTransfer<T> {
    fn forward(&self, p: Point<T>) -> Option<Point<T>> {
        project(&self.h, p)
    }

    fn backward(&self, p: Point<T>) -> Option<Point<T>> {
        project(&self.inv, p)
    }
}

/// Projective application `[x'; y'; w'] = H [x; y; 1]`.
pub fn apply_transfer<T: Real>(t: &HomographyTransfer<T>, pt: Point<T>) -> Option<Point<T>> {
    t.forward(pt)
}

/// Swaps the roles of the two views.
pub struct Inverted<'a, P: ?Sized>(pub &'a P);

impl<T: Real, P: PointTransfer<T> + ?Sized> PointTransfer<T> for Inverted<'_, P> {
    fn forward(&self, p: Point<T>) -> Option<Point<T>> {
        self.0.backward(p)
    }
    fn backward(&self, p: Point<T>) -> Option<Point<T>> {
        self.0.forward(p)
    }
}

#[inline]
pub(crate) fn inside<T: Real>((x, y): Point<T>, (h, w): (usize, usize)) -> bool {
    x >= T::zero()
        && y >= T::zero()
        && x <= T::from_usize_lossy(w - 1)
        && y <= T::from_usize_lossy(h - 1)
}

/// Source pixels whose transfer lands inside the destination image.
pub fn covisibility_mask<T: Real>(
    t: &HomographyTransfer<T>,
    shape_src: (usize, usize),
    shape_dst: (usize, usize),
) -> Result<Mask> {
    if inverse3(&t.h).is_none() {
        return Err(Error::DegenerateTransfer("homography is singular".into()));
    }
    Ok(transfer_mask(t, shape_src, shape_dst))
}

pub(crate) fn transfer_mask<T: Real, P: PointTransfer<T> + ?Sized>(
    t: &P,
    (h, w): (usize, usize),
    shape_dst: (usize, usize),
) -> Mask {
    Mask::from_fn(w, h, |x, y| {
        t.forward((T::from_usize_lossy(x), T::from_usize_lossy(y)))
            .is_some_and(|q| inside(q, shape_dst))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchDirection {
    AToB,
    BToA,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match<T> {
    pub a: usize,
    pub b: usize,
    /// Distance between the transferred query point and its match, measured in
    /// the target view of the direction.
    pub distance: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet<T> {
    pub pairs: Vec<Match<T>>,
    pub direction: MatchDirection,
}

impl<T> MatchSet<T> {
    pub fn empty(direction: MatchDirection) -> Self {
        Self {
            pairs: Vec::new(),
            direction,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Nearest point by Euclidean distance; ties go to the lowest index.
pub(crate) fn nearest<T: Real>(q: Point<T>, pts: &[Point<T>]) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for (i, &(x, y)) in pts.iter().enumerate() {
        let d2 = (x - q.0) * (x - q.0) + (y - q.1) * (y - q.1);
        if best.map_or(true, |(_, bd)| d2 < bd) {
            best = Some((i, d2));
        }
    }
    best.map(|(i, d2)| (i, d2.sqrt()))
}

/// Nearest neighbour of every transferred query, without mutual filtering or
/// threshold. Entry `i` is `None` when query `i` has no valid transfer.
fn nearest_map<T: Real>(
    queries: &[Point<T>],
    targets: &[Point<T>],
    map: impl Fn(Point<T>) -> Option<Point<T>>,
) -> Vec<Option<(usize, T)>> {
    queries
        .iter()
        .map(|&q| map(q).and_then(|tq| nearest(tq, targets)))
        .collect()
}

/// Mutual nearest-neighbour matching under a ground-truth transfer.
///
/// A→B keeps `(a, b)` when `T(a)` lies inside B, `b` is the nearest B keypoint
/// to `T(a)`, `a` is the nearest A keypoint to `T⁻¹(b)` and
/// `|T(a) − b| ≤ threshold`. B→A is built
/// the same way from the B side, with distances measured in A.
pub fn match_mutual_nn<T: Real, P: PointTransfer<T> + ?Sized>(
    ka: &KeypointSet<T>,
    kb: &KeypointSet<T>,
    t: &P,
    threshold: T,
) -> Result<(MatchSet<T>, MatchSet<T>)> {
    if !(threshold > T::zero()) {
        return Err(Error::InvalidParameter("match threshold must be positive".into()));
    }
    let (pa, pb) = (ka.positions(), kb.positions());
    let a_to_b = nearest_map(&pa, &pb, |p| t.forward(p).filter(|&q| inside(q, kb.source_shape)));
    let b_to_a = nearest_map(&pb, &pa, |p| t.backward(p).filter(|&q| inside(q, ka.source_shape)));
    let mutual = |from: &[Option<(usize, T)>], to: &[Option<(usize, T)>], i: usize| {
        from[i].and_then(|(j, d)| match to[j] {
            Some((back, _)) if back == i && d <= threshold => Some((j, d)),
            _ => None,
        })
    };
    let ab = (0..pa.len())
        .filter_map(|a| mutual(&a_to_b, &b_to_a, a).map(|(b, distance)| Match { a, b, distance }))
        .collect();
    let ba = (0..pb.len())
        .filter_map(|b| mutual(&b_to_a, &a_to_b, b).map(|(a, distance)| Match { a, b, distance }))
        .collect();
    Ok((
        MatchSet {
            pairs: ab,
            direction: MatchDirection::AToB,
        },
        MatchSet {
            pairs: ba,
            direction: MatchDirection::BToA,
        },
    ))
}

/// One-sided nearest-neighbour matching used during training: every keypoint
/// whose transfer lands inside the other image is paired with its nearest neighbour in the other
/// view, whatever the distance.
pub fn match_nearest<T: Real, P: PointTransfer<T> + ?Sized>(
    ka: &KeypointSet<T>,
    kb: &KeypointSet<T>,
    t: &P,
) -> (MatchSet<T>, MatchSet<T>) {
    let (pa, pb) = (ka.positions(), kb.positions());
    let ab = nearest_map(&pa, &pb, |p| t.forward(p).filter(|&q| inside(q, kb.source_shape)))
        .into_iter()
        .enumerate()
        .filter_map(|(a, m)| m.map(|(b, distance)| Match { a, b, distance }))
        .collect();
    let ba = nearest_map(&pb, &pa, |p| t.backward(p).filter(|&q| inside(q, ka.source_shape)))
        .into_iter()
        .enumerate()
        .filter_map(|(b, m)| m.map(|(a, distance)| Match { a, b, distance }))
        .collect();
    (
        MatchSet {
            pairs: ab,
            direction: MatchDirection::AToB,
        },
        MatchSet {
            pairs: ba,
            direction: MatchDirection::BToA,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::Keypoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_h(rng: &mut ChaCha8Rng) -> HomographyTransfer<f64> {
        loop {
            let m = [
                [1.0 + rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-5.0..5.0)],
                [rng.gen_range(-0.2..0.2), 1.0 + rng.gen_range(-0.2..0.2), rng.gen_range(-5.0..5.0)],
                [rng.gen_range(-1e-3..1e-3), rng.gen_range(-1e-3..1e-3), 1.0],
            ];
            if let Ok(h) = HomographyTransfer::new(m) {
                return h;
            }
        }
    }

    fn kps(points: &[(f64, f64)], shape: (usize, usize)) -> KeypointSet<f64> {
        KeypointSet::new(points.iter().map(|&(x, y)| Keypoint::new(x, y, 1.0)).collect(), shape)
    }

    #[test]
    fn identity_and_translation() {
        let i = HomographyTransfer::<f64>::identity();
        assert_eq!(apply_transfer(&i, (3.5, -2.0)), Some((3.5, -2.0)));
        let t = HomographyTransfer::translation(3.0, -2.0);
        assert_eq!(apply_transfer(&t, (10.0, 10.0)), Some((13.0, 8.0)));
    }

    #[test]
    fn projective_application_matches_direct_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let h = random_h(&mut rng);
            let p = (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0));
            let m = h.matrix();
            // Oracle: the three dot products, accumulated with mul_add.
            let dot = |r: usize| m[r][0].mul_add(p.0, m[r][1].mul_add(p.1, m[r][2]));
            let (u, v) = apply_transfer(&h, p).unwrap();
            assert_close!(u, dot(0) / dot(2), 1e-9);
            assert_close!(v, dot(1) / dot(2), 1e-9);
        }
    }

    #[test]
    fn point_at_infinity_is_invalid() {
        let h = HomographyTransfer::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
        assert_eq!(apply_transfer(&h, (-1.0, 5.0)), None);
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let h = random_h(&mut rng);
            let p = (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0));
            if let Some(q) = apply_transfer(&h, p) {
                let back = apply_transfer(&h.inverse(), q).unwrap();
                assert_close!(back.0, p.0, 1e-6);
                assert_close!(back.1, p.1, 1e-6);
            }
        }
    }

    #[test]
    fn singular_homography_is_rejected() {
        let m = [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]];
        assert!(matches!(HomographyTransfer::new(m), Err(Error::DegenerateTransfer(_))));
    }

    #[test]
    fn homography_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_h(&mut rng);
        let back = HomographyTransfer::<f64>::from_text(&h.to_text()).unwrap();
        assert_eq!(back.matrix(), h.matrix());
        assert!(HomographyTransfer::<f64>::from_text("1 2 3").is_err());
    }

    #[test]
    fn covisibility_examples() {
        let i = HomographyTransfer::<f64>::identity();
        assert_eq!(covisibility_mask(&i, (10, 12), (10, 12)).unwrap().count(), 120);
        let t = HomographyTransfer::translation(8.0, 0.0);
        let m = covisibility_mask(&t, (10, 16), (10, 16)).unwrap();
        for y in 0..10 {
            for x in 0..16 {
                assert_eq!(*m.get(x, y), x < 8);
            }
        }
    }

    #[test]
    fn covisibility_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_h(&mut rng);
        let m = covisibility_mask(&h, (20, 24), (18, 30)).unwrap();
        let mm = h.matrix();
        for y in 0..20 {
            for x in 0..24 {
                let (xf, yf) = (x as f64, y as f64);
                let w = mm[2][0] * xf + mm[2][1] * yf + mm[2][2];
                let u = (mm[0][0] * xf + mm[0][1] * yf + mm[0][2]) / w;
                let v = (mm[1][0] * xf + mm[1][1] * yf + mm[1][2]) / w;
                let want = (0.0..=29.0).contains(&u) && (0.0..=17.0).contains(&v);
                assert_eq!(*m.get(x, y), want, "({x},{y})");
            }
        }
    }

    #[test]
    fn exact_transfers_match_perfectly() {
        let h = HomographyTransfer::translation(2.0, 1.0);
        let a = [(3.0, 4.0), (20.0, 10.0), (12.0, 30.0)];
        let b: Vec<_> = a.iter().map(|&(x, y)| (x + 2.0, y + 1.0)).collect();
        let (ab, ba) = match_mutual_nn(&kps(&a, (40, 40)), &kps(&b, (40, 40)), &h, 1.0).unwrap();
        assert_eq!(ab.len(), 3);
        assert_eq!(ba.len(), 3);
        for (i, m) in ab.pairs.iter().enumerate() {
            assert_eq!((m.a, m.b, m.distance), (i, i, 0.0));
        }
    }

    #[test]
    fn equidistant_tie_goes_to_lower_index() {
        let h = HomographyTransfer::<f64>::identity();
        let a = kps(&[(10.0, 10.0)], (20, 20));
        let b = kps(&[(10.0, 10.9), (10.0, 9.1)], (20, 20));
        let (ab, _) = match_mutual_nn(&a, &b, &h, 1.0).unwrap();
        assert_eq!(ab.pairs.len(), 1);
        assert_eq!(ab.pairs[0].b, 0);
    }

    #[test]
    fn empty_sets_give_empty_matches() {
        let h = HomographyTransfer::<f64>::identity();
        let e = KeypointSet::empty((8, 8));
        let (ab, ba) = match_mutual_nn(&e, &e, &h, 1.0).unwrap();
        assert!(ab.is_empty() && ba.is_empty());
    }

    fn mutual_oracle(
        pa: &[(f64, f64)],
        pb: &[(f64, f64)],
        h: &HomographyTransfer<f64>,
        th: f64,
    ) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        // All-pairs distance tables in both frames; transfers leaving the
        // 64×64 frame have no partner.
        let on = |q: (f64, f64)| (0.0..=63.0).contains(&q.0) && (0.0..=63.0).contains(&q.1);
        let fwd: Vec<Option<(f64, f64)>> = pa.iter().map(|&p| h.forward(p).filter(|&q| on(q))).collect();
        let bwd: Vec<Option<(f64, f64)>> = pb.iter().map(|&p| h.backward(p).filter(|&q| on(q))).collect();
        let d = |p: (f64, f64), q: (f64, f64)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
        let argmin = |vals: Vec<f64>| {
            let mut best = 0;
            for (i, &v) in vals.iter().enumerate() {
                if v < vals[best] {
                    best = i;
                }
            }
            best
        };
        let nn_b: Vec<Option<usize>> = fwd
            .iter()
            .map(|f| f.map(|f| argmin(pb.iter().map(|&q| d(f, q)).collect())))
            .collect();
        let nn_a: Vec<Option<usize>> = bwd
            .iter()
            .map(|f| f.map(|f| argmin(pa.iter().map(|&q| d(f, q)).collect())))
            .collect();
        let mut ab = vec![];
        let mut ba = vec![];
        for i in 0..pa.len() {
            for j in 0..pb.len() {
                if nn_b[i] == Some(j) && nn_a[j] == Some(i) {
                    if d(fwd[i].unwrap(), pb[j]) <= th {
                        ab.push((i, j));
                    }
                    if d(bwd[j].unwrap(), pa[i]) <= th {
                        ba.push((i, j));
                    }
                }
            }
        }
        ba.sort_by_key(|&(i, j)| (j, i));
        (ab, ba)
    }

    #[test]
    fn mutual_nn_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let h = random_h(&mut rng);
            let pa: Vec<_> = (0..64).map(|_| (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0))).collect();
            let pb: Vec<_> = pa
                .iter()
                .map(|&p| {
                    let q = h.forward(p).unwrap();
                    (q.0 + rng.gen_range(-3.0..3.0), q.1 + rng.gen_range(-3.0..3.0))
                })
                .collect();
            let (ab, ba) = match_mutual_nn(&kps(&pa, (64, 64)), &kps(&pb, (64, 64)), &h, 2.5).unwrap();
            let (oab, oba) = mutual_oracle(&pa, &pb, &h, 2.5);
            assert_eq!(ab.pairs.iter().map(|m| (m.a, m.b)).collect::<Vec<_>>(), oab);
            assert_eq!(ba.pairs.iter().map(|m| (m.a, m.b)).collect::<Vec<_>>(), oba);
            assert!(ab.pairs.iter().chain(&ba.pairs).all(|m| m.distance <= 2.5));
        }
    }

    #[test]
    fn matching_is_symmetric_under_role_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random_h(&mut rng);
        let pa: Vec<_> = (0..40).map(|_| (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0))).collect();
        let pb: Vec<_> = (0..40).map(|_| (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0))).collect();
        let (ka, kb) = (kps(&pa, (64, 64)), kps(&pb, (64, 64)));
        let (ab, ba) = match_mutual_nn(&ka, &kb, &h, 4.0).unwrap();
        let inv = h.inverse();
        let (sab, sba) = match_mutual_nn(&kb, &ka, &inv, 4.0).unwrap();
        let flip = |s: &MatchSet<f64>| {
            let mut v: Vec<_> = s.pairs.iter().map(|m| (m.b, m.a)).collect();
            v.sort();
            v
        };
        let plain = |s: &MatchSet<f64>| {
            let mut v: Vec<_> = s.pairs.iter().map(|m| (m.a, m.b)).collect();
            v.sort();
            v
        };
        assert_eq!(plain(&ab), flip(&sba));
        assert_eq!(plain(&ba), flip(&sab));
    }

    #[test]
    fn nearest_matching_pairs_every_valid_query() {
        let h = HomographyTransfer::<f64>::identity();
        let a = kps(&[(1.0, 1.0), (10.0, 10.0)], (16, 16));
        let b = kps(&[(10.0, 12.0)], (16, 16));
        let (ab, ba) = match_nearest(&a, &b, &h);
        assert_eq!(ab.len(), 2);
        assert_eq!(ba.len(), 1);
        assert_eq!(ba.pairs[0].a, 1);
        assert_close!(ba.pairs[0].distance, 2.0, 1e-12);
    }
}
