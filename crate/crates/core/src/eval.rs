//! Evaluation: repeatability, homography estimation (normalized DLT and
//! RANSAC), corner end-point error, two-view pose error and AUC.

use nalgebra::{DMatrix, UnitQuaternion, Vector3};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{inside, HomographyTransfer, Point, PointTransfer};
use crate::sampler::KeypointSet;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Repeatability {
    /// `matched / covisible`, `NaN` when nothing in A is covisible.
    pub value: f64,
    pub matched: usize,
    pub covisible: usize,
}

/// Fraction of covisible A keypoints whose transfer lies within `threshold`
/// of a B keypoint, with a greedy one-to-one assignment in order of
/// increasing distance (ties by A index, then B index).
pub fn repeatability<T: Real, P: PointTransfer<T> + ?Sized>(
    ka: &KeypointSet<T>,
    kb: &KeypointSet<T>,
    t: &P,
    threshold: f64,
) -> Result<Repeatability> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidParameter("repeatability threshold must be positive".into()));
    }
    let projected: Vec<(usize, Point<T>)> = ka
        .iter()
        .enumerate()
        .filter_map(|(i, k)| t.forward((k.x, k.y)).filter(|&q| inside(q, kb.source_shape)).map(|q| (i, q)))
        .collect();
    let mut candidates = Vec::new();
    for &(i, (qx, qy)) in &projected {
        for (j, kpb) in kb.iter().enumerate() {
            let d = (qx - kpb.x).as_f64().hypot((qy - kpb.y).as_f64());
            if d <= threshold {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_a = vec![false; ka.len()];
    let mut used_b = vec![false; kb.len()];
    let mut matched = 0;
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            matched += 1;
        }
    }
    let covisible = projected.len();
    Ok(Repeatability {
        value: if covisible == 0 { f64::NAN } else { matched as f64 / covisible as f64 },
        matched,
        covisible,
    })
}

/// Source/destination point pair.
pub type Correspondence = (Point<f64>, Point<f64>);

/// Similarity moving the centroid to the origin with mean norm `√2`.
fn hartley(points: &[Point<f64>]) -> Result<[[f64; 3]; 3]> {
    let n = points.len() as f64;
    let (cx, cy) = points.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.0 / n, sy + p.1 / n));
    let mean = points.iter().map(|p| (p.0 - cx).hypot(p.1 - cy)).sum::<f64>() / n;
    if !(mean > 1e-12) {
        return Err(Error::DegenerateInput("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Ok([[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]])
}

fn apply(m: &[[f64; 3]; 3], (x, y): Point<f64>) -> Point<f64> {
    let w = m[2][0] * x + m[2][1] * y + m[2][2];
    ((m[0][0] * x + m[0][1] * y + m[0][2]) / w, (m[1][0] * x + m[1][1] * y + m[1][2]) / w)
}

fn has_collinear_triple(points: &[Point<f64>]) -> bool {
    let n = points.len();
    let scale = points
        .iter()
        .flat_map(|p| [p.0.abs(), p.1.abs()])
        .fold(1.0, f64::max);
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let (a, b, c) = (points[i], points[j], points[k]);
                let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
                if cross.abs() <= 1e-9 * scale * scale {
                    return true;
                }
            }
        }
    }
    false
}

/// Least-squares homography from `≥ 4` correspondences via the normalized
/// direct linear transform.
pub fn dlt_homography(pairs: &[Correspondence]) -> Result<HomographyTransfer<f64>> {
    let n = pairs.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!("DLT needs 4 correspondences, got {n}")));
    }
    let src: Vec<_> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.1).collect();
    if n == 4 && (has_collinear_triple(&src) || has_collinear_triple(&dst)) {
        return Err(Error::DegenerateInput("three of four points are collinear".into()));
    }
    let (ts, td) = (hartley(&src)?, hartley(&dst)?);
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (&s, &d)) in src.iter().zip(&dst).enumerate() {
        let (x, y) = apply(&ts, s);
        let (u, v) = apply(&td, d);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Numeric("SVD failed".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, second) = (order[0], order[1]);
    if sv[second] <= 1e-10 * sv[order[sv.len() - 1]] {
        return Err(Error::DegenerateInput("correspondences do not determine a homography".into()));
    }
    let h = v_t.row(smallest);
    let hn = [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], h[8]]];
    let td_inv = HomographyTransfer::new(td)?.inverse();
    let m = crate::geometry::matmul3(td_inv.matrix(), &crate::geometry::matmul3(&hn, &ts));
    HomographyTransfer::new(m).map_err(|_| Error::DegenerateInput("estimated homography is singular".into()))
}

/// Mean of the forward and backward transfer distances, infinite when either
/// projection is undefined.
pub fn symmetric_transfer_error(h: &HomographyTransfer<f64>, (a, b): Correspondence) -> f64 {
    match (h.forward(a), h.backward(b)) {
        (Some(fa), Some(bb)) => 0.5 * ((fa.0 - b.0).hypot(fa.1 - b.1) + (bb.0 - a.0).hypot(bb.1 - a.1)),
        _ => f64::INFINITY,
    }
}

fn score(h: &HomographyTransfer<f64>, matches: &[Correspondence], thr: f64) -> (usize, f64, Vec<bool>) {
    let mut count = 0;
    let mut cost = 0.0;
    let flags = matches
        .iter()
        .map(|&m| {
            let e = symmetric_transfer_error(h, m);
            let inlier = e <= thr;
            if inlier {
                count += 1;
                cost += e;
            }
            inlier
        })
        .collect();
    (count, cost, flags)
}

/// Four-point RANSAC maximizing the inlier count (ties by lower summed
/// inlier error), followed by a DLT refit on the inliers. The refit is kept
/// only if it does not lose inliers.
pub fn ransac_homography<R: Rng + ?Sized>(
    matches: &[Correspondence],
    inlier_threshold: f64,
    iterations: usize,
    rng: &mut R,
) -> Result<(HomographyTransfer<f64>, Vec<bool>)> {
    if matches.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "RANSAC needs 4 matches, got {}",
            matches.len()
        )));
    }
    if !(inlier_threshold > 0.0) {
        return Err(Error::InvalidParameter("inlier threshold must be positive".into()));
    }
    let mut best: Option<(HomographyTransfer<f64>, usize, f64, Vec<bool>)> = None;
    for _ in 0..iterations {
        let idx = sample(rng, matches.len(), 4);
        let subset: Vec<_> = idx.iter().map(|i| matches[i]).collect();
        let Ok(h) = dlt_homography(&subset) else { continue };
        let (count, cost, flags) = score(&h, matches, inlier_threshold);
        if best.as_ref().map_or(true, |b| count > b.1 || (count == b.1 && cost < b.2)) {
            best = Some((h, count, cost, flags));
        }
    }
    let (h, count, cost, flags) =
        best.ok_or_else(|| Error::DegenerateInput("every RANSAC sample was degenerate".into()))?;
    let inliers: Vec<_> = matches.iter().zip(&flags).filter(|(_, &f)| f).map(|(&m, _)| m).collect();
    if let Ok(refit) = dlt_homography(&inliers) {
        let (rc, rcost, rflags) = score(&refit, matches, inlier_threshold);
        if rc > count || (rc == count && rcost <= cost) {
            return Ok((refit, rflags));
        }
    }
    Ok((h, flags))
}

/// Mean corner displacement between two homographies of a `(height, width)`
/// image, scaled by `480 / min(height, width)`.
pub fn corner_epe(h_hat: &HomographyTransfer<f64>, h_gt: &HomographyTransfer<f64>, (h, w): (usize, usize)) -> f64 {
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    let corners = [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)];
    let mut total = 0.0;
    for c in corners {
        match (h_hat.forward(c), h_gt.forward(c)) {
            (Some(a), Some(b)) if a.0.is_finite() && a.1.is_finite() && b.0.is_finite() && b.1.is_finite() => {
                total += (a.0 - b.0).hypot(a.1 - b.1)
            }
            _ => return f64::INFINITY,
        }
    }
    total / 4.0 * 480.0 / h.min(w) as f64
}

/// `max(rotation angle, translation direction angle)` in degrees; the
/// translation angle ignores sign, so it lies in `[0°, 90°]`. Quaternions are
/// `[w, x, y, z]`.
pub fn pose_error(q_hat: [f64; 4], t_hat: [f64; 3], q_gt: [f64; 4], t_gt: [f64; 3]) -> Result<f64> {
    let quat = |q: [f64; 4]| {
        let q = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        if !(q.norm() > 1e-12) {
            return Err(Error::InvalidInput("zero quaternion".into()));
        }
        Ok(UnitQuaternion::from_quaternion(q))
    };
    let (ra, rb) = (quat(q_hat)?, quat(q_gt)?);
    let rot = ra.angle_to(&rb).to_degrees();
    let (ta, tb) = (Vector3::from(t_hat), Vector3::from(t_gt));
    let (na, nb) = (ta.norm(), tb.norm());
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::UndefinedTranslation("zero translation vector".into()));
    }
    let cos = (ta.dot(&tb) / (na * nb)).abs().min(1.0);
    Ok(rot.max(cos.acos().to_degrees()))
}

/// Errors of a set of evaluation pairs with the AUC threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorCurve {
    pub errors: Vec<f64>,
    pub threshold: f64,
}

impl ErrorCurve {
    pub fn auc(&self) -> Result<f64> {
        auc(&self.errors, self.threshold)
    }
}

/// Normalized area under the cumulative accuracy curve up to `threshold`:
/// `mean(max(0, 1 − e/threshold))`. Non-finite errors count as misses.
pub fn auc(errors: &[f64], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidParameter("AUC threshold must be positive".into()));
    }
    if errors.is_empty() {
        return Err(Error::InsufficientData("AUC of an empty error list".into()));
    }
    if errors.iter().any(|&e| e < 0.0) {
        return Err(Error::InvalidInput("errors must be nonnegative".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sum: f64 = sorted
        .iter()
        .map(|&e| if e.is_finite() { (1.0 - e / threshold).max(0.0) } else { 0.0 })
        .sum();
    Ok(sum / errors.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::Keypoint;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kps(pts: &[(f64, f64)], shape: (usize, usize)) -> KeypointSet<f64> {
        KeypointSet::new(pts.iter().map(|&(x, y)| Keypoint::new(x, y, 1.0)).collect(), shape)
    }

    fn random_h(rng: &mut ChaCha8Rng) -> HomographyTransfer<f64> {
        loop {
            let m = [
                [rng.gen_range(0.8..1.2), rng.gen_range(-0.2..0.2), rng.gen_range(-10.0..10.0)],
                [rng.gen_range(-0.2..0.2), rng.gen_range(0.8..1.2), rng.gen_range(-10.0..10.0)],
                [rng.gen_range(-1e-3..1e-3), rng.gen_range(-1e-3..1e-3), 1.0],
            ];
            if let Ok(h) = HomographyTransfer::new(m) {
                return h;
            }
        }
    }

    #[test]
    fn repeatability_examples() {
        let t = HomographyTransfer::translation(2.0, 1.0);
        let a = kps(&[(5.0, 5.0), (10.0, 3.0), (40.0, 40.0)], (50, 50));
        let b = kps(&[(7.0, 6.0), (12.0, 4.0), (42.0, 41.0)], (50, 50));
        assert_eq!(repeatability(&a, &b, &t, 0.5).unwrap().value, 1.0);
        assert_eq!(repeatability(&a, &kps(&[], (50, 50)), &t, 0.5).unwrap().value, 0.0);
        let far = HomographyTransfer::translation(500.0, 0.0);
        let r = repeatability(&a, &b, &far, 0.5).unwrap();
        assert!(r.value.is_nan() && r.covisible == 0);
    }

    fn exhaustive_greedy(q: &[(f64, f64)], b: &[(f64, f64)], thr: f64) -> usize {
        let mut used_a = vec![false; q.len()];
        let mut used_b = vec![false; b.len()];
        let mut count = 0;
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for (i, p) in q.iter().enumerate() {
                for (j, r) in b.iter().enumerate() {
                    let d = (p.0 - r.0).hypot(p.1 - r.1);
                    if !used_a[i] && !used_b[j] && d <= thr && best.map_or(true, |(bd, _, _)| d < bd) {
                        best = Some((d, i, j));
                    }
                }
            }
            match best {
                Some((_, i, j)) => {
                    used_a[i] = true;
                    used_b[j] = true;
                    count += 1;
                }
                None => return count,
            }
        }
    }

    #[test]
    fn repeatability_matches_greedy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let pa: Vec<_> = (0..15).map(|_| (rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0))).collect();
            let pb: Vec<_> = (0..15).map(|_| (rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0))).collect();
            let t = HomographyTransfer::translation(0.5, -0.5);
            let r = repeatability(&kps(&pa, (30, 30)), &kps(&pb, (30, 30)), &t, 4.0).unwrap();
            let q: Vec<_> = pa
                .iter()
                .map(|&p| t.forward(p).unwrap())
                .filter(|&p| inside(p, (30, 30)))
                .collect();
            assert_eq!(r.matched, exhaustive_greedy(&q, &pb, 4.0));
            assert_eq!(r.covisible, q.len());
        }
    }

    #[test]
    fn repeatability_is_symmetric_on_exact_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_h(&mut rng);
        let pa: Vec<_> = (0..30).map(|_| (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0))).collect();
        let pb: Vec<_> = pa.iter().filter_map(|&p| h.forward(p)).filter(|&p| inside(p, (60, 60))).collect();
        let (a, b) = (kps(&pa, (60, 60)), kps(&pb, (60, 60)));
        let ab = repeatability(&a, &b, &h, 0.5).unwrap();
        let ba = repeatability(&b, &a, &h.inverse(), 0.5).unwrap();
        assert_eq!(ab.value, 1.0);
        assert_eq!(ab.value, ba.value);
    }

    fn assert_h_close(a: &HomographyTransfer<f64>, b: &HomographyTransfer<f64>, tol: f64) {
        for i in 0..3 {
            for j in 0..3 {
                let (x, y) = (a.matrix()[i][j], b.matrix()[i][j]);
                assert!((x - y).abs() <= tol * y.abs().max(1.0), "{:?} vs {:?}", a.matrix(), b.matrix());
            }
        }
    }

    #[test]
    fn dlt_recovers_exact_homographies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let h = random_h(&mut rng);
            let src = [(0.0, 0.0), (100.0, 3.0), (97.0, 80.0), (4.0, 90.0)];
            let pairs: Vec<_> = src.iter().map(|&p| (p, h.forward(p).unwrap())).collect();
            assert_h_close(&dlt_homography(&pairs).unwrap(), &h, 1e-6);
        }
    }

    #[test]
    fn dlt_identity_and_translation() {
        let src = [(1.0, 2.0), (30.0, 4.0), (28.0, 25.0), (3.0, 31.0), (15.0, 15.0)];
        let id: Vec<_> = src.iter().map(|&p| (p, p)).collect();
        assert_h_close(&dlt_homography(&id).unwrap(), &HomographyTransfer::identity(), 1e-9);
        let tr: Vec<_> = src.iter().map(|&(x, y)| ((x, y), (x + 3.5, y - 2.0))).collect();
        assert_h_close(&dlt_homography(&tr).unwrap(), &HomographyTransfer::translation(3.5, -2.0), 1e-9);
    }

    #[test]
    fn dlt_rejects_degenerate_input() {
        let collinear = [((0.0, 0.0), (0.0, 0.0)), ((1.0, 1.0), (1.0, 1.0)), ((2.0, 2.0), (2.0, 2.0)), ((0.0, 5.0), (0.0, 5.0))];
        assert!(matches!(dlt_homography(&collinear), Err(Error::DegenerateInput(_))));
        assert!(matches!(dlt_homography(&collinear[..3]), Err(Error::InsufficientData(_))));
    }

    fn planted(rng: &mut ChaCha8Rng, n: usize, outlier_frac: f64) -> (HomographyTransfer<f64>, Vec<Correspondence>) {
        let h = random_h(rng);
        let pairs = (0..n)
            .map(|i| {
                let p = (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
                if (i as f64) < outlier_frac * n as f64 {
                    (p, (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)))
                } else {
                    (p, h.forward(p).unwrap())
                }
            })
            .collect();
        (h, pairs)
    }

    #[test]
    fn ransac_on_clean_data_flags_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, pairs) = planted(&mut rng, 30, 0.0);
        let (est, flags) = ransac_homography(&pairs, 1.0, 50, &mut rng).unwrap();
        assert!(flags.iter().all(|&f| f));
        assert!(corner_epe(&est, &h, (100, 100)) < 1e-6);
    }

    #[test]
    fn ransac_survives_half_outliers() {
        let mut ok = 0;
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, pairs) = planted(&mut rng, 60, 0.5);
            let (est, _) = ransac_homography(&pairs, 1.0, 200, &mut rng).unwrap();
            // Raw corner distance, without the 480/side scaling.
            if corner_epe(&est, &h, (100, 100)) * 100.0 / 480.0 < 0.5 {
                ok += 1;
            }
        }
        assert!(ok >= 198, "{ok}/200");
    }

    #[test]
    fn ransac_is_deterministic_and_needs_four() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let (_, pairs) = planted(&mut r1, 40, 0.3);
        let a = ransac_homography(&pairs, 1.0, 100, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = ransac_homography(&pairs, 1.0, 100, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            ransac_homography(&pairs[..3], 1.0, 10, &mut r1),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn ransac_refit_never_loses_inliers() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (_, mut pairs) = planted(&mut rng, 50, 0.3);
            for p in pairs.iter_mut().skip(15) {
                p.1 .0 += rng.gen_range(-0.4..0.4);
            }
            let (est, flags) = ransac_homography(&pairs, 1.0, 100, &mut rng).unwrap();
            let count = flags.iter().filter(|&&f| f).count();
            let inliers: Vec<_> = pairs.iter().zip(&flags).filter(|(_, &f)| f).map(|(&m, _)| m).collect();
            assert_eq!(score(&est, &pairs, 1.0).0, count);
            assert!(count >= inliers.len());
        }
    }

    #[test]
    fn corner_epe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random_h(&mut rng);
        assert_eq!(corner_epe(&h, &h, (480, 480)), 0.0);
        let shifted = HomographyTransfer::translation(2.0, 0.0).compose(&h).unwrap();
        assert_close!(corner_epe(&shifted, &h, (480, 480)), 2.0, 1e-9);
        assert_close!(corner_epe(&shifted, &h, (960, 960)), 1.0, 1e-9);
        // Sends the corner (99, 0) to infinity.
        let to_inf = HomographyTransfer::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0 / 99.0, 0.0, 1.0]]).unwrap();
        assert!(corner_epe(&to_inf, &h, (100, 100)).is_infinite());
    }

    #[test]
    fn pose_error_examples() {
        let id = [1.0, 0.0, 0.0, 0.0];
        let t = [0.3, -0.2, 1.0];
        assert_eq!(pose_error(id, t, id, t).unwrap(), 0.0);
        let half = 5f64.to_radians();
        let q10 = [half.cos(), 0.0, half.sin(), 0.0];
        assert_close!(pose_error(q10, t, id, t).unwrap(), 10.0, 1e-9);
        assert_close!(pose_error(id, [-0.3, 0.2, -1.0], id, t).unwrap(), 0.0, 1e-6);
        assert_close!(pose_error(id, [1.0, 0.0, 0.0], id, [0.0, 1.0, 0.0]).unwrap(), 90.0, 1e-9);
        assert!(matches!(pose_error(id, [0.0; 3], id, t), Err(Error::UndefinedTranslation(_))));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.0, 0.0], 3.0).unwrap(), 1.0);
        assert_eq!(auc(&[3.0, 7.0, f64::INFINITY], 3.0).unwrap(), 0.0);
        let exact = auc(&[1.0, 2.0, 4.0], 3.0).unwrap();
        assert_close!(exact, (2.0 / 3.0 + 1.0 / 3.0) / 3.0, 1e-15);
        // Midpoint Riemann sum of the empirical CDF.
        let n = 1_000_000;
        let errs = [1.0, 2.0, 4.0];
        let riemann: f64 = (0..n)
            .map(|i| {
                let tau = (i as f64 + 0.5) * 3.0 / n as f64;
                errs.iter().filter(|&&e| e <= tau).count() as f64 / 3.0
            })
            .sum::<f64>()
            / n as f64;
        assert_close!(exact, riemann, 1e-5);
        assert!(auc(&[], 3.0).is_err());
        assert!(auc(&[1.0], 0.0).is_err());
    }

    #[test]
    fn auc_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let big: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..6.0)).collect();
            let small: Vec<f64> = big.iter().map(|&e| e * rng.gen_range(0.0..1.0)).collect();
            assert!(auc(&small, 3.0).unwrap() >= auc(&big, 3.0).unwrap());
        }
        let curve = ErrorCurve { errors: vec![0.0, 6.0], threshold: 3.0 };
        assert_eq!(curve.auc().unwrap(), 0.5);
    }
}
