//! Repeatability reward, the off-policy policy-gradient loss, the scoremap
//! regularizer and their closed-form gradients with respect to the logits.
//!
//! Losses are written to be minimized: the policy-gradient term is the
//! negated reward-weighted log-likelihood of the matched keypoints.

use crate::error::{Error, Result};
use crate::geometry::MatchSet;
use crate::grid::{Grid, Mask};
use crate::prob::{gaussian_blur, masked_log_softmax, softmax_2d, ProbMap, KL_FLOOR};
use crate::prob::kl_grid;
use crate::sampler::KeypointSet;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct RewardConfig {
    /// Reward distance threshold in pixels.
    pub tau_r: f64,
    /// Floor in the per-pair reward normalization.
    pub eps: f64,
    /// Use the linearly decaying reward instead of the step.
    pub linear: bool,
}

impl RewardConfig {
    /// Threshold at 0.25 % of the image height.
    pub fn for_height(height: usize) -> Self {
        Self {
            tau_r: 0.0025 * height as f64,
            eps: 0.01,
            linear: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_r > 0.0) || !(self.eps > 0.0) {
            return Err(Error::InvalidParameter(
                "reward tau_r and eps must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn reward<T: Real>(&self, distance: T) -> T {
        if self.linear {
            reward_linear(distance, T::lit(self.tau_r))
        } else {
            reward_threshold(distance, T::lit(self.tau_r))
        }
    }
}

/// `1` if `distance < tau_r`, else `0`.
pub fn reward_threshold<T: Real>(distance: T, tau_r: T) -> T {
    if distance < tau_r {
        T::one()
    } else {
        T::zero()
    }
}

/// `max(0, 1 − d/τ)`: full reward at zero distance, none from `τ` on.
pub fn reward_linear<T: Real>(distance: T, tau_r: T) -> T {
    (T::one() - distance / tau_r).max(T::zero())
}

/// `r / (mean(r) + eps)` over the rewards of one image pair.
pub fn normalize_rewards<T: Real>(rewards: &[T], eps: T) -> Vec<T> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().copied().sum::<T>() / T::from_usize_lossy(rewards.len());
    rewards.iter().map(|&r| r / (mean + eps)).collect()
}

/// Everything the pair losses need about one training pair.
pub struct PairInputs<'a, T> {
    pub logits_a: &'a Grid<T>,
    pub logits_b: &'a Grid<T>,
    pub mask_a: &'a Mask,
    pub mask_b: &'a Mask,
    pub kps_a: &'a KeypointSet<T>,
    pub kps_b: &'a KeypointSet<T>,
    pub ab: &'a MatchSet<T>,
    pub ba: &'a MatchSet<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlTerms<T> {
    pub loss: T,
    pub grad_a: Grid<T>,
    pub grad_b: Grid<T>,
    /// Mean thresholded reward over both match directions.
    pub mean_raw_reward: T,
    /// Sum of thresholded rewards over the A→B matches.
    pub pair_reward: T,
    pub num_matches: usize,
}

fn matched_pixel<T: Real>(
    kps: &KeypointSet<T>,
    idx: usize,
    mask: &Mask,
    side: &str,
) -> Result<(usize, usize)> {
    let kp = kps.keypoints.get(idx).ok_or_else(|| {
        Error::InvalidInput(format!("match index {idx} out of bounds for view {side}"))
    })?;
    let (x, y) = kp.pixel();
    if x >= mask.width() || y >= mask.height() || !*mask.get(x, y) {
        return Err(Error::InvalidInput(format!(
            "matched keypoint ({x},{y}) in view {side} lies outside its mask"
        )));
    }
    Ok((x, y))
}

/// Policy-gradient loss `−Σ_{A→B} r̂ log p_A(x^A) − Σ_{B→A} r̂ log p_B(x^B)`
/// with masked log-softmax, and its gradient w.r.t. both logit grids.
///
/// The A→B matches only feed `grad_a`, the B→A matches only `grad_b`.
pub fn rl_loss_and_grad<T: Real>(inputs: &PairInputs<'_, T>, cfg: &RewardConfig) -> Result<RlTerms<T>> {
    let raw: Vec<T> = inputs
        .ab
        .pairs
        .iter()
        .chain(&inputs.ba.pairs)
        .map(|m| cfg.reward(m.distance))
        .collect();
    let normalized = normalize_rewards(&raw, T::lit(cfg.eps));
    let (w_ab, w_ba) = normalized.split_at(inputs.ab.len());

    let side = |logits: &Grid<T>,
                mask: &Mask,
                kps: &KeypointSet<T>,
                picks: Vec<usize>,
                weights: &[T],
                name: &str|
     -> Result<(T, Grid<T>)> {
        let mut grad = Grid::zeros(logits.width(), logits.height());
        if picks.is_empty() {
            return Ok((T::zero(), grad));
        }
        let lp = masked_log_softmax(logits, mask)?;
        let mut loss = T::zero();
        let mut total_weight = T::zero();
        for (&idx, &r) in picks.iter().zip(weights) {
            let (x, y) = matched_pixel(kps, idx, mask, name)?;
            loss -= r * lp.at(x, y);
            let i = grad.index(x, y);
            grad.data_mut()[i] -= r;
            total_weight += r;
        }
        let probs = lp.probs();
        for (g, &p) in grad.data_mut().iter_mut().zip(probs.data()) {
            *g += total_weight * p;
        }
        Ok((loss, grad))
    };

    inputs.logits_a.ensure_same_shape(inputs.mask_a, "rl loss (A)")?;
    inputs.logits_b.ensure_same_shape(inputs.mask_b, "rl loss (B)")?;
    let (loss_a, grad_a) = side(
        inputs.logits_a,
        inputs.mask_a,
        inputs.kps_a,
        inputs.ab.pairs.iter().map(|m| m.a).collect(),
        w_ab,
        "A",
    )?;
    let (loss_b, grad_b) = side(
        inputs.logits_b,
        inputs.mask_b,
        inputs.kps_b,
        inputs.ba.pairs.iter().map(|m| m.b).collect(),
        w_ba,
        "B",
    )?;
    // Index validity of the detached side.
    for m in &inputs.ab.pairs {
        if m.b >= inputs.kps_b.len() {
            return Err(Error::InvalidInput(format!("match index {} out of bounds for view B", m.b)));
        }
    }
    for m in &inputs.ba.pairs {
        if m.a >= inputs.kps_a.len() {
            return Err(Error::InvalidInput(format!("match index {} out of bounds for view A", m.a)));
        }
    }

    let n = raw.len();
    let mean_raw_reward = if n == 0 {
        T::zero()
    } else {
        raw.iter().copied().sum::<T>() / T::from_usize_lossy(n)
    };
    Ok(RlTerms {
        loss: loss_a + loss_b,
        grad_a,
        grad_b,
        mean_raw_reward,
        pair_reward: raw[..inputs.ab.len()].iter().copied().sum(),
        num_matches: n,
    })
}

/// `KL(p_ind * g ‖ softmax(S) * g)` where `p_ind` is the indicator normalized
/// to a distribution, with its gradient w.r.t. `S`.
pub fn reg_loss_and_grad<T: Real>(logits: &Grid<T>, indicator: &Mask, sigma: T) -> Result<(T, Grid<T>)> {
    logits.ensure_same_shape(indicator, "regularizer")?;
    let count = indicator.count();
    if count == 0 {
        return Err(Error::DegenerateMask("regularizer indicator is empty".into()));
    }
    let mass = T::one() / T::from_usize_lossy(count);
    let target = indicator.map(|&b| if b { mass } else { T::zero() });
    let target = gaussian_blur(&target, sigma)?;
    let p = softmax_2d(logits)?;
    let pb = gaussian_blur(&p, sigma)?;
    let floor = T::lit(KL_FLOOR);
    let loss = kl_grid(&target, &pb, floor)?;

    // dL/d(pb) = −t / pb where pb is above the floor.
    let d_pb = Grid::from_vec(
        pb.width(),
        pb.height(),
        target
            .data()
            .iter()
            .zip(pb.data())
            .map(|(&t, &q)| if t > T::zero() && q > floor { -t / q } else { T::zero() })
            .collect(),
    )?;
    let d_p = gaussian_blur(&d_pb, sigma)?;
    Ok((loss, softmax_backward(&p, &d_p)))
}

/// Pulls a gradient w.r.t. `p = softmax(S)` back to `S`.
pub(crate) fn softmax_backward<T: Real>(p: &ProbMap<T>, d_p: &Grid<T>) -> Grid<T> {
    let inner = p.dot(d_p);
    Grid::from_vec(
        p.width(),
        p.height(),
        p.data()
            .iter()
            .zip(d_p.data())
            .map(|(&pi, &gi)| pi * (gi - inner))
            .collect(),
    )
    .expect("shape preserved")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegConfig {
    /// Blur σ in pixels.
    pub sigma: f64,
    /// Weight of the regularizer in the total loss.
    pub weight: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            sigma: 12.5,
            weight: 1.0,
        }
    }
}

/// Per-step training telemetry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport<T> {
    pub rl_loss: T,
    /// Weighted regularizer, summed over both views.
    pub reg_loss: T,
    pub total: T,
    pub mean_raw_reward: T,
    pub num_matches: usize,
    /// Raw reward of the pair (rewarded A→B matches).
    pub pair_reward: T,
}

impl<T: Real> LossReport<T> {
    pub const CSV_HEADER: &'static str = "step,rl_loss,reg_loss,total,mean_raw_reward,num_matches";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.9e},{:.9e},{:.9e},{:.9e},{}",
            self.rl_loss.as_f64(),
            self.reg_loss.as_f64(),
            self.total.as_f64(),
            self.mean_raw_reward.as_f64(),
            self.num_matches
        )
    }
}

/// Policy-gradient loss plus the weighted regularizer on both views. The
/// covisibility masks double as the regularizer's validity indicator.
pub fn total_loss_and_grad<T: Real>(
    inputs: &PairInputs<'_, T>,
    reward: &RewardConfig,
    reg: &RegConfig,
) -> Result<(LossReport<T>, Grid<T>, Grid<T>)> {
    let rl = rl_loss_and_grad(inputs, reward)?;
    let (mut grad_a, mut grad_b) = (rl.grad_a, rl.grad_b);
    let mut reg_loss = T::zero();
    if reg.weight != 0.0 {
        let w = T::lit(reg.weight);
        let sigma = T::lit(reg.sigma);
        for (logits, mask, grad) in [
            (inputs.logits_a, inputs.mask_a, &mut grad_a),
            (inputs.logits_b, inputs.mask_b, &mut grad_b),
        ] {
            let (l, g) = reg_loss_and_grad(logits, mask, sigma)?;
            reg_loss += w * l;
            for (acc, &gi) in grad.data_mut().iter_mut().zip(g.data()) {
                *acc += w * gi;
            }
        }
    }
    let report = LossReport {
        rl_loss: rl.loss,
        reg_loss,
        total: rl.loss + reg_loss,
        mean_raw_reward: rl.mean_raw_reward,
        num_matches: rl.num_matches,
        pair_reward: rl.pair_reward,
    };
    Ok((report, grad_a, grad_b))
}
