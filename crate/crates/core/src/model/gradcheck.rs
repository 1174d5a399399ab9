//! Randomized finite-difference check of every loss against the
//! hand-written backward pass.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backward, forward, init_params, ArchConfig, DetectorParams};
use crate::distill::{distill_image, MergeOrder};
use crate::error::{Error, Result};
use crate::geometry::{covisibility_mask, match_nearest, HomographyTransfer};
use crate::grid::{Grid, Mask};
use crate::objective::{reg_loss_and_grad, total_loss_and_grad, PairInputs, RegConfig, RewardConfig};
use crate::sampler::{sample_keypoints, KeypointSet, SampleMode, SamplerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LossKind {
    Rl,
    Reg,
    Distill,
    Full,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rl => "rl",
            Self::Reg => "reg",
            Self::Distill => "distill",
            Self::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    /// Absolute differences up to this count as agreement.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            seed: 0,
            step: 1e-4,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error per loss.
    pub per_loss: Vec<(LossKind, f64)>,
    pub parameters_checked: usize,
    /// Probes whose `±step` perturbation flipped a ReLU, where the central
    /// difference does not estimate the derivative.
    pub skipped_at_kinks: usize,
    pub max_abs_diff: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_loss.iter().map(|p| p.1).fold(0.0, f64::max)
    }
}

struct Instance {
    params: DetectorParams<f64>,
    image_a: Grid<f64>,
    image_b: Grid<f64>,
    mask_a: Mask,
    mask_b: Mask,
    transfer: HomographyTransfer<f64>,
    light: DetectorParams<f64>,
    dark: DetectorParams<f64>,
    indicator: Mask,
}

fn random_arch(rng: &mut ChaCha8Rng) -> ArchConfig {
    let hidden = rng.gen_range(1..=2);
    let widths = (0..hidden).map(|_| rng.gen_range(2..=4)).collect();
    ArchConfig::new(widths, 3, rng.gen())
}

fn jitter_biases(p: &mut DetectorParams<f64>, rng: &mut ChaCha8Rng) {
    for layer in &mut p.layers {
        layer.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
    }
}

fn instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let arch = random_arch(rng);
    let mut params = init_params(&arch)?;
    jitter_biases(&mut params, rng);
    let mut light = init_params(&ArchConfig::new(arch.channel_widths.clone(), 3, rng.gen()))?;
    jitter_biases(&mut light, rng);
    let dark = light.negate_input();
    let (h, w) = (rng.gen_range(12..=16), rng.gen_range(12..=16));
    let (dx, dy) = (rng.gen_range(-2..=2) as f64, rng.gen_range(-2..=2) as f64);
    let transfer = HomographyTransfer::translation(dx, dy);
    let image_a = Grid::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0));
    let image_b = Grid::from_fn(w, h, |x, y| {
        let (sx, sy) = (x as f64 - dx, y as f64 - dy);
        let base = if sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64 {
            *image_a.get(sx as usize, sy as usize)
        } else {
            0.5
        };
        base + rng.gen_range(-0.05..0.05)
    });
    let mask_a = covisibility_mask(&transfer, (h, w), (h, w))?;
    let mask_b = covisibility_mask(&transfer.inverse(), (h, w), (h, w))?;
    let indicator = Mask::from_fn(w, h, |_, _| rng.gen_bool(0.7));
    Ok(Instance { params, image_a, image_b, mask_a, mask_b, transfer, light, dark, indicator })
}

/// Signs of every hidden pre-activation on both images.
fn relu_pattern(params: &DetectorParams<f64>, inst: &Instance) -> Result<Vec<bool>> {
    let mut out = Vec::new();
    for img in [&inst.image_a, &inst.image_b] {
        let (_, cache) = forward(params, img)?;
        let hidden = cache.pre_activations.len() - 1;
        for planes in &cache.pre_activations[..hidden] {
            out.extend(planes.data.iter().map(|&z| z > 0.0));
        }
    }
    Ok(out)
}

/// Loss of one kind with the sampled keypoints and matches frozen at the
/// unperturbed parameters.
struct Frozen {
    kps_a: KeypointSet<f64>,
    kps_b: KeypointSet<f64>,
}

fn freeze(inst: &Instance, sampler: &SamplerConfig) -> Result<Frozen> {
    let (sa, _) = forward(&inst.params, &inst.image_a)?;
    let (sb, _) = forward(&inst.params, &inst.image_b)?;
    Ok(Frozen {
        kps_a: sample_keypoints(sa.logits(), sampler, SampleMode::Train)?,
        kps_b: sample_keypoints(sb.logits(), sampler, SampleMode::Train)?,
    })
}

fn pair_loss(
    inst: &Instance,
    frozen: &Frozen,
    params: &DetectorParams<f64>,
    reward: &RewardConfig,
    reg: &RegConfig,
) -> Result<(f64, DetectorParams<f64>)> {
    let (sa, ca) = forward(params, &inst.image_a)?;
    let (sb, cb) = forward(params, &inst.image_b)?;
    let (ab, ba) = match_nearest(&frozen.kps_a, &frozen.kps_b, &inst.transfer);
    let inputs = PairInputs {
        logits_a: sa.logits(),
        logits_b: sb.logits(),
        mask_a: &inst.mask_a,
        mask_b: &inst.mask_b,
        kps_a: &frozen.kps_a,
        kps_b: &frozen.kps_b,
        ab: &ab,
        ba: &ba,
    };
    let (report, ga, gb) = total_loss_and_grad(&inputs, reward, reg)?;
    let mut grads = backward(params, &ca, &ga)?;
    grads.add_assign(&backward(params, &cb, &gb)?);
    Ok((report.total, grads))
}

fn loss_and_grad(
    kind: LossKind,
    inst: &Instance,
    frozen: &Frozen,
    params: &DetectorParams<f64>,
) -> Result<(f64, DetectorParams<f64>)> {
    let reward = RewardConfig { tau_r: 2.5, eps: 0.01, linear: true };
    match kind {
        LossKind::Rl => pair_loss(inst, frozen, params, &reward, &RegConfig { sigma: 1.0, weight: 0.0 }),
        LossKind::Full => pair_loss(inst, frozen, params, &reward, &RegConfig { sigma: 1.5, weight: 0.5 }),
        LossKind::Reg => {
            let (s, cache) = forward(params, &inst.image_a)?;
            let (l, g) = reg_loss_and_grad(s.logits(), &inst.indicator, 1.5)?;
            Ok((l, backward(params, &cache, &g)?))
        }
        LossKind::Distill => distill_image(&inst.light, &inst.dark, params, &inst.image_a, MergeOrder::Quadratic),
    }
}

/// Runs `cfg.instances` random instances (12–16 pixel sides, 2–3 layer nets)
/// and compares every parameter's analytic gradient with a central
/// difference for each loss. Probes that cross a ReLU kink are counted and
/// skipped.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.instances == 0 || !(cfg.step > 0.0) || !(cfg.floor > 0.0) {
        return Err(Error::InvalidParameter("gradcheck needs instances ≥ 1 and positive step and floor".into()));
    }
    let kinds = [LossKind::Rl, LossKind::Reg, LossKind::Distill, LossKind::Full];
    let mut worst = [0.0f64; 4];
    let mut checked = 0;
    let mut skipped = 0;
    let mut max_abs = 0.0f64;
    let sampler = SamplerConfig { k: 6, ..SamplerConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.instances {
        let inst = instance(&mut rng)?;
        let frozen = freeze(&inst, &sampler)?;
        let base_pattern = relu_pattern(&inst.params, &inst)?;
        for (slot, &kind) in kinds.iter().enumerate() {
            let (_, grads) = loss_and_grad(kind, &inst, &frozen, &inst.params)?;
            let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
            let mut probe = inst.params.clone();
            let mut idx = 0;
            for ti in 0..probe.tensors().len() {
                for vi in 0..probe.tensors()[ti].len() {
                    let orig = probe.tensors()[ti][vi];
                    probe.tensors_mut()[ti][vi] = orig + cfg.step;
                    let plus = loss_and_grad(kind, &inst, &frozen, &probe)?.0;
                    let crossed_plus = relu_pattern(&probe, &inst)? != base_pattern;
                    probe.tensors_mut()[ti][vi] = orig - cfg.step;
                    let minus = loss_and_grad(kind, &inst, &frozen, &probe)?.0;
                    let crossed_minus = relu_pattern(&probe, &inst)? != base_pattern;
                    probe.tensors_mut()[ti][vi] = orig;
                    if crossed_plus || crossed_minus {
                        skipped += 1;
                        idx += 1;
                        continue;
                    }
                    let numeric = (plus - minus) / (2.0 * cfg.step);
                    let a = analytic[idx];
                    let diff = (a - numeric).abs();
                    max_abs = max_abs.max(diff);
                    let rel = if diff <= cfg.floor { 0.0 } else { diff / a.abs().max(numeric.abs()) };
                    worst[slot] = worst[slot].max(rel);
                    idx += 1;
                    checked += 1;
                }
            }
        }
    }
    Ok(GradCheckReport {
        per_loss: kinds.into_iter().zip(worst).collect(),
        parameters_checked: checked,
        skipped_at_kinks: skipped,
        max_abs_diff: max_abs,
    })
}
