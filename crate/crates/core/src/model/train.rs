//! Policy-gradient training of the detector on synthetic pairs.

use rayon::prelude::*;

use super::{backward, forward, DetectorParams, OptState};
use crate::error::{Error, Result};
use crate::geometry::{match_mutual_nn, match_nearest, MatchSet};
use crate::objective::{total_loss_and_grad, LossReport, PairInputs, RegConfig, RewardConfig};
use crate::sampler::{sample_keypoints, SampleMode, SamplerConfig};
use crate::scalar::Real;
use crate::synth::PairSample;

/// How sampled keypoints are paired for the reward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Matching {
    /// Every keypoint with a valid transfer against its nearest neighbour.
    Nearest,
    /// Mutual nearest neighbours closer than `threshold` pixels.
    MutualNn { threshold: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Number of training pairs consumed.
    pub steps: usize,
    /// Pairs averaged per optimizer update.
    pub batch_size: usize,
    pub sampler: SamplerConfig,
    pub reward: RewardConfig,
    pub reg: RegConfig,
    pub matching: Matching,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub weight_decay: f64,
    /// Worker threads for per-pair gradients inside a batch.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            sampler: SamplerConfig::default(),
            reward: RewardConfig::for_height(64),
            reg: RegConfig::default(),
            matching: Matching::Nearest,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            weight_decay: 1e-4,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.threads == 0 {
            return Err(Error::InvalidParameter("batch_size and threads must be at least 1".into()));
        }
        if let Matching::MutualNn { threshold } = self.matching {
            if !(threshold > 0.0) {
                return Err(Error::InvalidParameter("match threshold must be positive".into()));
            }
        }
        if !(self.reg.sigma > 0.0) || !(self.reg.weight >= 0.0) {
            return Err(Error::InvalidParameter("reg sigma must be positive, weight nonnegative".into()));
        }
        self.sampler.validate()?;
        self.reward.validate()?;
        self.new_state(&DetectorParams::<f64> { layers: vec![] }).validate()
    }

    fn new_state<T: Real>(&self, params: &DetectorParams<T>) -> OptState<T> {
        OptState::new(params).with_hyper(self.lr, self.beta1, self.beta2, self.eps_opt, self.weight_decay)
    }
}

/// Loss telemetry and parameter gradients of one pair.
#[derive(Clone, Debug)]
pub struct PairOutcome<T> {
    pub report: LossReport<T>,
    pub grads: DetectorParams<T>,
}

/// Forward both images, sample, match, and backpropagate the total loss.
pub fn evaluate_pair<T: Real>(
    params: &DetectorParams<T>,
    sample: &PairSample<T>,
    cfg: &TrainConfig,
) -> Result<PairOutcome<T>> {
    let (sa, cache_a) = forward(params, &sample.image_a)?;
    let (sb, cache_b) = forward(params, &sample.image_b)?;
    let kps_a = sample_keypoints(sa.logits(), &cfg.sampler, SampleMode::Train)?;
    let kps_b = sample_keypoints(sb.logits(), &cfg.sampler, SampleMode::Train)?;
    let (ab, ba): (MatchSet<T>, MatchSet<T>) = match cfg.matching {
        Matching::Nearest => match_nearest(&kps_a, &kps_b, &sample.transfer),
        Matching::MutualNn { threshold } => match_mutual_nn(&kps_a, &kps_b, &sample.transfer, T::lit(threshold))?,
    };
    let inputs = PairInputs {
        logits_a: sa.logits(),
        logits_b: sb.logits(),
        mask_a: &sample.mask_a,
        mask_b: &sample.mask_b,
        kps_a: &kps_a,
        kps_b: &kps_b,
        ab: &ab,
        ba: &ba,
    };
    let (report, grad_a, grad_b) = total_loss_and_grad(&inputs, &cfg.reward, &cfg.reg)?;
    let mut grads = backward(params, &cache_a, &grad_a)?;
    grads.add_assign(&backward(params, &cache_b, &grad_b)?);
    Ok(PairOutcome { report, grads })
}

/// One optimizer update from a batch of pairs. Per-pair gradients are summed
/// in batch order, so the result does not depend on the thread count.
pub fn train_step<T: Real>(
    params: &mut DetectorParams<T>,
    state: &mut OptState<T>,
    batch: &[PairSample<T>],
    cfg: &TrainConfig,
) -> Result<Vec<LossReport<T>>> {
    let outcomes: Vec<Result<PairOutcome<T>>> = if cfg.threads > 1 && batch.len() > 1 {
        let p: &DetectorParams<T> = params;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Internal(e.to_string()))?;
        pool.install(|| batch.par_iter().map(|s| evaluate_pair(p, s, cfg)).collect())
    } else {
        batch.iter().map(|s| evaluate_pair(params, s, cfg)).collect()
    };
    let mut total = params.zeros_like();
    let mut reports = Vec::with_capacity(batch.len());
    for o in outcomes {
        let o = o?;
        total.add_assign(&o.grads);
        reports.push(o.report);
    }
    let scale = T::one() / T::from_usize_lossy(batch.len().max(1));
    for t in total.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= scale);
    }
    if !total.all_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    super::optimizer_step(params, &total, state)?;
    Ok(reports)
}

#[derive(Clone, Debug)]
pub struct TrainLog<T> {
    pub params: DetectorParams<T>,
    /// One report per consumed pair, in order.
    pub reports: Vec<LossReport<T>>,
}

impl<T: Real> TrainLog<T> {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", LossReport::<T>::CSV_HEADER);
        for (i, r) in self.reports.iter().enumerate() {
            out.push_str(&r.csv_row(i));
            out.push('\n');
        }
        out
    }

    /// Mean pair reward over the last `n` pairs.
    pub fn recent_pair_reward(&self, n: usize) -> f64 {
        let tail = &self.reports[self.reports.len().saturating_sub(n)..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|r| r.pair_reward.as_f64()).sum::<f64>() / tail.len() as f64
    }
}

/// Trains from `init` on `cfg.steps` pairs drawn from `data(i)`. The final
/// parameters are rounded to weight-file precision.
pub fn train_loop<T: Real>(
    init: DetectorParams<T>,
    data: &mut dyn FnMut(usize) -> Result<PairSample<T>>,
    cfg: &TrainConfig,
) -> Result<TrainLog<T>> {
    cfg.validate()?;
    let mut params = init;
    let mut state = cfg.new_state(&params);
    let mut reports = Vec::with_capacity(cfg.steps);
    let mut i = 0;
    while i < cfg.steps {
        let n = cfg.batch_size.min(cfg.steps - i);
        let batch = (i..i + n).map(&mut *data).collect::<Result<Vec<_>>>()?;
        reports.extend(train_step(&mut params, &mut state, &batch, cfg)?);
        i += n;
    }
    if cfg.steps > 0 {
        params.round_to_storage();
    }
    Ok(TrainLog { params, reports })
}
