//! Adaptive-moment optimizer with decoupled weight decay.

use super::DetectorParams;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub first_moment: DetectorParams<T>,
    pub second_moment: DetectorParams<T>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub weight_decay: f64,
}

impl<T: Real> OptState<T> {
    /// Fresh state with lr 1e-3, betas (0.9, 0.999), eps 1e-8, decay 1e-4.
    pub fn new(params: &DetectorParams<T>) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step_count: 0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            weight_decay: 1e-4,
        }
    }

    pub fn with_hyper(mut self, lr: f64, beta1: f64, beta2: f64, eps_opt: f64, weight_decay: f64) -> Self {
        self.lr = lr;
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.eps_opt = eps_opt;
        self.weight_decay = weight_decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::InvalidParameter("betas must lie in (0, 1)".into()));
        }
        if !(self.lr > 0.0) || !(self.eps_opt > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter(
                "lr and eps_opt must be positive, weight_decay nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// One update. Decay multiplies the parameters by `1 − lr·λ` before the
/// moment step is applied.
pub fn optimizer_step<T: Real>(
    params: &mut DetectorParams<T>,
    grads: &DetectorParams<T>,
    state: &mut OptState<T>,
) -> Result<()> {
    let shapes = |p: &DetectorParams<T>| p.tensors().iter().map(|t| t.len()).collect::<Vec<_>>();
    let expected = shapes(params);
    if shapes(grads) != expected
        || shapes(&state.first_moment) != expected
        || shapes(&state.second_moment) != expected
    {
        return Err(Error::InvalidInput("optimizer shapes do not match the parameters".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = T::lit(state.lr);
    let decay = T::lit(1.0 - state.lr * state.weight_decay);
    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
    let (c1t, c2t) = (T::lit(c1), T::lit(c2));
    let eps = T::lit(state.eps_opt);

    let ps = params.tensors_mut();
    let gs = grads.tensors();
    let ms = state.first_moment.tensors_mut();
    let vs = state.second_moment.tensors_mut();
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1t * m[i] + (T::one() - b1t) * gi;
            v[i] = b2t * v[i] + (T::one() - b2t) * gi * gi;
            let m_hat = m[i] / c1t;
            let v_hat = v[i] / c2t;
            p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
