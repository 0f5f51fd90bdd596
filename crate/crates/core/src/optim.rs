//! AdaBelief: Adam with the second moment tracking the deviation of the
//! gradient from its running mean.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaBeliefConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdaBeliefConfig {
    fn default() -> Self {
        AdaBeliefConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub m: Tensor,
    pub s: Tensor,
    pub t: u64,
}

impl MomentState {
    pub fn new(like: &Tensor) -> Self {
        MomentState {
            m: Tensor::zeros(like.shape()),
            s: Tensor::zeros(like.shape()),
            t: 0,
        }
    }
}

/// One AdaBelief update of `param` in place.
pub fn adabelief_step(
    name: &str,
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut MomentState,
    lr: f64,
    cfg: &AdaBeliefConfig,
) -> Result<()> {
    if grad.shape() != param.shape() || state.m.shape() != param.shape() {
        return Err(Error::dim(format!(
            "optimizer state for {name}: param {:?}, grad {:?}, moments {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let g = grad.data();
    let m = state.m.data_mut();
    for j in 0..g.len() {
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
    }
    let m = state.m.data();
    let s = state.s.data_mut();
    let p = param.data_mut();
    for j in 0..g.len() {
        let dev = g[j] - m[j];
        s[j] = cfg.beta2 * s[j] + (1.0 - cfg.beta2) * dev * dev + cfg.eps;
        let m_hat = m[j] / bc1;
        let s_hat = s[j] / bc2;
        p[j] -= lr * m_hat / (s_hat.sqrt() + cfg.eps);
    }
    if !param.is_finite() {
        return Err(Error::NonFinite(format!("parameter {name} after update")));
    }
    Ok(())
}

/// Optimizer over a named subset of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct AdaBelief {
    pub config: AdaBeliefConfig,
    states: BTreeMap<String, MomentState>,
}

impl AdaBelief {
    pub fn new(config: AdaBeliefConfig) -> Self {
        AdaBelief {
            config,
            states: BTreeMap::new(),
        }
    }

    /// Applies every gradient in `grads` to the matching parameter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, grad) in grads.iter() {
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::usage(format!("gradient for unknown parameter {name}")))?;
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| MomentState::new(param));
            adabelief_step(name, param, grad, state, lr, &self.config)?;
        }
        Ok(())
    }

    pub fn state(&self, name: &str) -> Option<&MomentState> {
        self.states.get(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = Tensor::vector(vec![0.3, -1.2]);
        let mut st = MomentState::new(&p);
        let g = Tensor::zeros(&[2]);
        adabelief_step("p", &mut p, &g, &mut st, 0.1, &AdaBeliefConfig::default()).unwrap();
        assert_eq!(p.data(), &[0.3, -1.2]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // oracle: m = 0.1, s = 0.001·0.81 + 1e-8, update = -0.1·m̂/(√ŝ + ε)
        let mut p = Tensor::scalar(0.0);
        let mut st = MomentState::new(&p);
        adabelief_step("p", &mut p, &Tensor::scalar(1.0), &mut st, 0.1, &AdaBeliefConfig::default()).unwrap();
        assert!((st.m.item() - 0.1).abs() < 1e-15);
        assert!((st.s.item() - 0.00081001).abs() < 1e-15);
        assert!((p.item() - (-0.1111104240118528)).abs() < 1e-12);
    }

    #[test]
    fn identical_gradients_evolve_identically() {
        let mut a = Tensor::scalar(0.5);
        let mut b = Tensor::scalar(0.5);
        let (mut sa, mut sb) = (MomentState::new(&a), MomentState::new(&b));
        let cfg = AdaBeliefConfig::default();
        for k in 0..20 {
            let g = Tensor::scalar((k as f64).sin());
            adabelief_step("a", &mut a, &g, &mut sa, 0.01, &cfg).unwrap();
            adabelief_step("b", &mut b, &g, &mut sb, 0.01, &cfg).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(sa.s.item() >= 0.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::scalar(0.0);
        let mut st = MomentState::new(&p);
        let err = adabelief_step("pm.fc1.weight", &mut p, &Tensor::scalar(f64::NAN), &mut st, 0.1, &AdaBeliefConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("pm.fc1.weight"));
    }
}
