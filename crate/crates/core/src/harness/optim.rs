//! Plain SGD and Adam over named parameter stores.

use serde::{Deserialize, Serialize};

use crate::autodiff::GradientMap;
use crate::error::{Error, Result};
use crate::rewiring::ParameterStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

fn check_grads<S: Scalar>(params: &ParameterStore<S>, grads: &GradientMap<S>) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name} contains NaN or infinity")));
        }
    }
    Ok(())
}

/// `θ ← θ − lr·g` for every parameter that has a gradient. Non-finite gradients
/// abort before anything is modified.
pub fn sgd_step<S: Scalar>(params: &mut ParameterStore<S>, grads: &GradientMap<S>, lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    let lr = S::of(lr);
    for (name, g) in grads.iter() {
        let p = params.get_mut(name).expect("checked above");
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, created lazily per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState<S> {
    pub m: ParameterStore<S>,
    pub v: ParameterStore<S>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        Self { m: ParameterStore::new(), v: ParameterStore::new(), step: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<S: Scalar>(
    params: &mut ParameterStore<S>,
    grads: &GradientMap<S>,
    state: &mut AdamState<S>,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    check_grads(params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let c1 = S::of(1.0 - cfg.beta1.powi(t));
    let c2 = S::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (S::of(lr), S::of(cfg.eps));
    for (name, g) in grads.iter() {
        if !state.m.contains(name) {
            state.m.insert(name, crate::tensor::Tensor::zeros(g.shape()));
            state.v.insert(name, crate::tensor::Tensor::zeros(g.shape()));
        }
        let m = state.m.get_mut(name).expect("inserted").data_mut();
        let v = state.v.get_mut(name).expect("inserted").data_mut();
        let p = params.get_mut(name).expect("checked above").data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (S::one() - b1) * gi;
            v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(v: Vec<f64>) -> ParameterStore<f64> {
        let mut p = ParameterStore::new();
        p.insert("w", Tensor::from_vec(v));
        p
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = store(vec![1.0, -2.0]);
        sgd_step(&mut p, &store(vec![0.5, -1.0]), 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.95, -1.9]);
    }

    #[test]
    fn first_adam_step_is_lr_times_sign() {
        let mut p = store(vec![1.0, 1.0]);
        let mut st = AdamState::new();
        adam_step(&mut p, &store(vec![3.0, -0.01]), &mut st, 0.1, AdamConfig::default()).unwrap();
        let d = p.get("w").unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-7 && (d[1] - 1.1).abs() < 1e-5, "{d:?}");
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let mut p = store(vec![1.0]);
        let before = p.clone();
        let err = sgd_step(&mut p, &store(vec![f64::NAN]), 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p, before);
        let err = adam_step(&mut p, &store(vec![f64::INFINITY]), &mut AdamState::new(), 0.1, AdamConfig::default());
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = store(vec![0.3]);
        let mut st = AdamState::new();
        adam_step(&mut p, &store(vec![1.0]), &mut st, 0.0, AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.3]);
    }
}
