use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in [0, 1), got ({b1}, {b2})"
            )));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "Adam eps must be > 0 and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moments for every parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &BTreeMap<String, Tensor<T>>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape())))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Checks that the moment buffers mirror `params` exactly.
    pub fn check_matches(&self, params: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (label, buffers) in [("m", &self.m), ("v", &self.v)] {
            if buffers.len() != params.len() {
                return Err(Error::Config(format!(
                    "Adam {label} has {} buffers for {} parameters",
                    buffers.len(),
                    params.len()
                )));
            }
            for (name, p) in params {
                match buffers.get(name) {
                    Some(b) if b.shape() == p.shape() => {}
                    _ => {
                        return Err(Error::Config(format!(
                            "Adam {label} buffer for {name} missing or misshaped"
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of a flat parameter slice; `step` is the
/// 1-based index of this update.
pub fn adam_update<T: Scalar>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: T,
    cfg: &AdamConfig,
) {
    let (b1, b2) = (T::lit(cfg.betas.0), T::lit(cfg.betas.1));
    let one = T::one();
    let c1 = one - b1.powi(step as i32);
    let c2 = one - b2.powi(step as i32);
    let eps = T::lit(cfg.eps);
    let wd = T::lit(cfg.weight_decay);
    for i in 0..p.len() {
        let grad = if cfg.weight_decay > 0.0 {
            g[i] + wd * p[i]
        } else {
            g[i]
        };
        m[i] = b1 * m[i] + (one - b1) * grad;
        v[i] = b2 * v[i] + (one - b2) * grad * grad;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one Adam step to every parameter. Nothing is modified if any
/// gradient is missing, misshaped or non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    state.check_matches(params)?;
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("no gradient for parameter {name}")))?;
        if g.len() != p.numel() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "gradient for {name} has {} elements, parameter has {}",
                    g.len(),
                    p.numel()
                ),
            ));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name} at element {i} is {}; step rejected",
                g[i].to_f64_lossy()
            )));
        }
    }
    state.step += 1;
    let lr = T::lit(lr);
    for (name, p) in params.iter_mut() {
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        adam_update(p.data_mut(), &grads[name], m, v, state.step, lr, cfg);
    }
    Ok(())
}
