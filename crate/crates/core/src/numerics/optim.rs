use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimizer memory. Empty moments for sgd.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub method: Method,
    pub hyper: AdamHyper,
    pub step: u64,
    pub first_moment: BTreeMap<String, Vec<f32>>,
    pub second_moment: BTreeMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(method: Method) -> Self {
        OptimizerState {
            method,
            ..Default::default()
        }
    }
}

/// Applies one in-place update to every parameter.
///
/// Every parameter must have a gradient in `grads`; the check happens before
/// anything is written, so a failed call leaves `params` untouched.
pub fn optimizer_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Vec<f32>>,
    lr: f32,
    state: &mut OptimizerState,
) -> Result<()> {
    for (name, p) in params.iter() {
        match grads.get(name) {
            None => return Err(Error::MissingGradient(name.clone())),
            Some(g) if g.len() != p.numel() => {
                return Err(Error::invalid(
                    "optimizer_step",
                    format!(
                        "gradient for `{name}` has {} values, parameter {}",
                        g.len(),
                        p.numel()
                    ),
                ))
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    match state.method {
        Method::Sgd => {
            for (name, p) in params.iter_mut() {
                let g = &grads[name];
                p.data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(w, g)| *w -= lr * g);
            }
        }
        Method::Adam => {
            let AdamHyper { beta1, beta2, eps } = state.hyper;
            let t = state.step as i32;
            let bc1 = 1.0 - (beta1 as f64).powi(t);
            let bc2 = 1.0 - (beta2 as f64).powi(t);
            let step_size = (lr as f64 / bc1) as f32;
            let bc2_sqrt = bc2.sqrt() as f32;
            for (name, p) in params.iter_mut() {
                let g = &grads[name];
                let m = state
                    .first_moment
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                let v = state
                    .second_moment
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, w: f32) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(w))])
    }

    fn grad(name: &str, g: f32) -> BTreeMap<String, Vec<f32>> {
        BTreeMap::from([(name.to_string(), vec![g])])
    }

    #[test]
    fn sgd_single_step() {
        let mut p = one("w", 1.0);
        let mut s = OptimizerState::new(Method::Sgd);
        optimizer_step(&mut p, &grad("w", 2.0), 0.1, &mut s).unwrap();
        assert!((p["w"].data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut p = one("w", 0.37);
        let mut s = OptimizerState::new(Method::Sgd);
        optimizer_step(&mut p, &grad("w", 0.0), 0.5, &mut s).unwrap();
        assert_eq!(p["w"].data()[0], 0.37);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m = 0.1, v = 0.001 → m̂ = 1, v̂ = 1 → Δ = lr / (1 + eps).
        let lr = 1e-3f32;
        let mut p = one("w", 0.0);
        let mut s = OptimizerState::new(Method::Adam);
        optimizer_step(&mut p, &grad("w", 1.0), lr, &mut s).unwrap();
        let delta = -p["w"].data()[0];
        assert!((delta - lr).abs() < 1e-6 * lr + 1e-9, "{delta}");
        assert_eq!(s.step, 1);
        assert!((s.first_moment["w"][0] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn missing_gradient_is_rejected_without_update() {
        let mut p = one("w", 1.0);
        p.insert("b".into(), Tensor::scalar(2.0));
        let mut s = OptimizerState::new(Method::Sgd);
        let err = optimizer_step(&mut p, &grad("w", 1.0), 0.1, &mut s).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "b"));
        assert_eq!(p["w"].data()[0], 1.0);
        assert_eq!(s.step, 0);
    }
}
