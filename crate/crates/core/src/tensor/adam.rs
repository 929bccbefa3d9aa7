use serde::{Deserialize, Serialize};

use super::{ParamSet, Scalar};
use crate::error::{Error, Result};

/// Adam hyperparameters. Defaults are the training defaults of the fracture
/// model: learning rate 1e-4 and L2 weight decay 1e-5.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Moment estimates for every tensor of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|t| vec![T::zero(); t.len()]).collect();
        AdamState {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// One Adam update with bias correction.
///
/// Weight decay is coupled: `g ← g + wd·θ` before the moment update.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.first_moment.len() != params.len() {
        return Err(Error::shape(format!(
            "Adam state tracks {} tensors, parameter set has {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (i, t) in params.iter().enumerate() {
        if state.first_moment[i].len() != t.len() {
            return Err(Error::shape(format!(
                "Adam state for tensor {i} has the wrong length"
            )));
        }
        if t.requires_grad && t.grad().is_none() {
            return Err(Error::invalid(format!(
                "parameter {i} has no gradient; run backward before adam_step"
            )));
        }
    }
    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let b1 = T::from_f64_lossy(c.beta1);
    let b2 = T::from_f64_lossy(c.beta2);
    let one = T::one();
    let wd = T::from_f64_lossy(c.weight_decay);
    let lr = T::from_f64_lossy(c.learning_rate);
    let eps = T::from_f64_lossy(c.epsilon);
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    for (i, tensor) in params.iter_mut().enumerate() {
        if !tensor.requires_grad {
            continue;
        }
        let grad = tensor.grad().expect("checked above").to_vec();
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (j, theta) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[j] + wd * *theta;
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(values: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_f64(&[values.len()], values).unwrap());
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = single(&[0.5, -1.5]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamState::new(&p, cfg);
        for _ in 0..3 {
            p.iter_mut()
                .next()
                .unwrap()
                .set_grad(vec![0.0, 0.0])
                .unwrap();
            adam_step(&mut p, &mut st).unwrap();
        }
        assert_eq!(p.iter().next().unwrap().data(), &[0.5, -1.5]);
        assert_eq!(st.step_count, 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut p = single(&[1.0, 1.0]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let mut st = AdamState::new(&p, cfg);
        p.iter_mut()
            .next()
            .unwrap()
            .set_grad(vec![3.0, -0.2])
            .unwrap();
        adam_step(&mut p, &mut st).unwrap();
        let d = p.iter().next().unwrap().data();
        assert!((d[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((d[1] - (1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = single(&[1.0]);
        let mut st = AdamState::new(&p, AdamConfig::default());
        assert!(adam_step(&mut p, &mut st).is_err());
        assert_eq!(st.step_count, 0);
    }
}
