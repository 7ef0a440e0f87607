use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zeroed moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .into_iter()
            .map(|p| Tensor::full(p.shape().to_vec(), T::zero()).expect("shape of an existing tensor"))
            .collect();
        OptimizerState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&[T]],
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.shape() != state.m[k].shape() {
            return Err(Error::Contract(format!(
                "parameter {k}: shape {:?}, {} gradient entries, moment shape {:?}",
                p.shape(),
                g.len(),
                state.m[k].shape()
            )));
        }
    }

    let AdamConfig { beta1, beta2, epsilon } = state.config;
    state.step += 1;
    let t = state.step as f64;
    let correction1 = 1.0 - beta1.powf(t);
    let correction2 = 1.0 - beta2.powf(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, theta) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i].as_f64();
            let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * gi;
            let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * gi * gi;
            m[i] = T::from_f64_lossy(mi);
            v[i] = T::from_f64_lossy(vi);
            let update = lr * (mi / correction1) / ((vi / correction2).sqrt() + epsilon);
            *theta = T::from_f64_lossy(theta.as_f64() - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64) -> Tensor<f64> {
        Tensor::from_f64(vec![1], &[value]).unwrap()
    }

    #[test]
    fn first_step_unit_gradient() {
        let mut p = one(0.0);
        let mut state = OptimizerState::new([&p], AdamConfig::default());
        adam_step(&mut [&mut p], &[&[1.0]], &mut state, 0.001).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-18, "{}", p.data()[0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.7, -0.02, 0.5, -250.0] {
            let mut p = one(1.0);
            let mut state = OptimizerState::new([&p], AdamConfig::default());
            adam_step(&mut [&mut p], &[&[g]], &mut state, 0.01).unwrap();
            let delta = p.data()[0] - 1.0;
            assert!((delta + 0.01 * f64::signum(g)).abs() < 0.01 * 1e-6, "g={g}: {delta}");
        }
    }

    #[test]
    fn zero_gradient_fresh_state_is_a_no_op() {
        let mut p = Tensor::from_f64(vec![3], &[0.5, -2.0, 7.0]).unwrap();
        let before = p.clone();
        let mut state = OptimizerState::new([&p], AdamConfig::default());
        adam_step(&mut [&mut p], &[&[0.0; 3]], &mut state, 0.001).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut p = one(0.0);
        let mut state = OptimizerState::new([&p], AdamConfig::default());
        assert!(matches!(
            adam_step(&mut [&mut p], &[&[1.0, 2.0]], &mut state, 0.001),
            Err(Error::Contract(_))
        ));
        assert!(matches!(adam_step(&mut [&mut p], &[], &mut state, 0.001), Err(Error::Contract(_))));
    }
}
