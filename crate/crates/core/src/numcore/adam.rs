//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
    t: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[Tensor2]) -> Self {
        let zeros = |p: &Tensor2| Tensor2::zeros(p.rows(), p.cols());
        AdamState {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor2] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor2] {
        &self.v
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [Tensor2], grads: &[Tensor2], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
    }

    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor2::from_rows(&[vec![1.0, -2.0]])];
        let before = params.clone();
        let mut state = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            adam_step(&mut params, &[Tensor2::zeros(1, 2)], &mut state).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = vec![Tensor2::zeros(1, 3)];
        let grads = [Tensor2::from_rows(&[vec![2.5, -0.01, 40.0]])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        adam_step(&mut params, &grads, &mut state).unwrap();
        for (&p, &g) in params[0].data().iter().zip(grads[0].data()) {
            assert_eq!(p.signum(), -g.signum());
            assert!((p.abs() - 1e-3).abs() < 1e-8, "{p}");
        }
    }

    #[test]
    fn three_steps_match_scalar_reference() {
        // Hand-rolled scalar Adam, independent of the tensor loop above.
        let (lr, b1, b2, eps) = (1e-3_f64, 0.9_f64, 0.999_f64, 1e-8_f64);
        let (mut x, mut m, mut v) = (0.5_f64, 0.0_f64, 0.0_f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            expected.push(x);
        }

        let mut params = vec![Tensor2::scalar(0.5)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        for want in expected {
            adam_step(&mut params, &[Tensor2::scalar(1.0)], &mut state).unwrap();
            assert!((params[0].data()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor2::zeros(2, 2)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        assert!(adam_step(&mut params, &[Tensor2::zeros(2, 3)], &mut state).is_err());
        assert!(adam_step(&mut params, &[], &mut state).is_err());
        assert_eq!(state.step_count(), 0);
    }
}
