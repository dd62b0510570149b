use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn for_param(param: &Tensor) -> Self {
        Self::new(param.numel())
    }

    pub fn step(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f32] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f32] {
        &self.v
    }
}

/// One bias-corrected Adam step. A non-finite gradient is rejected before
/// anything (including the step counter) changes.
pub fn adam_update(
    param: &mut Tensor,
    grad: &[f32],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    if grad.len() != param.numel() || state.m.len() != param.numel() {
        return Err(TensorError::Dimension(format!(
            "param has {} values, grad {}, state {}",
            param.numel(),
            grad.len(),
            state.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFinite("gradient passed to adam_update".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g as f64;
        let m_new = cfg.beta1 * *m as f64 + (1.0 - cfg.beta1) * g;
        let v_new = cfg.beta2 * *v as f64 + (1.0 - cfg.beta2) * g * g;
        *m = m_new as f32;
        *v = v_new as f32;
        let m_hat = m_new / bc1;
        let v_hat = v_new / bc2;
        *p = (*p as f64 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2), (2e-4, 0.9, 0.999));
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut s = AdamState::for_param(&p);
        adam_update(&mut p, &[0.0; 3], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        for g in [1.0f32, -3.0, 250.0, -1e4] {
            let mut p = Tensor::zeros(&[1]);
            let mut s = AdamState::for_param(&p);
            adam_update(&mut p, &[g], &mut s, &cfg).unwrap();
            let lr = cfg.lr as f32 as f64;
            let delta = p.data()[0] as f64;
            assert!(
                (delta + lr * g.signum() as f64).abs() <= (cfg.lr * cfg.eps).abs(),
                "g = {g}: delta {delta}"
            );
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let mut p = Tensor::full(&[2], 1.0);
        let mut s = AdamState::for_param(&p);
        let err = adam_update(&mut p, &[0.1, f32::NAN], &mut s, &AdamConfig::default());
        assert!(matches!(err, Err(TensorError::NonFinite(_))));
        assert_eq!(p.data(), &[1.0, 1.0]);
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn counter_increments_once_per_update() {
        let mut p = Tensor::full(&[2], 1.0);
        let mut s = AdamState::for_param(&p);
        for i in 1..=5 {
            adam_update(&mut p, &[0.3, -0.1], &mut s, &AdamConfig::default()).unwrap();
            assert_eq!(s.step(), i);
        }
    }
}
