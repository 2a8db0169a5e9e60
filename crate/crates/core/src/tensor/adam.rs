use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers for one parameter list. Built fresh per optimization run.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update. `lr == 0` updates the moments and the
/// step counter but leaves every parameter bit untouched.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(TensorError::Invalid(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(TensorError::Dimension {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    if lr.is_nan() || lr < 0.0 {
        return Err(TensorError::Invalid(format!("adam: learning rate {lr} < 0")));
    }

    state.step_count += 1;
    let AdamConfig { beta1, beta2, epsilon } = state.config;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for j in 0..g.numel() {
            let gj = g.data()[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
        }
        if lr == 0.0 {
            continue;
        }
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            pd[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_lr_is_bitwise_identity() {
        let mut params = vec![t(&[1.5, -0.0, 3.25])];
        let before = params.clone();
        let mut state = AdamState::new(&params, AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut params, &[t(&[0.3, -7.0, 1e-3])], &mut state, 0.0).unwrap();
        }
        assert!(params[0].bitwise_eq(&before[0]));
        assert_eq!(state.step_count, 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 0.01;
        let mut params = vec![t(&[0.0, 1.0, -2.0])];
        let start = params[0].clone();
        let grads = [t(&[0.5, -3.0, 0.2])];
        let mut state = AdamState::new(&params, AdamConfig::default());
        adam_step(&mut params, &grads, &mut state, lr).unwrap();
        let expected = [-lr, 1.0 + lr, -2.0 - lr];
        let moved = params[0].data().iter().zip(start.data()).zip(grads[0].data());
        for (((p, p0), g), e) in moved.zip(expected) {
            assert!((p - e).abs() <= 1e-9, "{p} vs {e}");
            // closed form of step one: lr * g / (|g| + eps)
            let exact = lr * g / (g.abs() + 1e-8);
            assert!(((p0 - p) - exact).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradients_are_a_fixed_point() {
        let mut params = vec![t(&[0.25, -4.0])];
        let before = params.clone();
        let mut state = AdamState::new(&params, AdamConfig::default());
        for _ in 0..100 {
            adam_step(&mut params, &[t(&[0.0, 0.0])], &mut state, 0.1).unwrap();
        }
        assert!(params[0].bitwise_eq(&before[0]));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![t(&[0.0, 0.0])];
        let mut state = AdamState::new(&params, AdamConfig::default());
        let err = adam_step(&mut params, &[t(&[1.0])], &mut state, 0.1).unwrap_err();
        assert!(matches!(err, TensorError::Dimension { .. }));
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn step_count_increments_by_one() {
        let mut params = vec![t(&[1.0])];
        let mut state = AdamState::new(&params, AdamConfig::default());
        for expected in 1..=4 {
            adam_step(&mut params, &[t(&[1.0])], &mut state, 1e-3).unwrap();
            assert_eq!(state.step_count, expected);
        }
    }
}
