use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Adam hyperparameters. The defaults are the usual `beta1 = 0.9`,
/// `beta2 = 0.999`, `epsilon = 1e-7`, learning rate `1e-3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Optimizer state for a fixed, ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// `param_sizes` gives the element count of each parameter, in the order
    /// they will be passed to [`adam_step`].
    pub fn new(config: AdamConfig, param_sizes: &[usize]) -> Result<Self> {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = config;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return invalid(format!("Adam betas ({beta1}, {beta2}) must lie in [0, 1)"));
        }
        if epsilon.is_nan() || epsilon <= 0.0 || learning_rate.is_nan() || learning_rate <= 0.0 {
            return invalid("Adam epsilon and learning rate must be positive");
        }
        Ok(Self {
            config,
            step_count: 0,
            first_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }
}

/// One bias-corrected Adam update, `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
///
/// Every parameter must carry a gradient. Gradients are left in place; the
/// caller clears them before the next accumulation.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return invalid(format!(
            "Adam state tracks {} parameters, got {}",
            state.first_moment.len(),
            params.len()
        ));
    }
    for (i, p) in params.iter().enumerate() {
        match p.grad() {
            None => {
                return Err(Error::InvalidState(format!(
                    "parameter {i} has no gradient"
                )))
            }
            Some(_) if p.numel() != state.first_moment[i].len() => {
                return invalid(format!("parameter {i} changed size"));
            }
            Some(_) => {}
        }
    }

    state.step_count += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    for ((p, m), v) in params
        .iter_mut()
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let grad = p.grad().expect("checked above").to_vec();
        for (((w, g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}
