use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for a list of parameter slices.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    config: AdamConfig,
    learning_rates: Vec<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    /// One moment buffer per parameter of the given length.
    pub fn new(lengths: &[usize], config: AdamConfig) -> Result<Self> {
        let valid = config.learning_rate >= 0.0
            && config.learning_rate.is_finite()
            && (0.0..1.0).contains(&config.beta1)
            && (0.0..1.0).contains(&config.beta2)
            && config.epsilon > 0.0;
        if !valid {
            return Err(Error::Config(format!("invalid Adam settings: {config:?}")));
        }
        Ok(Self {
            config,
            learning_rates: vec![config.learning_rate; lengths.len()],
            m: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            v: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        })
    }

    /// Overrides the step size for one parameter.
    pub fn set_learning_rate(&mut self, param: usize, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
        }
        let slot = self
            .learning_rates
            .get_mut(param)
            .ok_or_else(|| Error::Contract(format!("no parameter {param}")))?;
        *slot = lr;
        Ok(())
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(state: &mut OptimizerState, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters, got {} parameters and {} gradients",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != state.m[k].len() || g.len() != state.m[k].len() {
            return Err(Error::Contract(format!(
                "parameter {k}: expected {} values, got {} parameters and {} gradients",
                state.m[k].len(),
                p.len(),
                g.len()
            )));
        }
    }
    state.step += 1;
    let AdamConfig {
        beta1, beta2, epsilon, ..
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lr = state.learning_rates[k];
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut state = OptimizerState::new(&[1], cfg(0.1)).unwrap();
        let mut x = vec![0.0];
        adam_step(&mut state, &mut [x.as_mut_slice()], &[vec![1.0]]).unwrap();
        assert!((x[0] + 0.1).abs() < 1e-7, "{}", x[0]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut state = OptimizerState::new(&[3], AdamConfig::default()).unwrap();
        let mut x = vec![1.0, -2.0, 3.0];
        for _ in 0..5 {
            adam_step(&mut state, &mut [x.as_mut_slice()], &[vec![0.0; 3]]).unwrap();
        }
        assert_eq!(x, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut state = OptimizerState::new(&[1], cfg(0.1)).unwrap();
        let mut x = vec![5.0];
        for _ in 0..500 {
            let g = vec![2.0 * x[0]];
            adam_step(&mut state, &mut [x.as_mut_slice()], &[g]).unwrap();
        }
        assert!(x[0].abs() < 1e-3, "{}", x[0]);
    }

    #[test]
    fn per_parameter_rate() {
        let mut state = OptimizerState::new(&[1, 1], cfg(0.1)).unwrap();
        state.set_learning_rate(1, 0.0).unwrap();
        let (mut a, mut b) = (vec![0.0], vec![0.0]);
        adam_step(&mut state, &mut [a.as_mut_slice(), b.as_mut_slice()], &[vec![1.0], vec![1.0]]).unwrap();
        assert!(a[0] < 0.0);
        assert_eq!(b[0], 0.0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut state = OptimizerState::new(&[2], AdamConfig::default()).unwrap();
        let mut x = vec![0.0; 3];
        assert!(matches!(
            adam_step(&mut state, &mut [x.as_mut_slice()], &[vec![0.0; 3]]),
            Err(Error::Contract(_))
        ));
    }
}
