use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Hyper-parameters of momentum SGD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self, prefix: &str, problems: &mut Vec<String>) {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("{prefix}.lr must be a non-negative number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("{prefix}.momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!("{prefix}.weight_decay must be non-negative"));
        }
    }
}

/// Momentum SGD state; velocity buffers are created on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    velocity: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(config: SgdConfig) -> Self {
        OptimizerState {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Matrix] {
        &self.velocity
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

/// One step of classical momentum with the L2 term folded into the gradient:
/// `v ← m·v + g + wd·θ`, `θ ← θ − lr·v`.
///
/// Nothing is modified if any gradient entry is non-finite.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Matrix>,
    grads: impl IntoIterator<Item = &'a Matrix>,
    state: &mut OptimizerState,
) -> Result<()> {
    let mut params: Vec<&mut Matrix> = params.into_iter().collect();
    let grads: Vec<&Matrix> = grads.into_iter().collect();
    if params.len() != grads.len() {
        return Err(Error::invalid(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(&grads) {
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient shape {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::numerical("non-finite gradient"));
        }
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    } else if state.velocity.len() != params.len()
        || state.velocity.iter().zip(&params).any(|(v, p)| v.shape() != p.shape())
    {
        return Err(Error::InvalidState(
            "optimizer velocity does not match parameters".into(),
        ));
    }

    let SgdConfig {
        learning_rate: lr,
        momentum,
        weight_decay,
    } = state.config;
    for ((p, g), v) in params.iter_mut().zip(&grads).zip(state.velocity.iter_mut()) {
        let pv = p.as_mut_slice();
        for ((theta, &gi), vi) in pv.iter_mut().zip(g.as_slice()).zip(v.as_mut_slice()) {
            *vi = momentum * *vi + gi + weight_decay * *theta;
            *theta -= lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Matrix {
        Matrix::filled(1, 1, v)
    }

    #[test]
    fn plain_step() {
        let mut state = OptimizerState::new(SgdConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
        });
        let mut theta = scalar(1.0);
        sgd_step([&mut theta], [&scalar(0.5)], &mut state).unwrap();
        assert_eq!(theta[(0, 0)], 0.5);
    }

    #[test]
    fn momentum_recurrence() {
        let lr = 0.1;
        let mut state = OptimizerState::new(SgdConfig {
            learning_rate: lr,
            momentum: 0.9,
            weight_decay: 0.0,
        });
        let mut theta = scalar(0.0);
        let g = scalar(1.0);
        sgd_step([&mut theta], [&g], &mut state).unwrap();
        assert_eq!(state.velocity()[0][(0, 0)], 1.0);
        sgd_step([&mut theta], [&g], &mut state).unwrap();
        assert!((state.velocity()[0][(0, 0)] - 1.9).abs() < 1e-15);
        assert!((theta[(0, 0)] + lr * 2.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut state = OptimizerState::new(SgdConfig::default());
        let mut theta = scalar(3.25);
        for _ in 0..3 {
            sgd_step([&mut theta], [&scalar(0.0)], &mut state).unwrap();
        }
        assert_eq!(theta[(0, 0)], 3.25);
    }

    #[test]
    fn non_finite_gradient_rejected_untouched() {
        let mut state = OptimizerState::new(SgdConfig::default());
        let mut theta = scalar(1.0);
        let err = sgd_step([&mut theta], [&scalar(f64::NAN)], &mut state).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert_eq!(theta[(0, 0)], 1.0);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut state = OptimizerState::new(SgdConfig {
            learning_rate: 0.5,
            momentum: 0.0,
            weight_decay: 0.1,
        });
        let mut theta = scalar(2.0);
        sgd_step([&mut theta], [&scalar(0.0)], &mut state).unwrap();
        assert!((theta[(0, 0)] - 1.9).abs() < 1e-15);
    }
}
