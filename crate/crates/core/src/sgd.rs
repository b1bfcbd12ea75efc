//! SGD with heavy-ball momentum and coupled weight decay.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("optimizer hyper-parameters must be finite and non-negative (learning rate positive or zero)")]
    InvalidConfig,
    #[error(transparent)]
    Shape(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = [self.learning_rate, self.momentum, self.weight_decay]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(OptimError::InvalidConfig)
        }
    }
}

/// Velocity buffer for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    velocity: Matrix,
}

impl OptimState {
    pub fn zeros_like(param: &Matrix) -> Self {
        Self {
            velocity: Matrix::zeros(param.rows(), param.cols()),
        }
    }

    pub fn velocity(&self) -> &Matrix {
        &self.velocity
    }
}

/// One update: `g = grad + λ·param; v = μ·v + g; param -= η·v`.
///
/// `decay` selects whether weight decay applies to this tensor.
pub fn step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut OptimState,
    cfg: &OptimConfig,
    decay: bool,
) -> Result<(), OptimError> {
    if param.shape() != grad.shape() || param.shape() != state.velocity.shape() {
        return Err(LinalgError::DimensionMismatch {
            op: "sgd step",
            left: param.shape(),
            right: grad.shape(),
        }
        .into());
    }
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    let v = state.velocity.as_mut_slice();
    let p = param.as_mut_slice();
    for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(grad.as_slice()) {
        let g = gi + wd * *pi;
        *vi = cfg.momentum * *vi + g;
        *pi -= cfg.learning_rate * *vi;
    }
    Ok(())
}
