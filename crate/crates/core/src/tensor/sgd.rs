//! SGD with momentum and weight decay.

use crate::error::TensorError;

/// One update: v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
pub fn sgd_step(
    param: &mut [f32],
    grad: &[f32],
    velocity: &mut [f32],
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<(), TensorError> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(TensorError::ShapeMismatch {
            op: "sgd_step",
            lhs: vec![param.len()],
            rhs: vec![grad.len()],
        });
    }
    if !(lr > 0.0) {
        return Err(TensorError::Parameter {
            op: "sgd_step",
            name: "lr",
            value: lr,
        });
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Optimizer state: one velocity buffer per parameter, lazily sized.
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Steps every (param, grad) pair in order; pairs are matched to velocity
    /// slots positionally, so the call order must stay stable across steps.
    pub fn step(&mut self, pairs: &mut [(&mut [f32], &[f32])]) -> Result<(), TensorError> {
        while self.velocity.len() < pairs.len() {
            let idx = self.velocity.len();
            self.velocity.push(vec![0.0; pairs[idx].0.len()]);
        }
        for (i, (param, grad)) in pairs.iter_mut().enumerate() {
            sgd_step(
                param,
                grad,
                &mut self.velocity[i],
                self.lr,
                self.momentum,
                self.weight_decay,
            )?;
        }
        Ok(())
    }
}
