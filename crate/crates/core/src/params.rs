//! Named trainable parameters with persistent gradient accumulators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, TensorId};

/// A weight tensor plus its gradient accumulator. Gradients accumulate across
/// the episodes of a mini-batch and are cleared after each optimizer step.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = vec![0.0; value.numel()];
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Registers the parameter on a tape: a gradient-tracked variable while
    /// training, a constant during inference.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TensorId {
        if trainable {
            tape.variable(self.value.clone())
        } else {
            tape.constant(self.value.clone())
        }
    }

    /// Pulls this parameter's gradient off a finished tape, scaled, into the
    /// accumulator. A node the loss never reached contributes nothing.
    pub fn accumulate(&mut self, tape: &Tape, id: TensorId, scale: f32) {
        if let Some(g) = tape.grad(id) {
            for (acc, &v) in self.grad.iter_mut().zip(g) {
                *acc += v * scale;
            }
        }
    }
}

/// Fan-in scaled uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}
