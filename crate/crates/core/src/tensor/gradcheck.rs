//! Central finite-difference verification of tape gradients.
//!
//! The oracle only ever runs forward passes: it perturbs one input element at
//! a time and differences the scalar loss, never touching the backward rules
//! it is checking. Losses are differenced in f64 to keep quantization noise
//! out of the quotient; the computation itself stays in f32.

use super::tape::Tape;
use super::{Tensor, TensorId};

/// Step size for central differences on 32-bit values.
pub const FD_STEP: f32 = 1e-3;

/// Relative error with a unit floor: |a-b| / max(1, |a|, |b|). The floor keeps
/// f32 round-off on small gradients from drowning the comparison.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Outcome of one finite-difference sweep over a single input tensor.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub label: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl std::fmt::Display for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} elements, max rel err {:.3e} (tol {:.1e}) {}",
            self.label,
            self.checked,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Checks d(loss)/d(inputs[probe]) against central differences.
///
/// `build` receives a fresh tape plus the current inputs and returns the
/// scalar loss node; it runs once for the analytic gradient and twice per
/// probed element for the numeric one.
pub fn check_gradient(
    label: &str,
    inputs: &[Tensor],
    probe: usize,
    tolerance: f64,
    build: &dyn Fn(&mut Tape, &[TensorId]) -> TensorId,
) -> GradCheck {
    let forward = |tensors: &[Tensor]| -> (Tape, Vec<TensorId>, TensorId) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        (tape, ids, loss)
    };

    let (mut tape, ids, loss) = forward(inputs);
    tape.backward(loss).expect("gradcheck backward");
    let analytic: Vec<f32> = tape
        .grad(ids[probe])
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; inputs[probe].numel()]);

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let n = inputs[probe].numel();
    for i in 0..n {
        let original = inputs[probe].data()[i];
        work[probe].data_mut()[i] = original + FD_STEP;
        let (tape_p, _, loss_p) = forward(&work);
        let up = tape_p.value(loss_p).item() as f64;
        work[probe].data_mut()[i] = original - FD_STEP;
        let (tape_m, _, loss_m) = forward(&work);
        let down = tape_m.value(loss_m).item() as f64;
        work[probe].data_mut()[i] = original;
        let numeric = (up - down) / (2.0 * FD_STEP as f64);
        let rel = rel_error(analytic[i] as f64, numeric);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    GradCheck {
        label: label.to_string(),
        checked: n,
        max_rel_error: max_rel,
        tolerance,
    }
}
