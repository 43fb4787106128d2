//! Define-by-run recording tape.
//!
//! A fresh tape is built for every forward pass. Leaves enter through
//! [`Tape::constant`] (no gradient) or [`Tape::variable`] (gradient tracked);
//! every op computes its value eagerly and, when any input is tracked,
//! records the step needed to reverse it. [`Tape::backward`] replays the
//! steps in exact reverse recording order and accumulates gradients; running
//! it twice without re-recording is an error.

use super::kernels;
use super::{axis_split, numel, Tensor};
use crate::error::TensorError;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
}

enum Step {
    Add { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { x: TensorId, k: f32, out: TensorId },
    AddScalar { x: TensorId, out: TensorId },
    Matmul { a: TensorId, b: TensorId, out: TensorId, m: usize, k: usize, n: usize },
    Transpose { x: TensorId, out: TensorId, rows: usize, cols: usize },
    Reshape { x: TensorId, out: TensorId },
    Relu { x: TensorId, out: TensorId },
    Log { x: TensorId, out: TensorId },
    Mean { x: TensorId, out: TensorId, outer: usize, extent: usize, inner: usize },
    SumAll { x: TensorId, out: TensorId },
    MeanOf { xs: Vec<TensorId>, out: TensorId },
    L2Normalize { x: TensorId, out: TensorId, outer: usize, extent: usize, inner: usize, denoms: Vec<f32> },
    SoftmaxTemp { x: TensorId, out: TensorId, outer: usize, extent: usize, inner: usize, tau: f32 },
    Conv2d { x: TensorId, w: TensorId, b: TensorId, out: TensorId, pad: usize },
    MaxPool2d { x: TensorId, out: TensorId, argmax: Vec<usize> },
    Gather { x: TensorId, out: TensorId, indices: Vec<usize> },
    CrossEntropy { logits: TensorId, out: TensorId, targets: Vec<usize> },
    BroadcastRows { x: TensorId, out: TensorId, rows: usize },
    StackRows { xs: Vec<TensorId>, out: TensorId },
}

/// Zero-norm guard for [`Tape::l2_normalize`]: slices with L2 norm below this
/// are divided by the guard itself instead of their norm.
pub const L2_NORM_EPSILON: f32 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    steps: Vec<Step>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
        });
        id
    }

    /// Leaf that stays outside differentiation (inputs, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, false)
    }

    /// Leaf whose gradient is wanted (parameters, probed inputs).
    pub fn variable(&mut self, value: Tensor) -> TensorId {
        self.push(value, true)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the backward root w.r.t. this node. `None` for constants
    /// and for nodes the root does not reach.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn record(&mut self, value: Tensor, inputs: &[TensorId], step: impl FnOnce(TensorId) -> Step) -> TensorId {
        let tracked = self.needs(inputs);
        let out = self.push(value, tracked);
        if tracked {
            let s = step(out);
            self.steps.push(s);
        }
        out
    }

    fn accumulate(&mut self, id: TensorId, delta: &[f32]) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        let grad = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.value.numel()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    // ── ops ──────────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(value, &[a, b], |out| Step::Add { a, b, out }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(value, &[a, b], |out| Step::Mul { a, b, out }))
    }

    pub fn scale(&mut self, x: TensorId, k: f32) -> TensorId {
        let data = self.value(x).data().iter().map(|v| v * k).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.record(value, &[x], |out| Step::Scale { x, k, out })
    }

    pub fn add_scalar(&mut self, x: TensorId, k: f32) -> TensorId {
        let data = self.value(x).data().iter().map(|v| v + k).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.record(value, &[x], |out| Step::AddScalar { x, out })
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0f32; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut data, m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.record(value, &[a, b], |out| Step::Matmul { a, b, out, m, k, n }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::Dimension {
                op: "transpose",
                expected: "rank-2 tensor".into(),
                got: s.to_vec(),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let mut data = vec![0.0f32; rows * cols];
        kernels::transpose(self.value(x).data(), &mut data, rows, cols);
        let value = Tensor::new(vec![cols, rows], data)?;
        Ok(self.record(value, &[x], |out| Step::Transpose { x, out, rows, cols }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        if numel(shape) != self.value(x).numel() {
            return Err(TensorError::Dimension {
                op: "reshape",
                expected: format!("shape with {} elements", self.value(x).numel()),
                got: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        Ok(self.record(value, &[x], |out| Step::Reshape { x, out }))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.record(value, &[x], |out| Step::Relu { x, out })
    }

    /// Natural log; caller guarantees positive inputs.
    pub fn log(&mut self, x: TensorId) -> TensorId {
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.record(value, &[x], |out| Step::Log { x, out })
    }

    /// Arithmetic mean along `axis`; the axis is dropped from the shape.
    pub fn mean(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        let (outer, extent, inner) = axis_split(&shape, axis, "mean")?;
        let src = self.value(x).data();
        let mut data = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let scale = 1.0 / extent as f32;
        for v in &mut data {
            *v *= scale;
        }
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.record(value, &[x], |out| Step::Mean { x, out, outer, extent, inner }))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f32 = self.value(x).data().iter().sum();
        let value = Tensor::scalar(s);
        self.record(value, &[x], |out| Step::SumAll { x, out })
    }

    /// Elementwise mean of several same-shaped tensors.
    pub fn mean_of(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        let first = *xs.first().ok_or(TensorError::Dimension {
            op: "mean_of",
            expected: "at least one input".into(),
            got: vec![],
        })?;
        for &x in &xs[1..] {
            self.same_shape("mean_of", first, x)?;
        }
        let n = self.value(first).numel();
        let mut data = vec![0.0f32; n];
        for &x in xs {
            for (d, v) in data.iter_mut().zip(self.value(x).data()) {
                *d += v;
            }
        }
        // divide, don't multiply by a rounded reciprocal: sum-then-divide
        // must reproduce the obvious oracle bit for bit
        let count = xs.len() as f32;
        for d in &mut data {
            *d /= count;
        }
        let value = Tensor::new(self.shape(first).to_vec(), data)?;
        let xs = xs.to_vec();
        Ok(self.record(value, &xs.clone(), |out| Step::MeanOf { xs, out }))
    }

    /// Unit-L2 slices along `axis`; slices with norm below [`L2_NORM_EPSILON`]
    /// are divided by the guard instead.
    pub fn l2_normalize(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        let (outer, extent, inner) = axis_split(&shape, axis, "l2_normalize")?;
        let src = self.value(x).data();
        let mut data = vec![0.0f32; src.len()];
        let mut denoms = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut sq = 0.0f32;
                for e in 0..extent {
                    let v = src[(o * extent + e) * inner + i];
                    sq += v * v;
                }
                let norm = sq.sqrt();
                let denom = if norm < L2_NORM_EPSILON { L2_NORM_EPSILON } else { norm };
                denoms[o * inner + i] = denom;
                let inv = 1.0 / denom;
                for e in 0..extent {
                    let idx = (o * extent + e) * inner + i;
                    data[idx] = src[idx] * inv;
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, &[x], |out| Step::L2Normalize { x, out, outer, extent, inner, denoms }))
    }

    /// Temperature softmax along `axis`: exp((x - max)/tau) normalized per lane.
    pub fn softmax_temp(&mut self, x: TensorId, axis: usize, tau: f32) -> Result<TensorId, TensorError> {
        if !(tau > 0.0) {
            return Err(TensorError::Parameter {
                op: "softmax_temp",
                name: "tau",
                value: tau,
            });
        }
        let shape = self.shape(x).to_vec();
        let (outer, extent, inner) = axis_split(&shape, axis, "softmax_temp")?;
        let src = self.value(x).data();
        let mut data = vec![0.0f32; src.len()];
        let mut lane = vec![0.0f32; extent];
        let mut lane_out = vec![0.0f32; extent];
        for o in 0..outer {
            for i in 0..inner {
                for e in 0..extent {
                    lane[e] = src[(o * extent + e) * inner + i];
                }
                kernels::softmax_lane(&lane, tau, &mut lane_out);
                for e in 0..extent {
                    data[(o * extent + e) * inner + i] = lane_out[e];
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, &[x], |out| Step::SoftmaxTemp { x, out, outer, extent, inner, tau }))
    }

    /// Stride-1 2-D convolution with zero padding `pad`.
    /// x: (c_in, h, w), w: (c_out, c_in, kh, kw), b: (c_out).
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, b: TensorId, pad: usize) -> Result<TensorId, TensorError> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if sb.len() != 1 || sb[0] != sw[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: sb,
                rhs: sw,
            });
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad + 1 <= kh || wd + 2 * pad + 1 <= kw {
            return Err(TensorError::Dimension {
                op: "conv2d",
                expected: format!("input at least {}x{} after padding {}", kh, kw, pad),
                got: vec![h, wd],
            });
        }
        let out_h = h + 2 * pad + 1 - kh;
        let out_w = wd + 2 * pad + 1 - kw;
        let kdim = c_in * kh * kw;
        let cols = out_h * out_w;
        let mut patches = vec![0.0f32; kdim * cols];
        kernels::im2col(self.value(x).data(), c_in, h, wd, kh, kw, pad, &mut patches);
        let mut data = vec![0.0f32; c_out * cols];
        kernels::matmul(self.value(w).data(), &patches, &mut data, c_out, kdim, cols);
        let bias = self.value(b).data();
        for c in 0..c_out {
            let bv = bias[c];
            for v in &mut data[c * cols..(c + 1) * cols] {
                *v += bv;
            }
        }
        let value = Tensor::new(vec![c_out, out_h, out_w], data)?;
        Ok(self.record(value, &[x, w, b], |out| Step::Conv2d { x, w, b, out, pad }))
    }

    /// 2x2 max pooling with stride 2; extents must be even.
    pub fn maxpool2d(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(TensorError::Dimension {
                op: "maxpool2d",
                expected: "(c, even h, even w)".into(),
                got: s,
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut data = vec![0.0f32; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = (ch * h + 2 * oy) * w + 2 * ox;
                    let mut best = src[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    data[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], data)?;
        Ok(self.record(value, &[x], |out| Step::MaxPool2d { x, out, argmax }))
    }

    /// Row gather on a 2-D tensor: out[i] = x[i, indices[i]].
    pub fn gather(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != indices.len() {
            return Err(TensorError::Dimension {
                op: "gather",
                expected: format!("rank-2 tensor with {} rows", indices.len()),
                got: s,
            });
        }
        let cols = s[1];
        for &idx in indices {
            if idx >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: idx,
                    extent: cols,
                });
            }
        }
        let src = self.value(x).data();
        let data: Vec<f32> = indices.iter().enumerate().map(|(i, &j)| src[i * cols + j]).collect();
        let value = Tensor::new(vec![indices.len()], data)?;
        let indices = indices.to_vec();
        Ok(self.record(value, &[x], |out| Step::Gather { x, out, indices }))
    }

    /// Sum over rows of -log softmax(row)[target]; log-softmax is applied
    /// internally with max subtraction.
    pub fn cross_entropy_from_logits(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId, TensorError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::Dimension {
                op: "cross_entropy_from_logits",
                expected: format!("rank-2 logits with {} rows", targets.len()),
                got: s,
            });
        }
        let cols = s[1];
        for &t in targets {
            if t >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_from_logits",
                    index: t,
                    extent: cols,
                });
            }
        }
        let src = self.value(logits).data();
        let mut total = 0.0f32;
        for (i, &t) in targets.iter().enumerate() {
            let row = &src[i * cols..(i + 1) * cols];
            total += kernels::log_sum_exp(row) - row[t];
        }
        let value = Tensor::scalar(total);
        let targets = targets.to_vec();
        Ok(self.record(value, &[logits], |out| Step::CrossEntropy { logits, out, targets }))
    }

    /// Repeat a length-n vector (or 1 x n row) into a (rows, n) matrix.
    pub fn broadcast_rows(&mut self, x: TensorId, rows: usize) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        let n = match s.as_slice() {
            [n] => *n,
            [1, n] => *n,
            _ => {
                return Err(TensorError::Dimension {
                    op: "broadcast_rows",
                    expected: "vector or single-row matrix".into(),
                    got: s,
                })
            }
        };
        let src = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(&src);
        }
        let value = Tensor::new(vec![rows, n], data)?;
        Ok(self.record(value, &[x], |out| Step::BroadcastRows { x, out, rows }))
    }

    /// Stack same-length vectors (or 1 x n rows) as the rows of a matrix.
    pub fn stack_rows(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        let first = *xs.first().ok_or(TensorError::Dimension {
            op: "stack_rows",
            expected: "at least one input".into(),
            got: vec![],
        })?;
        let n = self.value(first).numel();
        let mut data = Vec::with_capacity(xs.len() * n);
        for &x in xs {
            if self.value(x).numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(x).to_vec(),
                });
            }
            data.extend_from_slice(self.value(x).data());
        }
        let value = Tensor::new(vec![xs.len(), n], data)?;
        let xs = xs.to_vec();
        Ok(self.record(value, &xs.clone(), |out| Step::StackRows { xs, out }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Populates gradients for every
    /// tracked node the root reaches; constants never receive gradients.
    pub fn backward(&mut self, root: TensorId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: root_node.value.shape().to_vec(),
            });
        }
        self.backward_done = true;
        if !root_node.needs_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for si in (0..self.steps.len()).rev() {
            self.backward_step(si);
        }
        Ok(())
    }

    fn out_grad(&self, out: TensorId) -> Option<Vec<f32>> {
        self.nodes[out.0].grad.clone()
    }

    fn backward_step(&mut self, si: usize) {
        let step = std::mem::replace(&mut self.steps[si], Step::SumAll {
            x: TensorId(0),
            out: TensorId(0),
        });
        match &step {
            Step::Add { a, b, out } => {
                if let Some(g) = self.out_grad(*out) {
                    self.accumulate(*a, &g);
                    self.accumulate(*b, &g);
                }
            }
            Step::Mul { a, b, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let da: Vec<f32> = g.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    let db: Vec<f32> = g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(*a, &da);
                    self.accumulate(*b, &db);
                }
            }
            Step::Scale { x, k, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let dx: Vec<f32> = g.iter().map(|g| g * k).collect();
                    self.accumulate(*x, &dx);
                }
            }
            Step::AddScalar { x, out } => {
                if let Some(g) = self.out_grad(*out) {
                    self.accumulate(*x, &g);
                }
            }
            Step::Matmul { a, b, out, m, k, n } => {
                if let Some(g) = self.out_grad(*out) {
                    let mut da = vec![0.0f32; m * k];
                    kernels_matmul_bt(&g, self.value(*b).data(), &mut da, *m, *n, *k);
                    self.accumulate(*a, &da);
                    let mut db = vec![0.0f32; k * n];
                    kernels_matmul_at(self.value(*a).data(), &g, &mut db, *k, *m, *n);
                    self.accumulate(*b, &db);
                }
            }
            Step::Transpose { x, out, rows, cols } => {
                if let Some(g) = self.out_grad(*out) {
                    let mut dx = vec![0.0f32; rows * cols];
                    kernels::transpose(&g, &mut dx, *cols, *rows);
                    self.accumulate(*x, &dx);
                }
            }
            Step::Reshape { x, out } => {
                if let Some(g) = self.out_grad(*out) {
                    self.accumulate(*x, &g);
                }
            }
            Step::Relu { x, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let dx: Vec<f32> = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Step::Log { x, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let dx: Vec<f32> = g.iter().zip(self.value(*x).data()).map(|(g, v)| g / v).collect();
                    self.accumulate(*x, &dx);
                }
            }
            Step::Mean { x, out, outer, extent, inner } => {
                if let Some(g) = self.out_grad(*out) {
                    let scale = 1.0 / *extent as f32;
                    let mut dx = vec![0.0f32; outer * extent * inner];
                    for o in 0..*outer {
                        for e in 0..*extent {
                            let base = (o * extent + e) * inner;
                            for i in 0..*inner {
                                dx[base + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Step::SumAll { x, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let dx = vec![g[0]; self.value(*x).numel()];
                    self.accumulate(*x, &dx);
                }
            }
            Step::MeanOf { xs, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let scale = 1.0 / xs.len() as f32;
                    let dx: Vec<f32> = g.iter().map(|g| g * scale).collect();
                    for &x in xs {
                        self.accumulate(x, &dx);
                    }
                }
            }
            Step::L2Normalize { x, out, outer, extent, inner, denoms } => {
                if let Some(g) = self.out_grad(*out) {
                    let y = self.value(*out).data();
                    let mut dx = vec![0.0f32; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let denom = denoms[o * inner + i];
                            // Guarded slices use a constant denominator; the
                            // normalized branch removes the radial component.
                            if denom <= L2_NORM_EPSILON {
                                for e in 0..*extent {
                                    let idx = (o * extent + e) * inner + i;
                                    dx[idx] = g[idx] / denom;
                                }
                            } else {
                                let mut dot = 0.0f32;
                                for e in 0..*extent {
                                    let idx = (o * extent + e) * inner + i;
                                    dot += g[idx] * y[idx];
                                }
                                for e in 0..*extent {
                                    let idx = (o * extent + e) * inner + i;
                                    dx[idx] = (g[idx] - y[idx] * dot) / denom;
                                }
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Step::SoftmaxTemp { x, out, outer, extent, inner, tau } => {
                if let Some(g) = self.out_grad(*out) {
                    let y = self.value(*out).data();
                    let mut dx = vec![0.0f32; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let mut dot = 0.0f32;
                            for e in 0..*extent {
                                let idx = (o * extent + e) * inner + i;
                                dot += g[idx] * y[idx];
                            }
                            for e in 0..*extent {
                                let idx = (o * extent + e) * inner + i;
                                dx[idx] = y[idx] * (g[idx] - dot) / tau;
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Step::Conv2d { x, w, b, out, pad } => {
                if let Some(g) = self.out_grad(*out) {
                    let sx = self.shape(*x).to_vec();
                    let sw = self.shape(*w).to_vec();
                    let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
                    let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
                    let out_h = h + 2 * pad + 1 - kh;
                    let out_w = wd + 2 * pad + 1 - kw;
                    let kdim = c_in * kh * kw;
                    let cols = out_h * out_w;
                    // bias: sum of output grad per channel
                    let mut db = vec![0.0f32; c_out];
                    for c in 0..c_out {
                        db[c] = g[c * cols..(c + 1) * cols].iter().sum();
                    }
                    self.accumulate(*b, &db);
                    // weights: g . patches^T, patches recomputed from the input
                    let mut patches = vec![0.0f32; kdim * cols];
                    kernels::im2col(self.value(*x).data(), c_in, h, wd, kh, kw, *pad, &mut patches);
                    let mut dw = vec![0.0f32; c_out * kdim];
                    kernels_matmul_bt(&g, &patches, &mut dw, c_out, cols, kdim);
                    self.accumulate(*w, &dw);
                    // input: W^T . g scattered back through the patch layout
                    if self.nodes[x.0].needs_grad {
                        let mut dcols = vec![0.0f32; kdim * cols];
                        kernels_matmul_at(self.value(*w).data(), &g, &mut dcols, kdim, c_out, cols);
                        let mut dx = vec![0.0f32; c_in * h * wd];
                        kernels::col2im_acc(&dcols, c_in, h, wd, kh, kw, *pad, &mut dx);
                        self.accumulate(*x, &dx);
                    }
                }
            }
            Step::MaxPool2d { x, out, argmax } => {
                if let Some(g) = self.out_grad(*out) {
                    let mut dx = vec![0.0f32; self.value(*x).numel()];
                    for (o, &src_idx) in argmax.iter().enumerate() {
                        dx[src_idx] += g[o];
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Step::Gather { x, out, indices } => {
                if let Some(g) = self.out_grad(*out) {
                    let cols = self.shape(*x)[1];
                    let mut dx = vec![0.0f32; self.value(*x).numel()];
                    for (i, &j) in indices.iter().enumerate() {
                        dx[i * cols + j] += g[i];
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Step::CrossEntropy { logits, out, targets } => {
                if let Some(g) = self.out_grad(*out) {
                    let src = self.value(*logits).data();
                    let cols = self.shape(*logits)[1];
                    let mut dx = vec![0.0f32; src.len()];
                    let mut probs = vec![0.0f32; cols];
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &src[i * cols..(i + 1) * cols];
                        kernels::softmax_lane(row, 1.0, &mut probs);
                        for j in 0..cols {
                            dx[i * cols + j] = g[0] * (probs[j] - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                    self.accumulate(*logits, &dx);
                }
            }
            Step::BroadcastRows { x, out, rows } => {
                if let Some(g) = self.out_grad(*out) {
                    let n = self.value(*x).numel();
                    let mut dx = vec![0.0f32; n];
                    for r in 0..*rows {
                        for i in 0..n {
                            dx[i] += g[r * n + i];
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Step::StackRows { xs, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let n = self.value(xs[0]).numel();
                    for (r, &x) in xs.iter().enumerate() {
                        self.accumulate(x, &g[r * n..(r + 1) * n]);
                    }
                }
            }
        }
        self.steps[si] = step;
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }
}

/// out = a(m x k) . b(n x k)^T; rows of `a` dotted with rows of `b`.
fn kernels_matmul_bt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if m * k * n >= 3_000_000 {
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), 1, k as isize,
                0.0,
                out.as_mut_ptr(), n as isize, 1,
            );
        }
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

/// out = a(k x m)^T . b(k x n).
fn kernels_matmul_at(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m * k * n >= 3_000_000 {
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0,
                a.as_ptr(), 1, m as isize,
                b.as_ptr(), n as isize, 1,
                0.0,
                out.as_mut_ptr(), n as isize, 1,
            );
        }
        return;
    }
    out.fill(0.0);
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a[kk * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
