//! Cross attention between a class feature map and a query feature map.
//!
//! For one (class, query) pair: a correlation layer computes the m x m matrix
//! of position-pair cosines, a meta-learned fusion kernel turns each
//! position's correlation vector into an attention logit, and a temperature
//! softmax produces an attention map per branch. The residual weighting
//! `x * (1 + A)` guarantees no position is suppressed below its input.
//!
//! Permutation behaviour: reordering the query positions permutes the columns
//! of R bit-for-bit, and permutes the query attention map and attended query
//! map the same way. The class attention map is left unchanged whenever the
//! fusion kernel has constant entries (the uniform-mean mode, or meta mode
//! with zero weights); a trained meta kernel reads the query-ordered row
//! means of R^T, so its class attention is tied to the query ordering by
//! construction. Scaling both inputs by one positive constant leaves R and
//! both attention maps unchanged and scales both attended maps by it.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{DataError, TensorError};
use crate::params::{he_uniform, Param};
use crate::tensor::{Tape, Tensor, TensorId};

/// How the fusion kernel is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// Kernel generated per pair from the pooled correlation map.
    #[default]
    Meta,
    /// Fixed mean kernel 1/m: attention is the pooled correlation map itself.
    UniformMean,
    /// One learned kernel shared across all pairs.
    LearnedStatic,
}

/// Fusion-layer parameters, shared by the class and query branches and by
/// every (class, query) pair in an episode.
#[derive(Debug, Clone)]
pub struct MetaFusion {
    pub w1: Param,
    pub w2: Param,
    /// Kernel for [`FusionMode::LearnedStatic`]; starts as the mean kernel.
    pub static_kernel: Param,
    pub positions: usize,
    pub reduction: usize,
    pub tau: f32,
    pub mode: FusionMode,
}

impl MetaFusion {
    pub fn new(
        positions: usize,
        reduction: usize,
        tau: f32,
        mode: FusionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        if reduction == 0 || positions % reduction != 0 {
            return Err(TensorError::Parameter {
                op: "meta_fusion",
                name: "reduction",
                value: reduction as f32,
            });
        }
        if !(tau > 0.0) {
            return Err(TensorError::Parameter {
                op: "meta_fusion",
                name: "tau",
                value: tau,
            });
        }
        let hidden = positions / reduction;
        // correlation row means are nonnegative for post-relu features, so a
        // sign-symmetric w1 leaves hidden units dead at init; positive w1
        // keeps the meta-learner trainable while symmetric w2 starts the
        // kernels near zero (uniform attention)
        let mut w1 = he_uniform(rng, &[hidden, positions], positions);
        for v in w1.data_mut() {
            *v = v.abs();
        }
        Ok(Self {
            w1: Param::new("fusion.w1", w1),
            w2: Param::new("fusion.w2", he_uniform(rng, &[positions, hidden], hidden)),
            static_kernel: Param::new(
                "fusion.static_kernel",
                Tensor::full(&[positions], 1.0 / positions as f32),
            ),
            positions,
            reduction,
            tau,
            mode,
        })
    }

    /// Parameters the optimizer should step in the active mode.
    pub fn params(&self) -> Vec<&Param> {
        match self.mode {
            FusionMode::Meta => vec![&self.w1, &self.w2],
            FusionMode::UniformMean => vec![],
            FusionMode::LearnedStatic => vec![&self.static_kernel],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self.mode {
            FusionMode::Meta => vec![&mut self.w1, &mut self.w2],
            FusionMode::UniformMean => vec![],
            FusionMode::LearnedStatic => vec![&mut self.static_kernel],
        }
    }

    /// Every parameter, for checkpointing regardless of mode.
    pub fn all_params(&self) -> Vec<&Param> {
        vec![&self.w1, &self.w2, &self.static_kernel]
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w1, &mut self.w2, &mut self.static_kernel]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> FusionVars {
        FusionVars {
            w1: self.w1.bind(tape, trainable && self.mode == FusionMode::Meta),
            w2: self.w2.bind(tape, trainable && self.mode == FusionMode::Meta),
            static_kernel: self
                .static_kernel
                .bind(tape, trainable && self.mode == FusionMode::LearnedStatic),
        }
    }

    pub fn accumulate(&mut self, tape: &Tape, vars: &FusionVars, scale: f32) {
        self.w1.accumulate(tape, vars.w1, scale);
        self.w2.accumulate(tape, vars.w2, scale);
        self.static_kernel.accumulate(tape, vars.static_kernel, scale);
    }
}

/// Tape bindings of [`MetaFusion`] for one forward pass.
pub struct FusionVars {
    pub w1: TensorId,
    pub w2: TensorId,
    pub static_kernel: TensorId,
}

/// Cross-attention results for one (class, query) pair, on the tape.
pub struct CamVars {
    /// Attended class map, (c, m).
    pub class_attended: TensorId,
    /// Attended query map, (c, m).
    pub query_attended: TensorId,
    /// Class attention, (1, m), sums to 1.
    pub class_attention: TensorId,
    /// Query attention, (1, m), sums to 1.
    pub query_attention: TensorId,
    /// Correlation map R, (m, m); R[i][j] = cos(p_i, q_j).
    pub correlation: TensorId,
}

/// Plain-tensor snapshot of [`CamVars`] for inference and export.
#[derive(Debug, Clone)]
pub struct CamOutput {
    pub class_attended: Tensor,
    pub query_attended: Tensor,
    /// (h, w) attention maps.
    pub class_attention: Tensor,
    pub query_attention: Tensor,
    pub correlation: Tensor,
}

/// Correlation map between two (c, h, w) feature maps: both are reshaped to
/// (c, m), every position vector is L2-normalized, and R = Pn^T Qn so that
/// R[i][j] is the cosine of class position i with query position j.
pub fn correlation(tape: &mut Tape, p: TensorId, q: TensorId) -> Result<TensorId, TensorError> {
    let (sp, sq) = (tape.shape(p).to_vec(), tape.shape(q).to_vec());
    if sp != sq {
        return Err(TensorError::ShapeMismatch {
            op: "correlation",
            lhs: sp,
            rhs: sq,
        });
    }
    let (c, m) = flat_cm(&sp, "correlation")?;
    let p2 = tape.reshape(p, &[c, m])?;
    let q2 = tape.reshape(q, &[c, m])?;
    let pn = tape.l2_normalize(p2, 0)?;
    let qn = tape.l2_normalize(q2, 0)?;
    let pt = tape.transpose(pn)?;
    tape.matmul(pt, qn)
}

/// Fusion kernel for one branch. `view` columns are the per-position
/// correlation vectors (class branch: R^T, query branch: R). In meta mode the
/// kernel is w2 . relu(w1 . rowmeans(view)); the ablation modes ignore the
/// view and return the mean kernel or the shared learned kernel.
pub fn fusion_kernel(
    tape: &mut Tape,
    view: TensorId,
    fusion: &MetaFusion,
    vars: &FusionVars,
) -> Result<TensorId, TensorError> {
    let s = tape.shape(view).to_vec();
    let m = fusion.positions;
    if s != [m, m] {
        return Err(TensorError::Dimension {
            op: "fusion_kernel",
            expected: format!("square [{m}, {m}] correlation view"),
            got: s,
        });
    }
    match fusion.mode {
        FusionMode::Meta => {
            let gap = tape.mean(view, 1)?;
            let col = tape.reshape(gap, &[m, 1])?;
            let hidden = tape.matmul(vars.w1, col)?;
            let act = tape.relu(hidden);
            let kernel = tape.matmul(vars.w2, act)?;
            tape.reshape(kernel, &[m])
        }
        FusionMode::UniformMean => Ok(tape.constant(Tensor::full(&[m], 1.0 / m as f32))),
        FusionMode::LearnedStatic => tape.reshape(vars.static_kernel, &[m]),
    }
}

/// Attention map from a correlation view and a fusion kernel: logit i is
/// w . r_i (column i of the view), softmaxed over all positions at
/// temperature tau. Returns a (1, m) row.
pub fn attention_map(
    tape: &mut Tape,
    view: TensorId,
    kernel: TensorId,
    tau: f32,
) -> Result<TensorId, TensorError> {
    let m = tape.shape(view)[0];
    let row = tape.reshape(kernel, &[1, m])?;
    let logits = tape.matmul(row, view)?;
    tape.softmax_temp(logits, 1, tau)
}

/// The full module for one (class, query) pair. One [`MetaFusion`] serves
/// both branches: the class branch reads view R^T, the query branch reads R.
pub fn cross_attend(
    tape: &mut Tape,
    p: TensorId,
    q: TensorId,
    fusion: &MetaFusion,
    vars: &FusionVars,
) -> Result<CamVars, TensorError> {
    let shape = tape.shape(p).to_vec();
    let (c, m) = flat_cm(&shape, "cross_attend")?;
    if m != fusion.positions {
        return Err(TensorError::Dimension {
            op: "cross_attend",
            expected: format!("{} spatial positions", fusion.positions),
            got: shape,
        });
    }
    let corr = correlation(tape, p, q)?;
    let class_view = tape.transpose(corr)?;
    let query_view = corr;

    let class_kernel = fusion_kernel(tape, class_view, fusion, vars)?;
    let class_attention = attention_map(tape, class_view, class_kernel, fusion.tau)?;
    let query_kernel = fusion_kernel(tape, query_view, fusion, vars)?;
    let query_attention = attention_map(tape, query_view, query_kernel, fusion.tau)?;

    let p2 = tape.reshape(p, &[c, m])?;
    let q2 = tape.reshape(q, &[c, m])?;
    let class_attended = residual_weight(tape, p2, class_attention, c)?;
    let query_attended = residual_weight(tape, q2, query_attention, c)?;

    Ok(CamVars {
        class_attended,
        query_attended,
        class_attention,
        query_attention,
        correlation: corr,
    })
}

/// x * (1 + A) with the attention row broadcast over channels.
fn residual_weight(
    tape: &mut Tape,
    x: TensorId,
    attention: TensorId,
    channels: usize,
) -> Result<TensorId, TensorError> {
    let spread = tape.broadcast_rows(attention, channels)?;
    let weighted = tape.mul(x, spread)?;
    tape.add(x, weighted)
}

/// Snapshot tape results into plain tensors, reshaping attention to (h, w).
pub fn extract_output(tape: &Tape, vars: &CamVars, h: usize, w: usize) -> CamOutput {
    let reshape_hw = |t: &Tensor| t.reshaped(&[h, w]).expect("attention is h*w");
    CamOutput {
        class_attended: tape.value(vars.class_attended).clone(),
        query_attended: tape.value(vars.query_attended).clone(),
        class_attention: reshape_hw(tape.value(vars.class_attention)),
        query_attention: reshape_hw(tape.value(vars.query_attention)),
        correlation: tape.value(vars.correlation).clone(),
    }
}

fn flat_cm(shape: &[usize], op: &'static str) -> Result<(usize, usize), TensorError> {
    match shape {
        [c, h, w] => Ok((*c, h * w)),
        [c, m] => Ok((*c, *m)),
        _ => Err(TensorError::Dimension {
            op,
            expected: "(c, h, w) or (c, m) feature map".into(),
            got: shape.to_vec(),
        }),
    }
}

/// Writes both attention maps of a pair as min-max normalized 8-bit PGM plus
/// CSVs of the raw values. `stem` gets `_class`/`_query` and the extension.
pub fn export_attention(output: &CamOutput, stem: &Path) -> Result<(), DataError> {
    for (suffix, map) in [
        ("class", &output.class_attention),
        ("query", &output.query_attention),
    ] {
        let pgm = stem.with_file_name(format!(
            "{}_{}.pgm",
            stem.file_name().unwrap_or_default().to_string_lossy(),
            suffix
        ));
        write_pgm(&pgm, map)?;
        let csv = pgm.with_extension("csv");
        write_csv(&csv, map)?;
    }
    Ok(())
}

fn write_pgm(path: &Path, map: &Tensor) -> Result<(), DataError> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let lo = map.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in map.data() {
        // normalization guard: a constant map renders as uniform black
        let px = if span < 1e-12 {
            0u8
        } else {
            (((v - lo) / span) * 255.0).round() as u8
        };
        bytes.push(px);
    }
    write_bytes(path, &bytes)
}

fn write_csv(path: &Path, map: &Tensor) -> Result<(), DataError> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut text = String::new();
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| format!("{:.9e}", map.at2(y, x))).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let mut file = fs::File::create(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    file.write_all(bytes).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Reads back an attention CSV written by [`export_attention`].
pub fn read_attention_csv(path: &Path) -> Result<Vec<Vec<f32>>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(text
        .lines()
        .map(|line| line.split(',').map(|v| v.parse().unwrap_or(f32::NAN)).collect())
        .collect())
}
