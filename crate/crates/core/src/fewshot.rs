//! Episodic classification on cross-attended feature maps: per-position
//! nearest-neighbor probabilities, the two training losses, and inductive
//! label prediction.

use rand_chacha::ChaCha8Rng;

use crate::cam::CamOutput;
use crate::error::{ProtocolError, TensorError};
use crate::params::{he_uniform, Param};
use crate::tensor::{Tape, Tensor, TensorId};

/// One C-way K-shot task. Episode labels are 0-based class indices within
/// the episode; `global_class` keeps the dataset-wide class id.
#[derive(Debug, Clone)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub support: Vec<EpisodeSample>,
    pub query: Vec<EpisodeSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSample {
    pub record: usize,
    pub episode_label: usize,
    pub global_class: usize,
}

impl Episode {
    /// Support labels must partition into `way` groups of `shot`; every label
    /// must be in range.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let mut counts = vec![0usize; self.way];
        for s in &self.support {
            if s.episode_label >= self.way {
                return Err(ProtocolError::LabelOutOfRange {
                    label: s.episode_label,
                    way: self.way,
                });
            }
            counts[s.episode_label] += 1;
        }
        if counts.iter().any(|&c| c != self.shot) {
            return Err(ProtocolError::BadSupportPartition {
                way: self.way,
                shot: self.shot,
            });
        }
        for q in &self.query {
            if q.episode_label >= self.way {
                return Err(ProtocolError::LabelOutOfRange {
                    label: q.episode_label,
                    way: self.way,
                });
            }
        }
        Ok(())
    }

    /// Support record indices for one episode class.
    pub fn support_of(&self, class: usize) -> Vec<usize> {
        self.support
            .iter()
            .filter(|s| s.episode_label == class)
            .map(|s| s.record)
            .collect()
    }
}

/// Linear head over all training classes.
#[derive(Debug, Clone)]
pub struct GlobalClassifier {
    pub weight: Param,
    pub classes: usize,
    pub channels: usize,
}

impl GlobalClassifier {
    pub fn new(classes: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::new("global.weight", he_uniform(rng, &[classes, channels], channels)),
            classes,
            channels,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TensorId {
        self.weight.bind(tape, trainable)
    }
}

/// Per-position class logits for one query sample: row i, column k holds
/// -d((Q̄ᵏ)_i, GAP(P̄ᵏ)) with d = alpha * (1 - cosine). Shape (m, C).
///
/// `pairs` holds the attended (class map, query map) of every episode class
/// for this query, both shaped (c, m).
pub fn position_logits(
    tape: &mut Tape,
    pairs: &[(TensorId, TensorId)],
    alpha: f32,
) -> Result<TensorId, TensorError> {
    if pairs.len() < 2 {
        return Err(TensorError::Dimension {
            op: "position_logits",
            expected: "at least two classes".into(),
            got: vec![pairs.len()],
        });
    }
    let m = tape.shape(pairs[0].0)[1];
    let mut rows = Vec::with_capacity(pairs.len());
    for &(class_map, query_map) in pairs {
        if tape.shape(class_map)[1] != m || tape.shape(query_map)[1] != m {
            return Err(TensorError::ShapeMismatch {
                op: "position_logits",
                lhs: tape.shape(pairs[0].0).to_vec(),
                rhs: tape.shape(class_map).to_vec(),
            });
        }
        let cos = cosine_to_prototype(tape, class_map, query_map)?;
        // -d = alpha*cos - alpha
        let scaled = tape.scale(cos, alpha);
        rows.push(tape.add_scalar(scaled, -alpha));
    }
    let stacked = tape.stack_rows(&rows)?;
    tape.transpose(stacked)
}

/// Cosine of every query position against the class map's spatial mean,
/// returned as a (1, m) row.
fn cosine_to_prototype(
    tape: &mut Tape,
    class_map: TensorId,
    query_map: TensorId,
) -> Result<TensorId, TensorError> {
    let channels = tape.shape(class_map)[0];
    let gap = tape.mean(class_map, 1)?;
    let gap_unit = tape.l2_normalize(gap, 0)?;
    let gap_row = tape.reshape(gap_unit, &[1, channels])?;
    let query_unit = tape.l2_normalize(query_map, 0)?;
    tape.matmul(gap_row, query_unit)
}

/// Row-softmax of the position logits: probability of each class at each
/// query position. Rows sum to 1.
pub fn position_probs(
    tape: &mut Tape,
    pairs: &[(TensorId, TensorId)],
    alpha: f32,
) -> Result<TensorId, TensorError> {
    let logits = position_logits(tape, pairs, alpha)?;
    tape.softmax_temp(logits, 1, 1.0)
}

/// Nearest-neighbor loss for one query: sum over positions of the negative
/// log-probability of the true episode label.
pub fn loss_nn(
    tape: &mut Tape,
    logits: TensorId,
    label: usize,
) -> Result<TensorId, TensorError> {
    let (m, way) = {
        let s = tape.shape(logits);
        (s[0], s[1])
    };
    if label >= way {
        return Err(TensorError::IndexOutOfRange {
            op: "loss_nn",
            index: label,
            extent: way,
        });
    }
    tape.cross_entropy_from_logits(logits, &vec![label; m])
}

/// Global classification loss for one query: the query map attended by its
/// true episode class is classified per position among all training classes.
pub fn loss_global(
    tape: &mut Tape,
    query_map_true_class: TensorId,
    classifier_weight: TensorId,
    global_label: usize,
) -> Result<TensorId, TensorError> {
    let classes = tape.shape(classifier_weight)[0];
    if global_label >= classes {
        return Err(TensorError::IndexOutOfRange {
            op: "loss_global",
            index: global_label,
            extent: classes,
        });
    }
    let m = tape.shape(query_map_true_class)[1];
    let logits = tape.matmul(classifier_weight, query_map_true_class)?;
    let rows = tape.transpose(logits)?;
    tape.cross_entropy_from_logits(rows, &vec![global_label; m])
}

/// L = lambda * L1 + L2.
pub fn loss_total(
    tape: &mut Tape,
    nn: TensorId,
    global: TensorId,
    lambda: f32,
) -> Result<TensorId, TensorError> {
    let weighted = tape.scale(nn, lambda);
    tape.add(weighted, global)
}

/// Inductive prediction for one query from its per-class attended pairs:
/// nearest class mean under d = alpha * (1 - cosine), ties to the smallest
/// class index. Returns (label, minimized distance).
pub fn predict_inductive(camouts: &[CamOutput], alpha: f32) -> (usize, f32) {
    assert!(!camouts.is_empty(), "predict_inductive needs at least one class");
    let mut best = (0usize, f32::INFINITY);
    for (k, out) in camouts.iter().enumerate() {
        let d = alpha * (1.0 - cosine_of_means(&out.query_attended, &out.class_attended));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Cosine between the spatial means of two (c, m) maps, with the zero-norm
/// guard shared with the tape's l2_normalize.
fn cosine_of_means(a: &Tensor, b: &Tensor) -> f32 {
    let mean_vec = |t: &Tensor| -> Vec<f32> {
        let (c, m) = (t.shape()[0], t.numel() / t.shape()[0]);
        (0..c)
            .map(|ch| t.data()[ch * m..(ch + 1) * m].iter().sum::<f32>() / m as f32)
            .collect()
    };
    let (va, vb) = (mean_vec(a), mean_vec(b));
    let na = va.iter().map(|v| v * v).sum::<f32>().sqrt();
    let nb = vb.iter().map(|v| v * v).sum::<f32>().sqrt();
    let guard = crate::tensor::tape::L2_NORM_EPSILON;
    let denom = na.max(guard) * nb.max(guard);
    va.iter().zip(&vb).map(|(x, y)| x * y).sum::<f32>() / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cam::{cross_attend, FusionMode, MetaFusion};
    use crate::tensor::gradcheck::check_gradient;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn cosine_extremes_give_the_closed_form() {
        // class 0: query position equals the class mean; class 1: opposite
        let p1 = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let q1 = p1.clone();
        let p2 = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let q2 = Tensor::new(vec![2, 1], vec![0.0, -1.0]).unwrap();
        for &alpha in &[0.0f32, 1.0, 5.0, 20.0] {
            let mut tape = Tape::new();
            let pair1 = (tape.constant(p1.clone()), tape.constant(q1.clone()));
            let pair2 = (tape.constant(p2.clone()), tape.constant(q2.clone()));
            let probs = position_probs(&mut tape, &[pair1, pair2], alpha).unwrap();
            let expected = 1.0 / (1.0 + (-2.0 * alpha).exp());
            let got = tape.value(probs).at2(0, 0);
            assert!(
                (got - expected).abs() < 1e-6,
                "alpha {alpha}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn equal_distances_give_uniform_rows() {
        let mut r = rng(51);
        let map = Tensor::from_fn(&[3, 4], |_| r.gen_range(-1.0..1.0));
        let query = Tensor::from_fn(&[3, 4], |_| r.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let pairs: Vec<(TensorId, TensorId)> = (0..5)
            .map(|_| (tape.constant(map.clone()), tape.constant(query.clone())))
            .collect();
        let probs = position_probs(&mut tape, &pairs, 20.0).unwrap();
        for &v in tape.value(probs).data() {
            assert!((v - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn position_probs_match_loop_oracle() {
        let mut r = rng(52);
        for _ in 0..20 {
            let (c, m, way) = (4, 4, 3);
            let alpha = 7.5f32;
            let maps: Vec<(Tensor, Tensor)> = (0..way)
                .map(|_| {
                    (
                        Tensor::from_fn(&[c, m], |_| r.gen_range(-1.0..1.0)),
                        Tensor::from_fn(&[c, m], |_| r.gen_range(-1.0..1.0)),
                    )
                })
                .collect();

            // brute-force oracle in f64
            let mut dist = vec![vec![0.0f64; way]; m];
            for (k, (p, q)) in maps.iter().enumerate() {
                let gap: Vec<f64> = (0..c)
                    .map(|ch| {
                        (0..m).map(|i| p.data()[ch * m + i] as f64).sum::<f64>() / m as f64
                    })
                    .collect();
                let ng = gap.iter().map(|v| v * v).sum::<f64>().sqrt();
                for i in 0..m {
                    let qi: Vec<f64> = (0..c).map(|ch| q.data()[ch * m + i] as f64).collect();
                    let nq = qi.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let cos = gap.iter().zip(&qi).map(|(a, b)| a * b).sum::<f64>() / (ng * nq);
                    dist[i][k] = alpha as f64 * (1.0 - cos);
                }
            }
            let mut expected = vec![vec![0.0f64; way]; m];
            for i in 0..m {
                let z: f64 = (0..way).map(|k| (-dist[i][k]).exp()).sum();
                for k in 0..way {
                    expected[i][k] = (-dist[i][k]).exp() / z;
                }
            }

            let mut tape = Tape::new();
            let pairs: Vec<(TensorId, TensorId)> = maps
                .iter()
                .map(|(p, q)| (tape.constant(p.clone()), tape.constant(q.clone())))
                .collect();
            let probs = position_probs(&mut tape, &pairs, alpha).unwrap();
            for i in 0..m {
                let mut row_sum = 0.0f32;
                for k in 0..way {
                    let got = tape.value(probs).at2(i, k);
                    assert!(
                        (got as f64 - expected[i][k]).abs() < 1e-6,
                        "probs[{i}][{k}]"
                    );
                    row_sum += got;
                }
                assert!((row_sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn perfect_probabilities_make_loss_nn_vanish() {
        // true class aligned, the other opposed: with alpha 20 the logit gap
        // is 40, so the true-class mass is 1 up to f32 and the loss is 0
        let m = 4;
        let aligned = Tensor::from_fn(&[2, m], |i| if i < m { 1.0 } else { 0.0 });
        let opposed = Tensor::from_fn(&[2, m], |i| if i < m { -1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let pair_true = (tape.constant(aligned.clone()), tape.constant(aligned.clone()));
        let pair_false = (tape.constant(aligned), tape.constant(opposed));
        let logits = position_logits(&mut tape, &[pair_true, pair_false], 20.0).unwrap();
        let loss = loss_nn(&mut tape, logits, 0).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-6);
    }

    #[test]
    fn uniform_probabilities_hit_the_closed_form() {
        // all five classes identical: 36 positions * ln 5
        let mut r = rng(53);
        let p = Tensor::from_fn(&[8, 36], |_| r.gen_range(-1.0..1.0));
        let q = Tensor::from_fn(&[8, 36], |_| r.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let pairs: Vec<(TensorId, TensorId)> = (0..5)
            .map(|_| (tape.constant(p.clone()), tape.constant(q.clone())))
            .collect();
        let logits = position_logits(&mut tape, &pairs, 20.0).unwrap();
        let loss = loss_nn(&mut tape, logits, 2).unwrap();
        let expected = 36.0 * 5.0f64.ln();
        assert!(
            (tape.value(loss).item() as f64 - expected).abs() < 1e-3,
            "{} vs {expected}",
            tape.value(loss).item()
        );
    }

    #[test]
    fn loss_nn_rejects_out_of_range_label() {
        let mut r = rng(54);
        let p = Tensor::from_fn(&[2, 4], |_| r.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let pairs: Vec<(TensorId, TensorId)> = (0..3)
            .map(|_| (tape.constant(p.clone()), tape.constant(p.clone())))
            .collect();
        let logits = position_logits(&mut tape, &pairs, 20.0).unwrap();
        assert!(loss_nn(&mut tape, logits, 3).is_err());
    }

    #[test]
    fn loss_nn_gradient_through_the_full_stack() {
        // 2-way 1-shot micro episode on 2x2 maps: differentiate the
        // nearest-neighbor loss through cross attention w.r.t. a support map
        // and the fusion weights
        let mut r = rng(55);
        let (c, m) = (3, 4);
        let fusion = MetaFusion::new(m, 2, 0.5, FusionMode::Meta, &mut r).unwrap();
        let support0 = Tensor::from_fn(&[c, m], |_| r.gen_range(0.2..1.0));
        let support1 = Tensor::from_fn(&[c, m], |_| r.gen_range(0.2..1.0));
        let query = Tensor::from_fn(&[c, m], |_| r.gen_range(0.2..1.0));
        let w1 = fusion.w1.value.clone();

        let build = |tape: &mut Tape, probe_ids: &[TensorId]| -> TensorId {
            let vars = crate::cam::FusionVars {
                w1: probe_ids[3],
                w2: tape.constant(fusion.w2.value.clone()),
                static_kernel: tape.constant(fusion.static_kernel.value.clone()),
            };
            let query_id = probe_ids[2];
            let mut pairs = Vec::new();
            for &proto in &probe_ids[..2] {
                let cam = cross_attend(tape, proto, query_id, &fusion, &vars).unwrap();
                pairs.push((cam.class_attended, cam.query_attended));
            }
            let logits = position_logits(tape, &pairs, 5.0).unwrap();
            let loss = loss_nn(tape, logits, 0).unwrap();
            tape.scale(loss, 0.25)
        };
        for probe in [0usize, 2, 3] {
            let check = check_gradient(
                "loss_nn_stack",
                &[support0.clone(), support1.clone(), query.clone(), w1.clone()],
                probe,
                1e-3,
                &build,
            );
            assert!(check.passed(), "probe {probe}: {check}");
        }
    }

    #[test]
    fn zero_global_classifier_gives_log_l_per_position() {
        let mut r = rng(56);
        let (l, c, m) = (10, 4, 9);
        let q = Tensor::from_fn(&[c, m], |_| r.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let weight = tape.constant(Tensor::zeros(&[l, c]));
        let qid = tape.constant(q);
        let loss = loss_global(&mut tape, qid, weight, 3).unwrap();
        let expected = m as f64 * (l as f64).ln();
        assert!((tape.value(loss).item() as f64 - expected).abs() < 1e-4);
    }

    #[test]
    fn global_loss_drops_after_sgd_on_separable_features() {
        let mut r = rng(57);
        let (l, c, m) = (3, 4, 4);
        let mut gc = GlobalClassifier::new(l, c, &mut r);
        // class i concentrates on channel i
        let features: Vec<Tensor> = (0..l)
            .map(|k| {
                Tensor::from_fn(&[c, m], |idx| {
                    let ch = idx / m;
                    if ch == k {
                        1.0
                    } else {
                        0.1
                    }
                })
            })
            .collect();
        let eval_loss = |gc: &GlobalClassifier| -> f32 {
            let mut total = 0.0;
            for (k, f) in features.iter().enumerate() {
                let mut tape = Tape::new();
                let w = gc.bind(&mut tape, false);
                let fid = tape.constant(f.clone());
                let loss = loss_global(&mut tape, fid, w, k).unwrap();
                total += tape.value(loss).item();
            }
            total
        };
        let uniform = eval_loss(&gc);
        let mut velocity = vec![0.0f32; gc.weight.value.numel()];
        for _ in 0..10 {
            gc.weight.zero_grad();
            for (k, f) in features.iter().enumerate() {
                let mut tape = Tape::new();
                let w = gc.bind(&mut tape, true);
                let fid = tape.constant(f.clone());
                let loss = loss_global(&mut tape, fid, w, k).unwrap();
                tape.backward(loss).unwrap();
                gc.weight.accumulate(&tape, w, 1.0 / l as f32);
            }
            let grad = gc.weight.grad.clone();
            crate::tensor::sgd_step(
                gc.weight.value.data_mut(),
                &grad,
                &mut velocity,
                0.1,
                0.0,
                0.0,
            )
            .unwrap();
        }
        let trained = eval_loss(&gc);
        assert!(
            trained < uniform * 0.8,
            "10 sgd steps should cut the loss: {uniform} -> {trained}"
        );
    }

    #[test]
    fn global_loss_gradient_wrt_classifier_weight() {
        let mut r = rng(58);
        let (l, c, m) = (5, 3, 4);
        let q = Tensor::from_fn(&[c, m], |_| r.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[l, c], |_| r.gen_range(-0.5..0.5));
        let check = check_gradient("loss_global_w", &[w], 0, 1e-4, &|tape, ids| {
            let qid = tape.constant(q.clone());
            let loss = loss_global(tape, qid, ids[0], 2).unwrap();
            tape.scale(loss, 0.1)
        });
        assert!(check.passed(), "{check}");
    }

    #[test]
    fn loss_total_is_the_weighted_sum() {
        let mut tape = Tape::new();
        let l1 = tape.constant(Tensor::scalar(2.0));
        let l2 = tape.constant(Tensor::scalar(1.0));
        let total = loss_total(&mut tape, l1, l2, 0.5).unwrap();
        assert_eq!(tape.value(total).item(), 2.0);
        let only_global = loss_total(&mut tape, l1, l2, 0.0).unwrap();
        assert_eq!(tape.value(only_global).item(), 1.0);

        let mut r = rng(59);
        for _ in 0..10 {
            let (a, b, lam) = (
                r.gen_range(0.0f32..5.0),
                r.gen_range(0.0f32..5.0),
                r.gen_range(0.0f32..2.0),
            );
            let ai = tape.constant(Tensor::scalar(a));
            let bi = tape.constant(Tensor::scalar(b));
            let t = loss_total(&mut tape, ai, bi, lam).unwrap();
            assert!((tape.value(t).item() - (lam * a + b)).abs() < 1e-6);
        }
    }

    fn cam_output_from(p: Tensor, q: Tensor) -> CamOutput {
        let m = p.numel() / p.shape()[0];
        CamOutput {
            class_attended: p,
            query_attended: q,
            class_attention: Tensor::zeros(&[1, m]),
            query_attention: Tensor::zeros(&[1, m]),
            correlation: Tensor::zeros(&[m, m]),
        }
    }

    #[test]
    fn inductive_prediction_degenerate_and_extremes() {
        let single = cam_output_from(
            Tensor::full(&[2, 2], 1.0),
            Tensor::full(&[2, 2], 1.0),
        );
        assert_eq!(predict_inductive(&[single], 20.0).0, 0);

        // class 2 (0-based) identical, others orthogonal
        let make = |on_channel: usize| {
            Tensor::from_fn(&[4, 2], |i| if i / 2 == on_channel { 1.0 } else { 0.0 })
        };
        let camouts = vec![
            cam_output_from(make(0), make(3)),
            cam_output_from(make(1), make(3)),
            cam_output_from(make(3), make(3)),
        ];
        let (label, conf) = predict_inductive(&camouts, 20.0);
        assert_eq!(label, 2);
        assert!(conf.abs() < 1e-5, "confidence is the minimized distance");
    }

    #[test]
    fn inductive_ties_break_to_the_smallest_class() {
        let map = Tensor::full(&[2, 2], 1.0);
        let camouts = vec![
            cam_output_from(map.clone(), map.clone()),
            cam_output_from(map.clone(), map.clone()),
            cam_output_from(map.clone(), map),
        ];
        assert_eq!(predict_inductive(&camouts, 20.0).0, 0);
    }

    #[test]
    fn inductive_prediction_ignores_positive_rescaling() {
        let mut r = rng(60);
        for _ in 0..20 {
            let camouts: Vec<CamOutput> = (0..4)
                .map(|_| {
                    cam_output_from(
                        Tensor::from_fn(&[3, 4], |_| r.gen_range(-1.0..1.0)),
                        Tensor::from_fn(&[3, 4], |_| r.gen_range(-1.0..1.0)),
                    )
                })
                .collect();
            let scaled: Vec<CamOutput> = camouts
                .iter()
                .map(|o| {
                    cam_output_from(
                        Tensor::from_fn(&[3, 4], |i| o.class_attended.data()[i] * 17.0),
                        Tensor::from_fn(&[3, 4], |i| o.query_attended.data()[i] * 17.0),
                    )
                })
                .collect();
            assert_eq!(
                predict_inductive(&camouts, 20.0).0,
                predict_inductive(&scaled, 20.0).0
            );
        }
    }

    #[test]
    fn inductive_agrees_with_averaged_position_probs() {
        // cross-check oracle: on random episodes (one query attended against
        // every class) the argmin of the mean-map distance should almost
        // always agree with the argmax of position-averaged probabilities
        let mut r = rng(61);
        let (c, m, way) = (8, 9, 5);
        let fusion = MetaFusion::new(m, 3, 0.1, FusionMode::Meta, &mut r).unwrap();
        let mut agree = 0;
        let runs = 50;
        for _ in 0..runs {
            // nonnegative maps with a shared per-map signature plus position
            // noise, the shape any post-relu embedding of one image has
            let structured = |r: &mut ChaCha8Rng| {
                let base: Vec<f32> = (0..c).map(|_| r.gen_range(0.0..1.0)).collect();
                Tensor::from_fn(&[c, m], |idx| {
                    let ch = idx / m;
                    (base[ch] + r.gen_range(-0.35..0.35f32)).max(0.0)
                })
            };
            let query = structured(&mut r);
            let protos: Vec<Tensor> = (0..way).map(|_| structured(&mut r)).collect();
            let mut tape = Tape::new();
            let vars = fusion.bind(&mut tape, false);
            let qid = tape.constant(query.clone());
            let mut pairs = Vec::new();
            let mut camouts = Vec::new();
            for p in &protos {
                let pid = tape.constant(p.clone());
                let cam = cross_attend(&mut tape, pid, qid, &fusion, &vars).unwrap();
                pairs.push((cam.class_attended, cam.query_attended));
                camouts.push(crate::cam::extract_output(&tape, &cam, 3, 3));
            }
            let inductive = predict_inductive(&camouts, 20.0).0;

            let probs = position_probs(&mut tape, &pairs, 20.0).unwrap();
            let t = tape.value(probs);
            let averaged = (0..way)
                .map(|k| (0..m).map(|i| t.at2(i, k)).sum::<f32>())
                .collect::<Vec<f32>>();
            let argmax = averaged
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax == inductive {
                agree += 1;
            }
        }
        assert!(
            agree as f32 / runs as f32 >= 0.9,
            "agreement {agree}/{runs}"
        );
    }

    #[test]
    fn episode_validation_catches_bad_partitions() {
        let sample = |record, episode_label| EpisodeSample {
            record,
            episode_label,
            global_class: 0,
        };
        let good = Episode {
            way: 2,
            shot: 2,
            queries_per_class: 1,
            support: vec![sample(0, 0), sample(1, 0), sample(2, 1), sample(3, 1)],
            query: vec![sample(4, 0), sample(5, 1)],
        };
        assert!(good.validate().is_ok());

        let lopsided = Episode {
            support: vec![sample(0, 0), sample(1, 0), sample(2, 0), sample(3, 1)],
            ..good.clone()
        };
        assert!(matches!(
            lopsided.validate(),
            Err(ProtocolError::BadSupportPartition { .. })
        ));

        let out_of_range = Episode {
            query: vec![sample(4, 5)],
            ..good
        };
        assert!(matches!(
            out_of_range.validate(),
            Err(ProtocolError::LabelOutOfRange { label: 5, .. })
        ));
    }
}
