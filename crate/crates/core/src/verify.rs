//! Gradient integrity suite: every differentiable op checked against central
//! finite differences at 1e-4 relative, plus the full episode loss through
//! embedding, cross attention and both losses at 1e-3. Backs the `grad-check`
//! subcommand and the acceptance gate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cam::{cross_attend, fusion_kernel, FusionMode, FusionVars, MetaFusion};
use crate::config::{Ablation, ModelConfig};
use crate::embedding::EmbeddingVars;
use crate::fewshot::{Episode, EpisodeSample};
use crate::model::{Model, ModelVars};
use crate::tensor::gradcheck::{check_gradient, GradCheck};
use crate::tensor::{Tape, Tensor, TensorId};

const OP_TOLERANCE: f64 = 1e-4;
const COMPOSITE_TOLERANCE: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn scaled_probe(tape: &mut Tape, y: TensorId) -> TensorId {
    let n = tape.value(y).numel();
    let w = Tensor::from_fn(&[n], |i| ((i * 2654435761usize) % 1000) as f32 / 500.0 - 1.0);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(w.reshaped(&shape).expect("same numel"));
    let prod = tape.mul(y, w).expect("same shape");
    let s = tape.sum_all(prod);
    tape.scale(s, 1.0 / n as f32)
}

/// Runs the whole suite; the returned checks carry pass/fail and the
/// measured maximum relative error.
pub fn gradient_suite() -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfd);
    let mut checks = Vec::new();

    let a = uniform(&mut rng, &[4, 5], -0.3, 0.3);
    let b = uniform(&mut rng, &[5, 4], -0.3, 0.3);
    for (probe, label) in [(0, "matmul/lhs"), (1, "matmul/rhs")] {
        checks.push(check_gradient(label, &[a.clone(), b.clone()], probe, OP_TOLERANCE, &|tape, ids| {
            let y = tape.matmul(ids[0], ids[1]).unwrap();
            scaled_probe(tape, y)
        }));
    }

    let x = uniform(&mut rng, &[5, 5], -1.0, 1.0);
    checks.push(check_gradient("transpose", &[x.clone()], 0, OP_TOLERANCE, &|tape, ids| {
        let y = tape.transpose(ids[0]).unwrap();
        scaled_probe(tape, y)
    }));
    checks.push(check_gradient("reshape", &[x.clone()], 0, OP_TOLERANCE, &|tape, ids| {
        let y = tape.reshape(ids[0], &[25]).unwrap();
        scaled_probe(tape, y)
    }));

    let u = uniform(&mut rng, &[24], -1.0, 1.0);
    let v = uniform(&mut rng, &[24], -1.0, 1.0);
    for (label, probe) in [("add/lhs", 0), ("add/rhs", 1)] {
        checks.push(check_gradient(label, &[u.clone(), v.clone()], probe, OP_TOLERANCE, &|tape, ids| {
            let y = tape.add(ids[0], ids[1]).unwrap();
            scaled_probe(tape, y)
        }));
    }
    for (label, probe) in [("mul/lhs", 0), ("mul/rhs", 1)] {
        checks.push(check_gradient(label, &[u.clone(), v.clone()], probe, OP_TOLERANCE, &|tape, ids| {
            let y = tape.mul(ids[0], ids[1]).unwrap();
            scaled_probe(tape, y)
        }));
    }
    checks.push(check_gradient("scale_add_scalar", &[u.clone()], 0, OP_TOLERANCE, &|tape, ids| {
        let y = tape.scale(ids[0], 1.7);
        let y = tape.add_scalar(y, -0.3);
        scaled_probe(tape, y)
    }));

    let kinked = away_from_zero(&mut rng, &[25], 0.05);
    checks.push(check_gradient("relu", &[kinked], 0, OP_TOLERANCE, &|tape, ids| {
        let y = tape.relu(ids[0]);
        scaled_probe(tape, y)
    }));

    let positive = uniform(&mut rng, &[20], 0.3, 2.0);
    checks.push(check_gradient("log", &[positive], 0, OP_TOLERANCE, &|tape, ids| {
        let y = tape.log(ids[0]);
        scaled_probe(tape, y)
    }));

    let grid = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    for axis in 0..2 {
        checks.push(check_gradient(
            if axis == 0 { "mean/axis0" } else { "mean/axis1" },
            &[grid.clone()],
            0,
            OP_TOLERANCE,
            &|tape, ids| {
                let y = tape.mean(ids[0], axis).unwrap();
                scaled_probe(tape, y)
            },
        ));
    }
    checks.push(check_gradient("sum_all", &[grid.clone()], 0, OP_TOLERANCE, &|tape, ids| {
        let s = tape.sum_all(ids[0]);
        tape.scale(s, 0.1)
    }));

    let m1 = uniform(&mut rng, &[3, 7], -1.0, 1.0);
    let m2 = uniform(&mut rng, &[3, 7], -1.0, 1.0);
    checks.push(check_gradient("mean_of", &[m1, m2], 0, OP_TOLERANCE, &|tape, ids| {
        let y = tape.mean_of(&[ids[0], ids[1]]).unwrap();
        scaled_probe(tape, y)
    }));

    let vecs = away_from_zero(&mut rng, &[4, 6], 0.2);
    for axis in 0..2 {
        checks.push(check_gradient(
            if axis == 0 { "l2_normalize/axis0" } else { "l2_normalize/axis1" },
            &[vecs.clone()],
            0,
            OP_TOLERANCE,
            &|tape, ids| {
                let y = tape.l2_normalize(ids[0], axis).unwrap();
                scaled_probe(tape, y)
            },
        ));
    }

    let logits = uniform(&mut rng, &[20], -0.02, 0.02);
    checks.push(check_gradient("softmax_temp/0.025", &[logits], 0, OP_TOLERANCE, &|tape, ids| {
        let y = tape.softmax_temp(ids[0], 0, 0.025).unwrap();
        scaled_probe(tape, y)
    }));
    let logits = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    checks.push(check_gradient("softmax_temp/rows", &[logits], 0, OP_TOLERANCE, &|tape, ids| {
        let y = tape.softmax_temp(ids[0], 1, 1.0).unwrap();
        scaled_probe(tape, y)
    }));

    let image = uniform(&mut rng, &[2, 5, 5], -1.0, 1.0);
    let kernel = uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let bias = uniform(&mut rng, &[3], -0.5, 0.5);
    for (probe, label) in [(0, "conv2d/input"), (1, "conv2d/weight"), (2, "conv2d/bias")] {
        checks.push(check_gradient(
            label,
            &[image.clone(), kernel.clone(), bias.clone()],
            probe,
            OP_TOLERANCE,
            &|tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], ids[2], 1).unwrap();
                scaled_probe(tape, y)
            },
        ));
    }

    let pool_in = Tensor::from_fn(&[2, 4, 4], |i| (i as f32) * 0.37 + ((i * 7) % 5) as f32 * 0.01);
    checks.push(check_gradient("maxpool2d", &[pool_in], 0, OP_TOLERANCE, &|tape, ids| {
        let y = tape.maxpool2d(ids[0]).unwrap();
        scaled_probe(tape, y)
    }));

    let table = uniform(&mut rng, &[5, 5], -1.0, 1.0);
    checks.push(check_gradient("gather", &[table.clone()], 0, OP_TOLERANCE, &|tape, ids| {
        let y = tape.gather(ids[0], &[3, 0, 4, 1, 2]).unwrap();
        scaled_probe(tape, y)
    }));
    checks.push(check_gradient("cross_entropy_from_logits", &[table], 0, OP_TOLERANCE, &|tape, ids| {
        let ce = tape.cross_entropy_from_logits(ids[0], &[3, 0, 4, 1, 2]).unwrap();
        tape.scale(ce, 0.1)
    }));

    let row = uniform(&mut rng, &[20], -1.0, 1.0);
    checks.push(check_gradient("broadcast_rows", &[row.clone()], 0, OP_TOLERANCE, &|tape, ids| {
        let y = tape.broadcast_rows(ids[0], 3).unwrap();
        scaled_probe(tape, y)
    }));
    let row2 = uniform(&mut rng, &[20], -1.0, 1.0);
    checks.push(check_gradient("stack_rows", &[row, row2], 0, OP_TOLERANCE, &|tape, ids| {
        let y = tape.stack_rows(&[ids[0], ids[1]]).unwrap();
        scaled_probe(tape, y)
    }));

    // fusion kernel and one full cross-attention pass
    let m = 9;
    let fusion = MetaFusion::new(m, 3, 0.5, FusionMode::Meta, &mut rng).unwrap();
    let view = uniform(&mut rng, &[m, m], -1.0, 1.0);
    for (probe, label) in [(0, "fusion_kernel/w1"), (1, "fusion_kernel/w2")] {
        let f = fusion.clone();
        let v = view.clone();
        checks.push(check_gradient(
            label,
            &[fusion.w1.value.clone(), fusion.w2.value.clone()],
            probe,
            OP_TOLERANCE,
            &move |tape, ids| {
                let vars = FusionVars {
                    w1: ids[0],
                    w2: ids[1],
                    static_kernel: tape.constant(f.static_kernel.value.clone()),
                };
                let view_id = tape.constant(v.clone());
                let k = fusion_kernel(tape, view_id, &f, &vars).unwrap();
                scaled_probe(tape, k)
            },
        ));
    }
    {
        let f = fusion.clone();
        let p = uniform(&mut rng, &[4, m], 0.1, 1.0);
        let q = uniform(&mut rng, &[4, m], 0.1, 1.0);
        checks.push(check_gradient(
            "cross_attend/inputs",
            &[p, q, f.w1.value.clone()],
            0,
            OP_TOLERANCE,
            &move |tape, ids| {
                let vars = FusionVars {
                    w1: ids[2],
                    w2: tape.constant(f.w2.value.clone()),
                    static_kernel: tape.constant(f.static_kernel.value.clone()),
                };
                let cam = cross_attend(tape, ids[0], ids[1], &f, &vars).unwrap();
                let a = scaled_probe(tape, cam.class_attended);
                let b = scaled_probe(tape, cam.query_attended);
                let s = tape.add(a, b).unwrap();
                tape.scale(s, 0.5)
            },
        ));
    }

    checks.push(full_episode_check(&mut rng));
    checks
}

/// Finite differences through the entire training loss of a 2-way 1-shot
/// micro episode, probing one tensor from every parameter group.
fn full_episode_check(rng: &mut ChaCha8Rng) -> GradCheck {
    let config = ModelConfig {
        input_size: 16,
        channels: [4, 6, 8],
        reduction: 2,
        tau: 0.5,
        alpha: 5.0,
        lambda: 0.5,
        ablation: Ablation::Full,
    };
    let model = Model::new(config.clone(), 3, 0x11).expect("micro model");
    let episode = Episode {
        way: 2,
        shot: 1,
        queries_per_class: 1,
        support: vec![
            EpisodeSample { record: 0, episode_label: 0, global_class: 0 },
            EpisodeSample { record: 1, episode_label: 1, global_class: 1 },
        ],
        query: vec![
            EpisodeSample { record: 2, episode_label: 0, global_class: 0 },
            EpisodeSample { record: 3, episode_label: 1, global_class: 1 },
        ],
    };
    let images: Vec<Tensor> = (0..4).map(|_| uniform(rng, &[16, 16, 3], 0.1, 1.0)).collect();

    // probe tensors: first conv weight, fusion w1, global weight; biases get
    // a positive shift to keep pre-activations off the relu kink
    let mut inputs = Vec::new();
    inputs.push(model.embedding.blocks[0].weight.value.clone());
    inputs.push(model.fusion.w1.value.clone());
    inputs.push(model.global.weight.value.clone());

    let biased: Vec<Tensor> = model
        .embedding
        .blocks
        .iter()
        .map(|b| Tensor::full(&[b.bias.value.numel()], 0.4))
        .collect();

    let episode_ref = episode;
    let images_ref = images;
    let model_ref = model;
    let build = move |tape: &mut Tape, ids: &[TensorId]| -> TensorId {
        let embed_ids = vec![
            (ids[0], tape.constant(biased[0].clone())),
            (
                tape.constant(model_ref.embedding.blocks[1].weight.value.clone()),
                tape.constant(biased[1].clone()),
            ),
            (
                tape.constant(model_ref.embedding.blocks[2].weight.value.clone()),
                tape.constant(biased[2].clone()),
            ),
        ];
        let vars = ModelVars {
            embedding: EmbeddingVars::from_ids(embed_ids),
            fusion: FusionVars {
                w1: ids[1],
                w2: tape.constant(model_ref.fusion.w2.value.clone()),
                static_kernel: tape.constant(model_ref.fusion.static_kernel.value.clone()),
            },
            global_weight: ids[2],
        };
        let loss = model_ref
            .episode_loss(
                tape,
                &vars,
                &episode_ref,
                &|record| images_ref[record].clone(),
                &[0, 1],
            )
            .expect("episode loss");
        tape.scale(loss.objective, 0.25)
    };

    // merge the three probes into one reported check
    let mut merged = GradCheck {
        label: "episode_loss/full".into(),
        checked: 0,
        max_rel_error: 0.0,
        tolerance: COMPOSITE_TOLERANCE,
    };
    for probe in 0..3 {
        let check = check_gradient("episode_loss", &inputs, probe, COMPOSITE_TOLERANCE, &build);
        merged.checked += check.checked;
        merged.max_rel_error = merged.max_rel_error.max(check.max_rel_error);
    }
    merged
}

/// Differentiates a micro training loss once and confirms gradients land on
/// every parameter and no constant.
pub fn gradient_reachability() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xab);
    let config = ModelConfig {
        input_size: 16,
        channels: [4, 6, 8],
        reduction: 2,
        tau: 0.5,
        alpha: 5.0,
        lambda: 0.5,
        ablation: Ablation::Full,
    };
    let mut model = Model::new(config, 3, 7).map_err(|e| e.to_string())?;
    // correlation row means are positive for post-relu features, so force a
    // live fusion hidden layer; reachability should not hinge on init luck
    model.fusion.w1.value = Tensor::from_fn(model.fusion.w1.value.shape(), {
        let src = model.fusion.w1.value.clone();
        move |i| src.data()[i].abs() + 0.05
    });
    let episode = Episode {
        way: 2,
        shot: 1,
        queries_per_class: 1,
        support: vec![
            EpisodeSample { record: 0, episode_label: 0, global_class: 0 },
            EpisodeSample { record: 1, episode_label: 1, global_class: 1 },
        ],
        query: vec![EpisodeSample { record: 2, episode_label: 0, global_class: 0 }],
    };
    let images: Vec<Tensor> = (0..3)
        .map(|_| Tensor::from_fn(&[16, 16, 3], |_| rng.gen_range(0.1..1.0)))
        .collect();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let image_const = tape.constant(images[0].clone());
    let loss = model
        .episode_loss(&mut tape, &vars, &episode, &|r| images[r].clone(), &[0])
        .map_err(|e| e.to_string())?;
    tape.backward(loss.objective).map_err(|e| e.to_string())?;
    for (name, id) in [
        ("fusion.w1", vars.fusion.w1),
        ("fusion.w2", vars.fusion.w2),
        ("global.weight", vars.global_weight),
    ] {
        let grad = tape.grad(id).ok_or_else(|| format!("{name} missing grad"))?;
        if grad.iter().all(|&g| g == 0.0) {
            return Err(format!("{name} gradient never populated"));
        }
    }
    if tape.grad(image_const).is_some() {
        return Err("constant image received a gradient".into());
    }
    Ok(())
}
