//! Acceptance suite. Each test prints one PASS/FAIL line per criterion on
//! top of its asserts. Trained models and datasets are shared across
//! criteria through lazily-built fixtures under the target tmpdir.

use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fewshot_core::cam::{cross_attend, FusionMode, MetaFusion};
use fewshot_core::config::{Ablation, RunConfig};
use fewshot_core::fewshot::position_probs;
use fewshot_core::harness::{evaluate_model, sample_sd, train, EvalParams, TrainOutcome};
use fewshot_core::model::{load_checkpoint, Model};
use fewshot_core::synth::{generate, sample_episode, Dataset, Split, SynthSpec};
use fewshot_core::tensor::{Tape, Tensor, TensorId};
use fewshot_core::transductive::{augment_prototypes, select_topt, Candidate, TransduceOptions};
use fewshot_core::verify::{gradient_reachability, gradient_suite};

fn workdir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn report(criterion: &str, passed: bool, detail: &str) {
    println!(
        "acceptance [{}] {} — {}",
        if passed { "PASS" } else { "FAIL" },
        criterion,
        detail
    );
}

// ── fixtures ─────────────────────────────────────────────────────────

fn default_dataset() -> &'static Dataset {
    static DATASET: OnceLock<Dataset> = OnceLock::new();
    DATASET.get_or_init(|| {
        let dir = workdir().join("data_default");
        if !dir.join("manifest.txt").exists() {
            generate(&SynthSpec::default(), &dir).unwrap();
        }
        Dataset::load(&dir).unwrap()
    })
}

/// Harder variant for the transduction criterion: heavier pixel noise and
/// appearance jitter pull 1-shot prototypes off-center, which is the regime
/// pseudo-labeled augmentation is for.
fn noisy_spec() -> SynthSpec {
    SynthSpec {
        noise_sigma: 0.22,
        color_jitter: 0.35,
        size_jitter: 3,
        seed: 23,
        ..SynthSpec::default()
    }
}

fn noisy_dataset() -> &'static Dataset {
    static DATASET: OnceLock<Dataset> = OnceLock::new();
    DATASET.get_or_init(|| {
        let dir = workdir().join("data_noisy");
        if !dir.join("manifest.txt").exists() {
            generate(&noisy_spec(), &dir).unwrap();
        }
        Dataset::load(&dir).unwrap()
    })
}

struct TrainedModel {
    model: Model,
    best_val_accuracy: f64,
    wall_seconds: f64,
}

/// Trains (or reloads) one run of the default desk config on the given
/// dataset; checkpoints cache под the target tmpdir between test binaries.
fn train_cached(tag: &str, dataset: &Dataset, ablation: Ablation, seed: u64) -> TrainedModel {
    let out_dir = workdir().join(format!("run_{tag}_{seed}"));
    let checkpoint = out_dir.join("checkpoint");
    let mut config = RunConfig::default();
    config.model.ablation = ablation;
    config.train.seed = seed;
    if checkpoint.join("manifest.txt").exists() {
        if let Ok((model, meta)) = load_checkpoint(&checkpoint) {
            if meta.dataset_hash == dataset.content_hash && meta.config == config {
                return TrainedModel {
                    model,
                    best_val_accuracy: meta.best_val_accuracy,
                    wall_seconds: 0.0,
                };
            }
        }
        let _ = std::fs::remove_dir_all(&out_dir);
    }
    let start = Instant::now();
    let outcome: TrainOutcome = train(&config, dataset, &out_dir).unwrap();
    let wall = start.elapsed().as_secs_f64();
    let (model, _) = load_checkpoint(&outcome.checkpoint_dir).unwrap();
    TrainedModel {
        model,
        best_val_accuracy: outcome.best_val_accuracy,
        wall_seconds: wall,
    }
}

static FULL_MODELS: OnceLock<Mutex<std::collections::HashMap<u64, &'static TrainedModel>>> =
    OnceLock::new();

fn full_model(seed: u64) -> &'static TrainedModel {
    let map = FULL_MODELS.get_or_init(|| Mutex::new(std::collections::HashMap::new()));
    // the lock held across training makes each fixture build exactly once
    let mut guard = map.lock().unwrap();
    if let Some(model) = guard.get(&seed) {
        return model;
    }
    let trained: &'static TrainedModel = Box::leak(Box::new(train_cached(
        "full",
        default_dataset(),
        Ablation::Full,
        seed,
    )));
    guard.insert(seed, trained);
    trained
}

static NOCAM_MODELS: OnceLock<Mutex<std::collections::HashMap<u64, &'static TrainedModel>>> =
    OnceLock::new();

fn nocam_model(seed: u64) -> &'static TrainedModel {
    let map = NOCAM_MODELS.get_or_init(|| Mutex::new(std::collections::HashMap::new()));
    let mut guard = map.lock().unwrap();
    if let Some(model) = guard.get(&seed) {
        return model;
    }
    let trained: &'static TrainedModel = Box::leak(Box::new(train_cached(
        "nocam",
        default_dataset(),
        Ablation::NoCam,
        seed,
    )));
    guard.insert(seed, trained);
    trained
}

fn noisy_model() -> &'static TrainedModel {
    static MODEL: OnceLock<TrainedModel> = OnceLock::new();
    MODEL.get_or_init(|| train_cached("noisy", noisy_dataset(), Ablation::Full, 1))
}

// ── criterion 1: gradient integrity ──────────────────────────────────

#[test]
fn criterion_01_gradient_integrity() {
    let start = Instant::now();
    let checks = gradient_suite();
    let reach = gradient_reachability();
    let elapsed = start.elapsed().as_secs_f64();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.to_string())
        .collect();
    let passed = failed.is_empty() && reach.is_ok() && elapsed < 60.0;
    report(
        "gradient integrity",
        passed,
        &format!(
            "{} op checks + episode composite, max failures {:?}, reachability {:?}, {:.1}s",
            checks.len(),
            failed,
            reach,
            elapsed
        ),
    );
    assert!(failed.is_empty(), "{failed:?}");
    reach.unwrap();
    assert!(elapsed < 60.0, "suite took {elapsed:.1}s");
}

// ── criterion 2: oracle equivalence ──────────────────────────────────

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0))
}

fn cosine_oracle(p: &Tensor, q: &Tensor) -> Vec<Vec<f64>> {
    let c = p.shape()[0];
    let m = p.numel() / c;
    let col = |t: &Tensor, j: usize| -> Vec<f64> {
        (0..c).map(|ch| t.data()[ch * m + j] as f64).collect()
    };
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let (a, b) = (col(p, i), col(q, j));
                    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                    a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
                })
                .collect()
        })
        .collect()
}

#[test]
fn criterion_02_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2020);
    let trials = 100;
    let mut worst: f64 = 0.0;

    for _ in 0..trials {
        let (c, edge) = (rng.gen_range(2..5), rng.gen_range(2..4usize));
        let m = edge * edge;
        let p = random_map(&mut rng, c, edge, edge);
        let q = random_map(&mut rng, c, edge, edge);
        let fusion = MetaFusion::new(m, 1, 0.5, FusionMode::Meta, &mut rng).unwrap();

        // correlation + both attention maps against f64 loop oracles
        let mut tape = Tape::new();
        let vars = fusion.bind(&mut tape, false);
        let pid = tape.constant(p.clone());
        let qid = tape.constant(q.clone());
        let cam = cross_attend(&mut tape, pid, qid, &fusion, &vars).unwrap();
        let corr = cosine_oracle(&p, &q);
        for i in 0..m {
            for j in 0..m {
                worst = worst.max((tape.value(cam.correlation).at2(i, j) as f64 - corr[i][j]).abs());
            }
        }

        let hidden = m;
        let w1: Vec<f64> = fusion.w1.value.data().iter().map(|&v| v as f64).collect();
        let w2: Vec<f64> = fusion.w2.value.data().iter().map(|&v| v as f64).collect();
        let branch = |view: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
            let gap: Vec<f64> = (0..m)
                .map(|r| (0..m).map(|cl| view(r, cl)).sum::<f64>() / m as f64)
                .collect();
            let mid: Vec<f64> = (0..hidden)
                .map(|i| (0..m).map(|j| w1[i * m + j] * gap[j]).sum::<f64>().max(0.0))
                .collect();
            let kernel: Vec<f64> = (0..m)
                .map(|i| (0..hidden).map(|j| w2[i * hidden + j] * mid[j]).sum::<f64>())
                .collect();
            let logits: Vec<f64> = (0..m)
                .map(|pos| (0..m).map(|k| kernel[k] * view(k, pos)).sum::<f64>())
                .collect();
            let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| ((l - peak) / 0.5).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect()
        };
        let attn_p = branch(&|i, j| corr[j][i]);
        let attn_q = branch(&|i, j| corr[i][j]);
        for j in 0..m {
            worst = worst.max((tape.value(cam.class_attention).data()[j] as f64 - attn_p[j]).abs());
            worst = worst.max((tape.value(cam.query_attention).data()[j] as f64 - attn_q[j]).abs());
        }
    }

    // per-position probabilities against the direct recomputation
    for _ in 0..trials {
        let way = rng.gen_range(2..4usize);
        let (c, m) = (3usize, 4usize);
        let alpha = 7.0f32;
        let maps: Vec<(Tensor, Tensor)> = (0..way)
            .map(|_| {
                (
                    Tensor::from_fn(&[c, m], |_| rng.gen_range(-1.0..1.0)),
                    Tensor::from_fn(&[c, m], |_| rng.gen_range(-1.0..1.0)),
                )
            })
            .collect();
        let mut dist = vec![vec![0.0f64; way]; m];
        for (k, (p, q)) in maps.iter().enumerate() {
            let gap: Vec<f64> = (0..c)
                .map(|ch| (0..m).map(|i| p.data()[ch * m + i] as f64).sum::<f64>() / m as f64)
                .collect();
            let ng = gap.iter().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..m {
                let qi: Vec<f64> = (0..c).map(|ch| q.data()[ch * m + i] as f64).collect();
                let nq = qi.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = gap.iter().zip(&qi).map(|(a, b)| a * b).sum::<f64>() / (ng * nq);
                dist[i][k] = alpha as f64 * (1.0 - cos);
            }
        }
        let mut tape = Tape::new();
        let pairs: Vec<(TensorId, TensorId)> = maps
            .iter()
            .map(|(p, q)| (tape.constant(p.clone()), tape.constant(q.clone())))
            .collect();
        let probs = position_probs(&mut tape, &pairs, alpha).unwrap();
        for i in 0..m {
            let z: f64 = (0..way).map(|k| (-dist[i][k]).exp()).sum();
            for k in 0..way {
                let expected = (-dist[i][k]).exp() / z;
                worst = worst.max((tape.value(probs).at2(i, k) as f64 - expected).abs());
            }
        }
    }

    // top-t selection against a sort oracle
    for _ in 0..trials {
        let n = rng.gen_range(5..80usize);
        let t = rng.gen_range(0..n + 5);
        let conf: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..40.0)).collect();
        let picked = select_topt(&conf, t);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| conf[a].partial_cmp(&conf[b]).unwrap().then(a.cmp(&b)));
        let mut expected = vec![false; n];
        for &i in order.iter().take(t.min(n)) {
            expected[i] = true;
        }
        assert_eq!(picked, expected, "top-t selection diverged from sort oracle");
    }

    // prototype augmentation against concat-and-mean
    for _ in 0..trials {
        let way = rng.gen_range(2..4usize);
        let shot = rng.gen_range(1..3usize);
        let support: Vec<Vec<Tensor>> = (0..way)
            .map(|_| (0..shot).map(|_| Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0))).collect())
            .collect();
        let queries: Vec<Tensor> = (0..6)
            .map(|_| Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let mut candidates = Vec::new();
        for q in 0..queries.len() {
            if rng.gen_bool(0.6) {
                candidates.push(Candidate {
                    query: q,
                    label: rng.gen_range(0..way),
                    confidence: 0.0,
                });
            }
        }
        let augmented = augment_prototypes(&support, &candidates, &queries);
        for k in 0..way {
            let mut pool: Vec<&Tensor> = support[k].iter().collect();
            let mut qs: Vec<usize> = candidates.iter().filter(|c| c.label == k).map(|c| c.query).collect();
            qs.sort_unstable();
            pool.extend(qs.iter().map(|&q| &queries[q]));
            for i in 0..12 {
                let mean: f64 = pool.iter().map(|t| t.data()[i] as f64).sum::<f64>() / pool.len() as f64;
                worst = worst.max((augmented[k].data()[i] as f64 - mean).abs());
            }
        }
    }

    let passed = worst < 1e-5;
    report(
        "oracle equivalence",
        passed,
        &format!("400 randomized trials, worst |impl - oracle| = {worst:.2e} (tol 1e-5)"),
    );
    assert!(passed, "worst deviation {worst:.2e}");
}

// ── criterion 3: attention normalization and invariants ──────────────

#[test]
fn criterion_03_attention_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3030);
    let m = 9;
    let fusion = MetaFusion::new(m, 3, 0.1, FusionMode::Meta, &mut rng).unwrap();
    let mut worst_sum: f64 = 0.0;
    let mut negatives = 0usize;
    for _ in 0..1000 {
        let p = random_map(&mut rng, 4, 3, 3);
        let q = random_map(&mut rng, 4, 3, 3);
        let mut tape = Tape::new();
        let vars = fusion.bind(&mut tape, false);
        let pid = tape.constant(p);
        let qid = tape.constant(q);
        let cam = cross_attend(&mut tape, pid, qid, &fusion, &vars).unwrap();
        for attn in [cam.class_attention, cam.query_attention] {
            let data = tape.value(attn).data();
            negatives += data.iter().filter(|&&v| v < 0.0).count();
            worst_sum = worst_sum.max((data.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        }
    }

    // permutation equivariance in meta mode
    let mut worst_perm: f64 = 0.0;
    let mut corr_bitwise = true;
    for _ in 0..50 {
        let (c, edge) = (5, 3);
        let p = random_map(&mut rng, c, edge, edge);
        let q = random_map(&mut rng, c, edge, edge);
        let mut perm: Vec<usize> = (0..m).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let q_perm = Tensor::from_fn(&[c, edge, edge], |idx| {
            let (ch, pos) = (idx / m, idx % m);
            q.data()[ch * m + perm[pos]]
        });
        let run = |qt: &Tensor| {
            let mut tape = Tape::new();
            let vars = fusion.bind(&mut tape, false);
            let pid = tape.constant(p.clone());
            let qid = tape.constant(qt.clone());
            let cam = cross_attend(&mut tape, pid, qid, &fusion, &vars).unwrap();
            (
                tape.value(cam.correlation).clone(),
                tape.value(cam.query_attention).clone(),
                tape.value(cam.query_attended).clone(),
            )
        };
        let (corr_a, attn_a, qbar_a) = run(&q);
        let (corr_b, attn_b, qbar_b) = run(&q_perm);
        for i in 0..m {
            for j in 0..m {
                if corr_b.at2(i, j).to_bits() != corr_a.at2(i, perm[j]).to_bits() {
                    corr_bitwise = false;
                }
            }
        }
        for j in 0..m {
            worst_perm = worst_perm.max((attn_b.data()[j] as f64 - attn_a.data()[perm[j]] as f64).abs());
        }
        for ch in 0..c {
            for j in 0..m {
                worst_perm = worst_perm.max((qbar_b.at2(ch, j) as f64 - qbar_a.at2(ch, perm[j]) as f64).abs());
            }
        }
    }

    // class attention invariance with constant-entry kernels
    let mut worst_class: f64 = 0.0;
    let uniform = MetaFusion::new(m, 3, 0.1, FusionMode::UniformMean, &mut rng).unwrap();
    let mut zeroed = MetaFusion::new(m, 3, 0.1, FusionMode::Meta, &mut rng).unwrap();
    zeroed.w1.value = Tensor::zeros(&[3, m]);
    zeroed.w2.value = Tensor::zeros(&[m, 3]);
    for fusion_const in [&uniform, &zeroed] {
        for _ in 0..25 {
            let (c, edge) = (5, 3);
            let p = random_map(&mut rng, c, edge, edge);
            let q = random_map(&mut rng, c, edge, edge);
            let mut perm: Vec<usize> = (0..m).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let q_perm = Tensor::from_fn(&[c, edge, edge], |idx| {
                let (ch, pos) = (idx / m, idx % m);
                q.data()[ch * m + perm[pos]]
            });
            let run = |qt: &Tensor| {
                let mut tape = Tape::new();
                let vars = fusion_const.bind(&mut tape, false);
                let pid = tape.constant(p.clone());
                let qid = tape.constant(qt.clone());
                let cam = cross_attend(&mut tape, pid, qid, fusion_const, &vars).unwrap();
                tape.value(cam.class_attention).clone()
            };
            let base_attention = run(&q);
            let b = run(&q_perm);
            for j in 0..m {
                worst_class = worst_class.max((b.data()[j] as f64 - base_attention.data()[j] as f64).abs());
            }
        }
    }

    // cosine scale invariance
    let mut worst_scale: f64 = 0.0;
    for _ in 0..50 {
        let (c, edge) = (4, 2);
        let p = random_map(&mut rng, c, edge, edge);
        let q = random_map(&mut rng, c, edge, edge);
        let k = rng.gen_range(0.5..20.0f32);
        let scale = |t: &Tensor| Tensor::from_fn(&[c, edge, edge], |i| t.data()[i] * k);
        let run = |pt: &Tensor, qt: &Tensor| {
            let mut tape = Tape::new();
            let vars = fusion.bind(&mut tape, false);
            let pid = tape.constant(pt.clone());
            let qid = tape.constant(qt.clone());
            let cam = cross_attend(&mut tape, pid, qid, &fusion, &vars).unwrap();
            (
                tape.value(cam.correlation).clone(),
                tape.value(cam.class_attention).clone(),
                tape.value(cam.query_attention).clone(),
                tape.value(cam.class_attended).clone(),
            )
        };
        let base = run(&p, &q);
        let scaled = run(&scale(&p), &scale(&q));
        for (a, b) in base.0.data().iter().zip(scaled.0.data()) {
            worst_scale = worst_scale.max((*a as f64 - *b as f64).abs());
        }
        for (a, b) in base.1.data().iter().zip(scaled.1.data()) {
            worst_scale = worst_scale.max((*a as f64 - *b as f64).abs());
        }
        for (a, b) in base.2.data().iter().zip(scaled.2.data()) {
            worst_scale = worst_scale.max((*a as f64 - *b as f64).abs());
        }
        for (a, b) in base.3.data().iter().zip(scaled.3.data()) {
            worst_scale = worst_scale.max(((*b as f64) / k as f64 - *a as f64).abs());
        }
    }

    let passed = worst_sum < 1e-5
        && negatives == 0
        && corr_bitwise
        && worst_perm < 1e-6
        && worst_class < 1e-6
        && worst_scale < 2e-5;
    report(
        "attention normalization & residual invariants",
        passed,
        &format!(
            "sum err {worst_sum:.2e}, negatives {negatives}, R columns bitwise {corr_bitwise}, \
             query equivariance {worst_perm:.2e}, class invariance (constant kernels) {worst_class:.2e}, \
             scale invariance {worst_scale:.2e}"
        ),
    );
    assert!(passed);
}

// ── criterion 4: transductive degeneracy ─────────────────────────────

#[test]
fn criterion_04_transductive_degeneracy() {
    let dataset = default_dataset();
    let config = RunConfig::default();
    let model = Model::new(config.model.clone(), dataset.classes_of(Split::Train).len(), 77).unwrap();
    let mut mismatches = 0usize;
    let episodes = 100;
    for index in 0..episodes {
        let inductive = EvalParams {
            split: Split::Test,
            way: 5,
            shot: 1,
            queries: 5,
            episodes: 1,
            seed: 4000 + index,
            transductive: None,
        };
        let zero_budget = EvalParams {
            transductive: Some(TransduceOptions {
                t0: 0,
                iters: 2,
                growth: 2,
            }),
            ..inductive.clone()
        };
        // per-episode labels come back through the metrics; compare the raw
        // label vectors via the underlying transduce loop instead
        let a = run_labels(&model, dataset, &inductive);
        let b = run_labels(&model, dataset, &zero_budget);
        if a != b {
            mismatches += 1;
        }
    }
    let passed = mismatches == 0;
    report(
        "transductive degeneracy",
        passed,
        &format!("zero-budget transduction vs inductive labels on {episodes} episodes, {mismatches} mismatches"),
    );
    assert_eq!(mismatches, 0);
}

fn run_labels(model: &Model, dataset: &Dataset, params: &EvalParams) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_mul(0x9e3779b97f4a7c15));
    let episode = sample_episode(dataset, params.split, params.way, params.shot, params.queries, &mut rng).unwrap();
    let mut support_maps = vec![Vec::new(); episode.way];
    for s in &episode.support {
        support_maps[s.episode_label].push(model.embed_image(&dataset.image(s.record)).unwrap());
    }
    let query_maps: Vec<Tensor> = episode
        .query
        .iter()
        .map(|q| model.embed_image(&dataset.image(q.record)).unwrap())
        .collect();
    let options = params.transductive.unwrap_or(TransduceOptions {
        t0: 0,
        iters: 1,
        growth: 1,
    });
    let result = fewshot_core::transductive::transduce(
        &support_maps,
        &query_maps,
        &options,
        None,
        &|prototypes, query| model.predict(prototypes, query),
    );
    if params.transductive.is_some() {
        result.labels
    } else {
        result.inductive_labels
    }
}

// ── criterion 5: learning above chance ───────────────────────────────

#[test]
fn criterion_05_learning_above_chance() {
    let mut all_pass = true;
    let mut details = Vec::new();
    for seed in [1u64, 2, 3] {
        let trained = full_model(seed);
        let ok = trained.best_val_accuracy >= 0.70
            && (trained.wall_seconds == 0.0 || trained.wall_seconds < 900.0);
        all_pass &= ok;
        details.push(format!(
            "seed {seed}: val {:.3} in {:.0}s",
            trained.best_val_accuracy, trained.wall_seconds
        ));
    }
    report("learning above chance", all_pass, &details.join("; "));
    assert!(all_pass, "{details:?}");
}

// ── criterion 6: attention ablation delta ────────────────────────────

#[test]
fn criterion_06_cam_ablation_delta() {
    let dataset = default_dataset();
    let mut deltas = Vec::new();
    let mut details = Vec::new();
    for seed in [1u64, 2, 3] {
        let full = full_model(seed);
        let nocam = nocam_model(seed);
        let params = EvalParams {
            split: Split::Test,
            way: 5,
            shot: 1,
            queries: 15,
            episodes: 600,
            seed: 6000 + seed,
            transductive: None,
        };
        let acc_full = evaluate_model(&full.model, dataset, &params).unwrap().mean_accuracy;
        let acc_nocam = evaluate_model(&nocam.model, dataset, &params).unwrap().mean_accuracy;
        let delta = 100.0 * (acc_full - acc_nocam);
        details.push(format!(
            "seed {seed}: full {:.2}% vs no-cam {:.2}% (delta {delta:+.2})",
            100.0 * acc_full,
            100.0 * acc_nocam
        ));
        deltas.push(delta);
    }
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let passed = mean_delta >= 2.0 && deltas.iter().all(|&d| d > 0.0);
    report(
        "attention ablation delta",
        passed,
        &format!("mean delta {mean_delta:+.2} points over 600 test episodes x 3 seeds; {}", details.join("; ")),
    );
    assert!(passed, "{details:?}");
}

// ── criterion 7: transduction delta ──────────────────────────────────

#[test]
fn criterion_07_transduction_delta() {
    let dataset = noisy_dataset();
    let trained = noisy_model();
    let params = EvalParams {
        split: Split::Test,
        way: 5,
        shot: 1,
        queries: 15,
        episodes: 200,
        seed: 7000,
        transductive: Some(TransduceOptions::default()),
    };
    let summary = evaluate_model(&trained.model, dataset, &params).unwrap();
    let transductive_mean = summary.mean_accuracy;
    let inductive_mean = summary
        .metrics
        .iter()
        .map(|m| m.inductive_accuracy.unwrap())
        .sum::<f64>()
        / summary.metrics.len() as f64;
    let strictly_higher = summary
        .metrics
        .iter()
        .filter(|m| m.accuracy > m.inductive_accuracy.unwrap())
        .count();
    let share = strictly_higher as f64 / summary.metrics.len() as f64;
    let passed = transductive_mean >= inductive_mean - 0.005 && share >= 0.55;
    report(
        "transduction delta",
        passed,
        &format!(
            "transductive {:.2}% vs inductive {:.2}% (delta {:+.2} pts), strictly higher on {:.0}% of 200 episodes",
            100.0 * transductive_mean,
            100.0 * inductive_mean,
            100.0 * (transductive_mean - inductive_mean),
            100.0 * share
        ),
    );
    assert!(passed);
}

// ── criterion 8: correlation-layer complexity scaling ────────────────

#[test]
fn criterion_08_complexity_scaling() {
    let c = 64;
    let timing = |edge: usize, reps: usize| -> f64 {
        let m = edge * edge;
        let mut rng = ChaCha8Rng::seed_from_u64(edge as u64);
        let p = random_map(&mut rng, c, edge, edge);
        let q = random_map(&mut rng, c, edge, edge);
        let mut trials = Vec::new();
        for _ in 0..7 {
            let start = Instant::now();
            for _ in 0..reps {
                let mut tape = Tape::new();
                let pid = tape.constant(p.clone());
                let qid = tape.constant(q.clone());
                let corr = fewshot_core::cam::correlation(&mut tape, pid, qid).unwrap();
                assert_eq!(tape.value(corr).numel(), m * m);
            }
            trials.push(start.elapsed().as_secs_f64() / reps as f64);
        }
        trials.sort_by(|a, b| a.partial_cmp(b).unwrap());
        trials[trials.len() / 2]
    };
    // warmup then measure: m = 36 vs m = 144 quadruples h*w
    let _ = timing(6, 50);
    let small = timing(6, 400);
    let large = timing(12, 50);
    let ratio = large / small;
    let passed = (8.0..=24.0).contains(&ratio);
    report(
        "complexity scaling",
        passed,
        &format!("correlation layer m=36: {:.1}us, m=144: {:.1}us, ratio {ratio:.1} (want 16 +/- 50%)", small * 1e6, large * 1e6),
    );
    assert!(passed, "ratio {ratio}");
}

// ── criterion 9: attention localization ──────────────────────────────

#[test]
fn criterion_09_attention_localization() {
    let dataset = default_dataset();
    let full = full_model(1);
    let nocam = nocam_model(1);

    let edge = full.model.embedding.config.feature_edge();
    let cell_px = dataset.image_size / edge;
    let episodes = 150;

    // trained cross attention: query attention argmax inside the bbox of
    // correctly classified queries
    let (mut cam_hits, mut cam_correct) = (0usize, 0usize);
    // baseline: raw feature-energy argmax of the attention-free model
    let (mut energy_hits, mut energy_correct) = (0usize, 0usize);

    for index in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + index);
        let episode = sample_episode(dataset, Split::Test, 5, 1, 3, &mut rng).unwrap();

        for (model, hits, correct, use_attention) in [
            (&full.model, &mut cam_hits, &mut cam_correct, true),
            (&nocam.model, &mut energy_hits, &mut energy_correct, false),
        ] {
            let mut support_maps = vec![Vec::new(); episode.way];
            for s in &episode.support {
                support_maps[s.episode_label].push(model.embed_image(&dataset.image(s.record)).unwrap());
            }
            let prototypes = fewshot_core::transductive::raw_prototypes(&support_maps);
            for q in &episode.query {
                let query_map = model.embed_image(&dataset.image(q.record)).unwrap();
                let outputs = model.pair_outputs(&prototypes, &query_map).unwrap();
                let (label, _) = fewshot_core::fewshot::predict_inductive(&outputs, model.config.alpha);
                if label != q.episode_label {
                    continue;
                }
                *correct += 1;
                let pos = if use_attention {
                    let attn = &outputs[label].query_attention;
                    argmax_position(attn.data())
                } else {
                    let energy: Vec<f32> = (0..edge * edge)
                        .map(|p| {
                            (0..query_map.shape()[0])
                                .map(|ch| query_map.at2(ch, p).powi(2))
                                .sum()
                        })
                        .collect();
                    argmax_position(&energy)
                };
                let (row, col) = (pos / edge, pos % edge);
                let (cx, cy) = (col * cell_px + cell_px / 2, row * cell_px + cell_px / 2);
                if dataset.bbox(q.record).contains(cx, cy) {
                    *hits += 1;
                }
            }
        }
    }

    let cam_rate = cam_hits as f64 / cam_correct.max(1) as f64;
    let energy_rate = energy_hits as f64 / energy_correct.max(1) as f64;
    let passed = cam_rate >= 0.60 && energy_rate <= 0.35;
    report(
        "attention localization",
        passed,
        &format!(
            "trained attention argmax in bbox {:.0}% of {} correct queries (need >= 60%), \
             no-cam energy argmax {:.0}% of {} (need <= 35%)",
            100.0 * cam_rate,
            cam_correct,
            100.0 * energy_rate,
            energy_correct
        ),
    );
    assert!(passed);
}

fn argmax_position(values: &[f32]) -> usize {
    values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0
}

// ── criterion 10: statistics harness ─────────────────────────────────

#[test]
fn criterion_10_statistics_harness() {
    let dataset = default_dataset();
    let config = RunConfig::default();
    let model = Model::new(config.model.clone(), dataset.classes_of(Split::Train).len(), 5).unwrap();
    let params = EvalParams {
        split: Split::Val,
        way: 5,
        shot: 1,
        queries: 5,
        episodes: 60,
        seed: 1010,
        transductive: None,
    };
    let summary = evaluate_model(&model, dataset, &params).unwrap();

    // recomputation oracle with a different accumulation order
    let accuracies: Vec<f64> = summary.metrics.iter().map(|m| m.accuracy).collect();
    let n = accuracies.len() as f64;
    let mean: f64 = accuracies.iter().rev().sum::<f64>() / n;
    let var: f64 = accuracies.iter().rev().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
    let expected_ci = 1.96 * var.sqrt() / n.sqrt();
    let diff = (summary.ci95 - expected_ci).abs();
    let sd_diff = (sample_sd(&accuracies) - var.sqrt()).abs();
    let passed = diff < 1e-9 && sd_diff < 1e-9;
    report(
        "statistics harness",
        passed,
        &format!("CI {:.6e} vs oracle {:.6e}, |diff| = {diff:.2e} (tol 1e-9)", summary.ci95, expected_ci),
    );
    assert!(passed);
}
