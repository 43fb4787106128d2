//! Training and evaluation drivers: episodic SGD with an LR schedule and
//! best-on-validation checkpointing, worker-pool evaluation with 95%
//! confidence intervals, transductive evaluation, and attention export.
//! Metrics stream as one JSON object per line; logs carry the config and the
//! dataset content hash and contain nothing wall-clock dependent, so a fixed
//! seed reproduces them byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::RunConfig;
use crate::error::{ConfigError, DataError, ProtocolError, TensorError};
use crate::model::{save_checkpoint, Model};
use crate::synth::{sample_episode, Dataset, Split};
use crate::tensor::{Sgd, Tape, Tensor};
use crate::transductive::{transduce, IterationDiagnostics, TransduceOptions, TransduceResult};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("non-finite loss at epoch {epoch}, episode {episode}; aborting")]
    NonFiniteLoss { epoch: usize, episode: usize },
}

impl RunError {
    /// Process exit code: 2 for validation problems, 3 for numeric aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::NonFiniteLoss { .. } => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    /// Mean raw nearest-neighbor loss sum per episode.
    pub nn_loss: f64,
    /// Mean raw global loss sum per episode.
    pub global_loss: f64,
    /// Mean combined loss per episode.
    pub total_loss: f64,
    pub val_accuracy: f64,
}

pub struct TrainOutcome {
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
    pub best_val_accuracy: f64,
    pub epochs: Vec<EpochStats>,
}

/// Per-class raw embedded support maps plus embedded queries for one episode.
struct EmbeddedEpisode {
    support_maps: Vec<Vec<Tensor>>,
    query_maps: Vec<Tensor>,
    truth: Vec<usize>,
}

fn embed_episode(
    model: &Model,
    dataset: &Dataset,
    episode: &crate::fewshot::Episode,
) -> Result<EmbeddedEpisode, RunError> {
    let mut support_maps = vec![Vec::new(); episode.way];
    for s in &episode.support {
        support_maps[s.episode_label].push(model.embed_image(&dataset.image(s.record))?);
    }
    let mut query_maps = Vec::with_capacity(episode.query.len());
    let mut truth = Vec::with_capacity(episode.query.len());
    for q in &episode.query {
        query_maps.push(model.embed_image(&dataset.image(q.record))?);
        truth.push(q.episode_label);
    }
    Ok(EmbeddedEpisode {
        support_maps,
        query_maps,
        truth,
    })
}

/// Episodic SGD over mini-batches, stepping the LR at the configured
/// milestones and checkpointing the best validation accuracy.
pub fn train(
    config: &RunConfig,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<TrainOutcome, RunError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| DataError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let train_classes = dataset.classes_of(Split::Train).len();
    let mut model = Model::new(config.model.clone(), train_classes, config.train.seed)?;
    let t = &config.train;
    let mut sgd = Sgd::new(t.lr, t.momentum, t.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);

    let mut log = String::new();
    log.push_str(&format!(
        "{}\n",
        serde_json::json!({
            "config": config,
            "dataset_hash": dataset.content_hash,
            "train_classes": train_classes,
        })
    ));

    let checkpoint_dir = out_dir.join("checkpoint");
    // epoch 0 checkpoint: training for zero epochs yields the initialization
    let mut best_val = f64::NEG_INFINITY;
    save_checkpoint(&checkpoint_dir, &model, config, &dataset.content_hash, 0.0)?;

    let mut epochs = Vec::new();
    let mut lr = t.lr;
    for epoch in 1..=t.epochs {
        if t.milestones.contains(&epoch) {
            lr *= t.decay;
        }
        sgd.lr = lr;

        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut episode_idx = 0usize;
        while episode_idx < t.episodes_per_epoch {
            let batch = (t.episodes_per_epoch - episode_idx).min(t.batch_episodes);
            model.zero_grads();
            for b in 0..batch {
                let episode = sample_episode(
                    dataset,
                    Split::Train,
                    t.way,
                    t.shot,
                    t.queries,
                    &mut rng,
                )?;
                let global_indices: Vec<usize> = episode
                    .query
                    .iter()
                    .map(|q| {
                        dataset.global_index(q.global_class).ok_or(
                            ProtocolError::GlobalLabelOutOfRange {
                                label: q.global_class,
                                count: train_classes,
                            },
                        )
                    })
                    .collect::<Result<_, _>>()?;
                let mut tape = Tape::new();
                let vars = model.bind(&mut tape, true);
                let loss = model.episode_loss(
                    &mut tape,
                    &vars,
                    &episode,
                    &|record| dataset.image(record),
                    &global_indices,
                )?;
                if !loss.total.is_finite() {
                    return Err(RunError::NonFiniteLoss {
                        epoch,
                        episode: episode_idx + b,
                    });
                }
                sums.0 += loss.nn_sum as f64;
                sums.1 += loss.global_sum as f64;
                sums.2 += loss.total as f64;
                tape.backward(loss.objective)?;
                model.accumulate(&tape, &vars, 1.0 / batch as f32);
            }
            let mut params = model.params_mut();
            let mut pairs: Vec<(&mut [f32], &[f32])> = params
                .iter_mut()
                .map(|p| {
                    let crate::params::Param { value, grad, .. } = &mut **p;
                    (value.data_mut(), grad.as_slice())
                })
                .collect();
            sgd.step(&mut pairs)?;
            drop(pairs);
            episode_idx += batch;
        }

        let val_accuracy = if t.val_episodes > 0 {
            let params = EvalParams {
                split: Split::Val,
                way: t.way,
                shot: t.shot,
                queries: config.eval.queries,
                episodes: t.val_episodes,
                seed: t.seed ^ VAL_SEED_OFFSET,
                transductive: None,
            };
            evaluate_model(&model, dataset, &params)?.mean_accuracy
        } else {
            f64::NAN
        };

        let n = t.episodes_per_epoch as f64;
        let stats = EpochStats {
            epoch,
            lr,
            nn_loss: sums.0 / n,
            global_loss: sums.1 / n,
            total_loss: sums.2 / n,
            val_accuracy,
        };
        log.push_str(&format!(
            "{}\n",
            serde_json::to_string(&stats).expect("stats serialize")
        ));
        if val_accuracy.is_nan() || val_accuracy > best_val {
            best_val = if val_accuracy.is_nan() { best_val } else { val_accuracy };
            save_checkpoint(
                &checkpoint_dir,
                &model,
                config,
                &dataset.content_hash,
                best_val.max(0.0),
            )?;
        }
        epochs.push(stats);
    }

    let log_path = out_dir.join("train_log.jsonl");
    fs::write(&log_path, &log).map_err(|e| DataError::Io {
        path: log_path.display().to_string(),
        source: e,
    })?;
    Ok(TrainOutcome {
        checkpoint_dir,
        log_path,
        best_val_accuracy: if best_val.is_finite() { best_val } else { 0.0 },
        epochs,
    })
}

/// Keeps validation episodes decorrelated from the training stream.
const VAL_SEED_OFFSET: u64 = 0x00c0_ffee;

// ── evaluation ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalParams {
    pub split: Split,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
    pub transductive: Option<TransduceOptions>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeMetric {
    pub episode: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inductive_accuracy: Option<f64>,
    #[serde(skip)]
    pub iterations: Vec<IterationDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_accuracy: f64,
    /// 1.96 * sd / sqrt(n) over per-episode accuracies.
    pub ci95: f64,
    pub metrics: Vec<EpisodeMetric>,
}

/// Sample standard deviation (n-1) in f64.
pub fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt()
}

pub fn confidence_interval95(values: &[f64]) -> (f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ci = 1.96 * sample_sd(values) / (values.len() as f64).sqrt();
    (mean, ci)
}

/// Runs one evaluation episode end to end.
fn run_episode(
    model: &Model,
    dataset: &Dataset,
    params: &EvalParams,
    index: usize,
) -> Result<EpisodeMetric, RunError> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(index as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let episode = sample_episode(dataset, params.split, params.way, params.shot, params.queries, &mut rng)?;
    let embedded = embed_episode(model, dataset, &episode)?;
    let options = params.transductive.unwrap_or(TransduceOptions {
        t0: 0,
        iters: 1,
        growth: 1,
    });
    let result: TransduceResult = transduce(
        &embedded.support_maps,
        &embedded.query_maps,
        &options,
        Some(&embedded.truth),
        &|prototypes, query| model.predict(prototypes, query),
    );
    let (labels, confidences, inductive_accuracy) = if params.transductive.is_some() {
        let inductive = accuracy_of(&result.inductive_labels, &embedded.truth);
        (result.labels, result.confidences, Some(inductive))
    } else {
        // the zero-budget loop is the inductive pass itself
        (result.inductive_labels, result.inductive_confidences, None)
    };
    Ok(EpisodeMetric {
        episode: index,
        accuracy: accuracy_of(&labels, &embedded.truth),
        mean_confidence: confidences.iter().map(|&c| c as f64).sum::<f64>() / confidences.len() as f64,
        inductive_accuracy,
        iterations: if params.transductive.is_some() {
            result.iterations
        } else {
            Vec::new()
        },
    })
}

fn accuracy_of(labels: &[usize], truth: &[usize]) -> f64 {
    labels.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Episodes run on a worker pool over the read-only model; every episode is
/// seeded from (seed, index) so the schedule cannot change the results.
pub fn evaluate_model(
    model: &Model,
    dataset: &Dataset,
    params: &EvalParams,
) -> Result<EvalSummary, RunError> {
    let metrics: Result<Vec<EpisodeMetric>, RunError> = (0..params.episodes)
        .into_par_iter()
        .map(|i| run_episode(model, dataset, params, i))
        .collect();
    let metrics = metrics?;
    let accuracies: Vec<f64> = metrics.iter().map(|m| m.accuracy).collect();
    let (mean_accuracy, ci95) = confidence_interval95(&accuracies);
    Ok(EvalSummary {
        episodes: params.episodes,
        mean_accuracy,
        ci95,
        metrics,
    })
}

/// Formats the summary and per-episode metrics as JSON lines.
pub fn metrics_jsonl(summary: &EvalSummary) -> String {
    let mut out = String::new();
    for m in &summary.metrics {
        out.push_str(&serde_json::to_string(m).expect("metric serializes"));
        out.push('\n');
        for (j, iter) in m.iterations.iter().enumerate() {
            out.push_str(&format!(
                "{}\n",
                serde_json::json!({
                    "episode": m.episode,
                    "iteration": j + 1,
                    "budget": iter.budget,
                    "selected_per_class": iter.selected_per_class,
                    "pseudo_label_accuracy": iter.pseudo_accuracy,
                })
            ));
        }
    }
    out.push_str(&format!(
        "{}\n",
        serde_json::json!({
            "episodes": summary.episodes,
            "mean_accuracy": summary.mean_accuracy,
            "ci95": summary.ci95,
        })
    ));
    out
}

/// Loads a checkpoint and evaluates it, refusing a dataset whose content
/// hash differs from the one the model was trained on unless forced.
pub fn evaluate_checkpoint(
    checkpoint_dir: &Path,
    dataset: &Dataset,
    params: &EvalParams,
    force: bool,
) -> Result<EvalSummary, RunError> {
    let (model, meta) = crate::model::load_checkpoint(checkpoint_dir)?;
    if !force && meta.dataset_hash != dataset.content_hash {
        return Err(DataError::HashMismatch {
            expected: meta.dataset_hash,
            actual: dataset.content_hash.clone(),
        }
        .into());
    }
    evaluate_model(&model, dataset, params)
}

// ── attention export ─────────────────────────────────────────────────

/// Writes one class/query attention pair per (class, query) pairing of a
/// sampled episode; file stems encode episode, class and query indices.
pub fn export_attention_maps(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, RunError> {
    fs::create_dir_all(out_dir).map_err(|e| DataError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episode = sample_episode(dataset, split, way, shot, queries, &mut rng)?;
    let embedded = embed_episode(model, dataset, &episode)?;
    let prototypes = crate::transductive::raw_prototypes(&embedded.support_maps);
    let mut written = Vec::new();
    for (q_idx, query_map) in embedded.query_maps.iter().enumerate() {
        let outputs = model.pair_outputs(&prototypes, query_map)?;
        for (k, output) in outputs.iter().enumerate() {
            let stem = out_dir.join(format!("ep{seed}_class{k}_query{q_idx}"));
            crate::cam::export_attention(output, &stem)?;
            written.push(stem);
        }
    }
    Ok(written)
}
