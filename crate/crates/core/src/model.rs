//! The assembled model: embedding, fusion layer, global classifier, the
//! episode-level forward passes for training and inference, and checkpoints.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cam::{cross_attend, CamOutput, FusionMode, MetaFusion};
use crate::config::{Ablation, ModelConfig, RunConfig};
use crate::container;
use crate::embedding::{class_prototype, EmbeddingConfig, EmbeddingNet, EmbeddingVars};
use crate::error::{DataError, TensorError};
use crate::fewshot::{loss_global, loss_nn, loss_total, position_logits, predict_inductive, Episode, GlobalClassifier};
use crate::params::Param;
use crate::tensor::{Tape, Tensor, TensorId};

pub struct Model {
    pub embedding: EmbeddingNet,
    pub fusion: MetaFusion,
    pub global: GlobalClassifier,
    pub config: ModelConfig,
}

/// Tape bindings for one training episode.
pub struct ModelVars {
    pub embedding: EmbeddingVars,
    pub fusion: crate::cam::FusionVars,
    pub global_weight: TensorId,
}

/// Raw sums of the episode losses next to the normalized optimizer objective.
pub struct EpisodeLoss {
    pub objective: TensorId,
    pub nn_sum: f32,
    pub global_sum: f32,
    pub total: f32,
}

impl Model {
    pub fn new(config: ModelConfig, train_classes: usize, seed: u64) -> Result<Self, TensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed_cfg = EmbeddingConfig {
            input_size: config.input_size,
            channels: config.channels,
        };
        let embedding = EmbeddingNet::new(embed_cfg, &mut rng);
        let fusion = MetaFusion::new(
            embed_cfg.positions(),
            config.reduction,
            config.tau,
            match config.ablation {
                Ablation::Noml1 => FusionMode::UniformMean,
                Ablation::Noml2 => FusionMode::LearnedStatic,
                _ => FusionMode::Meta,
            },
            &mut rng,
        )?;
        let global = GlobalClassifier::new(train_classes, embed_cfg.out_channels(), &mut rng);
        Ok(Self {
            embedding,
            fusion,
            global,
            config,
        })
    }

    fn uses_cam(&self) -> bool {
        self.config.ablation != Ablation::NoCam
    }

    /// Trainable parameters in a stable order (active fusion params only).
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut params = self.embedding.params_mut();
        params.extend(self.fusion.params_mut());
        params.push(&mut self.global.weight);
        params
    }

    /// Every parameter, for checkpoints.
    pub fn all_params(&self) -> Vec<&Param> {
        let mut params = self.embedding.params();
        params.extend(self.fusion.all_params());
        params.push(&self.global.weight);
        params
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut params = self.embedding.params_mut();
        params.extend(self.fusion.all_params_mut());
        params.push(&mut self.global.weight);
        params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            embedding: self.embedding.bind(tape, trainable),
            fusion: self.fusion.bind(tape, trainable),
            global_weight: self.global.bind(tape, trainable),
        }
    }

    pub fn accumulate(&mut self, tape: &Tape, vars: &ModelVars, scale: f32) {
        self.embedding.accumulate(tape, &vars.embedding, scale);
        self.fusion.accumulate(tape, &vars.fusion, scale);
        self.global.weight.accumulate(tape, vars.global_weight, scale);
    }

    pub fn zero_grads(&mut self) {
        for p in self.all_params_mut() {
            p.zero_grad();
        }
    }

    /// Training forward pass for one episode. `images` maps record index to
    /// the (s, s, 3) image; `global_indices` maps each query to its row in
    /// the global classifier.
    pub fn episode_loss(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        episode: &Episode,
        images: &dyn Fn(usize) -> Tensor,
        global_indices: &[usize],
    ) -> Result<EpisodeLoss, TensorError> {
        let (c, m) = (
            self.embedding.config.out_channels(),
            self.embedding.config.positions(),
        );
        let mut prototypes = Vec::with_capacity(episode.way);
        for k in 0..episode.way {
            let mut maps = Vec::new();
            for s in episode.support.iter().filter(|s| s.episode_label == k) {
                let feat = self.embedding.embed(tape, &vars.embedding, &images(s.record))?;
                maps.push(tape.reshape(feat, &[c, m])?);
            }
            let proto = class_prototype(tape, &maps).map_err(|_| TensorError::Dimension {
                op: "episode_loss",
                expected: "non-empty support per class".into(),
                got: vec![k],
            })?;
            prototypes.push(proto);
        }

        let mut nn_terms = Vec::with_capacity(episode.query.len());
        let mut global_terms = Vec::with_capacity(episode.query.len());
        for (b, q) in episode.query.iter().enumerate() {
            let feat = self.embedding.embed(tape, &vars.embedding, &images(q.record))?;
            let query_map = tape.reshape(feat, &[c, m])?;
            let mut pairs = Vec::with_capacity(episode.way);
            for &proto in &prototypes {
                if self.uses_cam() {
                    let cam = cross_attend(tape, proto, query_map, &self.fusion, &vars.fusion)?;
                    pairs.push((cam.class_attended, cam.query_attended));
                } else {
                    pairs.push((proto, query_map));
                }
            }
            let logits = position_logits(tape, &pairs, self.config.alpha)?;
            nn_terms.push(loss_nn(tape, logits, q.episode_label)?);
            let true_query_map = pairs[q.episode_label].1;
            global_terms.push(loss_global(
                tape,
                true_query_map,
                vars.global_weight,
                global_indices[b],
            )?);
        }

        let nn_total = sum_scalars(tape, &nn_terms)?;
        let global_total = sum_scalars(tape, &global_terms)?;
        let combined = loss_total(tape, nn_total, global_total, self.config.lambda)?;
        // optimizer objective: per-position per-query mean of the combined loss
        let norm = 1.0 / (episode.query.len() as f32 * m as f32);
        let objective = tape.scale(combined, norm);
        Ok(EpisodeLoss {
            objective,
            nn_sum: tape.value(nn_total).item(),
            global_sum: tape.value(global_total).item(),
            total: tape.value(combined).item(),
        })
    }

    /// Feature map (c, m) of one image, no gradients.
    pub fn embed_image(&self, image: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let vars = self.embedding.bind(&mut tape, false);
        let feat = self.embedding.embed(&mut tape, &vars, image)?;
        let (c, m) = (
            self.embedding.config.out_channels(),
            self.embedding.config.positions(),
        );
        let id = tape.reshape(feat, &[c, m])?;
        Ok(tape.value(id).clone())
    }

    /// Attention outputs of one query against every class prototype; the
    /// attention-free ablation yields the raw pair under uniform attention.
    pub fn pair_outputs(
        &self,
        prototypes: &[Tensor],
        query_map: &Tensor,
    ) -> Result<Vec<CamOutput>, TensorError> {
        let m = self.embedding.config.positions();
        let edge = self.embedding.config.feature_edge();
        if self.uses_cam() {
            let mut tape = Tape::new();
            let vars = self.fusion.bind(&mut tape, false);
            let query_id = tape.constant(query_map.clone());
            let mut outputs = Vec::with_capacity(prototypes.len());
            for proto in prototypes {
                let proto_id = tape.constant(proto.clone());
                let cam = cross_attend(&mut tape, proto_id, query_id, &self.fusion, &vars)?;
                outputs.push(crate::cam::extract_output(&tape, &cam, edge, edge));
            }
            Ok(outputs)
        } else {
            let uniform = Tensor::full(&[edge, edge], 1.0 / m as f32);
            Ok(prototypes
                .iter()
                .map(|proto| CamOutput {
                    class_attended: proto.clone(),
                    query_attended: query_map.clone(),
                    class_attention: uniform.clone(),
                    query_attention: uniform.clone(),
                    correlation: Tensor::zeros(&[m, m]),
                })
                .collect())
        }
    }

    /// Inductive label and confidence for one query map.
    pub fn predict(&self, prototypes: &[Tensor], query_map: &Tensor) -> (usize, f32) {
        let outputs = self
            .pair_outputs(prototypes, query_map)
            .expect("prediction shapes fixed by construction");
        predict_inductive(&outputs, self.config.alpha)
    }
}

fn sum_scalars(tape: &mut Tape, terms: &[TensorId]) -> Result<TensorId, TensorError> {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

// ── checkpoints ──────────────────────────────────────────────────────

pub struct CheckpointMeta {
    pub config: RunConfig,
    pub dataset_hash: String,
    pub train_classes: usize,
    pub best_val_accuracy: f64,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes every named tensor as its own container file plus a manifest of
/// names, shapes and run metadata.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    config: &RunConfig,
    dataset_hash: &str,
    best_val_accuracy: f64,
) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = String::new();
    manifest.push_str(&format!("dataset_hash {dataset_hash}\n"));
    manifest.push_str(&format!("train_classes {}\n", model.global.classes));
    manifest.push_str(&format!("best_val_accuracy {best_val_accuracy}\n"));
    manifest.push_str(&format!(
        "config {}\n",
        serde_json::to_string(config).expect("config serializes")
    ));
    for param in model.all_params() {
        let file = format!("{}.cant", param.name);
        container::write_file(&dir.join(&file), &param.value)?;
        let extents: Vec<String> = param.value.shape().iter().map(|e| e.to_string()).collect();
        manifest.push_str(&format!("tensor {} {}\n", param.name, extents.join(" ")));
    }
    fs::write(dir.join("manifest.txt"), manifest).map_err(|e| io_err(dir, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta), DataError> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let mut config: Option<RunConfig> = None;
    let mut dataset_hash = String::new();
    let mut train_classes = 0usize;
    let mut best_val_accuracy = 0.0f64;
    let mut tensor_names = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let bad = |detail: String| DataError::BadManifest {
            path: manifest_path.display().to_string(),
            line: lineno + 1,
            detail,
        };
        let Some((head, rest)) = line.split_once(' ') else {
            continue;
        };
        match head {
            "dataset_hash" => dataset_hash = rest.to_string(),
            "train_classes" => {
                train_classes = rest.parse().map_err(|_| bad("bad train_classes".into()))?
            }
            "best_val_accuracy" => {
                best_val_accuracy = rest.parse().map_err(|_| bad("bad accuracy".into()))?
            }
            "config" => {
                config =
                    Some(serde_json::from_str(rest).map_err(|e| bad(format!("bad config: {e}")))?)
            }
            "tensor" => {
                let name = rest.split(' ').next().unwrap_or_default().to_string();
                tensor_names.push(name);
            }
            _ => return Err(bad(format!("unknown manifest entry {head:?}"))),
        }
    }
    let config = config.ok_or_else(|| DataError::BadManifest {
        path: manifest_path.display().to_string(),
        line: 0,
        detail: "missing config line".into(),
    })?;
    let mut model = Model::new(config.model.clone(), train_classes, 0).map_err(DataError::from)?;
    for param in model.all_params_mut() {
        if !tensor_names.contains(&param.name) {
            return Err(DataError::MissingTensor {
                name: param.name.clone(),
            });
        }
        let tensor = container::read_file(&dir.join(format!("{}.cant", param.name)))?;
        if tensor.shape() != param.value.shape() {
            return Err(DataError::Tensor(TensorError::ShapeMismatch {
                op: "load_checkpoint",
                lhs: param.value.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            }));
        }
        param.value = tensor;
    }
    Ok((
        model,
        CheckpointMeta {
            config,
            dataset_hash,
            train_classes,
            best_val_accuracy,
        },
    ))
}
