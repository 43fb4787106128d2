//! Run configuration: defaults, the `key = value` config file format with
//! one section per subsystem, and validation.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Which pieces of the model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Cross attention with the meta-learned fusion kernel.
    #[default]
    Full,
    /// Embedding and both losses, attention bypassed entirely.
    NoCam,
    /// Cross attention with the fixed mean kernel.
    Noml1,
    /// Cross attention with one learned kernel shared across pairs.
    Noml2,
}

impl Ablation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Self::Full),
            "no-cam" => Some(Self::NoCam),
            "noml-1" => Some(Self::Noml1),
            "noml-2" => Some(Self::Noml2),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoCam => "no-cam",
            Self::Noml1 => "noml-1",
            Self::Noml2 => "noml-2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub channels: [usize; 3],
    pub tau: f32,
    pub reduction: usize,
    pub alpha: f32,
    pub lambda: f32,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 48,
            channels: [32, 64, 64],
            tau: 0.025,
            reduction: 6,
            alpha: 20.0,
            lambda: 0.5,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn positions(&self) -> usize {
        let edge = self.input_size / 8;
        edge * edge
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub way: usize,
    pub shot: usize,
    /// Query samples per class in a training episode.
    pub queries: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Episodes per optimizer step.
    pub batch_episodes: usize,
    pub lr: f32,
    /// Epochs at whose start the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Validation episodes after each epoch for best-checkpoint selection.
    pub val_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            queries: 6,
            epochs: 10,
            episodes_per_epoch: 200,
            batch_episodes: 8,
            lr: 0.1,
            milestones: vec![7, 9],
            decay: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            val_episodes: 120,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub way: usize,
    pub shot: usize,
    /// Query samples per class in an evaluation episode.
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            queries: 15,
            episodes: 600,
            seed: 9001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransductiveConfig {
    pub t0: usize,
    pub iters: usize,
    pub growth: usize,
}

impl Default for TransductiveConfig {
    fn default() -> Self {
        Self {
            t0: 35,
            iters: 2,
            growth: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub transductive: TransductiveConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |section: &str, key: &str, detail: String| ConfigError::Invalid {
            section: section.into(),
            key: key.into(),
            detail,
        };
        let m = &self.model;
        if m.input_size == 0 || m.input_size % 8 != 0 {
            return Err(bad("model", "input_size", format!("{} is not a positive multiple of 8", m.input_size)));
        }
        if m.channels.iter().any(|&c| c == 0) {
            return Err(bad("model", "channels", "zero channel width".into()));
        }
        if !(m.tau > 0.0) {
            return Err(bad("model", "tau", format!("{} must be positive", m.tau)));
        }
        if m.reduction == 0 || m.positions() % m.reduction != 0 {
            return Err(bad(
                "model",
                "reduction",
                format!("{} must divide the {} spatial positions", m.reduction, m.positions()),
            ));
        }
        if m.alpha < 0.0 {
            return Err(bad("model", "alpha", "negative distance scale".into()));
        }
        if m.lambda < 0.0 {
            return Err(bad("model", "lambda", "negative loss weight".into()));
        }
        let t = &self.train;
        for (key, value) in [
            ("way", t.way),
            ("shot", t.shot),
            ("queries", t.queries),
            ("batch_episodes", t.batch_episodes),
        ] {
            if value == 0 {
                return Err(bad("train", key, "must be positive".into()));
            }
        }
        if t.way < 2 {
            return Err(bad("train", "way", "episodes need at least 2 classes".into()));
        }
        if !(t.lr > 0.0) {
            return Err(bad("train", "lr", format!("{} must be positive", t.lr)));
        }
        if !(t.decay > 0.0) {
            return Err(bad("train", "decay", format!("{} must be positive", t.decay)));
        }
        if t.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("train", "milestones", "must be strictly increasing".into()));
        }
        let e = &self.eval;
        if e.way < 2 || e.shot == 0 || e.queries == 0 || e.episodes == 0 {
            return Err(bad("eval", "way/shot/queries/episodes", "must be positive (way >= 2)".into()));
        }
        let tr = &self.transductive;
        if tr.iters == 0 {
            return Err(bad("transductive", "iters", "must be at least 1".into()));
        }
        if tr.growth == 0 {
            return Err(bad("transductive", "growth", "must be at least 1".into()));
        }
        Ok(())
    }

    /// Parses the `[section]` / `key = value` file format. Later keys
    /// override earlier ones, so a file can layer on the defaults.
    pub fn parse(text: &str, filename: &str) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        config.apply_text(text, filename)?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str, filename: &str) -> Result<(), ConfigError> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| ConfigError::Parse {
                file: filename.to_string(),
                line: lineno + 1,
                detail,
            };
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| err("unterminated section header".into()))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            self.apply(section.as_str(), key.trim(), value.trim())
                .map_err(|detail| err(detail))?;
        }
        Ok(())
    }

    /// Sets one `section.key` from its string form; flags reuse this.
    pub fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("cannot parse {value:?}"))
        }
        match (section, key) {
            ("model", "input_size") => self.model.input_size = num(value)?,
            ("model", "channels") => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err("channels wants three comma-separated widths".into());
                }
                for (slot, part) in self.model.channels.iter_mut().zip(parts) {
                    *slot = num(part)?;
                }
            }
            ("model", "tau") => self.model.tau = num(value)?,
            ("model", "reduction") => self.model.reduction = num(value)?,
            ("model", "alpha") => self.model.alpha = num(value)?,
            ("model", "lambda") => self.model.lambda = num(value)?,
            ("model", "ablation") => {
                self.model.ablation =
                    Ablation::parse(value).ok_or_else(|| format!("unknown ablation {value:?}"))?
            }
            ("train", "way") => self.train.way = num(value)?,
            ("train", "shot") => self.train.shot = num(value)?,
            ("train", "queries") => self.train.queries = num(value)?,
            ("train", "epochs") => self.train.epochs = num(value)?,
            ("train", "episodes_per_epoch") => self.train.episodes_per_epoch = num(value)?,
            ("train", "batch_episodes") => self.train.batch_episodes = num(value)?,
            ("train", "lr") => self.train.lr = num(value)?,
            ("train", "milestones") => {
                self.train.milestones = value
                    .split(',')
                    .map(|v| num(v.trim()))
                    .collect::<Result<_, _>>()?
            }
            ("train", "decay") => self.train.decay = num(value)?,
            ("train", "momentum") => self.train.momentum = num(value)?,
            ("train", "weight_decay") => self.train.weight_decay = num(value)?,
            ("train", "val_episodes") => self.train.val_episodes = num(value)?,
            ("train", "seed") => self.train.seed = num(value)?,
            ("eval", "way") => self.eval.way = num(value)?,
            ("eval", "shot") => self.eval.shot = num(value)?,
            ("eval", "queries") => self.eval.queries = num(value)?,
            ("eval", "episodes") => self.eval.episodes = num(value)?,
            ("eval", "seed") => self.eval.seed = num(value)?,
            ("transductive", "t0") => self.transductive.t0 = num(value)?,
            ("transductive", "iters") => self.transductive.iters = num(value)?,
            ("transductive", "growth") => self.transductive.growth = num(value)?,
            _ => return Err(format!("unknown key [{section}] {key}")),
        }
        Ok(())
    }
}
