//! Convolutional embedding: three (3x3 conv -> relu -> 2x2 maxpool) blocks
//! mapping an RGB image to a feature map with an 8x spatial reduction.

use rand_chacha::ChaCha8Rng;

use crate::error::{ProtocolError, TensorError};
use crate::params::{he_uniform, Param};
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingConfig {
    /// Square input edge in pixels; must be divisible by 8.
    pub input_size: usize,
    /// Channel widths of the three conv blocks; the last is the feature depth.
    pub channels: [usize; 3],
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            input_size: 48,
            channels: [32, 64, 64],
        }
    }
}

impl EmbeddingConfig {
    /// Spatial edge of the output feature map.
    pub fn feature_edge(&self) -> usize {
        self.input_size / 8
    }

    /// Number of spatial positions m = h * w.
    pub fn positions(&self) -> usize {
        self.feature_edge() * self.feature_edge()
    }

    pub fn out_channels(&self) -> usize {
        self.channels[2]
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub weight: Param,
    pub bias: Param,
}

/// The embedding network parameters.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    pub config: EmbeddingConfig,
    pub blocks: Vec<ConvBlock>,
}

/// Tape bindings for one forward pass.
pub struct EmbeddingVars {
    ids: Vec<(TensorId, TensorId)>,
}

impl EmbeddingVars {
    /// Bindings from externally registered (weight, bias) pairs, one per
    /// block; lets verification probe arbitrary weight tensors.
    pub fn from_ids(ids: Vec<(TensorId, TensorId)>) -> Self {
        Self { ids }
    }
}

impl EmbeddingNet {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn new(config: EmbeddingConfig, rng: &mut ChaCha8Rng) -> Self {
        assert!(config.input_size % 8 == 0, "input size must be divisible by 8");
        let mut blocks = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in config.channels.iter().enumerate() {
            let fan_in = c_in * 9;
            let weight = Param::new(
                format!("embed.conv{}.weight", i + 1),
                he_uniform(rng, &[c_out, c_in, 3, 3], fan_in),
            );
            let bias = Param::new(format!("embed.conv{}.bias", i + 1), Tensor::zeros(&[c_out]));
            blocks.push(ConvBlock { weight, bias });
            c_in = c_out;
        }
        Self { config, blocks }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.weight, &b.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.weight, &mut b.bias])
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EmbeddingVars {
        let ids = self
            .blocks
            .iter()
            .map(|b| (b.weight.bind(tape, trainable), b.bias.bind(tape, trainable)))
            .collect();
        EmbeddingVars { ids }
    }

    /// Pulls conv gradients off a finished tape into the accumulators.
    pub fn accumulate(&mut self, tape: &Tape, vars: &EmbeddingVars, scale: f32) {
        for (block, &(w, b)) in self.blocks.iter_mut().zip(&vars.ids) {
            block.weight.accumulate(tape, w, scale);
            block.bias.accumulate(tape, b, scale);
        }
    }

    /// Embeds an H x W x 3 image in [0,1] into a (c_out, h, w) feature map.
    /// All outputs are nonnegative (the last block ends in relu -> pool).
    pub fn embed(
        &self,
        tape: &mut Tape,
        vars: &EmbeddingVars,
        image: &Tensor,
    ) -> Result<TensorId, TensorError> {
        let s = self.config.input_size;
        if image.shape() != [s, s, 3] {
            return Err(TensorError::Dimension {
                op: "embed",
                expected: format!("image of shape [{s}, {s}, 3]"),
                got: image.shape().to_vec(),
            });
        }
        let chw = tape.constant(hwc_to_chw(image));
        self.embed_chw(tape, vars, chw)
    }

    /// Same forward pass with the image already on the tape as (3, s, s);
    /// lets tests differentiate through the input.
    pub fn embed_chw(
        &self,
        tape: &mut Tape,
        vars: &EmbeddingVars,
        mut x: TensorId,
    ) -> Result<TensorId, TensorError> {
        for &(w, b) in &vars.ids {
            let conv = tape.conv2d(x, w, b, 1)?;
            let act = tape.relu(conv);
            x = tape.maxpool2d(act)?;
        }
        Ok(x)
    }
}

/// Elementwise arithmetic mean of a class's support feature maps.
pub fn class_prototype(tape: &mut Tape, support: &[TensorId]) -> Result<TensorId, ProtocolError> {
    if support.is_empty() {
        return Err(ProtocolError::EmptySupport { class: 0 });
    }
    tape.mean_of(support)
        .map_err(|_| ProtocolError::BadSupportPartition { way: 0, shot: 0 })
}

/// (H, W, 3) -> (3, H, W) layout change for convolution.
pub fn hwc_to_chw(image: &Tensor) -> Tensor {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = image.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        let rest = i % (h * w);
        let (y, x) = (rest / w, rest % w);
        src[(y * w + x) * c + ch]
    })
}
