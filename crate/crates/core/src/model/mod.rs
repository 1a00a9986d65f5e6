//! Tiny multi-modal diffusion transformer over pixel patches.
//!
//! Visual tokens are the only query stream by default: prompt tokens enter
//! every layer as keys and values through their own projections. The model
//! is trained on single images; set behaviour comes entirely from the
//! sampler in [`crate::setgen`].

mod checkpoint;
mod dit;
pub mod graph;
mod params;
mod posenc;
mod shapes;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dit::{attention, embed_prompt, forward_velocity, grid_positions, timestep_embedding};
pub use params::ModelParams;
pub use posenc::{GridPos, PosEnc2D, TokenPos};
pub use shapes::{
    patchify, render_shape, shape_corpus, unpatchify, ColorKind, ShapeKind, ShapeSample, NULL_TOKEN,
    VOCAB,
};
pub use train::{
    draw_flow, flow_matching_loss, grad_check, train, train_from, FlowDraw, GradProbe, TrainConfig, TrainExample,
    TrainReport,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: usize, loss: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Pixels per image side.
    pub image_side: usize,
    /// Pixels per patch side; one patch is one visual token.
    pub patch_side: usize,
    pub mlp_ratio: usize,
    pub prompt_vocab_size: usize,
    pub max_prompt_len: usize,
    pub max_global_len: usize,
    pub rope_base: f64,
    /// Let text tokens issue queries too (both streams updated per layer).
    pub joint_text_queries: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            image_side: 16,
            patch_side: 4,
            mlp_ratio: 2,
            prompt_vocab_size: VOCAB.len(),
            max_prompt_len: 8,
            max_global_len: 8,
            rope_base: 100.0,
            joint_text_queries: false,
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Visual tokens per image side.
    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn tokens_per_image(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Width of one visual token (`patch_side² · 3`).
    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * 3
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad("d_model, n_heads and n_layers must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        let dk = self.d_k();
        if dk % 2 != 0 || dk < 6 {
            return bad("d_model / n_heads must be even and at least 6");
        }
        if self.d_model % 2 != 0 {
            return bad("d_model must be even");
        }
        if self.patch_side == 0 || self.image_side == 0 || self.image_side % self.patch_side != 0 {
            return bad("image_side must be a positive multiple of patch_side");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive");
        }
        if self.prompt_vocab_size < VOCAB.len() {
            return bad("prompt_vocab_size must cover the toy vocabulary");
        }
        if self.max_prompt_len == 0 || self.max_global_len == 0 {
            return bad("max_prompt_len and max_global_len must be positive");
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return bad("rope_base must be finite and > 1");
        }
        Ok(())
    }

    pub fn posenc(&self) -> PosEnc2D {
        PosEnc2D::new(self.d_k(), self.rope_base)
    }
}
