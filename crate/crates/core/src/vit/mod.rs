//! A small forward-only ViT encoder that consumes token packs.
//!
//! It exists so that the tokenizer's guarantees (ordering freedom, padding
//! neutrality) can be checked end to end, and so the cost model has a
//! concrete architecture description to count.

mod forward;
mod weights;

pub use forward::{assemble_input, encoder_forward, head, patch_encode, predict, EncoderInput, Prediction};
pub use weights::{load_weights, save_weights, Tensor, TensorStore, Weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{CharmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadKind {
    /// One regression output.
    Score,
    /// Softmax over `bins` score levels.
    Distribution { bins: usize },
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Score => 1,
            HeadKind::Distribution { bins } => bins,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub channels: usize,
    pub head: HeadKind,
    /// Pretrained position grid, `[rows, cols]`.
    pub pos_grid: [usize; 2],
    pub num_scales: usize,
}

impl ViTConfig {
    pub fn vit_small() -> Self {
        Self {
            dim: 384,
            layers: 12,
            heads: 6,
            mlp_ratio: 4,
            patch: 16,
            channels: 3,
            head: HeadKind::Score,
            pos_grid: [14, 14],
            num_scales: 2,
        }
    }

    pub fn dinov2_small() -> Self {
        Self {
            patch: 14,
            pos_grid: [37, 37],
            ..Self::vit_small()
        }
    }

    pub fn dinov2_large() -> Self {
        Self {
            dim: 1024,
            layers: 24,
            heads: 16,
            ..Self::dinov2_small()
        }
    }

    /// Desk-scale encoder used by the invariant checks.
    pub fn toy(patch: usize, channels: usize) -> Self {
        Self {
            dim: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            patch,
            channels,
            head: HeadKind::Distribution { bins: 10 },
            pos_grid: [8, 8],
            num_scales: 3,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vit-small" => Some(Self::vit_small()),
            "dinov2-small" => Some(Self::dinov2_small()),
            "dinov2-large" => Some(Self::dinov2_large()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(CharmError::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 || self.mlp_ratio == 0 || self.num_scales == 0 {
            return Err(CharmError::Config(
                "patch, mlp_ratio and num_scales must be >= 1".into(),
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(CharmError::Channels(self.channels));
        }
        if self.pos_grid[0] == 0 || self.pos_grid[1] == 0 || self.head.outputs() == 0 {
            return Err(CharmError::Config("empty position grid or head".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}
