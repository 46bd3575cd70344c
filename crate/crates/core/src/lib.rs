//! Content-aware multi-scale tokenization for ViT-based image quality
//! assessment at native resolution.
//!
//! Images are cut into a grid of coarse cells. A budgeted subset of cells
//! keeps full resolution (split into several patches each) while the rest
//! are downscaled to one patch, so the sequence length stays fixed while
//! the content that matters keeps its detail.

pub mod cost;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod importance;
pub mod tokenizer;
pub mod vit;

pub use cost::{charm_cost_report, suggest_len, vit_macs, CostBreakdown, CostReport};
pub use embeddings::{interpolate_grid, position_for_tokens, scale_embed, EmbeddingTable, PosGrid};
pub use error::{CharmError, Result};
pub use evaluation::{acc, emd_loss, l1_loss, mean_score, plcc, srcc, EvalConfig, MetricReport, ScoreDistribution};
pub use imaging::{load_image, resize_bilinear, seq_len, GridSpec, Image};
pub use importance::{score_cells, select_cells, ImportanceMap, SelectionConfig, Strategy};
pub use tokenizer::{
    coverage_counts, pack_to_length, plan_budget, read_pack, tokenize, write_pack, ScaleMode, TokenPack, TokenSet,
    TokenizerConfig,
};
pub use vit::{load_weights, predict, save_weights, HeadKind, Prediction, ViTConfig, Weights};
