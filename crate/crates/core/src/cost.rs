//! Analytical multiply-accumulate counts for a ViT forward pass.
//!
//! With `L = tokens + 1` (CLS included) and width `d`, one layer costs
//! `4*L*d^2` for the q/k/v/output projections, `2*L^2*d` for the two
//! attention products and `2*L*d*(ratio*d)` for the MLP. Patch embedding
//! adds `tokens * p^2 * c * d`. Norms, softmax and biases are not counted.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{CharmError, Result};
use crate::imaging::seq_len;
use crate::tokenizer::TokenizerConfig;
use crate::vit::ViTConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub token_count: u64,
    pub patch_embed_macs: u64,
    pub attention_macs: u64,
    pub projection_macs: u64,
    pub mlp_macs: u64,
    pub total_macs: u64,
}

impl CostBreakdown {
    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }
}

pub fn vit_macs(cfg: &ViTConfig, n_tokens: usize) -> CostBreakdown {
    let n = n_tokens as u64;
    let seq = n + 1;
    let d = cfg.dim as u64;
    let layers = cfg.layers as u64;
    let patch_embed = n * (cfg.patch * cfg.patch * cfg.channels) as u64 * d;
    let projection = layers * 4 * seq * d * d;
    let attention = layers * 2 * seq * seq * d;
    let mlp = layers * 2 * seq * d * (cfg.mlp_ratio as u64 * d);
    CostBreakdown {
        token_count: n,
        patch_embed_macs: patch_embed,
        attention_macs: attention,
        projection_macs: projection,
        mlp_macs: mlp,
        total_macs: patch_embed + projection + attention + mlp,
    }
}

/// Fractional reductions `1 - charm / standard` per field (0 when the
/// standard field is 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub tokens: f64,
    pub patch_embed: f64,
    pub attention: f64,
    pub projection: f64,
    pub mlp: f64,
    pub total: f64,
}

pub fn reduction(standard: u64, charm: u64) -> f64 {
    if standard == 0 {
        0.0
    } else {
        1.0 - charm as f64 / standard as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub standard: CostBreakdown,
    pub charm: CostBreakdown,
    pub reduction: Reduction,
}

/// Compares standard tokenization of an `h x w` image against a Charm
/// budget. `standard_tokens` overrides the `floor(h/p)*floor(w/p)` count.
pub fn charm_cost_report(
    cfg: &ViTConfig,
    tok_cfg: &TokenizerConfig,
    h: usize,
    w: usize,
    standard_tokens: Option<usize>,
) -> CostReport {
    let standard_n = standard_tokens.unwrap_or_else(|| seq_len(h, w, cfg.patch));
    let standard = vit_macs(cfg, standard_n);
    let charm = vit_macs(cfg, tok_cfg.target_len);
    CostReport {
        height: h,
        width: w,
        standard,
        charm,
        reduction: Reduction {
            tokens: reduction(standard.token_count, charm.token_count),
            patch_embed: reduction(standard.patch_embed_macs, charm.patch_embed_macs),
            attention: reduction(standard.attention_macs, charm.attention_macs),
            projection: reduction(standard.projection_macs, charm.projection_macs),
            mlp: reduction(standard.mlp_macs, charm.mlp_macs),
            total: reduction(standard.total_macs, charm.total_macs),
        },
    }
}

impl CostReport {
    pub fn to_table(&self) -> String {
        let g = |v: u64| v as f64 / 1e9;
        let pct = |r: f64| format!("{:+.1}%", -100.0 * r);
        let mut out = String::new();
        let _ = writeln!(out, "input {}x{}", self.height, self.width);
        let _ = writeln!(out, "{:<14} {:>12} {:>12} {:>9}", "", "standard", "charm", "change");
        let rows = [
            (
                "tokens",
                self.standard.token_count as f64,
                self.charm.token_count as f64,
                self.reduction.tokens,
                0,
            ),
            (
                "patch GMACs",
                g(self.standard.patch_embed_macs),
                g(self.charm.patch_embed_macs),
                self.reduction.patch_embed,
                3,
            ),
            (
                "attn GMACs",
                g(self.standard.attention_macs),
                g(self.charm.attention_macs),
                self.reduction.attention,
                3,
            ),
            (
                "proj GMACs",
                g(self.standard.projection_macs),
                g(self.charm.projection_macs),
                self.reduction.projection,
                3,
            ),
            (
                "mlp GMACs",
                g(self.standard.mlp_macs),
                g(self.charm.mlp_macs),
                self.reduction.mlp,
                3,
            ),
            (
                "total GMACs",
                g(self.standard.total_macs),
                g(self.charm.total_macs),
                self.reduction.total,
                2,
            ),
        ];
        for (name, s, c, r, prec) in rows {
            let _ = writeln!(out, "{name:<14} {s:>12.prec$} {c:>12.prec$} {:>9}", pct(r));
        }
        out
    }
}

/// Picks the candidate length closest to the average token count (ties go
/// to the smaller candidate).
pub fn suggest_len(avg_tokens: f64, candidates: &[usize]) -> Result<usize> {
    candidates
        .iter()
        .copied()
        .min_by(|&a, &b| {
            let da = (a as f64 - avg_tokens).abs();
            let db = (b as f64 - avg_tokens).abs();
            da.total_cmp(&db).then(a.cmp(&b))
        })
        .ok_or_else(|| CharmError::Config("no candidate lengths".into()))
}
