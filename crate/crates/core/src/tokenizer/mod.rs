//! Budget-constrained multi-scale tokenization.
//!
//! A high-resolution image is cut into coarse cells. A budgeted number of
//! cells keep full resolution and split into several `p x p` tokens; the
//! rest are bilinearly downscaled to fewer tokens. Full-resolution tokens
//! come first, then progressively coarser ones, then padding.

mod pack;

pub use pack::{
    coverage_counts, pack_to_length, read_pack, write_pack, PackMeta, PackMode, Token, TokenPack, TokenSet, PACK_MAGIC,
    PACK_VERSION, PAD_SCALE,
};
pub(crate) use pack::{write_atomic, ByteReader};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CharmError, Result};
use crate::imaging::{self, GridSpec, Image};
use crate::importance::{self, ImportanceMap, SelectionConfig, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScaleMode {
    /// Coarse cells of `n * p` pixels; unselected cells shrink by `1/n`.
    Two { n: usize },
    /// Coarse cells of `gamma * p` pixels, resized to `beta * p` or
    /// `alpha * p` when not kept at full resolution.
    Three { alpha: usize, beta: usize, gamma: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub patch: usize,
    pub scales: ScaleMode,
    pub target_len: usize,
    pub selection: SelectionConfig,
    pub max_edge: Option<usize>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            scales: ScaleMode::Two { n: 2 },
            target_len: 1024,
            selection: SelectionConfig::default(),
            max_edge: None,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(CharmError::Config("patch size must be at least 1".into()));
        }
        if self.target_len == 0 {
            return Err(CharmError::Config("target length must be at least 1".into()));
        }
        if self.max_edge == Some(0) {
            return Err(CharmError::Config("max_edge must be at least 1".into()));
        }
        match self.scales {
            ScaleMode::Two { n } if n < 2 => {
                return Err(CharmError::Config(format!("coarse multiplier n = {n} must be >= 2")))
            }
            ScaleMode::Three { alpha, beta, gamma } if !(gamma > beta && beta > alpha && alpha >= 1) => {
                return Err(CharmError::Config(format!(
                    "three-scale multipliers must satisfy gamma > beta > alpha >= 1, got {alpha}, {beta}, {gamma}"
                )))
            }
            _ => {}
        }
        self.selection.validate()
    }

    pub fn num_scales(&self) -> usize {
        match self.scales {
            ScaleMode::Two { .. } => 2,
            ScaleMode::Three { .. } => 3,
        }
    }

    /// Tokens per coarse-cell side at each scale id, finest first.
    pub fn multipliers(&self) -> Vec<usize> {
        match self.scales {
            ScaleMode::Two { n } => vec![n, 1],
            ScaleMode::Three { alpha, beta, gamma } => vec![gamma, beta, alpha],
        }
    }

    /// Side of a coarse cell in pixels (`p'`, or `gamma * p`).
    pub fn coarse_px(&self) -> usize {
        self.multipliers()[0] * self.patch
    }

    /// Linear resize ratio applied to unselected cells.
    pub fn downscale_ratio(&self) -> f64 {
        let m = self.multipliers();
        m[m.len() - 1] as f64 / m[0] as f64
    }

    /// Resolution reduction of unselected cells, `1 - ratio` (0.5 for n = 2).
    pub fn downscale_fraction(&self) -> f64 {
        1.0 - self.downscale_ratio()
    }
}

/// How many coarse cells go to each upgraded scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPlan {
    /// Cells kept at full resolution (K, or K1 for three scales).
    pub full: usize,
    /// Cells at the intermediate scale (K2); zero for two scales.
    pub mid: usize,
    pub expected_tokens: usize,
}

pub fn plan_budget(cells: usize, cfg: &TokenizerConfig) -> SelectionPlan {
    let s = cells as i64;
    let l = cfg.target_len as i64;
    let clamp = |v: i64, hi: i64| v.clamp(0, hi.max(0)) as usize;
    match cfg.scales {
        ScaleMode::Two { n } => {
            let up = (n * n) as i64 - 1;
            let full = clamp((l - s).div_euclid(up), s);
            SelectionPlan {
                full,
                mid: 0,
                expected_tokens: cells + full * up as usize,
            }
        }
        ScaleMode::Three { alpha, beta, gamma } => {
            let (a2, b2, g2) = ((alpha * alpha) as i64, (beta * beta) as i64, (gamma * gamma) as i64);
            let surplus = l - a2 * s;
            let full = clamp(surplus.div_euclid(2 * (g2 - a2)), s);
            let mid = clamp(surplus.div_euclid(2 * (b2 - a2)), s - full as i64);
            let low = cells - full - mid;
            SelectionPlan {
                full,
                mid,
                expected_tokens: (a2 as usize) * low + (g2 as usize) * full + (b2 as usize) * mid,
            }
        }
    }
}

fn meta_for(img: &Image, cropped: &Image, mode: PackMode, cfg: &TokenizerConfig) -> PackMeta {
    PackMeta {
        source: None,
        original_dims: [img.height(), img.width()],
        cropped_dims: [cropped.height(), cropped.width()],
        mode,
        config: *cfg,
        image_seed: None,
        dropped: 0,
    }
}

/// Standard ViT tokenization: every `p x p` cell becomes one scale-0 token.
pub fn tokenize_single_scale<R: Rng + ?Sized>(img: &Image, cfg: &TokenizerConfig, rng: &mut R) -> Result<TokenPack> {
    cfg.validate()?;
    let p = cfg.patch;
    let (crop, grid) = imaging::crop_to_grid(img, p)?;
    if grid.cells() > cfg.target_len {
        return Err(CharmError::Config(format!(
            "{} patches exceed the budget of {}; use multi-scale tokenization",
            grid.cells(),
            cfg.target_len
        )));
    }
    let tokens = split_cells(&crop, &grid, p, &vec![0; grid.cells()], &[1])?;
    let set = TokenSet {
        patch: p,
        channels: img.channels(),
        grid_dims: vec![[grid.rows as u32, grid.cols as u32]],
        tokens,
        meta: meta_for(img, &crop, PackMode::Single, cfg),
    };
    pack_to_length(set, cfg.target_len, rng)
}

/// Turns each coarse cell into `m^2` tokens where `m = multipliers[scale]`.
/// Output is ordered by scale, then by cell index, then raster order inside
/// the cell.
fn split_cells(
    crop: &Image,
    grid: &GridSpec,
    p: usize,
    assignment: &[u8],
    multipliers: &[usize],
) -> Result<Vec<Token>> {
    let side = grid.cell_px;
    let mut tokens = Vec::new();
    for (scale, &m) in multipliers.iter().enumerate() {
        for (idx, _) in assignment.iter().enumerate().filter(|(_, s)| **s as usize == scale) {
            let (gr, gc) = (idx / grid.cols, idx % grid.cols);
            let cell = crop.crop(gr * side, gc * side, side, side)?;
            let cell = if m * p == side {
                cell
            } else {
                imaging::resize_bilinear(&cell, m * p, m * p)?
            };
            for i in 0..m {
                for j in 0..m {
                    tokens.push(Token {
                        pixels: cell.crop(i * p, j * p, p, p)?.into_data(),
                        scale: scale as u8,
                        row: (gr * m + i) as u32,
                        col: (gc * m + j) as u32,
                    });
                }
            }
        }
    }
    Ok(tokens)
}

fn resolve_map<'a>(
    crop: &Image,
    grid: GridSpec,
    selection: &SelectionConfig,
    map: Option<&'a ImportanceMap>,
    owned: &'a mut Option<ImportanceMap>,
) -> Result<Option<&'a ImportanceMap>> {
    match (selection.strategy, map) {
        (Strategy::Random, _) => Ok(None),
        (_, Some(m)) => {
            if m.grid() != grid {
                return Err(CharmError::Dimension(format!(
                    "importance map grid {:?} does not match coarse grid {:?}",
                    m.grid(),
                    grid
                )));
            }
            Ok(Some(m))
        }
        (Strategy::Saliency, None) => Err(CharmError::MissingMap("saliency".into())),
        (s, None) => {
            *owned = Some(importance::score_cells(crop, grid, s)?);
            Ok(owned.as_ref())
        }
    }
}

fn multi_scale<R: Rng + ?Sized>(
    img: &Image,
    cfg: &TokenizerConfig,
    map: Option<&ImportanceMap>,
    rng: &mut R,
) -> Result<TokenPack> {
    cfg.validate()?;
    let p = cfg.patch;
    let (crop, grid) = imaging::crop_to_grid(img, cfg.coarse_px())?;
    let mut owned = None;
    let map = resolve_map(&crop, grid, &cfg.selection, map, &mut owned)?;
    let plan = plan_budget(grid.cells(), cfg);
    let scores = map.map(|m| m.scores());

    let mults = cfg.multipliers();
    let coarsest = (mults.len() - 1) as u8;
    let mut assignment = vec![coarsest; grid.cells()];
    let all: Vec<usize> = (0..grid.cells()).collect();
    let t = cfg.selection.threshold_t;
    for idx in importance::select_among(&all, scores, plan.full, t, rng)? {
        assignment[idx] = 0;
    }
    if mults.len() == 3 {
        // second stage draws from what the first stage left, reusing its scores
        let rest: Vec<usize> = all.iter().copied().filter(|&i| assignment[i] != 0).collect();
        for idx in importance::select_among(&rest, scores, plan.mid, t, rng)? {
            assignment[idx] = 1;
        }
    }

    let tokens = split_cells(&crop, &grid, p, &assignment, &mults)?;
    let grid_dims = mults
        .iter()
        .map(|&m| [(grid.rows * m) as u32, (grid.cols * m) as u32])
        .collect();
    let mode = if mults.len() == 3 {
        PackMode::Three
    } else {
        PackMode::Two
    };
    let set = TokenSet {
        patch: p,
        channels: img.channels(),
        grid_dims,
        tokens,
        meta: meta_for(img, &crop, mode, cfg),
    };
    pack_to_length(set, cfg.target_len, rng)
}

/// Two-scale tokenization. `map` must score the `n*p` grid of the cropped
/// image; it is computed on the fly for pixel-based strategies when absent.
pub fn tokenize_two_scale<R: Rng + ?Sized>(
    img: &Image,
    cfg: &TokenizerConfig,
    map: Option<&ImportanceMap>,
    rng: &mut R,
) -> Result<TokenPack> {
    if !matches!(cfg.scales, ScaleMode::Two { .. }) {
        return Err(CharmError::Config("tokenize_two_scale needs a two-scale config".into()));
    }
    multi_scale(img, cfg, map, rng)
}

/// Three-scale tokenization over the `gamma*p` grid.
pub fn tokenize_three_scale<R: Rng + ?Sized>(
    img: &Image,
    cfg: &TokenizerConfig,
    map: Option<&ImportanceMap>,
    rng: &mut R,
) -> Result<TokenPack> {
    if !matches!(cfg.scales, ScaleMode::Three { .. }) {
        return Err(CharmError::Config(
            "tokenize_three_scale needs a three-scale config".into(),
        ));
    }
    multi_scale(img, cfg, map, rng)
}

/// Full pipeline for one image: optional max-edge downscale, then standard
/// tokenization when the patch count fits the budget, multi-scale otherwise.
///
/// `saliency_mask` is required for the saliency strategy and ignored by the
/// others. It may have any resolution.
pub fn tokenize<R: Rng + ?Sized>(
    img: &Image,
    cfg: &TokenizerConfig,
    saliency_mask: Option<&Image>,
    rng: &mut R,
) -> Result<TokenPack> {
    cfg.validate()?;
    let scaled;
    let img = match cfg.max_edge {
        Some(edge) => {
            scaled = imaging::max_edge_downscale(img, edge)?;
            &scaled
        }
        None => img,
    };
    if imaging::seq_len(img.height(), img.width(), cfg.patch) <= cfg.target_len {
        return tokenize_single_scale(img, cfg, rng);
    }
    let map = match (cfg.selection.strategy, saliency_mask) {
        (Strategy::Saliency, Some(mask)) => {
            let grid = GridSpec::for_dims(img.height(), img.width(), cfg.coarse_px())?;
            Some(importance::saliency_from_mask(mask, grid)?)
        }
        _ => None,
    };
    multi_scale(img, cfg, map.as_ref(), rng)
}

/// The coarse cells a multi-scale pack kept at full resolution, derived from
/// its scale-0 tokens.
pub fn full_resolution_cells(pack: &TokenPack) -> Vec<usize> {
    if pack.meta.mode == PackMode::Single || pack.grid_dims.is_empty() {
        return Vec::new();
    }
    let m = pack.meta.config.multipliers()[0] as u32;
    let cols = pack.grid_dims[0][1] / m;
    let mut cells: Vec<usize> = (0..pack.len())
        .filter(|&i| pack.valid[i] && pack.scale_ids[i] == 0)
        .map(|i| ((pack.coords[i][0] / m) * cols + pack.coords[i][1] / m) as usize)
        .collect();
    cells.sort_unstable();
    cells.dedup();
    cells
}
