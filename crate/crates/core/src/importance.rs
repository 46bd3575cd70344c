//! Patch importance: per-cell scores and threshold-controlled selection of
//! the cells that stay at full resolution.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CharmError, Result};
use crate::imaging::{self, GridSpec, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Frequency,
    Gradient,
    Entropy,
    Saliency,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Random,
        Strategy::Frequency,
        Strategy::Gradient,
        Strategy::Entropy,
        Strategy::Saliency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Frequency => "frequency",
            Strategy::Gradient => "gradient",
            Strategy::Entropy => "entropy",
            Strategy::Saliency => "saliency",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = CharmError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CharmError::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    /// Candidate pool multiplier: the pool is the top `ceil(t * K)` cells.
    pub threshold_t: f64,
    pub seed: u64,
    pub per_epoch_resample: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Frequency,
            threshold_t: 2.0,
            seed: 0,
            per_epoch_resample: true,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_t >= 1.0 && self.threshold_t.is_finite()) {
            return Err(CharmError::Config(format!(
                "threshold_t = {} must be a finite value >= 1",
                self.threshold_t
            )));
        }
        Ok(())
    }

    /// Seed for one image's selection. Keyed on the image id and, when
    /// resampling per epoch, the epoch; loader order never enters.
    pub fn seed_for(&self, image_id: &str, epoch: u64) -> u64 {
        let epoch = if self.per_epoch_resample { epoch } else { 0 };
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(epoch.to_le_bytes());
        h.update(image_id.as_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    grid: GridSpec,
    scores: Vec<f64>,
}

impl ImportanceMap {
    pub fn new(grid: GridSpec, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != grid.cells() {
            return Err(CharmError::LengthMismatch {
                left: scores.len(),
                right: grid.cells(),
            });
        }
        if let Some(s) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(CharmError::Data(format!("importance score {s} is not finite and >= 0")));
        }
        Ok(Self { grid, scores })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// Frequency scorer with a cached FFT plan for one cell size.
pub struct FrequencyScorer {
    side: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl FrequencyScorer {
    pub fn new(side: usize) -> Result<Self> {
        if side < 2 {
            return Err(CharmError::Dimension(format!(
                "frequency score needs a cell side >= 2, got {side}"
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(side);
        Ok(Self { side, fft })
    }

    /// Mean magnitude of the orthonormal 2-D DFT with the DC term zeroed,
    /// averaged over all `side^2` coefficients.
    pub fn score(&self, cell: &[f32]) -> Result<f64> {
        let n = self.side;
        check_square(cell, n)?;
        if is_constant(cell) {
            return Ok(0.0);
        }
        let mut buf: Vec<Complex<f64>> = cell.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        for row in buf.chunks_exact_mut(n) {
            self.fft.process(row);
        }
        let mut column = vec![Complex::new(0.0, 0.0); n];
        for c in 0..n {
            for r in 0..n {
                column[r] = buf[r * n + c];
            }
            self.fft.process(&mut column);
            for r in 0..n {
                buf[r * n + c] = column[r];
            }
        }
        let pixels = (n * n) as f64;
        let total: f64 = buf.iter().skip(1).map(|z| z.norm()).sum();
        Ok(total / pixels.sqrt() / pixels)
    }
}

fn check_square(cell: &[f32], side: usize) -> Result<()> {
    if cell.len() != side * side {
        return Err(CharmError::LengthMismatch {
            left: cell.len(),
            right: side * side,
        });
    }
    Ok(())
}

fn is_constant(cell: &[f32]) -> bool {
    cell.iter().all(|&v| v == cell[0])
}

pub fn frequency_score(cell: &[f32], side: usize) -> Result<f64> {
    FrequencyScorer::new(side)?.score(cell)
}

/// Mean Sobel gradient magnitude over the interior pixels of a square cell.
pub fn gradient_score(cell: &[f32], side: usize) -> Result<f64> {
    if side < 3 {
        return Err(CharmError::Dimension(format!(
            "gradient score needs a cell side >= 3, got {side}"
        )));
    }
    check_square(cell, side)?;
    let at = |r: usize, c: usize| cell[r * side + c] as f64;
    let mut total = 0.0;
    for r in 1..side - 1 {
        for c in 1..side - 1 {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            total += gx.hypot(gy);
        }
    }
    Ok(total / ((side - 2) * (side - 2)) as f64)
}

/// Shannon entropy (bits) of the 256-bin histogram of 8-bit quantized values.
pub fn entropy_score(cell: &[f32]) -> Result<f64> {
    if cell.is_empty() {
        return Err(CharmError::Dimension("entropy of an empty cell".into()));
    }
    let mut hist = [0usize; 256];
    for &v in cell {
        hist[quantize(v)] += 1;
    }
    let n = cell.len() as f64;
    let sum: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum();
    Ok(0.0 - sum)
}

fn quantize(v: f32) -> usize {
    (v * 255.0).round().clamp(0.0, 255.0) as usize
}

/// Per-cell fraction of salient pixels (> 0.5) after a nearest-neighbor
/// resize of `mask` to the grid's pixel dimensions. A mask with no salient
/// pixel anywhere marks every cell fully salient.
pub fn saliency_from_mask(mask: &Image, grid: GridSpec) -> Result<ImportanceMap> {
    let mask = imaging::to_grayscale(mask)?;
    let mask = if mask.height() == grid.height_px() && mask.width() == grid.width_px() {
        mask
    } else {
        imaging::resize_nearest(&mask, grid.height_px(), grid.width_px())?
    };
    let side = grid.cell_px;
    let mut scores = Vec::with_capacity(grid.cells());
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let mut hits = 0usize;
            for r in gr * side..(gr + 1) * side {
                for c in gc * side..(gc + 1) * side {
                    if mask.get(r, c, 0) > 0.5 {
                        hits += 1;
                    }
                }
            }
            scores.push(hits as f64 / (side * side) as f64);
        }
    }
    if scores.iter().all(|&s| s == 0.0) {
        scores.fill(1.0);
    }
    ImportanceMap::new(grid, scores)
}

pub fn load_saliency_map(path: impl AsRef<Path>, grid: GridSpec) -> Result<ImportanceMap> {
    saliency_from_mask(&imaging::load_luma(path)?, grid)
}

/// Scores every cell of `grid` over the grayscale version of `img`.
pub fn score_cells(img: &Image, grid: GridSpec, strategy: Strategy) -> Result<ImportanceMap> {
    if img.height() != grid.height_px() || img.width() != grid.width_px() {
        return Err(CharmError::Dimension(format!(
            "grid {}x{} of {}px does not match image {}x{}",
            grid.rows,
            grid.cols,
            grid.cell_px,
            img.height(),
            img.width()
        )));
    }
    let gray = imaging::to_grayscale(img)?;
    let side = grid.cell_px;
    let freq = match strategy {
        Strategy::Frequency => Some(FrequencyScorer::new(side)?),
        Strategy::Random | Strategy::Saliency => {
            return Err(CharmError::Config(format!("strategy `{strategy}` has no pixel scorer")))
        }
        _ => None,
    };
    let mut cell = vec![0f32; side * side];
    let mut scores = Vec::with_capacity(grid.cells());
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            for (i, dst) in cell.chunks_exact_mut(side).enumerate() {
                let start = (gr * side + i) * gray.width() + gc * side;
                dst.copy_from_slice(&gray.data()[start..start + side]);
            }
            let s = match strategy {
                Strategy::Frequency => freq.as_ref().expect("planned above").score(&cell)?,
                Strategy::Gradient => gradient_score(&cell, side)?,
                Strategy::Entropy => entropy_score(&cell)?,
                Strategy::Random | Strategy::Saliency => unreachable!(),
            };
            scores.push(s);
        }
    }
    ImportanceMap::new(grid, scores)
}

/// Cell indices sorted by descending score, ties by ascending index.
pub fn rank_cells(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Size of the candidate pool for `k` picks under threshold `t`.
pub fn pool_size(k: usize, t: f64, available: usize) -> usize {
    ((t * k as f64).ceil() as usize).min(available)
}

/// Picks `k` of the `candidates`. Without scores the pick is uniform;
/// with scores it is uniform over the `ceil(t * k)` best candidates.
/// Returned indices are a subset of `candidates`, sorted ascending.
pub(crate) fn select_among<R: Rng + ?Sized>(
    candidates: &[usize],
    scores: Option<&[f64]>,
    k: usize,
    threshold_t: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if k > candidates.len() {
        return Err(CharmError::SelectionSize {
            k,
            available: candidates.len(),
        });
    }
    let pool: Vec<usize> = match scores {
        None => candidates.to_vec(),
        Some(all) => {
            let local: Vec<f64> = candidates.iter().map(|&i| all[i]).collect();
            let ranked = rank_cells(&local);
            let size = pool_size(k, threshold_t, candidates.len());
            ranked[..size].iter().map(|&j| candidates[j]).collect()
        }
    };
    let mut picked: Vec<usize> = if k == pool.len() {
        pool
    } else {
        rand::seq::index::sample(rng, pool.len(), k)
            .into_iter()
            .map(|j| pool[j])
            .collect()
    };
    picked.sort_unstable();
    Ok(picked)
}

/// Selects `k` of `cells` coarse cells for full-resolution tokenization.
pub fn select_cells<R: Rng + ?Sized>(
    cells: usize,
    map: Option<&ImportanceMap>,
    k: usize,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let scores = match (cfg.strategy, map) {
        (Strategy::Random, _) => None,
        (_, Some(m)) => {
            if m.scores.len() != cells {
                return Err(CharmError::LengthMismatch {
                    left: m.scores.len(),
                    right: cells,
                });
            }
            Some(m.scores())
        }
        (s, None) => return Err(CharmError::MissingMap(s.to_string())),
    };
    let all: Vec<usize> = (0..cells).collect();
    select_among(&all, scores, k, cfg.threshold_t, rng)
}
