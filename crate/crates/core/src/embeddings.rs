//! Position and scale embeddings for multi-scale token packs.
//!
//! Every scale in a pack gets its own position grid, bilinearly resized from
//! the one pretrained grid, so tokens at different resolutions share a
//! common spatial frame.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CharmError, Result};
use crate::imaging::bilinear_resample;
use crate::tokenizer::TokenPack;

/// Spatial grid of `rows x cols` position vectors of width `dim`, with the
/// CLS position kept apart.
#[derive(Debug, Clone, PartialEq)]
pub struct PosGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    data: Vec<f32>,
    cls: Vec<f32>,
}

impl PosGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f32>, cls: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(CharmError::Dimension(format!("position grid {rows}x{cols}x{dim}")));
        }
        if data.len() != rows * cols * dim || cls.len() != dim {
            return Err(CharmError::LengthMismatch {
                left: data.len() + cls.len(),
                right: rows * cols * dim + dim,
            });
        }
        if data.iter().chain(&cls).any(|v| !v.is_finite()) {
            return Err(CharmError::NonFinite("position grid".into()));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            data,
            cls,
        })
    }

    /// Deterministic smooth grid for tests and synthetic weights: sinusoids
    /// of the cell coordinates with seeded frequencies and phases.
    pub fn synthetic<R: Rng + ?Sized>(rows: usize, cols: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let params: Vec<(f32, f32, f32)> = (0..dim)
            .map(|_| {
                (
                    rng.random_range(0.1..1.0),
                    rng.random_range(0.1..1.0),
                    rng.random_range(0.0..6.3),
                )
            })
            .collect();
        let mut data = Vec::with_capacity(rows * cols * dim);
        for r in 0..rows {
            for c in 0..cols {
                for &(fy, fx, phase) in &params {
                    data.push(0.02 * (fy * r as f32 + fx * c as f32 + phase).sin());
                }
            }
        }
        let cls = (0..dim).map(|_| rng.random_range(-0.02..0.02)).collect();
        Self::new(rows, cols, dim, data, cls)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cls(&self) -> &[f32] {
        &self.cls
    }

    pub fn vector(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.cols + col) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// Channel-wise bilinear resize of the spatial grid. The CLS vector is
/// passed through untouched.
pub fn interpolate_grid(src: &PosGrid, rows: usize, cols: usize) -> Result<PosGrid> {
    if rows == 0 || cols == 0 {
        return Err(CharmError::Dimension(format!("interpolation target {rows}x{cols}")));
    }
    let data = bilinear_resample(&src.data, src.rows, src.cols, src.dim, rows, cols);
    Ok(PosGrid {
        rows,
        cols,
        dim: src.dim,
        data,
        cls: src.cls.clone(),
    })
}

/// Per-token position vectors (`l x d`). Pads get zeros; they are replaced
/// by the mask token downstream.
pub fn position_for_tokens(pack: &TokenPack, src: &PosGrid) -> Result<Array2<f32>> {
    let mut grids: Vec<Option<PosGrid>> = vec![None; pack.grid_dims.len()];
    let mut out = Array2::zeros((pack.len(), src.dim));
    for i in (0..pack.len()).filter(|&i| pack.valid[i]) {
        let s = pack.scale_ids[i] as usize;
        let dims = *pack
            .grid_dims
            .get(s)
            .ok_or_else(|| CharmError::Format(format!("token {i} has unknown scale {s}")))?;
        if grids[s].is_none() {
            grids[s] = Some(interpolate_grid(src, dims[0] as usize, dims[1] as usize)?);
        }
        let grid = grids[s].as_ref().expect("filled above");
        let [r, c] = pack.coords[i];
        if r >= dims[0] || c >= dims[1] {
            return Err(CharmError::Dimension(format!(
                "token {i} at ({r},{c}) outside grid {}x{}",
                dims[0], dims[1]
            )));
        }
        out.row_mut(i)
            .iter_mut()
            .zip(grid.vector(r as usize, c as usize))
            .for_each(|(o, v)| *o = *v);
    }
    Ok(out)
}

/// Learnable per-scale vectors and the mask vector substituted for padding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    scale_vectors: Vec<f32>,
    mask_vector: Vec<f32>,
}

impl EmbeddingTable {
    /// `scale_vectors` holds `num_scales` rows of width `dim`.
    pub fn new(dim: usize, scale_vectors: Vec<f32>, mask_vector: Vec<f32>) -> Result<Self> {
        if dim == 0 || scale_vectors.is_empty() || !scale_vectors.len().is_multiple_of(dim) || mask_vector.len() != dim
        {
            return Err(CharmError::Dimension(format!(
                "embedding table with dim {dim}, {} scale values, {} mask values",
                scale_vectors.len(),
                mask_vector.len()
            )));
        }
        if scale_vectors.iter().chain(&mask_vector).any(|v| !v.is_finite()) {
            return Err(CharmError::NonFinite("embedding table".into()));
        }
        Ok(Self {
            dim,
            scale_vectors,
            mask_vector,
        })
    }

    /// Gaussian init with standard deviation 0.02.
    pub fn random<R: Rng + ?Sized>(num_scales: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let scales = (0..num_scales * dim).map(|_| normal.sample(rng)).collect();
        let mask = (0..dim).map(|_| normal.sample(rng)).collect();
        Self::new(dim, scales, mask)
    }

    pub fn zeros(num_scales: usize, dim: usize) -> Result<Self> {
        Self::new(dim, vec![0.0; num_scales * dim], vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_scales(&self) -> usize {
        self.scale_vectors.len() / self.dim
    }

    pub fn scale_vector(&self, scale: usize) -> &[f32] {
        &self.scale_vectors[scale * self.dim..(scale + 1) * self.dim]
    }

    pub fn scale_vectors(&self) -> &[f32] {
        &self.scale_vectors
    }

    pub fn mask_vector(&self) -> &[f32] {
        &self.mask_vector
    }
}

pub fn scale_embed(pack: &TokenPack, table: &EmbeddingTable) -> Result<Array2<f32>> {
    let mut out = Array2::zeros((pack.len(), table.dim));
    for i in (0..pack.len()).filter(|&i| pack.valid[i]) {
        let s = pack.scale_ids[i] as usize;
        if s >= table.num_scales() {
            return Err(CharmError::Dimension(format!(
                "token {i} has scale {s} but the table holds {}",
                table.num_scales()
            )));
        }
        out.row_mut(i)
            .iter_mut()
            .zip(table.scale_vector(s))
            .for_each(|(o, v)| *o = *v);
    }
    Ok(out)
}
