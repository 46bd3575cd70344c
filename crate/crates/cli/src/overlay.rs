use std::path::PathBuf;

use anyhow::{bail, Result};
use charm_core::imaging::{self, GridSpec};
use charm_core::importance::{self, Strategy};
use charm_core::tokenizer::{self, ScaleMode, TokenPack};
use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::TokenizerArgs;
use crate::tokenize::image_id;

const FULL: Rgb<u8> = Rgb([255, 0, 0]);
const MID: Rgb<u8> = Rgb([255, 200, 0]);

#[derive(clap::Args, Debug)]
pub struct OverlayArgs {
    pub image: PathBuf,
    /// Output PNG.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Saliency mask for --strategy saliency.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub tok: TokenizerArgs,
}

#[derive(Debug, Serialize)]
pub struct OverlayReport {
    pub image: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub image_seed: u64,
    pub grid: GridSpec,
    /// Cells kept at full resolution (outlined red).
    pub full: Vec<usize>,
    /// Three-scale cells kept at the middle scale (outlined amber).
    pub mid: Vec<usize>,
}

/// Coarse cells represented at `scale` in a multi-scale pack.
fn cells_at_scale(pack: &TokenPack, scale: u8, grid: &GridSpec) -> Vec<usize> {
    let mults = pack.meta.config.multipliers();
    let m = mults[scale as usize] as u32;
    let mut cells: Vec<usize> = (0..pack.len())
        .filter(|&i| pack.valid[i] && pack.scale_ids[i] == scale)
        .map(|i| (pack.coords[i][0] / m) as usize * grid.cols + (pack.coords[i][1] / m) as usize)
        .collect();
    cells.sort_unstable();
    cells.dedup();
    cells
}

fn outline(canvas: &mut RgbImage, grid: &GridSpec, cell: usize, color: Rgb<u8>) {
    let side = grid.cell_px as u32;
    let thick = (side / 16).max(1);
    let (top, left) = ((cell / grid.cols) as u32 * side, (cell % grid.cols) as u32 * side);
    for y in top..top + side {
        for x in left..left + side {
            let edge = y - top < thick || top + side - 1 - y < thick || x - left < thick || left + side - 1 - x < thick;
            if edge {
                canvas.put_pixel(x, y, color);
            }
        }
    }
}

pub fn run(args: &OverlayArgs) -> Result<OverlayReport> {
    let cfg = args.tok.to_config()?;
    let mut img = imaging::load_image(&args.image)?;
    if let Some(edge) = cfg.max_edge {
        img = imaging::max_edge_downscale(&img, edge)?;
    }
    let (crop, grid) = imaging::crop_to_grid(&img, cfg.coarse_px())?;
    let map = match (cfg.selection.strategy, &args.mask) {
        (Strategy::Saliency, Some(path)) => Some(importance::load_saliency_map(path, grid)?),
        (Strategy::Saliency, None) => bail!("--strategy saliency requires --mask <file>"),
        _ => None,
    };
    let image_seed = cfg.selection.seed_for(&image_id(&args.image), args.tok.epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
    // always take the multi-scale path so the selection is visible even
    // when the image would fit the budget at full resolution
    let pack = match cfg.scales {
        ScaleMode::Two { .. } => tokenizer::tokenize_two_scale(&crop, &cfg, map.as_ref(), &mut rng)?,
        ScaleMode::Three { .. } => tokenizer::tokenize_three_scale(&crop, &cfg, map.as_ref(), &mut rng)?,
    };
    let full = cells_at_scale(&pack, 0, &grid);
    let mid = if cfg.num_scales() == 3 {
        cells_at_scale(&pack, 1, &grid)
    } else {
        Vec::new()
    };

    let mut canvas = crop.to_rgb8();
    for &c in &mid {
        outline(&mut canvas, &grid, c, MID);
    }
    for &c in &full {
        outline(&mut canvas, &grid, c, FULL);
    }
    canvas.save_with_format(&args.out, image::ImageFormat::Png)?;
    Ok(OverlayReport {
        image: args.image.clone(),
        out: args.out.clone(),
        seed: cfg.selection.seed,
        image_seed,
        grid,
        full,
        mid,
    })
}
