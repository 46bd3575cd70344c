use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use charm_core::imaging::{self, AugmentConfig, Image};
use charm_core::importance::Strategy;
use charm_core::tokenizer::{self, PackMode, TokenizerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::TokenizerArgs;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(clap::Args, Debug)]
pub struct TokenizeArgs {
    /// Image file or directory of images.
    pub input: PathBuf,
    /// Output directory for packs and the manifest.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Directory of saliency masks named like the images.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Print the manifest to stdout.
    #[arg(long)]
    pub json: bool,
    /// Random flip/rotation before tokenizing (training-style packs).
    #[arg(long)]
    pub augment: bool,
    #[arg(long = "flip-p", default_value_t = 0.5)]
    pub flip_p: f64,
    #[arg(long = "rotate-p", default_value_t = 0.5)]
    pub rotate_p: f64,
    /// Augment before the max-edge limit instead of after it.
    #[arg(long = "augment-before-max-edge")]
    pub augment_before_max_edge: bool,
    #[command(flatten)]
    pub tok: TokenizerArgs,
}

#[derive(Debug, Serialize)]
pub struct ImageRecord {
    pub id: String,
    pub source: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pack: Option<PathBuf>,
    pub image_seed: u64,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub stats: Option<PackStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct PackStats {
    pub mode: PackMode,
    pub original_dims: [usize; 2],
    pub cropped_dims: [usize; 2],
    pub real: usize,
    pub pad: usize,
    pub dropped: usize,
    pub scale_counts: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub seed: u64,
    pub epoch: u64,
    pub config: TokenizerConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentConfig>,
    pub images: Vec<ImageRecord>,
    pub failures: usize,
}

pub fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

/// Image files directly inside `input` (or `input` itself), sorted by path.
pub fn collect_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        bail!("input {} does not exist", input.display());
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(input).with_context(|| format!("reading {}", input.display()))? {
        let path = entry?.path();
        if path.is_file() && has_image_extension(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn image_id(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn find_mask(dir: &Path, image: &Path) -> Result<PathBuf> {
    let stem = image.file_stem().context("image path has no file stem")?;
    for ext in IMAGE_EXTENSIONS {
        let candidate = dir.join(stem).with_extension(ext);
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    bail!("no saliency mask for {} in {}", image.display(), dir.display())
}

impl TokenizeArgs {
    pub fn augment_config(&self) -> Option<AugmentConfig> {
        self.augment.then_some(AugmentConfig {
            flip_probability: self.flip_p,
            rotate_probability: self.rotate_p,
            enabled: true,
            before_max_edge: self.augment_before_max_edge,
        })
    }
}

fn process(path: &Path, cfg: &TokenizerConfig, args: &TokenizeArgs) -> ImageRecord {
    let id = image_id(path);
    let seed = cfg.selection.seed_for(&id, args.tok.epoch);
    let pack_path = args.out.join(format!("{id}.chrm"));
    let run = || -> Result<PackStats> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = imaging::load_image(path)?;
        if let Some(aug) = args.augment_config() {
            // the max-edge limit inside tokenize is then a no-op
            img = imaging::prepare_image(&img, cfg.max_edge, Some(&aug), &mut rng)?;
        }
        let mask: Option<Image> = match &args.masks {
            Some(dir) if cfg.selection.strategy == Strategy::Saliency => {
                Some(imaging::load_luma(find_mask(dir, path)?)?)
            }
            _ => None,
        };
        let mut pack = tokenizer::tokenize(&img, cfg, mask.as_ref(), &mut rng)?;
        pack.meta.source = Some(id.clone());
        pack.meta.image_seed = Some(seed);
        tokenizer::write_pack(&pack, &pack_path)?;
        Ok(PackStats {
            mode: pack.meta.mode,
            original_dims: pack.meta.original_dims,
            cropped_dims: pack.meta.cropped_dims,
            real: pack.valid_count(),
            pad: pack.pad_count(),
            dropped: pack.meta.dropped,
            scale_counts: pack.scale_counts(),
        })
    };
    match run() {
        Ok(stats) => ImageRecord {
            id,
            source: path.to_path_buf(),
            pack: Some(pack_path),
            image_seed: seed,
            stats: Some(stats),
            error: None,
        },
        Err(e) => ImageRecord {
            id,
            source: path.to_path_buf(),
            pack: None,
            image_seed: seed,
            stats: None,
            error: Some(format!("{e:#}")),
        },
    }
}

pub fn run(args: &TokenizeArgs) -> Result<Manifest> {
    let cfg = args.tok.to_config()?;
    if cfg.selection.strategy == Strategy::Saliency && args.masks.is_none() {
        bail!("--strategy saliency requires --masks <dir>");
    }
    if let Some(aug) = args.augment_config() {
        aug.validate()?;
    }
    let inputs = collect_inputs(&args.input)?;
    if inputs.is_empty() {
        bail!("no PNG or JPEG images in {}", args.input.display());
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = args.jobs {
        pool = pool.num_threads(jobs.max(1));
    }
    // par_iter over a sorted Vec collects in input order
    let images: Vec<ImageRecord> = pool
        .build()?
        .install(|| inputs.par_iter().map(|p| process(p, &cfg, args)).collect());
    let failures = images.iter().filter(|r| r.error.is_some()).count();
    let manifest = Manifest {
        seed: cfg.selection.seed,
        epoch: args.tok.epoch,
        config: cfg,
        augment: args.augment_config(),
        images,
        failures,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(args.out.join(MANIFEST_NAME), format!("{json}\n"))?;
    Ok(manifest)
}

pub fn print_summary(manifest: &Manifest) {
    for rec in &manifest.images {
        match (&rec.stats, &rec.error) {
            (Some(s), _) => println!(
                "{}: {:?} {} real, {} pad, {} dropped, per scale {:?} (seed {})",
                rec.id, s.mode, s.real, s.pad, s.dropped, s.scale_counts, rec.image_seed
            ),
            (None, Some(e)) => eprintln!("{}: error: {e}", rec.id),
            (None, None) => {}
        }
    }
    println!(
        "{} image(s), {} failed, seed {}, epoch {}",
        manifest.images.len(),
        manifest.failures,
        manifest.seed,
        manifest.epoch
    );
}
