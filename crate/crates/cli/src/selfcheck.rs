//! Built-in invariant suites, runnable from the command line.

use anyhow::{bail, Result};
use charm_core::embeddings::{self, interpolate_grid, PosGrid};
use charm_core::evaluation::{acc, emd_loss, plcc, srcc, ScoreDistribution};
use charm_core::imaging::{GridSpec, Image};
use charm_core::importance::{rank_cells, select_cells, ImportanceMap, SelectionConfig, Strategy};
use charm_core::tokenizer::{self, coverage_counts, ScaleMode, TokenPack, TokenizerConfig, PAD_SCALE};
use charm_core::vit::{self, ViTConfig, Weights};
use charm_core::{cost, CharmError};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

type Check = fn(bool) -> Result<String>;

pub const SUITES: [(&str, Check); 8] = [
    ("gmac-table", gmac_table),
    ("tiling", tiling),
    ("permutation", permutation),
    ("pad-neutrality", pad_neutrality),
    ("metric-identities", metric_identities),
    ("interpolation", interpolation),
    ("selection", selection),
    ("serialization", serialization),
];

#[derive(clap::Args, Debug)]
pub struct SelfcheckArgs {
    /// Run only these suites (repeatable).
    #[arg(long = "suite", value_parser = clap::builder::PossibleValuesParser::new(SUITES.map(|s| s.0)))]
    pub suites: Vec<String>,
    #[arg(long)]
    pub json: bool,
    /// Corrupt the named suite's inputs so it must fail.
    #[arg(long = "inject-fault", hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: f64,
}

pub fn run(args: &SelfcheckArgs) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .filter(|(name, _)| args.suites.is_empty() || args.suites.iter().any(|s| s == name))
        .map(|&(name, check)| {
            let fault = args.inject_fault.as_deref() == Some(name);
            let start = std::time::Instant::now();
            let outcome = check(fault);
            let millis = start.elapsed().as_secs_f64() * 1e3;
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(e) => (false, format!("{e:#}")),
            };
            SuiteResult {
                suite: name,
                passed,
                detail,
                millis,
            }
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn noisy_image(h: usize, w: usize, r: &mut ChaCha8Rng) -> Image {
    let noise: Vec<f32> = (0..h * w * 3).map(|_| r.random()).collect();
    Image::from_fn(h, w, 3, |y, x, c| {
        0.5 * noise[(y * w + x) * 3 + c] + 0.25 * (1.0 + (y as f32 * 0.1).sin() * (x as f32 * 0.07).cos())
    })
    .expect("in-range pixels")
}

fn gmac_table(fault: bool) -> Result<String> {
    let bump = if fault { 1.1 } else { 1.0 };
    let dino = ViTConfig::dinov2_small();
    let vit_s = ViTConfig::vit_small();
    let rows = [
        (dino, 256, 6.11),
        (dino, 512, 13.46),
        (dino, 700, 19.60),
        (vit_s, 196, 4.58),
        (vit_s, 1600, 58.11),
    ];
    let mut worst = 0.0f64;
    for (cfg, n, table) in rows {
        let got = cost::vit_macs(&cfg, n).gmacs() * bump;
        let rel = (got - table).abs() / table;
        worst = worst.max(rel);
        if rel > 0.02 {
            bail!("{n} tokens (patch {}): {got:.3} G vs {table} G", cfg.patch);
        }
    }
    Ok(format!("5 entries within {:.2}%", worst * 100.0))
}

fn tiling(fault: bool) -> Result<String> {
    let mut r = rng(1);
    for i in 0..40 {
        let (h, w) = (r.random_range(64..400), r.random_range(64..400));
        let scales = if i % 2 == 0 {
            ScaleMode::Two { n: 2 }
        } else {
            ScaleMode::Three {
                alpha: 1,
                beta: 2,
                gamma: 3,
            }
        };
        let patch = [8, 14, 16][i % 3];
        let cfg = TokenizerConfig {
            patch,
            scales,
            // generous enough that nothing is dropped
            target_len: 4 * (h / patch + 1) * (w / patch + 1),
            selection: SelectionConfig {
                strategy: Strategy::ALL[i % 4],
                ..Default::default()
            },
            max_edge: None,
        };
        let img = noisy_image(h, w, &mut r);
        let mut pack = match tokenizer::tokenize(&img, &cfg, None, &mut r) {
            Err(CharmError::TooSmall { .. }) => continue,
            other => other?,
        };
        if fault {
            pack.valid[0] = false;
        }
        if let Some(p) = coverage_counts(&pack).iter().position(|&c| c != 1) {
            bail!(
                "image {i} ({h}x{w}): pixel {p} covered {} times",
                coverage_counts(&pack)[p]
            );
        }
    }
    Ok("40 packs cover their images exactly once".into())
}

fn toy_pack(seed: u64) -> Result<(TokenPack, Weights)> {
    let mut r = rng(seed);
    let cfg = TokenizerConfig {
        patch: 4,
        scales: ScaleMode::Three {
            alpha: 1,
            beta: 2,
            gamma: 3,
        },
        target_len: r.random_range(40..80),
        ..Default::default()
    };
    let img = noisy_image(r.random_range(36..72), r.random_range(36..72), &mut r);
    let pack = tokenizer::tokenize(&img, &cfg, None, &mut r)?;
    let weights = Weights::random(&ViTConfig::toy(4, 3), &mut r)?;
    Ok((pack, weights))
}

fn cls_state(pack: &TokenPack, w: &Weights) -> Result<Array1<f64>> {
    let enc = vit::patch_encode(pack, w)?;
    let pos = embeddings::position_for_tokens(pack, w.pos_grid())?;
    let sc = embeddings::scale_embed(pack, w.table())?;
    let input = vit::assemble_input(&enc, &pos, &sc, w, &pack.valid)?;
    Ok(vit::encoder_forward(&input, w, w.config())?.row(0).to_owned())
}

fn rel_dev(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    (a - b).mapv(|v| v * v).sum().sqrt() / a.mapv(|v| v * v).sum().sqrt().max(f64::MIN_POSITIVE)
}

fn permutation(fault: bool) -> Result<String> {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for round in 0..5 {
        let (pack, w) = toy_pack(20 + round)?;
        let base = cls_state(&pack, &w)?;
        for _ in 0..10 {
            let mut order: Vec<usize> = (0..pack.len()).collect();
            order.shuffle(&mut r);
            let mut moved = pack.clone();
            moved.pixels = order.iter().flat_map(|&i| pack.token_pixels(i).to_vec()).collect();
            moved.scale_ids = order.iter().map(|&i| pack.scale_ids[i]).collect();
            moved.coords = order.iter().map(|&i| pack.coords[i]).collect();
            moved.valid = order.iter().map(|&i| pack.valid[i]).collect();
            if fault {
                moved.pixels[0] += 0.5;
                moved.valid[0] = true;
            }
            worst = worst.max(rel_dev(&base, &cls_state(&moved, &w)?));
        }
    }
    if worst > 1e-5 {
        bail!("CLS moved by {worst:.2e} under reordering");
    }
    Ok(format!("50 permutations, worst deviation {worst:.1e}"))
}

fn pad_neutrality(fault: bool) -> Result<String> {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let (pack, w) = toy_pack(40 + i)?;
        let base = cls_state(&pack, &w)?;
        let mut padded = pack.clone();
        for _ in 0..r.random_range(1..=64) {
            padded.pixels.extend(std::iter::repeat_n(0.0, pack.token_size()));
            padded.scale_ids.push(PAD_SCALE);
            padded.coords.push([0, 0]);
            padded.valid.push(fault);
        }
        if fault {
            // an unmasked pad needs a real scale id to be embedded
            let n = padded.scale_ids.len();
            padded.scale_ids[n - 1] = 0;
        }
        worst = worst.max(rel_dev(&base, &cls_state(&padded, &w)?));
    }
    if worst > 1e-6 {
        bail!("padding moved CLS by {worst:.2e}");
    }
    Ok(format!("20 packs, worst deviation {worst:.1e}"))
}

fn metric_identities(fault: bool) -> Result<String> {
    let mut r = rng(4);
    for _ in 0..50 {
        let gt: Vec<f64> = (0..20).map(|_| r.random_range(1.0..10.0)).collect();
        let sign = if fault { -1.0 } else { 1.0 };
        let affine: Vec<f64> = gt.iter().map(|g| sign * 3.0 * g + 1.0).collect();
        let rev: Vec<f64> = gt.iter().map(|g| -g.powi(3)).collect();
        if (plcc(&affine, &gt)? - 1.0).abs() > 1e-9 {
            bail!("PLCC under a positive affine map is not 1");
        }
        if (srcc(&rev, &gt)? + 1.0).abs() > 1e-9 {
            bail!("SRCC under reversal is not -1");
        }
        if acc(&gt, &gt, 5.0)? != 1.0 {
            bail!("ACC of identical lists is not 1");
        }
    }
    let a = ScoreDistribution::over_levels(vec![1.0, 0.0])?;
    let b = ScoreDistribution::over_levels(vec![0.0, 1.0])?;
    let v = emd_loss(&a, &b, 2.0)?;
    if (v - 0.5f64.sqrt()).abs() > 1e-9 || emd_loss(&a, &a, 2.0)? != 0.0 {
        bail!("EMD identities broken ({v})");
    }
    Ok(format!("PLCC/SRCC/ACC identities hold, two-bin EMD {v:.4}"))
}

fn interpolation(fault: bool) -> Result<String> {
    let mut r = rng(5);
    for i in 0..50 {
        let (rows, cols, dim) = (r.random_range(1..16), r.random_range(1..16), r.random_range(1..8));
        let data: Vec<f32> = (0..rows * cols * dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let src = PosGrid::new(rows, cols, dim, data, vec![0.0; dim])?;
        let mut same = interpolate_grid(&src, rows, cols)?.data().to_vec();
        if fault {
            same[0] += 1e-3;
        }
        if same.iter().zip(src.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            bail!("grid {i}: resampling to the same size changed values");
        }
        let out = interpolate_grid(&src, r.random_range(1..40), r.random_range(1..40))?;
        for k in 0..dim {
            let col: Vec<f32> = src.data().iter().skip(k).step_by(dim).copied().collect();
            let (lo, hi) = col
                .iter()
                .fold((f32::MAX, f32::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
            if out.data().iter().skip(k).step_by(dim).any(|v| *v < lo || *v > hi) {
                bail!("grid {i}: component {k} left its source range");
            }
        }
    }
    Ok("50 grids: identity exact, values within source bounds".into())
}

fn selection(fault: bool) -> Result<String> {
    let mut r = rng(6);
    let t = if fault { 3.0 } else { 1.0 };
    for case in 0..300 {
        let cells = r.random_range(2..60);
        let scores: Vec<f64> = (0..cells).map(|_| r.random_range(0..8) as f64).collect();
        let k = r.random_range(1..cells);
        let map = ImportanceMap::new(
            GridSpec {
                cell_px: 1,
                rows: 1,
                cols: cells,
            },
            scores.clone(),
        )?;
        let cfg = SelectionConfig {
            threshold_t: t,
            ..Default::default()
        };
        let picked = select_cells(cells, Some(&map), k, &cfg, &mut r)?;
        let mut top = rank_cells(&scores)[..k].to_vec();
        top.sort_unstable();
        if picked != top {
            bail!("case {case}: t=1 picked {picked:?}, top-K is {top:?}");
        }
    }
    Ok("300 t=1 selections equal the top-K".into())
}

fn serialization(fault: bool) -> Result<String> {
    for i in 0..20 {
        let (mut pack, w) = toy_pack(60 + i)?;
        pack.meta.image_seed = Some(i);
        let mut bytes = pack.to_bytes()?;
        if fault {
            let mid = bytes.len() / 2;
            bytes[mid] ^= 0x40;
        }
        if TokenPack::from_bytes(&bytes)?.to_bytes()? != pack.to_bytes()? {
            bail!("pack {i} changed across a round trip");
        }
        let wb = w.to_store().to_bytes()?;
        let back = Weights::from_store(&vit::TensorStore::from_bytes(&wb)?, w.config())?;
        if back.to_store().to_bytes()? != wb {
            bail!("weights {i} changed across a round trip");
        }
    }
    Ok("20 packs and 20 weight sets round-trip byte-identically".into())
}
