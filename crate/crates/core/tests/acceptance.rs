//! Acceptance suite. Every criterion runs inside `primary_criteria`, prints
//! one PASS/FAIL line with its measured value and wall time, and the test
//! fails if any line is FAIL.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use charm_core::embeddings::{self, interpolate_grid, PosGrid};
use charm_core::evaluation::{acc, emd_loss, plcc, srcc, ScoreDistribution};
use charm_core::imaging::{seq_len, GridSpec, Image};
use charm_core::importance::{select_cells, ImportanceMap, SelectionConfig, Strategy};
use charm_core::tokenizer::{
    self, coverage_counts, full_resolution_cells, ScaleMode, TokenPack, TokenizerConfig, PAD_SCALE,
};
use charm_core::vit::{self, TensorStore, ViTConfig, Weights};
use charm_core::{charm_cost_report, vit_macs};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Outcome);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn random_image(h: usize, w: usize, channels: usize, r: &mut ChaCha8Rng) -> Image {
    // smooth field plus noise so that scorers see varied content
    let (fy, fx, amp) = (
        r.random_range(0.01..0.3),
        r.random_range(0.01..0.3),
        r.random_range(0.0..0.5),
    );
    let noise: Vec<f32> = (0..h * w * channels).map(|_| r.random::<f32>()).collect();
    Image::from_fn(h, w, channels, |y, x, c| {
        let base = 0.5 + 0.4 * ((y as f32 * fy).sin() * (x as f32 * fx).cos());
        (1.0 - amp) * base + amp * noise[(y * w + x) * channels + c]
    })
    .unwrap()
}

/// Per-pixel hit counts computed from token coordinates alone: a token at
/// `(r, c)` of an `R x C` grid owns pixel `(y, x)` when the pixel center
/// lies in `[r*H/R, (r+1)*H/R) x [c*W/C, (c+1)*W/C)`, tested in exact
/// integer arithmetic.
fn paint_coverage(pack: &TokenPack) -> Vec<u32> {
    let [h, w] = pack.meta.cropped_dims;
    let owned = |k: u32, cells: u32, px: usize| -> Vec<usize> {
        (0..px)
            .filter(|&y| {
                let center = (2 * y + 1) as u64 * cells as u64;
                2 * k as u64 * px as u64 <= center && center < 2 * (k as u64 + 1) * px as u64
            })
            .collect()
    };
    let mut counts = vec![0u32; h * w];
    for i in 0..pack.len() {
        if !pack.valid[i] {
            continue;
        }
        let [rows, cols] = pack.grid_dims[pack.scale_ids[i] as usize];
        let [r, c] = pack.coords[i];
        for y in owned(r, rows, h) {
            for x in owned(c, cols, w) {
                counts[y * w + x] += 1;
            }
        }
    }
    counts
}

fn c01_seq_len() -> Outcome {
    let cases = [((224, 224, 16), 196), ((224, 224, 14), 256), ((640, 640, 16), 1600)];
    for ((h, w, p), expected) in cases {
        let got = seq_len(h, w, p);
        ensure!(got == expected, "seq_len({h},{w},{p}) = {got}, expected {expected}");
    }
    Ok("196 / 256 / 1600 exact".into())
}

fn c02_gmacs() -> Outcome {
    let dino = ViTConfig::dinov2_small();
    let vit_s = ViTConfig::vit_small();
    let cases = [
        ("dinov2-small@256", dino, 256, 6.11),
        ("dinov2-small@512", dino, 512, 13.46),
        ("dinov2-small@700", dino, 700, 19.60),
        ("vit-small@196", vit_s, 196, 4.58),
        ("vit-small@1600", vit_s, 1600, 58.11),
    ];
    let mut worst = 0.0f64;
    for (name, cfg, n, table) in cases {
        let got = vit_macs(&cfg, n).gmacs();
        let rel = (got - table).abs() / table;
        worst = worst.max(rel);
        ensure!(rel <= 0.02, "{name}: {got:.3} G vs {table} G ({:.2}%)", rel * 100.0);
    }
    Ok(format!("worst relative error {:.2}%", worst * 100.0))
}

fn c03_reductions() -> Outcome {
    let dino = ViTConfig::dinov2_small();
    let two = TokenizerConfig {
        patch: 14,
        scales: ScaleMode::Two { n: 2 },
        target_len: 512,
        ..Default::default()
    };
    let three = TokenizerConfig {
        scales: ScaleMode::Three {
            alpha: 2,
            beta: 3,
            gamma: 4,
        },
        target_len: 700,
        ..two
    };
    let r2 = charm_cost_report(&dino, &two, 640, 640, Some(2070)).reduction.total * 100.0;
    let r3 = charm_cost_report(&dino, &three, 640, 640, Some(2070)).reduction.total * 100.0;
    ensure!((r2 - 84.0).abs() <= 1.0, "two-scale reduction {r2:.2}% vs 84%");
    ensure!((r3 - 76.7).abs() <= 1.0, "three-scale reduction {r3:.2}% vs 76.7%");
    Ok(format!("two-scale {r2:.2}%, three-scale {r3:.2}%"))
}

fn c04_budget_packing() -> Outcome {
    // 640/32 = 20 coarse cells per side; K = (512 - 400) / 3 = 37 cells kept
    // at full resolution, each worth 4 tokens; the other 363 give one each.
    let cells = (640 / 32) * (640 / 32);
    let k = (512 - cells) / 3;
    let (hi, lo) = (4 * k, cells - k);
    ensure!((hi, lo, 512 - hi - lo) == (148, 363, 1), "oracle arithmetic drifted");

    let mut worst = Duration::ZERO;
    let mut runs = 0;
    for strategy in Strategy::ALL {
        for seed in 0..4u64 {
            let mut r = rng(seed * 31 + 7);
            let img = random_image(640, 640, 3, &mut r);
            let mask = Image::from_fn(40, 40, 1, |_, _, _| r.random::<f32>()).unwrap();
            let cfg = TokenizerConfig {
                patch: 16,
                scales: ScaleMode::Two { n: 2 },
                target_len: 512,
                selection: SelectionConfig {
                    strategy,
                    seed,
                    ..Default::default()
                },
                max_edge: None,
            };
            let start = Instant::now();
            let pack = tokenizer::tokenize(&img, &cfg, Some(&mask), &mut r).map_err(|e| e.to_string())?;
            worst = worst.max(start.elapsed());
            runs += 1;
            let counts = pack.scale_counts();
            ensure!(
                pack.len() == 512 && pack.valid_count() == hi + lo && pack.pad_count() == 1,
                "{strategy} seed {seed}: {} valid, {} pads",
                pack.valid_count(),
                pack.pad_count()
            );
            ensure!(
                counts[..2] == [hi, lo],
                "{strategy} seed {seed}: scale counts {counts:?}"
            );
            ensure!(
                paint_coverage(&pack).iter().all(|&c| c == 1),
                "{strategy} seed {seed}: tiling broken"
            );
        }
    }
    ensure!(worst < Duration::from_secs(1), "slowest image took {worst:?}");
    Ok(format!("{runs} images, 148 + 363 + 1 pad each, slowest {worst:.1?}"))
}

fn random_config(r: &mut ChaCha8Rng, h: usize, w: usize) -> TokenizerConfig {
    let patch = [8, 14, 16][r.random_range(0..3)];
    let strategy = [
        Strategy::Random,
        Strategy::Frequency,
        Strategy::Gradient,
        Strategy::Entropy,
    ][r.random_range(0..4)];
    let scales = if r.random_bool(0.5) {
        ScaleMode::Two {
            n: r.random_range(2..=3),
        }
    } else {
        ScaleMode::Three {
            alpha: 1,
            beta: 2,
            gamma: 3,
        }
    };
    let mut cfg = TokenizerConfig {
        patch,
        scales,
        target_len: 1,
        selection: SelectionConfig {
            strategy,
            threshold_t: r.random_range(1.0..3.0),
            seed: r.random(),
            per_epoch_resample: true,
        },
        max_edge: if r.random_bool(0.2) {
            Some(r.random_range(200..600))
        } else {
            None
        },
    };
    // Budget between the all-coarse floor and the standard patch count so
    // the multi-scale path is taken without dropping tokens.
    let (h, w) = match cfg.max_edge {
        Some(e) if h.max(w) > e => {
            let s = e as f64 / h.max(w) as f64;
            ((h as f64 * s).round() as usize, (w as f64 * s).round() as usize)
        }
        _ => (h, w),
    };
    let coarse = cfg.coarse_px();
    let floor = cfg.multipliers().last().unwrap().pow(2) * (h / coarse).max(1) * (w / coarse).max(1);
    let standard = seq_len(h, w, patch).max(floor + 1);
    cfg.target_len = r.random_range(floor..=standard);
    cfg
}

fn c05_tiling() -> Outcome {
    let mut r = rng(5);
    let mut modes = BTreeMap::new();
    let mut pads = 0;
    let mut done = 0;
    while done < 200 {
        let (h, w) = (r.random_range(64..=800), r.random_range(64..=800));
        let cfg = random_config(&mut r, h, w);
        let img = random_image(h, w, if r.random_bool(0.8) { 3 } else { 1 }, &mut r);
        let pack = match tokenizer::tokenize(&img, &cfg, None, &mut r) {
            Ok(p) => p,
            // image smaller than one coarse cell after max-edge scaling
            Err(charm_core::CharmError::TooSmall { .. }) => continue,
            Err(e) => return Err(format!("{h}x{w} {cfg:?}: {e}")),
        };
        done += 1;
        if pack.meta.dropped > 0 {
            continue;
        }
        *modes.entry(format!("{:?}", pack.meta.mode)).or_insert(0) += 1;
        pads += pack.pad_count();
        let painted = paint_coverage(&pack);
        ensure!(
            painted.iter().all(|&c| c == 1),
            "{h}x{w} {cfg:?}: coverage not exactly once"
        );
        ensure!(
            coverage_counts(&pack) == painted,
            "{h}x{w}: library coverage disagrees with oracle"
        );
    }
    let checked: usize = modes.values().sum();
    ensure!(checked >= 150, "only {checked} no-drop packs");
    Ok(format!(
        "{checked} packs covered exactly once {modes:?}, {pads} pads total"
    ))
}

fn c06_degenerate() -> Outcome {
    let mut r = rng(6);
    for i in 0..50 {
        let patch = [4, 8, 16][r.random_range(0..3)];
        let n = r.random_range(2..=3);
        let (rows, cols) = (r.random_range(1..8), r.random_range(1..8));
        let img = random_image(rows * n * patch, cols * n * patch, 3, &mut r);
        let strategy = [
            Strategy::Random,
            Strategy::Frequency,
            Strategy::Gradient,
            Strategy::Entropy,
        ][i % 4];
        let cfg = TokenizerConfig {
            patch,
            scales: ScaleMode::Two { n },
            target_len: rows * cols * n * n + r.random_range(0..5),
            selection: SelectionConfig {
                strategy,
                ..Default::default()
            },
            max_edge: None,
        };
        let multi = tokenizer::tokenize_two_scale(&img, &cfg, None, &mut r).map_err(|e| e.to_string())?;
        let single = tokenizer::tokenize_single_scale(&img, &cfg, &mut r).map_err(|e| e.to_string())?;
        let bag = |p: &TokenPack| {
            let mut v: Vec<Vec<u32>> = (0..p.len())
                .filter(|&i| p.valid[i])
                .map(|i| p.token_pixels(i).iter().map(|f| f.to_bits()).collect())
                .collect();
            v.sort();
            v
        };
        ensure!(multi.scale_counts()[1] == 0, "image {i}: some cell was downscaled");
        ensure!(bag(&multi) == bag(&single), "image {i}: pixel multisets differ");
    }
    Ok("50 images, identical pixel multisets".into())
}

fn toy_pack(seed: u64, target_len: usize) -> (TokenPack, Weights) {
    let mut r = rng(seed);
    let cfg = TokenizerConfig {
        patch: 4,
        scales: ScaleMode::Three {
            alpha: 1,
            beta: 2,
            gamma: 3,
        },
        target_len,
        selection: SelectionConfig {
            strategy: Strategy::Gradient,
            ..Default::default()
        },
        max_edge: None,
    };
    let img = random_image(r.random_range(36..72), r.random_range(36..72), 3, &mut r);
    let pack = tokenizer::tokenize(&img, &cfg, None, &mut r).unwrap();
    let weights = Weights::random(&ViTConfig::toy(4, 3), &mut r).unwrap();
    (pack, weights)
}

fn cls_state(pack: &TokenPack, w: &Weights) -> Array1<f64> {
    let enc = vit::patch_encode(pack, w).unwrap();
    let pos = embeddings::position_for_tokens(pack, w.pos_grid()).unwrap();
    let sc = embeddings::scale_embed(pack, w.table()).unwrap();
    let input = vit::assemble_input(&enc, &pos, &sc, w, &pack.valid).unwrap();
    vit::encoder_forward(&input, w, w.config()).unwrap().row(0).to_owned()
}

fn rel_dev(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    diff / a.mapv(|v| v * v).sum().sqrt().max(f64::MIN_POSITIVE)
}

fn permute(pack: &TokenPack, order: &[usize]) -> TokenPack {
    let size = pack.token_size();
    let mut out = pack.clone();
    out.pixels.clear();
    out.scale_ids.clear();
    out.coords.clear();
    out.valid.clear();
    for &i in order {
        out.pixels.extend_from_slice(pack.token_pixels(i));
        out.scale_ids.push(pack.scale_ids[i]);
        out.coords.push(pack.coords[i]);
        out.valid.push(pack.valid[i]);
    }
    debug_assert_eq!(out.pixels.len(), order.len() * size);
    out
}

fn c07_permutation() -> Outcome {
    let mut worst = 0.0f64;
    let mut r = rng(7);
    for round in 0..10u64 {
        let (pack, w) = toy_pack(700 + round, 60);
        let base = cls_state(&pack, &w);
        for _ in 0..10 {
            let mut order: Vec<usize> = (0..pack.len()).collect();
            order.shuffle(&mut r);
            let dev = rel_dev(&base, &cls_state(&permute(&pack, &order), &w));
            worst = worst.max(dev);
        }
    }
    ensure!(worst <= 1e-5, "relative deviation {worst:e}");
    Ok(format!("100 permutations, worst relative deviation {worst:.2e}"))
}

fn c08_pads() -> Outcome {
    let mut worst = 0.0f64;
    let mut r = rng(8);
    for i in 0..50u64 {
        let (pack, w) = toy_pack(800 + i, r.random_range(30..70));
        let base = cls_state(&pack, &w);
        let extra = r.random_range(1..=64);
        let mut padded = pack.clone();
        for _ in 0..extra {
            padded.pixels.extend(std::iter::repeat_n(0.0, pack.token_size()));
            padded.scale_ids.push(PAD_SCALE);
            padded.coords.push([0, 0]);
            padded.valid.push(false);
        }
        worst = worst.max(rel_dev(&base, &cls_state(&padded, &w)));
    }
    ensure!(worst <= 1e-6, "relative deviation {worst:e}");
    Ok(format!("50 packs, worst relative deviation {worst:.2e}"))
}

fn c09_interpolation() -> Outcome {
    let mut r = rng(9);
    for i in 0..100 {
        let (rows, cols, dim) = (r.random_range(1..20), r.random_range(1..20), r.random_range(1..12));
        let data: Vec<f32> = (0..rows * cols * dim).map(|_| r.random_range(-3.0..3.0)).collect();
        let cls: Vec<f32> = (0..dim).map(|_| r.random()).collect();
        let src = PosGrid::new(rows, cols, dim, data, cls).unwrap();
        let same = interpolate_grid(&src, rows, cols).map_err(|e| e.to_string())?;
        let bits = |g: &PosGrid| g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure!(bits(&same) == bits(&src), "grid {i}: not bit-identical at source dims");

        let (tr, tc) = (r.random_range(1..48), r.random_range(1..48));
        let out = interpolate_grid(&src, tr, tc).map_err(|e| e.to_string())?;
        for k in 0..dim {
            let column = src.data().iter().skip(k).step_by(dim);
            let (lo, hi) = column.fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            ensure!(
                out.data().iter().skip(k).step_by(dim).all(|v| *v >= lo && *v <= hi),
                "grid {i} component {k}: value outside [{lo}, {hi}]"
            );
        }
    }
    Ok("100 grids, identity bit-exact, all values within source bounds".into())
}

fn c10_metrics() -> Outcome {
    let mut r = rng(10);
    let tol = 1e-9;
    for _ in 0..100 {
        let n = r.random_range(3..50);
        let gt: Vec<f64> = (0..n).map(|_| r.random_range(1.0..10.0)).collect();
        let (a, b) = (r.random_range(0.1..5.0), r.random_range(-5.0..5.0));
        let affine: Vec<f64> = gt.iter().map(|g| a * g + b).collect();
        let mono: Vec<f64> = gt.iter().map(|g| g.powi(3) + g.exp()).collect();
        let rev: Vec<f64> = gt.iter().map(|g| -g).collect();
        let e = |v: charm_core::Result<f64>| v.map_err(|e| e.to_string());
        ensure!((e(plcc(&affine, &gt))? - 1.0).abs() <= tol, "PLCC under affine map");
        ensure!((e(srcc(&mono, &gt))? - 1.0).abs() <= tol, "SRCC under monotone map");
        ensure!((e(srcc(&rev, &gt))? + 1.0).abs() <= tol, "SRCC under reversal");
        ensure!(e(acc(&gt, &gt, 5.0))? == 1.0, "ACC of identical lists");
        let mirrored: Vec<f64> = gt.iter().map(|g| 10.0 - g).collect();
        let off = gt.iter().filter(|g| **g == 5.0).count();
        ensure!(off > 0 || e(acc(&mirrored, &gt, 5.0))? == 0.0, "ACC of mirrored list");

        let bins = r.random_range(2..12);
        let mut p: Vec<f64> = (0..bins).map(|_| r.random()).collect();
        let mut q: Vec<f64> = (0..bins).map(|_| r.random()).collect();
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        p.iter_mut().for_each(|v| *v /= sp);
        q.iter_mut().for_each(|v| *v /= sq);
        let dp = ScoreDistribution::over_levels(p).map_err(|e| e.to_string())?;
        let dq = ScoreDistribution::over_levels(q).map_err(|e| e.to_string())?;
        ensure!(e(emd_loss(&dp, &dp, 2.0))? == 0.0, "EMD to itself");
        ensure!(
            (e(emd_loss(&dp, &dq, 2.0))? - e(emd_loss(&dq, &dp, 2.0))?).abs() <= tol,
            "EMD symmetry"
        );
    }
    let one = ScoreDistribution::over_levels(vec![1.0, 0.0]).unwrap();
    let two = ScoreDistribution::over_levels(vec![0.0, 1.0]).unwrap();
    let v = emd_loss(&one, &two, 2.0).unwrap();
    ensure!((v - 0.5f64.sqrt()).abs() <= tol, "EMD two-bin case {v}");
    Ok(format!("100 random cases, two-bin EMD = {v:.4}"))
}

fn c11_selection() -> Outcome {
    let mut r = rng(11);
    let brute_top = |scores: &[f64], k: usize| {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        // selection sort style oracle: repeatedly take the best remaining
        let mut out = Vec::new();
        for _ in 0..k {
            let (pos, _) = idx
                .iter()
                .enumerate()
                .fold(None::<(usize, usize)>, |best, (j, &i)| match best {
                    Some((_, b)) if scores[b] >= scores[i] => best,
                    _ => Some((j, i)),
                })
                .unwrap();
            out.push(idx.remove(pos));
        }
        out
    };
    for case in 0..2000 {
        let cells = r.random_range(1..80);
        // coarse quantization forces ties
        let scores: Vec<f64> = (0..cells).map(|_| r.random_range(0..12) as f64 / 4.0).collect();
        let map = ImportanceMap::new(
            GridSpec {
                cell_px: 1,
                rows: 1,
                cols: cells,
            },
            scores.clone(),
        )
        .unwrap();
        let k = r.random_range(0..=cells);
        let t = if case < 1000 { 1.0 } else { r.random_range(1.0..4.0) };
        let cfg = SelectionConfig {
            strategy: Strategy::Frequency,
            threshold_t: t,
            seed: case as u64,
            per_epoch_resample: false,
        };
        let picked = select_cells(cells, Some(&map), k, &cfg, &mut r).map_err(|e| e.to_string())?;
        ensure!(
            picked.len() == k && picked.windows(2).all(|w| w[0] < w[1]),
            "case {case}: bad selection shape"
        );
        if case < 1000 {
            let mut top = brute_top(&scores, k);
            top.sort_unstable();
            ensure!(picked == top, "case {case}: t=1 picked {picked:?}, top-K {top:?}");
        } else {
            let pool = brute_top(&scores, ((t * k as f64).ceil() as usize).min(cells));
            ensure!(
                picked.iter().all(|i| pool.contains(i)),
                "case {case}: pick outside the top pool"
            );
        }
    }
    Ok("1000 top-K matches, 1000 draws inside the pool".into())
}

fn c12_discrimination() -> Outcome {
    let mut report = Vec::new();
    for strategy in [Strategy::Frequency, Strategy::Gradient, Strategy::Entropy] {
        let (mut in_noise, mut total) = (0usize, 0usize);
        for seed in 0..100u64 {
            let mut r = rng(1200 + seed);
            let noise: Vec<f32> = (0..256 * 256 * 3).map(|_| r.random()).collect();
            let img = Image::from_fn(
                256,
                256,
                3,
                |y, x, c| {
                    if x < 128 {
                        0.5
                    } else {
                        noise[(y * 256 + x) * 3 + c]
                    }
                },
            )
            .unwrap();
            // 8 x 8 coarse cells; K = (112 - 64) / 3 = 16
            let cfg = TokenizerConfig {
                patch: 16,
                scales: ScaleMode::Two { n: 2 },
                target_len: 112,
                selection: SelectionConfig {
                    strategy,
                    threshold_t: 2.0,
                    seed,
                    per_epoch_resample: true,
                },
                max_edge: None,
            };
            let pack = tokenizer::tokenize_two_scale(&img, &cfg, None, &mut r).map_err(|e| e.to_string())?;
            let kept = full_resolution_cells(&pack);
            total += kept.len();
            in_noise += kept.iter().filter(|&&c| c % 8 >= 4).count();
        }
        let share = in_noise as f64 / total as f64;
        ensure!(share >= 0.9, "{strategy}: {:.1}% in the noisy half", share * 100.0);
        report.push(format!("{strategy} {:.1}%", share * 100.0));
    }
    Ok(report.join(", "))
}

fn c13_serialization() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(13);
    for i in 0..100 {
        let (h, w) = (r.random_range(64..200), r.random_range(64..200));
        let cfg = random_config(&mut r, h, w);
        let img = random_image(h, w, 3, &mut r);
        let mut pack = match tokenizer::tokenize(&img, &cfg, None, &mut r) {
            Ok(p) => p,
            Err(_) => tokenizer::tokenize(&img, &TokenizerConfig { patch: 8, ..cfg }, None, &mut r)
                .map_err(|e| e.to_string())?,
        };
        pack.meta.source = Some(format!("img_{i}.png"));
        pack.meta.image_seed = Some(r.random());
        let bytes = pack.to_bytes().map_err(|e| e.to_string())?;
        let back = TokenPack::from_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure!(
            back.to_bytes().unwrap() == bytes,
            "pack {i}: bytes differ after round trip"
        );
        let path = dir.path().join(format!("{i}.chrm"));
        tokenizer::write_pack(&pack, &path).map_err(|e| e.to_string())?;
        ensure!(
            std::fs::read(&path).unwrap() == bytes,
            "pack {i}: file differs from in-memory bytes"
        );
        ensure!(
            tokenizer::read_pack(&path).unwrap().to_bytes().unwrap() == bytes,
            "pack {i}: file round trip"
        );

        let vcfg = ViTConfig {
            dim: 8 * r.random_range(1..5),
            layers: r.random_range(0..3),
            heads: 2,
            patch: r.random_range(2..6),
            num_scales: r.random_range(1..4),
            pos_grid: [r.random_range(1..6), r.random_range(1..6)],
            ..ViTConfig::toy(4, if i % 2 == 0 { 3 } else { 1 })
        };
        let weights = Weights::random(&vcfg, &mut r).map_err(|e| e.to_string())?;
        let bytes = weights.to_store().to_bytes().map_err(|e| e.to_string())?;
        let store = TensorStore::from_bytes(&bytes).map_err(|e| e.to_string())?;
        let again = Weights::from_store(&store, &vcfg).map_err(|e| e.to_string())?;
        ensure!(
            again.to_store().to_bytes().unwrap() == bytes,
            "weights {i}: bytes differ after round trip"
        );
        let path = dir.path().join(format!("{i}.chwt"));
        vit::save_weights(&weights, &path).map_err(|e| e.to_string())?;
        ensure!(std::fs::read(&path).unwrap() == bytes, "weights {i}: file differs");
        let loaded = vit::load_weights(&path, &vcfg).map_err(|e| e.to_string())?;
        ensure!(
            loaded.to_store().to_bytes().unwrap() == bytes,
            "weights {i}: file round trip"
        );
    }
    Ok("100 packs and 100 weight files byte-identical".into())
}

#[test]
fn primary_criteria() {
    let criteria: [Criterion; 13] = [
        ("token-count arithmetic", 1, c01_seq_len),
        ("GMAC table reproduction", 1, c02_gmacs),
        ("reduction percentages", 1, c03_reductions),
        ("budget packing 640x640 l=512", 20, c04_budget_packing),
        ("tiling invariant", 30, c05_tiling),
        ("degenerate equivalence", 10, c06_degenerate),
        ("permutation invariance", 10, c07_permutation),
        ("pad neutrality", 10, c08_pads),
        ("position grid identity and bounds", 5, c09_interpolation),
        ("metric identities", 1, c10_metrics),
        ("selection correctness", 5, c11_selection),
        ("synthetic discrimination", 10, c12_discrimination),
        ("serialization round trip", 5, c13_serialization),
    ];
    let mut failed = Vec::new();
    for (i, (name, limit, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(_) if elapsed > Duration::from_secs(limit) => Err(format!("took {elapsed:.1?}, limit {limit} s")),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} [{:02}] {name}: {detail} ({elapsed:.2?})", i + 1);
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
