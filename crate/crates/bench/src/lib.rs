//! Deterministic inputs shared by the pipeline benchmarks.

use charm_core::imaging::Image;
use charm_core::importance::{SelectionConfig, Strategy};
use charm_core::tokenizer::{ScaleMode, TokenizerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth gradient with a textured band, so every scorer has work to do.
pub fn photo_like(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f32> = (0..height * width * 3).map(|_| rng.random()).collect();
    Image::from_fn(height, width, 3, |y, x, c| {
        let base = 0.2 + 0.6 * (x + y) as f32 / (height + width) as f32;
        if (y / 64) % 3 == 1 {
            0.5 * base + 0.5 * noise[(y * width + x) * 3 + c]
        } else {
            base
        }
    })
    .expect("values stay in [0, 1]")
}

pub fn two_scale(patch: usize, target_len: usize, strategy: Strategy) -> TokenizerConfig {
    TokenizerConfig {
        patch,
        scales: ScaleMode::Two { n: 2 },
        target_len,
        selection: SelectionConfig {
            strategy,
            ..Default::default()
        },
        max_edge: None,
    }
}

pub fn three_scale(patch: usize, target_len: usize, strategy: Strategy) -> TokenizerConfig {
    TokenizerConfig {
        scales: ScaleMode::Three {
            alpha: 2,
            beta: 3,
            gamma: 4,
        },
        ..two_scale(patch, target_len, strategy)
    }
}
