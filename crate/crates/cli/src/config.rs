use anyhow::{bail, Context, Result};
use charm_core::importance::{SelectionConfig, Strategy};
use charm_core::tokenizer::{ScaleMode, TokenizerConfig};
use charm_core::vit::ViTConfig;
use clap::{Args, ValueEnum};

/// Token budgets per dataset profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// l = 512
    Ava,
    /// l = 768
    Tad66k,
    /// l = 1024
    Default,
}

impl Profile {
    pub fn target_len(self) -> usize {
        match self {
            Profile::Ava => 512,
            Profile::Tad66k => 768,
            Profile::Default => 1024,
        }
    }
}

pub const PRESETS: [&str; 3] = ["vit-small", "dinov2-small", "dinov2-large"];

pub fn backbone(name: &str) -> Result<ViTConfig> {
    ViTConfig::preset(name).with_context(|| format!("unknown preset `{name}` (expected one of {})", PRESETS.join(", ")))
}

#[derive(Args, Debug, Clone)]
pub struct TokenizerArgs {
    /// Backbone preset; sets the patch size unless --patch-size is given.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long = "patch-size")]
    pub patch_size: Option<usize>,
    /// Two-scale coarse multiplier.
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(2..=3))]
    pub scales: u8,
    #[arg(long, default_value_t = 2)]
    pub alpha: usize,
    #[arg(long, default_value_t = 3)]
    pub beta: usize,
    #[arg(long, default_value_t = 4)]
    pub gamma: usize,
    /// Dataset profile that picks the token budget.
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Token budget; overrides --profile.
    #[arg(long = "target-len")]
    pub target_len: Option<usize>,
    #[arg(long, default_value = "frequency")]
    pub strategy: Strategy,
    #[arg(long = "threshold-t", default_value_t = 2.0)]
    pub threshold_t: f64,
    #[arg(long, env = "CHARM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Epoch fed into per-image seeds.
    #[arg(long, default_value_t = 0)]
    pub epoch: u64,
    /// Keep the same selection across epochs.
    #[arg(long = "fixed-selection")]
    pub fixed_selection: bool,
    #[arg(long = "max-edge")]
    pub max_edge: Option<usize>,
}

impl TokenizerArgs {
    pub fn patch(&self) -> Result<usize> {
        let from_preset = self.preset.as_deref().map(backbone).transpose()?.map(|c| c.patch);
        match (self.patch_size, from_preset) {
            (Some(p), Some(q)) if p != q => {
                bail!(
                    "--patch-size {p} conflicts with preset {} (patch {q})",
                    self.preset.as_deref().unwrap_or_default()
                )
            }
            (Some(p), _) | (None, Some(p)) => Ok(p),
            (None, None) => Ok(16),
        }
    }

    pub fn to_config(&self) -> Result<TokenizerConfig> {
        let scales = if self.scales == 3 {
            ScaleMode::Three {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
            }
        } else {
            ScaleMode::Two { n: self.n }
        };
        let target_len = self
            .target_len
            .or(self.profile.map(Profile::target_len))
            .unwrap_or(Profile::Default.target_len());
        let cfg = TokenizerConfig {
            patch: self.patch()?,
            scales,
            target_len,
            selection: SelectionConfig {
                strategy: self.strategy,
                threshold_t: self.threshold_t,
                seed: self.seed,
                per_epoch_resample: !self.fixed_selection,
            },
            max_edge: self.max_edge,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
