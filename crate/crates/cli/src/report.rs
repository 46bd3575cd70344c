use std::path::PathBuf;

use anyhow::{Context, Result};
use charm_core::cost::{self, CostBreakdown, CostReport};
use charm_core::evaluation::{self, EvalConfig, MetricReport};
use charm_core::imaging::seq_len;
use charm_core::tokenizer::TokenizerConfig;
use charm_core::vit::ViTConfig;
use serde::Serialize;

use crate::config::backbone;

#[derive(clap::Args, Debug)]
pub struct CostArgs {
    #[arg(long, default_value = "vit-small")]
    pub preset: String,
    #[arg(long, default_value_t = 224)]
    pub height: usize,
    #[arg(long, default_value_t = 224)]
    pub width: usize,
    /// Standard token count (defaults to floor(h/p) * floor(w/p)).
    #[arg(long = "standard-tokens")]
    pub standard_tokens: Option<usize>,
    /// Charm budget to compare against the standard count.
    #[arg(long = "target-len")]
    pub target_len: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long = "mlp-ratio")]
    pub mlp_ratio: Option<usize>,
    #[arg(long = "patch-size")]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
pub enum CostOutput {
    Standard {
        preset: String,
        model: ViTConfig,
        height: usize,
        width: usize,
        standard: CostBreakdown,
    },
    Compared {
        preset: String,
        model: ViTConfig,
        #[serde(flatten)]
        report: CostReport,
    },
}

impl CostArgs {
    pub fn model(&self) -> Result<ViTConfig> {
        let base = backbone(&self.preset)?;
        let model = ViTConfig {
            dim: self.dim.unwrap_or(base.dim),
            layers: self.layers.unwrap_or(base.layers),
            heads: self.heads.unwrap_or(base.heads),
            mlp_ratio: self.mlp_ratio.unwrap_or(base.mlp_ratio),
            patch: self.patch_size.unwrap_or(base.patch),
            ..base
        };
        model.validate()?;
        Ok(model)
    }
}

pub fn cost(args: &CostArgs) -> Result<CostOutput> {
    let model = args.model()?;
    let preset = args.preset.clone();
    Ok(match args.target_len {
        None => {
            let n = args
                .standard_tokens
                .unwrap_or_else(|| seq_len(args.height, args.width, model.patch));
            CostOutput::Standard {
                preset,
                model,
                height: args.height,
                width: args.width,
                standard: cost::vit_macs(&model, n),
            }
        }
        Some(l) => {
            let tok = TokenizerConfig {
                patch: model.patch,
                target_len: l,
                ..Default::default()
            };
            let report = cost::charm_cost_report(&model, &tok, args.height, args.width, args.standard_tokens);
            CostOutput::Compared { preset, model, report }
        }
    })
}

pub fn print_cost(out: &CostOutput) {
    match out {
        CostOutput::Standard {
            preset,
            height,
            width,
            standard,
            ..
        } => println!(
            "{preset} {height}x{width}: {} tokens, {:.2} GMACs",
            standard.token_count,
            standard.gmacs()
        ),
        CostOutput::Compared { preset, report, .. } => {
            println!("{preset}");
            print!("{}", report.to_table());
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct MetricsArgs {
    /// Predictions CSV (`id,score` or `id,p1..pB`).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth CSV in the same layout.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long = "acc-threshold", default_value_t = 5.0)]
    pub acc_threshold: f64,
    /// Exponent of the EMD loss.
    #[arg(long = "emd-r", default_value_t = 2.0)]
    pub emd_r: f64,
    #[arg(long)]
    pub json: bool,
}

pub fn metrics(args: &MetricsArgs) -> Result<MetricReport> {
    let pred = evaluation::read_score_file(&args.pred).with_context(|| format!("reading {}", args.pred.display()))?;
    let gt = evaluation::read_score_file(&args.gt).with_context(|| format!("reading {}", args.gt.display()))?;
    let cfg = EvalConfig {
        emd_exponent: args.emd_r,
        acc_threshold: args.acc_threshold,
    };
    Ok(evaluation::evaluate(&pred, &gt, &cfg)?)
}

pub fn print_metrics(r: &MetricReport) {
    println!("samples {}", r.count);
    println!("PLCC    {:.4}", r.plcc);
    println!("SRCC    {:.4}", r.srcc);
    println!("ACC     {:.4} (threshold {})", r.acc, r.acc_threshold);
    println!("L1      {:.4}", r.l1);
    if let Some(emd) = r.emd {
        println!("EMD     {emd:.4}");
    }
}
