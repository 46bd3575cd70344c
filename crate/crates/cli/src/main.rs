mod config;
mod overlay;
mod report;
mod selfcheck;
mod tokenize;

use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

/// Content-aware multi-scale tokenization for native-resolution ViTs.
#[derive(Parser, Debug)]
#[command(name = "charm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tokenize an image or a directory of images into pack files.
    Tokenize(tokenize::TokenizeArgs),
    /// Draw the cells kept at full resolution onto the image.
    Overlay(overlay::OverlayArgs),
    /// Analytical GMACs for a backbone, optionally against a token budget.
    Cost(report::CostArgs),
    /// PLCC, SRCC, ACC and EMD between prediction and ground-truth CSVs.
    Metrics(report::MetricsArgs),
    /// Run the built-in invariant suites.
    Selfcheck(selfcheck::SelfcheckArgs),
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Tokenize(args) => {
            let manifest = tokenize::run(&args)?;
            if args.json {
                print_json(&manifest)?;
            } else {
                tokenize::print_summary(&manifest);
            }
            Ok(if manifest.failures == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Overlay(args) => {
            let rep = overlay::run(&args)?;
            if args.json {
                print_json(&rep)?;
            } else {
                println!(
                    "{}: {} of {} cells at full resolution, {} at mid scale (seed {}, image seed {})",
                    rep.out.display(),
                    rep.full.len(),
                    rep.grid.cells(),
                    rep.mid.len(),
                    rep.seed,
                    rep.image_seed
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Cost(args) => {
            let out = report::cost(&args)?;
            if args.json {
                print_json(&out)?;
            } else {
                report::print_cost(&out);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics(args) => {
            let rep = report::metrics(&args)?;
            if args.json {
                print_json(&rep)?;
            } else {
                report::print_metrics(&rep);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Selfcheck(args) => {
            let results = selfcheck::run(&args);
            if args.json {
                print_json(&results)?;
            } else {
                for r in &results {
                    let tag = if r.passed { "PASS" } else { "FAIL" };
                    println!("{tag} {}: {} ({:.0} ms)", r.suite, r.detail, r.millis);
                }
            }
            Ok(if results.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
