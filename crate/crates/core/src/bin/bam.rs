use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use bam_core::harness::io::write_predictions;
use bam_core::harness::{
    analyze, evaluate, generate_synthetic, load_checkpoint, load_dataset_dir, train, write_dataset, Analysis,
    AnalysisReport, Config, SynthConfig, TrainOptions,
};

#[derive(Parser)]
#[command(name = "bam", about = "Boundary-aligned moment detection: synth, train, eval, analyze")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write its predictions.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Diagnostics over a prediction file.
    Analyze {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        which: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Synth { out, n, seed } => {
            let data = generate_synthetic(&SynthConfig { n_samples: n, seed, ..SynthConfig::default() })?;
            write_dataset(&out, &data).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Cmd::Train { config, data, out, resume } => {
            let cfg = Config::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let dataset = load_dataset_dir(&data, cfg.max_clips)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            let opts = TrainOptions { out_dir: Some(out.clone()), resume, quiet: false };
            let result = train(&cfg, &dataset, &opts)?;
            println!("{} steps; {}", result.steps, result.final_report);
        }
        Cmd::Eval { ckpt, data, out, batch_size } => {
            let (model, manifest) = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let dataset = load_dataset_dir(&data, manifest.config.max_clips)?;
            let (report, preds) = evaluate(&model, &dataset, batch_size)?;
            write_predictions(&out, &preds)?;
            println!("{}", serde_json::to_string_pretty(&report.to_json())?);
        }
        Cmd::Analyze { preds, which, out } => {
            let which: Analysis = which.parse()?;
            match analyze(&preds, which, &out)? {
                AnalysisReport::Skipped(reason) => println!("{which}: skipped ({reason})"),
                AnalysisReport::Table { header, rows } => {
                    println!("{}", header.join("\t"));
                    for r in rows {
                        let cells: Vec<String> = r.iter().map(|v| format!("{v:.4}")).collect();
                        println!("{}", cells.join("\t"));
                    }
                }
            }
        }
    }
    Ok(())
}
