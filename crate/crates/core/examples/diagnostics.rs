//! Writes a prediction file from a briefly trained model, then runs every
//! analysis from that file alone.

use bam_core::harness::analyze::{load_records, run_analysis};
use bam_core::harness::io::write_predictions;
use bam_core::harness::{
    evaluate, generate_synthetic, train, Analysis, AnalysisReport, Config, SynthConfig, TrainOptions,
};

fn show(report: &AnalysisReport) {
    match report {
        AnalysisReport::Table { header, rows } => {
            println!("{}", header.join("\t"));
            for row in rows {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
                println!("{}", cells.join("\t"));
            }
        }
        AnalysisReport::Skipped(why) => println!("skipped: {why}"),
    }
}

fn main() -> anyhow::Result<()> {
    let data = generate_synthetic(&SynthConfig { n_samples: 8, ..SynthConfig::default() })?;
    let config = Config { dim: 32, heads: 4, lr: 1e-3, dropout: 0.0, batch_size: 4, max_steps: 20, ..Config::default() };
    let outcome = train(&config, &data, &TrainOptions { quiet: true, ..TrainOptions::default() })?;
    let (_, preds) = evaluate(&outcome.model, &data, 8)?;

    let dir = std::env::temp_dir().join("bam-diagnostics");
    std::fs::create_dir_all(&dir)?;
    let file = dir.join("predictions.jsonl");
    write_predictions(&file, &preds)?;
    let records = load_records(&file)?;
    for which in [Analysis::HitRate, Analysis::CenterBins, Analysis::Offsets, Analysis::Correlation] {
        let (report, extra) = run_analysis(&records, which)?;
        println!("== {which}");
        show(&report);
        if let Some(extra) = extra {
            show(&extra);
        }
    }
    Ok(())
}
