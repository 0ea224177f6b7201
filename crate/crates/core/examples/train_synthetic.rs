//! Trains a small model on planted synthetic moments and evaluates it on the
//! same samples. Pass a step count to train longer (default 200).

use bam_core::harness::{evaluate, generate_synthetic, train, Config, SynthConfig, TrainOptions};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let steps = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let data = generate_synthetic(&SynthConfig::default())?;
    let config = Config {
        dim: 64,
        lr: 1e-3,
        lr_schedule: "cosine".into(),
        weight_decay: 0.0,
        dropout: 0.0,
        batch_size: 8,
        epochs: 100_000,
        max_steps: steps,
        eval_every: 25,
        ..Config::default()
    };
    let outcome = train(&config, &data, &TrainOptions::default())?;
    let (report, _) = evaluate(&outcome.model, &data, 16)?;
    println!("after {} steps: {report}", outcome.steps);
    Ok(())
}
