//! One untrained forward pass: encoder memory, decoder refinement per layer,
//! and proposals ranked by predicted quality.

use bam_core::harness::{generate_synthetic, SynthConfig};
use bam_core::nn::ForwardCtx;
use bam_core::{Batch, BamDetr, ModelConfig};
use candle_core::{DType, Device};

fn main() -> anyhow::Result<()> {
    let data = generate_synthetic(&SynthConfig { n_samples: 2, ..SynthConfig::default() })?;
    let cfg = ModelConfig {
        video_dim: data.video_dim(),
        text_dim: data.text_dim(),
        dim: 64,
        heads: 4,
        num_queries: 5,
        points: 3,
        enc_layers: 2,
        dec_layers: 2,
    };
    let model = BamDetr::new(cfg, 0, DType::F32)?;
    println!("{} parameters", model.store().num_parameters());

    let samples: Vec<_> = data.samples.iter().collect();
    let batch = Batch::collate(&samples, DType::F32, &Device::Cpu)?;
    let out = model.forward(&batch, &ForwardCtx::eval(), false)?;
    println!("memory {:?}, saliency {:?}", out.memory.memory.dims(), out.saliency.dims());
    for (l, state) in std::iter::once(&out.decoded.initial).chain(&out.decoded.layers).enumerate() {
        let t = state.triplet_values()?;
        let [p, ds, de] = t[0][0];
        println!("layer {l}: query 0 of sample 0 = (anchor {p:.3}, to start {ds:.3}, to end {de:.3})");
    }
    for pred in model.predictions(&out, &batch)? {
        let (best, q) = pred.ranked[0];
        println!("{}: top proposal [{:.3}, {:.3}] quality {q:.3}", pred.qid, best.start, best.end);
    }
    Ok(())
}
