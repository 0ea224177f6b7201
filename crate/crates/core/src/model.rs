//! The assembled detector: encoder, dual-pathway decoder and quality head.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoded, Decoder, DecoderState, LocalityMemory};
use crate::encoder::{Encoder, MemoryBank};
use crate::intervals::MomentSpan;
use crate::nn::{ForwardCtx, ParamStore};
use crate::objective::{rank_order, QualityHead};
use crate::sample::Batch;
use crate::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub video_dim: usize,
    pub text_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub num_queries: usize,
    pub points: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("video_dim", self.video_dim),
            ("text_dim", self.text_dim),
            ("dim", self.dim),
            ("heads", self.heads),
            ("num_queries", self.num_queries),
            ("points", self.points),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if (self.dim / self.heads) % 2 != 0 {
            return Err(Error::Config("per-head width must be even".into()));
        }
        Ok(())
    }
}

/// Everything a forward pass produces that the objective or the evaluator needs.
pub struct ModelOutput {
    pub memory: MemoryBank,
    /// `(B, L)` saliency scores under the paired sentences.
    pub saliency: Tensor,
    /// `(B, L)` saliency scores under the rotated (negative) sentences.
    pub neg_saliency: Option<Tensor>,
    pub locality: LocalityMemory,
    pub decoded: Decoded,
    /// Quality scores `(B, M)` of every decoder layer (the initial state when
    /// there are no layers).
    pub quality: Vec<Tensor>,
}

impl ModelOutput {
    fn scored_states(&self) -> Vec<&DecoderState> {
        if self.decoded.layers.is_empty() {
            vec![&self.decoded.initial]
        } else {
            self.decoded.layers.iter().collect()
        }
    }

    pub fn supervised_states(&self, deep: bool) -> Vec<&DecoderState> {
        let all = self.scored_states();
        if deep {
            all
        } else {
            all[all.len() - 1..].to_vec()
        }
    }

    pub fn supervised_quality(&self, deep: bool) -> &[Tensor] {
        if deep {
            &self.quality
        } else {
            &self.quality[self.quality.len() - 1..]
        }
    }

    pub fn final_quality(&self) -> &Tensor {
        self.quality.last().expect("at least one scored state")
    }
}

/// Ranked output for one sample. Spans are clamped and normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub qid: String,
    pub duration: f64,
    /// `(span, quality score)`, best first.
    pub ranked: Vec<(MomentSpan, f64)>,
    /// Anchor of each ranked proposal.
    pub anchors: Vec<f64>,
    /// Final-layer raw sampling offsets of every query, start side then end side.
    pub offsets: Vec<f64>,
}

pub struct BamDetr {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    quality: QualityHead,
}

impl BamDetr {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let c = &config;
        let encoder =
            Encoder::new(c.video_dim, c.text_dim, c.dim, c.heads, c.enc_layers, &root.pp("encoder"))?;
        let decoder = Decoder::new(
            c.dim,
            c.heads,
            c.num_queries,
            c.points,
            c.dec_layers,
            &root.pp("decoder"),
        )?;
        let quality = QualityHead::new(c.dim, &root.pp("quality"))?;
        Ok(Self { config, store, encoder, decoder, quality })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn quality_head(&self) -> &QualityHead {
        &self.quality
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let vd = batch.video.dim(2)?;
        if vd != self.config.video_dim {
            return Err(Error::DimMismatch { what: "video feature width".into(), expected: self.config.video_dim, got: vd });
        }
        let td = batch.text.dim(2)?;
        if td != self.config.text_dim {
            return Err(Error::DimMismatch { what: "text feature width".into(), expected: self.config.text_dim, got: td });
        }
        if batch.dtype() != self.store.dtype() {
            return Err(Error::Config(format!("batch dtype {:?} differs from model {:?}", batch.dtype(), self.store.dtype())));
        }
        Ok(())
    }

    /// Full forward pass. Negative sentences are encoded too when requested
    /// and the batch has at least two samples.
    pub fn forward(&self, batch: &Batch, ctx: &ForwardCtx, with_negatives: bool) -> Result<ModelOutput> {
        self.forward_from(batch, ctx, with_negatives, None)
    }

    /// As [`forward`](Self::forward) but with the decoder's initial
    /// `(p, d_s, d_e)` replaced by `initial_spans` (`(B, M, 3)`).
    pub fn forward_from(
        &self,
        batch: &Batch,
        ctx: &ForwardCtx,
        with_negatives: bool,
        initial_spans: Option<&Tensor>,
    ) -> Result<ModelOutput> {
        self.check_batch(batch)?;
        let (memory, neg_memory) = if with_negatives && batch.size() >= 2 {
            let (m, n) = self.encoder.encode_with_negatives(batch, ctx)?;
            (m, Some(n))
        } else {
            (self.encoder.encode(batch, ctx)?, None)
        };
        let saliency = self.encoder.saliency_scores(&memory.memory)?;
        let neg_saliency = neg_memory.map(|n| self.encoder.saliency_scores(&n)).transpose()?;
        let locality = self.decoder.build_locality_memory(&memory)?;
        let decoded = self.decoder.decode_from(&memory, &locality, initial_spans, ctx)?;
        let states: Vec<&DecoderState> =
            if decoded.layers.is_empty() { vec![&decoded.initial] } else { decoded.layers.iter().collect() };
        let quality = states.iter().map(|s| self.quality.quality_scores(s)).collect::<Result<Vec<_>>>()?;
        Ok(ModelOutput { memory, saliency, neg_saliency, locality, decoded, quality })
    }

    /// Quality scores `(B, M)` of externally supplied proposals `(B, M, 3)`,
    /// decoded with their spans held fixed.
    pub fn score_spans(&self, batch: &Batch, spans: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let ctx = ForwardCtx::eval();
        let memory = self.encoder.encode(batch, &ctx)?;
        let locality = self.decoder.build_locality_memory(&memory)?;
        let decoded = self.decoder.decode_pinned(&memory, &locality, spans, &ctx)?;
        self.quality.quality_scores(decoded.final_state())
    }

    /// Ranked, clamped proposals from a forward output.
    pub fn predictions(&self, out: &ModelOutput, batch: &Batch) -> Result<Vec<Prediction>> {
        let state = out.decoded.final_state();
        let spans = state.export_spans()?;
        let triplets = state.triplet_values()?;
        let q = out.final_quality().to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let offsets = |o: &Option<Tensor>| -> Result<Vec<Vec<f64>>> {
            match o {
                Some(t) => Ok(t.to_dtype(DType::F64)?.flatten_from(1)?.to_vec2::<f64>()?),
                None => Ok(vec![Vec::new(); batch.size()]),
            }
        };
        let so = offsets(&state.start_offsets)?;
        let eo = offsets(&state.end_offsets)?;
        Ok((0..batch.size())
            .map(|i| {
                let order = rank_order(&q[i]);
                Prediction {
                    qid: batch.qids[i].clone(),
                    duration: batch.durations[i],
                    ranked: order.iter().map(|&j| (spans[i][j], q[i][j])).collect(),
                    anchors: order.iter().map(|&j| triplets[i][j][0]).collect(),
                    offsets: so[i].iter().chain(&eo[i]).copied().collect(),
                }
            })
            .collect())
    }

    /// Evaluation-mode forward and ranking.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Prediction>> {
        let out = self.forward(batch, &ForwardCtx::eval(), false)?;
        self.predictions(&out, batch)
    }
}
