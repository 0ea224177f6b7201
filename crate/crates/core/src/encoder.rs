//! Multimodal encoder: text-to-video cross-attention followed by clip
//! self-attention, plus the saliency head and its three losses.

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;
use rand::Rng;

use crate::nn::{
    attend, key_bias, linear, logsumexp_last, merge_heads, sinusoidal_pe, softplus, split_heads,
    FeedForward, ForwardCtx, Scope,
};
use crate::sample::Batch;
use crate::{Error, Result};

/// Multi-head attention sub-layer followed by a residual feed-forward network.
#[derive(Clone)]
pub struct AttentionBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ffn: FeedForward,
    heads: usize,
    dim: usize,
}

impl AttentionBlock {
    pub fn new(dim: usize, heads: usize, scope: &Scope) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: linear(dim, dim, &scope.pp("q"))?,
            k: linear(dim, dim, &scope.pp("k"))?,
            v: linear(dim, dim, &scope.pp("v"))?,
            out: linear(dim, dim, &scope.pp("out"))?,
            ffn: FeedForward::new(dim, &scope.pp("ffn"))?,
            heads,
            dim,
        })
    }

    /// Attention output before the residual connection.
    pub fn attention(
        &self,
        query_src: &Tensor,
        key_src: &Tensor,
        value_src: &Tensor,
        key_mask: &Tensor,
    ) -> Result<Tensor> {
        let q = split_heads(&self.q.forward(query_src)?, self.heads)?;
        let k = split_heads(&self.k.forward(key_src)?, self.heads)?;
        let v = split_heads(&self.v.forward(value_src)?, self.heads)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let bias = key_bias(key_mask)?;
        let o = attend(&q, &k, &v, Some(&bias), scale)?;
        Ok(self.out.forward(&merge_heads(&o)?)?)
    }

    /// `x' = attn + residual; x'' = FFN(x') + x'`.
    pub fn forward(
        &self,
        query_src: &Tensor,
        key_src: &Tensor,
        value_src: &Tensor,
        residual: &Tensor,
        key_mask: &Tensor,
        ctx: &ForwardCtx,
    ) -> Result<Tensor> {
        let a = ctx.dropout(&self.attention(query_src, key_src, value_src, key_mask)?)?;
        let x = (a + residual)?;
        let f = ctx.dropout(&self.ffn.forward(&x, ctx)?)?;
        Ok((f + x)?)
    }
}

/// Clips attend to words; residual on the clips.
pub fn cross_attention_block(
    block: &AttentionBlock,
    video: &Tensor,
    text: &Tensor,
    text_mask: &Tensor,
    ctx: &ForwardCtx,
) -> Result<Tensor> {
    block.forward(video, text, text, video, text_mask, ctx)
}

/// Clips attend to clips; the positional encoding is added to queries and keys only.
pub fn self_attention_block(
    block: &AttentionBlock,
    video: &Tensor,
    positional_enc: &Tensor,
    video_mask: &Tensor,
    ctx: &ForwardCtx,
) -> Result<Tensor> {
    let qk = (video + positional_enc)?;
    block.forward(&qk, &qk, video, video, video_mask, ctx)
}

/// Encoded clip features that the decoder attends to.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    /// `(B, L, D)`
    pub memory: Tensor,
    /// `(B, L)` normalized clip times.
    pub clip_positions: Tensor,
    /// `(B, L, D)`
    pub positional_enc: Tensor,
    /// `(B, L)`
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

#[derive(Clone)]
pub struct Encoder {
    video_proj: Linear,
    text_proj: Linear,
    cross: Vec<AttentionBlock>,
    selfs: Vec<AttentionBlock>,
    saliency: Linear,
    video_dim: usize,
    text_dim: usize,
    dim: usize,
}

impl Encoder {
    pub fn new(
        video_dim: usize,
        text_dim: usize,
        dim: usize,
        heads: usize,
        layers: usize,
        scope: &Scope,
    ) -> Result<Self> {
        let cross = (0..layers)
            .map(|i| AttentionBlock::new(dim, heads, &scope.pp(&format!("cross.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let selfs = (0..layers)
            .map(|i| AttentionBlock::new(dim, heads, &scope.pp(&format!("self.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            video_proj: linear(video_dim, dim, &scope.pp("video_proj"))?,
            text_proj: linear(text_dim, dim, &scope.pp("text_proj"))?,
            cross,
            selfs,
            saliency: linear(dim, 1, &scope.pp("saliency"))?,
            video_dim,
            text_dim,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Affine maps of both modalities into the shared `D`-wide space.
    pub fn project_unimodal(&self, video: &Tensor, text: &Tensor) -> Result<(Tensor, Tensor)> {
        let dv = video.dim(D::Minus1)?;
        if dv != self.video_dim {
            return Err(Error::DimMismatch {
                what: "video feature width".into(),
                expected: self.video_dim,
                got: dv,
            });
        }
        let dt = text.dim(D::Minus1)?;
        if dt != self.text_dim {
            return Err(Error::DimMismatch {
                what: "text feature width".into(),
                expected: self.text_dim,
                got: dt,
            });
        }
        Ok((self.video_proj.forward(video)?, self.text_proj.forward(text)?))
    }

    /// Raw encoder pass on already padded tensors; returns `(memory, positional_enc)`.
    pub fn encode_tensors(
        &self,
        video: &Tensor,
        video_mask: &Tensor,
        text: &Tensor,
        text_mask: &Tensor,
        clip_positions: &Tensor,
        ctx: &ForwardCtx,
    ) -> Result<(Tensor, Tensor)> {
        let (mut v, t) = self.project_unimodal(video, text)?;
        for block in &self.cross {
            v = cross_attention_block(block, &v, &t, text_mask, ctx)?;
        }
        let pe = sinusoidal_pe(clip_positions, self.dim)?;
        for block in &self.selfs {
            v = self_attention_block(block, &v, &pe, video_mask, ctx)?;
        }
        Ok((v, pe))
    }

    pub fn encode(&self, batch: &Batch, ctx: &ForwardCtx) -> Result<MemoryBank> {
        let (memory, positional_enc) = self.encode_tensors(
            &batch.video,
            &batch.video_mask,
            &batch.text,
            &batch.text_mask,
            &batch.clip_positions,
            ctx,
        )?;
        Ok(MemoryBank {
            memory,
            clip_positions: batch.clip_positions.clone(),
            positional_enc,
            mask: batch.video_mask.clone(),
            lengths: batch.lengths.clone(),
        })
    }

    /// Encodes the batch against its own sentences and, in one pass, against the
    /// rotated sentences used as negatives. Returns `(positive, negative_memory)`.
    pub fn encode_with_negatives(
        &self,
        batch: &Batch,
        ctx: &ForwardCtx,
    ) -> Result<(MemoryBank, Tensor)> {
        let b = batch.size();
        let (neg_text, neg_mask) = batch.rotated_text()?;
        let video = Tensor::cat(&[&batch.video, &batch.video], 0)?;
        let video_mask = Tensor::cat(&[&batch.video_mask, &batch.video_mask], 0)?;
        let text = Tensor::cat(&[&batch.text, &neg_text], 0)?;
        let text_mask = Tensor::cat(&[&batch.text_mask, &neg_mask], 0)?;
        let positions = Tensor::cat(&[&batch.clip_positions, &batch.clip_positions], 0)?;
        let (memory, pe) =
            self.encode_tensors(&video, &video_mask, &text, &text_mask, &positions, ctx)?;
        let bank = MemoryBank {
            memory: memory.narrow(0, 0, b)?,
            clip_positions: batch.clip_positions.clone(),
            positional_enc: pe.narrow(0, 0, b)?,
            mask: batch.video_mask.clone(),
            lengths: batch.lengths.clone(),
        };
        Ok((bank, memory.narrow(0, b, b)?))
    }

    /// Unbounded per-clip saliency scores, `(B, L)`.
    pub fn saliency_scores(&self, memory: &Tensor) -> Result<Tensor> {
        Ok(self.saliency.forward(memory)?.squeeze(D::Minus1)?)
    }
}

/// Clip indices `(low, high)` for the margin loss of one sample.
///
/// With labels: the first lowest-labelled clip against the first
/// highest-labelled clip. Without: a random clip outside every ground truth
/// against a random clip inside one. `None` when no such pair exists.
pub fn sample_margin_pair(
    clip_positions: &[f64],
    gt: &[crate::intervals::MomentSpan],
    labels: Option<&[f64]>,
    rng: &mut impl Rng,
) -> Option<(usize, usize)> {
    match labels {
        Some(labels) => {
            let mut lo = 0;
            let mut hi = 0;
            for (i, &l) in labels.iter().enumerate() {
                if l < labels[lo] {
                    lo = i;
                }
                if l > labels[hi] {
                    hi = i;
                }
            }
            (labels[lo] < labels[hi]).then_some((lo, hi))
        }
        None => {
            let (inside, outside): (Vec<usize>, Vec<usize>) = (0..clip_positions.len())
                .partition(|&i| gt.iter().any(|g| g.contains(clip_positions[i])));
            if inside.is_empty() || outside.is_empty() {
                return None;
            }
            let low = outside[rng.random_range(0..outside.len())];
            let high = inside[rng.random_range(0..inside.len())];
            Some((low, high))
        }
    }
}

/// Per-sample hinge `max(0, margin + S(low) - S(high))`; samples without a pair
/// contribute 0. `scores` is `(B, L)`; returns `(B,)`.
pub fn margin_saliency_loss(
    scores: &Tensor,
    pairs: &[Option<(usize, usize)>],
    margin: f64,
) -> Result<Tensor> {
    let (b, l) = scores.dims2()?;
    let mut low = Vec::with_capacity(b);
    let mut high = Vec::with_capacity(b);
    let mut valid = Vec::with_capacity(b);
    for (i, p) in pairs.iter().enumerate() {
        let (lo, hi) = p.unwrap_or((0, 0));
        low.push((i * l + lo) as u32);
        high.push((i * l + hi) as u32);
        valid.push(if p.is_some() { 1f64 } else { 0.0 });
    }
    let dev = scores.device();
    let flat = scores.flatten_all()?;
    let s_low = flat.index_select(&Tensor::new(low, dev)?, 0)?;
    let s_high = flat.index_select(&Tensor::new(high, dev)?, 0)?;
    let valid = Tensor::new(valid, dev)?.to_dtype(scores.dtype())?;
    Ok(((s_low - s_high)?.affine(1.0, margin)?.relu()? * valid)?)
}

/// Rank-aware contrastive loss per sample, `(B,)`.
///
/// For every reference label `r` among the clips inside the ground truths,
/// clips labelled strictly above `r` are positives and every real clip is in
/// the denominator. References with no positives are skipped; samples without
/// labels get 0. Also returns how many samples had no usable reference.
pub fn rank_contrastive_loss(
    scores: &Tensor,
    batch: &Batch,
    temperature: f64,
) -> Result<(Tensor, usize)> {
    let (b, l) = scores.dims2()?;
    let positions = batch.clip_positions.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
    let mut rows = Vec::new();
    let mut pos_mask = Vec::new();
    let mut all_mask = Vec::new();
    let mut owner = Vec::new();
    let mut skipped = 0;
    for i in 0..b {
        let Some(labels) = &batch.saliency[i] else {
            skipped += 1;
            continue;
        };
        let n = batch.lengths[i];
        let mut refs: Vec<f64> = (0..n)
            .filter(|&c| batch.gt_spans[i].iter().any(|g| g.contains(positions[i][c])))
            .map(|c| labels[c])
            .filter(|&r| r > 0.0)
            .collect();
        refs.sort_by(f64::total_cmp);
        refs.dedup();
        let before = rows.len();
        for r in refs {
            if !labels.iter().any(|&x| x > r) {
                continue;
            }
            rows.push(i as u32);
            owner.push(i);
            for c in 0..l {
                let real = c < n;
                pos_mask.push(if real && labels[c] > r { 1f64 } else { 0.0 });
                all_mask.push(if real { 1f64 } else { 0.0 });
            }
        }
        if rows.len() == before {
            skipped += 1;
        }
    }
    let dev = scores.device();
    let dt = scores.dtype();
    if rows.is_empty() {
        return Ok((Tensor::zeros(b, dt, dev)?, skipped));
    }
    let t = rows.len();
    let s = (scores.index_select(&Tensor::new(rows, dev)?, 0)? / temperature)?;
    let pos = Tensor::from_vec(pos_mask, (t, l), dev)?.to_dtype(dt)?;
    let all = Tensor::from_vec(all_mask, (t, l), dev)?.to_dtype(dt)?;
    let masked = |m: &Tensor| -> Result<Tensor> {
        logsumexp_last(&(&s + m.affine(1e9, -1e9)?)?)
    };
    let per_term = (masked(&all)? - masked(&pos)?)?; // (T,)
    let mut assign = vec![0f64; b * t];
    for (j, &i) in owner.iter().enumerate() {
        assign[i * t + j] = 1.0;
    }
    let assign = Tensor::from_vec(assign, (b, t), dev)?.to_dtype(dt)?;
    let out = assign.matmul(&per_term.unsqueeze(1)?)?.squeeze(1)?;
    Ok((out, skipped))
}

/// `-sum log(1 - sigmoid(S(v)))` over the real clips of each negatively paired
/// memory, `(B,)`. Evaluated as a softplus for stability.
pub fn negative_relation_loss(neg_scores: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok((softplus(neg_scores)? * mask)?.sum(D::Minus1)?)
}
