//! Dual-pathway decoder.
//!
//! Every layer first moves the anchor `p` (self-attention among anchor queries,
//! global cross-attention to the memory, FFN, sigmoid refinement) and then
//! moves each boundary distance by sampling a few points of a
//! locality-enhanced memory around the current boundary. The start and end
//! sides use separate parameters throughout.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::Linear;

use crate::encoder::MemoryBank;
use crate::intervals::MomentSpan;
use crate::nn::{
    attend, inverse_sigmoid, key_bias, linear, linear_const, merge_heads, sigmoid, sinusoidal_pe,
    softmax_last, split_heads, ConvStack, FeedForward, ForwardCtx, Init, Mlp, Scope,
};
use crate::{Error, Result};

/// Clipping used before every inverse sigmoid.
pub const REFINE_EPS: f64 = 1e-6;
const CONV_DEPTH: usize = 2;
/// Half-spread of the initial sampling offsets, in normalized time.
const INITIAL_OFFSET_SPREAD: f64 = 0.02;
const INITIAL_DISTANCE: f64 = 0.05;

/// Memory concatenated with boundary-sensitive features, plus the clip-wise
/// boundary activations that the regularization loss supervises.
#[derive(Debug, Clone)]
pub struct LocalityMemory {
    /// `(B, L, 2D)`
    pub start_enhanced: Tensor,
    pub end_enhanced: Tensor,
    /// `(B, L)` in `(0, 1)`
    pub start_activation: Tensor,
    pub end_activation: Tensor,
}

/// Binary clip labels marking the neighbourhood of ground-truth boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLabels {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl BoundaryLabels {
    /// A clip is a start (end) clip when it lies within a tenth of the moment
    /// length of that moment's start (end), ties included, for any moment.
    pub fn new(gt: &[MomentSpan], clip_positions: &[f64]) -> Self {
        let mark = |edge: fn(&MomentSpan) -> f64| {
            clip_positions
                .iter()
                .map(|&t| {
                    let hit = gt.iter().any(|g| (t - edge(g)).abs() <= 0.1 * g.length());
                    if hit {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        Self { start: mark(|g| g.start), end: mark(|g| g.end) }
    }
}

/// Queries and predictions after one decoding layer (or the learnable initial state).
#[derive(Debug, Clone)]
pub struct DecoderState {
    /// `(B, M, D)`
    pub anchor_queries: Tensor,
    pub start_queries: Tensor,
    pub end_queries: Tensor,
    /// `(B, M)` in `(0, 1)`
    pub anchors: Tensor,
    pub to_start: Tensor,
    pub to_end: Tensor,
    /// Raw sampling offsets `(B, M, K)`; absent for the initial state.
    pub start_offsets: Option<Tensor>,
    pub end_offsets: Option<Tensor>,
}

impl DecoderState {
    /// Unclamped `(p - d_s, p + d_e)`, each `(B, M)`.
    pub fn span_tensors(&self) -> Result<(Tensor, Tensor)> {
        Ok(((&self.anchors - &self.to_start)?, (&self.anchors + &self.to_end)?))
    }

    /// `(B, M, 3)` stack of `(p, d_s, d_e)`.
    pub fn triplets(&self) -> Result<Tensor> {
        Ok(Tensor::stack(&[&self.anchors, &self.to_start, &self.to_end], D::Minus1)?)
    }

    /// Per-sample, per-query triplet values.
    pub fn triplet_values(&self) -> Result<Vec<Vec<[f64; 3]>>> {
        let t = self.triplets()?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        Ok(t.into_iter().map(|rows| rows.into_iter().map(|r| [r[0], r[1], r[2]]).collect()).collect())
    }

    /// Spans clamped into `[0, 1]`, per sample.
    pub fn export_spans(&self) -> Result<Vec<Vec<MomentSpan>>> {
        Ok(self
            .triplet_values()?
            .into_iter()
            .map(|rows| {
                rows.into_iter()
                    .map(|[p, ds, de]| MomentSpan::clamped(p - ds, p + de, p))
                    .collect()
            })
            .collect())
    }
}

/// Output of [`Decoder::decode`].
#[derive(Debug, Clone)]
pub struct Decoded {
    pub initial: DecoderState,
    pub layers: Vec<DecoderState>,
}

impl Decoded {
    pub fn final_state(&self) -> &DecoderState {
        self.layers.last().unwrap_or(&self.initial)
    }
}

#[derive(Clone)]
struct AnchorPath {
    pos_mlp: Mlp,
    sa_q: Linear,
    sa_k: Linear,
    sa_v: Linear,
    sa_out: Linear,
    ca_q: Linear,
    ca_k: Linear,
    ca_v: Linear,
    ca_out: Linear,
    ffn: FeedForward,
    delta: Mlp,
}

#[derive(Clone)]
struct BoundaryPath {
    offsets: Linear,
    weights: Linear,
    proj: Linear,
    ffn: FeedForward,
    delta: Mlp,
}

#[derive(Clone)]
pub struct DecoderLayer {
    anchor: AnchorPath,
    start: BoundaryPath,
    end: BoundaryPath,
    heads: usize,
    dim: usize,
}

fn initial_offsets(points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![0.0];
    }
    (0..points)
        .map(|k| -INITIAL_OFFSET_SPREAD + 2.0 * INITIAL_OFFSET_SPREAD * k as f64 / (points - 1) as f64)
        .collect()
}

impl BoundaryPath {
    fn new(dim: usize, points: usize, scope: &Scope) -> Result<Self> {
        Ok(Self {
            offsets: linear_const(dim, points, &initial_offsets(points), &scope.pp("offsets"))?,
            weights: linear_const(dim, points, &vec![0.0; points], &scope.pp("weights"))?,
            proj: linear(2 * dim, dim, &scope.pp("proj"))?,
            ffn: FeedForward::new(dim, &scope.pp("ffn"))?,
            delta: Mlp::zero_last(&[dim, dim, 1], &scope.pp("delta"))?,
        })
    }
}

impl DecoderLayer {
    pub fn new(dim: usize, heads: usize, points: usize, scope: &Scope) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let a = scope.pp("anchor");
        let anchor = AnchorPath {
            pos_mlp: Mlp::new(&[3 * dim, dim, dim], &a.pp("pos_mlp"))?,
            sa_q: linear(dim, dim, &a.pp("self_q"))?,
            sa_k: linear(dim, dim, &a.pp("self_k"))?,
            sa_v: linear(dim, dim, &a.pp("self_v"))?,
            sa_out: linear(dim, dim, &a.pp("self_out"))?,
            ca_q: linear(dim, dim, &a.pp("cross_q"))?,
            ca_k: linear(dim, dim, &a.pp("cross_k"))?,
            ca_v: linear(dim, dim, &a.pp("cross_v"))?,
            ca_out: linear(dim, dim, &a.pp("cross_out"))?,
            ffn: FeedForward::new(dim, &a.pp("ffn"))?,
            delta: Mlp::zero_last(&[dim, dim, 1], &a.pp("delta"))?,
        };
        Ok(Self {
            anchor,
            start: BoundaryPath::new(dim, points, &scope.pp("start"))?,
            end: BoundaryPath::new(dim, points, &scope.pp("end"))?,
            heads,
            dim,
        })
    }

    /// Self-attention among anchor queries; queries and keys carry `MLP(PE(A))`
    /// added after projection. `spans` is `(B, M, 3)`.
    pub fn anchor_self_attention(
        &self,
        queries: &Tensor,
        spans: &Tensor,
        ctx: &ForwardCtx,
    ) -> Result<Tensor> {
        let a = &self.anchor;
        let (b, m, _) = spans.dims3()?;
        let pe = sinusoidal_pe(spans, self.dim)?.reshape((b, m, 3 * self.dim))?;
        let pos = a.pos_mlp.forward(&pe)?;
        let q = split_heads(&(a.sa_q.forward(queries)? + &pos)?, self.heads)?;
        let k = split_heads(&(a.sa_k.forward(queries)? + &pos)?, self.heads)?;
        let v = split_heads(&a.sa_v.forward(queries)?, self.heads)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let o = a.sa_out.forward(&merge_heads(&attend(&q, &k, &v, None, scale)?)?)?;
        Ok((ctx.dropout(&o)? + queries)?)
    }

    /// Global cross-attention from anchor queries to the memory. Content and
    /// positional parts are concatenated (per head) rather than summed, so the
    /// logits are scaled by `1/sqrt(2 d_head)`. `anchors` is `(B, M)`.
    pub fn anchor_cross_attention(
        &self,
        queries: &Tensor,
        anchors: &Tensor,
        memory: &MemoryBank,
        ctx: &ForwardCtx,
    ) -> Result<Tensor> {
        let a = &self.anchor;
        let h = self.heads;
        let qc = split_heads(&a.ca_q.forward(queries)?, h)?;
        let qp = split_heads(&sinusoidal_pe(anchors, self.dim)?, h)?;
        let q = Tensor::cat(&[&qc, &qp], D::Minus1)?;
        let kc = split_heads(&a.ca_k.forward(&memory.memory)?, h)?;
        let kp = split_heads(&memory.positional_enc, h)?;
        let k = Tensor::cat(&[&kc, &kp], D::Minus1)?;
        let v = split_heads(&a.ca_v.forward(&memory.memory)?, h)?;
        let scale = 1.0 / ((2 * self.dim / h) as f64).sqrt();
        let bias = key_bias(&memory.mask)?;
        let o = a.ca_out.forward(&merge_heads(&attend(&q, &k, &v, Some(&bias), scale)?)?)?;
        Ok((ctx.dropout(&o)? + queries)?)
    }

    fn boundary_path(&self, start: bool) -> &BoundaryPath {
        if start {
            &self.start
        } else {
            &self.end
        }
    }

    /// Deformable sampling of `K` points around `origin` (`(B, M)`, normalized
    /// time) from the enhanced memory. Returns the updated queries (before the
    /// FFN) and the raw offsets `(B, M, K)`.
    pub fn boundary_focused_attention(
        &self,
        start: bool,
        queries: &Tensor,
        origin: &Tensor,
        enhanced: &Tensor,
        lengths: &[usize],
    ) -> Result<(Tensor, Tensor)> {
        let path = self.boundary_path(start);
        let offsets = path.offsets.forward(queries)?;
        let weights = softmax_last(&path.weights.forward(queries)?)?;
        let positions = origin.unsqueeze(D::Minus1)?.broadcast_add(&offsets)?;
        let sampled = sample_memory_batched(enhanced, &positions, lengths)?; // (B, M, K, 2D)
        let pooled = sampled.broadcast_mul(&weights.unsqueeze(D::Minus1)?)?.sum(2)?;
        // The weights sum to one, so projecting the pooled sample equals pooling
        // the projected samples.
        let out = (path.proj.forward(&pooled)? + queries)?;
        Ok((out, offsets))
    }

    fn forward(
        &self,
        state: &DecoderState,
        memory: &MemoryBank,
        locality: &LocalityMemory,
        ctx: &ForwardCtx,
    ) -> Result<DecoderState> {
        let spans = state.triplets()?;
        let c = self.anchor_self_attention(&state.anchor_queries, &spans, ctx)?;
        let c = self.anchor_cross_attention(&c, &state.anchors, memory, ctx)?;
        let anchor_queries = (ctx.dropout(&self.anchor.ffn.forward(&c, ctx)?)? + c)?;
        let anchors = refine(&self.anchor.delta, &anchor_queries, &state.anchors)?;

        let origin = (&anchors - &state.to_start)?;
        let (c, start_offsets) = self.boundary_focused_attention(
            true,
            &state.start_queries,
            &origin,
            &locality.start_enhanced,
            &memory.lengths,
        )?;
        let start_queries = self.start.ffn.forward(&c, ctx)?;
        let to_start = refine(&self.start.delta, &start_queries, &state.to_start)?;

        let origin = (&anchors + &state.to_end)?;
        let (c, end_offsets) = self.boundary_focused_attention(
            false,
            &state.end_queries,
            &origin,
            &locality.end_enhanced,
            &memory.lengths,
        )?;
        let end_queries = self.end.ffn.forward(&c, ctx)?;
        let to_end = refine(&self.end.delta, &end_queries, &state.to_end)?;

        Ok(DecoderState {
            anchor_queries,
            start_queries,
            end_queries,
            anchors,
            to_start,
            to_end,
            start_offsets: Some(start_offsets),
            end_offsets: Some(end_offsets),
        })
    }
}

/// `sigma(sigma^-1(prev) + delta(queries))`, row-wise. `prev` is `(B, M)`.
pub fn refine(delta: &Mlp, queries: &Tensor, prev: &Tensor) -> Result<Tensor> {
    let d = delta.forward(queries)?.squeeze(D::Minus1)?;
    refine_with_delta(prev, &d)
}

pub fn refine_with_delta(prev: &Tensor, delta: &Tensor) -> Result<Tensor> {
    sigmoid(&(inverse_sigmoid(prev, REFINE_EPS)? + delta)?)
}

/// Linear interpolation of memory rows at normalized `positions` (`(B, M, K)`).
///
/// Position `t` maps to the fractional row `clamp(t, 0, 1) * (N_v - 1)` of its
/// own sample, so values outside `[0, 1]` read the end rows. Differentiable in
/// both the memory and the positions. Returns `(B, M, K, C)`.
pub fn sample_memory_batched(
    enhanced: &Tensor,
    positions: &Tensor,
    lengths: &[usize],
) -> Result<Tensor> {
    let (b, l, ch) = enhanced.dims3()?;
    let (pb, m, k) = positions.dims3()?;
    if pb != b || lengths.len() != b {
        return Err(Error::DimMismatch { what: "sampling batch".into(), expected: b, got: pb });
    }
    let dt = enhanced.dtype();
    let dev = enhanced.device();
    let scale: Vec<f64> = lengths.iter().map(|&n| n.saturating_sub(1) as f64).collect();
    let scale = Tensor::from_vec(scale, (b, 1, 1), dev)?.to_dtype(dt)?;
    let coord = positions.clamp(0.0, 1.0)?.broadcast_mul(&scale)?;
    let values = coord.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut lower = Vec::with_capacity(values.len());
    let mut idx0 = Vec::with_capacity(values.len());
    let mut idx1 = Vec::with_capacity(values.len());
    for (i, &c) in values.iter().enumerate() {
        let bi = i / (m * k);
        let n = lengths[bi];
        let i0 = if n >= 2 { (c.floor() as usize).min(n - 2) } else { 0 };
        let i1 = (i0 + 1).min(n.saturating_sub(1));
        lower.push(i0 as f64);
        idx0.push((bi * l + i0) as u32);
        idx1.push((bi * l + i1) as u32);
    }
    let lower = Tensor::from_vec(lower, (b, m, k), dev)?.to_dtype(dt)?;
    let frac = (coord - lower)?.unsqueeze(D::Minus1)?;
    let flat = enhanced.reshape((b * l, ch))?;
    let r0 = flat.index_select(&Tensor::new(idx0, dev)?, 0)?.reshape((b, m, k, ch))?;
    let r1 = flat.index_select(&Tensor::new(idx1, dev)?, 0)?.reshape((b, m, k, ch))?;
    Ok((&r0 + (r1 - &r0)?.broadcast_mul(&frac)?)?)
}

/// Single-sample convenience: `enhanced` is `(N_v, C)`, returns `(C,)`.
pub fn sample_memory(enhanced: &Tensor, position: f64) -> Result<Tensor> {
    let (n, ch) = enhanced.dims2()?;
    let pos = Tensor::new(&[[[position]]], enhanced.device())?.to_dtype(enhanced.dtype())?;
    let out = sample_memory_batched(&enhanced.unsqueeze(0)?, &pos, &[n])?;
    Ok(out.reshape(ch)?)
}

/// Mean binary cross-entropy of the boundary activations against their labels,
/// over real clips, summed over the start and end sides. Returns `(B,)`.
pub fn boundary_regularization_loss(
    locality: &LocalityMemory,
    labels: &[BoundaryLabels],
    lengths: &[usize],
) -> Result<Tensor> {
    let (b, l) = locality.start_activation.dims2()?;
    let dt = locality.start_activation.dtype();
    let dev = locality.start_activation.device().clone();
    let mut mask = vec![0f64; b * l];
    let mut gs = vec![0f64; b * l];
    let mut ge = vec![0f64; b * l];
    for i in 0..b {
        let n = lengths[i];
        for c in 0..n {
            mask[i * l + c] = 1.0 / n as f64;
            gs[i * l + c] = labels[i].start[c];
            ge[i * l + c] = labels[i].end[c];
        }
    }
    let to_t = |v: Vec<f64>| -> Result<Tensor> { Ok(Tensor::from_vec(v, (b, l), &dev)?.to_dtype(dt)?) };
    let mask = to_t(mask)?;
    let side = |act: &Tensor, g: Tensor| -> Result<Tensor> {
        let a = act.clamp(REFINE_EPS, 1.0 - REFINE_EPS)?;
        let pos = (&g * a.log()?)?;
        let neg = (g.affine(-1.0, 1.0)? * a.affine(-1.0, 1.0)?.log()?)?;
        Ok(((pos + neg)?.neg()? * &mask)?.sum(D::Minus1)?)
    };
    Ok((side(&locality.start_activation, to_t(gs)?)? + side(&locality.end_activation, to_t(ge)?)?)?)
}

#[derive(Clone)]
pub struct Decoder {
    anchor_queries: Tensor,
    start_queries: Tensor,
    end_queries: Tensor,
    /// `(M, 3)` initial `(p, d_s, d_e)` in inverse-sigmoid space.
    initial_logits: Tensor,
    layers: Vec<DecoderLayer>,
    start_conv: ConvStack,
    end_conv: ConvStack,
    num_queries: usize,
    dim: usize,
}

impl Decoder {
    pub fn new(
        dim: usize,
        heads: usize,
        num_queries: usize,
        points: usize,
        layers: usize,
        scope: &Scope,
    ) -> Result<Self> {
        let q = scope.pp("queries");
        let logit = |x: f64| (x / (1.0 - x)).ln();
        let mut init = Vec::with_capacity(num_queries * 3);
        for i in 0..num_queries {
            init.push(logit((i as f64 + 0.5) / num_queries as f64));
            init.push(logit(INITIAL_DISTANCE));
            init.push(logit(INITIAL_DISTANCE));
        }
        Ok(Self {
            anchor_queries: q.param("anchor", &[num_queries, dim], Init::Uniform(1.0))?,
            start_queries: q.param("start", &[num_queries, dim], Init::Uniform(1.0))?,
            end_queries: q.param("end", &[num_queries, dim], Init::Uniform(1.0))?,
            initial_logits: q.param("spans", &[num_queries, 3], Init::Values(init))?,
            layers: (0..layers)
                .map(|i| DecoderLayer::new(dim, heads, points, &scope.pp(&format!("layers.{i}"))))
                .collect::<Result<Vec<_>>>()?,
            start_conv: ConvStack::new(dim, CONV_DEPTH, &scope.pp("start_conv"))?,
            end_conv: ConvStack::new(dim, CONV_DEPTH, &scope.pp("end_conv"))?,
            num_queries,
            dim,
        })
    }

    pub fn layers(&self) -> &[DecoderLayer] {
        &self.layers
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn build_locality_memory(&self, memory: &MemoryBank) -> Result<LocalityMemory> {
        let side = |conv: &ConvStack| -> Result<(Tensor, Tensor)> {
            let feats = conv.forward(&memory.memory, &memory.mask)?;
            let act = sigmoid(&feats)?.mean(D::Minus1)?;
            Ok((Tensor::cat(&[&memory.memory, &feats], D::Minus1)?, act))
        };
        let (start_enhanced, start_activation) = side(&self.start_conv)?;
        let (end_enhanced, end_activation) = side(&self.end_conv)?;
        Ok(LocalityMemory { start_enhanced, end_enhanced, start_activation, end_activation })
    }

    /// The learnable starting point, broadcast over the batch. `spans`
    /// optionally overrides the initial `(p, d_s, d_e)` values (`(B, M, 3)`).
    pub fn initial_state(&self, batch: usize, spans: Option<&Tensor>) -> Result<DecoderState> {
        let shape = (batch, self.num_queries, self.dim);
        // Materialized: candle's matmul backward mis-accumulates weight
        // gradients when the input has a zero batch stride.
        let expand = |t: &Tensor| -> Result<Tensor> { Ok(t.unsqueeze(0)?.broadcast_as(shape)?.contiguous()?) };
        let spans = match spans {
            Some(s) => s.clone(),
            None => sigmoid(&self.initial_logits)?
                .unsqueeze(0)?
                .broadcast_as((batch, self.num_queries, 3))?
                .contiguous()?,
        };
        let part = |i: usize| -> Result<Tensor> { Ok(spans.narrow(2, i, 1)?.squeeze(2)?) };
        Ok(DecoderState {
            anchor_queries: expand(&self.anchor_queries)?,
            start_queries: expand(&self.start_queries)?,
            end_queries: expand(&self.end_queries)?,
            anchors: part(0)?,
            to_start: part(1)?,
            to_end: part(2)?,
            start_offsets: None,
            end_offsets: None,
        })
    }

    pub fn decode(
        &self,
        memory: &MemoryBank,
        locality: &LocalityMemory,
        ctx: &ForwardCtx,
    ) -> Result<Decoded> {
        self.decode_from(memory, locality, None, ctx)
    }

    /// Runs every layer from the initial state (optionally with overridden spans).
    pub fn decode_from(
        &self,
        memory: &MemoryBank,
        locality: &LocalityMemory,
        initial_spans: Option<&Tensor>,
        ctx: &ForwardCtx,
    ) -> Result<Decoded> {
        let b = memory.memory.dim(0)?;
        let initial = self.initial_state(b, initial_spans)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut state = initial.clone();
        for layer in &self.layers {
            state = layer.forward(&state, memory, locality, ctx)?;
            layers.push(state.clone());
        }
        Ok(Decoded { initial, layers })
    }

    /// Runs every layer with the spans held at `spans` (`(B, M, 3)`): queries
    /// are updated as usual but each layer's refinement is discarded, so the
    /// final queries describe exactly the given proposals.
    pub fn decode_pinned(
        &self,
        memory: &MemoryBank,
        locality: &LocalityMemory,
        spans: &Tensor,
        ctx: &ForwardCtx,
    ) -> Result<Decoded> {
        let b = memory.memory.dim(0)?;
        let initial = self.initial_state(b, Some(spans))?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut state = initial.clone();
        for layer in &self.layers {
            let next = layer.forward(&state, memory, locality, ctx)?;
            state = DecoderState {
                anchors: initial.anchors.clone(),
                to_start: initial.to_start.clone(),
                to_end: initial.to_end.clone(),
                ..next
            };
            layers.push(state.clone());
        }
        Ok(Decoded { initial, layers })
    }
}
