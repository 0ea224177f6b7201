//! Quality scoring, localization-oriented matching and the training objective.
//!
//! There is no classification term anywhere: predictions are matched to
//! ground truths purely by localization cost, and proposals are ranked by a
//! separately learned estimate of their best IoU.

mod matching;

pub use matching::{hungarian_match_costs, MatchResult};

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{boundary_regularization_loss, BoundaryLabels, DecoderState};
use crate::encoder::{margin_saliency_loss, negative_relation_loss, rank_contrastive_loss, sample_margin_pair};
use crate::intervals::{giou_1d, l1_span_distance, max_iou, MomentSpan};
use crate::model::ModelOutput;
use crate::nn::{sigmoid, Mlp, Scope};
use crate::sample::{clip_positions, Batch};
use crate::{Error, Result};

pub const DEFAULT_L1_WEIGHT: f64 = 10.0;
pub const DEFAULT_IOU_WEIGHT: f64 = 1.0;

/// Balancing weights and switches of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub iou: f64,
    pub qual: f64,
    /// Saliency weight for samples with clip-level labels.
    pub sal: f64,
    /// Saliency weight for samples without them.
    pub sal_unlabeled: f64,
    pub regul: f64,
    pub margin: f64,
    pub temperature: f64,
    /// Supervise every decoder layer rather than only the last.
    pub deep_supervision: bool,
    /// Treat the max-IoU quality target as a constant.
    pub detach_quality_target: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: DEFAULT_L1_WEIGHT,
            iou: DEFAULT_IOU_WEIGHT,
            qual: 2.0,
            sal: 1.0,
            sal_unlabeled: 4.0,
            regul: 1.0,
            margin: 0.2,
            temperature: 0.5,
            deep_supervision: true,
            detach_quality_target: true,
        }
    }
}

/// Per-term values of one loss evaluation (batch means).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Localization loss, summed over supervised layers.
    pub loc: f64,
    /// Quality loss, summed over supervised layers.
    pub qual: f64,
    /// Unweighted saliency loss.
    pub sal: f64,
    /// Saliency loss with the per-sample weight applied.
    pub sal_weighted: f64,
    pub regul: f64,
    pub margin: f64,
    pub contrastive: f64,
    pub negative: f64,
    pub total: f64,
    /// Samples without a usable margin pair.
    pub margin_skipped: usize,
    /// Samples without a usable contrastive reference.
    pub contrastive_skipped: usize,
    pub negative_skipped: bool,
}

impl LossBreakdown {
    /// `loc + w_qual * qual + sal_weighted + w_regul * regul`.
    pub fn combine(loc: f64, qual: f64, sal_weighted: f64, regul: f64, w: &LossWeights) -> f64 {
        loc + w.qual * qual + sal_weighted + w.regul * regul
    }

    /// Named terms, for error reporting and logs.
    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("loc", self.loc),
            ("qual", self.qual),
            ("margin", self.margin),
            ("contrastive", self.contrastive),
            ("negative", self.negative),
            ("regul", self.regul),
            ("sal", self.sal),
            ("total", self.total),
        ]
    }

    /// The first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        self.terms().iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

pub struct LossOutput {
    /// Scalar to differentiate.
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    /// Matching of every supervised layer, per sample.
    pub matches: Vec<Vec<MatchResult>>,
}

/// `sigma(MLP([C_p || C_s || C_e]))`, shared by all decoder layers.
#[derive(Clone)]
pub struct QualityHead {
    mlp: Mlp,
}

impl QualityHead {
    pub fn new(dim: usize, scope: &Scope) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(&[3 * dim, dim, 1], scope)? })
    }

    /// Head whose output layer starts at zero (scores 0.5 everywhere).
    pub fn zeroed(dim: usize, scope: &Scope) -> Result<Self> {
        Ok(Self { mlp: Mlp::zero_last(&[3 * dim, dim, 1], scope)? })
    }

    /// Scores in `(0, 1)`, `(B, M)`.
    pub fn quality_scores(&self, state: &DecoderState) -> Result<Tensor> {
        let x = Tensor::cat(&[&state.anchor_queries, &state.start_queries, &state.end_queries], D::Minus1)?;
        sigmoid(&self.mlp.forward(&x)?.squeeze(D::Minus1)?)
    }
}

/// `w_l1 * L1 + w_iou * (1 - gIoU)` with the given weights.
pub fn pair_cost_weighted(gt: &MomentSpan, pred: &MomentSpan, l1: f64, iou: f64) -> f64 {
    l1 * l1_span_distance(gt, pred) + iou * (1.0 - giou_1d(gt, pred))
}

/// Matching cost with the default weights (10 and 1).
pub fn pair_cost(gt: &MomentSpan, pred: &MomentSpan) -> f64 {
    pair_cost_weighted(gt, pred, DEFAULT_L1_WEIGHT, DEFAULT_IOU_WEIGHT)
}

/// Optimal matching of `gts` to `preds` under [`pair_cost`].
pub fn hungarian_match(gts: &[MomentSpan], preds: &[MomentSpan]) -> Result<MatchResult> {
    if gts.len() > preds.len() {
        return Err(Error::TooManyGroundTruths { n_gt: gts.len(), n_pred: preds.len() });
    }
    let cost: Vec<Vec<f64>> = gts.iter().map(|g| preds.iter().map(|p| pair_cost(g, p)).collect()).collect();
    hungarian_match_costs(&cost)
}

/// Matched cost re-evaluated pair by pair.
pub fn localization_loss(gts: &[MomentSpan], preds: &[MomentSpan], m: &MatchResult) -> f64 {
    m.assignment.iter().enumerate().map(|(n, &j)| pair_cost(&gts[n], &preds[j])).sum()
}

/// `sum_m |q_m - max_n IoU(pred_m, gt_n)|` over every prediction.
pub fn quality_loss(q: &[f64], preds: &[MomentSpan], gts: &[MomentSpan]) -> f64 {
    q.iter().zip(preds).map(|(q, p)| (q - max_iou(p, gts)).abs()).sum()
}

/// Indices sorted by descending score; ties keep their original order.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

pub fn rank_proposals(spans: &[MomentSpan], scores: &[f64]) -> Result<Vec<(MomentSpan, f64)>> {
    if spans.len() != scores.len() {
        return Err(Error::DimMismatch { what: "scores per proposal".into(), expected: spans.len(), got: scores.len() });
    }
    Ok(rank_order(scores).into_iter().map(|i| (spans[i], scores[i])).collect())
}

/// IoU and gIoU of predicted against ground-truth spans, all broadcastable tensors.
pub fn span_iou_tensors(ps: &Tensor, pe: &Tensor, gs: &Tensor, ge: &Tensor) -> Result<(Tensor, Tensor)> {
    let inter = (pe.broadcast_minimum(ge)? - ps.broadcast_maximum(gs)?)?.relu()?;
    let union = ((pe - ps)?.broadcast_add(&(ge - gs)?)? - &inter)?;
    let iou = (&inter / &union)?;
    let hull = (pe.broadcast_maximum(ge)? - ps.broadcast_minimum(gs)?)?;
    let giou = (&iou - ((&hull - &union)? / &hull)?)?;
    Ok((iou, giou))
}

fn raw_spans(state: &DecoderState) -> Result<Vec<Vec<MomentSpan>>> {
    // Unclamped: the spans the losses see during training.
    let (s, e) = state.span_tensors()?;
    let s = s.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
    let e = e.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
    Ok(s.into_iter()
        .zip(e)
        .map(|(s, e)| s.into_iter().zip(e).map(|(start, end)| MomentSpan { start, end }).collect())
        .collect())
}

/// Localization loss of one layer (sum over GTs, mean over batch) plus the matches.
fn layer_localization(
    state: &DecoderState,
    batch: &Batch,
    w: &LossWeights,
) -> Result<(Tensor, Vec<MatchResult>)> {
    let preds = raw_spans(state)?;
    let b = batch.size();
    let m = preds.first().map_or(0, Vec::len);
    let mut idx = Vec::new();
    let mut gs = Vec::new();
    let mut ge = Vec::new();
    let mut matches = Vec::with_capacity(b);
    for i in 0..b {
        let gts = &batch.gt_spans[i];
        let cost: Vec<Vec<f64>> = gts
            .iter()
            .map(|g| preds[i].iter().map(|p| pair_cost_weighted(g, p, w.l1, w.iou)).collect())
            .collect();
        let r = hungarian_match_costs(&cost)?;
        for (n, &j) in r.assignment.iter().enumerate() {
            idx.push((i * m + j) as u32);
            gs.push(gts[n].start);
            ge.push(gts[n].end);
        }
        matches.push(r);
    }
    let dev = state.anchors.device();
    let dt = state.anchors.dtype();
    let idx = Tensor::new(idx, dev)?;
    let (s, e) = state.span_tensors()?;
    let ps = s.flatten_all()?.index_select(&idx, 0)?;
    let pe = e.flatten_all()?.index_select(&idx, 0)?;
    let gs = Tensor::new(gs, dev)?.to_dtype(dt)?;
    let ge = Tensor::new(ge, dev)?.to_dtype(dt)?;
    let l1 = ((&ps - &gs)?.abs()? + (&pe - &ge)?.abs()?)?;
    let (_, giou) = span_iou_tensors(&ps, &pe, &gs, &ge)?;
    let cost = ((l1 * w.l1)? + (giou.affine(-1.0, 1.0)? * w.iou)?)?;
    Ok(((cost.sum_all()? / b as f64)?, matches))
}

/// Padded ground truths `(B, 1, N)` for start, end and validity.
fn padded_gts(batch: &Batch, dt: candle_core::DType, dev: &candle_core::Device) -> Result<(Tensor, Tensor, Tensor)> {
    let b = batch.size();
    let n = batch.gt_spans.iter().map(Vec::len).max().unwrap_or(1);
    let mut s = vec![0f64; b * n];
    let mut e = vec![1f64; b * n];
    let mut valid = vec![0f64; b * n];
    for (i, gts) in batch.gt_spans.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            s[i * n + j] = g.start;
            e[i * n + j] = g.end;
            valid[i * n + j] = 1.0;
        }
    }
    let t = |v: Vec<f64>| -> Result<Tensor> { Ok(Tensor::from_vec(v, (b, 1, n), dev)?.to_dtype(dt)?) };
    Ok((t(s)?, t(e)?, t(valid)?))
}

/// Max-over-GT IoU of every prediction, `(B, M)`.
pub fn max_iou_targets(state: &DecoderState, batch: &Batch) -> Result<Tensor> {
    let dev = state.anchors.device();
    let (gs, ge, valid) = padded_gts(batch, state.anchors.dtype(), dev)?;
    let (s, e) = state.span_tensors()?;
    let (iou, _) = span_iou_tensors(&s.unsqueeze(2)?, &e.unsqueeze(2)?, &gs, &ge)?;
    // invalid slots drop to -1 so they never win the max
    let masked = (iou.broadcast_mul(&valid)? + valid.affine(1.0, -1.0)?.broadcast_as(iou.shape())?)?;
    Ok(masked.max(2)?)
}

fn layer_quality(q: &Tensor, state: &DecoderState, batch: &Batch, w: &LossWeights) -> Result<Tensor> {
    let mut target = max_iou_targets(state, batch)?;
    if w.detach_quality_target {
        target = target.detach();
    }
    Ok(((q - target)?.abs()?.sum_all()? / batch.size() as f64)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// The full objective over a forward pass.
///
/// Localization and quality terms are summed over the supervised decoder
/// layers; every term is summed within a sample and averaged over the batch.
/// `rng` only drives the margin-pair draw for samples without labels.
pub fn total_loss(out: &ModelOutput, batch: &Batch, w: &LossWeights, rng: &mut impl Rng) -> Result<LossOutput> {
    let b = batch.size();
    let dev = batch.device();
    let dt = batch.dtype();
    let states = out.supervised_states(w.deep_supervision);
    let qualities = out.supervised_quality(w.deep_supervision);

    let mut loc = Tensor::zeros((), dt, dev)?;
    let mut qual = Tensor::zeros((), dt, dev)?;
    let mut matches = Vec::with_capacity(states.len());
    for (state, q) in states.iter().zip(qualities) {
        let (l, m) = layer_localization(state, batch, w)?;
        loc = (loc + l)?;
        qual = (qual + layer_quality(q, state, batch, w)?)?;
        matches.push(m);
    }

    // saliency
    let mut pairs = Vec::with_capacity(b);
    for i in 0..b {
        let pos = clip_positions(batch.lengths[i]);
        pairs.push(sample_margin_pair(&pos, &batch.gt_spans[i], batch.saliency[i].as_deref(), rng));
    }
    let margin_skipped = pairs.iter().filter(|p| p.is_none()).count();
    let margin = margin_saliency_loss(&out.saliency, &pairs, w.margin)?;
    let (contrastive, contrastive_skipped) = rank_contrastive_loss(&out.saliency, batch, w.temperature)?;
    let (negative, negative_skipped) = match &out.neg_saliency {
        Some(s) => (negative_relation_loss(s, &batch.video_mask)?, false),
        None => (Tensor::zeros(b, dt, dev)?, true),
    };
    let sal_per = ((&margin + &contrastive)? + &negative)?;
    let sal_w: Vec<f64> =
        batch.saliency.iter().map(|s| if s.is_some() { w.sal } else { w.sal_unlabeled }).collect();
    let sal_w = Tensor::new(sal_w, dev)?.to_dtype(dt)?;
    let sal_weighted = (&sal_per * sal_w)?.mean_all()?;

    let labels: Vec<BoundaryLabels> = (0..b)
        .map(|i| BoundaryLabels::new(&batch.gt_spans[i], &clip_positions(batch.lengths[i])))
        .collect();
    let regul = boundary_regularization_loss(&out.locality, &labels, &batch.lengths)?.mean_all()?;

    let total = (((&loc + (&qual * w.qual)?)? + &sal_weighted)? + (&regul * w.regul)?)?;

    let breakdown = LossBreakdown {
        loc: scalar(&loc)?,
        qual: scalar(&qual)?,
        sal: scalar(&sal_per.mean_all()?)?,
        sal_weighted: scalar(&sal_weighted)?,
        regul: scalar(&regul)?,
        margin: scalar(&margin.mean_all()?)?,
        contrastive: scalar(&contrastive.mean_all()?)?,
        negative: scalar(&negative.mean_all()?)?,
        total: scalar(&total)?,
        margin_skipped,
        contrastive_skipped,
        negative_skipped,
    };
    Ok(LossOutput { total, breakdown, matches })
}
