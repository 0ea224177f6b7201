//! Retrieval metrics and diagnostics over ranked predictions.
//!
//! All spans in an [`EvalRecord`] are in normalized time; `duration` converts
//! to seconds where an analysis is stated in seconds.

use serde::{Deserialize, Serialize};

use crate::intervals::{iou_1d, max_iou, MomentSpan};
use crate::{Error, Result};

/// Ranked predictions for one sentence together with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub qid: String,
    /// Sorted by descending score.
    pub ranked_preds: Vec<(MomentSpan, f64)>,
    pub gt_spans: Vec<MomentSpan>,
    /// Anchor `p` of each ranked prediction.
    pub anchors: Option<Vec<f64>>,
    /// Raw sampling offsets, normalized time.
    pub offsets: Option<Vec<f64>>,
    pub duration: f64,
}

impl EvalRecord {
    pub fn new(qid: impl Into<String>, ranked_preds: Vec<(MomentSpan, f64)>, gt_spans: Vec<MomentSpan>) -> Self {
        Self { qid: qid.into(), ranked_preds, gt_spans, anchors: None, offsets: None, duration: 1.0 }
    }

    pub fn top1(&self) -> Option<&MomentSpan> {
        self.ranked_preds.first().map(|(s, _)| s)
    }

    /// Max-over-GT IoU of the top-ranked prediction (0 with no predictions).
    pub fn top1_iou(&self) -> f64 {
        self.top1().map_or(0.0, |p| max_iou(p, &self.gt_spans))
    }
}

fn nonempty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Empty("no evaluation records"));
    }
    Ok(())
}

pub fn recall_at_1(records: &[EvalRecord], iou_threshold: f64) -> Result<f64> {
    nonempty(records)?;
    let hits = records.iter().filter(|r| r.top1_iou() >= iou_threshold).count();
    Ok(hits as f64 / records.len() as f64)
}

pub fn mean_iou(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records)?;
    Ok(records.iter().map(EvalRecord::top1_iou).sum::<f64>() / records.len() as f64)
}

/// The usual `0.50, 0.55, ..., 0.95` threshold sweep.
pub fn default_map_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Average precision of one ranked list at one IoU threshold.
///
/// Walking down the ranking, a prediction is a true positive when it reaches
/// the threshold against some still-unclaimed GT; it claims the unclaimed GT
/// with the highest IoU. AP is the precision at each true positive, summed and
/// divided by the number of GTs.
pub fn average_precision(preds: &[(MomentSpan, f64)], gts: &[MomentSpan], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut claimed = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, (p, _)) in preds.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] {
                continue;
            }
            let iou = iou_1d(p, gt);
            if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            claimed[g] = true;
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    sum / gts.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    /// `(threshold, mAP over records)` per threshold.
    pub per_threshold: Vec<(f64, f64)>,
    pub average: f64,
}

impl MapReport {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold.iter().find(|(t, _)| (t - threshold).abs() < 1e-12).map(|(_, v)| *v)
    }
}

pub fn mean_average_precision(records: &[EvalRecord], thresholds: &[f64]) -> Result<MapReport> {
    nonempty(records)?;
    if thresholds.is_empty() {
        return Err(Error::Empty("no mAP thresholds"));
    }
    let per_threshold: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let s: f64 = records.iter().map(|r| average_precision(&r.ranked_preds, &r.gt_spans, t)).sum();
            (t, s / records.len() as f64)
        })
        .collect();
    let average = per_threshold.iter().map(|(_, v)| v).sum::<f64>() / per_threshold.len() as f64;
    Ok(MapReport { per_threshold, average })
}

fn record_hit(r: &EvalRecord, half_band: f64, scale: f64) -> bool {
    r.gt_spans.iter().any(|g| {
        r.ranked_preds.iter().any(|(p, _)| {
            (p.start - g.start).abs() * scale <= half_band && (p.end - g.end).abs() * scale <= half_band
        })
    })
}

/// Fraction of records where some prediction has both boundaries inside the
/// `l_w`-wide zones around some GT's boundaries. `band_width` is in normalized time.
pub fn boundary_hit_rate(records: &[EvalRecord], band_width: f64) -> Result<f64> {
    nonempty(records)?;
    let hits = records.iter().filter(|r| record_hit(r, 0.5 * band_width, 1.0)).count();
    Ok(hits as f64 / records.len() as f64)
}

/// As [`boundary_hit_rate`] with `band_width` in seconds, using each record's duration.
pub fn boundary_hit_rate_seconds(records: &[EvalRecord], band_width: f64) -> Result<f64> {
    nonempty(records)?;
    let hits = records.iter().filter(|r| record_hit(r, 0.5 * band_width, r.duration)).count();
    Ok(hits as f64 / records.len() as f64)
}

pub fn default_center_bins() -> Vec<(f64, f64)> {
    (0..5).map(|i| (i as f64 / 10.0, (i + 1) as f64 / 10.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CenterBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub proportion: f64,
    /// NaN for an empty bin.
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CenterReport {
    pub bins: Vec<CenterBin>,
    /// Records whose reference point fell inside a GT.
    pub considered: usize,
    pub used_anchors: bool,
}

/// Top-1 accuracy grouped by normalized center error.
///
/// The reference point of the top prediction is its anchor when anchors are
/// present, otherwise its center. Records whose reference point lies outside
/// every GT are dropped; among GTs containing it, the one overlapping the
/// prediction most is used. Bins are half-open except that the last includes
/// its upper edge (an error of exactly 0.5 is the largest possible).
pub fn center_error_diagnostic(records: &[EvalRecord], bins: &[(f64, f64)]) -> Result<CenterReport> {
    let mut counts = vec![0usize; bins.len()];
    let mut sums = vec![0f64; bins.len()];
    let mut considered = 0;
    let mut used_anchors = false;
    for r in records {
        let Some((pred, _)) = r.ranked_preds.first() else { continue };
        let anchor = r.anchors.as_ref().and_then(|a| a.first().copied());
        used_anchors |= anchor.is_some();
        let reference = anchor.unwrap_or_else(|| pred.center());
        let gt = r
            .gt_spans
            .iter()
            .filter(|g| g.contains(reference))
            .map(|g| (g, iou_1d(pred, g)))
            .fold(None::<(&MomentSpan, f64)>, |best, (g, iou)| match best {
                Some((_, b)) if b >= iou => best,
                _ => Some((g, iou)),
            });
        let Some((gt, _)) = gt else { continue };
        let error = if gt.length() > 0.0 { (reference - gt.center()).abs() / gt.length() } else { 0.0 };
        let last = bins.len().saturating_sub(1);
        let bin = bins
            .iter()
            .enumerate()
            .position(|(i, &(lo, hi))| error >= lo && (error < hi || (i == last && error <= hi)));
        if let Some(b) = bin {
            considered += 1;
            counts[b] += 1;
            sums[b] += max_iou(pred, &r.gt_spans);
        }
    }
    let bins = bins
        .iter()
        .enumerate()
        .map(|(i, &(lower, upper))| CenterBin {
            lower,
            upper,
            count: counts[i],
            proportion: if considered > 0 { counts[i] as f64 / considered as f64 } else { 0.0 },
            mean_iou: if counts[i] > 0 { sums[i] / counts[i] as f64 } else { f64::NAN },
        })
        .collect();
    Ok(CenterReport { bins, considered, used_anchors })
}

/// Normalized histogram of `|offset|` values. `edges` are bin lower bounds in
/// ascending order; the last bin is open-ended. `None` when there is nothing to count.
pub fn offset_histogram(offsets: &[f64], edges: &[f64]) -> Option<Vec<f64>> {
    if offsets.is_empty() || edges.is_empty() {
        return None;
    }
    let mut counts = vec![0usize; edges.len()];
    let mut total = 0;
    for o in offsets {
        let a = o.abs();
        if let Some(b) = edges.iter().rposition(|&e| a >= e) {
            counts[b] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return None;
    }
    Some(counts.into_iter().map(|c| c as f64 / total as f64).collect())
}

/// Offsets of all records converted to seconds.
pub fn offsets_in_seconds(records: &[EvalRecord]) -> Vec<f64> {
    records
        .iter()
        .filter_map(|r| r.offsets.as_ref().map(|o| o.iter().map(|x| x * r.duration).collect::<Vec<_>>()))
        .flatten()
        .collect()
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// `(score, max-over-GT IoU)` for every prediction of every record.
pub fn score_iou_pairs(records: &[EvalRecord]) -> Vec<(f64, f64)> {
    records
        .iter()
        .flat_map(|r| r.ranked_preds.iter().map(|(p, s)| (*s, max_iou(p, &r.gt_spans))))
        .collect()
}

/// Pearson correlation between prediction scores and their IoUs; `None`
/// when either side has no variance.
pub fn score_iou_correlation(records: &[EvalRecord]) -> Option<f64> {
    let (s, i): (Vec<f64>, Vec<f64>) = score_iou_pairs(records).into_iter().unzip();
    pearson(&s, &i)
}
