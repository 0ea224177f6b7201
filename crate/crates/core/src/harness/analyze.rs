//! Diagnostic reports computed from a prediction file alone.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::harness::io::{read_predictions, sibling_path, PredictionRecord};
use crate::metrics::{
    boundary_hit_rate_seconds, center_error_diagnostic, default_center_bins, offset_histogram,
    offsets_in_seconds, score_iou_correlation, score_iou_pairs, EvalRecord,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analysis {
    HitRate,
    CenterBins,
    Offsets,
    Correlation,
}

impl FromStr for Analysis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hit_rate" => Ok(Self::HitRate),
            "center_bins" => Ok(Self::CenterBins),
            "offsets" => Ok(Self::Offsets),
            "correlation" => Ok(Self::Correlation),
            other => Err(Error::Config(format!(
                "unknown analysis {other:?} (expected hit_rate, center_bins, offsets or correlation)"
            ))),
        }
    }
}

impl fmt::Display for Analysis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::HitRate => "hit_rate",
            Self::CenterBins => "center_bins",
            Self::Offsets => "offsets",
            Self::Correlation => "correlation",
        })
    }
}

/// A finished analysis: a table, or the reason it could not be computed.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisReport {
    Table { header: Vec<String>, rows: Vec<Vec<f64>> },
    Skipped(String),
}

impl AnalysisReport {
    fn table(header: &[&str], rows: Vec<Vec<f64>>) -> Self {
        Self::Table { header: header.iter().map(|s| s.to_string()).collect(), rows }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        match self {
            Self::Table { rows, .. } => rows,
            Self::Skipped(_) => &[],
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        match self {
            Self::Table { header, rows } => {
                w.write_record(header)?;
                for r in rows {
                    w.write_record(r.iter().map(|v| v.to_string()))?;
                }
            }
            Self::Skipped(reason) => {
                w.write_record(["skipped"])?;
                w.write_record([reason])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Band widths 1..=10 seconds.
pub fn default_band_widths() -> Vec<f64> {
    (1..=10).map(f64::from).collect()
}

/// Offset bin lower edges in seconds; the last bin is open.
pub fn default_offset_edges() -> Vec<f64> {
    (0..=10).map(|i| 2.0 * i as f64).collect()
}

pub fn hit_rate_series(records: &[EvalRecord], widths: &[f64]) -> Result<AnalysisReport> {
    let rows = widths
        .iter()
        .map(|&w| Ok(vec![w, boundary_hit_rate_seconds(records, w)?]))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnalysisReport::table(&["band_width_s", "hit_rate"], rows))
}

/// Runs one analysis. The correlation analysis also returns its scatter
/// series `(score, iou)` as a second table.
pub fn run_analysis(records: &[EvalRecord], which: Analysis) -> Result<(AnalysisReport, Option<AnalysisReport>)> {
    if records.is_empty() {
        return Err(Error::Empty("prediction file has no records"));
    }
    Ok(match which {
        Analysis::HitRate => (hit_rate_series(records, &default_band_widths())?, None),
        Analysis::CenterBins => {
            let rep = center_error_diagnostic(records, &default_center_bins())?;
            if rep.considered == 0 {
                (AnalysisReport::Skipped("no top-1 reference point falls inside a ground truth".into()), None)
            } else {
                let rows = rep
                    .bins
                    .iter()
                    .map(|b| vec![b.lower, b.upper, b.count as f64, b.proportion, b.mean_iou])
                    .collect();
                let header = if rep.used_anchors {
                    ["err_lo", "err_hi", "count", "proportion", "mean_iou_anchor_ref"]
                } else {
                    ["err_lo", "err_hi", "count", "proportion", "mean_iou_center_ref"]
                };
                (AnalysisReport::table(&header, rows), None)
            }
        }
        Analysis::Offsets => {
            if records.iter().all(|r| r.offsets.as_ref().map_or(true, Vec::is_empty)) {
                (AnalysisReport::Skipped("prediction file carries no offsets".into()), None)
            } else {
                let edges = default_offset_edges();
                let hist = offset_histogram(&offsets_in_seconds(records), &edges).unwrap_or_default();
                let rows = edges
                    .iter()
                    .enumerate()
                    .map(|(i, &lo)| vec![lo, edges.get(i + 1).copied().unwrap_or(f64::INFINITY), hist.get(i).copied().unwrap_or(0.0)])
                    .collect();
                (AnalysisReport::table(&["abs_offset_lo_s", "abs_offset_hi_s", "mass"], rows), None)
            }
        }
        Analysis::Correlation => {
            let pairs = score_iou_pairs(records);
            let series = AnalysisReport::table(&["score", "iou"], pairs.iter().map(|&(s, i)| vec![s, i]).collect());
            match score_iou_correlation(records) {
                Some(r) => (AnalysisReport::table(&["pearson_r", "n"], vec![vec![r, pairs.len() as f64]]), Some(series)),
                None => (AnalysisReport::Skipped("scores or IoUs have zero variance".into()), Some(series)),
            }
        }
    })
}

pub fn load_records(preds: &Path) -> Result<Vec<EvalRecord>> {
    read_predictions(preds)?.iter().map(PredictionRecord::to_eval_record).collect()
}

/// Reads a prediction file, runs the analysis and writes `out` (plus
/// `<stem>_series.csv` for the correlation scatter).
pub fn analyze(preds: &Path, which: Analysis, out: &Path) -> Result<AnalysisReport> {
    let records = load_records(preds)?;
    let (report, series) = run_analysis(&records, which)?;
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    report.write_csv(out)?;
    if let Some(s) = series {
        s.write_csv(&sibling_path(out, "_series"))?;
    }
    Ok(report)
}
