//! Batched evaluation and the standard metric report.

use serde::{Deserialize, Serialize};

use crate::harness::io::{Dataset, PredictionRecord};
use crate::metrics::{default_map_thresholds, mean_average_precision, mean_iou, recall_at_1, EvalRecord};
use crate::model::BamDetr;
use crate::sample::{Batch, Sample};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r1_03: f64,
    pub r1_05: f64,
    pub r1_07: f64,
    pub map_05: f64,
    pub map_075: f64,
    pub map_avg: f64,
    pub miou: f64,
}

impl EvalReport {
    pub fn from_records(records: &[EvalRecord]) -> Result<Self> {
        let map = mean_average_precision(records, &default_map_thresholds())?;
        Ok(Self {
            r1_03: recall_at_1(records, 0.3)?,
            r1_05: recall_at_1(records, 0.5)?,
            r1_07: recall_at_1(records, 0.7)?,
            map_05: map.at(0.5).unwrap_or(f64::NAN),
            map_075: map.at(0.75).unwrap_or(f64::NAN),
            map_avg: map.average,
            miou: mean_iou(records)?,
        })
    }

    pub fn avg_map(&self) -> f64 {
        self.map_avg
    }

    /// `(key, value)` pairs in report order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("R1@0.3", self.r1_03),
            ("R1@0.5", self.r1_05),
            ("R1@0.7", self.r1_07),
            ("mAP@0.5", self.map_05),
            ("mAP@0.75", self.map_075),
            ("mAP", self.map_avg),
            ("mIoU", self.miou),
        ]
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(self.entries().into_iter().map(|(k, v)| (k.to_string(), serde_json::json!(v))).collect())
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.entries().iter().map(|(k, v)| format!("{k} {:.4}", v)).collect();
        f.write_str(&parts.join("  "))
    }
}

/// Runs the model over the dataset in order and scores its ranked proposals.
pub fn evaluate(model: &BamDetr, data: &Dataset, batch_size: usize) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    let dtype = model.store().dtype();
    let device = model.store().device().clone();
    let mut records = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::collate(&refs, dtype, &device)?;
        for (p, s) in model.predict(&batch)?.iter().zip(chunk) {
            records.push(PredictionRecord::from_prediction(p, &s.gt_spans));
        }
    }
    let evals = records.iter().map(PredictionRecord::to_eval_record).collect::<Result<Vec<_>>>()?;
    Ok((EvalReport::from_records(&evals)?, records))
}
