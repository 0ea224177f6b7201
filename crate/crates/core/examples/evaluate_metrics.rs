//! Recall@1, mAP and the boundary hit rate on hand-made records.

use bam_core::metrics::{
    boundary_hit_rate_seconds, default_map_thresholds, mean_average_precision, mean_iou, recall_at_1,
    EvalRecord,
};
use bam_core::MomentSpan;

fn main() -> anyhow::Result<()> {
    let s = |a, b| MomentSpan::new(a, b);
    let mut good = EvalRecord::new("q1", vec![(s(0.20, 0.41)?, 0.9), (s(0.6, 0.7)?, 0.4)], vec![s(0.2, 0.4)?]);
    good.duration = 60.0;
    let mut half = EvalRecord::new("q2", vec![(s(0.5, 0.6)?, 0.8), (s(0.5, 0.7)?, 0.7)], vec![s(0.5, 0.7)?]);
    half.duration = 60.0;
    let records = vec![good, half];

    for t in [0.3, 0.5, 0.7] {
        println!("R1@{t}: {:.3}", recall_at_1(&records, t)?);
    }
    println!("mIoU: {:.3}", mean_iou(&records)?);
    let map = mean_average_precision(&records, &default_map_thresholds())?;
    println!("mAP@0.5 {:.3}  mAP@0.75 {:.3}  avg {:.3}", map.at(0.5).unwrap_or(0.0), map.at(0.75).unwrap_or(0.0), map.average);
    for w in [1.0, 2.0, 4.0] {
        println!("hit rate, {w} s band: {:.3}", boundary_hit_rate_seconds(&records, w)?);
    }
    Ok(())
}
