//! Localization-only bipartite matching of ground truths to predictions.

use bam_core::objective::{hungarian_match, pair_cost};
use bam_core::MomentSpan;

fn main() -> anyhow::Result<()> {
    let gts = vec![MomentSpan::new(0.10, 0.30)?, MomentSpan::new(0.55, 0.80)?];
    let preds = vec![
        MomentSpan::new(0.50, 0.85)?,
        MomentSpan::new(0.00, 0.05)?,
        MomentSpan::new(0.12, 0.33)?,
        MomentSpan::new(0.40, 0.60)?,
    ];
    for (n, g) in gts.iter().enumerate() {
        let row: Vec<String> = preds.iter().map(|p| format!("{:7.3}", pair_cost(g, p))).collect();
        println!("gt {n}: {}", row.join(" "));
    }
    let m = hungarian_match(&gts, &preds)?;
    for (n, j) in m.assignment.iter().enumerate() {
        println!("gt {n} -> prediction {j}");
    }
    println!("total cost {:.4}", m.total_cost);
    Ok(())
}
