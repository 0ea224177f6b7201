//! The three moment parameterizations and the overlap measures between spans.

use bam_core::intervals::{center_length_to_span, giou_1d, iou_1d, triplet_to_span};
use bam_core::objective::pair_cost;
use bam_core::{CenterLength, MomentSpan, MomentTriplet};

fn main() -> anyhow::Result<()> {
    // An anchor need not be the center: 0.3 with 0.1 to the start and 0.3 to the end.
    let t = MomentTriplet::new(0.3, 0.1, 0.3)?;
    let cl = CenterLength::new(0.4, 0.4)?;
    println!("triplet {t:?} -> {:?}", triplet_to_span(t));
    println!("center/length {cl:?} -> {:?}", center_length_to_span(cl));

    let a = MomentSpan::new(0.0, 0.2)?;
    for b in [MomentSpan::new(0.1, 0.3)?, MomentSpan::new(0.2, 0.3)?, MomentSpan::new(0.5, 0.9)?] {
        println!(
            "[{:.1}, {:.1}] vs [{:.1}, {:.1}]: iou {:.4} giou {:.4} matching cost {:.4}",
            a.start,
            a.end,
            b.start,
            b.end,
            iou_1d(&a, &b),
            giou_1d(&a, &b),
            pair_cost(&a, &b)
        );
    }
    Ok(())
}
