//! 1D interval geometry for moments in normalized time.
//!
//! A moment can be written three ways: as a closed span `(t_s, t_e)`, as the
//! boundary-oriented triplet `(p, d_s, d_e)` regressed by the decoder, or as the
//! symmetric `(center, length)` tuple used by center-based detectors. Everything
//! downstream (matching costs, quality targets, metrics) is expressed in terms of
//! the span form.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A closed interval `[start, end]` with `0 <= start <= end <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSpan {
    pub start: f64,
    pub end: f64,
}

impl MomentSpan {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || end > 1.0 || start > end {
            return Err(Error::InvalidSpan { start, end });
        }
        Ok(Self { start, end })
    }

    /// Builds a span from arbitrary endpoints by clamping into `[0, 1]`.
    ///
    /// If clamping leaves `start > end` the span collapses to the point `pivot`
    /// (clamped as well).
    pub fn clamped(start: f64, end: f64, pivot: f64) -> Self {
        let s = start.clamp(0.0, 1.0);
        let e = end.clamp(0.0, 1.0);
        if s > e {
            let p = pivot.clamp(0.0, 1.0);
            Self { start: p, end: p }
        } else {
            Self { start: s, end: e }
        }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }

    /// Rescales normalized times to seconds.
    pub fn to_seconds(&self, duration: f64) -> (f64, f64) {
        (self.start * duration, self.end * duration)
    }
}

/// Boundary-oriented parametrization: an anchor point and its distances to
/// the two boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentTriplet {
    pub anchor: f64,
    pub to_start: f64,
    pub to_end: f64,
}

impl MomentTriplet {
    pub fn new(anchor: f64, to_start: f64, to_end: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&anchor) && to_start >= 0.0 && to_end >= 0.0;
        if !ok || !to_start.is_finite() || !to_end.is_finite() {
            return Err(Error::InvalidTriplet { anchor, to_start, to_end });
        }
        Ok(Self { anchor, to_start, to_end })
    }

    pub fn to_span(&self) -> MomentSpan {
        triplet_to_span(*self)
    }
}

/// Symmetric `(center, length)` parametrization, kept for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterLength {
    pub center: f64,
    pub length: f64,
}

impl CenterLength {
    pub fn new(center: f64, length: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&center) || !(length >= 0.0) || !length.is_finite() {
            return Err(Error::InvalidCenterLength { center, length });
        }
        Ok(Self { center, length })
    }
}

pub fn triplet_to_span(t: MomentTriplet) -> MomentSpan {
    MomentSpan::clamped(t.anchor - t.to_start, t.anchor + t.to_end, t.anchor)
}

pub fn center_length_to_span(cl: CenterLength) -> MomentSpan {
    let half = 0.5 * cl.length;
    MomentSpan::clamped(cl.center - half, cl.center + half, cl.center)
}

fn intersection(a: &MomentSpan, b: &MomentSpan) -> f64 {
    (a.end.min(b.end) - a.start.max(b.start)).max(0.0)
}

/// Intersection over union. Two zero-length spans have IoU 1 when they are the
/// same point and 0 otherwise.
pub fn iou_1d(a: &MomentSpan, b: &MomentSpan) -> f64 {
    let inter = intersection(a, b);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        return if a.start == b.start && a.end == b.end { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Generalized IoU: IoU minus the fraction of the enclosing hull not covered by
/// the union.
pub fn giou_1d(a: &MomentSpan, b: &MomentSpan) -> f64 {
    let inter = intersection(a, b);
    let union = a.length() + b.length() - inter;
    let hull = a.end.max(b.end) - a.start.min(b.start);
    let iou = iou_1d(a, b);
    if hull <= 0.0 {
        return iou;
    }
    iou - (hull - union) / hull
}

pub fn l1_span_distance(a: &MomentSpan, b: &MomentSpan) -> f64 {
    (a.start - b.start).abs() + (a.end - b.end).abs()
}

/// Maximum IoU of `pred` against any of `gts` (0 for an empty list).
pub fn max_iou(pred: &MomentSpan, gts: &[MomentSpan]) -> f64 {
    gts.iter().map(|g| iou_1d(pred, g)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn span(s: f64, e: f64) -> MomentSpan {
        MomentSpan::new(s, e).unwrap()
    }

    #[test]
    fn triplet_conversion() {
        let s = triplet_to_span(MomentTriplet::new(0.5, 0.2, 0.3).unwrap());
        assert_abs_diff_eq!(s.start, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(s.end, 0.8, epsilon = 1e-12);

        let s = triplet_to_span(MomentTriplet::new(0.5, 0.0, 0.0).unwrap());
        assert_eq!((s.start, s.end), (0.5, 0.5));

        // left clamp
        let s = triplet_to_span(MomentTriplet::new(0.1, 0.3, 0.2).unwrap());
        assert_eq!(s.start, 0.0);
        assert_abs_diff_eq!(s.end, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn center_length_conversion() {
        let s = center_length_to_span(CenterLength::new(0.5, 0.4).unwrap());
        assert_abs_diff_eq!(s.start, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(s.end, 0.7, epsilon = 1e-12);
        let s = center_length_to_span(CenterLength::new(0.5, 0.0).unwrap());
        assert_eq!((s.start, s.end), (0.5, 0.5));
        let s = center_length_to_span(CenterLength::new(0.05, 0.2).unwrap());
        assert_eq!(s.start, 0.0);
        assert_abs_diff_eq!(s.end, 0.15, epsilon = 1e-12);
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou_1d(&span(0.2, 0.6), &span(0.2, 0.6)), 1.0);
        assert_eq!(iou_1d(&span(0.0, 0.2), &span(0.4, 0.6)), 0.0);
        assert_abs_diff_eq!(iou_1d(&span(0.0, 0.2), &span(0.1, 0.3)), 1.0 / 3.0, epsilon = 1e-12);
        // zero-length conventions
        assert_eq!(iou_1d(&span(0.4, 0.4), &span(0.4, 0.4)), 1.0);
        assert_eq!(iou_1d(&span(0.4, 0.4), &span(0.5, 0.5)), 0.0);
    }

    #[test]
    fn giou_examples() {
        assert_eq!(giou_1d(&span(0.2, 0.6), &span(0.2, 0.6)), 1.0);
        assert_abs_diff_eq!(giou_1d(&span(0.0, 0.2), &span(0.1, 0.3)), 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(giou_1d(&span(0.0, 0.1), &span(0.2, 0.3)), -1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_span_distance(&span(0.2, 0.6), &span(0.2, 0.6)), 0.0);
        assert_abs_diff_eq!(l1_span_distance(&span(0.0, 0.5), &span(0.1, 0.4)), 0.2, epsilon = 1e-12);
        assert_eq!(l1_span_distance(&span(0.0, 0.0), &span(1.0, 1.0)), 2.0);
    }

    #[test]
    fn rejects_invalid() {
        assert!(MomentSpan::new(0.6, 0.5).is_err());
        assert!(MomentSpan::new(-0.1, 0.5).is_err());
        assert!(MomentSpan::new(0.1, f64::NAN).is_err());
        assert!(MomentTriplet::new(0.5, -0.1, 0.0).is_err());
        assert!(CenterLength::new(1.5, 0.1).is_err());
    }

    fn arb_span() -> impl Strategy<Value = MomentSpan> {
        (0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b)| span(a.min(b), a.max(b)))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_span(), b in arb_span()) {
            let x = iou_1d(&a, &b);
            prop_assert_eq!(x, iou_1d(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn giou_never_exceeds_iou(a in arb_span(), b in arb_span()) {
            let g = giou_1d(&a, &b);
            prop_assert!(g <= iou_1d(&a, &b) + 1e-15);
            prop_assert!(g >= -1.0);
        }

        #[test]
        fn symmetric_triplet_matches_center_length(c in 0.0f64..=1.0, l in 0.0f64..=1.0) {
            let a = triplet_to_span(MomentTriplet::new(c, 0.5 * l, 0.5 * l).unwrap());
            let b = center_length_to_span(CenterLength::new(c, l).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
