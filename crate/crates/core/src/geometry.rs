//! Axis-aligned box arithmetic and the spatial-relation representation of a
//! proposal.
//!
//! Every proposal is summarized by two numbers relating it to the
//! maximum-scored proposal of its image: the intersection-over-union with it
//! and the distance between their centers, normalized by the image diagonal so
//! both coordinates live in `[0, 1]` regardless of resolution.

use crate::dataset::BoundingBox;
use serde::{Deserialize, Serialize};

/// Spatial relation of a proposal to its image's maximum-scored proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalRepr {
    /// IoU with the maximum-scored proposal, in `[0, 1]`.
    pub iou_to_max: f64,
    /// Center distance to the maximum-scored proposal over the image
    /// diagonal, in `[0, 1]`.
    pub center_dist: f64,
}

impl ProposalRepr {
    pub fn as_array(&self) -> [f64; 2] {
        [self.iou_to_max, self.center_dist]
    }
}

pub fn area(b: &BoundingBox) -> f64 {
    (b.x2 - b.x1) * (b.y2 - b.y1)
}

fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w > 0.0 && h > 0.0 {
        w * h
    } else {
        0.0
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (area(a) + area(b) - inter)
}

/// Overlap kernel `2·S(a∩b) / (S(a∩b) + S(a∪b))`.
///
/// This is the chi-squared kernel on the two areas, so Gram matrices built
/// from it are positive semidefinite; it equals `2u/(1+u)` for `u = iou(a,b)`.
pub fn chi2_overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = area(a) + area(b) - inter;
    2.0 * inter / (inter + union)
}

/// Representation of `s` relative to the maximum-scored proposal `s_max` of
/// an image of the given size.
pub fn proposal_repr(
    s: &BoundingBox,
    s_max: &BoundingBox,
    width: f64,
    height: f64,
) -> ProposalRepr {
    let (cx, cy) = s.center();
    let (mx, my) = s_max.center();
    let dist = ((cx - mx).powi(2) + (cy - my).powi(2)).sqrt();
    let diagonal = (width * width + height * height).sqrt();
    ProposalRepr {
        iou_to_max: iou(s, s_max),
        center_dist: dist / diagonal,
    }
}
