//! Detections, footprints, mask/interval metrics and the per-candidate evidence cache.

mod cache;
mod file;
mod mask;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;

pub use cache::{EvidenceCache, Perception, Region};
pub use file::{EvidenceFile, FileDetection, LoadedEvidence};
pub use mask::{Mask, PixelRect};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvidenceError {
    #[error("mask has zero area")]
    DegenerateMask,
    #[error("raster size mismatch: {left:?} vs {right:?}")]
    RasterMismatch { left: (u32, u32), right: (u32, u32) },
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("invalid run-length encoding: {0}")]
    InvalidRle(String),
}

/// Axis-aligned box with `x0 < x1`, `y0 < y1` in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct BBox<S = f64> {
    pub x0: S,
    pub y0: S,
    pub x1: S,
    pub y1: S,
}

impl<S: Scalar> BBox<S> {
    pub fn new(x0: S, y0: S, x1: S, y1: S) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn from_rect(r: PixelRect) -> Self {
        Self::new(
            S::from_count(r.x0.into()),
            S::from_count(r.y0.into()),
            S::from_count(r.x1.into()),
            S::from_count(r.y1.into()),
        )
    }

    pub fn width(&self) -> S {
        self.x1 - self.x0
    }

    pub fn height(&self) -> S {
        self.y1 - self.y0
    }

    pub fn area(&self) -> S {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &Self) -> S {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(S::zero());
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(S::zero());
        w * h
    }

    /// Closed-bounds point test.
    pub fn contains(&self, p: [S; 2]) -> bool {
        self.x0 <= p[0] && p[0] <= self.x1 && self.y0 <= p[1] && p[1] <= self.y1
    }
}

/// One detector proposal. `bbox` is `[x0, y0, x1, y1]` in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label_query: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Mask>,
}

impl Detection {
    pub fn validate(&self, width: u32, height: u32) -> Result<(), EvidenceError> {
        let [x0, y0, x1, y1] = self.bbox;
        let (w, h) = (f64::from(width), f64::from(height));
        if !(0.0..=1.0).contains(&self.score) {
            return Err(EvidenceError::InvalidDetection(format!("score {} outside [0,1]", self.score)));
        }
        if !(x0 < x1 && y0 < y1) {
            return Err(EvidenceError::InvalidDetection(format!("empty box {:?}", self.bbox)));
        }
        if x0 < 0.0 || y0 < 0.0 || x1 > w || y1 > h {
            return Err(EvidenceError::InvalidDetection(format!(
                "box {:?} outside {width}x{height}",
                self.bbox
            )));
        }
        if let Some(m) = &self.mask {
            if (m.width(), m.height()) != (width, height) {
                return Err(EvidenceError::RasterMismatch { left: (m.width(), m.height()), right: (width, height) });
            }
            if m.area() == 0 {
                return Err(EvidenceError::DegenerateMask);
            }
        }
        Ok(())
    }

    /// The detection mask, or the rasterized box when no mask was returned.
    pub fn raster(&self, width: u32, height: u32) -> Mask {
        match &self.mask {
            Some(m) => m.clone(),
            None => Mask::from_box(width, height, self.bbox),
        }
    }
}

/// Dense per-pixel depth in backend units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn constant(width: u32, height: u32, value: f64) -> Self {
        Self { width, height, values: vec![value; (width * height) as usize] }
    }

    pub fn mean_over(&self, mask: &Mask) -> Result<f64, EvidenceError> {
        if (mask.width(), mask.height()) != (self.width, self.height)
            || self.values.len() != (self.width as usize) * (self.height as usize)
        {
            return Err(EvidenceError::RasterMismatch {
                left: (mask.width(), mask.height()),
                right: (self.width, self.height),
            });
        }
        let area = mask.area();
        if area == 0 {
            return Err(EvidenceError::DegenerateMask);
        }
        let w = self.width as usize;
        let sum: f64 = mask
            .spans()
            .map(|(y, x0, x1)| {
                let row = y as usize * w;
                self.values[row + x0 as usize..row + x1 as usize].iter().sum::<f64>()
            })
            .sum();
        Ok(sum / area as f64)
    }
}

/// Visual evidence for one object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Footprint<S = f64> {
    pub mask: Mask,
    /// Tight bounds of `mask`.
    pub bbox: BBox<S>,
    /// Mean of mask pixel centers.
    pub centroid: [S; 2],
    pub area: u64,
    pub mean_depth: Option<S>,
}

impl<S: Scalar> Footprint<S> {
    pub fn from_mask(mask: Mask) -> Result<Self, EvidenceError> {
        let rect = mask.bounds().ok_or(EvidenceError::DegenerateMask)?;
        let area = mask.area();
        let (sx, sy) = mask.center_sums();
        let n = area as f64;
        Ok(Self {
            bbox: BBox::from_rect(rect),
            centroid: [S::lit(sx / n), S::lit(sy / n)],
            area,
            mask,
            mean_depth: None,
        })
    }

    pub fn with_depth(mut self, depth: Option<S>) -> Self {
        self.mean_depth = depth;
        self
    }

    pub fn width(&self) -> u32 {
        self.mask.width()
    }

    pub fn height(&self) -> u32 {
        self.mask.height()
    }
}

/// Builds a footprint from a detection, falling back to the rasterized box.
pub fn footprint_from<S: Scalar>(
    det: &Detection,
    width: u32,
    height: u32,
    depth: Option<&DepthMap>,
) -> Result<Footprint<S>, EvidenceError> {
    let fp = Footprint::<S>::from_mask(det.raster(width, height))?;
    let mean = match depth {
        Some(d) => Some(S::lit(d.mean_over(&fp.mask)?)),
        None => None,
    };
    Ok(fp.with_depth(mean))
}

/// Normalized overlap of two closed intervals.
pub fn interval_overlap<S: Scalar>(a: (S, S), b: (S, S)) -> S {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(S::zero());
    let denom = (a.1 - a.0).min(b.1 - b.0).max(S::one());
    (inter / denom).clip01()
}

/// Jaccard, intersection over smaller, and max containment of two masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(bound = "S: Scalar")]
pub struct MaskMetrics<S = f64> {
    pub jaccard: S,
    pub over_smaller: S,
    pub containment: S,
    /// `|Ms ∩ Mr| / |Ms|`
    pub subject_covered: S,
}

pub fn mask_metrics<S: Scalar>(ms: &Mask, mr: &Mask) -> Result<MaskMetrics<S>, EvidenceError> {
    let (a, b) = (ms.area(), mr.area());
    let inter = ms.intersection_area(mr)?;
    if a == 0 || b == 0 {
        return Err(EvidenceError::DegenerateMask);
    }
    let (fa, fb, fi) = (S::from_count(a), S::from_count(b), S::from_count(inter));
    let union = fa + fb - fi;
    Ok(MaskMetrics {
        jaccard: (fi / union).clip01(),
        over_smaller: (fi / fa.min(fb)).clip01(),
        containment: (fi / fa).max(fi / fb).clip01(),
        subject_covered: (fi / fa).clip01(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(x: u32, y: u32, s: u32) -> Mask {
        Mask::from_rect(100, 100, PixelRect { x0: x, y0: y, x1: x + s, y1: y + s })
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(interval_overlap((0.0, 10.0), (0.0, 10.0)), 1.0);
        assert_eq!(interval_overlap((0.0, 10.0), (20.0, 30.0)), 0.0);
        assert_eq!(interval_overlap((0.0, 10.0), (5.0, 25.0)), 0.5);
        // short intervals use a denominator of at least one pixel
        assert_eq!(interval_overlap((0.0, 0.5), (0.0, 0.5)), 0.5);
    }

    #[test]
    fn metric_examples() {
        let a = square(0, 0, 10);
        let m: MaskMetrics = mask_metrics(&a, &a).unwrap();
        assert_eq!((m.jaccard, m.over_smaller, m.containment), (1.0, 1.0, 1.0));
        let m: MaskMetrics = mask_metrics(&a, &square(50, 50, 10)).unwrap();
        assert_eq!((m.jaccard, m.over_smaller, m.containment), (0.0, 0.0, 0.0));
        let m: MaskMetrics = mask_metrics(&a, &square(5, 0, 10)).unwrap();
        assert_eq!(m.jaccard, 50.0 / 150.0);
        assert_eq!((m.over_smaller, m.containment), (0.5, 0.5));
        assert_eq!(mask_metrics::<f64>(&a, &Mask::empty(100, 100)), Err(EvidenceError::DegenerateMask));
    }

    #[test]
    fn box_fallback_footprint() {
        let det = Detection { label_query: "dog".into(), score: 0.9, bbox: [10.0, 10.0, 20.0, 20.0], mask: None };
        let fp: Footprint = footprint_from(&det, 100, 100, None).unwrap();
        assert_eq!(fp.area, 100);
        assert_eq!(fp.centroid, [15.0, 15.0]);
        assert_eq!(fp.bbox, BBox::new(10.0, 10.0, 20.0, 20.0));
        let d = DepthMap::constant(100, 100, 7.0);
        let fp: Footprint<f32> = footprint_from(&det, 100, 100, Some(&d)).unwrap();
        assert_eq!(fp.mean_depth, Some(7.0));
    }

    #[test]
    fn l_shaped_centroid_is_pixel_mean() {
        // vertical bar x in [0,2), y in [0,6) plus foot x in [2,6), y in [4,6)
        let m = Mask::from_fn(10, 10, |x, y| (x < 2 && y < 6) || (x < 6 && (4..6).contains(&y)));
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..10 {
            for x in 0..10 {
                if m.contains(x, y) {
                    sx += f64::from(x) + 0.5;
                    sy += f64::from(y) + 0.5;
                    n += 1.0;
                }
            }
        }
        let det = Detection { label_query: "l".into(), score: 0.8, bbox: [0.0, 0.0, 6.0, 6.0], mask: Some(m) };
        let fp: Footprint = footprint_from(&det, 10, 10, None).unwrap();
        assert!((fp.centroid[0] - sx / n).abs() < 1e-12 && (fp.centroid[1] - sy / n).abs() < 1e-12);
        assert_ne!(fp.centroid, [3.0, 3.0]);
        assert!(fp.bbox.contains(fp.centroid));
    }

    #[test]
    fn detection_validation() {
        let mut det = Detection { label_query: "x".into(), score: 0.5, bbox: [0.0, 0.0, 5.0, 5.0], mask: None };
        assert!(det.validate(10, 10).is_ok());
        det.bbox = [5.0, 0.0, 5.0, 5.0];
        assert!(det.validate(10, 10).is_err());
        det.bbox = [0.0, 0.0, 11.0, 5.0];
        assert!(det.validate(10, 10).is_err());
        det.bbox = [0.0, 0.0, 5.0, 5.0];
        det.mask = Some(Mask::empty(10, 10));
        assert_eq!(det.validate(10, 10), Err(EvidenceError::DegenerateMask));
    }

    fn arb_nonempty(w: u32, h: u32) -> impl Strategy<Value = Mask> {
        proptest::collection::vec(any::<bool>(), (w * h) as usize)
            .prop_filter("non-empty", |v| v.iter().any(|b| *b))
            .prop_map(move |v| Mask::from_fn(w, h, |x, y| v[(y * w + x) as usize]))
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_symmetric(a in arb_nonempty(9, 9), b in arb_nonempty(9, 9)) {
            let ab: MaskMetrics = mask_metrics(&a, &b).unwrap();
            let ba: MaskMetrics = mask_metrics(&b, &a).unwrap();
            for v in [ab.jaccard, ab.over_smaller, ab.containment, ab.subject_covered] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(ab.jaccard, ba.jaccard);
            prop_assert_eq!(ab.over_smaller, ba.over_smaller);
            prop_assert_eq!(ab.containment, ba.containment);
        }

        #[test]
        fn overlap_bounded_and_symmetric(a0 in -50.0f64..50.0, la in 0.0f64..40.0, b0 in -50.0f64..50.0, lb in 0.0f64..40.0) {
            let (a, b) = ((a0, a0 + la), (b0, b0 + lb));
            let v = interval_overlap(a, b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, interval_overlap(b, a));
        }

        #[test]
        fn centroid_inside_tight_box(m in arb_nonempty(11, 7)) {
            let fp: Footprint = Footprint::from_mask(m).unwrap();
            prop_assert!(fp.bbox.contains(fp.centroid));
            prop_assert!(fp.bbox.area() >= fp.area as f64);
        }
    }
}
