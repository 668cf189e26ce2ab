use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{footprint_from, Detection, DepthMap, EvidenceError, Footprint, Mask};
use crate::backends::BackendError;

/// An image region handed to the region–text scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    /// The `index`-th detection returned for `query`.
    Detection { query: String, index: usize },
    FullImage,
    /// Pixels not covered by any positive-object detection.
    Background { mask: Mask },
}

impl Region {
    pub fn key(&self) -> String {
        match self {
            Region::Detection { query, index } => format!("det:{query}#{index}"),
            Region::FullImage => "full".into(),
            Region::Background { mask } => format!("bg:{}", mask.to_rle()),
        }
    }
}

/// Perception over one candidate image.
pub trait Perception {
    fn image_size(&self) -> (u32, u32);
    fn detect(&self, query: &str) -> Result<Vec<Detection>, BackendError>;
    /// Compatibility of `region` with `text`, in `[0, 1]`.
    fn region_score(&self, region: &Region, text: &str) -> Result<f64, BackendError>;
    fn depth(&self) -> Result<Option<DepthMap>, BackendError>;
}

type Shared<T> = Result<Arc<T>, BackendError>;

/// Memoizes perception results for a single candidate so predicates share evidence.
pub struct EvidenceCache<'p> {
    source: &'p dyn Perception,
    width: u32,
    height: u32,
    detections: RefCell<BTreeMap<String, Shared<Vec<Detection>>>>,
    scores: RefCell<BTreeMap<(String, String), Result<f64, BackendError>>>,
    depth: RefCell<Option<Result<Option<Arc<DepthMap>>, BackendError>>>,
    footprints: RefCell<BTreeMap<(String, usize, bool), Result<Arc<Footprint>, EvidenceError>>>,
}

impl<'p> EvidenceCache<'p> {
    pub fn new(source: &'p dyn Perception) -> Self {
        let (width, height) = source.image_size();
        Self {
            source,
            width,
            height,
            detections: RefCell::default(),
            scores: RefCell::default(),
            depth: RefCell::default(),
            footprints: RefCell::default(),
        }
    }

    pub fn size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// Valid detections for `query`, sorted by descending score (stable).
    pub fn detections(&self, query: &str) -> Shared<Vec<Detection>> {
        if let Some(hit) = self.detections.borrow().get(query) {
            return hit.clone();
        }
        let result = self.source.detect(query).map(|mut dets| {
            dets.retain(|d| d.validate(self.width, self.height).is_ok());
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            Arc::new(dets)
        });
        self.detections.borrow_mut().insert(query.to_string(), result.clone());
        result
    }

    pub fn region_score(&self, region: &Region, text: &str) -> Result<f64, BackendError> {
        let key = (region.key(), text.to_string());
        if let Some(hit) = self.scores.borrow().get(&key) {
            return hit.clone();
        }
        let result = self.source.region_score(region, text).map(|s| s.clamp(0.0, 1.0));
        self.scores.borrow_mut().insert(key, result.clone());
        result
    }

    pub fn depth(&self) -> Result<Option<Arc<DepthMap>>, BackendError> {
        if let Some(hit) = self.depth.borrow().as_ref() {
            return hit.clone();
        }
        let result = self.source.depth().map(|d| d.map(Arc::new));
        *self.depth.borrow_mut() = Some(result.clone());
        result
    }

    /// Footprint of the `index`-th detection for `query`. With `with_depth`, a depth
    /// map is fetched and averaged over the mask; a missing or failed depth map
    /// leaves `mean_depth` empty.
    pub fn footprint(&self, query: &str, index: usize, with_depth: bool) -> Result<Arc<Footprint>, EvidenceError> {
        let key = (query.to_string(), index, with_depth);
        if let Some(hit) = self.footprints.borrow().get(&key) {
            return hit.clone();
        }
        let dets = self
            .detections(query)
            .map_err(|e| EvidenceError::InvalidDetection(e.to_string()))?;
        let det = dets
            .get(index)
            .ok_or_else(|| EvidenceError::InvalidDetection(format!("no detection {index} for {query:?}")))?;
        let depth = if with_depth { self.depth().ok().flatten() } else { None };
        let result = footprint_from(det, self.width, self.height, depth.as_deref()).map(Arc::new);
        self.footprints.borrow_mut().insert(key, result.clone());
        result
    }

    /// Image pixels outside every detection of the given queries.
    pub fn residual_background(&self, queries: &[String], min_score: f64) -> Mask {
        let mut covered = Mask::empty(self.width, self.height);
        for q in queries {
            let Ok(dets) = self.detections(q) else { continue };
            for d in dets.iter().filter(|d| d.score >= min_score) {
                if let Ok(u) = covered.union(&d.raster(self.width, self.height)) {
                    covered = u;
                }
            }
        }
        covered.complement()
    }
}
