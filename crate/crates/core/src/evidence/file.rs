use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Detection, DepthMap, EvidenceError, Mask, Perception, Region};
use crate::backends::BackendError;
use crate::relation::Status;
use crate::verify::VisualJudge;

/// Detection entry as stored in an evidence file; `mask` is a `value,count` RLE string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDetection {
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

/// Offline evidence for one image.
///
/// `region_scores` is keyed by region (`full`, `background`, or `<query>#<index>`)
/// and then by query text. `text_verdicts` and `crop_verdicts` stand in for the
/// MLLM text and crop verifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceFile {
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub detections: BTreeMap<String, Vec<FileDetection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<Vec<f64>>,
    #[serde(default)]
    pub region_scores: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub text_verdicts: BTreeMap<String, Status>,
    #[serde(default)]
    pub crop_verdicts: BTreeMap<String, Status>,
}

/// Parsed evidence file with decoded masks.
#[derive(Debug, Clone)]
pub struct LoadedEvidence {
    doc: EvidenceFile,
    detections: BTreeMap<String, Vec<Detection>>,
    depth: Option<DepthMap>,
}

impl EvidenceFile {
    pub fn from_json(text: &str) -> Result<LoadedEvidence, EvidenceError> {
        let doc: EvidenceFile =
            serde_json::from_str(text).map_err(|e| EvidenceError::InvalidDetection(e.to_string()))?;
        doc.load()
    }

    pub fn load(self) -> Result<LoadedEvidence, EvidenceError> {
        let (w, h) = (self.width, self.height);
        if w == 0 || h == 0 {
            return Err(EvidenceError::InvalidDetection("image size must be positive".into()));
        }
        let mut detections = BTreeMap::new();
        for (query, list) in &self.detections {
            let mut out = Vec::with_capacity(list.len());
            for fd in list {
                let mask = fd.mask.as_deref().map(|t| Mask::from_rle(w, h, t)).transpose()?;
                let det = Detection { label_query: query.clone(), score: fd.score, bbox: fd.bbox, mask };
                det.validate(w, h)?;
                out.push(det);
            }
            detections.insert(query.clone(), out);
        }
        let depth = match &self.depth {
            Some(v) if v.len() != (w as usize) * (h as usize) => {
                return Err(EvidenceError::RasterMismatch { left: (v.len() as u32, 1), right: (w, h) })
            }
            Some(v) => Some(DepthMap { width: w, height: h, values: v.clone() }),
            None => None,
        };
        for scores in self.region_scores.values() {
            if let Some((t, s)) = scores.iter().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
                return Err(EvidenceError::InvalidDetection(format!("region score {s} for {t:?} outside [0,1]")));
            }
        }
        Ok(LoadedEvidence { doc: self, detections, depth })
    }
}

impl LoadedEvidence {
    pub fn document(&self) -> &EvidenceFile {
        &self.doc
    }
}

fn file_region_key(region: &Region) -> String {
    match region {
        Region::Detection { query, index } => format!("{query}#{index}"),
        Region::FullImage => "full".into(),
        Region::Background { .. } => "background".into(),
    }
}

impl Perception for LoadedEvidence {
    fn image_size(&self) -> (u32, u32) {
        (self.doc.width, self.doc.height)
    }

    fn detect(&self, query: &str) -> Result<Vec<Detection>, BackendError> {
        Ok(self.detections.get(query).cloned().unwrap_or_default())
    }

    fn region_score(&self, region: &Region, text: &str) -> Result<f64, BackendError> {
        let key = file_region_key(region);
        self.doc
            .region_scores
            .get(&key)
            .and_then(|m| m.get(text))
            .copied()
            .ok_or_else(|| BackendError::Missing(format!("no score for region {key} and text {text:?}")))
    }

    fn depth(&self) -> Result<Option<DepthMap>, BackendError> {
        Ok(self.depth.clone())
    }
}

impl VisualJudge for LoadedEvidence {
    fn verify_text(&self, text: &str) -> Result<Status, BackendError> {
        self.doc
            .text_verdicts
            .get(text)
            .copied()
            .ok_or_else(|| BackendError::Missing(format!("no text verdict for {text:?}")))
    }

    fn verify_crop(&self, _region: &Region, description: &str) -> Result<Status, BackendError> {
        self.doc
            .crop_verdicts
            .get(description)
            .copied()
            .ok_or_else(|| BackendError::Missing(format!("no crop verdict for {description:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"{
        "width": 4, "height": 3,
        "detections": {"cat": [{"score": 0.9, "box": [1, 1, 3, 2], "mask": "0,5,1,2,0,5"}]},
        "depth": [1,1,1,1, 1,5,7,1, 1,1,1,1],
        "region_scores": {"cat#0": {"black cat": 0.8}},
        "text_verdicts": {"OPEN": "satisfied"}
    }"#;

    #[test]
    fn loads_and_serves_evidence() {
        let ev = EvidenceFile::from_json(DOC).unwrap();
        let dets = ev.detect("cat").unwrap();
        assert_eq!(dets[0].mask.as_ref().unwrap().area(), 2);
        assert!(ev.detect("dog").unwrap().is_empty());
        let region = Region::Detection { query: "cat".into(), index: 0 };
        assert_eq!(ev.region_score(&region, "black cat").unwrap(), 0.8);
        assert!(ev.region_score(&Region::FullImage, "x").is_err());
        let d = ev.depth().unwrap().unwrap();
        assert_eq!(d.mean_over(dets[0].mask.as_ref().unwrap()).unwrap(), 6.0);
        assert_eq!(ev.verify_text("OPEN").unwrap(), Status::Satisfied);
    }

    #[test]
    fn rejects_malformed_evidence() {
        assert!(EvidenceFile::from_json(r#"{"width": 4}"#).is_err());
        let bad_mask = DOC.replace("0,5,1,2,0,5", "0,5,1,2");
        assert!(EvidenceFile::from_json(&bad_mask).is_err());
        let bad_box = DOC.replace("[1, 1, 3, 2]", "[3, 1, 1, 2]");
        assert!(EvidenceFile::from_json(&bad_box).is_err());
        let bad_depth = DOC.replace("1,5,7,1,", "");
        assert!(EvidenceFile::from_json(&bad_depth).is_err());
    }
}
