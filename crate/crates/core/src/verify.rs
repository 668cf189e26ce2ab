//! Per-predicate state computation over a candidate's evidence.

use serde::{Deserialize, Serialize};

use crate::backends::BackendError;
use crate::evidence::{Detection, EvidenceCache, Region};
use crate::program::{AttributeName, Family, ObjectDecl, ObjectId, Predicate, PredicateId, PredicateKind, SceneName, VisualProgram};
use crate::relation::{needs_depth, score_relation, state_from_score, DepthOrientation, ScoreError, Status, Thresholds};

/// MLLM-backed checks that do not go through region–text scoring.
pub trait VisualJudge {
    fn verify_text(&self, text: &str) -> Result<Status, BackendError>;
    /// Crop-level check of an action description on one region.
    fn verify_crop(&self, region: &Region, description: &str) -> Result<Status, BackendError>;
}

/// Verifier constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierConfig {
    /// Strong/weak detection confidence for counts and region selection.
    pub object_region: Thresholds,
    pub attribute: Thresholds,
    pub action: Thresholds,
    pub relation: Thresholds,
    pub min_background_ratio: f64,
    pub min_mask_area_ratio: f64,
    pub detector_confidence: f64,
    /// Forbidden detections whose mask IoU with a required object reaches this value are ignored.
    pub exclusion_overlap_iou: f64,
    pub depth_orientation: DepthOrientation,
    /// Detector query for scene/background regions.
    pub background_query: String,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            object_region: Thresholds::new(0.65, 0.35),
            attribute: Thresholds::new(0.60, 0.35),
            action: Thresholds::new(0.55, 0.35),
            relation: Thresholds::relation(),
            min_background_ratio: 0.10,
            min_mask_area_ratio: 0.0,
            detector_confidence: 0.30,
            exclusion_overlap_iou: 0.5,
            depth_orientation: DepthOrientation::LargerIsNearer,
            background_query: "background".into(),
        }
    }
}

impl VerifierConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, t) in [
            ("object_region", self.object_region),
            ("attribute", self.attribute),
            ("action", self.action),
            ("relation", self.relation),
        ] {
            if !t.is_valid() {
                return Err(format!("{name} thresholds must satisfy 0 <= uncertain <= satisfied <= 1"));
            }
        }
        for (name, v) in [
            ("min_background_ratio", self.min_background_ratio),
            ("min_mask_area_ratio", self.min_mask_area_ratio),
            ("detector_confidence", self.detector_confidence),
            ("exclusion_overlap_iou", self.exclusion_overlap_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Whether the crop verifier may be consulted for action attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Early,
    Late,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateState {
    pub predicate_id: PredicateId,
    pub family: Family,
    pub state: Status,
    /// `None` when the verifier abstained for lack of evidence.
    #[serde(default)]
    pub score: Option<f64>,
    pub note: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<(u32, u32)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<(String, f64)>,
}

impl PredicateState {
    fn new(p: &Predicate, state: Status, score: Option<f64>, note: impl Into<String>) -> Self {
        Self {
            predicate_id: p.predicate_id.clone(),
            family: p.family(),
            state,
            score,
            note: note.into(),
            counts: None,
            components: Vec::new(),
        }
    }

    /// Score used for ordering; abstentions rank as 0.
    pub fn ranking_score(&self) -> f64 {
        self.score.unwrap_or(0.0)
    }
}

/// Predicate states for one candidate, in program order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub states: Vec<PredicateState>,
}

impl StateVector {
    pub fn get(&self, id: &PredicateId) -> Option<&PredicateState> {
        self.states.iter().find(|s| &s.predicate_id == id)
    }

    pub fn status(&self, id: &PredicateId) -> Option<Status> {
        self.get(id).map(|s| s.state)
    }

    /// Predicates that are not satisfied, in program order.
    pub fn blocking(&self) -> Vec<&PredicateState> {
        self.states.iter().filter(|s| !s.state.is_satisfied()).collect()
    }

    pub fn all_satisfied(&self) -> bool {
        self.states.iter().all(|s| s.state.is_satisfied())
    }

    pub fn satisfied_count(&self) -> usize {
        self.states.iter().filter(|s| s.state.is_satisfied()).count()
    }

    pub fn mean_score(&self) -> f64 {
        if self.states.is_empty() {
            return 1.0;
        }
        self.states.iter().map(PredicateState::ranking_score).sum::<f64>() / self.states.len() as f64
    }
}

/// Three-way count state from strong and weak counts.
pub fn count_state(exact: bool, strong: u32, weak: u32, n: u32) -> Status {
    if exact {
        if strong == n && weak == n {
            Status::Satisfied
        } else if strong <= n && n <= weak {
            Status::Uncertain
        } else {
            Status::Violated
        }
    } else if strong >= n {
        Status::Satisfied
    } else if n <= weak {
        Status::Uncertain
    } else {
        Status::Violated
    }
}

/// Ranking score for counts: two-sided gap for exact, missing instances only for at-least.
pub fn count_score(exact: bool, strong: u32, n: u32) -> f64 {
    let gap = if exact { strong.abs_diff(n) } else { n.saturating_sub(strong) };
    (1.0 - f64::from(gap) / f64::from(n.max(1))).clamp(0.0, 1.0)
}

/// Region-scorer text for an attribute of an object.
pub fn attribute_phrase(label: &str, attribute: &AttributeName, value: &str, target: Option<&str>) -> String {
    match attribute {
        AttributeName::Action => match target {
            Some(t) => format!("{label} {value} {t}"),
            None => format!("{label} {value}"),
        },
        AttributeName::Pattern => format!("{label} with a {value} pattern"),
        _ => format!("{value} {label}"),
    }
}

/// Text sent to the region scorer for an attribute predicate.
pub fn attribute_query(program: &VisualProgram, p: &Predicate) -> Option<String> {
    let PredicateKind::Attribute { subject, attribute, value, target } = &p.kind else { return None };
    let target = target.as_ref().map(|t| program.label_of(t));
    Some(attribute_phrase(program.label_of(subject), attribute, value, target))
}

pub fn scene_query(attribute: &SceneName, value: &str) -> String {
    match attribute {
        SceneName::Scene | SceneName::Background => value.to_string(),
        other => format!("{value} {}", other.as_str().replace('_', " ")),
    }
}

/// Evaluates a program against one candidate's evidence.
pub struct Verifier<'a> {
    pub program: &'a VisualProgram,
    pub config: &'a VerifierConfig,
}

impl<'a> Verifier<'a> {
    pub fn new(program: &'a VisualProgram, config: &'a VerifierConfig) -> Self {
        Self { program, config }
    }

    fn object(&self, id: &ObjectId) -> Option<&'a ObjectDecl> {
        self.program.object(id)
    }

    /// Indices (into the cached, score-sorted list) of detections above `min_score`
    /// that pass the mask-area filter.
    fn qualifying(&self, cache: &EvidenceCache, query: &str, min_score: f64) -> Result<Vec<usize>, BackendError> {
        let dets = cache.detections(query)?;
        let (w, h) = cache.size();
        let total = f64::from(w) * f64::from(h);
        Ok(dets
            .iter()
            .enumerate()
            .filter(|(_, d)| d.score >= min_score && d.score >= self.config.detector_confidence)
            .filter(|(_, d)| d.raster(w, h).area() as f64 / total >= self.config.min_mask_area_ratio)
            .map(|(i, _)| i)
            .collect())
    }

    pub fn verify_count(&self, p: &Predicate, cache: &EvidenceCache) -> PredicateState {
        let (subject, n, exact) = match &p.kind {
            PredicateKind::CountAtLeast { subject, count } => (subject, *count, false),
            PredicateKind::CountExact { subject, count } => (subject, *count, true),
            _ => unreachable!("verify_count called on {:?}", p.family()),
        };
        let Some(obj) = self.object(subject) else {
            return PredicateState::new(p, Status::Uncertain, None, "unknown_subject");
        };
        let t = self.config.object_region;
        let list = match self.qualifying(cache, obj.query(), t.uncertain) {
            Ok(l) => l,
            Err(e) => return PredicateState::new(p, Status::Uncertain, None, format!("backend_failure: {e}")),
        };
        let dets = cache.detections(obj.query()).expect("cached above");
        let weak = list.len() as u32;
        let strong = list.iter().filter(|&&i| dets[i].score >= t.satisfied).count() as u32;
        let mut st = PredicateState::new(p, count_state(exact, strong, weak, n), Some(count_score(exact, strong, n)), "counted");
        st.counts = Some((strong, weak));
        st
    }

    pub fn verify_attribute(&self, p: &Predicate, cache: &EvidenceCache, judge: &dyn VisualJudge, phase: Phase) -> PredicateState {
        let PredicateKind::Attribute { subject, attribute, .. } = &p.kind else {
            unreachable!("verify_attribute called on {:?}", p.family())
        };
        let Some(obj) = self.object(subject) else {
            return PredicateState::new(p, Status::Uncertain, None, "unknown_subject");
        };
        let text = attribute_query(self.program, p).expect("attribute predicate");
        let regions = match self.qualifying(cache, obj.query(), self.config.object_region.uncertain) {
            Ok(r) if !r.is_empty() => r,
            Ok(_) => return PredicateState::new(p, Status::Uncertain, None, "no_region"),
            Err(e) => return PredicateState::new(p, Status::Uncertain, None, format!("backend_failure: {e}")),
        };
        let mut min = f64::INFINITY;
        for &index in &regions {
            let region = Region::Detection { query: obj.query().to_string(), index };
            match cache.region_score(&region, &text) {
                Ok(s) => min = min.min(s),
                Err(e) => return PredicateState::new(p, Status::Uncertain, None, format!("backend_failure: {e}")),
            }
        }
        let is_action = *attribute == AttributeName::Action;
        let t = if is_action { self.config.action } else { self.config.attribute };
        let state = state_from_score(min, t);
        if is_action && phase == Phase::Late && state != Status::Satisfied {
            let region = Region::Detection { query: obj.query().to_string(), index: regions[0] };
            if let Ok(verdict) = judge.verify_crop(&region, &text) {
                let mut st = PredicateState::new(p, verdict, Some(verdict.nominal_score()), "crop_verifier");
                st.components.push(("region_score".into(), min));
                return st;
            }
        }
        PredicateState::new(p, state, Some(min), "region_score")
    }

    /// Highest-scoring qualifying detection for an object, as a cached footprint index.
    fn bind(&self, cache: &EvidenceCache, id: &ObjectId) -> Option<(String, usize)> {
        let obj = self.object(id)?;
        let list = self.qualifying(cache, obj.query(), self.config.object_region.uncertain).ok()?;
        list.first().map(|&i| (obj.query().to_string(), i))
    }

    pub fn verify_relation(&self, p: &Predicate, cache: &EvidenceCache) -> PredicateState {
        let PredicateKind::Relation { subject, relation, reference } = &p.kind else {
            unreachable!("verify_relation called on {:?}", p.family())
        };
        if !relation.is_supported() {
            return PredicateState::new(p, Status::Uncertain, None, "unsupported_relation");
        }
        let Some((sq, si)) = self.bind(cache, subject) else {
            return PredicateState::new(p, Status::Uncertain, None, "unbound_subject");
        };
        let Some((rq, ri)) = self.bind(cache, reference) else {
            return PredicateState::new(p, Status::Uncertain, None, "unbound_reference");
        };
        let depth = needs_depth(relation);
        let (s, r) = match (cache.footprint(&sq, si, depth), cache.footprint(&rq, ri, depth)) {
            (Ok(s), Ok(r)) => (s, r),
            (Err(e), _) | (_, Err(e)) => {
                return PredicateState::new(p, Status::Uncertain, None, format!("invalid_footprint: {e}"))
            }
        };
        match score_relation(relation, &s, &r, self.config.depth_orientation) {
            Ok(q) => {
                let mut st = PredicateState::new(p, state_from_score(q.value, self.config.relation), Some(q.value), "relation_score");
                st.components = q.components.iter().map(|(k, v)| (k.to_string(), *v)).collect();
                st
            }
            Err(ScoreError::Unsupported(_)) => PredicateState::new(p, Status::Uncertain, None, "unsupported_relation"),
            Err(ScoreError::Evidence(e)) => PredicateState::new(p, Status::Uncertain, None, format!("invalid_footprint: {e}")),
        }
    }

    pub fn verify_scene(&self, p: &Predicate, cache: &EvidenceCache) -> PredicateState {
        let PredicateKind::GlobalScene { attribute, value } = &p.kind else {
            unreachable!("verify_scene called on {:?}", p.family())
        };
        let text = scene_query(attribute, value);
        let (w, h) = cache.size();
        let total = f64::from(w) * f64::from(h);
        let bq = &self.config.background_query;
        let region = cache.detections(bq).ok().and_then(|dets| {
            dets.iter().position(|d| {
                d.score >= self.config.object_region.uncertain
                    && d.raster(w, h).area() as f64 / total >= self.config.min_background_ratio
            })
        });
        let t = self.config.attribute;
        if let Some(index) = region {
            return match cache.region_score(&Region::Detection { query: bq.clone(), index }, &text) {
                Ok(s) => PredicateState::new(p, state_from_score(s, t), Some(s), "background_region"),
                Err(e) => PredicateState::new(p, Status::Uncertain, None, format!("backend_failure: {e}")),
            };
        }
        let full = match cache.region_score(&Region::FullImage, &text) {
            Ok(s) => s,
            Err(e) => return PredicateState::new(p, Status::Uncertain, None, format!("backend_failure: {e}")),
        };
        let queries: Vec<String> = self.program.positive_objects().map(|o| o.query().to_string()).collect();
        let mask = cache.residual_background(&queries, self.config.object_region.uncertain);
        if mask.area() == 0 {
            return PredicateState::new(p, state_from_score(full, t), Some(full), "full_image_only");
        }
        match cache.region_score(&Region::Background { mask }, &text) {
            Ok(bg) => {
                let s = (full + bg) / 2.0;
                let mut st = PredicateState::new(p, state_from_score(s, t), Some(s), "full_and_residual");
                st.components = vec![("full".into(), full), ("residual".into(), bg)];
                st
            }
            Err(e) => PredicateState::new(p, Status::Uncertain, None, format!("backend_failure: {e}")),
        }
    }

    pub fn verify_exclusion(&self, p: &Predicate, cache: &EvidenceCache) -> PredicateState {
        let PredicateKind::Exclusion { subject } = &p.kind else {
            unreachable!("verify_exclusion called on {:?}", p.family())
        };
        let Some(obj) = self.object(subject) else {
            return PredicateState::new(p, Status::Uncertain, None, "unknown_subject");
        };
        let (w, h) = cache.size();
        let forbidden = match cache.detections(obj.query()) {
            Ok(d) => d,
            Err(e) => return PredicateState::new(p, Status::Uncertain, None, format!("backend_failure: {e}")),
        };
        let t = self.config.object_region;
        let mut positives = Vec::new();
        for o in self.program.positive_objects() {
            if o.object_id == obj.object_id || o.query() == obj.query() {
                continue;
            }
            if let Ok(dets) = cache.detections(o.query()) {
                positives.extend(dets.iter().filter(|d| d.score >= t.uncertain).map(|d| d.raster(w, h)));
            }
        }
        let survives = |d: &Detection| {
            let m = d.raster(w, h);
            !positives.iter().any(|pm| {
                let inter = m.intersection_area(pm).unwrap_or(0) as f64;
                let union = (m.area() + pm.area()) as f64 - inter;
                union > 0.0 && inter / union >= self.config.exclusion_overlap_iou
            })
        };
        let best = forbidden
            .iter()
            .filter(|d| d.score >= self.config.detector_confidence)
            .filter(|d| survives(d))
            .map(|d| d.score)
            .fold(0.0f64, f64::max);
        let state = if best < t.uncertain {
            Status::Satisfied
        } else if best < t.satisfied {
            Status::Uncertain
        } else {
            Status::Violated
        };
        PredicateState::new(p, state, Some(1.0 - best), "max_surviving_detection")
    }

    pub fn verify_text(&self, p: &Predicate, judge: &dyn VisualJudge) -> PredicateState {
        let PredicateKind::VisibleText { text, .. } = &p.kind else {
            unreachable!("verify_text called on {:?}", p.family())
        };
        match judge.verify_text(text) {
            Ok(v) => PredicateState::new(p, v, Some(v.nominal_score()), "text_verifier"),
            Err(e) => PredicateState::new(p, Status::Uncertain, None, format!("backend_failure: {e}")),
        }
    }

    pub fn verify_predicate(&self, p: &Predicate, cache: &EvidenceCache, judge: &dyn VisualJudge, phase: Phase) -> PredicateState {
        match p.family() {
            Family::CountAtLeast | Family::CountExact => self.verify_count(p, cache),
            Family::Exclusion => self.verify_exclusion(p, cache),
            Family::Relation => self.verify_relation(p, cache),
            Family::Attribute => self.verify_attribute(p, cache, judge, phase),
            Family::GlobalScene => self.verify_scene(p, cache),
            Family::VisibleText => self.verify_text(p, judge),
        }
    }

    /// Verifies every predicate in program order. In the late phase, action
    /// attributes are re-checked with the crop verifier once they are the only
    /// predicates still blocking.
    pub fn verify_program(&self, cache: &EvidenceCache, judge: &dyn VisualJudge, phase: Phase) -> StateVector {
        let mut states: Vec<PredicateState> = self
            .program
            .predicates
            .iter()
            .map(|p| self.verify_predicate(p, cache, judge, Phase::Early))
            .collect();
        if phase == Phase::Late {
            let is_action = |p: &Predicate| matches!(&p.kind, PredicateKind::Attribute { attribute: AttributeName::Action, .. });
            let only_actions_block = states
                .iter()
                .zip(&self.program.predicates)
                .all(|(s, p)| s.state.is_satisfied() || is_action(p));
            if only_actions_block {
                for (s, p) in states.iter_mut().zip(&self.program.predicates) {
                    if !s.state.is_satisfied() {
                        *s = self.verify_attribute(p, cache, judge, Phase::Late);
                    }
                }
            }
        }
        StateVector { states }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::{EvidenceFile, FileDetection};
    use crate::program::ObjectDecl;
    use std::collections::BTreeMap;

    fn pred(id: &str, kind: PredicateKind) -> Predicate {
        let family = kind.family();
        let ordinal: usize = id.rsplit('-').next().unwrap().parse().unwrap();
        let p = Predicate::new(PredicateId::new(family, ordinal), kind);
        assert_eq!(p.predicate_id.as_str(), id);
        p
    }

    fn det(score: f64, b: [f64; 4]) -> FileDetection {
        FileDetection { score, bbox: b, mask: None }
    }

    fn evidence(dets: &[(&str, Vec<FileDetection>)]) -> EvidenceFile {
        EvidenceFile {
            width: 100,
            height: 100,
            detections: dets.iter().map(|(q, d)| (q.to_string(), d.clone())).collect(),
            depth: None,
            region_scores: BTreeMap::new(),
            text_verdicts: BTreeMap::new(),
            crop_verdicts: BTreeMap::new(),
        }
    }

    fn oid(s: &str) -> ObjectId {
        ObjectId::new(s)
    }

    #[test]
    fn count_examples() {
        assert_eq!(count_state(true, 3, 3, 3), Status::Satisfied);
        assert_eq!(count_state(true, 2, 4, 3), Status::Uncertain);
        assert_eq!(count_state(false, 0, 0, 1), Status::Violated);
        assert_eq!(count_state(false, 0, 1, 1), Status::Uncertain);
        assert_eq!(count_score(true, 5, 3), 1.0 - 2.0 / 3.0);
        assert_eq!(count_score(false, 5, 3), 1.0);
    }

    #[test]
    fn count_with_distractor() {
        let program = VisualProgram::new(
            "three cats",
            vec![ObjectDecl::new("cat", "cat")],
            vec![pred("cex-0", PredicateKind::CountExact { subject: oid("cat"), count: 3 })],
        );
        let ev = evidence(&[(
            "cat",
            vec![det(0.9, [0., 0., 10., 10.]), det(0.9, [20., 0., 30., 10.]), det(0.9, [40., 0., 50., 10.]), det(0.4, [60., 0., 70., 10.])],
        )])
        .load()
        .unwrap();
        let cfg = VerifierConfig::default();
        let cache = EvidenceCache::new(&ev);
        let sv = Verifier::new(&program, &cfg).verify_program(&cache, &ev, Phase::Early);
        assert_eq!(sv.states[0].counts, Some((3, 4)));
        assert_eq!(sv.states[0].state, Status::Uncertain);
    }

    #[test]
    fn attribute_min_aggregation_and_phases() {
        let program = VisualProgram::new(
            "two red dogs running",
            vec![ObjectDecl::new("dog", "dog")],
            vec![
                pred("cal-0", PredicateKind::CountAtLeast { subject: oid("dog"), count: 2 }),
                pred("att-0", PredicateKind::Attribute { subject: oid("dog"), attribute: AttributeName::Color, value: "red".into(), target: None }),
                pred("att-1", PredicateKind::Attribute { subject: oid("dog"), attribute: AttributeName::Action, value: "running".into(), target: None }),
            ],
        );
        let mut doc = evidence(&[("dog", vec![det(0.9, [0., 0., 10., 10.]), det(0.8, [20., 0., 30., 10.])])]);
        doc.region_scores.insert("dog#0".into(), [("red dog".to_string(), 0.9), ("dog running".to_string(), 0.5)].into());
        doc.region_scores.insert("dog#1".into(), [("red dog".to_string(), 0.4), ("dog running".to_string(), 0.5)].into());
        doc.crop_verdicts.insert("dog running".into(), Status::Satisfied);
        let ev = doc.load().unwrap();
        let cfg = VerifierConfig::default();
        let v = Verifier::new(&program, &cfg);
        let cache = EvidenceCache::new(&ev);
        let early = v.verify_program(&cache, &ev, Phase::Early);
        assert_eq!(early.states[1].score, Some(0.4));
        assert_eq!(early.states[1].state, Status::Uncertain);
        assert_eq!(early.states[2].state, Status::Uncertain);
        // color still blocks, so the late pass leaves the action on region scores
        let late = v.verify_program(&cache, &ev, Phase::Late);
        assert_eq!(late.states[2].note, "region_score");
    }

    #[test]
    fn late_action_uses_crop_verdict() {
        let program = VisualProgram::new(
            "a dog running",
            vec![ObjectDecl::new("dog", "dog")],
            vec![
                pred("cal-0", PredicateKind::CountAtLeast { subject: oid("dog"), count: 1 }),
                pred("att-0", PredicateKind::Attribute { subject: oid("dog"), attribute: AttributeName::Action, value: "running".into(), target: None }),
            ],
        );
        let mut doc = evidence(&[("dog", vec![det(0.9, [0., 0., 10., 10.])])]);
        doc.region_scores.insert("dog#0".into(), [("dog running".to_string(), 0.5)].into());
        doc.crop_verdicts.insert("dog running".into(), Status::Satisfied);
        let ev = doc.load().unwrap();
        let cfg = VerifierConfig::default();
        let cache = EvidenceCache::new(&ev);
        let sv = Verifier::new(&program, &cfg).verify_program(&cache, &ev, Phase::Late);
        assert_eq!(sv.states[1].state, Status::Satisfied);
        assert_eq!(sv.states[1].note, "crop_verifier");
    }

    #[test]
    fn relation_binding_and_depth() {
        let program = VisualProgram::new(
            "a cat left of a dog",
            vec![ObjectDecl::new("cat", "cat"), ObjectDecl::new("dog", "dog")],
            vec![
                pred("rel-0", PredicateKind::Relation { subject: oid("cat"), relation: crate::program::RelationName::Left, reference: oid("dog") }),
                pred("rel-1", PredicateKind::Relation { subject: oid("cat"), relation: crate::program::RelationName::Behind, reference: oid("dog") }),
            ],
        );
        let cfg = VerifierConfig::default();
        let ev = evidence(&[("cat", vec![det(0.9, [0., 0., 10., 10.])]), ("dog", vec![det(0.9, [90., 0., 100., 10.])])]).load().unwrap();
        let cache = EvidenceCache::new(&ev);
        let sv = Verifier::new(&program, &cfg).verify_program(&cache, &ev, Phase::Early);
        assert_eq!(sv.states[0].state, Status::Satisfied);
        assert_eq!(sv.states[0].score, Some(1.0));
        assert_eq!(sv.states[1].state, Status::Violated);
        assert_eq!(sv.states[1].score, Some(0.0));

        let ev = evidence(&[("dog", vec![det(0.9, [90., 0., 100., 10.])])]).load().unwrap();
        let cache = EvidenceCache::new(&ev);
        let sv = Verifier::new(&program, &cfg).verify_program(&cache, &ev, Phase::Early);
        assert_eq!(sv.states[0].state, Status::Uncertain);
        assert_eq!(sv.states[0].note, "unbound_subject");
    }

    #[test]
    fn scene_paths() {
        let program = VisualProgram::new(
            "a dog in a forest",
            vec![ObjectDecl::new("dog", "dog")],
            vec![pred("scn-0", PredicateKind::GlobalScene { attribute: SceneName::Scene, value: "forest".into() })],
        );
        let cfg = VerifierConfig::default();
        let mut doc = evidence(&[("dog", vec![det(0.9, [0., 0., 50., 100.])])]);
        doc.region_scores.insert("full".into(), [("forest".to_string(), 0.7)].into());
        doc.region_scores.insert("background".into(), [("forest".to_string(), 0.5)].into());
        let ev = doc.clone().load().unwrap();
        let cache = EvidenceCache::new(&ev);
        let st = Verifier::new(&program, &cfg).verify_scene(&program.predicates[0], &cache);
        assert!((st.score.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(st.state, Status::Satisfied);

        doc.detections.insert("background".into(), vec![det(0.9, [50., 0., 100., 100.])]);
        doc.region_scores.insert("background#0".into(), [("forest".to_string(), 0.8)].into());
        let ev = doc.load().unwrap();
        let cache = EvidenceCache::new(&ev);
        let st = Verifier::new(&program, &cfg).verify_scene(&program.predicates[0], &cache);
        assert_eq!((st.state, st.score, st.note.as_str()), (Status::Satisfied, Some(0.8), "background_region"));
    }

    #[test]
    fn exclusion_ignores_overlapping_required_object() {
        let program = VisualProgram::new(
            "a dog, no wolf",
            vec![ObjectDecl::new("dog", "dog"), ObjectDecl::new("wolf", "wolf")],
            vec![
                pred("cal-0", PredicateKind::CountAtLeast { subject: oid("dog"), count: 1 }),
                pred("exc-0", PredicateKind::Exclusion { subject: oid("wolf") }),
            ],
        );
        let cfg = VerifierConfig::default();
        let ev = evidence(&[("dog", vec![det(0.9, [0., 0., 10., 10.])]), ("wolf", vec![det(0.9, [0., 0., 10., 10.])])]).load().unwrap();
        let cache = EvidenceCache::new(&ev);
        let v = Verifier::new(&program, &cfg);
        assert_eq!(v.verify_exclusion(&program.predicates[1], &cache).state, Status::Satisfied);
        let ev = evidence(&[("dog", vec![det(0.9, [0., 0., 10., 10.])]), ("wolf", vec![det(0.9, [50., 50., 60., 60.])])]).load().unwrap();
        let cache = EvidenceCache::new(&ev);
        let st = v.verify_exclusion(&program.predicates[1], &cache);
        assert_eq!(st.state, Status::Violated);
        assert!((st.score.unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn text_passthrough_and_failure() {
        let program = VisualProgram::new(
            "sign saying OPEN",
            vec![],
            vec![pred("txt-0", PredicateKind::VisibleText { text: "OPEN".into(), subject: None })],
        );
        let cfg = VerifierConfig::default();
        let mut doc = evidence(&[]);
        let ev = doc.clone().load().unwrap();
        let v = Verifier::new(&program, &cfg);
        assert_eq!(v.verify_text(&program.predicates[0], &ev).state, Status::Uncertain);
        doc.text_verdicts.insert("OPEN".into(), Status::Violated);
        let ev = doc.load().unwrap();
        assert_eq!(v.verify_text(&program.predicates[0], &ev).state, Status::Violated);
    }

    #[test]
    fn empty_program_passes_vacuously() {
        let program = VisualProgram::new("", vec![], vec![]);
        let cfg = VerifierConfig::default();
        let ev = evidence(&[]).load().unwrap();
        let cache = EvidenceCache::new(&ev);
        let sv = Verifier::new(&program, &cfg).verify_program(&cache, &ev, Phase::Late);
        assert!(sv.states.is_empty() && sv.all_satisfied());
    }
}
