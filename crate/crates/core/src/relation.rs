//! Closed-form spatial relation scores and the score-to-state mapping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::{interval_overlap, mask_metrics, EvidenceError, Footprint};
use crate::num::Scalar;
use crate::program::RelationName;

/// Three-way predicate state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Satisfied,
    Uncertain,
    Violated,
}

impl Status {
    /// 0 for violated, 1 for uncertain, 2 for satisfied.
    pub fn rank(self) -> u8 {
        match self {
            Status::Violated => 0,
            Status::Uncertain => 1,
            Status::Satisfied => 2,
        }
    }

    pub fn is_satisfied(self) -> bool {
        self == Status::Satisfied
    }

    /// Score used for families that report no continuous score.
    pub fn nominal_score(self) -> f64 {
        match self {
            Status::Satisfied => 1.0,
            Status::Uncertain => 0.5,
            Status::Violated => 0.0,
        }
    }
}

/// Satisfied/uncertain lower bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Thresholds<S = f64> {
    pub satisfied: S,
    pub uncertain: S,
}

impl<S: Scalar> Thresholds<S> {
    pub fn new(satisfied: S, uncertain: S) -> Self {
        Self { satisfied, uncertain }
    }

    pub fn relation() -> Self {
        Self::new(S::lit(0.60), S::lit(0.35))
    }

    pub fn is_valid(&self) -> bool {
        S::zero() <= self.uncertain && self.uncertain <= self.satisfied && self.satisfied <= S::one()
    }
}

/// Maps a score to a state with closed lower bounds.
pub fn state_from_score<S: Scalar>(q: S, t: Thresholds<S>) -> Status {
    if q >= t.satisfied {
        Status::Satisfied
    } else if q >= t.uncertain {
        Status::Uncertain
    } else {
        Status::Violated
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error("relation {0:?} has no scoring rule")]
    Unsupported(String),
}

/// A relation score with its intermediate terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "S: Scalar")]
pub struct RelationScore<S = f64> {
    pub relation: RelationName,
    pub value: S,
    pub components: Vec<(&'static str, S)>,
}

impl<S: Scalar> RelationScore<S> {
    pub fn component(&self, name: &str) -> Option<S> {
        self.components.iter().find(|(k, _)| *k == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Above,
    Below,
}

impl Direction {
    pub fn relation(self) -> RelationName {
        match self {
            Direction::Left => RelationName::Left,
            Direction::Right => RelationName::Right,
            Direction::Above => RelationName::Above,
            Direction::Below => RelationName::Below,
        }
    }

    fn horizontal(self) -> bool {
        matches!(self, Direction::Left | Direction::Right)
    }
}

/// Sign convention of the depth backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthOrientation {
    /// Larger values are nearer the camera (inverse depth).
    #[default]
    LargerIsNearer,
    LargerIsFarther,
}

fn frame<S: Scalar>(s: &Footprint<S>, r: &Footprint<S>) -> Result<(S, S), EvidenceError> {
    if (s.width(), s.height()) != (r.width(), r.height()) {
        return Err(EvidenceError::RasterMismatch { left: (s.width(), s.height()), right: (r.width(), r.height()) });
    }
    Ok((S::from_count(s.width().into()), S::from_count(s.height().into())))
}

/// Left/right/above/below.
pub fn score_directional<S: Scalar>(
    sub: &Footprint<S>,
    rf: &Footprint<S>,
    dir: Direction,
) -> Result<RelationScore<S>, EvidenceError> {
    let (w, h) = frame(sub, rf)?;
    let (s, r) = (&sub.bbox, &rf.bbox);
    let (cs, cr) = (sub.centroid, rf.centroid);
    let (dc, de) = match dir {
        Direction::Left => (cr[0] - cs[0], r.x0 - s.x1),
        Direction::Right => (cs[0] - cr[0], s.x0 - r.x1),
        Direction::Above => (cr[1] - cs[1], r.y0 - s.y1),
        Direction::Below => (cs[1] - cr[1], s.y0 - r.y1),
    };
    let x_ov = interval_overlap((s.x0, s.x1), (r.x0, r.x1));
    let y_ov = interval_overlap((s.y0, s.y1), (r.y0, r.y1));
    let (la, lb, om_a, om_b, db) = if dir.horizontal() {
        (w, h, x_ov, y_ov, cs[1] - cr[1])
    } else {
        (h, w, y_ov, x_ov, cs[0] - cr[0])
    };
    let l = S::lit;
    let u_c = (l(0.5) + dc / (l(0.50) * la)).clip01();
    let u_e = ((de + l(0.02) * la) / (l(0.14) * la)).clip01();
    let u_b = (l(0.75) * om_b + l(0.25) * (S::one() - db.abs() / (l(0.55) * lb)).clip01()).clip01();
    let base = (l(0.45) * u_c + l(0.35) * u_e + l(0.20) * u_b).clip01();
    let m = mask_metrics::<S>(&sub.mask, &rf.mask)?;
    let mut components = vec![
        ("u_c", u_c),
        ("u_e", u_e),
        ("u_b", u_b),
        ("base", base),
        ("omega_a", om_a),
        ("omega_b", om_b),
        ("i", m.over_smaller),
        ("c", m.containment),
    ];
    let mut num = l(0.05) * om_a + l(0.45) * m.over_smaller + l(0.30) * m.containment;
    let mut den = l(0.80);
    if dir.horizontal() {
        let u_on = support_contact(sub, rf, h).max(support_contact(rf, sub, h));
        components.push(("u_on", u_on));
        num = num + l(0.35) * u_on;
        den = den + l(0.35);
    }
    let p = num / den;
    let value = (base * (S::one() - p)).clip01();
    components.push(("penalty", p));
    Ok(RelationScore { relation: dir.relation(), value, components })
}

/// Column scan for "`top` rests on `bottom`": mean closeness and coverage combined.
fn support_contact<S: Scalar>(top: &Footprint<S>, bottom: &Footprint<S>, h: S) -> S {
    support_terms(top, bottom, h).0
}

/// Returns `(u_on, mean closeness, coverage)`.
fn support_terms<S: Scalar>(top: &Footprint<S>, bottom: &Footprint<S>, h: S) -> (S, S, S) {
    let tr = top.mask.bounds();
    let br = bottom.mask.bounds();
    let (Some(tr), Some(br)) = (tr, br) else { return (S::zero(), S::zero(), S::zero()) };
    let (c0, c1) = (tr.x0.max(br.x0), tr.x1.min(br.x1));
    if c0 >= c1 {
        return (S::zero(), S::zero(), S::zero());
    }
    let n = (c1 - c0) as usize;
    let mut top_bottom: Vec<Option<u32>> = vec![None; n];
    for (y, x0, x1) in top.mask.spans() {
        for x in x0.max(c0)..x1.min(c1) {
            let slot = &mut top_bottom[(x - c0) as usize];
            *slot = Some(slot.map_or(y, |v| v.max(y)));
        }
    }
    let mut ref_rows: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (y, x0, x1) in bottom.mask.spans() {
        for x in x0.max(c0)..x1.min(c1) {
            ref_rows[(x - c0) as usize].push(y);
        }
    }
    let tol = S::lit(0.02) * h;
    let (mut valid, mut close_sum, mut covered) = (0u64, S::zero(), 0u64);
    for (yb, rows) in top_bottom.iter().zip(&ref_rows) {
        let Some(yb) = *yb else { continue };
        valid += 1;
        let best = rows.iter().map(|&y| (i64::from(y) - i64::from(yb) - 1).unsigned_abs()).min();
        if let Some(gap) = best {
            let g = S::from_count(gap);
            close_sum = close_sum + (S::one() - g / tol).clip01();
            if g <= tol {
                covered += 1;
            }
        }
    }
    if valid == 0 {
        return (S::zero(), S::zero(), S::zero());
    }
    let nv = S::from_count(valid);
    let closeness = close_sum / nv;
    let coverage = S::from_count(covered) / nv;
    ((S::lit(0.70) * closeness + S::lit(0.30) * coverage).clip01(), closeness, coverage)
}

pub fn score_near<S: Scalar>(sub: &Footprint<S>, rf: &Footprint<S>) -> Result<RelationScore<S>, EvidenceError> {
    let (w, h) = frame(sub, rf)?;
    let diag = (w * w + h * h).sqrt();
    let (s, r) = (&sub.bbox, &rf.bbox);
    let dx = sub.centroid[0] - rf.centroid[0];
    let dy = sub.centroid[1] - rf.centroid[1];
    let dist = (dx * dx + dy * dy).sqrt();
    let gx = (s.x0.max(r.x0) - s.x1.min(r.x1)).max(S::zero());
    let gy = (s.y0.max(r.y0) - s.y1.min(r.y1)).max(S::zero());
    let edge = (gx * gx + gy * gy).sqrt();
    let scale = S::lit(0.18) * diag;
    let t_c = (S::one() - dist / scale).clip01();
    let t_e = (S::one() - edge / scale).clip01();
    let value = (S::lit(0.45) * t_c + S::lit(0.55) * t_e).clip01();
    Ok(RelationScore {
        relation: RelationName::Near,
        value,
        components: vec![("centroid_term", t_c), ("edge_term", t_e), ("edge_gap", edge)],
    })
}

/// `in` and `inside` share this box-containment score.
pub fn score_inside<S: Scalar>(sub: &Footprint<S>, rf: &Footprint<S>, relation: RelationName) -> RelationScore<S> {
    let frac = (sub.bbox.intersection_area(&rf.bbox) / sub.bbox.area()).clip01();
    let inside = if rf.bbox.contains(sub.centroid) { S::one() } else { S::zero() };
    let value = (S::lit(0.80) * frac + S::lit(0.20) * inside).clip01();
    RelationScore { relation, value, components: vec![("box_fraction", frac), ("centroid_inside", inside)] }
}

pub fn score_overlap<S: Scalar>(sub: &Footprint<S>, rf: &Footprint<S>) -> Result<RelationScore<S>, EvidenceError> {
    let m = mask_metrics::<S>(&sub.mask, &rf.mask)?;
    let value = (S::lit(0.65) * m.jaccard + S::lit(0.35) * m.over_smaller).clip01();
    Ok(RelationScore {
        relation: RelationName::Overlapping,
        value,
        components: vec![("j", m.jaccard), ("i", m.over_smaller)],
    })
}

pub fn score_on<S: Scalar>(sub: &Footprint<S>, rf: &Footprint<S>) -> Result<RelationScore<S>, EvidenceError> {
    let (_, h) = frame(sub, rf)?;
    let (u_on, closeness, coverage) = support_terms(sub, rf, h);
    let om_x = interval_overlap((sub.bbox.x0, sub.bbox.x1), (rf.bbox.x0, rf.bbox.x1));
    let above = score_directional(sub, rf, Direction::Above)?.value;
    let base = (S::lit(0.55) * u_on + S::lit(0.25) * om_x + S::lit(0.20) * above).clip01();
    let covered = mask_metrics::<S>(&sub.mask, &rf.mask)?.subject_covered;
    let value = (base - S::lit(0.25) * covered).clip01();
    Ok(RelationScore {
        relation: RelationName::On,
        value,
        components: vec![
            ("closeness", closeness),
            ("coverage", coverage),
            ("u_on", u_on),
            ("omega_x", om_x),
            ("q_above", above),
            ("base", base),
            ("inside", covered),
        ],
    })
}

pub const DEPTH_SCALE: f64 = 28.0;

/// `in_front_of` (`front = true`) or `behind`. Missing depth on either side scores 0.
pub fn score_depth<S: Scalar>(
    sub: &Footprint<S>,
    rf: &Footprint<S>,
    front: bool,
    orientation: DepthOrientation,
) -> Result<RelationScore<S>, EvidenceError> {
    let relation = if front { RelationName::InFrontOf } else { RelationName::Behind };
    let (Some(ds), Some(dr)) = (sub.mean_depth, rf.mean_depth) else {
        return Ok(RelationScore { relation, value: S::zero(), components: vec![("depth_missing", S::one())] });
    };
    let mut delta = if front { ds - dr } else { dr - ds };
    if orientation == DepthOrientation::LargerIsFarther {
        delta = -delta;
    }
    let (s, r) = (&sub.bbox, &rf.bbox);
    let align = interval_overlap((s.x0, s.x1), (r.x0, r.x1)).max(interval_overlap((s.y0, s.y1), (r.y0, r.y1)));
    let near = score_near(sub, rf)?.value;
    let u_s = (S::lit(0.60) * align + S::lit(0.40) * near).clip01();
    let order = (delta / S::lit(DEPTH_SCALE)).clip01();
    let value = (order * (S::lit(0.80) + S::lit(0.20) * u_s)).clip01();
    Ok(RelationScore {
        relation,
        value,
        components: vec![("delta_d", delta), ("alignment", align), ("q_near", near), ("u_s", u_s), ("order", order)],
    })
}

/// Dispatches to the scoring rule for `relation`.
pub fn score_relation<S: Scalar>(
    relation: &RelationName,
    sub: &Footprint<S>,
    rf: &Footprint<S>,
    orientation: DepthOrientation,
) -> Result<RelationScore<S>, ScoreError> {
    Ok(match relation {
        RelationName::Left => score_directional(sub, rf, Direction::Left)?,
        RelationName::Right => score_directional(sub, rf, Direction::Right)?,
        RelationName::Above => score_directional(sub, rf, Direction::Above)?,
        RelationName::Below => score_directional(sub, rf, Direction::Below)?,
        RelationName::Near => score_near(sub, rf)?,
        RelationName::In | RelationName::Inside => score_inside(sub, rf, relation.clone()),
        RelationName::On => score_on(sub, rf)?,
        RelationName::Overlapping => score_overlap(sub, rf)?,
        RelationName::InFrontOf => score_depth(sub, rf, true, orientation)?,
        RelationName::Behind => score_depth(sub, rf, false, orientation)?,
        RelationName::Unsupported(name) => return Err(ScoreError::Unsupported(name.clone())),
    })
}

/// Whether the relation needs depth on its footprints.
pub fn needs_depth(relation: &RelationName) -> bool {
    matches!(relation, RelationName::InFrontOf | RelationName::Behind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::{Mask, PixelRect};
    use proptest::prelude::*;

    fn fp(w: u32, h: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Footprint {
        Footprint::from_mask(Mask::from_rect(w, h, PixelRect { x0, y0, x1, y1 })).unwrap()
    }

    #[test]
    fn state_mapping_boundaries() {
        let t = Thresholds::relation();
        assert_eq!(state_from_score(0.60, t), Status::Satisfied);
        assert_eq!(state_from_score(0.35, t), Status::Uncertain);
        assert_eq!(state_from_score(0.3499, t), Status::Violated);
        assert_eq!(state_from_score(0.60f32, Thresholds::relation()), Status::Satisfied);
    }

    #[test]
    fn left_of_far_apart() {
        let s = fp(100, 100, 0, 0, 10, 10);
        let r = fp(100, 100, 90, 0, 100, 10);
        let q = score_directional(&s, &r, Direction::Left).unwrap();
        assert_eq!(q.component("u_c"), Some(1.0));
        assert_eq!(q.component("u_e"), Some(1.0));
        assert_eq!(q.component("u_b"), Some(1.0));
        assert_eq!(q.component("u_on"), Some(0.0));
        assert_eq!(q.value, 1.0);
        assert_eq!(state_from_score(q.value, Thresholds::relation()), Status::Satisfied);
        let back = score_directional(&r, &s, Direction::Left).unwrap();
        assert_eq!(state_from_score(back.value, Thresholds::relation()), Status::Violated);
    }

    #[test]
    fn left_of_identical_is_violated() {
        let s = fp(100, 100, 20, 20, 40, 40);
        let q = score_directional(&s, &s, Direction::Left).unwrap();
        assert_eq!(q.component("u_c"), Some(0.5));
        assert!(q.value < 0.35, "{q:?}");
    }

    #[test]
    fn near_touching_edges() {
        // 100x100 image: D = 100*sqrt(2); centroids 0.09D apart along x, boxes touching
        let d = 100.0 * 2f64.sqrt();
        let gap = 0.09 * d;
        let w = 4.0;
        let s = Footprint::<f64> {
            mask: Mask::from_rect(100, 100, PixelRect { x0: 0, y0: 0, x1: 1, y1: 1 }),
            bbox: crate::evidence::BBox::new(10.0, 10.0, 10.0 + w, 20.0),
            centroid: [10.0 + w / 2.0, 15.0],
            area: 1,
            mean_depth: None,
        };
        let mut r = s.clone();
        r.bbox = crate::evidence::BBox::new(10.0 + w, 10.0, 10.0 + w + 30.0, 20.0);
        r.centroid = [s.centroid[0] + gap, 15.0];
        let q = score_near(&s, &r).unwrap();
        assert!((q.value - 0.775).abs() < 1e-12, "{}", q.value);
        let far = fp(100, 100, 80, 80, 100, 100);
        assert_eq!(score_near(&fp(100, 100, 0, 0, 10, 10), &far).unwrap().value, 0.0);
        assert_eq!(score_near(&far, &far).unwrap().value, 1.0);
    }

    #[test]
    fn inside_examples() {
        let r = fp(100, 100, 0, 0, 50, 50);
        assert_eq!(score_inside(&fp(100, 100, 10, 10, 20, 20), &r, RelationName::Inside).value, 1.0);
        assert_eq!(score_inside(&fp(100, 100, 60, 60, 70, 70), &r, RelationName::In).value, 0.0);
        // half inside, centroid on the closed boundary x = 50
        let q = score_inside(&fp(100, 100, 45, 10, 55, 20), &r, RelationName::Inside);
        assert!((q.value - 0.6).abs() < 1e-12);
        assert_eq!(state_from_score(q.value, Thresholds::relation()), Status::Satisfied);
    }

    #[test]
    fn overlap_examples() {
        let a = fp(100, 100, 0, 0, 10, 10);
        assert_eq!(score_overlap(&a, &a).unwrap().value, 1.0);
        assert_eq!(score_overlap(&a, &fp(100, 100, 50, 50, 60, 60)).unwrap().value, 0.0);
        let q = score_overlap(&a, &fp(100, 100, 5, 0, 15, 10)).unwrap().value;
        assert!((q - (0.65 / 3.0 + 0.175)).abs() < 1e-12);
        assert_eq!(state_from_score(q, Thresholds::relation()), Status::Uncertain);
    }

    #[test]
    fn cube_on_table() {
        let cube = fp(100, 100, 40, 30, 60, 50);
        let table = fp(100, 100, 20, 50, 80, 70);
        let q = score_on(&cube, &table).unwrap();
        assert_eq!(q.component("u_on"), Some(1.0));
        assert_eq!(q.component("omega_x"), Some(1.0));
        assert!(q.value >= 0.80);
        let above = q.component("q_above").unwrap();
        assert!((q.value - (0.80 + 0.20 * above).min(1.0)).abs() < 1e-12);
    }

    #[test]
    fn on_without_horizontal_overlap() {
        let s = fp(100, 100, 0, 0, 10, 10);
        let r = fp(100, 100, 50, 10, 60, 20);
        let q = score_on(&s, &r).unwrap();
        assert_eq!(q.component("u_on"), Some(0.0));
        assert_eq!(q.component("omega_x"), Some(0.0));
        assert!((q.value - 0.20 * q.component("q_above").unwrap()).abs() < 1e-12);
    }

    #[test]
    fn on_full_containment_penalty() {
        let s = fp(100, 100, 40, 40, 50, 50);
        let r = fp(100, 100, 0, 0, 100, 100);
        let q = score_on(&s, &r).unwrap();
        assert_eq!(q.component("inside"), Some(1.0));
        assert!((q.value - (q.component("base").unwrap() - 0.25).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn depth_examples() {
        let s = fp(100, 100, 0, 0, 50, 50);
        assert_eq!(score_depth(&s, &s, true, DepthOrientation::default()).unwrap().value, 0.0);
        let near = s.clone().with_depth(Some(40.0));
        let far = s.clone().with_depth(Some(12.0));
        assert_eq!(score_depth(&near, &far, true, DepthOrientation::LargerIsNearer).unwrap().value, 1.0);
        assert_eq!(score_depth(&near, &far, false, DepthOrientation::LargerIsNearer).unwrap().value, 0.0);
        assert_eq!(score_depth(&near, &far, false, DepthOrientation::LargerIsFarther).unwrap().value, 1.0);
    }

    #[test]
    fn unsupported_relation() {
        let s = fp(10, 10, 0, 0, 5, 5);
        let name = RelationName::Unsupported("beside".into());
        assert!(matches!(score_relation(&name, &s, &s, DepthOrientation::default()), Err(ScoreError::Unsupported(_))));
    }

    fn arb_fp() -> impl Strategy<Value = Footprint> {
        (0u32..60, 0u32..60, 1u32..30, 1u32..30).prop_map(|(x, y, w, h)| {
            fp(64, 64, x, y, (x + w).min(64), (y + h).min(64))
        })
    }

    proptest! {
        #[test]
        fn all_scores_bounded(a in arb_fp(), b in arb_fp(), da in 0.0f64..60.0, db in 0.0f64..60.0) {
            let a = a.with_depth(Some(da));
            let b = b.with_depth(Some(db));
            for name in RelationName::SUPPORTED {
                let q = score_relation(&RelationName::parse(name), &a, &b, DepthOrientation::default()).unwrap();
                prop_assert!((0.0..=1.0).contains(&q.value), "{:?}", q);
            }
        }

        #[test]
        fn mirror_symmetry(a in arb_fp(), b in arb_fp()) {
            let mx = |f: &Footprint| Footprint::<f64>::from_mask(f.mask.mirror_x()).unwrap();
            let my = |f: &Footprint| Footprint::<f64>::from_mask(f.mask.mirror_y()).unwrap();
            let l = score_directional(&a, &b, Direction::Left).unwrap().value;
            let r = score_directional(&mx(&a), &mx(&b), Direction::Right).unwrap().value;
            prop_assert!((l - r).abs() < 1e-6);
            let up = score_directional(&a, &b, Direction::Above).unwrap().value;
            let down = score_directional(&my(&a), &my(&b), Direction::Below).unwrap().value;
            prop_assert!((up - down).abs() < 1e-6);
        }

        #[test]
        fn inside_and_overlap_translation_invariant(x in 0u32..20, y in 0u32..20, w in 1u32..20, h in 1u32..20,
                                                    x2 in 0u32..20, y2 in 0u32..20, dx in 0i64..20, dy in 0i64..20) {
            let a = fp(64, 64, x, y, x + w, y + h);
            let b = fp(64, 64, x2, y2, x2 + w, y2 + h);
            let ta = Footprint::<f64>::from_mask(a.mask.translate(dx, dy)).unwrap();
            let tb = Footprint::<f64>::from_mask(b.mask.translate(dx, dy)).unwrap();
            prop_assert_eq!(score_inside(&a, &b, RelationName::In).value, score_inside(&ta, &tb, RelationName::In).value);
            prop_assert_eq!(score_overlap(&a, &b).unwrap().value, score_overlap(&ta, &tb).unwrap().value);
        }
    }
}
