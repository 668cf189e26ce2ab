//! Synthetic scenes: layout from a program, generation noise and instruction edits.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NoiseConfig;
use crate::controller::instructions::{attribute_head, scene_head};
use crate::evidence::{DepthMap, Footprint, Mask, PixelRect};
use crate::program::{ObjectId, PredicateKind, RelationName, VisualProgram};
use crate::relation::{needs_depth, score_relation, DepthOrientation, Thresholds};
use crate::verify::{attribute_phrase, scene_query};

/// Depth of pixels not covered by any instance.
pub const BACKGROUND_DEPTH: f64 = 5.0;
const BASE_DEPTH: f64 = 20.0;
/// Depth step between layers ordered by in-front-of/behind.
pub const DEPTH_STEP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrState {
    pub value: String,
    pub target: Option<String>,
    /// Rendered so that region scoring cannot tell either way.
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub label: String,
    pub rect: PixelRect,
    pub depth: f64,
    pub attrs: BTreeMap<String, AttrState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    /// The first instance of each label is its most salient one.
    pub instances: Vec<Instance>,
    /// Scene-level descriptions that hold for the whole image.
    pub tags: BTreeSet<String>,
    pub texts: BTreeSet<String>,
    /// Program the scene was rendered from.
    pub program: Arc<VisualProgram>,
}

/// Why a layout attempt produced no scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BuildError {
    /// The constraints contradict each other.
    Infeasible(String),
    /// This random layout failed; another draw may succeed.
    Retry,
}

pub fn label_matches(label: &str, query: &str) -> bool {
    let q = query.trim().to_lowercase();
    let l = label.to_lowercase();
    q == l || q == format!("{l}s") || q == format!("{l}es")
}

fn overlaps(a: &PixelRect, b: &PixelRect, margin: u32) -> bool {
    a.x0 < b.x1 + margin && b.x0 < a.x1 + margin && a.y0 < b.y1 + margin && b.y0 < a.y1 + margin
}

impl Scene {
    pub fn instances_of(&self, label: &str) -> Vec<usize> {
        (0..self.instances.len()).filter(|&i| self.instances[i].label == label).collect()
    }

    /// Region-scorer response for `text` on instance `i`. With `truth`, ambiguous
    /// renderings count as correct.
    pub fn phrase_score(&self, i: usize, text: &str, truth: bool) -> f64 {
        let inst = &self.instances[i];
        for (name, a) in &inst.attrs {
            let attribute = crate::program::AttributeName::parse(name);
            if attribute_phrase(&inst.label, &attribute, &a.value, a.target.as_deref()) == text {
                return if a.ambiguous && !truth { 0.5 } else { 0.85 };
            }
        }
        if text == inst.label {
            0.85
        } else {
            0.15
        }
    }

    pub fn tag_score(&self, text: &str) -> f64 {
        if self.tags.contains(text) {
            0.85
        } else {
            0.15
        }
    }

    /// Nearer instances (larger depth) are painted over farther ones.
    pub fn depth_map(&self) -> DepthMap {
        let mut map = DepthMap::constant(self.width, self.height, BACKGROUND_DEPTH);
        let mut order: Vec<usize> = (0..self.instances.len()).collect();
        order.sort_by(|&a, &b| self.instances[a].depth.total_cmp(&self.instances[b].depth));
        for i in order {
            let r = self.instances[i].rect;
            for y in r.y0..r.y1 {
                for x in r.x0..r.x1 {
                    map.values[(y * self.width + x) as usize] = self.instances[i].depth;
                }
            }
        }
        map
    }

    fn footprint(&self, i: usize, depth: Option<&DepthMap>) -> Footprint {
        let mask = Mask::from_rect(self.width, self.height, self.instances[i].rect);
        let d = depth.map(|m| m.mean_over(&mask).expect("scene rasters agree"));
        Footprint::from_mask(mask).expect("instance rects are non-empty").with_depth(d)
    }

    fn random_rect<R: Rng>(&self, rng: &mut R, w: u32, h: u32) -> PixelRect {
        let x0 = rng.gen_range(0..=self.width - w);
        let y0 = rng.gen_range(0..=self.height - h);
        PixelRect { x0, y0, x1: x0 + w, y1: y0 + h }
    }

    /// A free spot of the given size, avoiding every instance except `skip`.
    fn free_rect<R: Rng>(&self, rng: &mut R, w: u32, h: u32, skip: Option<usize>) -> Option<PixelRect> {
        (0..200).map(|_| self.random_rect(rng, w, h)).find(|r| {
            self.instances.iter().enumerate().all(|(j, o)| Some(j) == skip || !overlaps(r, &o.rect, 2))
        })
    }

    fn primary(&self, label: &str) -> Option<usize> {
        self.instances.iter().position(|i| i.label == label)
    }
}

/// Per-object requirements derived from the program.
struct Plan {
    counts: Vec<u32>,
    attrs: Vec<BTreeMap<String, AttrState>>,
    container: Vec<bool>,
    level: Vec<u32>,
}

fn plan(program: &VisualProgram) -> Result<Plan, BuildError> {
    let idx = |id: &ObjectId| program.objects.iter().position(|o| &o.object_id == id);
    let n = program.objects.len();
    let mut exact: Vec<Option<u32>> = vec![None; n];
    let mut at_least = vec![0u32; n];
    let mut counted = vec![false; n];
    for p in &program.predicates {
        let Some(i) = p.kind.subject().and_then(idx) else { continue };
        match &p.kind {
            PredicateKind::CountExact { count, .. } => {
                if exact[i].is_some_and(|e| e != *count) {
                    return Err(BuildError::Infeasible(format!("conflicting exact counts on {}", program.objects[i].label)));
                }
                exact[i] = Some(*count);
                counted[i] = true;
            }
            PredicateKind::CountAtLeast { count, .. } => {
                at_least[i] = at_least[i].max(*count);
                counted[i] = true;
            }
            _ => {}
        }
    }
    let mut counts = Vec::with_capacity(n);
    for (i, o) in program.objects.iter().enumerate() {
        let c = match exact[i] {
            Some(e) if e < at_least[i] => {
                return Err(BuildError::Infeasible(format!("count bounds on {} contradict", o.label)));
            }
            Some(e) => e,
            None if counted[i] => at_least[i],
            None if program.exclusion_only(&o.object_id) => 0,
            None => 1,
        };
        if c > 6 {
            return Err(BuildError::Infeasible(format!("too many {}", o.label)));
        }
        counts.push(c);
    }

    let mut attrs: Vec<BTreeMap<String, AttrState>> = vec![BTreeMap::new(); n];
    let mut container = vec![false; n];
    let mut edges = Vec::new();
    for p in &program.predicates {
        match &p.kind {
            PredicateKind::Attribute { subject, attribute, value, target } => {
                let i = idx(subject).ok_or_else(|| BuildError::Infeasible("unknown subject".into()))?;
                let state = AttrState {
                    value: value.clone(),
                    target: target.as_ref().map(|t| program.label_of(t).to_string()),
                    ambiguous: false,
                };
                match attrs[i].get(attribute.as_str()) {
                    Some(prev) if prev != &state => {
                        return Err(BuildError::Infeasible(format!(
                            "{} cannot be both {} and {value}",
                            program.objects[i].label, prev.value
                        )));
                    }
                    _ => {
                        attrs[i].insert(attribute.as_str().to_string(), state);
                    }
                }
            }
            PredicateKind::Relation { subject, relation, reference } => {
                let (s, r) = (idx(subject), idx(reference));
                let (Some(s), Some(r)) = (s, r) else {
                    return Err(BuildError::Infeasible("relation on undeclared object".into()));
                };
                if counts[s] == 0 || counts[r] == 0 || s == r {
                    return Err(BuildError::Infeasible("relation on an absent object".into()));
                }
                if !relation.is_supported() {
                    return Err(BuildError::Infeasible(format!("relation {relation} has no layout")));
                }
                match relation {
                    RelationName::In | RelationName::Inside | RelationName::On => container[r] = true,
                    RelationName::InFrontOf => edges.push((s, r)),
                    RelationName::Behind => edges.push((r, s)),
                    _ => {}
                }
            }
            _ => {}
        }
    }

    // Longest-path layering: (near, far) edges put `near` one level above `far`.
    let mut level = vec![0u32; n];
    for _ in 0..=n {
        let mut changed = false;
        for &(near, far) in &edges {
            if level[near] < level[far] + 1 {
                level[near] = level[far] + 1;
                changed = true;
            }
        }
        if !changed {
            return Ok(Plan { counts, attrs, container, level });
        }
    }
    Err(BuildError::Infeasible("cyclic depth ordering".into()))
}

fn object_size<R: Rng>(rng: &mut R, container: bool) -> (u32, u32) {
    if container {
        (rng.gen_range(40..=56), rng.gen_range(30..=42))
    } else {
        (rng.gen_range(14..=24), rng.gen_range(14..=24))
    }
}

/// Rect for the subject of `relation` relative to `r`, or `None` when it does not fit.
fn relative_rect<R: Rng>(rng: &mut R, relation: &RelationName, r: PixelRect, w: u32, h: u32, size: u32) -> Option<PixelRect> {
    let (rw, rh) = (r.x1 - r.x0, r.y1 - r.y0);
    let cy = (r.y0 + r.y1) as i64 / 2;
    let cx = (r.x0 + r.x1) as i64 / 2;
    let (w, h) = match relation {
        RelationName::In | RelationName::Inside => (w.min(rw.saturating_sub(8)), h.min(rh.saturating_sub(8))),
        RelationName::On => (w.min(rw), h),
        RelationName::Overlapping => (rw, rh),
        _ => (w, h),
    };
    if w < 4 || h < 4 {
        return None;
    }
    let (w, h) = (w as i64, h as i64);
    let gap = rng.gen_range(16..=24i64);
    let jitter = rng.gen_range(-3..=3i64);
    let (x0, y0) = match relation {
        RelationName::Left => (r.x0 as i64 - gap - w, cy - h / 2 + jitter),
        RelationName::Right => (r.x1 as i64 + gap, cy - h / 2 + jitter),
        RelationName::Above => (cx - w / 2 + jitter, r.y0 as i64 - gap - h),
        RelationName::Below => (cx - w / 2 + jitter, r.y1 as i64 + gap),
        RelationName::Near => {
            let dx = (rw as i64 + w) / 4;
            let side = if rng.gen_bool(0.5) { 1 } else { -1 };
            (cx + side * dx - w / 2, cy - h / 2 + jitter)
        }
        RelationName::In | RelationName::Inside => {
            (rng.gen_range(r.x0 as i64 + 4..=r.x1 as i64 - 4 - w), rng.gen_range(r.y0 as i64 + 4..=r.y1 as i64 - 4 - h))
        }
        RelationName::On => (rng.gen_range(r.x0 as i64..=r.x1 as i64 - w), r.y0 as i64 - h),
        RelationName::Overlapping => {
            let dx = (rw as i64 * 15 / 100).max(1);
            (r.x0 as i64 + if rng.gen_bool(0.5) { dx } else { -dx }, r.y0 as i64)
        }
        RelationName::InFrontOf | RelationName::Behind => {
            if rng.gen_bool(0.5) {
                (r.x1 as i64, cy - h / 2 + jitter)
            } else {
                (r.x0 as i64 - w, cy - h / 2 + jitter)
            }
        }
        RelationName::Unsupported(_) => return None,
    };
    let s = size as i64;
    if x0 < 0 || y0 < 0 || x0 + w > s || y0 + h > s {
        return None;
    }
    Some(PixelRect { x0: x0 as u32, y0: y0 as u32, x1: (x0 + w) as u32, y1: (y0 + h) as u32 })
}

/// One random layout attempt for `program` on a `size`×`size` canvas.
pub fn build<R: Rng>(program: &Arc<VisualProgram>, rng: &mut R, size: u32) -> Result<Scene, BuildError> {
    let plan = plan(program)?;
    let mut owner = Vec::new();
    let mut scene = Scene {
        width: size,
        height: size,
        instances: Vec::new(),
        tags: BTreeSet::new(),
        texts: BTreeSet::new(),
        program: program.clone(),
    };
    let mut dims = Vec::new();
    for (oi, o) in program.objects.iter().enumerate() {
        let (w, h) = object_size(rng, plan.container[oi]);
        for _ in 0..plan.counts[oi] {
            owner.push(oi);
            dims.push((w, h));
            scene.instances.push(Instance {
                label: o.label.clone(),
                rect: PixelRect { x0: 0, y0: 0, x1: 1, y1: 1 },
                depth: BASE_DEPTH + DEPTH_STEP * f64::from(plan.level[oi]),
                attrs: plan.attrs[oi].clone(),
            });
        }
    }
    let mut pending: Vec<Option<Instance>> = std::mem::take(&mut scene.instances).into_iter().map(Some).collect();
    let mut placed: Vec<Option<Instance>> = vec![None; pending.len()];
    let primary_of = |oi: usize| owner.iter().position(|&o| o == oi);
    let oidx = |id: &ObjectId| program.objects.iter().position(|o| &o.object_id == id);

    let fits = |placed: &[Option<Instance>], rect: &PixelRect, allow: Option<usize>| {
        placed
            .iter()
            .enumerate()
            .all(|(j, p)| Some(j) == allow || p.as_ref().is_none_or(|p| !overlaps(rect, &p.rect, 2)))
    };
    let place_free = |rng: &mut R, placed: &mut Vec<Option<Instance>>, pending: &mut Vec<Option<Instance>>, i: usize| {
        let (w, h) = dims[i];
        for _ in 0..200 {
            let x0 = rng.gen_range(0..=size - w);
            let y0 = rng.gen_range(0..=size - h);
            let rect = PixelRect { x0, y0, x1: x0 + w, y1: y0 + h };
            if fits(placed, &rect, None) {
                let mut inst = pending[i].take().expect("unplaced");
                inst.rect = rect;
                placed[i] = Some(inst);
                return true;
            }
        }
        false
    };

    for p in &program.predicates {
        let PredicateKind::Relation { subject, relation, reference } = &p.kind else { continue };
        let (Some(s), Some(r)) = (oidx(subject).and_then(primary_of), oidx(reference).and_then(primary_of)) else {
            continue;
        };
        if placed[r].is_none() && !place_free(rng, &mut placed, &mut pending, r) {
            return Err(BuildError::Retry);
        }
        if placed[s].is_some() {
            continue;
        }
        let rrect = placed[r].as_ref().expect("placed above").rect;
        let (w, h) = dims[s];
        let rect = relative_rect(rng, relation, rrect, w, h, size).ok_or(BuildError::Retry)?;
        if !fits(&placed, &rect, Some(r)) {
            return Err(BuildError::Retry);
        }
        let mut inst = pending[s].take().expect("unplaced");
        inst.rect = rect;
        placed[s] = Some(inst);
    }
    for i in 0..placed.len() {
        if placed[i].is_none() && !place_free(rng, &mut placed, &mut pending, i) {
            return Err(BuildError::Retry);
        }
    }
    scene.instances = placed.into_iter().map(|p| p.expect("all placed")).collect();

    for p in &program.predicates {
        match &p.kind {
            PredicateKind::GlobalScene { attribute, value } => {
                scene.tags.insert(scene_query(attribute, value));
            }
            PredicateKind::VisibleText { text, .. } => {
                scene.texts.insert(text.clone());
            }
            _ => {}
        }
    }
    Ok(scene)
}

fn flipped_value(value: &str) -> String {
    format!("not {value}")
}

/// Applies generation noise. `scale` multiplies every channel rate.
pub fn apply_noise<R: Rng>(scene: &mut Scene, noise: &NoiseConfig, scale: f64, rng: &mut R) {
    let program = scene.program.clone();
    let chance = |rng: &mut R, rate: f64| rng.gen_bool((rate * scale).clamp(0.0, 1.0));

    for o in program.positive_objects() {
        if chance(rng, noise.drop_object) {
            scene.instances.retain(|i| i.label != o.label);
        }
    }
    for o in program.positive_objects() {
        let has_count = program.counts_for(&o.object_id).next().is_some();
        let present = scene.instances_of(&o.label);
        if !has_count || present.is_empty() || !chance(rng, noise.count_delta) {
            continue;
        }
        if present.len() >= 2 && rng.gen_bool(0.5) {
            scene.instances.remove(*present.last().expect("non-empty"));
        } else {
            add_instances(scene, &o.label, 1, rng);
        }
    }
    for p in &program.predicates {
        match &p.kind {
            PredicateKind::Attribute { subject, attribute, .. } if chance(rng, noise.attribute_flip) => {
                let label = program.label_of(subject).to_string();
                let clear = rng.gen_bool(0.5);
                for i in scene.instances_of(&label) {
                    if let Some(a) = scene.instances[i].attrs.get_mut(attribute.as_str()) {
                        if clear {
                            a.value = flipped_value(&a.value);
                        } else {
                            a.ambiguous = true;
                        }
                    }
                }
            }
            PredicateKind::Relation { subject, relation, reference } if chance(rng, noise.relation_violate) => {
                violate_relation(scene, program.label_of(subject), relation, program.label_of(reference), rng);
            }
            PredicateKind::GlobalScene { attribute, value } if chance(rng, noise.scene_flip) => {
                scene.tags.remove(&scene_query(attribute, value));
            }
            PredicateKind::VisibleText { text, .. } if chance(rng, noise.text_drop) => {
                scene.texts.remove(text);
            }
            _ => {}
        }
    }
}

fn violate_relation<R: Rng>(scene: &mut Scene, subject: &str, relation: &RelationName, reference: &str, rng: &mut R) {
    let (Some(s), Some(r)) = (scene.primary(subject), scene.primary(reference)) else { return };
    if needs_depth(relation) {
        let rd = scene.instances[r].depth;
        let d = if *relation == RelationName::InFrontOf { (rd - DEPTH_STEP).max(0.0) } else { rd + DEPTH_STEP };
        for i in scene.instances_of(subject) {
            scene.instances[i].depth = d;
        }
        return;
    }
    let (w, h) = (scene.instances[s].rect.x1 - scene.instances[s].rect.x0, scene.instances[s].rect.y1 - scene.instances[s].rect.y0);
    let rf = scene.footprint(r, None);
    let limit = Thresholds::<f64>::relation().uncertain;
    for _ in 0..200 {
        let Some(rect) = scene.free_rect(rng, w, h, Some(s)) else { return };
        let old = std::mem::replace(&mut scene.instances[s].rect, rect);
        let q = score_relation(relation, &scene.footprint(s, None), &rf, DepthOrientation::default()).map(|q| q.value);
        if q.is_ok_and(|q| q < limit) {
            return;
        }
        scene.instances[s].rect = old;
    }
}

/// Adds `k` instances of `label`, copying the look of an existing one.
pub fn add_instances<R: Rng>(scene: &mut Scene, label: &str, k: u32, rng: &mut R) {
    let template = scene.primary(label).map(|i| scene.instances[i].clone());
    let program = scene.program.clone();
    let (attrs, depth, (w, h)) = match template {
        Some(t) => (t.attrs, t.depth, (t.rect.x1 - t.rect.x0, t.rect.y1 - t.rect.y0)),
        None => {
            let attrs = plan(&program)
                .ok()
                .and_then(|p| program.objects.iter().position(|o| o.label == label).map(|i| p.attrs[i].clone()))
                .unwrap_or_default();
            (attrs, BASE_DEPTH, object_size(rng, false))
        }
    };
    for _ in 0..k {
        let rect = scene.free_rect(rng, w, h, None).unwrap_or_else(|| scene.random_rect(rng, w, h));
        scene.instances.push(Instance { label: label.to_string(), rect, depth, attrs: attrs.clone() });
    }
}

/// Edit operation recovered from an instruction.
#[derive(Debug, Clone, PartialEq)]
pub enum EditOp {
    Add { label: String, k: u32 },
    Remove { label: String },
    Attribute { label: String, attribute: String, state: AttrState },
    Scene { tag: String },
}

fn known_label<'a>(program: &'a VisualProgram, label: &str) -> Option<&'a str> {
    program.objects.iter().find(|o| o.label == label).map(|o| o.label.as_str())
}

/// Recovers the edit operation from an instruction, using the scene's program to
/// resolve labels and attribute/scene values.
pub fn parse_instruction(program: &VisualProgram, text: &str) -> Option<EditOp> {
    if let Some(rest) = text.strip_prefix("Add ") {
        let (k, rest) = rest.split_once(" more ")?;
        let (label, _) = rest.split_once(" so that ")?;
        let k: u32 = k.parse().ok().filter(|k| *k > 0)?;
        return known_label(program, label).map(|l| EditOp::Add { label: l.into(), k });
    }
    if let Some(rest) = text.strip_prefix("Remove only the extra ") {
        let (label, _) = rest.split_once(", ")?;
        return known_label(program, label).map(|l| EditOp::Remove { label: l.into() });
    }
    for p in &program.predicates {
        match &p.kind {
            PredicateKind::Attribute { subject, attribute, value, target } => {
                let label = program.label_of(subject);
                let t = target.as_ref().map(|t| program.label_of(t));
                if text.starts_with(&attribute_head(label, attribute, value, t)) {
                    return Some(EditOp::Attribute {
                        label: label.into(),
                        attribute: attribute.as_str().into(),
                        state: AttrState { value: value.clone(), target: t.map(Into::into), ambiguous: false },
                    });
                }
            }
            PredicateKind::GlobalScene { attribute, value } if text.starts_with(&scene_head(attribute, value)) => {
                return Some(EditOp::Scene { tag: scene_query(attribute, value) });
            }
            _ => {}
        }
    }
    None
}

pub fn apply_edit<R: Rng>(scene: &mut Scene, op: &EditOp, rng: &mut R) {
    match op {
        EditOp::Add { label, k } => add_instances(scene, label, *k, rng),
        EditOp::Remove { label } => {
            let present = scene.instances_of(label);
            // Prefer a secondary instance; the first one is the main subject.
            let pick = if present.len() > 1 { present[1..].choose(rng).copied() } else { present.first().copied() };
            if let Some(i) = pick {
                scene.instances.remove(i);
            }
        }
        EditOp::Attribute { label, attribute, state } => {
            for i in scene.instances_of(label) {
                scene.instances[i].attrs.insert(attribute.clone(), state.clone());
            }
        }
        EditOp::Scene { tag } => {
            scene.tags.insert(tag.clone());
        }
    }
}

/// Relation score between the main instances of two labels.
pub fn relation_value(scene: &Scene, subject: &str, relation: &RelationName, reference: &str) -> Option<f64> {
    let (s, r) = (scene.primary(subject)?, scene.primary(reference)?);
    let depth = needs_depth(relation).then(|| scene.depth_map());
    let q = score_relation(relation, &scene.footprint(s, depth.as_ref()), &scene.footprint(r, depth.as_ref()), DepthOrientation::default());
    q.ok().map(|q| q.value)
}
