//! Deterministic program normalization and the review trigger.
//!
//! Rules run in a fixed order. Nonsemantic notes never trigger review; any fix
//! or warning does. A program that has been through [`normalize`] once yields an
//! empty fix list on a second pass; warnings repeat for names that stay
//! unsupported until a reviewer repairs them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::program::{
    AttributeName, Family, ObjectDecl, ObjectId, Predicate, PredicateId, PredicateKind, ProgramError,
    RelationName, SceneName, VisualProgram,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    // nonsemantic
    FramingObject,
    DuplicatePredicate,
    DescriptionCanonical,
    // fixes
    DuplicateObject,
    TextCleanup,
    NameCanonical,
    SelfRelation,
    SelfAction,
    TypeAttribute,
    SizeNonContrastive,
    ColorExclusion,
    MissingObject,
    AddExistence,
    RedundantLowerBound,
    ExclusionConflict,
    ExclusionDuplicateLabel,
    // warnings
    UnsupportedRelation,
    UnsupportedAttribute,
    UnsupportedScene,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub rule: Rule,
    pub ids: Vec<String>,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationReport {
    pub nonsemantic_changes: Vec<ReportEntry>,
    pub fixes: Vec<ReportEntry>,
    pub warnings: Vec<ReportEntry>,
}

impl NormalizationReport {
    pub fn review_required(&self) -> bool {
        !self.fixes.is_empty() || !self.warnings.is_empty()
    }

    pub fn has_fix(&self, rule: Rule) -> bool {
        self.fixes.iter().any(|e| e.rule == rule)
    }

    pub fn has_warning(&self, rule: Rule) -> bool {
        self.warnings.iter().any(|e| e.rule == rule)
    }

    pub fn has_note(&self, rule: Rule) -> bool {
        self.nonsemantic_changes.iter().any(|e| e.rule == rule)
    }

    fn note(&mut self, rule: Rule, ids: Vec<String>, detail: impl Into<String>) {
        self.nonsemantic_changes.push(ReportEntry { rule, ids, detail: detail.into() });
    }

    fn fix(&mut self, rule: Rule, ids: Vec<String>, detail: impl Into<String>) {
        self.fixes.push(ReportEntry { rule, ids, detail: detail.into() });
    }

    fn warn(&mut self, rule: Rule, ids: Vec<String>, detail: impl Into<String>) {
        self.warnings.push(ReportEntry { rule, ids, detail: detail.into() });
    }
}

/// True when the reviewer backend should be consulted.
pub fn review_gate(report: &NormalizationReport) -> bool {
    report.review_required()
}

pub const COLOR_WORDS: &[&str] = &[
    "black", "white", "red", "green", "yellow", "blue", "brown", "orange", "pink", "purple", "gray", "grey",
];

const TYPE_ATTRIBUTES: &[&str] = &[
    "type", "kind", "category", "breed", "species", "variety", "model", "make", "genre", "sort",
];

const COMPARATIVE_SIZE_WORDS: &[&str] = &[
    "larger", "smaller", "bigger", "taller", "shorter", "wider", "narrower", "longer", "than", "largest",
    "smallest", "biggest", "tallest", "shortest",
];

const FRAMING_NOUNS: &[&str] = &["photo", "picture", "image", "photograph", "snapshot"];

pub(crate) fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fold(s: &str) -> String {
    collapse_ws(s).to_lowercase()
}

/// Lower-cased, underscore/hyphen-free form used for vocabulary lookups.
fn name_key(raw: &str) -> String {
    fold(&raw.replace(['_', '-'], " "))
}

pub fn canonical_relation(raw: &str) -> Option<RelationName> {
    let mut key = name_key(raw);
    for prefix in ["is ", "to the ", "on the "] {
        if let Some(rest) = key.strip_prefix(prefix) {
            if !rest.is_empty() {
                key = rest.to_string();
            }
        }
    }
    for suffix in [" of", " to", " from", " with"] {
        if let Some(rest) = key.strip_suffix(suffix) {
            if !rest.is_empty() {
                key = rest.to_string();
            }
        }
    }
    let name = match key.as_str() {
        "left" | "leftward" | "left side" => RelationName::Left,
        "right" | "rightward" | "right side" => RelationName::Right,
        "above" | "over" => RelationName::Above,
        "below" | "under" | "beneath" | "underneath" => RelationName::Below,
        "near" | "next" | "beside" | "close" | "by" | "nearby" | "adjacent" => RelationName::Near,
        "in" => RelationName::In,
        "inside" | "within" => RelationName::Inside,
        "on" | "on top" | "atop" | "upon" | "top" => RelationName::On,
        "overlapping" | "overlap" | "overlaps" | "intersecting" | "intersects" => RelationName::Overlapping,
        "in front" | "front" => RelationName::InFrontOf,
        "behind" | "in back" | "back" => RelationName::Behind,
        _ => return None,
    };
    Some(name)
}

pub fn canonical_attribute(raw: &str) -> Option<AttributeName> {
    let name = match name_key(raw).as_str() {
        "color" | "colour" | "colors" | "colours" => AttributeName::Color,
        "material" | "texture" | "made of" => AttributeName::Material,
        "shape" | "form" => AttributeName::Shape,
        "pattern" | "print" => AttributeName::Pattern,
        "size" => AttributeName::Size,
        "pose" | "posture" => AttributeName::Pose,
        "state" | "condition" => AttributeName::State,
        "action" | "activity" | "verb" | "behavior" | "behaviour" | "doing" => AttributeName::Action,
        "other" => AttributeName::Other,
        _ => return None,
    };
    Some(name)
}

pub fn canonical_scene(raw: &str) -> Option<SceneName> {
    let name = match name_key(raw).as_str() {
        "scene" | "setting" | "location" | "environment" | "place" => SceneName::Scene,
        "background" | "backdrop" => SceneName::Background,
        "lighting" | "light" => SceneName::Lighting,
        "weather" => SceneName::Weather,
        "time of day" | "time" => SceneName::TimeOfDay,
        "style" | "art style" | "medium" => SceneName::Style,
        _ => return None,
    };
    Some(name)
}

fn is_type_attribute(name: &AttributeName) -> bool {
    matches!(name, AttributeName::Unsupported(raw) if TYPE_ATTRIBUTES.contains(&name_key(raw).as_str()))
}

pub fn is_contrastive_size(value: &str, target: Option<&ObjectId>) -> bool {
    target.is_some() || fold(value).split(' ').any(|w| COMPARATIVE_SIZE_WORDS.contains(&w))
}

fn strip_article(s: &str) -> &str {
    for a in ["a ", "an ", "the "] {
        if let Some(rest) = s.strip_prefix(a) {
            return rest;
        }
    }
    s
}

fn is_framing_label(label: &str, source_prompt: &str) -> bool {
    let l = fold(label);
    let bare = strip_article(&l);
    if let Some(noun) = bare.strip_suffix(" of") {
        return FRAMING_NOUNS.contains(&noun);
    }
    if !FRAMING_NOUNS.contains(&bare) {
        return false;
    }
    // A bare framing noun counts only when the prompt opens with "<article> <noun> of".
    let prompt = fold(source_prompt);
    let prompt = strip_article(&prompt);
    prompt.starts_with(&format!("{bare} of "))
}

fn label_from_id(id: &ObjectId) -> String {
    let spaced = id.as_str().replace(['_', '-'], " ");
    let trimmed = spaced.trim_end_matches(|c: char| c.is_ascii_digit());
    let label = collapse_ws(trimmed);
    if label.is_empty() {
        id.as_str().to_string()
    } else {
        label
    }
}

fn ids(preds: &[&Predicate]) -> Vec<String> {
    preds.iter().map(|p| p.predicate_id.0.clone()).collect()
}

struct Pass {
    prog: VisualProgram,
    report: NormalizationReport,
}

impl Pass {
    fn drop_predicates(&mut self, rule: Rule, as_fix: bool, detail: &str, pred: impl Fn(&Predicate, &VisualProgram) -> bool) {
        let prog = &self.prog;
        let doomed: Vec<PredicateId> = prog
            .predicates
            .iter()
            .filter(|p| pred(p, prog))
            .map(|p| p.predicate_id.clone())
            .collect();
        for id in doomed {
            self.prog.predicates.retain(|p| p.predicate_id != id);
            if as_fix {
                self.report.fix(rule, vec![id.0], detail);
            } else {
                self.report.note(rule, vec![id.0], detail);
            }
        }
    }

    fn remove_object(&mut self, id: &ObjectId) {
        self.prog.objects.retain(|o| &o.object_id != id);
        self.prog.predicates.retain(|p| !p.kind.object_refs().contains(&id));
    }

    fn referenced(&self, id: &ObjectId) -> bool {
        self.prog.predicates.iter().any(|p| p.kind.object_refs().contains(&id))
    }

    fn dedupe_predicate_content(&mut self) -> Vec<String> {
        let mut seen: Vec<PredicateKind> = Vec::new();
        let mut dropped = Vec::new();
        self.prog.predicates.retain(|p| {
            if seen.contains(&p.kind) {
                dropped.push(p.predicate_id.0.clone());
                false
            } else {
                seen.push(p.kind.clone());
                true
            }
        });
        dropped
    }

    fn fresh_id(&self, family: Family) -> PredicateId {
        PredicateId::new(family, self.prog.next_ordinal(family))
    }

    // --- nonsemantic -----------------------------------------------------

    fn framing_objects(&mut self) {
        let framing: Vec<ObjectId> = self
            .prog
            .objects
            .iter()
            .filter(|o| is_framing_label(&o.label, &self.prog.source_prompt))
            .map(|o| o.object_id.clone())
            .collect();
        for id in framing {
            self.remove_object(&id);
            self.report.note(Rule::FramingObject, vec![id.0], "framing phrase parsed as an object");
        }
    }

    fn duplicate_predicates(&mut self) {
        let mut by_id: BTreeMap<PredicateId, PredicateKind> = BTreeMap::new();
        let mut out: Vec<Predicate> = Vec::with_capacity(self.prog.predicates.len());
        let mut pending = std::mem::take(&mut self.prog.predicates);
        pending.sort_by(|a, b| a.canonical_key().cmp(&b.canonical_key()));
        let mut renames = Vec::new();
        for p in pending {
            if out.iter().any(|q| q.kind == p.kind) {
                self.report.note(Rule::DuplicatePredicate, vec![p.predicate_id.0.clone()], "duplicate predicate removed");
                continue;
            }
            if by_id.contains_key(&p.predicate_id) {
                renames.push(p);
                continue;
            }
            by_id.insert(p.predicate_id.clone(), p.kind.clone());
            out.push(p);
        }
        self.prog.predicates = out;
        for mut p in renames {
            let old = p.predicate_id.clone();
            p.predicate_id = self.fresh_id(p.family());
            self.report.note(
                Rule::DuplicatePredicate,
                vec![old.0, p.predicate_id.0.clone()],
                "duplicate predicate identifier reassigned",
            );
            self.prog.predicates.push(p);
        }
    }

    fn canonical_descriptions(&mut self) {
        fn canon(d: &mut Option<String>) -> bool {
            let Some(text) = d.as_ref() else { return false };
            let folded = fold(text);
            let next = (!folded.is_empty()).then_some(folded);
            if next != *d {
                *d = next;
                true
            } else {
                false
            }
        }
        let mut touched = Vec::new();
        for o in &mut self.prog.objects {
            if canon(&mut o.description) {
                touched.push(o.object_id.0.clone());
            }
        }
        for p in &mut self.prog.predicates {
            if canon(&mut p.description) {
                touched.push(p.predicate_id.0.clone());
            }
        }
        if !touched.is_empty() {
            self.report.note(Rule::DescriptionCanonical, touched, "free-form descriptions canonicalized");
        }
    }

    // --- fixes -----------------------------------------------------------

    fn merge_into(&mut self, keep: usize, drop: usize) {
        let dropped = self.prog.objects[drop].clone();
        let kept = &mut self.prog.objects[keep];
        for alias in std::iter::once(&dropped.label).chain(dropped.aliases.iter()) {
            if fold(alias) != fold(&kept.label) && !kept.aliases.iter().any(|a| fold(a) == fold(alias)) {
                kept.aliases.push(alias.clone());
            }
        }
        if kept.proposal_text.is_none() {
            kept.proposal_text = dropped.proposal_text.clone();
        }
        let keep_id = kept.object_id.clone();
        self.prog.objects.remove(drop);
        for p in &mut self.prog.predicates {
            for r in p.kind.object_refs_mut() {
                if *r == dropped.object_id {
                    *r = keep_id.clone();
                }
            }
        }
    }

    fn duplicate_objects(&mut self) {
        let mut i = 0;
        while i < self.prog.objects.len() {
            let mut j = i + 1;
            while j < self.prog.objects.len() {
                let (a, b) = (&self.prog.objects[i], &self.prog.objects[j]);
                let same_id = a.object_id == b.object_id;
                let same_label = fold(&a.label) == fold(&b.label)
                    && !self.prog.exclusion_only(&a.object_id)
                    && !self.prog.exclusion_only(&b.object_id);
                if same_id || same_label {
                    let detail = if same_id { "duplicate object id" } else { "duplicate object label" };
                    let ids = vec![a.object_id.0.clone(), b.object_id.0.clone()];
                    self.merge_into(i, j);
                    self.report.fix(Rule::DuplicateObject, ids, detail);
                } else {
                    j += 1;
                }
            }
            i += 1;
        }
        let dropped = self.dedupe_predicate_content();
        if !dropped.is_empty() {
            self.report.fix(Rule::DuplicateObject, dropped, "predicates duplicated by object merge");
        }
    }

    fn clean_text(&mut self) {
        for o in &mut self.prog.objects {
            let mut changed = false;
            let label = collapse_ws(&o.label);
            let label = if label.is_empty() { label_from_id(&o.object_id) } else { label };
            if label != o.label {
                o.label = label;
                changed = true;
            }
            if let Some(pt) = &o.proposal_text {
                let cleaned = collapse_ws(pt);
                let next = (!cleaned.is_empty()).then_some(cleaned);
                if next != o.proposal_text {
                    o.proposal_text = next;
                    changed = true;
                }
            }
            let mut aliases: Vec<String> = Vec::with_capacity(o.aliases.len());
            for a in &o.aliases {
                let a = collapse_ws(a);
                if a.is_empty() || fold(&a) == fold(&o.label) || aliases.iter().any(|x| fold(x) == fold(&a)) {
                    continue;
                }
                aliases.push(a);
            }
            if aliases != o.aliases {
                o.aliases = aliases;
                changed = true;
            }
            if changed {
                self.report.fix(Rule::TextCleanup, vec![o.object_id.0.clone()], "object text cleaned");
            }
        }
        for p in &mut self.prog.predicates {
            let value = match &mut p.kind {
                PredicateKind::Attribute { value, .. } | PredicateKind::GlobalScene { value, .. } => value,
                _ => continue,
            };
            let cleaned = fold(value);
            if cleaned != *value {
                *value = cleaned;
                self.report.fix(Rule::TextCleanup, vec![p.predicate_id.0.clone()], "value cleaned");
            }
        }
    }

    fn canonical_names(&mut self) {
        for p in &mut self.prog.predicates {
            let changed = match &mut p.kind {
                PredicateKind::Relation { relation, .. } => match relation {
                    RelationName::Unsupported(raw) => canonical_relation(raw).map(|c| *relation = c).is_some(),
                    _ => false,
                },
                PredicateKind::Attribute { attribute, .. } => match attribute {
                    AttributeName::Unsupported(raw) => canonical_attribute(raw).map(|c| *attribute = c).is_some(),
                    _ => false,
                },
                PredicateKind::GlobalScene { attribute, .. } => match attribute {
                    SceneName::Unsupported(raw) => canonical_scene(raw).map(|c| *attribute = c).is_some(),
                    _ => false,
                },
                _ => false,
            };
            if changed {
                self.report.fix(Rule::NameCanonical, vec![p.predicate_id.0.clone()], "predicate name canonicalized");
            }
        }
        let dropped = self.dedupe_predicate_content();
        if !dropped.is_empty() {
            self.report.fix(Rule::NameCanonical, dropped, "predicates duplicated by canonicalization");
        }
    }

    fn self_references(&mut self) {
        self.drop_predicates(Rule::SelfRelation, true, "relation between an object and itself", |p, _| {
            matches!(&p.kind, PredicateKind::Relation { subject, reference, .. } if subject == reference)
        });
        self.drop_predicates(Rule::SelfAction, true, "action targeting its own subject", |p, _| {
            matches!(&p.kind, PredicateKind::Attribute { subject, target: Some(t), .. } if subject == t)
        });
    }

    fn type_attributes(&mut self) {
        let doomed: Vec<(PredicateId, ObjectId, String)> = self
            .prog
            .predicates
            .iter()
            .filter_map(|p| match &p.kind {
                PredicateKind::Attribute { subject, attribute, value, .. } if is_type_attribute(attribute) => {
                    Some((p.predicate_id.clone(), subject.clone(), value.clone()))
                }
                _ => None,
            })
            .collect();
        for (pid, subject, value) in doomed {
            self.prog.predicates.retain(|p| p.predicate_id != pid);
            if let Some(obj) = self.prog.objects.iter_mut().find(|o| o.object_id == subject) {
                let word = collapse_ws(&value);
                if !word.is_empty()
                    && fold(&word) != fold(&obj.label)
                    && !obj.aliases.iter().any(|a| fold(a) == fold(&word))
                {
                    obj.aliases.push(word);
                }
            }
            self.report.fix(Rule::TypeAttribute, vec![pid.0, subject.0], "type attribute kept as alias");
        }
    }

    fn size_predicates(&mut self) {
        self.drop_predicates(Rule::SizeNonContrastive, true, "non-contrastive size", |p, _| {
            matches!(&p.kind, PredicateKind::Attribute { attribute: AttributeName::Size, value, target, .. }
                if !is_contrastive_size(value, target.as_ref()))
        });
    }

    fn color_exclusions(&mut self) {
        let doomed: Vec<(PredicateId, ObjectId)> = self
            .prog
            .predicates
            .iter()
            .filter_map(|p| match &p.kind {
                PredicateKind::Exclusion { subject } => {
                    let label = self.prog.label_of(subject);
                    COLOR_WORDS
                        .contains(&strip_article(&fold(label)))
                        .then(|| (p.predicate_id.clone(), subject.clone()))
                }
                _ => None,
            })
            .collect();
        for (pid, subject) in doomed {
            self.prog.predicates.retain(|p| p.predicate_id != pid);
            let mut ids = vec![pid.0];
            if !self.referenced(&subject) {
                self.prog.objects.retain(|o| o.object_id != subject);
                ids.push(subject.0);
            }
            self.report.fix(Rule::ColorExclusion, ids, "color word is not an absent object");
        }
    }

    fn missing_objects(&mut self) {
        let declared: BTreeSet<ObjectId> = self.prog.objects.iter().map(|o| o.object_id.clone()).collect();
        let mut missing: Vec<ObjectId> = Vec::new();
        for p in &self.prog.predicates {
            for r in p.kind.object_refs() {
                if !declared.contains(r) && !missing.contains(r) {
                    missing.push(r.clone());
                }
            }
        }
        for id in missing {
            let label = label_from_id(&id);
            let existing = self
                .prog
                .objects
                .iter()
                .find(|o| fold(&o.label) == fold(&label))
                .map(|o| o.object_id.clone());
            match existing {
                Some(target) => {
                    for p in &mut self.prog.predicates {
                        for r in p.kind.object_refs_mut() {
                            if *r == id {
                                *r = target.clone();
                            }
                        }
                    }
                    self.report.fix(Rule::MissingObject, vec![id.0, target.0], "reference bound to declared object");
                }
                None => {
                    self.prog.objects.push(ObjectDecl {
                        object_id: id.clone(),
                        label,
                        proposal_text: None,
                        aliases: Vec::new(),
                        description: None,
                    });
                    self.report.fix(Rule::MissingObject, vec![id.0], "object declaration inserted");
                }
            }
        }
        // Rebinding can create self-references or duplicates; clear them under this rule.
        let mut dropped = Vec::new();
        self.prog.predicates.retain(|p| {
            let keep = match &p.kind {
                PredicateKind::Relation { subject, reference, .. } => subject != reference,
                PredicateKind::Attribute { subject, target: Some(t), .. } => subject != t,
                _ => true,
            };
            if !keep {
                dropped.push(p.predicate_id.0.clone());
            }
            keep
        });
        dropped.extend(self.dedupe_predicate_content());
        if !dropped.is_empty() {
            self.report.fix(Rule::MissingObject, dropped, "predicates made redundant by rebinding");
        }
    }

    fn existence(&mut self) {
        let needing: Vec<ObjectId> = self
            .prog
            .positive_objects()
            .filter(|o| self.prog.counts_for(&o.object_id).next().is_none())
            .map(|o| o.object_id.clone())
            .collect();
        for id in needing {
            let pid = self.fresh_id(Family::CountAtLeast);
            self.prog.predicates.push(Predicate::new(
                pid.clone(),
                PredicateKind::CountAtLeast { subject: id.clone(), count: 1 },
            ));
            self.report.fix(Rule::AddExistence, vec![pid.0, id.0], "at-least-one existence predicate added");
        }
    }

    fn redundant_lower_bounds(&mut self) {
        self.drop_predicates(Rule::RedundantLowerBound, true, "lower bound implied by another count", |p, prog| {
            let PredicateKind::CountAtLeast { subject, count } = &p.kind else { return false };
            prog.predicates.iter().any(|q| match &q.kind {
                PredicateKind::CountExact { subject: s, count: n } => s == subject && n >= count,
                PredicateKind::CountAtLeast { subject: s, count: n } => s == subject && n > count,
                _ => false,
            })
        });
    }

    fn exclusion_conflicts(&mut self) {
        self.drop_predicates(Rule::ExclusionConflict, true, "exclusion contradicts a positive count", |p, prog| {
            let PredicateKind::Exclusion { subject } = &p.kind else { return false };
            prog.counts_for(subject).any(|q| q.kind.count_target().unwrap_or(0) >= 1)
        });
    }

    fn exclusion_duplicate_labels(&mut self) {
        let mut positive_names: BTreeSet<String> = BTreeSet::new();
        for o in self.prog.positive_objects() {
            positive_names.insert(fold(&o.label));
            positive_names.extend(o.aliases.iter().map(|a| fold(a)));
        }
        let doomed: Vec<ObjectId> = self
            .prog
            .objects
            .iter()
            .filter(|o| self.prog.exclusion_only(&o.object_id))
            .filter(|o| positive_names.contains(&fold(&o.label)))
            .map(|o| o.object_id.clone())
            .collect();
        for id in doomed {
            let preds: Vec<&Predicate> =
                self.prog.predicates.iter().filter(|p| p.kind.object_refs().contains(&&id)).collect();
            let mut touched = ids(&preds);
            touched.push(id.0.clone());
            self.remove_object(&id);
            self.report.fix(Rule::ExclusionDuplicateLabel, touched, "excluded object duplicates a required label");
        }
    }

    // --- warnings --------------------------------------------------------

    fn unsupported_names(&mut self) {
        for p in &self.prog.predicates {
            let (rule, raw) = match &p.kind {
                PredicateKind::Relation { relation: RelationName::Unsupported(raw), .. } => (Rule::UnsupportedRelation, raw),
                PredicateKind::Attribute { attribute: AttributeName::Unsupported(raw), .. } => {
                    (Rule::UnsupportedAttribute, raw)
                }
                PredicateKind::GlobalScene { attribute: SceneName::Unsupported(raw), .. } => (Rule::UnsupportedScene, raw),
                _ => continue,
            };
            self.report.warn(rule, vec![p.predicate_id.0.clone()], raw.clone());
        }
    }
}

/// Applies every normalization rule in order and reports what changed.
pub fn normalize(program: &VisualProgram) -> (VisualProgram, NormalizationReport) {
    let mut pass = Pass { prog: program.clone(), report: NormalizationReport::default() };

    pass.framing_objects();
    pass.duplicate_predicates();
    pass.canonical_descriptions();

    pass.duplicate_objects();
    pass.clean_text();
    pass.canonical_names();
    pass.self_references();
    pass.type_attributes();
    pass.size_predicates();
    pass.color_exclusions();
    pass.missing_objects();
    pass.existence();
    pass.redundant_lower_bounds();
    pass.exclusion_conflicts();
    pass.exclusion_duplicate_labels();

    pass.unsupported_names();

    pass.prog.sort_predicates();
    pass.prog.refresh_id();
    (pass.prog, pass.report)
}

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("reviewed program is invalid: {0}")]
    InvalidReviewedProgram(String),
}

impl From<ProgramError> for ReviewError {
    fn from(e: ProgramError) -> Self {
        ReviewError::InvalidReviewedProgram(e.to_string())
    }
}

/// Normalizes a reviewer-returned program document. On error the caller keeps
/// the pre-review program.
pub fn apply_review(
    original: &VisualProgram,
    reviewed: &serde_json::Value,
) -> Result<(VisualProgram, NormalizationReport), ReviewError> {
    let mut doc = reviewed.clone();
    if let Some(obj) = doc.as_object_mut() {
        obj.entry("program_id").or_insert_with(|| serde_json::Value::String(original.program_id.to_string()));
        obj.entry("source_prompt")
            .or_insert_with(|| serde_json::Value::String(original.source_prompt.clone()));
    }
    let mut program = VisualProgram::from_value(doc)?;
    program.source_prompt = original.source_prompt.clone();
    let mut object_ids = BTreeSet::new();
    for o in &program.objects {
        if o.object_id.as_str().trim().is_empty() {
            return Err(ReviewError::InvalidReviewedProgram("empty object id".into()));
        }
        object_ids.insert(&o.object_id);
    }
    for p in &program.predicates {
        if let PredicateKind::VisibleText { text, .. } = &p.kind {
            if text.is_empty() {
                return Err(ReviewError::InvalidReviewedProgram(format!("`{}` has empty text", p.predicate_id)));
            }
        }
    }
    Ok(normalize(&program))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::{compile, ParsedBuckets};

    fn oid(s: &str) -> ObjectId {
        ObjectId::new(s)
    }

    fn pid(s: &str) -> PredicateId {
        PredicateId(s.to_string())
    }

    fn program(objects: Vec<ObjectDecl>, preds: Vec<(&str, PredicateKind)>) -> VisualProgram {
        VisualProgram::new(
            "test prompt",
            objects,
            preds.into_iter().map(|(id, k)| Predicate::new(pid(id), k)).collect(),
        )
    }

    fn at_least(s: &str, n: u32) -> PredicateKind {
        PredicateKind::CountAtLeast { subject: oid(s), count: n }
    }

    fn exact(s: &str, n: u32) -> PredicateKind {
        PredicateKind::CountExact { subject: oid(s), count: n }
    }

    fn relation(s: &str, r: &str, o: &str) -> PredicateKind {
        PredicateKind::Relation { subject: oid(s), relation: RelationName::parse(r), reference: oid(o) }
    }

    fn attribute(s: &str, a: &str, v: &str) -> PredicateKind {
        PredicateKind::Attribute { subject: oid(s), attribute: AttributeName::parse(a), value: v.into(), target: None }
    }

    fn assert_settled(p: &VisualProgram) {
        let (again, report) = normalize(p);
        assert!(report.fixes.is_empty(), "second pass fixes: {:?}", report.fixes);
        assert!(report.warnings.is_empty(), "second pass warnings: {:?}", report.warnings);
        assert_eq!(&again, p);
        again.validate().unwrap();
    }

    #[test]
    fn adds_existence_for_bare_object() {
        let p = program(vec![ObjectDecl::new("o1", "cat")], vec![]);
        let (out, report) = normalize(&p);
        assert!(report.has_fix(Rule::AddExistence));
        assert_eq!(out.predicates.len(), 1);
        assert_eq!(out.predicates[0].kind, at_least("o1", 1));
        assert_eq!(out.predicates[0].predicate_id.as_str(), "cal-0");
        assert_settled(&out);
    }

    #[test]
    fn removes_redundant_lower_bound() {
        let p = program(vec![ObjectDecl::new("o1", "dog")], vec![("cal-0", at_least("o1", 3)), ("cex-0", exact("o1", 3))]);
        let (out, report) = normalize(&p);
        assert!(report.has_fix(Rule::RedundantLowerBound));
        assert_eq!(out.predicates.len(), 1);
        assert_eq!(out.predicates[0].kind, exact("o1", 3));
        assert_settled(&out);
    }

    #[test]
    fn keeps_conflicting_lower_bound() {
        let p = program(vec![ObjectDecl::new("o1", "dog")], vec![("cal-0", at_least("o1", 4)), ("cex-0", exact("o1", 3))]);
        let (out, report) = normalize(&p);
        assert!(!report.has_fix(Rule::RedundantLowerBound));
        assert_eq!(out.predicates.len(), 2);
    }

    #[test]
    fn removes_self_relation() {
        let p = program(
            vec![ObjectDecl::new("o1", "dog")],
            vec![("cal-0", at_least("o1", 2)), ("rel-0", relation("o1", "left", "o1"))],
        );
        let (out, report) = normalize(&p);
        assert!(report.has_fix(Rule::SelfRelation));
        assert!(out.predicates.iter().all(|p| p.family() != Family::Relation));
        assert_settled(&out);
    }

    #[test]
    fn removes_self_targeted_action() {
        let mut kind = attribute("o1", "action", "chasing");
        if let PredicateKind::Attribute { target, .. } = &mut kind {
            *target = Some(oid("o1"));
        }
        let p = program(vec![ObjectDecl::new("o1", "dog")], vec![("cal-0", at_least("o1", 1)), ("att-0", kind)]);
        let (out, report) = normalize(&p);
        assert!(report.has_fix(Rule::SelfAction));
        assert_eq!(out.predicates.len(), 1);
    }

    #[test]
    fn framing_object_is_nonsemantic() {
        let mut p = program(
            vec![ObjectDecl::new("o0", "photo"), ObjectDecl::new("o1", "dog")],
            vec![("cal-0", at_least("o0", 1)), ("cal-1", at_least("o1", 1))],
        );
        p.source_prompt = "a photo of a dog".into();
        let (out, report) = normalize(&p);
        assert!(report.has_note(Rule::FramingObject));
        assert!(!review_gate(&report), "{report:?}");
        assert_eq!(out.objects.len(), 1);
        assert_eq!(out.predicates.len(), 1);
    }

    #[test]
    fn bare_picture_is_kept_without_framing_prompt() {
        let p = program(vec![ObjectDecl::new("o1", "picture")], vec![("cal-0", at_least("o1", 1))]);
        let (_, report) = normalize(&p);
        assert!(!report.has_note(Rule::FramingObject));
    }

    #[test]
    fn duplicate_predicate_ids_are_nonsemantic() {
        let p = program(
            vec![ObjectDecl::new("o1", "dog"), ObjectDecl::new("o2", "cat")],
            vec![("cal-0", at_least("o1", 1)), ("cal-0", at_least("o2", 1)), ("cal-1", at_least("o1", 1))],
        );
        let (out, report) = normalize(&p);
        assert!(report.has_note(Rule::DuplicatePredicate));
        assert!(!review_gate(&report), "{report:?}");
        assert_eq!(out.predicates.len(), 2);
        out.validate().unwrap();
    }

    #[test]
    fn descriptions_canonicalized_without_review() {
        let mut p = program(
            vec![ObjectDecl::new("o1", "dog"), ObjectDecl::new("o2", "cat")],
            vec![("cal-0", at_least("o1", 1)), ("cal-1", at_least("o2", 1)), ("rel-0", relation("o1", "left", "o2"))],
        );
        p.predicates[2].description = Some("  The Dog   is LEFT of the cat ".into());
        let (out, report) = normalize(&p);
        assert!(report.has_note(Rule::DescriptionCanonical));
        assert!(!review_gate(&report));
        assert_eq!(out.predicate(&pid("rel-0")).unwrap().description.as_deref(), Some("the dog is left of the cat"));
    }

    #[test]
    fn merges_duplicate_objects() {
        let p = program(
            vec![ObjectDecl::new("o1", "dog"), ObjectDecl::new("o2", "Dog"), ObjectDecl::new("o3", "ball")],
            vec![("cal-0", at_least("o1", 1)), ("cal-1", at_least("o2", 1)), ("rel-0", relation("o2", "near", "o3"))],
        );
        let (out, report) = normalize(&p);
        assert!(report.has_fix(Rule::DuplicateObject));
        assert_eq!(out.objects.len(), 2);
        assert!(out.predicates.iter().all(|p| !p.kind.object_refs().contains(&&oid("o2"))));
        assert_settled(&out);
    }

    #[test]
    fn cleans_aliases_and_proposal_text() {
        let mut dog = ObjectDecl::new("o1", "dog");
        dog.proposal_text = Some("  brown   dog ".into());
        dog.aliases = vec!["puppy".into(), " puppy".into(), "dog".into(), "".into()];
        let p = program(vec![dog], vec![("cal-0", at_least("o1", 1)), ("att-0", attribute("o1", "color", " Brown "))]);
        let (out, report) = normalize(&p);
        assert!(report.has_fix(Rule::TextCleanup));
        assert_eq!(out.objects[0].proposal_text.as_deref(), Some("brown dog"));
        assert_eq!(out.objects[0].aliases, vec!["puppy".to_string()]);
        assert_eq!(out.predicates[1].kind, attribute("o1", "color", "brown"));
        assert_settled(&out);
    }

    #[test]
    fn canonicalizes_names() {
        let p = program(
            vec![ObjectDecl::new("o1", "dog"), ObjectDecl::new("o2", "cat")],
            vec![
                ("cal-0", at_least("o1", 1)),
                ("cal-1", at_least("o2", 1)),
                ("rel-0", relation("o1", "to the left of", "o2")),
                ("att-0", attribute("o1", "Colour", "red")),
                ("scn-0", PredicateKind::GlobalScene { attribute: SceneName::parse("setting"), value: "park".into() }),
            ],
        );
        let (out, report) = normalize(&p);
        assert_eq!(report.fixes.iter().filter(|f| f.rule == Rule::NameCanonical).count(), 3);
        assert!(report.warnings.is_empty());
        assert_eq!(out.predicate(&pid("rel-0")).unwrap().kind, relation("o1", "left", "o2"));
        assert_settled(&out);
    }

    #[test]
    fn warns_on_unsupported_names() {
        let p = program(
            vec![ObjectDecl::new("o1", "dog"), ObjectDecl::new("o2", "cat")],
            vec![
                ("cal-0", at_least("o1", 1)),
                ("cal-1", at_least("o2", 1)),
                ("rel-0", relation("o1", "hugging", "o2")),
                ("att-0", attribute("o1", "mood", "happy")),
                ("scn-0", PredicateKind::GlobalScene { attribute: SceneName::parse("vibe"), value: "cozy".into() }),
            ],
        );
        let (out, report) = normalize(&p);
        assert!(report.fixes.is_empty());
        assert!(report.has_warning(Rule::UnsupportedRelation));
        assert!(report.has_warning(Rule::UnsupportedAttribute));
        assert!(report.has_warning(Rule::UnsupportedScene));
        assert!(review_gate(&report));
        // still present: warnings never rewrite
        assert_eq!(out.predicates.len(), 5);
        let (_, again) = normalize(&out);
        assert_eq!(again.warnings.len(), 3);
        assert!(again.fixes.is_empty());
    }

    #[test]
    fn demotes_type_attribute_to_alias() {
        let p = program(
            vec![ObjectDecl::new("o1", "dog")],
            vec![("cal-0", at_least("o1", 1)), ("att-0", attribute("o1", "breed", "Golden Retriever"))],
        );
        let (out, report) = normalize(&p);
        assert!(report.has_fix(Rule::TypeAttribute));
        assert!(report.warnings.is_empty());
        assert_eq!(out.objects[0].aliases, vec!["golden retriever".to_string()]);
        assert_eq!(out.predicates.len(), 1);
        assert_settled(&out);
    }

    #[test]
    fn drops_non_contrastive_size() {
        let p = program(
            vec![ObjectDecl::new("o1", "dog")],
            vec![
                ("cal-0", at_least("o1", 1)),
                ("att-0", attribute("o1", "size", "large")),
                ("att-1", attribute("o1", "size", "larger than usual")),
            ],
        );
        let (out, report) = normalize(&p);
        assert!(report.has_fix(Rule::SizeNonContrastive));
        assert_eq!(out.predicates.len(), 2);
        assert!(out.predicate(&pid("att-1")).is_some());
    }

    #[test]
    fn removes_color_word_exclusion() {
        let p = program(
            vec![ObjectDecl::new("o1", "car"), ObjectDecl::new("o2", "red")],
            vec![("cal-0", at_least("o1", 1)), ("exc-0", PredicateKind::Exclusion { subject: oid("o2") })],
        );
        let (out, report) = normalize(&p);
        assert!(report.has_fix(Rule::ColorExclusion));
        assert_eq!(out.objects.len(), 1);
        assert_eq!(out.predicates.len(), 1);
        assert_settled(&out);
    }

    #[test]
    fn inserts_missing_declaration() {
        let p = program(
            vec![ObjectDecl::new("o1", "dog")],
            vec![("cal-0", at_least("o1", 1)), ("rel-0", relation("o1", "left", "red_ball"))],
        );
        let (out, report) = normalize(&p);
        assert!(report.has_fix(Rule::MissingObject));
        let ball = out.object(&oid("red_ball")).unwrap();
        assert_eq!(ball.label, "red ball");
        assert!(out.counts_for(&oid("red_ball")).next().is_some());
        assert_settled(&out);
    }

    #[test]
    fn missing_reference_binds_to_existing_label() {
        let p = program(
            vec![ObjectDecl::new("o1", "dog"), ObjectDecl::new("o2", "cat")],
            vec![("cal-0", at_least("o1", 1)), ("cal-1", at_least("o2", 1)), ("rel-0", relation("o1", "left", "cat"))],
        );
        let (out, report) = normalize(&p);
        assert!(report.has_fix(Rule::MissingObject));
        assert_eq!(out.objects.len(), 2);
        assert_eq!(out.predicate(&pid("rel-0")).unwrap().kind, relation("o1", "left", "o2"));
        assert_settled(&out);
    }

    #[test]
    fn removes_exclusion_conflicting_with_count() {
        let p = program(
            vec![ObjectDecl::new("o1", "dog")],
            vec![("cex-0", exact("o1", 2)), ("exc-0", PredicateKind::Exclusion { subject: oid("o1") })],
        );
        let (out, report) = normalize(&p);
        assert!(report.has_fix(Rule::ExclusionConflict));
        assert_eq!(out.predicates.len(), 1);
        assert_settled(&out);
    }

    #[test]
    fn removes_exclusion_only_duplicate_label() {
        let p = program(
            vec![ObjectDecl::new("o1", "dog"), ObjectDecl::new("o2", "dog")],
            vec![("cal-0", at_least("o1", 1)), ("exc-0", PredicateKind::Exclusion { subject: oid("o2") })],
        );
        let (out, report) = normalize(&p);
        assert!(report.has_fix(Rule::ExclusionDuplicateLabel));
        assert_eq!(out.objects.len(), 1);
        assert_eq!(out.predicates.len(), 1);
        assert_settled(&out);
    }

    #[test]
    fn predicate_order_is_canonical() {
        let objects = vec![ObjectDecl::new("o1", "dog"), ObjectDecl::new("o2", "cat")];
        let preds = vec![
            ("cal-0", at_least("o1", 1)),
            ("cal-1", at_least("o2", 1)),
            ("rel-0", relation("o1", "left", "o2")),
            ("att-0", attribute("o2", "color", "black")),
        ];
        let mut reversed = preds.clone();
        reversed.reverse();
        let (a, _) = normalize(&program(objects.clone(), preds));
        let (b, _) = normalize(&program(objects, reversed));
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());
    }

    #[test]
    fn gate_cases() {
        let mut report = NormalizationReport::default();
        assert!(!review_gate(&report));
        report.note(Rule::FramingObject, vec![], "x");
        assert!(!review_gate(&report));
        report.warn(Rule::UnsupportedRelation, vec![], "hugging");
        assert!(review_gate(&report));
    }

    fn warned_program() -> VisualProgram {
        let buckets: ParsedBuckets = serde_json::from_str(
            r#"{"source_prompt": "a dog hugging a cat",
                "objects": [{"object_id": "o1", "label": "dog"}, {"object_id": "o2", "label": "cat"}],
                "at_least_count_constraints": [{"object_id": "o1", "count": 1}, {"object_id": "o2", "count": 1}],
                "relation_constraints": [{"subject_id": "o1", "relation": "hugging", "reference_id": "o2"}]}"#,
        )
        .unwrap();
        compile(&buckets).unwrap()
    }

    #[test]
    fn review_identity_is_settled() {
        let (normalized, _) = normalize(&warned_program());
        let doc = serde_json::to_value(&normalized).unwrap();
        let (reviewed, report) = apply_review(&normalized, &doc).unwrap();
        assert_eq!(reviewed, normalized);
        assert!(report.fixes.is_empty());
    }

    #[test]
    fn review_repair_clears_warning() {
        let (normalized, first) = normalize(&warned_program());
        assert!(first.has_warning(Rule::UnsupportedRelation));
        let mut doc = serde_json::to_value(&normalized).unwrap();
        for p in doc["predicates"].as_array_mut().unwrap() {
            if p["family"] == "relation" {
                p["relation"] = "near".into();
            }
        }
        let (reviewed, report) = apply_review(&normalized, &doc).unwrap();
        assert!(report.warnings.is_empty());
        assert!(reviewed.predicates.iter().any(|p| p.kind == relation("o1", "near", "o2")));
    }

    #[test]
    fn review_rejects_malformed_document() {
        let (normalized, _) = normalize(&warned_program());
        let doc = serde_json::json!({"objects": "not a list"});
        assert!(matches!(apply_review(&normalized, &doc), Err(ReviewError::InvalidReviewedProgram(_))));
    }
}
