//! Edit-instruction templates.

use serde::{Deserialize, Serialize};

use crate::program::{AttributeName, ObjectId, Predicate, PredicateKind, RelationName, SceneName, VisualProgram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    AddObject,
    RemoveObject,
    Attribute,
    Scene,
}

const ADD_SUFFIX: &str = "Use the input image as the foundation and change only what is needed. \
Keep the existing subjects, framing, background, and lighting consistent.";

const REMOVE_SUFFIX: &str = "Use the input image as the foundation and change only what is needed. \
Preserve the identity, placement, and scale of the remaining subjects, and keep the framing, background, and lighting consistent.";

const SCENE_SUFFIX: &str = "Do not add, remove, reposition, or redesign the existing subjects. \
Use the input image as the foundation and change only what is needed. \
Keep the existing subjects' identity, pose, layout, scale, and lighting as consistent as possible.";

/// Plain-language statement of a count requirement.
pub fn count_requirement(label: &str, exact: bool, n: u32) -> String {
    match (exact, n) {
        (_, 0) => format!("the image contains no {label}"),
        (true, n) => format!("the image contains exactly {n} {label}"),
        (false, n) => format!("the image contains at least {n} {label}"),
    }
}

fn others_clause(program: &VisualProgram, except: &ObjectId) -> String {
    let others: Vec<&str> = program
        .positive_objects()
        .filter(|o| &o.object_id != except)
        .map(|o| o.label.as_str())
        .collect();
    if others.is_empty() {
        String::new()
    } else {
        format!(" Preserve all other required objects: {}.", others.join(", "))
    }
}

/// The strongest count requirement on an object, if any (exact wins over at-least).
pub fn count_spec(program: &VisualProgram, subject: &ObjectId) -> Option<(bool, u32)> {
    let mut best: Option<(bool, u32)> = None;
    for p in program.counts_for(subject) {
        let cand = match &p.kind {
            PredicateKind::CountExact { count, .. } => (true, *count),
            PredicateKind::CountAtLeast { count, .. } => (false, *count),
            _ => continue,
        };
        best = match best {
            None => Some(cand),
            Some(b) if cand.0 && !b.0 => Some(cand),
            Some(b) if cand.0 == b.0 && cand.1 > b.1 => Some(cand),
            keep => keep,
        };
    }
    best
}

/// Add `k` instances of `subject` to reach `n`.
pub fn add_instruction(program: &VisualProgram, subject: &ObjectId, k: u32, exact: bool, n: u32) -> String {
    let label = program.label_of(subject);
    let mut s = format!("Add {k} more {label} so that {}.", count_requirement(label, exact, n));
    let placement = program.predicates.iter().find_map(|p| match &p.kind {
        PredicateKind::Relation { subject: s, relation, reference } if s == subject && relation.is_supported() => {
            Some((relation, reference))
        }
        _ => None,
    });
    if let Some((relation, reference)) = placement {
        s.push_str(&format!(
            " Place the added {label} so it is clearly {} the {}.",
            relation.phrase(),
            program.label_of(reference)
        ));
    }
    s.push(' ');
    s.push_str(ADD_SUFFIX);
    s
}

/// Remove one surplus (or forbidden) instance of `subject`.
pub fn remove_instruction(program: &VisualProgram, subject: &ObjectId, exact: bool, n: u32) -> String {
    let label = program.label_of(subject);
    let mut s = format!(
        "Remove only the extra {label}, preferably a secondary or background instance, so that {}.",
        count_requirement(label, exact, n)
    );
    if n > 0 {
        s.push_str(&format!(
            " Keep one clear {label} unchanged as the main subject and remove a secondary or background duplicate instead."
        ));
    }
    s.push_str(&others_clause(program, subject));
    s.push(' ');
    s.push_str(REMOVE_SUFFIX);
    s
}

/// Leading sentence of an attribute edit; also what the editor matches on.
pub fn attribute_head(label: &str, attribute: &AttributeName, value: &str, target: Option<&str>) -> String {
    match attribute {
        AttributeName::Color | AttributeName::Material | AttributeName::Shape | AttributeName::Size => {
            format!("Change the {label} so that it is {value}.")
        }
        AttributeName::Pattern => format!("Change the {label} so that it has a {value} pattern."),
        AttributeName::Pose | AttributeName::State => format!("Change the {label} so that it is clearly {value}."),
        AttributeName::Action => match target {
            Some(t) => format!("Change the {label} so that it is clearly {value} the {t}."),
            None => format!("Change the {label} so that it is clearly {value}."),
        },
        other => format!("Change the {label}'s {} so that it is {value}.", other.as_str().replace('_', " ")),
    }
}

pub fn attribute_instruction(program: &VisualProgram, p: &Predicate) -> Option<String> {
    let PredicateKind::Attribute { subject, attribute, value, target } = &p.kind else { return None };
    let label = program.label_of(subject);
    let target = target.as_ref().map(|t| program.label_of(t));
    let mut s = attribute_head(label, attribute, value, target);
    s.push_str(&others_clause(program, subject));
    s.push_str(&format!(
        " Use the input image as the foundation and change only this target attribute. \
Keep the {label}'s identity, placement, background, and lighting consistent."
    ));
    Some(s)
}

/// Leading sentence of a scene edit.
pub fn scene_head(attribute: &SceneName, value: &str) -> String {
    match attribute {
        SceneName::Scene | SceneName::Background => format!(
            "Change only the background and surrounding environment so the overall scene clearly reads as {value}."
        ),
        other => format!(
            "Change only the scene-level {} so it clearly reads as {value}.",
            other.as_str().replace('_', " ")
        ),
    }
}

pub fn scene_instruction(p: &Predicate) -> Option<String> {
    let PredicateKind::GlobalScene { attribute, value } = &p.kind else { return None };
    Some(format!("{} {SCENE_SUFFIX}", scene_head(attribute, value)))
}

/// Relation phrase used when describing a predicate in natural language.
fn relation_words(r: &RelationName) -> String {
    if r.is_supported() {
        r.phrase().to_string()
    } else {
        r.as_str().replace('_', " ")
    }
}

/// One-line natural-language statement of a predicate, used in auditor checks.
pub fn describe(program: &VisualProgram, p: &Predicate) -> String {
    let label = |id: &ObjectId| program.label_of(id).to_string();
    match &p.kind {
        PredicateKind::CountAtLeast { subject, count } => count_requirement(&label(subject), false, *count),
        PredicateKind::CountExact { subject, count } => count_requirement(&label(subject), true, *count),
        PredicateKind::Exclusion { subject } => count_requirement(&label(subject), true, 0),
        PredicateKind::Relation { subject, relation, reference } => {
            format!("the {} is {} the {}", label(subject), relation_words(relation), label(reference))
        }
        PredicateKind::Attribute { subject, attribute, value, target } => match attribute {
            AttributeName::Action => match target {
                Some(t) => format!("the {} is {value} the {}", label(subject), label(t)),
                None => format!("the {} is {value}", label(subject)),
            },
            AttributeName::Pattern => format!("the {} has a {value} pattern", label(subject)),
            AttributeName::Color | AttributeName::Material | AttributeName::Shape | AttributeName::Size
            | AttributeName::Pose | AttributeName::State => format!("the {} is {value}", label(subject)),
            other => format!("the {}'s {} is {value}", label(subject), other.as_str().replace('_', " ")),
        },
        PredicateKind::GlobalScene { attribute, value } => match attribute {
            SceneName::Scene | SceneName::Background => format!("the scene reads as {value}"),
            other => format!("the {} is {value}", other.as_str().replace('_', " ")),
        },
        PredicateKind::VisibleText { text, subject } => match subject {
            Some(s) => format!("the text \"{text}\" is visible on the {}", label(s)),
            None => format!("the text \"{text}\" is visible"),
        },
    }
}

/// Auditor check line: `[<predicate id>] <statement>`.
pub fn audit_check(program: &VisualProgram, p: &Predicate) -> String {
    format!("[{}] {}", p.predicate_id, describe(program, p))
}

/// Predicate id from an auditor check line.
pub fn check_id(check: &str) -> Option<&str> {
    check.strip_prefix('[')?.split(']').next()
}
