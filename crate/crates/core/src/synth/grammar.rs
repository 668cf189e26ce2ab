//! Small compositional prompt language used by the synthetic world: a parser
//! into raw parser buckets and a random prompt generator.
//!
//! Clauses are separated by ", ":
//! - `a red dog`, `two dogs`, `at least two cats`, `exactly three wooden cups`
//! - `no cats`
//! - `the dog is left of the table`
//! - `the dog is sitting`, `the dog is chasing the cat`
//! - `in a forest`, `at night`
//! - `with the text "OPEN"`
//!
//! Anything else is ignored, which lets style clauses ride along in rewrites.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::program::{ParsedBuckets, RawAttribute, RawCount, RawExclusion, RawObject, RawRelation, RawScene, RawText};

pub const NOUNS: [&str; 15] = [
    "dog", "cat", "bird", "horse", "table", "chair", "cup", "ball", "car", "book", "vase", "lamp", "box", "bench",
    "bottle",
];
pub const COLORS: [&str; 10] = ["red", "blue", "green", "yellow", "black", "white", "orange", "purple", "pink", "brown"];
pub const MATERIALS: [&str; 4] = ["wooden", "metal", "glass", "plastic"];
pub const PATTERNS: [&str; 3] = ["striped", "spotted", "checkered"];
pub const POSES: [&str; 3] = ["sitting", "standing", "lying"];
pub const TARGET_ACTIONS: [&str; 3] = ["chasing", "holding", "watching"];
pub const SOLO_ACTIONS: [&str; 2] = ["running", "jumping"];
pub const SCENES: [&str; 5] = ["forest", "beach", "kitchen", "park", "desert"];
pub const TIMES: [&str; 2] = ["night", "sunset"];
pub const TEXTS: [&str; 4] = ["OPEN", "SALE", "CAFE", "EXIT"];
/// Relation phrases in the order they are tried (longest first where prefixes collide).
pub const RELATIONS: [(&str, &str); 11] = [
    ("left of", "left"),
    ("right of", "right"),
    ("in front of", "in_front_of"),
    ("behind", "behind"),
    ("above", "above"),
    ("below", "below"),
    ("near", "near"),
    ("inside", "inside"),
    ("overlapping", "overlapping"),
    ("on", "on"),
    ("in", "in"),
];
/// Extra clauses appended by the synthetic rewriter. None of them parse as constraints.
pub const STYLES: [&str; 8] = [
    "soft morning light",
    "wide shot",
    "cinematic framing",
    "high detail",
    "muted palette",
    "natural light",
    "sharp focus",
    "shallow depth of field",
];

const NUMBERS: [&str; 7] = ["zero", "one", "two", "three", "four", "five", "six"];

pub fn plural(noun: &str) -> String {
    if noun.ends_with('x') || noun.ends_with("ch") {
        format!("{noun}es")
    } else {
        format!("{noun}s")
    }
}

/// Singular noun for a word that names a known noun in either number.
pub fn noun_of(word: &str) -> Option<&'static str> {
    NOUNS.iter().copied().find(|n| *n == word || plural(n) == word)
}

fn number(word: &str) -> Option<u32> {
    match word {
        "a" | "an" => Some(1),
        w => NUMBERS.iter().position(|n| *n == w).map(|i| i as u32),
    }
}

fn adjective(word: &str) -> Option<&'static str> {
    if COLORS.contains(&word) {
        Some("color")
    } else if MATERIALS.contains(&word) {
        Some("material")
    } else if PATTERNS.contains(&word) {
        Some("pattern")
    } else {
        None
    }
}

#[derive(Default)]
struct Builder {
    b: ParsedBuckets,
}

impl Builder {
    fn declare(&mut self, noun: &str) {
        if !self.b.objects.iter().any(|o| o.object_id.as_deref() == Some(noun)) {
            self.b.objects.push(RawObject {
                object_id: Some(noun.into()),
                label: Some(noun.into()),
                ..RawObject::default()
            });
        }
    }

    fn ensure_counted(&mut self, noun: &str) {
        let counted = self
            .b
            .at_least_count_constraints
            .iter()
            .chain(&self.b.exact_count_constraints)
            .any(|c| c.object_id.as_deref() == Some(noun));
        let excluded = self.b.exclusion_constraints.iter().any(|c| c.object_id.as_deref() == Some(noun));
        if !counted && !excluded {
            self.b.at_least_count_constraints.push(RawCount { object_id: Some(noun.into()), count: Some(1) });
        }
    }

    fn attribute(&mut self, noun: &str, attribute: &str, value: &str, target: Option<&str>) {
        self.b.attribute_constraints.push(RawAttribute {
            object_id: Some(noun.into()),
            attribute: Some(attribute.into()),
            value: Some(value.into()),
            target_id: target.map(Into::into),
            description: None,
        });
    }

    fn object_clause(&mut self, words: &[&str]) -> bool {
        let (exact, rest) = match words {
            ["at", "least", rest @ ..] => (Some(false), rest),
            ["exactly", rest @ ..] => (Some(true), rest),
            _ => (None, words),
        };
        let Some((first, rest)) = rest.split_first() else { return false };
        let Some(n) = number(first) else { return false };
        let Some((last, adjs)) = rest.split_last() else { return false };
        let Some(noun) = noun_of(last) else { return false };
        if adjs.iter().any(|a| adjective(a).is_none()) || n == 0 {
            return false;
        }
        self.declare(noun);
        // Bare "a"/"one" is a lower bound; a spelled-out number is exact unless "at least".
        let exact = exact.unwrap_or(n > 1);
        let c = RawCount { object_id: Some(noun.into()), count: Some(n) };
        if exact {
            self.b.exact_count_constraints.push(c);
        } else {
            self.b.at_least_count_constraints.push(c);
        }
        for a in adjs {
            self.attribute(noun, adjective(a).expect("checked above"), a, None);
        }
        true
    }

    fn predicate_clause(&mut self, words: &[&str]) -> bool {
        let ["the", subj, "is", rest @ ..] = words else { return false };
        let Some(subject) = noun_of(subj) else { return false };
        let tail = rest.join(" ");
        for (phrase, name) in RELATIONS {
            if let Some(r) = tail.strip_prefix(phrase).and_then(|r| r.strip_prefix(" the ")) {
                let Some(reference) = noun_of(r) else { return false };
                self.declare(subject);
                self.declare(reference);
                self.b.relation_constraints.push(RawRelation {
                    subject_id: Some(subject.into()),
                    relation: Some(name.into()),
                    reference_id: Some(reference.into()),
                    description: None,
                });
                return true;
            }
        }
        match rest {
            [verb] if POSES.contains(verb) => {
                self.declare(subject);
                self.attribute(subject, "pose", verb, None);
                true
            }
            [verb] if SOLO_ACTIONS.contains(verb) => {
                self.declare(subject);
                self.attribute(subject, "action", verb, None);
                true
            }
            [verb, "the", obj] if TARGET_ACTIONS.contains(verb) => {
                let Some(target) = noun_of(obj) else { return false };
                self.declare(subject);
                self.declare(target);
                self.attribute(subject, "action", verb, Some(target));
                true
            }
            _ => false,
        }
    }

    fn clause(&mut self, clause: &str) {
        if let Some(text) = clause.strip_prefix("with the text \"").and_then(|t| t.strip_suffix('"')) {
            if !text.is_empty() {
                self.b.text_constraints.push(RawText { text: Some(text.into()), object_id: None });
            }
            return;
        }
        let lower = clause.to_lowercase();
        let words: Vec<&str> = lower.split_whitespace().collect();
        match words.as_slice() {
            ["in", "a" | "the", place @ ..] if SCENES.contains(&place.join(" ").as_str()) => {
                self.b.global_scene_constraints.push(RawScene { attribute: Some("scene".into()), value: Some(place.join(" ")) });
            }
            ["at", time] if TIMES.contains(time) => {
                self.b.global_scene_constraints.push(RawScene { attribute: Some("time_of_day".into()), value: Some(time.to_string()) });
            }
            ["no", obj] | ["without", "a" | "an", obj] => {
                if let Some(noun) = noun_of(obj) {
                    self.declare(noun);
                    self.b.exclusion_constraints.push(RawExclusion { object_id: Some(noun.into()) });
                }
            }
            w => {
                if !self.object_clause(w) {
                    self.predicate_clause(w);
                }
            }
        }
    }
}

/// Parses a prompt of the synthetic language. Unknown clauses are skipped.
pub fn parse_prompt(prompt: &str) -> ParsedBuckets {
    let mut b = Builder::default();
    for clause in prompt.split([',', '.']).map(str::trim).filter(|c| !c.is_empty()) {
        b.clause(clause);
    }
    let nouns: Vec<String> = b.b.objects.iter().filter_map(|o| o.object_id.clone()).collect();
    for n in &nouns {
        b.ensure_counted(n);
    }
    b.b.source_prompt = prompt.to_string();
    b.b.parser_reasoning = Some(format!("{} objects declared", nouns.len()));
    b.b
}

fn object_phrase<R: Rng>(rng: &mut R, noun: &str, n: u32, exact: bool, adj: Option<&str>) -> String {
    let adj = adj.map(|a| format!("{a} ")).unwrap_or_default();
    match (n, exact) {
        (1, _) => {
            let art = if adj.is_empty() && "aeiou".contains(&noun[..1]) { "an" } else { "a" };
            let art = if adj.starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { art };
            if rng.gen_bool(0.2) {
                format!("one {adj}{noun}")
            } else {
                format!("{art} {adj}{noun}")
            }
        }
        (n, true) => format!("{} {adj}{}", NUMBERS[n as usize], plural(noun)),
        (n, false) => format!("at least {} {adj}{}", NUMBERS[n as usize], plural(noun)),
    }
}

/// Random prompt in the synthetic language.
pub fn random_prompt<R: Rng>(rng: &mut R) -> String {
    let k = rng.gen_range(1..=3usize);
    let nouns: Vec<&str> = NOUNS.choose_multiple(rng, k + 1).copied().collect();
    let (used, spare) = nouns.split_at(k);
    let mut clauses = Vec::new();
    for noun in used {
        let (n, exact) = match rng.gen_range(0..20) {
            0..=11 => (1, false),
            12..=16 => (rng.gen_range(2..=3), true),
            _ => (2, false),
        };
        let adj = if rng.gen_bool(0.4) {
            Some(match rng.gen_range(0..3) {
                0 => *COLORS.choose(rng).expect("non-empty"),
                1 => *MATERIALS.choose(rng).expect("non-empty"),
                _ => *PATTERNS.choose(rng).expect("non-empty"),
            })
        } else {
            None
        };
        clauses.push(object_phrase(rng, noun, n, exact, adj));
    }
    if used.len() >= 2 && rng.gen_bool(0.75) {
        let (phrase, _) = RELATIONS.choose(rng).expect("non-empty");
        clauses.push(format!("the {} is {phrase} the {}", used[0], used[1]));
    }
    if rng.gen_bool(0.2) {
        let who = used[used.len() - 1];
        if used.len() >= 2 && rng.gen_bool(0.5) {
            let verb = TARGET_ACTIONS.choose(rng).expect("non-empty");
            clauses.push(format!("the {who} is {verb} the {}", used[0]));
        } else if rng.gen_bool(0.5) {
            clauses.push(format!("the {who} is {}", POSES.choose(rng).expect("non-empty")));
        } else {
            clauses.push(format!("the {who} is {}", SOLO_ACTIONS.choose(rng).expect("non-empty")));
        }
    }
    if rng.gen_bool(0.25) {
        clauses.push(format!("no {}", plural(spare[0])));
    }
    if rng.gen_bool(0.4) {
        clauses.push(format!("in a {}", SCENES.choose(rng).expect("non-empty")));
    }
    if rng.gen_bool(0.15) {
        clauses.push(format!("at {}", TIMES.choose(rng).expect("non-empty")));
    }
    if rng.gen_bool(0.1) {
        clauses.push(format!("with the text \"{}\"", TEXTS.choose(rng).expect("non-empty")));
    }
    clauses.join(", ")
}
