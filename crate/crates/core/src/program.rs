//! Typed visual programs: object declarations, predicate families, the raw
//! parser bucket schema, and the canonical serialized form.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProgramError {
    #[error("constraint {bucket}[{index}] references undeclared object `{object_id}`")]
    UnresolvedObjectRef {
        bucket: &'static str,
        index: usize,
        object_id: String,
    },
    #[error("{bucket}[{index}] is missing required field `{field}`")]
    MalformedBucket {
        bucket: &'static str,
        index: usize,
        field: &'static str,
    },
    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("invalid program: {0}")]
    Invalid(String),
    #[error("program document does not match schema: {0}")]
    Schema(String),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub String);

impl ObjectId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredicateId(pub String);

impl PredicateId {
    pub fn new(family: Family, ordinal: usize) -> Self {
        Self(format!("{}-{}", family.prefix(), ordinal))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Ordinal suffix of a `prefix-N` id, if it has one.
    pub fn ordinal(&self) -> Option<usize> {
        self.0.rsplit_once('-').and_then(|(_, n)| n.parse().ok())
    }
}

impl fmt::Display for PredicateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// 64-bit content hash of a program, serialized as 16 hex digits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProgramId(pub u64);

impl fmt::Display for ProgramId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl Serialize for ProgramId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ProgramId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16)
            .map(ProgramId)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    CountAtLeast,
    CountExact,
    Exclusion,
    Relation,
    Attribute,
    GlobalScene,
    VisibleText,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::CountAtLeast,
        Family::CountExact,
        Family::Exclusion,
        Family::Relation,
        Family::Attribute,
        Family::GlobalScene,
        Family::VisibleText,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Family::CountAtLeast => "cal",
            Family::CountExact => "cex",
            Family::Exclusion => "exc",
            Family::Relation => "rel",
            Family::Attribute => "att",
            Family::GlobalScene => "scn",
            Family::VisibleText => "txt",
        }
    }

    /// Position in the parser bucket order; also the canonical predicate order.
    pub fn bucket_rank(self) -> usize {
        Family::ALL.iter().position(|f| *f == self).unwrap_or(0)
    }

    /// Selector priority: counts, relations, attributes, exclusions, scene, text.
    /// The two count families share a rank.
    pub fn priority_rank(self) -> u8 {
        match self {
            Family::CountAtLeast | Family::CountExact => 0,
            Family::Relation => 1,
            Family::Attribute => 2,
            Family::Exclusion => 3,
            Family::GlobalScene => 4,
            Family::VisibleText => 5,
        }
    }

    pub fn is_count(self) -> bool {
        matches!(self, Family::CountAtLeast | Family::CountExact)
    }
}

macro_rules! vocabulary {
    (
        $(#[$meta:meta])*
        $name:ident { $($variant:ident => $text:literal),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant,)+
            /// A name outside the supported vocabulary, kept verbatim.
            Unsupported(String),
        }

        impl $name {
            pub const SUPPORTED: &'static [&'static str] = &[$($text),+];

            /// Exact match against the canonical spelling; anything else is `Unsupported`.
            pub fn parse(raw: &str) -> Self {
                match raw {
                    $($text => $name::$variant,)+
                    other => $name::Unsupported(other.to_string()),
                }
            }

            pub fn as_str(&self) -> &str {
                match self {
                    $($name::$variant => $text,)+
                    $name::Unsupported(raw) => raw,
                }
            }

            pub fn is_supported(&self) -> bool {
                !matches!(self, $name::Unsupported(_))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                Ok($name::parse(&String::deserialize(d)?))
            }
        }
    };
}

vocabulary! {
    RelationName {
        Left => "left",
        Right => "right",
        Above => "above",
        Below => "below",
        Near => "near",
        In => "in",
        Inside => "inside",
        On => "on",
        Overlapping => "overlapping",
        InFrontOf => "in_front_of",
        Behind => "behind",
    }
}

vocabulary! {
    AttributeName {
        Color => "color",
        Material => "material",
        Shape => "shape",
        Pattern => "pattern",
        Size => "size",
        Pose => "pose",
        State => "state",
        Action => "action",
        Other => "other",
    }
}

vocabulary! {
    SceneName {
        Scene => "scene",
        Background => "background",
        Lighting => "lighting",
        Weather => "weather",
        TimeOfDay => "time_of_day",
        Style => "style",
    }
}

impl RelationName {
    /// Relation phrase as it reads in natural language ("left of", "in front of").
    pub fn phrase(&self) -> &str {
        match self {
            RelationName::Left => "left of",
            RelationName::Right => "right of",
            RelationName::InFrontOf => "in front of",
            RelationName::Near => "near",
            RelationName::Overlapping => "overlapping",
            other => other.as_str(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectDecl {
    pub object_id: ObjectId,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_text: Option<String>,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl ObjectDecl {
    pub fn new(id: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            object_id: ObjectId::new(id),
            label: label.into(),
            proposal_text: None,
            aliases: Vec::new(),
            description: None,
        }
    }

    /// Text sent to the detector for this object.
    pub fn query(&self) -> &str {
        self.proposal_text.as_deref().unwrap_or(&self.label)
    }
}

/// Family-specific predicate payload. The serde tag doubles as the family name.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PredicateKind {
    CountAtLeast {
        subject: ObjectId,
        count: u32,
    },
    CountExact {
        subject: ObjectId,
        count: u32,
    },
    Exclusion {
        subject: ObjectId,
    },
    Relation {
        subject: ObjectId,
        relation: RelationName,
        reference: ObjectId,
    },
    Attribute {
        subject: ObjectId,
        attribute: AttributeName,
        value: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<ObjectId>,
    },
    GlobalScene {
        attribute: SceneName,
        value: String,
    },
    VisibleText {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subject: Option<ObjectId>,
    },
}

impl PredicateKind {
    pub fn family(&self) -> Family {
        match self {
            PredicateKind::CountAtLeast { .. } => Family::CountAtLeast,
            PredicateKind::CountExact { .. } => Family::CountExact,
            PredicateKind::Exclusion { .. } => Family::Exclusion,
            PredicateKind::Relation { .. } => Family::Relation,
            PredicateKind::Attribute { .. } => Family::Attribute,
            PredicateKind::GlobalScene { .. } => Family::GlobalScene,
            PredicateKind::VisibleText { .. } => Family::VisibleText,
        }
    }

    pub fn subject(&self) -> Option<&ObjectId> {
        match self {
            PredicateKind::CountAtLeast { subject, .. }
            | PredicateKind::CountExact { subject, .. }
            | PredicateKind::Exclusion { subject }
            | PredicateKind::Relation { subject, .. }
            | PredicateKind::Attribute { subject, .. } => Some(subject),
            PredicateKind::VisibleText { subject, .. } => subject.as_ref(),
            PredicateKind::GlobalScene { .. } => None,
        }
    }

    /// Every object id the predicate mentions (subject, reference, action target).
    pub fn object_refs(&self) -> Vec<&ObjectId> {
        let mut refs: Vec<&ObjectId> = self.subject().into_iter().collect();
        match self {
            PredicateKind::Relation { reference, .. } => refs.push(reference),
            PredicateKind::Attribute {
                target: Some(t), ..
            } => refs.push(t),
            _ => {}
        }
        refs
    }

    pub fn object_refs_mut(&mut self) -> Vec<&mut ObjectId> {
        match self {
            PredicateKind::CountAtLeast { subject, .. }
            | PredicateKind::CountExact { subject, .. }
            | PredicateKind::Exclusion { subject } => vec![subject],
            PredicateKind::Relation {
                subject, reference, ..
            } => vec![subject, reference],
            PredicateKind::Attribute {
                subject, target, ..
            } => {
                let mut v = vec![subject];
                if let Some(t) = target {
                    v.push(t);
                }
                v
            }
            PredicateKind::GlobalScene { .. } => Vec::new(),
            PredicateKind::VisibleText { subject, .. } => subject.iter_mut().collect(),
        }
    }

    pub fn count_target(&self) -> Option<u32> {
        match self {
            PredicateKind::CountAtLeast { count, .. } | PredicateKind::CountExact { count, .. } => {
                Some(*count)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub predicate_id: PredicateId,
    #[serde(flatten)]
    pub kind: PredicateKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl Predicate {
    pub fn new(predicate_id: PredicateId, kind: PredicateKind) -> Self {
        Self {
            predicate_id,
            kind,
            description: None,
        }
    }

    pub fn family(&self) -> Family {
        self.kind.family()
    }

    /// Sort key for canonical predicate order: bucket, ordinal, id.
    pub fn canonical_key(&self) -> (usize, usize, &str) {
        (
            self.family().bucket_rank(),
            self.predicate_id.ordinal().unwrap_or(usize::MAX),
            self.predicate_id.as_str(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualProgram {
    pub program_id: ProgramId,
    pub source_prompt: String,
    pub objects: Vec<ObjectDecl>,
    pub predicates: Vec<Predicate>,
}

#[derive(Serialize)]
struct ProgramContent<'a> {
    source_prompt: &'a str,
    objects: &'a [ObjectDecl],
    predicates: &'a [Predicate],
}

fn sorted_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    // `serde_json::Value` objects are BTreeMap-backed, so this sorts every key.
    let tree = serde_json::to_value(value).expect("program types always serialize");
    serde_json::to_vec(&tree).expect("json value always serializes")
}

impl VisualProgram {
    pub fn new(source_prompt: impl Into<String>, objects: Vec<ObjectDecl>, predicates: Vec<Predicate>) -> Self {
        let mut program = Self {
            program_id: ProgramId::default(),
            source_prompt: source_prompt.into(),
            objects,
            predicates,
        };
        program.refresh_id();
        program
    }

    /// Recomputes `program_id` from the current content.
    pub fn refresh_id(&mut self) {
        let bytes = sorted_json_bytes(&ProgramContent {
            source_prompt: &self.source_prompt,
            objects: &self.objects,
            predicates: &self.predicates,
        });
        let digest = Sha256::digest(&bytes);
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        self.program_id = ProgramId(u64::from_be_bytes(head));
    }

    /// Key-sorted compact JSON. Byte-stable for equal programs.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        sorted_json_bytes(self)
    }

    pub fn canonical_string(&self) -> String {
        String::from_utf8(self.canonical_bytes()).expect("json is utf-8")
    }

    /// Parses a program document. Only the schema is checked; see [`validate`](Self::validate).
    pub fn from_json(bytes: &[u8]) -> Result<Self, ProgramError> {
        serde_json::from_slice(bytes).map_err(|e| ProgramError::Schema(e.to_string()))
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, ProgramError> {
        serde_json::from_value(value).map_err(|e| ProgramError::Schema(e.to_string()))
    }

    pub fn object(&self, id: &ObjectId) -> Option<&ObjectDecl> {
        self.objects.iter().find(|o| &o.object_id == id)
    }

    pub fn predicate(&self, id: &PredicateId) -> Option<&Predicate> {
        self.predicates.iter().find(|p| &p.predicate_id == id)
    }

    pub fn label_of<'a>(&'a self, id: &'a ObjectId) -> &'a str {
        self.object(id).map(|o| o.label.as_str()).unwrap_or(id.as_str())
    }

    /// Count-family predicates whose subject is `id`.
    pub fn counts_for<'a>(&'a self, id: &'a ObjectId) -> impl Iterator<Item = &'a Predicate> + 'a {
        self.predicates
            .iter()
            .filter(move |p| p.family().is_count() && p.kind.subject() == Some(id))
    }

    /// Objects that are referenced only by exclusion predicates.
    pub fn exclusion_only(&self, id: &ObjectId) -> bool {
        let mut excluded = false;
        for p in &self.predicates {
            if !p.kind.object_refs().contains(&id) {
                continue;
            }
            match &p.kind {
                PredicateKind::Exclusion { .. } => excluded = true,
                PredicateKind::CountExact { count: 0, .. } => {}
                _ => return false,
            }
        }
        excluded
    }

    /// Objects the image must contain (everything that is not exclusion-only).
    pub fn positive_objects(&self) -> impl Iterator<Item = &ObjectDecl> {
        self.objects.iter().filter(|o| !self.exclusion_only(&o.object_id))
    }

    pub fn sort_predicates(&mut self) {
        self.predicates.sort_by(|a, b| a.canonical_key().cmp(&b.canonical_key()));
    }

    /// Next free ordinal for a family prefix.
    pub fn next_ordinal(&self, family: Family) -> usize {
        self.predicates
            .iter()
            .filter(|p| p.family() == family)
            .filter_map(|p| p.predicate_id.ordinal())
            .map(|n| n + 1)
            .max()
            .unwrap_or(0)
    }

    /// Full invariant check for a normalized program.
    pub fn validate(&self) -> Result<(), ProgramError> {
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(&o.object_id) {
                return Err(ProgramError::DuplicateId {
                    kind: "object",
                    id: o.object_id.0.clone(),
                });
            }
            if o.label.trim().is_empty() {
                return Err(ProgramError::Invalid(format!("object `{}` has an empty label", o.object_id)));
            }
            let mut seen = BTreeSet::new();
            for a in &o.aliases {
                if a == &o.label || !seen.insert(a) {
                    return Err(ProgramError::Invalid(format!(
                        "object `{}` has a repeated alias `{a}`",
                        o.object_id
                    )));
                }
            }
        }
        let mut pids = BTreeSet::new();
        for p in &self.predicates {
            if !pids.insert(&p.predicate_id) {
                return Err(ProgramError::DuplicateId {
                    kind: "predicate",
                    id: p.predicate_id.0.clone(),
                });
            }
            for r in p.kind.object_refs() {
                if !ids.contains(r) {
                    return Err(ProgramError::Invalid(format!(
                        "predicate `{}` references undeclared object `{r}`",
                        p.predicate_id
                    )));
                }
            }
            if let PredicateKind::VisibleText { text, .. } = &p.kind {
                if text.is_empty() {
                    return Err(ProgramError::Invalid(format!(
                        "predicate `{}` has empty visible text",
                        p.predicate_id
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Raw parser output
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawObject {
    #[serde(default)]
    pub object_id: Option<String>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_text: Option<String>,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawCount {
    #[serde(default)]
    pub object_id: Option<String>,
    #[serde(default)]
    pub count: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawExclusion {
    #[serde(default)]
    pub object_id: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawRelation {
    #[serde(default)]
    pub subject_id: Option<String>,
    #[serde(default)]
    pub relation: Option<String>,
    #[serde(default)]
    pub reference_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawAttribute {
    #[serde(default)]
    pub object_id: Option<String>,
    #[serde(default)]
    pub attribute: Option<String>,
    #[serde(default)]
    pub value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawScene {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    #[serde(default)]
    pub value: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawText {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<String>,
}

/// Parser reply: object declarations plus one list per constraint bucket.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedBuckets {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parser_reasoning: Option<String>,
    #[serde(default)]
    pub source_prompt: String,
    #[serde(default)]
    pub objects: Vec<RawObject>,
    #[serde(default)]
    pub at_least_count_constraints: Vec<RawCount>,
    #[serde(default)]
    pub exact_count_constraints: Vec<RawCount>,
    #[serde(default)]
    pub exclusion_constraints: Vec<RawExclusion>,
    #[serde(default)]
    pub relation_constraints: Vec<RawRelation>,
    #[serde(default)]
    pub attribute_constraints: Vec<RawAttribute>,
    #[serde(default)]
    pub global_scene_constraints: Vec<RawScene>,
    #[serde(default)]
    pub text_constraints: Vec<RawText>,
}

impl ParsedBuckets {
    pub fn from_json(bytes: &[u8]) -> Result<Self, ProgramError> {
        serde_json::from_slice(bytes).map_err(|e| ProgramError::Schema(e.to_string()))
    }
}

struct Compiler<'a> {
    declared: BTreeSet<&'a str>,
    predicates: Vec<Predicate>,
    ordinals: [usize; 7],
}

impl<'a> Compiler<'a> {
    fn require<T: Clone>(value: &Option<T>, bucket: &'static str, index: usize, field: &'static str) -> Result<T, ProgramError> {
        value.clone().ok_or(ProgramError::MalformedBucket { bucket, index, field })
    }

    fn resolve(&self, id: &str, bucket: &'static str, index: usize) -> Result<ObjectId, ProgramError> {
        if self.declared.contains(id) {
            Ok(ObjectId::new(id))
        } else {
            Err(ProgramError::UnresolvedObjectRef {
                bucket,
                index,
                object_id: id.to_string(),
            })
        }
    }

    fn push(&mut self, kind: PredicateKind, description: Option<String>) {
        if self.predicates.iter().any(|p| p.kind == kind) {
            return;
        }
        let family = kind.family();
        let slot = &mut self.ordinals[family.bucket_rank()];
        let id = PredicateId::new(family, *slot);
        *slot += 1;
        self.predicates.push(Predicate {
            predicate_id: id,
            kind,
            description,
        });
    }
}

/// Compiles raw parser buckets into a program with deterministic predicate ids.
pub fn compile(parsed: &ParsedBuckets) -> Result<VisualProgram, ProgramError> {
    const OBJECTS: &str = "objects";
    let mut objects = Vec::with_capacity(parsed.objects.len());
    for (i, raw) in parsed.objects.iter().enumerate() {
        let object_id = Compiler::require(&raw.object_id, OBJECTS, i, "object_id")?;
        let label = Compiler::require(&raw.label, OBJECTS, i, "label")?;
        if object_id.trim().is_empty() {
            return Err(ProgramError::MalformedBucket { bucket: OBJECTS, index: i, field: "object_id" });
        }
        if label.trim().is_empty() {
            return Err(ProgramError::MalformedBucket { bucket: OBJECTS, index: i, field: "label" });
        }
        objects.push(ObjectDecl {
            object_id: ObjectId(object_id),
            label,
            proposal_text: raw.proposal_text.clone(),
            aliases: raw.aliases.clone(),
            description: raw.description.clone(),
        });
    }

    let mut c = Compiler {
        declared: parsed.objects.iter().filter_map(|o| o.object_id.as_deref()).collect(),
        predicates: Vec::new(),
        ordinals: [0; 7],
    };

    const CAL: &str = "at_least_count_constraints";
    for (i, raw) in parsed.at_least_count_constraints.iter().enumerate() {
        let id = Compiler::require(&raw.object_id, CAL, i, "object_id")?;
        let count = Compiler::require(&raw.count, CAL, i, "count")?;
        let subject = c.resolve(&id, CAL, i)?;
        c.push(PredicateKind::CountAtLeast { subject, count }, None);
    }
    const CEX: &str = "exact_count_constraints";
    for (i, raw) in parsed.exact_count_constraints.iter().enumerate() {
        let id = Compiler::require(&raw.object_id, CEX, i, "object_id")?;
        let count = Compiler::require(&raw.count, CEX, i, "count")?;
        let subject = c.resolve(&id, CEX, i)?;
        c.push(PredicateKind::CountExact { subject, count }, None);
    }
    const EXC: &str = "exclusion_constraints";
    for (i, raw) in parsed.exclusion_constraints.iter().enumerate() {
        let id = Compiler::require(&raw.object_id, EXC, i, "object_id")?;
        let subject = c.resolve(&id, EXC, i)?;
        c.push(PredicateKind::Exclusion { subject }, None);
    }
    const REL: &str = "relation_constraints";
    for (i, raw) in parsed.relation_constraints.iter().enumerate() {
        let sid = Compiler::require(&raw.subject_id, REL, i, "subject_id")?;
        let rel = Compiler::require(&raw.relation, REL, i, "relation")?;
        let rid = Compiler::require(&raw.reference_id, REL, i, "reference_id")?;
        let subject = c.resolve(&sid, REL, i)?;
        let reference = c.resolve(&rid, REL, i)?;
        c.push(
            PredicateKind::Relation {
                subject,
                relation: RelationName::parse(&rel),
                reference,
            },
            raw.description.clone(),
        );
    }
    const ATT: &str = "attribute_constraints";
    for (i, raw) in parsed.attribute_constraints.iter().enumerate() {
        let id = Compiler::require(&raw.object_id, ATT, i, "object_id")?;
        let name = Compiler::require(&raw.attribute, ATT, i, "attribute")?;
        let value = Compiler::require(&raw.value, ATT, i, "value")?;
        let subject = c.resolve(&id, ATT, i)?;
        let target = match &raw.target_id {
            Some(t) => Some(c.resolve(t, ATT, i)?),
            None => None,
        };
        c.push(
            PredicateKind::Attribute {
                subject,
                attribute: AttributeName::parse(&name),
                value,
                target,
            },
            raw.description.clone(),
        );
    }
    const SCN: &str = "global_scene_constraints";
    for (i, raw) in parsed.global_scene_constraints.iter().enumerate() {
        let value = Compiler::require(&raw.value, SCN, i, "value")?;
        let attribute = SceneName::parse(raw.attribute.as_deref().unwrap_or("scene"));
        c.push(PredicateKind::GlobalScene { attribute, value }, None);
    }
    const TXT: &str = "text_constraints";
    for (i, raw) in parsed.text_constraints.iter().enumerate() {
        let text = Compiler::require(&raw.text, TXT, i, "text")?;
        if text.is_empty() {
            return Err(ProgramError::MalformedBucket { bucket: TXT, index: i, field: "text" });
        }
        let subject = match &raw.object_id {
            Some(o) => Some(c.resolve(o, TXT, i)?),
            None => None,
        };
        c.push(PredicateKind::VisibleText { text, subject }, None);
    }

    Ok(VisualProgram::new(parsed.source_prompt.clone(), objects, c.predicates))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dog_buckets() -> ParsedBuckets {
        ParsedBuckets {
            source_prompt: "a dog".into(),
            objects: vec![RawObject {
                object_id: Some("o1".into()),
                label: Some("dog".into()),
                ..Default::default()
            }],
            at_least_count_constraints: vec![RawCount {
                object_id: Some("o1".into()),
                count: Some(1),
            }],
            ..Default::default()
        }
    }

    #[test]
    fn minimal_program() {
        let p = compile(&dog_buckets()).unwrap();
        assert_eq!(p.objects.len(), 1);
        assert_eq!(p.predicates.len(), 1);
        assert_eq!(p.predicates[0].predicate_id.as_str(), "cal-0");
        assert_eq!(p.predicates[0].family(), Family::CountAtLeast);
    }

    #[test]
    fn duplicate_relations_collapse() {
        let mut b = dog_buckets();
        b.objects.push(RawObject {
            object_id: Some("o2".into()),
            label: Some("cat".into()),
            ..Default::default()
        });
        let rel = RawRelation {
            subject_id: Some("o1".into()),
            relation: Some("left".into()),
            reference_id: Some("o2".into()),
            description: None,
        };
        b.relation_constraints = vec![rel.clone(), rel];
        let p = compile(&b).unwrap();
        let rels: Vec<_> = p.predicates.iter().filter(|p| p.family() == Family::Relation).collect();
        assert_eq!(rels.len(), 1);
        assert_eq!(rels[0].predicate_id.as_str(), "rel-0");
    }

    #[test]
    fn unresolved_reference() {
        let mut b = dog_buckets();
        b.exclusion_constraints.push(RawExclusion { object_id: Some("o9".into()) });
        match compile(&b) {
            Err(ProgramError::UnresolvedObjectRef { object_id, .. }) => assert_eq!(object_id, "o9"),
            other => panic!("expected UnresolvedObjectRef, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_malformed() {
        let mut b = dog_buckets();
        b.exact_count_constraints.push(RawCount { object_id: Some("o1".into()), count: None });
        assert_eq!(
            compile(&b),
            Err(ProgramError::MalformedBucket {
                bucket: "exact_count_constraints",
                index: 0,
                field: "count"
            })
        );
    }

    #[test]
    fn ids_follow_bucket_order() {
        let json = r#"{
            "source_prompt": "two dogs left of a cat, no bird",
            "objects": [
                {"object_id": "o1", "label": "dog"},
                {"object_id": "o2", "label": "cat"},
                {"object_id": "o3", "label": "bird"}
            ],
            "exact_count_constraints": [{"object_id": "o1", "count": 2}],
            "at_least_count_constraints": [{"object_id": "o2", "count": 1}],
            "exclusion_constraints": [{"object_id": "o3"}],
            "relation_constraints": [{"subject_id": "o1", "relation": "left", "reference_id": "o2"}],
            "global_scene_constraints": [{"value": "park"}]
        }"#;
        let p = compile(&ParsedBuckets::from_json(json.as_bytes()).unwrap()).unwrap();
        let ids: Vec<_> = p.predicates.iter().map(|p| p.predicate_id.as_str()).collect();
        assert_eq!(ids, ["cal-0", "cex-0", "exc-0", "rel-0", "scn-0"]);
    }

    #[test]
    fn canonical_roundtrip_and_stability() {
        let p = compile(&dog_buckets()).unwrap();
        let a = p.canonical_bytes();
        assert_eq!(a, p.canonical_bytes());
        let back = VisualProgram::from_json(&a).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.canonical_bytes(), a);
    }

    #[test]
    fn empty_program_serializes() {
        let p = VisualProgram::new("", vec![], vec![]);
        let bytes = p.canonical_bytes();
        assert_eq!(VisualProgram::from_json(&bytes).unwrap(), p);
    }

    #[test]
    fn unsupported_names_survive_serialization() {
        let p = VisualProgram::new(
            "x",
            vec![ObjectDecl::new("o1", "dog"), ObjectDecl::new("o2", "cat")],
            vec![Predicate::new(
                PredicateId::new(Family::Relation, 0),
                PredicateKind::Relation {
                    subject: ObjectId::new("o1"),
                    relation: RelationName::parse("hugging"),
                    reference: ObjectId::new("o2"),
                },
            )],
        );
        let back = VisualProgram::from_json(&p.canonical_bytes()).unwrap();
        assert_eq!(back, p);
        match &back.predicates[0].kind {
            PredicateKind::Relation { relation, .. } => assert!(!relation.is_supported()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn program_id_tracks_content() {
        let a = compile(&dog_buckets()).unwrap();
        let mut b = dog_buckets();
        b.source_prompt = "a dog!".into();
        let b = compile(&b).unwrap();
        assert_ne!(a.program_id, b.program_id);
        assert_eq!(a.program_id, compile(&dog_buckets()).unwrap().program_id);
    }
}
