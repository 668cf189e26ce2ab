//! MLLM roles: prompt rendering, strict reply parsing and usage accounting.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, CallRecord, CostMeter, ImageRef};
use crate::evidence::Region;
use crate::normalize::NormalizationReport;
use crate::program::{ParsedBuckets, VisualProgram};
use crate::relation::Status;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MllmRole {
    Parser,
    Rewriter,
    Reviewer,
    Auditor,
    TextVerifier,
    CropVerifier,
}

pub const PARSER_SYSTEM: &str = "You are a visual-program compiler for text-to-image prompts. \
Compile the user prompt into a fixed visual program for deterministic visual checks. \
Preserve explicit object identity, counts, attributes, including action-related attributes and their targets, \
spatial relations, global scene constraints, visible text, and relation direction. \
Use supported predicate names only; declare canonical objects once; represent multiplicity through count \
constraints rather than per-instance objects unless the prompt explicitly distinguishes instances.";

pub const PARSER_SCHEMA: &str = "Reply with one JSON object with the keys parser_reasoning, source_prompt, objects, \
at_least_count_constraints, exclusion_constraints, exact_count_constraints, relation_constraints, \
attribute_constraints, global_scene_constraints and text_constraints. Return empty buckets as empty lists. \
Object records: object_id, label, optional proposal_text, aliases, description. \
Count records: object_id, count. Exclusion records: object_id. \
Relation records: subject_id, relation, reference_id. \
Attribute records: object_id, attribute, value, optional target_id. \
Scene records: attribute, value. Text records: text, optional object_id. \
Supported relations: left, right, above, below, near, in, inside, on, overlapping, in_front_of, behind. \
Supported attributes: color, material, shape, pattern, size, pose, state, action, other. \
Supported scene attributes: scene, background, lighting, weather, time_of_day, style.";

pub const REVIEWER_SYSTEM: &str = "You are a reviewer and repairer for a structured visual program that was compiled \
from a text-to-image prompt. Treat the normalized candidate as a starting point, not as ground truth. \
Check object declarations, object-ID consistency, count attachment, action-related attribute targets, \
relation direction, supported predicate names, self-relations, self-targeted action-related attributes, \
unsupported type/size attributes, and exclusions that are not explicit absence requests. \
Reply with one JSON object with the keys approved_candidate, review_reasoning, detected_issues and reviewed_program. \
If the candidate is already correct, return an equivalent reviewed program; otherwise return a repaired program.";

pub const REWRITER_SYSTEM: &str = "You are a prompt rewriter for a text-to-image model. \
Given one original prompt, return exactly N rewritten prompts that are more descriptive and visually concrete \
while preserving the exact meaning. Preserve every explicit detail including object identity, count, attributes, \
including action roles, spatial relations, background, visible text, medium, and style. Do not add new salient \
objects or object-level attributes that are not stated or directly implied. Prefer one coherent scene and vary \
style, framing, mood, or scene detail across rewrites.";

pub const AUDITOR_SYSTEM: &str = "You are reviewing one candidate image against a short list of visual checks. \
Decide whether every listed check is visually satisfied while the image still matches the original prompt. \
Treat the listed checks as the focus, but fail if broader prompt mismatches make the image clearly wrong. \
Prefer failure when a listed color, material, pattern, shape, size, action-related attribute, relation, \
or visible object is wrong or too unclear to verify confidently. \
Reply with one JSON object with the keys all_checks_passed, short_reason and check_reasoning.";

pub const TEXT_VERIFIER_SYSTEM: &str = "You check whether an image visibly contains a requested piece of text. \
Small rendering differences in font, case or spacing are acceptable; missing, misspelled or illegible text is not. \
Reply with one JSON object with the keys verdict (satisfied, uncertain or violated) and reason.";

pub const CROP_VERIFIER_SYSTEM: &str = "You check one region of an image against a description of what the object \
in that region is doing. Reply with one JSON object with the keys verdict (satisfied, uncertain or violated) and reason.";

pub fn parser_user(prompt: &str) -> String {
    format!("Compile the following user prompt into the structured visual program schema. user_prompt: {prompt}.")
}

pub fn rewriter_user(prompt: &str, n: usize) -> String {
    format!("Original prompt: {prompt}. Return exactly {n} rewritten prompts as JSON with one key named rewritten_prompts.")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MllmConfig {
    pub model: String,
    pub temperature: f64,
    pub seed: u64,
    /// Extra attempts after a reply fails its schema.
    pub schema_retries: u32,
    /// Worked examples appended to the parser system instruction.
    pub parser_few_shots: Vec<String>,
}

impl Default for MllmConfig {
    fn default() -> Self {
        Self {
            model: "Qwen/Qwen3-VL-32B-Instruct".into(),
            temperature: 0.0,
            seed: 42,
            schema_retries: 1,
            parser_few_shots: Vec::new(),
        }
    }
}

/// One chat-completions request. `payload` carries the structured inputs so
/// in-process fakes need not parse the rendered text; it is not sent on the wire.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub role: MllmRole,
    pub model: String,
    pub temperature: f64,
    pub seed: u64,
    pub system: String,
    pub user: String,
    pub images: Vec<ImageRef>,
    #[serde(skip)]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub content: String,
    /// Reported usage; estimated from text length when absent.
    pub tokens_in: Option<u64>,
    pub tokens_out: Option<u64>,
}

impl ChatReply {
    pub fn text(content: impl Into<String>) -> Self {
        Self { content: content.into(), tokens_in: None, tokens_out: None }
    }
}

pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, BackendError>;
}

/// Rough token count used when the transport reports no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Pulls the first JSON object out of a reply, tolerating code fences and prose around it.
pub fn extract_json(content: &str) -> Result<Value, BackendError> {
    if let Ok(v) = serde_json::from_str::<Value>(content.trim()) {
        return Ok(v);
    }
    let start = content.find('{');
    let end = content.rfind('}');
    match (start, end) {
        (Some(s), Some(e)) if s < e => serde_json::from_str(&content[s..=e])
            .map_err(|err| BackendError::SchemaViolation(format!("reply is not JSON: {err}"))),
        _ => Err(BackendError::SchemaViolation("reply contains no JSON object".into())),
    }
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value, String> {
    v.get(key).ok_or_else(|| format!("missing key {key}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewReply {
    pub approved_candidate: bool,
    pub review_reasoning: String,
    pub detected_issues: Vec<Value>,
    pub reviewed_program: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReply {
    pub all_checks_passed: bool,
    pub short_reason: String,
    pub check_reasoning: Value,
}

const PARSER_BUCKETS: [&str; 8] = [
    "objects",
    "at_least_count_constraints",
    "exclusion_constraints",
    "exact_count_constraints",
    "relation_constraints",
    "attribute_constraints",
    "global_scene_constraints",
    "text_constraints",
];

fn parse_verdict(v: &Value) -> Result<Status, String> {
    serde_json::from_value(field(v, "verdict")?.clone()).map_err(|e| format!("bad verdict: {e}"))
}

/// Renders role templates, issues requests and validates replies.
#[derive(Clone)]
pub struct MllmClient {
    transport: Arc<dyn ChatTransport>,
    config: MllmConfig,
    meter: Arc<CostMeter>,
}

impl MllmClient {
    pub fn new(transport: Arc<dyn ChatTransport>, config: MllmConfig, meter: Arc<CostMeter>) -> Self {
        Self { transport, config, meter }
    }

    pub fn meter(&self) -> &Arc<CostMeter> {
        &self.meter
    }

    fn call<T>(
        &self,
        role: MllmRole,
        system: String,
        user: String,
        images: Vec<ImageRef>,
        payload: Value,
        parse: impl Fn(&Value) -> Result<T, String>,
    ) -> Result<T, BackendError> {
        let request = ChatRequest {
            role,
            model: self.config.model.clone(),
            temperature: self.config.temperature,
            seed: self.config.seed,
            system,
            user,
            images,
            payload,
        };
        let mut last = String::new();
        for _ in 0..=self.config.schema_retries {
            let started = Instant::now();
            let reply = self.transport.complete(&request);
            let latency_us = started.elapsed().as_micros() as u64;
            let reply = match reply {
                Ok(r) => r,
                Err(e) => {
                    self.meter.record_call(CallRecord {
                        role,
                        tokens_in: 0,
                        tokens_out: 0,
                        image_inputs: 0,
                        ok: false,
                        latency_us,
                    });
                    return Err(e);
                }
            };
            let parsed = extract_json(&reply.content)
                .map_err(|e| e.to_string())
                .and_then(|v| parse(&v));
            self.meter.record_call(CallRecord {
                role,
                tokens_in: reply
                    .tokens_in
                    .unwrap_or_else(|| estimate_tokens(&request.system) + estimate_tokens(&request.user)),
                tokens_out: reply.tokens_out.unwrap_or_else(|| estimate_tokens(&reply.content)),
                image_inputs: request.images.len() as u64,
                ok: parsed.is_ok(),
                latency_us,
            });
            match parsed {
                Ok(v) => return Ok(v),
                Err(e) => last = e,
            }
        }
        Err(BackendError::Failure(format!("{role:?} reply failed schema: {last}")))
    }

    pub fn parse(&self, prompt: &str) -> Result<ParsedBuckets, BackendError> {
        let mut system = format!("{PARSER_SYSTEM}\n{PARSER_SCHEMA}");
        for shot in &self.config.parser_few_shots {
            system.push('\n');
            system.push_str(shot);
        }
        self.call(MllmRole::Parser, system, parser_user(prompt), vec![], json!({ "prompt": prompt }), |v| {
            for key in PARSER_BUCKETS {
                if !field(v, key)?.is_array() {
                    return Err(format!("{key} is not a list"));
                }
            }
            let mut b: ParsedBuckets = serde_json::from_value(v.clone()).map_err(|e| e.to_string())?;
            if b.source_prompt.is_empty() {
                b.source_prompt = prompt.to_string();
            }
            Ok(b)
        })
    }

    pub fn rewrite(&self, prompt: &str, n: usize) -> Result<Vec<String>, BackendError> {
        let system = REWRITER_SYSTEM.replace("exactly N ", &format!("exactly {n} "));
        self.call(MllmRole::Rewriter, system, rewriter_user(prompt, n), vec![], json!({ "prompt": prompt, "n": n }), |v| {
            serde_json::from_value::<Vec<String>>(field(v, "rewritten_prompts")?.clone()).map_err(|e| e.to_string())
        })
    }

    pub fn review(
        &self,
        prompt: &str,
        report: &NormalizationReport,
        candidate: &VisualProgram,
    ) -> Result<ReviewReply, BackendError> {
        let payload = json!({
            "original_prompt": prompt,
            "normalization_report": report,
            "candidate_visual_program": candidate,
        });
        let user = serde_json::to_string_pretty(&payload).expect("review payload serializes");
        self.call(MllmRole::Reviewer, REVIEWER_SYSTEM.into(), user, vec![], payload, |v| {
            let reply: ReviewReply = serde_json::from_value(v.clone()).map_err(|e| e.to_string())?;
            if !reply.reviewed_program.is_object() {
                return Err("reviewed_program is not an object".into());
            }
            Ok(reply)
        })
    }

    pub fn audit(&self, image: &ImageRef, prompt: &str, checks: &[String]) -> Result<AuditReply, BackendError> {
        let payload = json!({ "user_prompt": prompt, "checks_to_verify": checks });
        let user = serde_json::to_string_pretty(&payload).expect("audit payload serializes");
        self.call(MllmRole::Auditor, AUDITOR_SYSTEM.into(), user, vec![image.clone()], payload, |v| {
            serde_json::from_value(v.clone()).map_err(|e| e.to_string())
        })
    }

    pub fn verify_text(&self, image: &ImageRef, text: &str) -> Result<Status, BackendError> {
        let payload = json!({ "requested_text": text });
        let user = serde_json::to_string_pretty(&payload).expect("payload serializes");
        self.call(MllmRole::TextVerifier, TEXT_VERIFIER_SYSTEM.into(), user, vec![image.clone()], payload, parse_verdict)
    }

    pub fn verify_crop(&self, image: &ImageRef, region: &Region, description: &str) -> Result<Status, BackendError> {
        let payload = json!({ "region": region, "description": description });
        let user = serde_json::to_string_pretty(&payload).expect("payload serializes");
        self.call(MllmRole::CropVerifier, CROP_VERIFIER_SYSTEM.into(), user, vec![image.clone()], payload, parse_verdict)
    }
}

/// Text and crop checks on one candidate image, routed through an [`MllmClient`].
pub struct CandidateJudge<'a> {
    pub client: &'a MllmClient,
    pub image: &'a ImageRef,
}

impl crate::verify::VisualJudge for CandidateJudge<'_> {
    fn verify_text(&self, text: &str) -> Result<Status, BackendError> {
        self.client.verify_text(self.image, text)
    }

    fn verify_crop(&self, region: &Region, description: &str) -> Result<Status, BackendError> {
        self.client.verify_crop(self.image, region, description)
    }
}
