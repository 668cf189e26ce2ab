//! Synthetic image world: a prompt language, a layout-based image model with
//! configurable failure channels, oracle-backed perception and scripted MLLM roles.
//!
//! The world implements [`ImageModel`], [`PerceptionService`] and [`ChatTransport`],
//! so a full run can execute offline and deterministically.

pub mod grammar;
pub mod scene;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::backends::{BackendError, ChatReply, ChatRequest, ChatTransport, ImageModel, ImageRef, MllmRole, PerceptionService};
use crate::controller::instructions::check_id;
use crate::evidence::{Detection, DepthMap, EvidenceCache, Perception, PixelRect, Region};
use crate::normalize::normalize;
use crate::program::{compile, VisualProgram};
use crate::relation::Status;
use crate::rewrites::SINGLE_SCENE_CLAUSE;
use crate::verify::{Phase, StateVector, Verifier, VerifierConfig, VisualJudge};

pub use scene::{BuildError, Scene};

/// Per-generation failure rates and perception noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Chance that a required object is missing entirely.
    pub drop_object: f64,
    /// Chance that a counted object has one instance too many or too few.
    pub count_delta: f64,
    /// Chance that an attribute is wrong (half the time) or visually ambiguous.
    pub attribute_flip: f64,
    pub relation_violate: f64,
    pub scene_flip: f64,
    pub text_drop: f64,
    /// Chance that an edit does what it was asked to.
    pub edit_success: f64,
    /// Uniform jitter on detector confidences.
    pub confidence_jitter: f64,
    /// Chance of one low-confidence false positive per detector query.
    pub distractor_rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            drop_object: 0.0,
            count_delta: 0.0,
            attribute_flip: 0.0,
            relation_violate: 0.0,
            scene_flip: 0.0,
            text_drop: 0.0,
            edit_success: 1.0,
            confidence_jitter: 0.0,
            distractor_rate: 0.0,
        }
    }
}

impl NoiseConfig {
    /// Failure rates used by the policy comparison.
    pub fn benchmark() -> Self {
        Self {
            drop_object: 0.15,
            count_delta: 0.25,
            attribute_flip: 0.25,
            relation_violate: 0.20,
            edit_success: 0.8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("drop_object", self.drop_object),
            ("count_delta", self.count_delta),
            ("attribute_flip", self.attribute_flip),
            ("relation_violate", self.relation_violate),
            ("scene_flip", self.scene_flip),
            ("text_drop", self.text_drop),
            ("edit_success", self.edit_success),
            ("confidence_jitter", self.confidence_jitter),
            ("distractor_rate", self.distractor_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("noise.{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub canvas: u32,
    /// Layout draws before a program is declared infeasible.
    pub max_attempts: u32,
    pub noise: NoiseConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { canvas: 128, max_attempts: 50, noise: NoiseConfig::default() }
    }
}

/// First 8 bytes of SHA-256 over the parts, separated by NUL.
pub fn mix(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn rng_for(parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Drops the single-scene clause a generation prompt may carry.
fn strip_guard(prompt: &str) -> &str {
    prompt.trim_end().strip_suffix(SINGLE_SCENE_CLAUSE).unwrap_or(prompt).trim_end()
}

/// Noise multiplier for a generation prompt: 1 for a bare prompt, lower for
/// prompts carrying rewriter style clauses.
pub fn difficulty(prompt: &str) -> f64 {
    let core = strip_guard(prompt);
    let styled = core.split(',').map(str::trim).any(|c| grammar::STYLES.contains(&c));
    if styled {
        0.6 + 0.4 * (mix(&["difficulty", core]) as f64 / u64::MAX as f64)
    } else {
        1.0
    }
}

/// Compiles and normalizes a prompt of the synthetic language.
pub fn program_for(prompt: &str) -> Result<VisualProgram, BackendError> {
    let parsed = grammar::parse_prompt(prompt);
    let program = compile(&parsed).map_err(|e| BackendError::InfeasibleProgram(e.to_string()))?;
    Ok(normalize(&program).0)
}

/// Builds a scene that the noise-free oracle accepts, retrying the layout.
pub fn construct(program: &Arc<VisualProgram>, rng: &mut ChaCha8Rng, config: &SynthConfig) -> Result<Scene, BackendError> {
    let verifier_config = VerifierConfig::default();
    for _ in 0..config.max_attempts {
        match scene::build(program, rng, config.canvas) {
            Ok(s) => {
                if oracle_states(&s, &verifier_config).all_satisfied() {
                    return Ok(s);
                }
            }
            Err(BuildError::Retry) => {}
            Err(BuildError::Infeasible(why)) => return Err(BackendError::InfeasibleProgram(why)),
        }
    }
    Err(BackendError::InfeasibleProgram(format!("no layout found in {} attempts", config.max_attempts)))
}

/// Predicate states under noise-free perception, with ambiguous renderings read as intended.
pub fn oracle_states(scene: &Scene, config: &VerifierConfig) -> StateVector {
    let perception = SceneView::truth(scene);
    let cache = EvidenceCache::new(&perception);
    Verifier::new(&scene.program, config).verify_program(&cache, &TruthJudge { scene }, Phase::Late)
}

struct TruthJudge<'a> {
    scene: &'a Scene,
}

impl VisualJudge for TruthJudge<'_> {
    fn verify_text(&self, text: &str) -> Result<Status, BackendError> {
        Ok(text_status(self.scene, text))
    }

    fn verify_crop(&self, region: &Region, description: &str) -> Result<Status, BackendError> {
        Ok(crop_status(&SceneView::truth(self.scene), region, description))
    }
}

fn text_status(scene: &Scene, text: &str) -> Status {
    if scene.texts.iter().any(|t| t.eq_ignore_ascii_case(text)) {
        Status::Satisfied
    } else {
        Status::Violated
    }
}

fn crop_status(view: &SceneView, region: &Region, description: &str) -> Status {
    match region {
        Region::Detection { query, index } => match view.entry(query, *index) {
            Some(Some(i)) if view.scene.phrase_score(i, description, true) > 0.5 => Status::Satisfied,
            _ => Status::Violated,
        },
        _ => Status::Violated,
    }
}

/// Detector confidences for the main and the other instances of a label.
const MAIN_SCORE: f64 = 0.95;
const OTHER_SCORE: f64 = 0.90;
const DETECTOR_FLOOR: f64 = 0.30;

/// Perception over one synthetic scene.
struct SceneView<'a> {
    scene: &'a Scene,
    /// Noise source; `None` reads the scene exactly.
    noise: Option<(&'a NoiseConfig, &'a str)>,
    detections: RefCell<BTreeMap<String, Vec<(Option<usize>, Detection)>>>,
}

impl<'a> SceneView<'a> {
    fn truth(scene: &'a Scene) -> Self {
        Self { scene, noise: None, detections: RefCell::default() }
    }

    fn noisy(scene: &'a Scene, noise: &'a NoiseConfig, salt: &'a str) -> Self {
        Self { scene, noise: Some((noise, salt)), detections: RefCell::default() }
    }

    fn compute(&self, query: &str) -> Vec<(Option<usize>, Detection)> {
        let s = self.scene;
        let mut out = Vec::new();
        let mut seen_main = false;
        for (i, inst) in s.instances.iter().enumerate() {
            if !scene::label_matches(&inst.label, query) {
                continue;
            }
            let mut score = if seen_main { OTHER_SCORE } else { MAIN_SCORE };
            seen_main = true;
            if let Some((noise, salt)) = self.noise {
                if noise.confidence_jitter > 0.0 {
                    let mut rng = rng_for(&[salt, "jitter", query, &i.to_string()]);
                    score += rng.gen_range(-noise.confidence_jitter..=noise.confidence_jitter);
                }
            }
            out.push((Some(i), detection(query, score.clamp(0.0, 1.0), inst.rect)));
        }
        if let Some((noise, salt)) = self.noise {
            let mut rng = rng_for(&[salt, "distractor", query]);
            if rng.gen_bool(noise.distractor_rate) {
                let side = 16.min(s.width).min(s.height);
                let x0 = rng.gen_range(0..=s.width - side);
                let y0 = rng.gen_range(0..=s.height - side);
                let rect = PixelRect { x0, y0, x1: x0 + side, y1: y0 + side };
                out.push((None, detection(query, rng.gen_range(0.36..0.6), rect)));
            }
        }
        out.retain(|(_, d)| d.score >= DETECTOR_FLOOR);
        out.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        out
    }

    fn with_list<T>(&self, query: &str, f: impl FnOnce(&[(Option<usize>, Detection)]) -> T) -> T {
        let mut map = self.detections.borrow_mut();
        let list = map.entry(query.to_string()).or_insert_with(|| self.compute(query));
        f(list)
    }

    /// Instance behind the `index`-th detection for `query`; `Some(None)` for a distractor.
    fn entry(&self, query: &str, index: usize) -> Option<Option<usize>> {
        self.with_list(query, |l| l.get(index).map(|e| e.0))
    }
}

fn detection(query: &str, score: f64, r: PixelRect) -> Detection {
    Detection {
        label_query: query.to_string(),
        score,
        bbox: [f64::from(r.x0), f64::from(r.y0), f64::from(r.x1), f64::from(r.y1)],
        mask: None,
    }
}

impl Perception for SceneView<'_> {
    fn image_size(&self) -> (u32, u32) {
        (self.scene.width, self.scene.height)
    }

    fn detect(&self, query: &str) -> Result<Vec<Detection>, BackendError> {
        Ok(self.with_list(query, |l| l.iter().map(|e| e.1.clone()).collect()))
    }

    fn region_score(&self, region: &Region, text: &str) -> Result<f64, BackendError> {
        match region {
            Region::Detection { query, index } => match self.entry(query, *index) {
                Some(Some(i)) => Ok(self.scene.phrase_score(i, text, self.noise.is_none())),
                Some(None) => Ok(0.15),
                None => Err(BackendError::Missing(format!("no detection {query}#{index}"))),
            },
            Region::FullImage | Region::Background { .. } => Ok(self.scene.tag_score(text)),
        }
    }

    fn depth(&self) -> Result<Option<DepthMap>, BackendError> {
        Ok(Some(self.scene.depth_map()))
    }
}

/// Synthetic backend: image model, perception and MLLM roles over shared scenes.
pub struct SynthWorld {
    pub config: SynthConfig,
    scenes: Mutex<HashMap<ImageRef, Arc<Scene>>>,
    programs: Mutex<HashMap<String, Result<Arc<VisualProgram>, BackendError>>>,
}

impl SynthWorld {
    pub fn new(config: SynthConfig) -> Self {
        Self { config, scenes: Mutex::default(), programs: Mutex::default() }
    }

    pub fn scene(&self, image: &ImageRef) -> Result<Arc<Scene>, BackendError> {
        self.scenes
            .lock()
            .expect("scene store poisoned")
            .get(image)
            .cloned()
            .ok_or_else(|| BackendError::Missing(format!("unknown image {image}")))
    }

    fn store(&self, image: ImageRef, scene: Scene) -> ImageRef {
        self.scenes.lock().expect("scene store poisoned").insert(image.clone(), Arc::new(scene));
        image
    }

    fn program(&self, prompt: &str) -> Result<Arc<VisualProgram>, BackendError> {
        let core = strip_guard(prompt).to_string();
        let mut cache = self.programs.lock().expect("program cache poisoned");
        cache.entry(core.clone()).or_insert_with(|| program_for(&core).map(Arc::new)).clone()
    }

    /// Whether `prompt` renders under zero noise; used to screen generated suites.
    pub fn feasible(&self, prompt: &str) -> bool {
        let Ok(program) = self.program(prompt) else { return false };
        construct(&program, &mut rng_for(&["feasible", prompt]), &self.config).is_ok()
    }

    /// Ground-truth states of the image under the noise-free oracle.
    pub fn truth(&self, image: &ImageRef, config: &VerifierConfig) -> Result<StateVector, BackendError> {
        Ok(oracle_states(&*self.scene(image)?, config))
    }

    fn audit(&self, request: &ChatRequest) -> Result<Value, BackendError> {
        let image = request.images.first().ok_or_else(|| BackendError::Missing("audit without image".into()))?;
        let scene = self.scene(image)?;
        let states = oracle_states(&scene, &VerifierConfig::default());
        let checks: Vec<String> = serde_json::from_value(request.payload["checks_to_verify"].clone())
            .map_err(|e| BackendError::SchemaViolation(e.to_string()))?;
        let mut reasoning = Vec::new();
        let mut all = true;
        for c in &checks {
            let ok = check_id(c)
                .and_then(|id| states.states.iter().find(|s| s.predicate_id.as_str() == id))
                .is_some_and(|s| s.state.is_satisfied());
            all &= ok;
            reasoning.push(json!({ "check": c, "passed": ok }));
        }
        let reason = if all { "every check is visible" } else { "at least one check fails" };
        Ok(json!({ "all_checks_passed": all, "short_reason": reason, "check_reasoning": reasoning }))
    }
}

impl ImageModel for SynthWorld {
    fn generate(&self, prompt: &str, seed: u64) -> Result<ImageRef, BackendError> {
        let program = self.program(prompt)?;
        let seed = seed.to_string();
        let mut rng = rng_for(&["generate", prompt, &seed]);
        let mut scene = construct(&program, &mut rng, &self.config)?;
        scene::apply_noise(&mut scene, &self.config.noise, difficulty(prompt), &mut rng);
        let id = format!("synth-{:016x}", mix(&["generate", prompt, &seed]));
        Ok(self.store(id, scene))
    }

    fn edit(&self, image: &ImageRef, instruction: &str, seed: u64) -> Result<ImageRef, BackendError> {
        let parent = self.scene(image)?;
        let op = scene::parse_instruction(&parent.program, instruction)
            .ok_or_else(|| BackendError::UnparseableInstruction(instruction.chars().take(80).collect()))?;
        let seed = seed.to_string();
        let mut rng = rng_for(&["edit", image, instruction, &seed]);
        let mut next = (*parent).clone();
        if rng.gen_bool(self.config.noise.edit_success) {
            scene::apply_edit(&mut next, &op, &mut rng);
        }
        let id = format!("synth-{:016x}", mix(&["edit", image, instruction, &seed]));
        Ok(self.store(id, next))
    }
}

impl PerceptionService for SynthWorld {
    fn open<'a>(&'a self, image: &ImageRef) -> Result<Box<dyn Perception + 'a>, BackendError> {
        let scene = self.scene(image)?;
        Ok(Box::new(OwnedView { scene, noise: self.config.noise.clone(), salt: image.clone() }))
    }
}

/// A [`SceneView`] that owns its scene.
struct OwnedView {
    scene: Arc<Scene>,
    noise: NoiseConfig,
    salt: String,
}

impl OwnedView {
    fn view(&self) -> SceneView<'_> {
        SceneView::noisy(&self.scene, &self.noise, &self.salt)
    }
}

impl Perception for OwnedView {
    fn image_size(&self) -> (u32, u32) {
        (self.scene.width, self.scene.height)
    }

    fn detect(&self, query: &str) -> Result<Vec<Detection>, BackendError> {
        self.view().detect(query)
    }

    fn region_score(&self, region: &Region, text: &str) -> Result<f64, BackendError> {
        self.view().region_score(region, text)
    }

    fn depth(&self) -> Result<Option<DepthMap>, BackendError> {
        self.view().depth()
    }
}

fn verdict(status: Status) -> String {
    json!({ "verdict": status }).to_string()
}

impl ChatTransport for SynthWorld {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        let p = &request.payload;
        let text = |key: &str| p[key].as_str().map(str::to_string).ok_or_else(|| BackendError::Missing(format!("payload has no {key}")));
        let content = match request.role {
            MllmRole::Parser => serde_json::to_string(&grammar::parse_prompt(&text("prompt")?)).expect("buckets serialize"),
            MllmRole::Rewriter => {
                let prompt = text("prompt")?;
                let n = p["n"].as_u64().unwrap_or(8) as usize;
                let rewrites: Vec<String> =
                    grammar::STYLES.iter().cycle().take(n).map(|s| format!("{prompt}, {s}")).collect();
                json!({ "rewritten_prompts": rewrites }).to_string()
            }
            MllmRole::Reviewer => json!({
                "approved_candidate": true,
                "review_reasoning": "program matches the prompt",
                "detected_issues": [],
                "reviewed_program": p["candidate_visual_program"],
            })
            .to_string(),
            MllmRole::Auditor => self.audit(request)?.to_string(),
            MllmRole::TextVerifier => {
                let image = request.images.first().ok_or_else(|| BackendError::Missing("no image".into()))?;
                verdict(text_status(&*self.scene(image)?, &text("requested_text")?))
            }
            MllmRole::CropVerifier => {
                let image = request.images.first().ok_or_else(|| BackendError::Missing("no image".into()))?;
                let scene = self.scene(image)?;
                let region: Region = serde_json::from_value(p["region"].clone())
                    .map_err(|e| BackendError::SchemaViolation(e.to_string()))?;
                let view = SceneView::noisy(&scene, &self.config.noise, image);
                verdict(crop_status(&view, &region, &text("description")?))
            }
        };
        Ok(ChatReply::text(content))
    }
}
