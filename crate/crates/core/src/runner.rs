//! Batch orchestration: configuration, the per-prompt pipeline, metrics and reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::http::{HttpChatTransport, HttpImageModel, HttpPerceptionService};
use crate::backends::{BackendError, BackendSuite, CostMeter, CostSnapshot, MllmClient, MllmConfig, MllmRole};
use crate::controller::{ControlError, ControllerConfig, Outcome, Refinement, Refiner, Variant};
use crate::evidence::{EvidenceCache, EvidenceFile};
use crate::normalize::{apply_review, normalize, review_gate, NormalizationReport};
use crate::program::{compile, PredicateId, VisualProgram};
use crate::rewrites::{RewritePool, MAX_REWRITES};
use crate::synth::{grammar, SynthConfig, SynthWorld};
use crate::verify::{Phase, StateVector, Verifier, VerifierConfig};

pub const ENV_ENDPOINT: &str = "VPGATE_ENDPOINT";
pub const ENV_API_KEY: &str = "VPGATE_API_KEY";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Synthetic,
    Live,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "synthetic" => Some(Mode::Synthetic),
            "live" => Some(Mode::Live),
            _ => None,
        }
    }
}

/// Service locations for live mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveConfig {
    /// Chat-completions base URL.
    pub endpoint: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub image_endpoint: String,
    pub perception_endpoint: String,
    pub timeout_secs: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1".into(),
            api_key: None,
            image_endpoint: "http://localhost:8100".into(),
            perception_endpoint: "http://localhost:8200".into(),
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub budget: u32,
    /// Base seed, reset for every prompt.
    pub seed: u64,
    pub mode: Mode,
    /// Rewrites requested per prompt.
    pub rewrites: usize,
    pub phase: Phase,
    pub override_enabled: bool,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
    pub thresholds: VerifierConfig,
    pub mllm: MllmConfig,
    pub live: LiveConfig,
    pub synthetic: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let c = ControllerConfig::default();
        Self {
            budget: c.budget,
            seed: c.seed,
            mode: Mode::Synthetic,
            rewrites: MAX_REWRITES,
            phase: c.phase,
            override_enabled: c.override_enabled,
            workers: 0,
            thresholds: VerifierConfig::default(),
            mllm: MllmConfig::default(),
            live: LiveConfig::default(),
            synthetic: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let c: RunConfig = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a TOML file and applies environment overrides.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let mut c = Self::from_toml(&std::fs::read_to_string(path)?)?;
        c.apply_env(|k| std::env::var(k).ok());
        Ok(c)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(e) = var(ENV_ENDPOINT).filter(|v| !v.is_empty()) {
            self.live.endpoint = e;
        }
        if let Some(k) = var(ENV_API_KEY).filter(|v| !v.is_empty()) {
            self.live.api_key = Some(k);
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.budget == 0 {
            return Err(RunError::Config("budget must be at least 1".into()));
        }
        self.thresholds.validate().map_err(RunError::Config)?;
        self.synthetic.noise.validate().map_err(RunError::Config)?;
        if self.synthetic.canvas < 16 {
            return Err(RunError::Config("synthetic.canvas must be at least 16".into()));
        }
        Ok(())
    }

    pub fn controller(&self, variant: Variant) -> ControllerConfig {
        ControllerConfig {
            budget: self.budget,
            seed: self.seed,
            variant,
            phase: self.phase,
            override_enabled: self.override_enabled,
        }
    }

    /// Backends for the configured mode.
    pub fn backends(&self) -> Result<BackendSuite, RunError> {
        match self.mode {
            Mode::Synthetic => Ok(synthetic_suite(SynthWorld::new(self.synthetic.clone()), self.mllm.clone())),
            Mode::Live => {
                let t = Duration::from_secs(self.live.timeout_secs);
                Ok(BackendSuite {
                    image: Arc::new(HttpImageModel::new(&self.live.image_endpoint, t)?),
                    perception: Arc::new(HttpPerceptionService::new(
                        &self.live.perception_endpoint,
                        t,
                        self.thresholds.detector_confidence,
                    )?),
                    chat: Arc::new(HttpChatTransport::new(&self.live.endpoint, self.live.api_key.clone(), t)?),
                    mllm: self.mllm.clone(),
                })
            }
        }
    }
}

/// One synthetic world serving every role.
pub fn synthetic_suite(world: SynthWorld, mllm: MllmConfig) -> BackendSuite {
    let world = Arc::new(world);
    BackendSuite { image: world.clone(), perception: world.clone(), chat: world, mllm }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub approved: bool,
    pub reasoning: String,
    /// Whether the reviewed program replaced the normalized one.
    pub applied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<NormalizationReport>,
}

/// Output of the compile stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compiled {
    pub program: VisualProgram,
    pub report: NormalizationReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review: Option<ReviewRecord>,
}

/// Parse, compile, normalize and (at most once) review.
pub fn compile_prompt(client: &MllmClient, prompt: &str) -> Result<Compiled, RunError> {
    let prompt = prompt.trim();
    if prompt.is_empty() {
        return Err(RunError::MalformedInput("empty prompt".into()));
    }
    let buckets = client.parse(prompt)?;
    let raw = compile(&buckets).map_err(|e| RunError::SchemaViolation(e.to_string()))?;
    let (program, report) = normalize(&raw);
    if !review_gate(&report) {
        return Ok(Compiled { program, report, review: None });
    }
    let review = match client.review(prompt, &report, &program) {
        Ok(reply) => match apply_review(&program, &reply.reviewed_program) {
            Ok((reviewed, second)) => {
                let record = ReviewRecord {
                    approved: reply.approved_candidate,
                    reasoning: reply.review_reasoning,
                    applied: true,
                    error: None,
                    report: Some(second),
                };
                return Ok(Compiled { program: reviewed, report, review: Some(record) });
            }
            Err(e) => ReviewRecord {
                approved: reply.approved_candidate,
                reasoning: reply.review_reasoning,
                applied: false,
                error: Some(e.to_string()),
                report: None,
            },
        },
        Err(e) => ReviewRecord { approved: false, reasoning: String::new(), applied: false, error: Some(e.to_string()), report: None },
    };
    Ok(Compiled { program, report, review: Some(review) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Accepted,
    Fallback,
    /// Compilation failed or no round produced an image.
    Failed,
}

/// Deterministic log of one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub index: usize,
    pub prompt: String,
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compiled: Option<Compiled>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrites: Option<RewritePool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<Refinement>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Every image-model execution and MLLM call of the prompt, compile stage included.
    pub cost: CostSnapshot,
}

impl RunLog {
    pub fn exec(&self) -> u64 {
        self.cost.exec
    }
}

/// Wall-clock timings, kept apart from the deterministic logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTrace {
    pub index: usize,
    pub total_us: u64,
    pub calls: Vec<(MllmRole, bool, u64)>,
}

/// Runs the whole pipeline for one prompt.
pub fn run_prompt(
    suite: &BackendSuite,
    config: &RunConfig,
    variant: Variant,
    index: usize,
    prompt: &str,
) -> (RunLog, LatencyTrace) {
    let started = Instant::now();
    let meter = Arc::new(CostMeter::new());
    let client = suite.client(meter.clone());
    let mut log = RunLog {
        index,
        prompt: prompt.to_string(),
        variant,
        compiled: None,
        rewrites: None,
        refinement: None,
        status: RunStatus::Failed,
        error: None,
        cost: CostSnapshot::default(),
    };
    if let Err(e) = refine_into(&mut log, suite, &client, config, variant) {
        log.error = Some(e.to_string());
    }
    log.cost = meter.snapshot();
    let trace = LatencyTrace {
        index,
        total_us: started.elapsed().as_micros() as u64,
        calls: meter.calls().into_iter().map(|c| (c.role, c.ok, c.latency_us)).collect(),
    };
    (log, trace)
}

fn refine_into(
    log: &mut RunLog,
    suite: &BackendSuite,
    client: &MllmClient,
    config: &RunConfig,
    variant: Variant,
) -> Result<(), RunError> {
    let compiled = compile_prompt(client, &log.prompt)?;
    let source = compiled.program.source_prompt.clone();
    let pool = if variant == Variant::NoRewrites || config.rewrites == 0 {
        RewritePool::source_only(&source)
    } else {
        match client.rewrite(&source, config.rewrites) {
            Ok(raw) => RewritePool::build(&source, &raw),
            Err(e) => {
                log.error = Some(format!("rewriter failed, using the source prompt: {e}"));
                RewritePool::source_only(&source)
            }
        }
    };
    log.rewrites = Some(pool.clone());
    log.compiled = Some(compiled);
    let program = &log.compiled.as_ref().expect("just set").program;
    let controller = config.controller(variant);
    let refiner = Refiner {
        program,
        image_model: suite.image.as_ref(),
        perception: suite.perception.as_ref(),
        client,
        verifier: &config.thresholds,
        config: &controller,
    };
    let r = refiner.run(pool)?;
    log.status = match r.outcome {
        Outcome::Accepted => RunStatus::Accepted,
        Outcome::Fallback => RunStatus::Fallback,
        Outcome::Failed => RunStatus::Failed,
    };
    log.refinement = Some(r);
    Ok(())
}

/// Means over a batch; kTok values are rounded to 0.1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub prompts: usize,
    pub exec: f64,
    pub calls: f64,
    pub ktok_in: f64,
    pub ktok_out: f64,
    pub image_inputs: f64,
    pub accept_rate: f64,
    pub fallback_rate: f64,
    pub failed: usize,
    pub overrides: usize,
}

fn round_to(x: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (x * f).round() / f
}

impl Metrics {
    /// Recomputes the aggregate from per-prompt logs alone.
    pub fn from_logs(logs: &[RunLog]) -> Self {
        let n = logs.len();
        let mean = |f: &dyn Fn(&RunLog) -> f64| if n == 0 { 0.0 } else { logs.iter().map(f).sum::<f64>() / n as f64 };
        let rate = |s: RunStatus| mean(&|l| f64::from(u8::from(l.status == s)));
        Self {
            prompts: n,
            exec: round_to(mean(&|l| l.cost.exec as f64), 4),
            calls: round_to(mean(&|l| l.cost.calls as f64), 4),
            ktok_in: round_to(mean(&|l| l.cost.tokens_in as f64) / 1000.0, 1),
            ktok_out: round_to(mean(&|l| l.cost.tokens_out as f64) / 1000.0, 1),
            image_inputs: round_to(mean(&|l| l.cost.image_inputs as f64), 4),
            accept_rate: round_to(rate(RunStatus::Accepted), 4),
            fallback_rate: round_to(rate(RunStatus::Fallback), 4),
            failed: logs.iter().filter(|l| l.status == RunStatus::Failed).count(),
            overrides: logs.iter().filter(|l| l.refinement.as_ref().is_some_and(|r| r.via_override)).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub logs: Vec<RunLog>,
    pub traces: Vec<LatencyTrace>,
    pub metrics: Metrics,
}

/// Runs every prompt on a worker pool and merges results by prompt index.
pub fn run_batch(suite: &BackendSuite, config: &RunConfig, variant: Variant, prompts: &[String]) -> Result<Batch, RunError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| RunError::Config(e.to_string()))?;
    let results: Vec<(RunLog, LatencyTrace)> = pool.install(|| {
        prompts.par_iter().enumerate().map(|(i, p)| run_prompt(suite, config, variant, i, p)).collect()
    });
    let (logs, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let metrics = Metrics::from_logs(&logs);
    Ok(Batch { logs, traces, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: Variant,
    pub metrics: Metrics,
}

/// The same prompts and seeds under each variant.
pub fn ablate(
    suite: &BackendSuite,
    config: &RunConfig,
    variants: &[Variant],
    prompts: &[String],
) -> Result<(Vec<Batch>, Vec<VariantMetrics>), RunError> {
    let mut batches = Vec::new();
    let mut table = Vec::new();
    for &v in variants {
        let b = run_batch(suite, config, v, prompts)?;
        table.push(VariantMetrics { variant: v, metrics: b.metrics.clone() });
        batches.push(b);
    }
    Ok((batches, table))
}

/// Plain-text table of variant metrics.
pub fn render_table(rows: &[VariantMetrics]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<14} {:>7} {:>8} {:>6} {:>7} {:>8} {:>6} {:>7} {:>8}",
        "variant", "prompts", "Exec", "Call", "kTokIn", "kTokOut", "Img", "Accept", "Fallback"
    )
    .expect("write to string");
    for r in rows {
        let m = &r.metrics;
        writeln!(
            s,
            "{:<14} {:>7} {:>8.2} {:>6.2} {:>7.1} {:>8.1} {:>6.2} {:>7.3} {:>8.3}",
            r.variant.name(),
            m.prompts,
            m.exec,
            m.calls,
            m.ktok_in,
            m.ktok_out,
            m.image_inputs,
            m.accept_rate,
            m.fallback_rate
        )
        .expect("write to string");
    }
    s
}

/// One prompt per non-blank line.
pub fn read_prompts(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect()
}

/// Distinct random prompts of the synthetic language that render under zero noise.
pub fn synthetic_prompts(n: usize, seed: u64, config: &SynthConfig) -> Vec<String> {
    let screen = SynthWorld::new(SynthConfig { noise: Default::default(), ..config.clone() });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = grammar::random_prompt(&mut rng);
        if !seen.contains(&p) && screen.feasible(&p) {
            seen.insert(p.clone());
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutput {
    pub program_id: String,
    pub gate_pass: bool,
    pub blocking: Vec<PredicateId>,
    pub states: StateVector,
}

/// Offline verification of a program document against an evidence document.
pub fn verify_files(program: &str, evidence: &str, config: &VerifierConfig, phase: Phase) -> Result<VerifyOutput, RunError> {
    let program = VisualProgram::from_json(program.as_bytes()).map_err(|e| RunError::SchemaViolation(e.to_string()))?;
    program.validate().map_err(|e| RunError::SchemaViolation(e.to_string()))?;
    let evidence = EvidenceFile::from_json(evidence).map_err(|e| RunError::SchemaViolation(e.to_string()))?;
    let cache = EvidenceCache::new(&evidence);
    let states = Verifier::new(&program, config).verify_program(&cache, &evidence, phase);
    let (gate_pass, blocking) = crate::controller::policy::program_gate(&states);
    Ok(VerifyOutput { program_id: program.program_id.to_string(), gate_pass, blocking, states })
}

/// Writes `runs.jsonl`, `metrics.json` and `latency.jsonl` under `dir`.
pub fn write_batch(dir: &Path, batch: &Batch) -> Result<(), RunError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("runs.jsonl"), jsonl(&batch.logs))?;
    std::fs::write(dir.join("metrics.json"), pretty(&batch.metrics))?;
    std::fs::write(dir.join("latency.jsonl"), jsonl(&batch.traces))?;
    Ok(())
}

pub fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for i in items {
        s.push_str(&serde_json::to_string(i).expect("log serializes"));
        s.push('\n');
    }
    s
}

pub fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("document serializes");
    s.push('\n');
    s
}

/// Reads run logs back from a `runs.jsonl` file.
pub fn read_logs(text: &str) -> Result<Vec<RunLog>, RunError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| RunError::SchemaViolation(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Table rows for a run directory or an ablation directory, recomputed from logs.
pub fn report(dir: &Path) -> Result<Vec<VariantMetrics>, RunError> {
    let mut dirs = vec![dir.to_path_buf()];
    if !dir.join("runs.jsonl").is_file() {
        dirs = Variant::ALL.iter().map(|v| dir.join(v.name())).filter(|d| d.join("runs.jsonl").is_file()).collect();
    }
    if dirs.is_empty() {
        return Err(RunError::MalformedInput(format!("no runs.jsonl under {}", dir.display())));
    }
    let mut rows = Vec::new();
    for d in dirs {
        let logs = read_logs(&std::fs::read_to_string(d.join("runs.jsonl"))?)?;
        let variant = logs.first().map_or(Variant::Full, |l| l.variant);
        rows.push(VariantMetrics { variant, metrics: Metrics::from_logs(&logs) });
    }
    Ok(rows)
}
