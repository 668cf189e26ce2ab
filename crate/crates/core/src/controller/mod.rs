//! Predicate-driven refinement loop.

pub mod instructions;
pub mod policy;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, CandidateJudge, CostSnapshot, ImageModel, ImageRef, MllmClient, PerceptionService};
use crate::evidence::EvidenceCache;
use crate::program::{PredicateId, VisualProgram};
use crate::relation::Status;
use crate::rewrites::RewritePool;
use crate::verify::{Phase, PredicateState, StateVector, Verifier, VerifierConfig};

pub use instructions::EditKind;
pub use policy::{Decision, Progress};

pub const DEFAULT_BUDGET: u32 = 32;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    InitialGenerate,
    Edit,
    Resample,
}

impl ActionKind {
    /// Offset added to the round seed.
    pub fn code(self) -> u64 {
        match self {
            ActionKind::InitialGenerate => 0,
            ActionKind::Edit => 1,
            ActionKind::Resample => 2,
        }
    }
}

/// Controller variants compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Uniform target and uniform edit/resample choice.
    RandomPolicy,
    /// Edits only after the first generation.
    NoResample,
    /// Resamples only.
    NoEdit,
    /// Full policy on the source prompt alone.
    NoRewrites,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Full, Variant::RandomPolicy, Variant::NoResample, Variant::NoEdit, Variant::NoRewrites];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::RandomPolicy => "random_policy",
            Variant::NoResample => "no_resample",
            Variant::NoEdit => "no_edit",
            Variant::NoRewrites => "no_rewrites",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Maximum image-model executions per prompt.
    pub budget: u32,
    pub seed: u64,
    pub variant: Variant,
    pub phase: Phase,
    pub override_enabled: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { budget: DEFAULT_BUDGET, seed: DEFAULT_SEED, variant: Variant::Full, phase: Phase::Late, override_enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideRecord {
    pub checks: Vec<String>,
    pub approved: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub action: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit: Option<EditKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PredicateId>,
    /// Rewrite the candidate descends from.
    pub rewrite: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// `None` when the image-model call failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<StateVector>,
    pub satisfied: usize,
    pub mean_score: f64,
    pub cost: CostSnapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub override_check: Option<OverrideRecord>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub round: u32,
    pub state: Status,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetLog {
    pub times: u32,
    pub last_action: ActionKind,
    /// Progress when the predicate was last chosen as target.
    pub snapshot: Progress,
    pub trajectory: Vec<TrajectoryPoint>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewriteLog {
    pub removal_used: bool,
    pub edits: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rounds: Vec<RoundRecord>,
    pub targets: BTreeMap<PredicateId, TargetLog>,
    pub rewrites: BTreeMap<usize, RewriteLog>,
}

impl History {
    /// Verified rounds as fallback candidates.
    pub fn candidates(&self) -> Vec<policy::Candidate<'_>> {
        self.rounds
            .iter()
            .filter_map(|r| r.states.as_ref().map(|states| policy::Candidate { round: r.round, states }))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    /// Budget exhausted; best verified round returned.
    Fallback,
    /// No round produced an image.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_round: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    pub via_override: bool,
    pub history: History,
}

impl Refinement {
    pub fn accepted(&self) -> bool {
        self.outcome == Outcome::Accepted
    }

    pub fn final_states(&self) -> Option<&StateVector> {
        let r = self.final_round?;
        self.history.rounds.iter().find(|x| x.round == r)?.states.as_ref()
    }

    pub fn executions(&self) -> u64 {
        self.history.rounds.iter().map(|r| r.cost.exec).sum()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("rewrite pool is empty")]
    NoRewrites,
}

#[derive(Debug, Clone)]
enum Op {
    Generate,
    Edit { kind: EditKind, instruction: String },
}

#[derive(Debug, Clone)]
struct Pending {
    action: ActionKind,
    op: Op,
    target: Option<PredicateId>,
    /// Seed of a failed generation being repeated.
    retry_seed: Option<u64>,
}

struct Context<'h> {
    history: &'h History,
    rewrite: usize,
}

impl policy::RoutingContext for Context<'_> {
    fn removal_used(&self) -> bool {
        self.history.rewrites.get(&self.rewrite).is_some_and(|r| r.removal_used)
    }

    fn last_snapshot(&self, id: &PredicateId) -> Option<&Progress> {
        self.history.targets.get(id).map(|t| &t.snapshot)
    }
}

/// One prompt's refinement: backends, verifier settings and policy.
pub struct Refiner<'a> {
    pub program: &'a VisualProgram,
    pub image_model: &'a dyn ImageModel,
    pub perception: &'a dyn PerceptionService,
    pub client: &'a MllmClient,
    pub verifier: &'a VerifierConfig,
    pub config: &'a ControllerConfig,
}

impl Refiner<'_> {
    /// Predicate states for one image. Perception failures leave every predicate uncertain.
    pub fn verify(&self, image: &ImageRef) -> StateVector {
        match self.perception.open(image) {
            Ok(p) => {
                let cache = EvidenceCache::new(p.as_ref());
                let judge = CandidateJudge { client: self.client, image };
                Verifier::new(self.program, self.verifier).verify_program(&cache, &judge, self.config.phase)
            }
            Err(e) => StateVector {
                states: self
                    .program
                    .predicates
                    .iter()
                    .map(|p| PredicateState {
                        predicate_id: p.predicate_id.clone(),
                        family: p.family(),
                        state: Status::Uncertain,
                        score: None,
                        note: format!("perception_unavailable: {e}"),
                        counts: None,
                        components: Vec::new(),
                    })
                    .collect(),
            },
        }
    }

    fn decide(&self, states: &StateVector, ctx: &Context, rng: &mut ChaCha8Rng) -> Decision {
        use policy::RoutingContext;
        let order = policy::selector_order(states);
        let Some(first) = order.first() else { return Decision::Stop };
        match self.config.variant {
            Variant::Full | Variant::NoRewrites => policy::choose_action(self.program, states, first, ctx),
            Variant::NoEdit => Decision::Resample { target: Some(first.predicate_id.clone()) },
            Variant::NoResample => order
                .iter()
                .find_map(|t| {
                    policy::edit_for(self.program, t, ctx.removal_used()).map(|(kind, instruction)| Decision::Edit {
                        kind,
                        target: t.predicate_id.clone(),
                        instruction,
                    })
                })
                .unwrap_or(Decision::Stop),
            Variant::RandomPolicy => {
                let t = order.choose(rng).expect("non-empty");
                let edit = rng.gen_bool(0.5).then(|| policy::edit_for(self.program, t, ctx.removal_used())).flatten();
                match edit {
                    Some((kind, instruction)) => Decision::Edit { kind, target: t.predicate_id.clone(), instruction },
                    None => Decision::Resample { target: Some(t.predicate_id.clone()) },
                }
            }
        }
    }

    fn audit(&self, image: &ImageRef, blocking: &[PredicateId]) -> OverrideRecord {
        let checks: Vec<String> = blocking
            .iter()
            .filter_map(|id| self.program.predicate(id))
            .map(|p| instructions::audit_check(self.program, p))
            .collect();
        match self.client.audit(image, &self.program.source_prompt, &checks) {
            Ok(r) => OverrideRecord { checks, approved: r.all_checks_passed, reason: r.short_reason },
            Err(e) => OverrideRecord { checks, approved: false, reason: format!("auditor unavailable: {e}") },
        }
    }

    /// Runs the loop until acceptance or budget exhaustion.
    pub fn run(&self, mut pool: RewritePool) -> Result<Refinement, ControlError> {
        let budget = u64::from(self.config.budget);
        if budget == 0 {
            return Err(ControlError::ZeroBudget);
        }
        if pool.is_empty() {
            return Err(ControlError::NoRewrites);
        }
        let meter = self.client.meter().clone();
        let base = self.config.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(base ^ self.program.program_id.0);
        let mut history = History::default();
        let mut rewrite = pool.select_initial(self.program.program_id, base);
        let mut pending = Pending { action: ActionKind::InitialGenerate, op: Op::Generate, target: None, retry_seed: None };
        let mut current: Option<ImageRef> = None;
        let mut previous: Option<StateVector> = None;
        let mut accepted: Option<(u32, bool)> = None;

        for t in 0..budget {
            let round = t as u32;
            let start = meter.snapshot();
            let seed = pending
                .retry_seed
                .unwrap_or_else(|| base.wrapping_add(1000 * t).wrapping_add(pending.action.code()));
            meter.record_exec();
            let result = match (&pending.op, &current) {
                (Op::Generate, _) => self.image_model.generate(&pool.prompt(rewrite), seed),
                (Op::Edit { instruction, .. }, Some(img)) => self.image_model.edit(img, instruction, seed),
                (Op::Edit { .. }, None) => Err(BackendError::Missing("no image to edit".into())),
            };
            let (edit, instruction) = match &pending.op {
                Op::Edit { kind, instruction } => (Some(*kind), Some(instruction.clone())),
                Op::Generate => (None, None),
            };
            if let Some(kind) = edit {
                let log = history.rewrites.entry(rewrite).or_default();
                log.edits += 1;
                log.removal_used |= kind == EditKind::RemoveObject;
            }
            if let Some(id) = &pending.target {
                if let Some(log) = history.targets.get_mut(id) {
                    log.times += 1;
                    log.last_action = pending.action;
                }
            }
            let mut rec = RoundRecord {
                round,
                action: pending.action,
                edit,
                target: pending.target.clone(),
                rewrite,
                seed,
                instruction,
                image: None,
                error: None,
                states: None,
                satisfied: 0,
                mean_score: 0.0,
                cost: CostSnapshot::default(),
                override_check: None,
                accepted: false,
            };

            let image = match result {
                Ok(image) => image,
                Err(e) => {
                    rec.error = Some(e.to_string());
                    rec.cost = meter.snapshot() - start;
                    let retried = pending.retry_seed.is_some();
                    pending = match pending.op {
                        Op::Generate if !retried => Pending { retry_seed: Some(seed), ..pending },
                        _ => {
                            rewrite = pool.next_rewrite();
                            Pending { action: ActionKind::Resample, op: Op::Generate, target: pending.target, retry_seed: None }
                        }
                    };
                    history.rounds.push(rec);
                    continue;
                }
            };

            let states = self.verify(&image);
            current = Some(image.clone());
            if let Some(id) = &rec.target {
                if let (Some(log), Some(s)) = (history.targets.get_mut(id), states.get(id)) {
                    log.trajectory.push(TrajectoryPoint { round, state: s.state, score: s.score });
                }
            }
            let (pass, blocking) = policy::program_gate(&states);
            if !pass
                && self.config.override_enabled
                && policy::override_eligible(self.program, &states, previous.as_ref())
            {
                rec.override_check = Some(self.audit(&image, &blocking));
            }
            let ok = policy::acceptance_gate(pass, rec.override_check.as_ref().map(|o| o.approved));
            rec.image = Some(image);
            rec.satisfied = states.satisfied_count();
            rec.mean_score = states.mean_score();
            rec.accepted = ok;

            let mut stop = ok;
            if !ok && t + 1 < budget {
                let ctx = Context { history: &history, rewrite };
                let decision = self.decide(&states, &ctx, &mut rng);
                let target = match &decision {
                    Decision::Edit { target, .. } => Some(target.clone()),
                    Decision::Resample { target } => target.clone(),
                    Decision::Stop => None,
                };
                if let Some(id) = &target {
                    let snapshot = Progress::of(self.program, &states, id);
                    let log = history.targets.entry(id.clone()).or_insert_with(|| TargetLog {
                        times: 0,
                        last_action: ActionKind::Resample,
                        snapshot: snapshot.clone(),
                        trajectory: Vec::new(),
                    });
                    log.snapshot = snapshot;
                }
                pending = match decision {
                    Decision::Edit { kind, target, instruction } => {
                        Pending { action: ActionKind::Edit, op: Op::Edit { kind, instruction }, target: Some(target), retry_seed: None }
                    }
                    Decision::Resample { target } => {
                        rewrite = pool.next_rewrite();
                        Pending { action: ActionKind::Resample, op: Op::Generate, target, retry_seed: None }
                    }
                    Decision::Stop => {
                        stop = true;
                        pending
                    }
                };
            }
            rec.states = Some(states.clone());
            rec.cost = meter.snapshot() - start;
            history.rounds.push(rec);
            previous = Some(states);
            if ok {
                let via_override = !pass;
                accepted = Some((round, via_override));
            }
            if stop {
                break;
            }
        }

        let (outcome, final_round, via_override) = match accepted {
            Some((r, o)) => (Outcome::Accepted, Some(r), o),
            None => match policy::rank_fallback(&history.candidates()) {
                Some(r) => (Outcome::Fallback, Some(r), false),
                None => (Outcome::Failed, None, false),
            },
        };
        let image = final_round.and_then(|r| history.rounds.iter().find(|x| x.round == r)?.image.clone());
        Ok(Refinement { outcome, final_round, image, via_override, history })
    }
}

#[cfg(test)]
mod tests;
