//! Gates, target selection, edit/resample routing and fallback ranking.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::instructions::{add_instruction, attribute_instruction, remove_instruction, scene_instruction, EditKind};
use crate::program::{AttributeName, Family, PredicateId, PredicateKind, RelationName, VisualProgram};
use crate::verify::{PredicateState, StateVector};

/// Program gate: passes iff every predicate is satisfied; otherwise returns the
/// blocking predicate ids in program order.
pub fn program_gate(states: &StateVector) -> (bool, Vec<PredicateId>) {
    let blocking: Vec<PredicateId> = states.blocking().into_iter().map(|s| s.predicate_id.clone()).collect();
    (blocking.is_empty(), blocking)
}

/// Predicates whose failures the auditor may overrule.
pub fn override_family_ok(program: &VisualProgram, id: &PredicateId) -> bool {
    let Some(p) = program.predicate(id) else { return false };
    match &p.kind {
        PredicateKind::Attribute { attribute, .. } => matches!(
            attribute,
            AttributeName::Color
                | AttributeName::Material
                | AttributeName::Shape
                | AttributeName::Pattern
                | AttributeName::Action
                | AttributeName::Pose
                | AttributeName::State
                | AttributeName::Size
        ),
        PredicateKind::Relation { relation, .. } => {
            matches!(relation, RelationName::In | RelationName::Inside | RelationName::On)
        }
        PredicateKind::GlobalScene { .. } => true,
        _ => false,
    }
}

/// True iff every blocking predicate is override-eligible and was also
/// non-satisfied in the previous verified round.
pub fn override_eligible(program: &VisualProgram, states: &StateVector, previous: Option<&StateVector>) -> bool {
    let (pass, blocking) = program_gate(states);
    let Some(previous) = previous else { return false };
    !pass
        && blocking.iter().all(|id| {
            override_family_ok(program, id) && previous.status(id).is_some_and(|s| !s.is_satisfied())
        })
}

/// Acceptance gate: program gate or an auditor approval of every remaining check.
pub fn acceptance_gate(program_pass: bool, auditor_approved: Option<bool>) -> bool {
    program_pass || auditor_approved == Some(true)
}

fn selector_key(a: &PredicateState) -> (u8, u8, f64) {
    // Violated (rank 0) sorts before uncertain (rank 1).
    (a.state.rank(), a.family.priority_rank(), a.ranking_score())
}

fn selector_cmp(a: &PredicateState, b: &PredicateState) -> Ordering {
    let (ka, kb) = (selector_key(a), selector_key(b));
    ka.0.cmp(&kb.0)
        .then(ka.1.cmp(&kb.1))
        .then(ka.2.total_cmp(&kb.2))
        .then_with(|| a.predicate_id.cmp(&b.predicate_id))
}

/// Next predicate to repair: severity, family priority, lower score, then id.
pub fn select_target<'s>(blocking: &[&'s PredicateState]) -> Option<&'s PredicateState> {
    blocking.iter().copied().min_by(|a, b| selector_cmp(a, b))
}

/// Blocking predicates in selector order.
pub fn selector_order<'s>(states: &'s StateVector) -> Vec<&'s PredicateState> {
    let mut v = states.blocking();
    v.sort_by(|a, b| selector_cmp(a, b));
    v
}

/// Quantities compared by the improvement test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub target_rank: u8,
    pub satisfied: usize,
    pub mean_score: f64,
    /// Missing instances for count targets, surplus for exclusions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<u32>,
}

impl Progress {
    pub fn of(program: &VisualProgram, states: &StateVector, target: &PredicateId) -> Self {
        let s = states.get(target);
        let gap = program.predicate(target).and_then(|p| {
            let strong = s.and_then(|s| s.counts).map(|c| c.0)?;
            match &p.kind {
                PredicateKind::CountExact { count, .. } => Some(strong.abs_diff(*count)),
                PredicateKind::CountAtLeast { count, .. } => Some(count.saturating_sub(strong)),
                PredicateKind::Exclusion { .. } => Some(strong),
                _ => None,
            }
        });
        Self {
            target_rank: s.map_or(0, |s| s.state.rank()),
            satisfied: states.satisfied_count(),
            mean_score: states.mean_score(),
            gap,
        }
    }

    /// Strict improvement in any one quantity.
    pub fn improved_since(&self, before: &Progress) -> bool {
        self.target_rank > before.target_rank
            || self.satisfied > before.satisfied
            || self.mean_score > before.mean_score
            || matches!((self.gap, before.gap), (Some(now), Some(then)) if now < then)
    }
}

/// What the controller does next.
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Edit { kind: EditKind, target: PredicateId, instruction: String },
    Resample { target: Option<PredicateId> },
    /// No admissible action remains (edit-only variant).
    Stop,
}

/// History facts the routing rules depend on.
pub trait RoutingContext {
    /// Whether a removal edit was already used on the current rewrite.
    fn removal_used(&self) -> bool;
    /// Snapshot taken the last time `id` was targeted, if ever.
    fn last_snapshot(&self, id: &PredicateId) -> Option<&Progress>;
}

fn counts_satisfied(program: &VisualProgram, states: &StateVector, subject: Option<&crate::program::ObjectId>) -> bool {
    program
        .predicates
        .iter()
        .filter(|p| p.family().is_count())
        .filter(|p| subject.is_none_or(|s| p.kind.subject() == Some(s)))
        .all(|p| states.status(&p.predicate_id).is_some_and(|s| s.is_satisfied()))
}

fn retry_allowed(program: &VisualProgram, states: &StateVector, id: &PredicateId, ctx: &dyn RoutingContext) -> bool {
    ctx.last_snapshot(id).is_none_or(|before| Progress::of(program, states, id).improved_since(before))
}

/// The edit for `target` if its family has a template, ignoring routing preconditions.
pub fn edit_for(program: &VisualProgram, target: &PredicateState, removal_used: bool) -> Option<(EditKind, String)> {
    let p = program.predicate(&target.predicate_id)?;
    let (strong, _) = target.counts.unwrap_or((0, 0));
    match &p.kind {
        PredicateKind::CountAtLeast { subject, count } | PredicateKind::CountExact { subject, count } => {
            let exact = p.family() == Family::CountExact;
            if strong < *count {
                Some((EditKind::AddObject, add_instruction(program, subject, count - strong, exact, *count)))
            } else if strong > *count && !removal_used {
                Some((EditKind::RemoveObject, remove_instruction(program, subject, exact, *count)))
            } else {
                None
            }
        }
        PredicateKind::Exclusion { subject } if !removal_used => {
            Some((EditKind::RemoveObject, remove_instruction(program, subject, true, 0)))
        }
        PredicateKind::Attribute { .. } => attribute_instruction(program, p).map(|i| (EditKind::Attribute, i)),
        PredicateKind::GlobalScene { .. } => scene_instruction(p).map(|i| (EditKind::Scene, i)),
        _ => None,
    }
}

/// Dependency-aware routing for the selected target.
pub fn choose_action(
    program: &VisualProgram,
    states: &StateVector,
    target: &PredicateState,
    ctx: &dyn RoutingContext,
) -> Decision {
    let id = &target.predicate_id;
    let resample = Decision::Resample { target: Some(id.clone()) };
    let Some(p) = program.predicate(id) else { return resample };
    let edit = |kind: EditKind, instruction: Option<String>| match instruction {
        Some(instruction) => Decision::Edit { kind, target: id.clone(), instruction },
        None => Decision::Resample { target: Some(id.clone()) },
    };
    match &p.kind {
        PredicateKind::CountAtLeast { subject, count } | PredicateKind::CountExact { subject, count } => {
            let exact = p.family() == Family::CountExact;
            let (strong, weak) = target.counts.unwrap_or((0, 0));
            if strong < *count {
                if weak >= 1 && retry_allowed(program, states, id, ctx) {
                    edit(EditKind::AddObject, Some(add_instruction(program, subject, count - strong, exact, *count)))
                } else {
                    resample
                }
            } else if exact && strong - count == 1 && !ctx.removal_used() {
                edit(EditKind::RemoveObject, Some(remove_instruction(program, subject, exact, *count)))
            } else {
                resample
            }
        }
        PredicateKind::Relation { .. } | PredicateKind::VisibleText { .. } => resample,
        PredicateKind::Attribute { subject, .. } => {
            if counts_satisfied(program, states, Some(subject)) && retry_allowed(program, states, id, ctx) {
                edit(EditKind::Attribute, attribute_instruction(program, p))
            } else {
                resample
            }
        }
        PredicateKind::Exclusion { subject } => {
            if counts_satisfied(program, states, None) && !ctx.removal_used() {
                edit(EditKind::RemoveObject, Some(remove_instruction(program, subject, true, 0)))
            } else {
                resample
            }
        }
        PredicateKind::GlobalScene { .. } => {
            let only_scene = states.blocking().iter().all(|s| s.family == Family::GlobalScene);
            if only_scene && retry_allowed(program, states, id, ctx) {
                edit(EditKind::Scene, scene_instruction(p))
            } else {
                resample
            }
        }
    }
}

/// A verified round as seen by the fallback ranking.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub round: u32,
    pub states: &'a StateVector,
}

/// Remaining-blocking badness: one entry per blocking predicate, higher for
/// higher-priority families, sorted descending.
fn badness(states: &StateVector) -> Vec<u8> {
    let mut v: Vec<u8> = states.blocking().iter().map(|s| 5 - s.family.priority_rank()).collect();
    v.sort_unstable_by(|a, b| b.cmp(a));
    v
}

/// Best fallback: coverage, then remaining priority, then mean score, then earlier round.
pub fn rank_fallback(candidates: &[Candidate]) -> Option<u32> {
    candidates
        .iter()
        .min_by(|a, b| {
            b.states
                .satisfied_count()
                .cmp(&a.states.satisfied_count())
                .then_with(|| badness(a.states).cmp(&badness(b.states)))
                .then_with(|| b.states.mean_score().total_cmp(&a.states.mean_score()))
                .then(a.round.cmp(&b.round))
        })
        .map(|c| c.round)
}
