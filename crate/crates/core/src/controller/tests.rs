use std::sync::Arc;

use proptest::prelude::*;

use super::policy::*;
use super::*;
use crate::backends::scripted::ScriptedTransport;
use crate::backends::{ChatTransport, CostMeter, MllmConfig, MllmRole};
use crate::program::{AttributeName, Family, ObjectDecl, ObjectId, Predicate, PredicateKind, RelationName, SceneName};
use crate::synth::{program_for, NoiseConfig, SynthConfig, SynthWorld};

fn st(id: &str, family: Family, state: Status, score: f64) -> PredicateState {
    let ordinal = id.rsplit('-').next().unwrap().parse().unwrap();
    PredicateState {
        predicate_id: PredicateId::new(family, ordinal),
        family,
        state,
        score: Some(score),
        note: String::new(),
        counts: None,
        components: Vec::new(),
    }
}

fn counted(mut s: PredicateState, strong: u32, weak: u32) -> PredicateState {
    s.counts = Some((strong, weak));
    s
}

fn oid(s: &str) -> ObjectId {
    ObjectId::new(s)
}

fn program() -> VisualProgram {
    let p = |f: Family, i, k| Predicate::new(PredicateId::new(f, i), k);
    VisualProgram::new(
        "three cats, a red dog, the dog is left of the cat, no birds, in a forest",
        vec![ObjectDecl::new("cat", "cat"), ObjectDecl::new("dog", "dog"), ObjectDecl::new("bird", "bird")],
        vec![
            p(Family::CountAtLeast, 0, PredicateKind::CountAtLeast { subject: oid("dog"), count: 1 }),
            p(Family::CountExact, 0, PredicateKind::CountExact { subject: oid("cat"), count: 3 }),
            p(Family::Exclusion, 0, PredicateKind::Exclusion { subject: oid("bird") }),
            p(Family::Relation, 0, PredicateKind::Relation { subject: oid("dog"), relation: RelationName::Left, reference: oid("cat") }),
            p(
                Family::Attribute,
                0,
                PredicateKind::Attribute { subject: oid("dog"), attribute: AttributeName::Color, value: "red".into(), target: None },
            ),
            p(Family::GlobalScene, 0, PredicateKind::GlobalScene { attribute: SceneName::Scene, value: "forest".into() }),
        ],
    )
}

fn all_ok() -> Vec<PredicateState> {
    vec![
        counted(st("cal-0", Family::CountAtLeast, Status::Satisfied, 1.0), 1, 1),
        counted(st("cex-0", Family::CountExact, Status::Satisfied, 1.0), 3, 3),
        st("exc-0", Family::Exclusion, Status::Satisfied, 1.0),
        st("rel-0", Family::Relation, Status::Satisfied, 0.9),
        st("att-0", Family::Attribute, Status::Satisfied, 0.85),
        st("scn-0", Family::GlobalScene, Status::Satisfied, 0.85),
    ]
}

fn with(changes: Vec<PredicateState>) -> StateVector {
    let mut states = all_ok();
    for c in changes {
        let slot = states.iter_mut().find(|s| s.predicate_id == c.predicate_id).unwrap();
        *slot = c;
    }
    StateVector { states }
}

#[derive(Default)]
struct Ctx {
    removal: bool,
    snapshots: BTreeMap<PredicateId, Progress>,
}

impl RoutingContext for Ctx {
    fn removal_used(&self) -> bool {
        self.removal
    }

    fn last_snapshot(&self, id: &PredicateId) -> Option<&Progress> {
        self.snapshots.get(id)
    }
}

fn pid(s: &str) -> PredicateId {
    let p = program();
    p.predicates.iter().find(|q| q.predicate_id.as_str() == s).unwrap().predicate_id.clone()
}

#[test]
fn program_gate_collects_every_non_satisfied_predicate() {
    assert_eq!(program_gate(&with(vec![])), (true, vec![]));
    let s = with(vec![
        st("rel-0", Family::Relation, Status::Uncertain, 0.4),
        st("scn-0", Family::GlobalScene, Status::Violated, 0.1),
    ]);
    assert_eq!(program_gate(&s), (false, vec![pid("rel-0"), pid("scn-0")]));
}

#[test]
fn selector_severity_family_score_order() {
    let att = st("att-0", Family::Attribute, Status::Violated, 0.1);
    let cnt = st("cex-0", Family::CountExact, Status::Uncertain, 0.5);
    assert_eq!(select_target(&[&cnt, &att]).unwrap().predicate_id, att.predicate_id);

    let cnt = st("cex-0", Family::CountExact, Status::Violated, 0.9);
    let rel = st("rel-0", Family::Relation, Status::Violated, 0.0);
    assert_eq!(select_target(&[&rel, &cnt]).unwrap().predicate_id, cnt.predicate_id);

    let a = st("cex-0", Family::CountExact, Status::Violated, 0.2);
    let b = st("cal-0", Family::CountAtLeast, Status::Violated, 0.5);
    assert_eq!(select_target(&[&b, &a]).unwrap().predicate_id, a.predicate_id);
}

#[test]
fn routing_examples() {
    let prog = program();
    let ctx = Ctx::default();
    let under = counted(st("cex-0", Family::CountExact, Status::Violated, 0.67), 1, 2);
    let s = with(vec![under.clone()]);
    match choose_action(&prog, &s, &under, &ctx) {
        Decision::Edit { kind: EditKind::AddObject, instruction, .. } => {
            assert!(instruction.starts_with("Add 2 more cat so that the image contains exactly 3 cat."))
        }
        other => panic!("{other:?}"),
    }
    let unseen = counted(st("cex-0", Family::CountExact, Status::Violated, 0.0), 0, 0);
    assert!(matches!(choose_action(&prog, &with(vec![unseen.clone()]), &unseen, &ctx), Decision::Resample { .. }));

    let over3 = counted(st("cex-0", Family::CountExact, Status::Violated, 0.0), 6, 6);
    assert!(matches!(choose_action(&prog, &with(vec![over3.clone()]), &over3, &ctx), Decision::Resample { .. }));
    let over1 = counted(st("cex-0", Family::CountExact, Status::Violated, 0.67), 4, 4);
    assert!(matches!(
        choose_action(&prog, &with(vec![over1.clone()]), &over1, &ctx),
        Decision::Edit { kind: EditKind::RemoveObject, .. }
    ));
    let used = Ctx { removal: true, ..Ctx::default() };
    assert!(matches!(choose_action(&prog, &with(vec![over1.clone()]), &over1, &used), Decision::Resample { .. }));

    let rel = st("rel-0", Family::Relation, Status::Violated, 0.1);
    assert!(matches!(choose_action(&prog, &with(vec![rel.clone()]), &rel, &ctx), Decision::Resample { .. }));
}

#[test]
fn attribute_edit_needs_stable_counts_and_progress() {
    let prog = program();
    let att = st("att-0", Family::Attribute, Status::Violated, 0.15);
    let s = with(vec![att.clone()]);
    assert!(matches!(choose_action(&prog, &s, &att, &Ctx::default()), Decision::Edit { kind: EditKind::Attribute, .. }));

    let missing_dog = counted(st("cal-0", Family::CountAtLeast, Status::Violated, 0.0), 0, 0);
    let s2 = with(vec![att.clone(), missing_dog]);
    assert!(matches!(choose_action(&prog, &s2, &att, &Ctx::default()), Decision::Resample { .. }));

    // Second attempt with nothing improved since the first escalates.
    let mut ctx = Ctx::default();
    ctx.snapshots.insert(att.predicate_id.clone(), Progress::of(&prog, &s, &att.predicate_id));
    assert!(matches!(choose_action(&prog, &s, &att, &ctx), Decision::Resample { .. }));
    let better = st("att-0", Family::Attribute, Status::Uncertain, 0.5);
    let s3 = with(vec![better.clone()]);
    assert!(matches!(choose_action(&prog, &s3, &better, &ctx), Decision::Edit { .. }));
}

#[test]
fn scene_edit_waits_for_everything_else() {
    let prog = program();
    let scn = st("scn-0", Family::GlobalScene, Status::Violated, 0.15);
    let s = with(vec![scn.clone()]);
    assert!(matches!(choose_action(&prog, &s, &scn, &Ctx::default()), Decision::Edit { kind: EditKind::Scene, .. }));
    let s = with(vec![scn.clone(), st("rel-0", Family::Relation, Status::Uncertain, 0.5)]);
    assert!(matches!(choose_action(&prog, &s, &scn, &Ctx::default()), Decision::Resample { .. }));
}

#[test]
fn exclusion_removal_requires_satisfied_counts() {
    let prog = program();
    let exc = counted(st("exc-0", Family::Exclusion, Status::Violated, 0.1), 1, 1);
    assert!(matches!(
        choose_action(&prog, &with(vec![exc.clone()]), &exc, &Ctx::default()),
        Decision::Edit { kind: EditKind::RemoveObject, .. }
    ));
    let bad = counted(st("cex-0", Family::CountExact, Status::Violated, 0.6), 2, 2);
    assert!(matches!(choose_action(&prog, &with(vec![exc.clone(), bad]), &exc, &Ctx::default()), Decision::Resample { .. }));
}

#[test]
fn override_eligibility_examples() {
    let prog = program();
    let att = st("att-0", Family::Attribute, Status::Uncertain, 0.5);
    let now = with(vec![att.clone()]);
    assert!(override_eligible(&prog, &now, Some(&now)));
    assert!(!override_eligible(&prog, &now, Some(&with(vec![]))), "first round it blocks");
    assert!(!override_eligible(&prog, &now, None));
    let cnt = with(vec![att, counted(st("cex-0", Family::CountExact, Status::Uncertain, 0.6), 3, 4)]);
    assert!(!override_eligible(&prog, &cnt, Some(&cnt)));
    assert!(acceptance_gate(true, None));
    assert!(acceptance_gate(false, Some(true)));
    assert!(!acceptance_gate(false, Some(false)));
    assert!(!acceptance_gate(false, None));
}

#[test]
fn fallback_ranking_examples() {
    let three = with(vec![
        st("rel-0", Family::Relation, Status::Violated, 0.1),
        st("att-0", Family::Attribute, Status::Violated, 0.1),
        st("scn-0", Family::GlobalScene, Status::Violated, 0.1),
    ]);
    let two = with(vec![
        st("rel-0", Family::Relation, Status::Violated, 0.1),
        st("att-0", Family::Attribute, Status::Violated, 0.1),
    ]);
    let c = |round, states| Candidate { round, states };
    assert_eq!(rank_fallback(&[c(0, &three), c(1, &two)]), Some(1));

    let scene_only = with(vec![st("scn-0", Family::GlobalScene, Status::Violated, 0.1)]);
    let count_only = with(vec![counted(st("cex-0", Family::CountExact, Status::Violated, 0.9), 2, 2)]);
    assert_eq!(rank_fallback(&[c(0, &count_only), c(1, &scene_only)]), Some(1));
    assert_eq!(rank_fallback(&[c(3, &scene_only), c(5, &scene_only)]), Some(3));
    assert_eq!(rank_fallback(&[]), None);
}

proptest! {
    #[test]
    fn selector_is_order_independent(
        raw in prop::collection::vec((0usize..7, 0u8..2, 0u32..5), 1..10),
        seed in any::<u64>(),
    ) {
        let mut seen = std::collections::BTreeSet::new();
        let states: Vec<PredicateState> = raw
            .iter()
            .enumerate()
            .filter(|(i, (f, _, _))| seen.insert((*f, *i)))
            .map(|(i, (f, sev, score))| {
                let family = Family::ALL[*f];
                let state = if *sev == 0 { Status::Violated } else { Status::Uncertain };
                let mut s = st(&format!("x-{i}"), family, state, f64::from(*score) / 4.0);
                s.predicate_id = PredicateId::new(family, i);
                s
            })
            .collect();
        let refs: Vec<&PredicateState> = states.iter().collect();
        let mut shuffled = refs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(
            &select_target(&refs).unwrap().predicate_id,
            &select_target(&shuffled).unwrap().predicate_id
        );
    }
}

// ---------------------------------------------------------------------------
// Loop scenarios over the synthetic world
// ---------------------------------------------------------------------------

struct Setup {
    world: Arc<SynthWorld>,
    chat: Arc<dyn ChatTransport>,
}

impl Setup {
    fn new(noise: NoiseConfig) -> Self {
        let world = Arc::new(SynthWorld::new(SynthConfig { noise, ..SynthConfig::default() }));
        Self { chat: world.clone(), world }
    }

    fn run(&self, prompt: &str, config: &ControllerConfig) -> (Refinement, Arc<CostMeter>) {
        let program = program_for(prompt).unwrap();
        let meter = Arc::new(CostMeter::new());
        let client = MllmClient::new(self.chat.clone(), MllmConfig::default(), meter.clone());
        let verifier = VerifierConfig::default();
        let r = Refiner {
            program: &program,
            image_model: self.world.as_ref(),
            perception: self.world.as_ref(),
            client: &client,
            verifier: &verifier,
            config,
        };
        let rewrites: Vec<String> = crate::synth::grammar::STYLES.iter().map(|s| format!("{prompt}, {s}")).collect();
        let pool = match config.variant {
            Variant::NoRewrites => RewritePool::source_only(prompt),
            _ => RewritePool::build(prompt, &rewrites),
        };
        (r.run(pool).unwrap(), meter)
    }
}

#[test]
fn zero_noise_accepts_first_round() {
    let s = Setup::new(NoiseConfig::default());
    let (r, meter) = s.run("two dogs, a red ball, the ball is near the dog", &ControllerConfig::default());
    assert_eq!(r.outcome, Outcome::Accepted);
    assert_eq!(r.final_round, Some(0));
    assert_eq!(meter.snapshot().exec, 1);
    assert_eq!(r.history.rounds[0].action, ActionKind::InitialGenerate);
    assert_eq!(r.history.rounds[0].seed, 42);
}

#[test]
fn budget_one_forces_fallback() {
    let s = Setup::new(NoiseConfig { count_delta: 1.0, ..NoiseConfig::default() });
    let (r, meter) = s.run("three cats", &ControllerConfig { budget: 1, ..ControllerConfig::default() });
    assert_eq!(r.outcome, Outcome::Fallback);
    assert_eq!(r.final_round, Some(0));
    assert_eq!(meter.snapshot().exec, 1);
}

#[test]
fn count_error_is_edited_then_accepted() {
    let s = Setup::new(NoiseConfig { count_delta: 1.0, ..NoiseConfig::default() });
    let (r, _) = s.run("two cats", &ControllerConfig::default());
    let first = &r.history.rounds[1];
    assert_eq!(first.action, ActionKind::Edit);
    assert_eq!(first.seed, 42 + 1000 + 1);
    assert!(matches!(first.edit, Some(EditKind::AddObject | EditKind::RemoveObject)));
    assert_eq!(r.outcome, Outcome::Accepted);
    assert!(r.final_round.unwrap() <= 2);
}

#[test]
fn auditor_approval_overrides_persistent_attribute() {
    let mut s = Setup::new(NoiseConfig { attribute_flip: 1.0, edit_success: 0.0, ..NoiseConfig::default() });
    s.chat = Arc::new(ScriptedTransport::new().always(
        MllmRole::Auditor,
        r#"{"all_checks_passed": true, "short_reason": "looks right", "check_reasoning": []}"#,
    ));
    let config = ControllerConfig { variant: Variant::NoResample, ..ControllerConfig::default() };
    let (r, meter) = s.run("a striped cat", &config);
    assert_eq!(r.outcome, Outcome::Accepted);
    assert!(r.via_override);
    let last = r.history.rounds.last().unwrap();
    assert!(last.override_check.as_ref().unwrap().approved);
    assert_eq!(last.round, 1, "eligible only once the failure persists");
    assert_eq!(meter.calls_for(MllmRole::Auditor), 1);
}

#[test]
fn removal_is_used_once_per_rewrite() {
    let s = Setup::new(NoiseConfig { count_delta: 1.0, edit_success: 0.0, ..NoiseConfig::default() });
    for prompt in ["two cats", "three cups, a table", "two dogs, no birds"] {
        for variant in Variant::ALL {
            let (r, _) = s.run(prompt, &ControllerConfig { variant, ..ControllerConfig::default() });
            let mut removals = BTreeMap::new();
            for rec in &r.history.rounds {
                if rec.edit == Some(EditKind::RemoveObject) {
                    *removals.entry(rec.rewrite).or_insert(0) += 1;
                }
            }
            assert!(removals.values().all(|&n| n <= 1), "{prompt} {variant:?}: {removals:?}");
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let prompt = "two red dogs, a table, the dog is left of the table, in a park";
    let a = Setup::new(NoiseConfig::benchmark()).run(prompt, &ControllerConfig::default()).0;
    let b = Setup::new(NoiseConfig::benchmark()).run(prompt, &ControllerConfig::default()).0;
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

struct Broken;

impl ImageModel for Broken {
    fn generate(&self, _: &str, _: u64) -> Result<ImageRef, BackendError> {
        Err(BackendError::Timeout)
    }

    fn edit(&self, _: &ImageRef, _: &str, _: u64) -> Result<ImageRef, BackendError> {
        Err(BackendError::Timeout)
    }
}

#[test]
fn generation_failures_retry_then_resample_within_budget() {
    let world = SynthWorld::new(SynthConfig::default());
    let program = program_for("a dog").unwrap();
    let meter = Arc::new(CostMeter::new());
    let client = MllmClient::new(Arc::new(ScriptedTransport::new()), MllmConfig::default(), meter.clone());
    let config = ControllerConfig { budget: 5, ..ControllerConfig::default() };
    let verifier = VerifierConfig::default();
    let r = Refiner { program: &program, image_model: &Broken, perception: &world, client: &client, verifier: &verifier, config: &config };
    let pool = RewritePool::build("a dog", &["a dog, wide shot".into(), "a dog, high detail".into()]);
    let out = r.run(pool).unwrap();
    assert_eq!(out.outcome, Outcome::Failed);
    assert_eq!(meter.snapshot().exec, 5);
    let rounds = &out.history.rounds;
    assert_eq!(rounds[1].seed, rounds[0].seed, "same call repeated once");
    assert_eq!(rounds[1].rewrite, rounds[0].rewrite);
    assert_eq!(rounds[2].action, ActionKind::Resample);
    assert_ne!(rounds[2].rewrite, rounds[0].rewrite);
    assert!(matches!(
        Refiner { config: &ControllerConfig { budget: 0, ..config.clone() }, ..r }.run(RewritePool::source_only("a dog")),
        Err(ControlError::ZeroBudget)
    ));
}
