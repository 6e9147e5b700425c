use super::*;
use crate::asm::{emit_program, parse_program};
use crate::corpus;
use crate::ident::identify_control_data;
use crate::machine::{TrapKind, DEFAULT_STEP_BUDGET};
use crate::slice::{build_dsg, SliceConfig};

struct Built {
    original: Program,
    protected: Program,
    plan: RelocationPlan,
    report: RewriteReport,
}

fn protect(src: &str, suite: &[TestInput], mode: AnnounceMode) -> Built {
    let original = parse_program(src).unwrap();
    let ident = identify_control_data(&original);
    let slice = build_dsg(&original, &SliceConfig::default(), &ident, suite).unwrap();
    let layout = MemoryLayout::default();
    let plan = plan_relocation(&original, &slice.graph, &ident, &layout).unwrap();
    let (protected, report) = instrument(&original, &plan, mode).unwrap();
    Built {
        original,
        protected,
        plan,
        report,
    }
}

fn strcpy_suite() -> Vec<TestInput> {
    corpus::suite("strcpy.s").unwrap().expand()
}

fn run(p: &Program, input: &TestInput) -> RunEnd {
    Machine::new(
        p,
        &MemoryLayout::default(),
        CostModel::default(),
        AnnounceMode::SimulatedSyscall,
        input,
    )
    .unwrap()
    .run(DEFAULT_STEP_BUDGET)
    .unwrap()
}

fn count(p: &Program, m: Mnemonic) -> usize {
    p.instructions().filter(|(_, i)| i.mnemonic == m).count()
}

#[test]
fn strcpy_prologue_and_epilogue_are_split() {
    let b = protect(corpus::STRCPY, &strcpy_suite(), AnnounceMode::SimulatedSyscall);
    let roles: Vec<_> = b.plan.split_ops.iter().map(|o| (o.loc.to_string(), o.role)).collect();
    assert_eq!(
        roles,
        [
            ("strcpy+0x0".to_string(), SplitRole::ShadowStore),
            ("strcpy+0x1c".to_string(), SplitRole::ShadowLoad),
        ]
    );
    assert_eq!(b.report.announce_pairs, 1);
    assert_eq!(count(&b.protected, Mnemonic::AnnounceBegin), 1);
    assert_eq!(count(&b.protected, Mnemonic::AnnounceEnd), 1);
    assert!(b.protected.has_proconda_section());
    let text = emit_program(&b.protected);
    assert_eq!(parse_program(&text).unwrap(), b.protected);
    assert!(text.contains("STR lr, [r12, #-4]"), "{text}");
}

#[test]
fn strcpy_behaviour_is_preserved() {
    let b = protect(corpus::STRCPY, &strcpy_suite(), AnnounceMode::SimulatedSyscall);
    let mut suite = strcpy_suite();
    suite.push(TestInput::new("long").with_buffer("src", b"abcdefg".to_vec()));
    verify_benign_equivalence(
        &b.original,
        &b.protected,
        &MemoryLayout::default(),
        CostModel::default(),
        &suite,
        DEFAULT_STEP_BUDGET,
    )
    .unwrap();
}

#[test]
fn overwriting_the_old_return_slot_no_longer_redirects() {
    let b = protect(corpus::STRCPY, &strcpy_suite(), AnnounceMode::SimulatedSyscall);
    // 8 bytes of dst, 4 of saved r3, then the word that used to hold lr
    let payload = TestInput::new("x").with_buffer("src", vec![b'A'; 15]);
    assert!(matches!(run(&b.original, &payload), RunEnd::Trap(t) if t.kind == TrapKind::InvalidFetch));
    assert_eq!(run(&b.protected, &payload), RunEnd::Exit(0x4141_4141));
}

#[test]
fn long_overflow_faults_at_the_copy_store() {
    let b = protect(corpus::STRCPY, &strcpy_suite(), AnnounceMode::SimulatedSyscall);
    let payload = TestInput::new("x").with_buffer("src", vec![b'A'; 0x70]);
    let RunEnd::Trap(t) = run(&b.protected, &payload) else {
        panic!("expected a fault")
    };
    assert_eq!(t.kind, TrapKind::ProtectedWrite);
    assert_eq!(t.address, 0x8000);
    assert_eq!(
        b.report.original_location(&t.wio).unwrap().to_string(),
        "strcpy+0xc"
    );
}

#[test]
fn unlisted_prologue_is_left_unannounced_and_faults() {
    let p = parse_program(corpus::STRCPY).unwrap();
    let ident = identify_control_data(&p);
    let plan = plan_relocation(&p, &DataSourceGraph::default(), &ident, &MemoryLayout::default()).unwrap();
    assert_eq!(plan.announce_pairs(), 0);
    let (q, report) = instrument(&p, &plan, AnnounceMode::SimulatedSyscall).unwrap();
    let RunEnd::Trap(t) = run(&q, &TestInput::new("e").with_buffer("src", b"".to_vec())) else {
        panic!("expected a fault")
    };
    assert_eq!(t.kind, TrapKind::ProtectedWrite);
    assert_eq!(report.original_location(&t.wio).unwrap().to_string(), "strcpy+0x0");
}

#[test]
fn empty_plan_is_the_identity() {
    let src = "main:\n MOV r0, #3\n ADD r0, r0, #4\n SVC #0\n";
    let b = protect(src, &[TestInput::new("t")], AnnounceMode::SimulatedSyscall);
    assert!(b.plan.is_empty());
    assert_eq!(b.protected, b.original);
    assert_eq!(b.report.inserted_instructions, 0);
    assert_eq!(b.report.footprint_delta, 0);
}

#[test]
fn nop_baseline_differs_only_in_announce_cost() {
    let s = protect(corpus::STRCPY, &strcpy_suite(), AnnounceMode::SimulatedSyscall);
    let n = protect(corpus::STRCPY, &strcpy_suite(), AnnounceMode::NopBaseline);
    assert_eq!(s.protected, n.protected);
    assert_eq!(n.report.mode, AnnounceMode::NopBaseline);
    let input = &strcpy_suite()[2];
    let cycles = |mode| {
        let mut m = Machine::new(&n.protected, &MemoryLayout::default(), CostModel::default(), mode, input).unwrap();
        assert!(matches!(m.run(DEFAULT_STEP_BUDGET).unwrap(), RunEnd::Exit(_)));
        m.state().cycles
    };
    assert_eq!(
        cycles(AnnounceMode::SimulatedSyscall) - cycles(AnnounceMode::NopBaseline),
        2 * (6450 - 1)
    );
}

#[test]
fn deep_recursion_keeps_every_return_address() {
    let suite = corpus::suite("recursion.s").unwrap().expand();
    let b = protect(corpus::RECURSION, &suite, AnnounceMode::SimulatedSyscall);
    let deep = TestInput::new("deep").with_scalar(100);
    assert_eq!(run(&b.protected, &deep), RunEnd::Exit(5050));
    verify_benign_equivalence(
        &b.original,
        &b.protected,
        &MemoryLayout::default(),
        CostModel::default(),
        &suite,
        DEFAULT_STEP_BUDGET,
    )
    .unwrap();
}

#[test]
fn inserted_count_is_announces_plus_split_growth() {
    for (name, src) in [
        ("strcpy.s", corpus::STRCPY),
        ("recursion.s", corpus::RECURSION),
        ("calls.s", corpus::CALLS),
        ("dispatch.s", corpus::DISPATCH),
    ] {
        let suite = corpus::suite(name).unwrap().expand();
        let b = protect(src, &suite, AnnounceMode::SimulatedSyscall);
        let growth: usize = b
            .plan
            .split_ops
            .iter()
            .map(|o| o.replacement.len() - 1 - 2 * usize::from(o.announced))
            .sum();
        assert_eq!(
            b.report.inserted_instructions,
            2 * b.report.announce_pairs + growth,
            "{name}"
        );
        assert_eq!(
            b.report.rewritten_count,
            b.report.original_count + b.report.inserted_instructions
        );
    }
}

#[test]
fn stack_pointer_to_table_moves_to_a_fixed_slot() {
    let suite = corpus::suite("dispatch.s").unwrap().expand();
    let b = protect(corpus::DISPATCH, &suite, AnnounceMode::SimulatedSyscall);
    assert_eq!(b.plan.fixed_slots.len(), 1);
    assert_eq!(b.plan.fixed_slots[0].key, "stack:main:-12");
    let store = b
        .plan
        .split_ops
        .iter()
        .find(|o| o.role == SplitRole::SlotStore)
        .unwrap();
    assert_eq!(store.loc.to_string(), "main+0xc");
    verify_benign_equivalence(
        &b.original,
        &b.protected,
        &MemoryLayout::default(),
        CostModel::default(),
        &suite,
        DEFAULT_STEP_BUDGET,
    )
    .unwrap();
}

#[test]
fn global_pointer_slot_inherits_its_initial_value() {
    let src = "main:\n PUSH {r4, lr}\n LDR r3, =fp\n LDR r3, [r3]\n BLX r3\n POP {r4, pc}\nf:\n MOV r0, #9\n BX lr\n .data\nfp:\n .word f\n";
    let b = protect(src, &[TestInput::new("t")], AnnounceMode::SimulatedSyscall);
    assert_eq!(b.plan.fixed_slots[0].init, DataWord::Label("f".into()));
    assert_eq!(run(&b.protected, &TestInput::new("t")), RunEnd::Exit(9));
}

#[test]
fn r12_in_the_input_is_rejected() {
    let p = parse_program("main:\n PUSH {r4, lr}\n MOV r12, #1\n POP {r4, pc}\n").unwrap();
    let ident = identify_control_data(&p);
    let err = plan_relocation(&p, &DataSourceGraph::default(), &ident, &MemoryLayout::default()).unwrap_err();
    assert!(matches!(err, RewriteError::ReservedRegister(_)));
}

#[test]
fn cross_function_sites_are_unpatchable() {
    let p = parse_program("main:\n LDR r0, =f\n BL g\n SVC #0\ng:\n BX r0\nf:\n BX lr\n").unwrap();
    let ident = identify_control_data(&p);
    let err = plan_relocation(&p, &DataSourceGraph::default(), &ident, &MemoryLayout::default()).unwrap_err();
    assert!(matches!(err, RewriteError::Unpatchable { .. }), "{err:?}");
}

#[test]
fn byte_writer_of_a_slot_is_unsupported() {
    let src = "main:\n PUSH {r4, lr}\n LDR r3, =fp\n LDR r2, =f\n STRB r2, [r3]\n LDR r3, [r3]\n BLX r3\n POP {r4, pc}\nf:\n BX lr\n .data\nfp:\n .word f\n";
    let p = parse_program(src).unwrap();
    let ident = identify_control_data(&p);
    let slice = build_dsg(&p, &SliceConfig::default(), &ident, &[TestInput::new("t")]).unwrap();
    let err = plan_relocation(&p, &slice.graph, &ident, &MemoryLayout::default()).unwrap_err();
    assert!(matches!(err, RewriteError::UnsupportedWriter { .. }), "{err:?}");
}
