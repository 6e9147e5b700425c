//! Independent checks of phase 1 and phase 2 against execution traces.

use std::collections::{BTreeMap, BTreeSet};

use proconda_core::asm::{parse_program, CodeLocation, Mnemonic, Program, Register};
use proconda_core::corpus;
use proconda_core::ident::{identify_control_data, BaseExpr, ControlDataReport, LoadSite};
use proconda_core::machine::{
    AnnounceMode, CostModel, Machine, MemoryLayout, StepResult, TraceOptions,
};
use proconda_core::slice::{build_dsg, SliceConfig};
use proconda_core::testgen::{random_input, random_source, GenOptions};
use proconda_core::TestInput;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BUDGET: u64 = 200_000;

fn machine<'p>(p: &'p Program, input: &TestInput) -> Machine<'p> {
    Machine::new(
        p,
        &MemoryLayout::default(),
        CostModel::default(),
        AnnounceMode::SimulatedSyscall,
        input,
    )
    .unwrap()
}

fn accessed_address(m: &Machine, p: &Program, loc: &CodeLocation) -> Option<u32> {
    let ins = p.locate(loc).ok()?;
    let mem = ins.mem()?;
    let base = m.reg(mem.base);
    Some(if mem.post_index {
        base
    } else {
        base.wrapping_add(mem.offset as u32)
    })
}

/// Runs `p` one step at a time and checks every executed load site against
/// its static base expression, and every register-consuming site against
/// the value its chain loaded. Returns how many of each check ran.
fn check_identification(p: &Program, report: &ControlDataReport, input: &TestInput) -> (usize, usize) {
    let mut checked = (0, 0);
    let mut watched: BTreeMap<&CodeLocation, Vec<&LoadSite>> = BTreeMap::new();
    for ls in &report.load_sites {
        watched.entry(ls.watch_loc()).or_default().push(ls);
    }
    let mut m = machine(p, input);
    let mut frames: Vec<(String, u32)> = Vec::new();
    let mut loaded: BTreeMap<String, u32> = BTreeMap::new();
    for _ in 0..BUDGET {
        let pc = m.pc();
        let Some(loc) = m.location_of(pc) else { break };
        if loc.index() == 0 {
            frames.push((loc.function.clone(), m.reg(Register::SP)));
        }
        while frames.last().is_some_and(|(f, _)| *f != loc.function) {
            frames.pop();
        }
        let entry_sp = frames.last().map(|f| f.1).unwrap_or_else(|| panic!("no frame at {loc}"));
        let ins = p.locate(&loc).unwrap().clone();

        for ls in watched.get(&loc).into_iter().flatten() {
            let addr = if ins.mnemonic == Mnemonic::Pop {
                let list = ins.reg_list().unwrap();
                let pos = list.iter().position(|r| *r == ls.target_register).unwrap();
                m.reg(Register::SP) + 4 * pos as u32
            } else {
                accessed_address(&m, p, &loc).expect("watched instruction accesses memory")
            };
            let expected = match &ls.base {
                BaseExpr::Stack {
                    entry_offset: Some(e),
                    ..
                } => Some(entry_sp.wrapping_add(*e as u32)),
                BaseExpr::Data { label, offset } => {
                    Some(m.label_address(label).unwrap() + *offset as u32)
                }
                BaseExpr::Absolute { address } => Some(*address),
                _ => None,
            };
            if let Some(e) = expected {
                assert_eq!(addr, e, "{} at {loc}", ls.slot_id());
                checked.0 += 1;
            }
            let width = if ins.mnemonic == Mnemonic::Ldrb { 1 } else { 4 };
            loaded.insert(ls.slot_id(), m.state().memory.read(addr, width).unwrap());
        }

        for chain in report.chains.iter().filter(|c| c.site == loc) {
            if chain.register == Register::PC {
                continue;
            }
            let ls = report
                .load_sites
                .iter()
                .find(|l| l.loc == chain.load_site && l.target_register != Register::PC)
                .or_else(|| report.load_sites.iter().find(|l| l.loc == chain.load_site))
                .unwrap();
            let other_loads = chain.path.iter().any(|l| {
                *l != ls.loc
                    && Some(l) != ls.deref_at.as_ref()
                    && matches!(
                        p.locate(l).unwrap().mnemonic,
                        Mnemonic::Ldr | Mnemonic::Ldrb | Mnemonic::Pop
                    )
            });
            if let (false, Some(v)) = (other_loads, loaded.get(&ls.slot_id())) {
                assert_eq!(m.reg(chain.register), *v, "{} consumed at {loc}", ls.slot_id());
                checked.1 += 1;
            }
        }

        if ins.mnemonic == Mnemonic::Pop && ins.reg_list().unwrap().contains(&Register::PC) {
            assert!(
                report
                    .load_sites
                    .iter()
                    .any(|l| l.loc == loc && l.is_return_slot()),
                "return at {loc} has no return slot"
            );
        }
        if m.step() != StepResult::Continue {
            break;
        }
    }
    checked
}

fn check_completeness(report: &ControlDataReport) {
    for s in &report.sites {
        assert!(
            report.chains.iter().any(|c| c.site == s.loc)
                || report.unresolved.iter().any(|u| u.site == s.loc),
            "site {} is neither chained nor explained",
            s.loc
        );
    }
}

#[test]
fn identification_matches_execution_on_random_programs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1de);
    let mut total = (0, 0);
    for i in 0..300 {
        let src = random_source(&mut rng, &GenOptions::default());
        let p = parse_program(&src).unwrap();
        let report = identify_control_data(&p);
        check_completeness(&report);
        for k in 0..3 {
            let input = random_input(&mut rng, format!("{i}.{k}"));
            let (a, v) = check_identification(&p, &report, &input);
            total = (total.0 + a, total.1 + v);
        }
    }
    assert!(total.0 > 1000 && total.1 > 100, "{total:?}");
}

#[test]
fn identification_matches_execution_on_the_corpus() {
    for (name, src) in corpus::PROGRAMS {
        // frame tracking above cannot tell recursive activations apart
        if *name == "recursion.s" {
            continue;
        }
        let p = parse_program(src).unwrap();
        let report = identify_control_data(&p);
        check_completeness(&report);
        if let Some(suite) = corpus::suite(name) {
            for input in suite.expand() {
                check_identification(&p, &report, &input);
            }
        }
    }
}

/// Graph edges recomputed from a trace of every store and every load.
fn brute_force_edges(
    p: &Program,
    report: &ControlDataReport,
    suite: &[TestInput],
) -> BTreeSet<(CodeLocation, String)> {
    let mut watched: BTreeMap<&CodeLocation, Vec<String>> = BTreeMap::new();
    for ls in &report.load_sites {
        watched.entry(ls.watch_loc()).or_default().push(ls.slot_id());
    }
    let mut edges = BTreeSet::new();
    for input in suite {
        let mut m = machine(p, input).with_trace(TraceOptions {
            record_all_stores: true,
            record_loads: true,
            ..TraceOptions::default()
        });
        let _ = m.run(BUDGET);
        let (_, trace) = m.into_parts();
        for load in &trace.loads {
            let Some(slots) = watched.get(&load.loc) else { continue };
            for byte in load.address..load.address + load.width {
                let last = trace
                    .writes
                    .iter()
                    .filter(|w| w.seq < load.seq && w.address <= byte && byte < w.address + w.width)
                    .max_by_key(|w| w.seq);
                if let Some(w) = last {
                    for s in slots {
                        edges.insert((w.wio.clone(), s.clone()));
                    }
                }
            }
        }
    }
    edges
}

fn check_graph(p: &Program, suite: &[TestInput]) {
    let report = identify_control_data(p);
    let cfg = SliceConfig {
        threshold: 0.01,
        ..SliceConfig::default()
    };
    let g = build_dsg(p, &cfg, &report, suite).unwrap().graph;
    let got: BTreeSet<_> = g.edges.iter().map(|e| (e.from.clone(), e.to.clone())).collect();
    assert_eq!(got, brute_force_edges(p, &report, suite));
}

#[test]
fn graph_equals_brute_force_trace_on_the_corpus() {
    for (name, _) in corpus::SUITES {
        let p = parse_program(corpus::program(name).unwrap()).unwrap();
        check_graph(&p, &corpus::suite(name).unwrap().expand());
    }
}

#[test]
fn graph_equals_brute_force_trace_on_random_programs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xd56);
    for i in 0..200 {
        let src = random_source(&mut rng, &GenOptions::default());
        let p = parse_program(&src).unwrap();
        let suite: Vec<_> = (0..4).map(|k| random_input(&mut rng, format!("{i}.{k}"))).collect();
        check_graph(&p, &suite);
    }
}
