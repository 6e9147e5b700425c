//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use proconda_core::asm::{parse_program, CodeLocation, Mnemonic, Program};
use proconda_core::harness::{
    corpus_cases, execute, overhead_for, protect, run_exploit_matrix, Outcome, RunOptions, CLOCK_HZ,
};
use proconda_core::ident::identify_control_data;
use proconda_core::machine::AnnounceMode;
use proconda_core::rewrite::{instrument, verify_benign_equivalence};
use proconda_core::slice::{brute_force_edges, build_dsg, Edge};
use proconda_core::testgen::{audit_run, random_input, random_source, GenOptions};
use proconda_core::{corpus, DataSourceGraph, PipelineConfig, SliceResult, TestInput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/corpus")
}

fn program(name: &str) -> Program {
    parse_program(corpus::program(name).expect("bundled program")).expect("bundled program parses")
}

/// Every corpus program with every benign input it has: committed suites
/// and the benign inputs of the exploit cases.
fn corpus_workloads() -> Vec<(String, Program, Vec<TestInput>)> {
    let mut out: Vec<_> = corpus::SUITES
        .iter()
        .map(|(name, _)| (name.to_string(), program(name), corpus::suite(name).unwrap().expand()))
        .collect();
    for c in corpus_cases() {
        out.push((format!("{} (case)", c.name), c.program, c.benign_inputs));
    }
    out
}

fn strcpy_graph() -> Check {
    let started = Instant::now();
    let p = program("strcpy.s");
    let report = identify_control_data(&p);
    let suite = corpus::suite("strcpy.s").unwrap().expand();
    let cfg = PipelineConfig::default();
    let result = build_dsg(&p, &cfg.slice_config(), &report, &suite).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();

    ensure!(report.sites.len() == 1, "expected one control-flow site, got {}", report.sites.len());
    let site = &report.sites[0];
    ensure!(site.instruction.starts_with("POP"), "site is `{}`, not the POP", site.instruction);
    ensure!(result.finalized, "suite coverage {:.4} not finalized", result.coverage);

    let loc = |s: &str| -> CodeLocation { s.parse().unwrap() };
    let expected: BTreeSet<Edge> = [Edge {
        from: loc("strcpy+0x0"),
        to: "strcpy+0x1c:pc".into(),
    }]
    .into();
    ensure!(result.graph.edges == expected, "edges {:?}", result.graph.edges);
    let strb: Vec<_> = p
        .instructions()
        .filter(|(_, i)| i.mnemonic == Mnemonic::Strb)
        .map(|(l, _)| l)
        .collect();
    ensure!(!strb.is_empty(), "fixture has no STRB");
    for l in &strb {
        ensure!(!result.graph.writers().contains(l), "STRB at {l} is a writer");
    }

    let golden_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let golden: DataSourceGraph =
        serde_json::from_str(&std::fs::read_to_string(golden_dir.join("strcpy.dsg.json")).unwrap())
            .map_err(|e| e.to_string())?;
    ensure!(result.graph == golden, "graph differs from the golden file");
    let golden_analysis: proconda_core::ControlDataReport = serde_json::from_str(
        &std::fs::read_to_string(golden_dir.join("strcpy.analysis.json")).unwrap(),
    )
    .map_err(|e| e.to_string())?;
    ensure!(report == golden_analysis, "analysis differs from the golden file");
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("1 site, 1 edge strcpy+0x0 -> strcpy+0x1c:pc, {elapsed:.2?}"))
}

fn exploit_prevention() -> Check {
    let started = Instant::now();
    let cases = corpus_cases();
    let matrix = run_exploit_matrix(&cases, &PipelineConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    println!("{}", matrix.render_table().trim_end());
    ensure!(matrix.rows.len() == 3, "{} cases", matrix.rows.len());
    for r in &matrix.rows {
        ensure!(matches!(r.unprotected, Outcome::Hijacked { .. }), "{}: unprotected {}", r.name, r.unprotected);
        ensure!(r.protected.is_faulted(), "{}: protected {}", r.name, r.protected);
        ensure!(r.wio_matches, "{}: fault at {:?}, expected {:?}", r.name, r.fault_wio, r.expected_writer);
        ensure!(r.shadow_intact, "{}: shadow changed before the fault", r.name);
        ensure!(r.false_positives == 0, "{}: {} false positives", r.name, r.false_positives);
    }
    ensure!(matrix.prevented() == 3, "prevented {}/3", matrix.prevented());
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("3/3 prevented, 0 false positives, {elapsed:.2?}"))
}

fn oracle_equivalence() -> Check {
    let mut checked = 0;
    for (name, p, suite) in corpus_workloads() {
        let report = identify_control_data(&p);
        let cfg = PipelineConfig::default().slice_config();
        for input in &suite {
            let one = std::slice::from_ref(input);
            let g = build_dsg(&p, &cfg, &report, one).map_err(|e| format!("{name}: {e}"))?.graph;
            let brute = brute_force_edges(&p, &cfg, &report, one).map_err(|e| format!("{name}: {e}"))?;
            ensure!(g.edges == brute, "{name}/{}: {:?} != {:?}", input.name, g.edges, brute);
            checked += 1;
        }
    }
    Ok(format!("{checked} program/input pairs, exact edge-set equality"))
}

fn benign_semantics() -> Check {
    let cfg = PipelineConfig::default();
    let mut runs = 0;
    for (name, p, suite) in corpus_workloads() {
        let built = protect(&p, &suite, &cfg).map_err(|e| format!("{name}: {e}"))?;
        let (nop, _) = instrument(&p, &built.plan, AnnounceMode::NopBaseline).map_err(|e| e.to_string())?;
        for q in [&built.program, &nop] {
            verify_benign_equivalence(&p, q, &cfg.layout, cfg.cost, &suite, cfg.step_budget)
                .map_err(|d| format!("{name}: {d}"))?;
            runs += suite.len();
        }
    }
    Ok(format!("{runs} runs, 0 divergences"))
}

fn cost_identities() -> Check {
    let cfg = PipelineConfig::default();
    let per = cfg.cost.announce_cost_syscall - cfg.cost.announce_cost_nop;
    ensure!(per == 6450 - 1, "per-announce delta {per}");
    for (name, _) in corpus::SUITES {
        let r = overhead_for(&program(name), &corpus::suite(name).unwrap().expand(), &cfg)
            .map_err(|e| format!("{name}: {e}"))?;
        ensure!(r.announce_executions == 2 * r.protected_writes, "{name}: unpaired announces");
        ensure!(
            r.cycles_syscall_mode - r.cycles_nop_mode == 2 * r.protected_writes * per,
            "{name}: {} - {} != 2 * {} * {per}",
            r.cycles_syscall_mode,
            r.cycles_nop_mode,
            r.protected_writes
        );
    }

    let p = program("announce_loop.s");
    let pairs = 50_000u64;
    let run = |mode| {
        let opts = RunOptions {
            mode,
            ..RunOptions::default()
        };
        execute(&p, &TestInput::new("n").with_scalar(pairs as i32), &cfg, &opts).map_err(|e| e.to_string())
    };
    let sys = run(AnnounceMode::SimulatedSyscall)?;
    let nop = run(AnnounceMode::NopBaseline)?;
    ensure!(sys.state.announces == 2 * pairs, "{} announces", sys.state.announces);
    // every instruction other than an announce costs one cycle
    let announce_cycles = sys.state.cycles - (sys.state.steps - sys.state.announces);
    ensure!(announce_cycles == pairs * 2 * 6450, "{announce_cycles} announce cycles");
    ensure!(sys.state.cycles - nop.state.cycles == 2 * pairs * per, "syscall - nop mismatch");
    // 12.9 us per bracketed store is 6.45 us per announce, exactly
    ensure!(announce_cycles * 1_000_000 / CLOCK_HZ == 645_000, "not 645 ms");
    ensure!(announce_cycles * 1_000_000_000 % CLOCK_HZ == 0, "inexact");
    Ok(format!(
        "identity exact on {} programs; 50000 pairs = {announce_cycles} cycles = 645 ms",
        corpus::SUITES.len()
    ))
}

fn overhead_in_kind() -> Check {
    let cfg = PipelineConfig::default();
    let delta = |name: &str| {
        overhead_for(&program(name), &corpus::suite(name).unwrap().expand(), &cfg).map_err(|e| format!("{name}: {e}"))
    };
    let straight = delta("straight.s")?;
    let calls = delta("calls.s")?;
    let recursion = delta("recursion.s")?;
    for (n, r) in [("straight", &straight), ("calls", &calls), ("recursion", &recursion)] {
        ensure!(r.footprint_delta > 0 || r.inserted_instructions == 0, "{n}: no footprint delta");
    }
    ensure!(
        calls.instr_delta_pct > straight.instr_delta_pct,
        "calls {:.2}% <= straight {:.2}%",
        calls.instr_delta_pct,
        straight.instr_delta_pct
    );
    ensure!(
        recursion.instr_delta_pct > straight.instr_delta_pct,
        "recursion {:.2}% <= straight {:.2}%",
        recursion.instr_delta_pct,
        straight.instr_delta_pct
    );
    Ok(format!(
        "instruction delta: calls {:.2}%, recursion {:.2}% > straight {:.2}%",
        calls.instr_delta_pct, recursion.instr_delta_pct, straight.instr_delta_pct
    ))
}

fn slice_with(suite: &str) -> Result<(i32, SliceResult), String> {
    let dir = corpus_dir();
    let out = Command::new(env!("CARGO_BIN_EXE_proconda"))
        .arg("slice")
        .arg(dir.join("local_overflow.s"))
        .arg("--suite")
        .arg(dir.join(suite))
        .output()
        .map_err(|e| e.to_string())?;
    let code = out.status.code().ok_or("killed by a signal")?;
    let result = serde_json::from_slice(&out.stdout).map_err(|e| format!("{suite}: {e}"))?;
    Ok((code, result))
}

fn coverage_gate() -> Check {
    let (code, under) = slice_with("local_overflow.undercover.suite.json")?;
    ensure!(code == 2, "under-covering suite exited {code}");
    ensure!(under.coverage < 0.92 && !under.finalized, "coverage {:.4}", under.coverage);
    let (code, full) = slice_with("local_overflow.suite.json")?;
    ensure!(code == 0, "full suite exited {code}");
    ensure!(full.coverage >= 0.92 && full.finalized, "coverage {:.4}", full.coverage);
    Ok(format!(
        "under-covering {:.4} rejected with exit 2, full {:.4} accepted",
        under.coverage, full.coverage
    ))
}

fn audit_one(seed: u64) -> Result<usize, String> {
    let budget = 200_000;
    let layout = PipelineConfig::default().layout;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = random_source(&mut rng, &GenOptions::default());
    let p = parse_program(&src).map_err(|e| e.to_string())?;
    let suite: Vec<_> = (0..3).map(|k| random_input(&mut rng, format!("{seed}.{k}"))).collect();
    let lenient = PipelineConfig {
        coverage_threshold: 0.01,
        step_budget: budget,
        ..PipelineConfig::default()
    };
    let built = protect(&p, &suite, &lenient).map_err(|e| format!("seed {seed}: {e}"))?;
    let wild = parse_program(&random_source(&mut rng, &GenOptions {
        wild_stores: true,
        ..GenOptions::default()
    }))
    .map_err(|e| e.to_string())?;
    let wild_input = random_input(&mut rng, format!("{seed}.w"));
    let mut runs = 0;
    let targets = suite.iter().map(|i| (&built.program, i)).chain([(&wild, &wild_input)]);
    for (q, input) in targets {
        for mode in [AnnounceMode::SimulatedSyscall, AnnounceMode::NopBaseline] {
            let v = audit_run(q, input, &layout, mode, budget).map_err(|e| format!("seed {seed}: {e}"))?;
            ensure!(v.is_empty(), "seed {seed}: {v:?}");
            runs += 1;
        }
    }
    Ok(runs)
}

fn soundness_properties() -> Check {
    const PROGRAMS: u64 = 1000;
    let started = Instant::now();
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()) as u64;
    let results: Vec<Result<usize, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (0..PROGRAMS)
                        .filter(|i| i % workers == w)
                        .map(|i| audit_one(0x5eed_0000 + i))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    let elapsed = started.elapsed();
    let runs: usize = results.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().sum();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("{PROGRAMS} programs, {runs} audited runs, {elapsed:.2?}"))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("strcpy data source graph matches the golden graph", strcpy_graph),
        ("exploit corpus prevented with correct WIO", exploit_prevention),
        ("graph equals brute-force store trace", oracle_equivalence),
        ("rewritten builds preserve benign behaviour", benign_semantics),
        ("cycle cost identities are exact", cost_identities),
        ("call-heavy programs pay more instructions", overhead_in_kind),
        ("coverage gate rejects an under-covering suite", coverage_gate),
        ("randomized protection soundness", soundness_properties),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {}: {name} ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}: {name}: {why}", i + 1);
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
