//! Protected execution, the exploit matrix and overhead reports.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{AsmError, CodeLocation, Instruction, Mnemonic, Program};
use crate::config::PipelineConfig;
use crate::ident::{identify_control_data, ControlDataReport};
use crate::inputs::{boundary_suite, InputDomain, TestInput};
use crate::machine::{
    AnnounceMode, CostModel, Machine, MachineError, MachineState, MemoryLayout, StepResult,
    Trace, TraceOptions, TrapInfo,
};
use crate::rewrite::{
    instrument, plan_relocation, Divergence, RelocationPlan, RewriteError, RewriteReport,
};
use crate::slice::{build_dsg, SliceError, SliceResult};

/// Simulated clock used to turn cycles into time: one cycle per nanosecond.
pub const CLOCK_HZ: u64 = 1_000_000_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Io(String),
    #[error("{path}: {source}")]
    Parse { path: String, source: AsmError },
    #[error("bad manifest {path}: {detail}")]
    Manifest { path: String, detail: String },
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Slice(#[from] SliceError),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error("coverage {coverage:.4} is below the threshold {threshold:.4}")]
    CoverageGate { coverage: f64, threshold: f64 },
    #[error("case `{name}` is invalid: the exploit does not hijack the unprotected build ({outcome})")]
    InvalidCase { name: String, outcome: Outcome },
    #[error("builds are not equivalent: {0}")]
    NotEquivalent(Divergence),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed { exit: i32, output: Vec<i32> },
    /// Execution reached the attacker's code.
    Hijacked { pc: u32 },
    Faulted(TrapInfo),
}

impl Outcome {
    pub fn is_faulted(&self) -> bool {
        matches!(self, Outcome::Faulted(_))
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Completed { exit, .. } => write!(f, "exit {exit}"),
            Outcome::Hijacked { pc } => write!(f, "hijacked pc={pc:#x}"),
            Outcome::Faulted(t) => write!(f, "{:?} at {}", t.kind, t.wio),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub mode: AnnounceMode,
    /// Stop with [`Outcome::Hijacked`] as soon as `pc` reaches this address.
    pub attacker_target: Option<u32>,
    pub trace: TraceOptions,
}

#[derive(Debug, Clone)]
pub struct Execution {
    pub outcome: Outcome,
    pub state: MachineState,
    pub trace: Trace,
}

/// Runs `p` to completion, a trap, or the attacker's code.
pub fn execute(
    p: &Program,
    input: &TestInput,
    cfg: &PipelineConfig,
    opts: &RunOptions,
) -> Result<Execution, HarnessError> {
    let mut m = Machine::new(p, &cfg.layout, cfg.cost, opts.mode, input)?
        .with_trace(opts.trace.clone());
    let outcome = loop {
        if opts.attacker_target == Some(m.pc()) {
            break Outcome::Hijacked { pc: m.pc() };
        }
        if m.state().steps >= cfg.step_budget {
            return Err(MachineError::StepBudget(cfg.step_budget).into());
        }
        match m.step() {
            StepResult::Continue => {}
            StepResult::Exit(exit) => {
                break Outcome::Completed {
                    exit,
                    output: m.state().output.clone(),
                }
            }
            StepResult::Trap(t) => break Outcome::Faulted(t),
        }
    };
    let (state, trace) = m.into_parts();
    Ok(Execution {
        outcome,
        state,
        trace,
    })
}

/// Runs a rewritten program under the configured announce mode.
pub fn run_protected(
    p: &Program,
    input: &TestInput,
    cfg: &PipelineConfig,
) -> Result<Outcome, HarnessError> {
    let opts = RunOptions {
        mode: cfg.mode,
        ..RunOptions::default()
    };
    Ok(execute(p, input, cfg, &opts)?.outcome)
}

/// Every artifact of one pass through the three phases.
#[derive(Debug, Clone)]
pub struct Protected {
    pub analysis: ControlDataReport,
    pub slice: SliceResult,
    pub plan: RelocationPlan,
    pub program: Program,
    pub report: RewriteReport,
}

/// Analyzes, slices over `suite` and rewrites `p`. Fails when the suite
/// does not reach the coverage threshold.
pub fn protect(
    p: &Program,
    suite: &[TestInput],
    cfg: &PipelineConfig,
) -> Result<Protected, HarnessError> {
    let analysis = identify_control_data(p);
    let slice = build_dsg(p, &cfg.slice_config(), &analysis, suite)?;
    if !slice.finalized {
        return Err(HarnessError::CoverageGate {
            coverage: slice.coverage,
            threshold: slice.threshold,
        });
    }
    let plan = plan_relocation(p, &slice.graph, &analysis, &cfg.layout)?;
    let (program, report) = instrument(p, &plan, cfg.mode)?;
    Ok(Protected {
        analysis,
        slice,
        plan,
        program,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VulnClass {
    LocalOverflow,
    GlobalOverflow,
    PointerOverwrite,
}

impl fmt::Display for VulnClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VulnClass::LocalOverflow => "local-overflow",
            VulnClass::GlobalOverflow => "global-overflow",
            VulnClass::PointerOverwrite => "pointer-overwrite",
        })
    }
}

/// How to build the exploit input: buffer `role` filled with the address
/// of `repeat`, little-endian, for `length` bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploitSpec {
    pub role: String,
    pub repeat: String,
    pub length: usize,
    #[serde(default)]
    pub scalars: Vec<i32>,
}

/// On-disk description of an exploit case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploitManifest {
    pub name: String,
    /// Program file, relative to the manifest.
    pub program: String,
    pub vuln_class: VulnClass,
    pub attacker_target: String,
    /// Benign domain; its boundary suite is the benign input set.
    pub domain: InputDomain,
    pub exploit: ExploitSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_writer: Option<CodeLocation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploitCase {
    pub name: String,
    pub vuln_class: VulnClass,
    pub program: Program,
    pub attacker_target: String,
    pub benign_inputs: Vec<TestInput>,
    pub exploit: ExploitSpec,
    /// The out-of-bounds writer, known by construction.
    pub expected_writer: Option<CodeLocation>,
}

pub fn label_address(p: &Program, label: &str, layout: &MemoryLayout) -> Result<u32, HarnessError> {
    let m = Machine::new(
        p,
        layout,
        CostModel::default(),
        AnnounceMode::SimulatedSyscall,
        &TestInput::new("probe"),
    )?;
    m.label_address(label)
        .ok_or_else(|| HarnessError::UnknownLabel(label.to_string()))
}

impl ExploitCase {
    pub fn from_manifest(m: ExploitManifest, program: Program) -> ExploitCase {
        ExploitCase {
            benign_inputs: boundary_suite(&m.domain),
            name: m.name,
            vuln_class: m.vuln_class,
            program,
            attacker_target: m.attacker_target,
            exploit: m.exploit,
            expected_writer: m.expected_writer,
        }
    }

    /// Exploit input aimed at the attacker target as laid out in `p`.
    pub fn exploit_input(&self, p: &Program, layout: &MemoryLayout) -> Result<TestInput, HarnessError> {
        let addr = label_address(p, &self.exploit.repeat, layout)?;
        let payload: Vec<u8> = addr
            .to_le_bytes()
            .into_iter()
            .cycle()
            .take(self.exploit.length)
            .collect();
        let mut input = TestInput::new(format!("{}-exploit", self.name)).with_buffer(&self.exploit.role, payload);
        input.scalars = self.exploit.scalars.clone();
        Ok(input)
    }
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Loads every `*.case.json` in `dir`, in file name order.
pub fn load_cases(dir: &Path) -> Result<Vec<ExploitCase>, HarnessError> {
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".case.json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|path| {
            let m: ExploitManifest = serde_json::from_str(&read(path)?).map_err(|e| HarnessError::Manifest {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
            let prog_path = dir.join(&m.program);
            let program = crate::asm::parse_program(&read(&prog_path)?).map_err(|source| HarnessError::Parse {
                path: prog_path.display().to_string(),
                source,
            })?;
            Ok(ExploitCase::from_manifest(m, program))
        })
        .collect()
}

/// The three bundled cases.
pub fn corpus_cases() -> Vec<ExploitCase> {
    crate::corpus::CASES
        .iter()
        .map(|(name, text)| {
            let m: ExploitManifest = serde_json::from_str(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            let src = crate::corpus::program(&m.program).expect("bundled program exists");
            let p = crate::asm::parse_program(src).expect("bundled program parses");
            ExploitCase::from_manifest(m, p)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploitRow {
    pub name: String,
    pub vuln_class: VulnClass,
    pub unprotected: Outcome,
    /// Outcome of the protected build; a trap's WIO is mapped back to the
    /// original program.
    pub protected: Outcome,
    /// Faulting write, in original program coordinates.
    pub fault_wio: Option<CodeLocation>,
    pub expected_writer: Option<CodeLocation>,
    pub wio_matches: bool,
    /// Every store into the protected region came from a graph writer.
    pub shadow_intact: bool,
    pub benign_runs: usize,
    pub false_positives: usize,
    pub prevented: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExploitMatrix {
    pub rows: Vec<ExploitRow>,
}

impl ExploitMatrix {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.prevented)
    }

    pub fn prevented(&self) -> usize {
        self.rows.iter().filter(|r| r.prevented).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes")
    }

    /// Aligned text table with the same content as the JSON form.
    pub fn render_table(&self) -> String {
        let header = [
            "case",
            "class",
            "unprotected",
            "protected",
            "fault WIO",
            "expected",
            "benign FP",
            "prevented",
        ];
        let opt = |l: &Option<CodeLocation>| l.as_ref().map_or("-".to_string(), ToString::to_string);
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            rows.push(vec![
                r.name.clone(),
                r.vuln_class.to_string(),
                r.unprotected.to_string(),
                r.protected.to_string(),
                opt(&r.fault_wio),
                opt(&r.expected_writer),
                format!("{}/{}", r.false_positives, r.benign_runs),
                if r.prevented { "✓" } else { "✗" }.to_string(),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out.push_str(&format!("prevented {}/{}\n", self.prevented(), self.rows.len()));
        out
    }
}

fn run_case(case: &ExploitCase, cfg: &PipelineConfig) -> Result<ExploitRow, HarnessError> {
    let layout = &cfg.layout;
    let attack = |p: &Program, trace: TraceOptions| -> Result<Execution, HarnessError> {
        let opts = RunOptions {
            mode: cfg.mode,
            attacker_target: Some(label_address(p, &case.attacker_target, layout)?),
            trace,
        };
        execute(p, &case.exploit_input(p, layout)?, cfg, &opts)
    };
    let unprotected = attack(&case.program, TraceOptions::default())?.outcome;
    if !matches!(unprotected, Outcome::Hijacked { .. }) {
        return Err(HarnessError::InvalidCase {
            name: case.name.clone(),
            outcome: unprotected,
        });
    }
    let built = protect(&case.program, &case.benign_inputs, cfg)?;
    let run = attack(
        &built.program,
        TraceOptions {
            record_all_stores: true,
            ..TraceOptions::default()
        },
    )?;
    let writers = built.slice.graph.writers();
    let shadow_intact = run
        .trace
        .writes
        .iter()
        .filter(|w| layout.in_proconda(w.address))
        .all(|w| {
            built
                .report
                .original_location(&w.wio)
                .is_some_and(|o| writers.contains(o))
        });
    let protected = match run.outcome {
        Outcome::Faulted(mut t) => {
            if let Some(o) = built.report.original_location(&t.wio) {
                t.wio = o.clone();
            }
            Outcome::Faulted(t)
        }
        o => o,
    };
    let fault_wio = match &protected {
        Outcome::Faulted(t) => Some(t.wio.clone()),
        _ => None,
    };
    let false_positives = case
        .benign_inputs
        .iter()
        .map(|i| run_protected(&built.program, i, cfg))
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .filter(|o| !matches!(o, Outcome::Completed { .. }))
        .count();
    Ok(ExploitRow {
        name: case.name.clone(),
        vuln_class: case.vuln_class,
        prevented: !matches!(protected, Outcome::Hijacked { .. }),
        wio_matches: fault_wio.is_some() && fault_wio == case.expected_writer,
        unprotected,
        protected,
        fault_wio,
        expected_writer: case.expected_writer.clone(),
        shadow_intact,
        benign_runs: case.benign_inputs.len(),
        false_positives,
    })
}

/// Replays every case against its unprotected and protected build.
pub fn run_exploit_matrix(
    cases: &[ExploitCase],
    cfg: &PipelineConfig,
) -> Result<ExploitMatrix, HarnessError> {
    let rows = cases
        .par_iter()
        .map(|c| run_case(c, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ExploitMatrix { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub runs: usize,
    pub cycles_unprotected: u64,
    pub cycles_nop_mode: u64,
    pub cycles_syscall_mode: u64,
    pub announce_executions: u64,
    pub protected_writes: u64,
    pub cost: CostModel,
    pub original_instructions: usize,
    pub inserted_instructions: usize,
    pub instr_delta_pct: f64,
    /// Code plus data bytes of the original program.
    pub original_footprint: u32,
    pub footprint_delta: u32,
    pub footprint_delta_pct: f64,
}

impl OverheadReport {
    /// `syscall - nop == announces * (syscall cost - nop cost)`.
    pub fn cost_identity_holds(&self) -> bool {
        let per = self.cost.announce_cost_syscall - self.cost.announce_cost_nop;
        self.cycles_syscall_mode.checked_sub(self.cycles_nop_mode)
            == Some(self.announce_executions * per)
    }

    pub fn ordering_holds(&self) -> bool {
        self.cycles_syscall_mode >= self.cycles_nop_mode
            && self.cycles_nop_mode >= self.cycles_unprotected
    }

    pub fn seconds(cycles: u64) -> f64 {
        cycles as f64 / CLOCK_HZ as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("overhead report serializes")
    }
}

fn footprint(p: &Program) -> u32 {
    let data: u32 = p.data.iter().chain(&p.proconda).map(|d| d.byte_len()).sum();
    4 * p.instruction_count() as u32 + data
}

fn observable(o: &Outcome) -> Option<(i32, &[i32])> {
    match o {
        Outcome::Completed { exit, output } => Some((*exit, output)),
        _ => None,
    }
}

/// Sums cycle counters of the three builds over `suite`. `rewrite` is the
/// report of the syscall-mode build.
pub fn measure_overhead(
    p: &Program,
    p_syscall: &Program,
    p_nop: &Program,
    rewrite: &RewriteReport,
    suite: &[TestInput],
    cfg: &PipelineConfig,
) -> Result<OverheadReport, HarnessError> {
    let builds = [
        (p, AnnounceMode::SimulatedSyscall),
        (p_nop, AnnounceMode::NopBaseline),
        (p_syscall, AnnounceMode::SimulatedSyscall),
    ];
    let per_input = suite
        .par_iter()
        .map(|input| {
            let mut runs = Vec::with_capacity(3);
            for (build, mode) in builds {
                let opts = RunOptions {
                    mode,
                    ..RunOptions::default()
                };
                runs.push(execute(build, input, cfg, &opts)?);
            }
            let base = observable(&runs[0].outcome);
            for (r, what) in runs[1..].iter().zip(["nop build", "syscall build"]) {
                if base.is_none() || observable(&r.outcome) != base {
                    return Err(HarnessError::NotEquivalent(Divergence {
                        input: input.name.clone(),
                        observable: what.to_string(),
                        original: runs[0].outcome.to_string(),
                        rewritten: r.outcome.to_string(),
                    }));
                }
            }
            Ok([
                runs[0].state.cycles,
                runs[1].state.cycles,
                runs[2].state.cycles,
                runs[2].state.announces,
            ])
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let sum = |k: usize| per_input.iter().map(|c| c[k]).sum::<u64>();
    let original_footprint = footprint(p);
    let pct = |a: f64, b: f64| if b == 0.0 { 0.0 } else { 100.0 * a / b };
    Ok(OverheadReport {
        runs: suite.len(),
        cycles_unprotected: sum(0),
        cycles_nop_mode: sum(1),
        cycles_syscall_mode: sum(2),
        announce_executions: sum(3),
        protected_writes: sum(3) / 2,
        cost: cfg.cost,
        original_instructions: rewrite.original_count,
        inserted_instructions: rewrite.inserted_instructions,
        instr_delta_pct: rewrite.instr_delta_pct(),
        original_footprint,
        footprint_delta: rewrite.footprint_delta,
        footprint_delta_pct: pct(rewrite.footprint_delta as f64, original_footprint as f64),
    })
}

/// Protects `p` in both announce modes from one plan and measures all three
/// builds over `suite`.
pub fn overhead_for(
    p: &Program,
    suite: &[TestInput],
    cfg: &PipelineConfig,
) -> Result<OverheadReport, HarnessError> {
    let sys_cfg = PipelineConfig {
        mode: AnnounceMode::SimulatedSyscall,
        ..cfg.clone()
    };
    let built = protect(p, suite, &sys_cfg)?;
    let (nop, _) = instrument(p, &built.plan, AnnounceMode::NopBaseline)?;
    measure_overhead(p, &built.program, &nop, &built.report, suite, cfg)
}

/// Replaces the `k`-th announce bracket (in program order) with NOPs.
/// Returns `None` when there are fewer than `k + 1` brackets.
pub fn strip_announce_pair(p: &Program, k: usize) -> Option<Program> {
    let mut out = p.clone();
    let mut seen = 0;
    for f in &mut out.functions {
        let mut i = 0;
        while i < f.instructions.len() {
            if f.instructions[i].mnemonic == Mnemonic::AnnounceBegin {
                if seen == k {
                    let mut depth = 0;
                    let end = (i..f.instructions.len()).find(|&j| {
                        match f.instructions[j].mnemonic {
                            Mnemonic::AnnounceBegin => depth += 1,
                            Mnemonic::AnnounceEnd => depth -= 1,
                            _ => {}
                        }
                        depth == 0
                    })?;
                    f.instructions[i] = Instruction::bare(Mnemonic::Nop);
                    f.instructions[end] = Instruction::bare(Mnemonic::Nop);
                    return Some(out);
                }
                seen += 1;
            }
            i += 1;
        }
    }
    None
}
