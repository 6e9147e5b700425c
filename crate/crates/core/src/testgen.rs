//! Random well-formed programs for property tests.
//!
//! Generated programs always terminate: calls only go to functions defined
//! later, local branches go forward except for counted loops, and no
//! instruction uses `r12`. Their results never depend on where code is
//! placed, so a rewritten build must reproduce them exactly.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::asm::Program;
use crate::inputs::TestInput;
use crate::machine::{
    AnnounceMode, CostModel, Machine, MachineError, MemoryLayout, StepResult, TraceOptions,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenOptions {
    pub max_functions: usize,
    pub max_stmts: usize,
    /// Function pointers in stack slots and through global tables.
    pub control_data: bool,
    /// Stores to arbitrary addresses, some bracketed by announces. Adds a
    /// `.proconda` section, so such programs cannot be rewritten.
    pub wild_stores: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            max_functions: 4,
            max_stmts: 8,
            control_data: true,
            wild_stores: false,
        }
    }
}

const ARITH: [&str; 4] = ["r0", "r1", "r2", "r4"];
const CONDS: [&str; 4] = ["BEQ", "BNE", "BLT", "BGE"];
/// Stack offset reserved for function pointers; plain locals use 0..12.
const FP_SLOT: i32 = 12;

struct Gen<'r, R> {
    rng: &'r mut R,
    opts: &'r GenOptions,
    nfuncs: usize,
    labels: usize,
    tables: Vec<usize>,
    out: String,
}

impl<R: Rng> Gen<'_, R> {
    fn line(&mut self, s: impl AsRef<str>) {
        self.out.push_str("    ");
        self.out.push_str(s.as_ref());
        self.out.push('\n');
    }

    fn label(&mut self) -> String {
        self.labels += 1;
        format!(".L{}", self.labels)
    }

    fn reg(&mut self) -> &'static str {
        ARITH.choose(self.rng).unwrap()
    }

    fn simple(&mut self) {
        let d = self.reg();
        let s = self.reg();
        match self.rng.gen_range(0..3) {
            0 => {
                let imm = self.rng.gen_range(-100..=100);
                self.line(format!("MOV {d}, #{imm}"));
            }
            1 => {
                let op = ["ADD", "SUB"].choose(self.rng).unwrap();
                let imm = self.rng.gen_range(0..=50);
                self.line(format!("{op} {d}, {s}, #{imm}"));
            }
            _ => {
                let t = self.reg();
                self.line(format!("ADD {d}, {s}, {t}"));
            }
        }
    }

    fn callee(&mut self, f: usize) -> Option<usize> {
        (f + 1 < self.nfuncs).then(|| self.rng.gen_range(f + 1..self.nfuncs))
    }

    fn stmt(&mut self, f: usize, framed: bool) {
        match self.rng.gen_range(0..12) {
            0..=2 => self.simple(),
            3 if framed => {
                let r = self.reg();
                let k = 4 * self.rng.gen_range(0..3);
                self.line(format!("STR {r}, [sp, #{k}]"));
            }
            4 if framed => {
                let r = self.reg();
                let k = self.rng.gen_range(0..FP_SLOT);
                self.line(format!("STRB {r}, [sp, #{k}]"));
            }
            5 if framed => {
                let r = self.reg();
                let k = 4 * self.rng.gen_range(0..3);
                self.line(format!("LDR {r}, [sp, #{k}]"));
            }
            6 => {
                let r = self.reg();
                let imm = self.rng.gen_range(-20..=20);
                let cc = CONDS.choose(self.rng).unwrap();
                let l = self.label();
                self.line(format!("CMP {r}, #{imm}"));
                self.line(format!("{cc} {l}"));
                self.simple();
                self.out.push_str(&format!("{l}:\n"));
            }
            7 => {
                let n = self.rng.gen_range(1..=4);
                let l = self.label();
                self.line(format!("MOV r3, #{n}"));
                self.out.push_str(&format!("{l}:\n"));
                self.simple();
                self.line("SUB r3, r3, #1");
                self.line("CMP r3, #0");
                self.line(format!("BNE {l}"));
            }
            8 => self.line("SVC #1"),
            9 if framed => {
                if let Some(g) = self.callee(f) {
                    self.line(format!("BL f{g}"));
                }
            }
            10 if framed && self.opts.control_data => {
                if let Some(g) = self.callee(f) {
                    self.line(format!("LDR r3, =f{g}"));
                    self.line(format!("STR r3, [sp, #{FP_SLOT}]"));
                    self.simple();
                    // r5 never feeds arithmetic, so code addresses stay out of results
                    self.line(format!("LDR r5, [sp, #{FP_SLOT}]"));
                    self.line("MOV r3, r5");
                    self.line("BLX r3");
                }
            }
            11 if framed && self.opts.control_data => {
                if let Some(g) = self.callee(f) {
                    if !self.tables.contains(&g) {
                        self.tables.push(g);
                    }
                    self.line(format!("LDR r3, =tbl{g}"));
                    self.line("LDR r3, [r3]");
                    self.line("BLX r3");
                }
            }
            _ if self.opts.wild_stores && self.rng.gen_bool(0.3) => self.wild(),
            _ => self.simple(),
        }
    }

    fn wild(&mut self) {
        let target = match self.rng.gen_range(0..5) {
            0 => "=main".to_string(),
            1 | 2 => "=cell".to_string(),
            3 => format!("={:#x}", [0x1000u32, 0x5000, 0x8004, 0xA000, 0x30000].choose(self.rng).unwrap()),
            _ => format!("={:#x}", self.rng.gen_range(0..0x1_0000u32) & !3),
        };
        let announced = self.rng.gen_bool(0.5);
        self.line(format!("LDR r2, {target}"));
        if announced {
            self.line("ANNOUNCE_BEGIN");
        }
        self.line("STR r1, [r2]");
        if announced {
            self.line("ANNOUNCE_END");
        }
    }

    fn function(&mut self, f: usize) {
        let name = if f == 0 { "main".to_string() } else { format!("f{f}") };
        self.out.push_str(&format!("{name}:\n"));
        let framed = f == 0 || self.rng.gen_bool(0.6);
        let saved = ["{lr}", "{r4, lr}", "{r4, r5, lr}"].choose(self.rng).unwrap();
        if framed {
            self.line(format!("PUSH {saved}"));
            self.line("SUB sp, sp, #16");
            // locals start defined so stale frames never leak into results
            self.line("MOV r3, #0");
            for k in (0..16).step_by(4) {
                self.line(format!("STR r3, [sp, #{k}]"));
            }
        }
        for _ in 0..self.rng.gen_range(1..=self.opts.max_stmts) {
            self.stmt(f, framed);
        }
        if framed {
            self.line("ADD sp, sp, #16");
            self.line(format!("POP {}", saved.replace("lr", "pc")));
        } else {
            self.line("BX lr");
        }
    }
}

/// Source text of a random program.
pub fn random_source<R: Rng>(rng: &mut R, opts: &GenOptions) -> String {
    let nfuncs = rng.gen_range(1..=opts.max_functions.max(1));
    let mut g = Gen {
        rng,
        opts,
        nfuncs,
        labels: 0,
        tables: Vec::new(),
        out: String::from("    .text\n    .global main\n"),
    };
    for f in 0..nfuncs {
        g.function(f);
    }
    let mut tables = std::mem::take(&mut g.tables);
    tables.sort_unstable();
    let mut out = g.out;
    if !tables.is_empty() {
        out.push_str("    .data\n");
        for t in tables {
            out.push_str(&format!("tbl{t}:\n    .word f{t}\n"));
        }
    }
    if opts.wild_stores {
        out.push_str("    .section .proconda\ncell:\n    .word 0\n");
    }
    out
}

/// Two scalar arguments in a small range around zero.
pub fn random_input<R: Rng>(rng: &mut R, name: impl Into<String>) -> TestInput {
    TestInput::new(name)
        .with_scalar(rng.gen_range(-30..=30))
        .with_scalar(rng.gen_range(-30..=30))
}

/// Runs `p` twice, one step at a time, and lists every violation of the
/// protection invariants:
///
/// * a store lands on a page that is not writable, other than an announced
///   store into `.proconda`;
/// * a completed run leaves an announce bracket open;
/// * the two runs differ in any way.
pub fn audit_run(
    p: &Program,
    input: &TestInput,
    layout: &MemoryLayout,
    mode: AnnounceMode,
    budget: u64,
) -> Result<Vec<String>, MachineError> {
    let once = || -> Result<_, MachineError> {
        let mut m = Machine::new(p, layout, CostModel::default(), mode, input)?.with_trace(TraceOptions {
            record_all_stores: true,
            ..TraceOptions::default()
        });
        let initial = m.state().memory.clone();
        let mut violations = Vec::new();
        let end = loop {
            if m.state().steps >= budget {
                return Err(MachineError::StepBudget(budget));
            }
            let depth = m.state().announce_depth;
            let seen = m.trace().writes.len();
            let r = m.step();
            for w in &m.trace().writes[seen..] {
                let writable = initial.permissions(w.address).is_some_and(|p| p.writable);
                let announced = depth > 0 && layout.in_proconda(w.address);
                if !writable && !announced {
                    violations.push(format!("store to read-only {:#x} by {}", w.address, w.wio));
                }
            }
            if r != StepResult::Continue {
                break r;
            }
        };
        if matches!(end, StepResult::Exit(_)) && m.state().announce_depth != 0 {
            violations.push(format!("exit with announce depth {}", m.state().announce_depth));
        }
        let (state, trace) = m.into_parts();
        // pages that were never writable hold exactly what they held at load
        for (addr, perms) in initial.mapped_pages() {
            if perms.writable || layout.in_proconda(addr) {
                continue;
            }
            for a in addr..addr + layout.page_size {
                if initial.read_u8(a) != state.memory.read_u8(a) {
                    violations.push(format!("byte {a:#x} of a read-only page changed"));
                }
            }
        }
        Ok((end, state, trace, violations))
    };
    let first = once()?;
    let second = once()?;
    let mut violations = first.3.clone();
    if (&first.0, &first.1, &first.2) != (&second.0, &second.1, &second.2) {
        violations.push("two runs differ".to_string());
    }
    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_program;
    use crate::machine::{AnnounceMode, CostModel, Machine, MemoryLayout};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_programs_parse_and_terminate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for wild in [false, true] {
            let opts = GenOptions {
                wild_stores: wild,
                ..GenOptions::default()
            };
            for i in 0..200 {
                let src = random_source(&mut rng, &opts);
                let p = parse_program(&src).unwrap_or_else(|e| panic!("{e}\n{src}"));
                let input = random_input(&mut rng, format!("{i}"));
                let mut m = Machine::new(
                    &p,
                    &MemoryLayout::default(),
                    CostModel::default(),
                    AnnounceMode::SimulatedSyscall,
                    &input,
                )
                .unwrap();
                m.run(100_000).unwrap_or_else(|e| panic!("{e}\n{src}"));
            }
        }
    }

    #[test]
    fn audit_flags_a_forged_write() {
        let layout = MemoryLayout::default();
        let clean = parse_program(
            "main:\n LDR r1, =c\n ANNOUNCE_BEGIN\n STR r0, [r1]\n ANNOUNCE_END\n SVC #0\n .section .proconda\nc:\n .word 0\n",
        )
        .unwrap();
        let input = TestInput::new("t");
        assert!(audit_run(&clean, &input, &layout, AnnounceMode::SimulatedSyscall, 100).unwrap().is_empty());
        let open = parse_program("main:\n ANNOUNCE_BEGIN\n SVC #0\n").unwrap();
        let v = audit_run(&open, &input, &layout, AnnounceMode::SimulatedSyscall, 100).unwrap();
        assert_eq!(v, ["exit with announce depth 1"]);
    }
}
