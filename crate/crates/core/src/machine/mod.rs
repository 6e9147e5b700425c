//! Deterministic interpreter for the assembly dialect.
//!
//! Memory is paged with per-page permissions. Stores into the protected
//! region succeed only while the announce depth is positive. Watchpoints and
//! optional full store/load tracing make the machine usable as a slicing
//! backend.

mod blocks;
mod memory;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{
    CodeLocation, DataItem, DataWord, Instruction, Literal, MemOperand, Mnemonic, Operand, Program,
    Register, INSTRUCTION_SIZE,
};
use crate::inputs::TestInput;

pub use blocks::{coverage_fraction, leaders, BlockMap, Coverage};
pub use memory::{page_ceil, page_floor, Memory, PagePermissions, PAGE_SIZE};

/// Label of the protected word holding the offset from the stack region to
/// its shadow copy. The loader fills it in.
pub const SHADOW_LABEL: &str = "__pcd_shadow";

pub const DEFAULT_STEP_BUDGET: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("layout overflow: {0}")]
    Overflow(String),
    #[error("step budget of {0} instructions exceeded")]
    StepBudget(u64),
}

/// Address-space layout. `code_base` and `stack_base` may sit inside their
/// page; every region itself spans whole pages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryLayout {
    pub page_size: u32,
    pub code_base: u32,
    pub code_pages: u32,
    pub data_base: u32,
    pub data_pages: u32,
    /// Initial `sp`. The stack region ends at the page holding it.
    pub stack_base: u32,
    pub stack_limit: u32,
    pub proconda_base: u32,
    pub proconda_pages: u32,
    pub input_base: u32,
    pub input_pages: u32,
}

impl Default for MemoryLayout {
    fn default() -> Self {
        MemoryLayout {
            page_size: PAGE_SIZE,
            code_base: 0x10A8,
            code_pages: 3,
            data_base: 0x5000,
            data_pages: 1,
            stack_base: 0x7FB0,
            stack_limit: 0x6000,
            proconda_base: 0x8000,
            proconda_pages: 3,
            input_base: 0x2_0000,
            input_pages: 4,
        }
    }
}

impl MemoryLayout {
    pub fn code_region(&self) -> (u32, u32) {
        let s = page_floor(self.code_base);
        (s, s + self.code_pages * PAGE_SIZE)
    }

    pub fn data_region(&self) -> (u32, u32) {
        (self.data_base, self.data_base + self.data_pages * PAGE_SIZE)
    }

    pub fn stack_region(&self) -> (u32, u32) {
        (self.stack_limit, page_ceil(self.stack_base))
    }

    pub fn proconda_region(&self) -> (u32, u32) {
        (
            self.proconda_base,
            self.proconda_base + self.proconda_pages * PAGE_SIZE,
        )
    }

    pub fn input_region(&self) -> (u32, u32) {
        (self.input_base, self.input_base + self.input_pages * PAGE_SIZE)
    }

    pub fn in_proconda(&self, addr: u32) -> bool {
        let (s, e) = self.proconda_region();
        (s..e).contains(&addr)
    }

    /// The shadow stack mirrors the whole stack region at the top of the
    /// protected region. Returns `shadow - stack` or `None` when the
    /// protected region cannot hold the mirror plus one page of fixed slots.
    pub fn shadow_delta(&self) -> Option<u32> {
        let (ss, se) = self.stack_region();
        let (ps, pe) = self.proconda_region();
        let size = se - ss;
        if pe - ps < size + PAGE_SIZE {
            return None;
        }
        Some((pe - size).wrapping_sub(ss))
    }

    /// Bytes of the protected region usable for fixed slots.
    pub fn fixed_slot_capacity(&self) -> u32 {
        let (ps, pe) = self.proconda_region();
        match self.shadow_delta() {
            Some(d) => self.stack_region().0.wrapping_add(d) - ps,
            None => pe - ps,
        }
    }

    pub fn validate(&self) -> Result<(), MachineError> {
        let bad = |m: String| Err(MachineError::Layout(m));
        if self.page_size != PAGE_SIZE {
            return bad(format!("page size must be {PAGE_SIZE}"));
        }
        if self.code_pages == 0 || self.data_pages == 0 || self.proconda_pages == 0 {
            return bad("code, data and proconda regions need at least one page".into());
        }
        if !self.code_base.is_multiple_of(INSTRUCTION_SIZE) {
            return bad("code_base must be 4-aligned".into());
        }
        if !self.stack_base.is_multiple_of(4) || self.stack_base <= self.stack_limit {
            return bad("stack_base must be 4-aligned and above stack_limit".into());
        }
        for (name, v) in [
            ("data_base", self.data_base),
            ("stack_limit", self.stack_limit),
            ("proconda_base", self.proconda_base),
            ("input_base", self.input_base),
        ] {
            if v % PAGE_SIZE != 0 {
                return bad(format!("{name} {v:#x} is not page-aligned"));
            }
        }
        let regions = [
            ("code", self.code_region()),
            ("data", self.data_region()),
            ("stack", self.stack_region()),
            ("proconda", self.proconda_region()),
            ("input", self.input_region()),
        ];
        for (i, (a, (s1, e1))) in regions.iter().enumerate() {
            if *s1 == 0 {
                return bad(format!("{a} region may not start at address 0"));
            }
            for (b, (s2, e2)) in &regions[i + 1..] {
                if s1 < e2 && s2 < e1 {
                    return bad(format!("{a} and {b} regions overlap"));
                }
            }
        }
        Ok(())
    }
}

/// Cycle cost of each instruction class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub per_instruction: u64,
    pub announce_cost_syscall: u64,
    pub announce_cost_nop: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            per_instruction: 1,
            announce_cost_syscall: 6450,
            announce_cost_nop: 1,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), String> {
        if self.announce_cost_nop < 1 || self.announce_cost_syscall < self.announce_cost_nop {
            return Err("announce costs must satisfy syscall >= nop >= 1".into());
        }
        // a nop-mode announce is a plain NOP, so both must cost the same
        if self.per_instruction != self.announce_cost_nop {
            return Err("announce_cost_nop must equal per_instruction".into());
        }
        Ok(())
    }

    pub fn announce_cost(&self, mode: AnnounceMode) -> u64 {
        match mode {
            AnnounceMode::SimulatedSyscall => self.announce_cost_syscall,
            AnnounceMode::NopBaseline => self.announce_cost_nop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum AnnounceMode {
    #[default]
    #[serde(rename = "syscall")]
    SimulatedSyscall,
    #[serde(rename = "nop")]
    NopBaseline,
}

impl FromStr for AnnounceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "syscall" => Ok(AnnounceMode::SimulatedSyscall),
            "nop" => Ok(AnnounceMode::NopBaseline),
            _ => Err(format!("unknown announce mode `{s}` (expected syscall or nop)")),
        }
    }
}

impl fmt::Display for AnnounceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnnounceMode::SimulatedSyscall => "syscall",
            AnnounceMode::NopBaseline => "nop",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrapKind {
    ProtectedWrite,
    InvalidFetch,
    StackOverflow,
    IllegalInstruction,
    /// Any other access to unmapped memory or against page permissions.
    AccessViolation,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrapInfo {
    pub kind: TrapKind,
    pub wio: CodeLocation,
    pub address: u32,
}

impl fmt::Display for TrapInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "TRAP={:?} WIO={} ADDR={:#010x}",
            self.kind, self.wio, self.address
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Watchpoint {
    pub address: u32,
    pub width: u32,
}

impl Watchpoint {
    pub fn new(address: u32, width: u32) -> Watchpoint {
        assert!(width == 1 || width == 4, "watchpoint width must be 1 or 4");
        Watchpoint { address, width }
    }

    fn overlaps(&self, addr: u32, width: u32) -> bool {
        let (a, b) = (self.address as u64, addr as u64);
        a < b + width as u64 && b < a + self.width as u64
    }
}

/// A store observed by the tracer. `seq` orders it against other accesses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteEvent {
    pub seq: u64,
    pub wio: CodeLocation,
    pub address: u32,
    pub width: u32,
    pub value: u32,
}

impl fmt::Display for WriteEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "WIO={} ADDR={:#010x} W={} VAL={:#0w$x}",
            self.wio,
            self.address,
            self.width,
            self.value,
            w = 2 + 2 * self.width as usize
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadEvent {
    pub seq: u64,
    pub loc: CodeLocation,
    pub dest: Register,
    pub address: u32,
    pub width: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceOptions {
    pub watchpoints: Vec<Watchpoint>,
    pub record_all_stores: bool,
    pub record_loads: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub writes: Vec<WriteEvent>,
    pub loads: Vec<LoadEvent>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Flags {
    pub n: bool,
    pub z: bool,
    pub c: bool,
    pub v: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineState {
    pub regs: [u32; Register::COUNT],
    pub flags: Flags,
    pub memory: Memory,
    pub announce_depth: u32,
    pub cycles: u64,
    pub steps: u64,
    pub announces: u64,
    pub coverage: Coverage,
    pub halted: bool,
    pub exit_value: Option<i32>,
    /// Values emitted with `SVC #1`.
    pub output: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepResult {
    Continue,
    Exit(i32),
    Trap(TrapInfo),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunEnd {
    Exit(i32),
    Trap(TrapInfo),
}

/// Addresses of every function and data label.
#[derive(Debug, Clone)]
struct AddressMap {
    fn_addrs: Vec<u32>,
    fn_lens: Vec<u32>,
    labels: HashMap<String, u32>,
}

impl AddressMap {
    fn new(p: &Program, layout: &MemoryLayout) -> Result<AddressMap, MachineError> {
        let mut labels = HashMap::new();
        let mut fn_addrs = Vec::new();
        let mut fn_lens = Vec::new();
        let mut at = layout.code_base;
        for f in &p.functions {
            fn_addrs.push(at);
            fn_lens.push(f.instructions.len() as u32);
            labels.insert(f.label.clone(), at);
            at += f.byte_len();
        }
        if at > layout.code_region().1 {
            return Err(MachineError::Overflow(format!(
                "code needs {} bytes past {:#x}",
                at - layout.code_base,
                layout.code_base
            )));
        }
        for (items, (start, end), name) in [
            (&p.data, layout.data_region(), "data"),
            (&p.proconda, layout.proconda_region(), "proconda"),
        ] {
            let mut at = start;
            for item in items {
                labels.insert(item.label.clone(), at);
                at += item.byte_len();
            }
            if at > end {
                return Err(MachineError::Overflow(format!("{name} section too large")));
            }
        }
        Ok(AddressMap {
            fn_addrs,
            fn_lens,
            labels,
        })
    }

    fn decode(&self, pc: u32) -> Option<(usize, usize)> {
        let i = self.fn_addrs.partition_point(|a| *a <= pc).checked_sub(1)?;
        let off = pc - self.fn_addrs[i];
        if !off.is_multiple_of(INSTRUCTION_SIZE) || off / INSTRUCTION_SIZE >= self.fn_lens[i] {
            return None;
        }
        Some((i, (off / INSTRUCTION_SIZE) as usize))
    }
}

enum Flow {
    Next,
    Jump(u32),
    Exit(i32),
}

/// One simulated execution of a program.
pub struct Machine<'p> {
    program: &'p Program,
    layout: MemoryLayout,
    cost: CostModel,
    mode: AnnounceMode,
    addrs: AddressMap,
    blocks: BlockMap,
    state: MachineState,
    trace_opts: TraceOptions,
    trace: Trace,
    seq: u64,
    current: (usize, usize),
    last: Option<(usize, usize)>,
}

impl<'p> Machine<'p> {
    /// Loads `program` with `input` under `layout`.
    pub fn new(
        program: &'p Program,
        layout: &MemoryLayout,
        cost: CostModel,
        mode: AnnounceMode,
        input: &TestInput,
    ) -> Result<Machine<'p>, MachineError> {
        layout.validate()?;
        let addrs = AddressMap::new(program, layout)?;
        let mut memory = Memory::default();
        let (cs, ce) = layout.code_region();
        memory.map(cs, ce, PagePermissions::RX);
        let (ds, de) = layout.data_region();
        memory.map(ds, de, PagePermissions::RW);
        let (ss, se) = layout.stack_region();
        memory.map(ss, se, PagePermissions::RW);
        let (ps, pe) = layout.proconda_region();
        // without a protected section the region is ordinary memory
        let pperm = if program.has_proconda_section() {
            PagePermissions::R
        } else {
            PagePermissions::RW
        };
        memory.map(ps, pe, pperm);
        let (is, ie) = layout.input_region();
        memory.map(is, ie, PagePermissions::RW);

        let word = |w: &DataWord| match w {
            DataWord::Int(v) => *v as u32,
            DataWord::Label(l) => addrs.labels[l],
        };
        let place = |items: &[DataItem], start: u32, memory: &mut Memory| {
            let mut at = start;
            for item in items {
                for w in &item.words {
                    memory.write_unchecked(at, 4, word(w));
                    at += 4;
                }
            }
        };
        place(&program.data, ds, &mut memory);
        place(&program.proconda, ps, &mut memory);
        if let Some(a) = addrs.labels.get(SHADOW_LABEL) {
            if program.proconda.iter().any(|d| d.label == SHADOW_LABEL) {
                let delta = layout.shadow_delta().ok_or_else(|| {
                    MachineError::Overflow("protected region too small for the shadow stack".into())
                })?;
                memory.write_unchecked(*a, 4, delta);
            }
        }

        let mut regs = [0u32; Register::COUNT];
        let args = input.buffers.len() + input.scalars.len();
        if args > 4 {
            return Err(MachineError::Overflow(format!(
                "{args} arguments, at most 4 fit in r0-r3"
            )));
        }
        let mut at = is;
        for (i, b) in input.buffers.iter().enumerate() {
            let need = b.data.len() as u32 + 1;
            if at + need > ie {
                return Err(MachineError::Overflow(format!(
                    "input buffer `{}` does not fit the input region",
                    b.role
                )));
            }
            memory.write_bytes_unchecked(at, &b.data);
            regs[i] = at;
            at = (at + need + 3) & !3;
        }
        for (i, v) in input.scalars.iter().enumerate() {
            regs[input.buffers.len() + i] = *v as u32;
        }
        regs[Register::SP.index()] = layout.stack_base;
        regs[Register::PC.index()] = addrs
            .labels
            .get(&program.entry)
            .copied()
            .unwrap_or(0);

        Ok(Machine {
            program,
            layout: layout.clone(),
            cost,
            mode,
            blocks: BlockMap::new(program),
            addrs,
            state: MachineState {
                regs,
                flags: Flags::default(),
                memory,
                announce_depth: 0,
                cycles: 0,
                steps: 0,
                announces: 0,
                coverage: Coverage::new(),
                halted: false,
                exit_value: None,
                output: Vec::new(),
            },
            trace_opts: TraceOptions::default(),
            trace: Trace::default(),
            seq: 0,
            current: (0, 0),
            last: None,
        })
    }

    pub fn with_trace(mut self, opts: TraceOptions) -> Machine<'p> {
        self.trace_opts = opts;
        self
    }

    pub fn state(&self) -> &MachineState {
        &self.state
    }

    pub fn into_parts(self) -> (MachineState, Trace) {
        (self.state, self.trace)
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn layout(&self) -> &MemoryLayout {
        &self.layout
    }

    pub fn pc(&self) -> u32 {
        self.state.regs[Register::PC.index()]
    }

    pub fn reg(&self, r: Register) -> u32 {
        self.state.regs[r.index()]
    }

    pub fn label_address(&self, label: &str) -> Option<u32> {
        self.addrs.labels.get(label).copied()
    }

    pub fn address_of(&self, loc: &CodeLocation) -> Option<u32> {
        let fi = self.program.function_index(&loc.function)?;
        Some(self.addrs.fn_addrs[fi] + loc.offset)
    }

    pub fn location_of(&self, addr: u32) -> Option<CodeLocation> {
        let (fi, idx) = self.addrs.decode(addr)?;
        Some(self.program.functions[fi].location(idx))
    }

    fn loc(&self, at: (usize, usize)) -> CodeLocation {
        self.program.functions[at.0].location(at.1)
    }

    fn trap(&self, kind: TrapKind, address: u32) -> TrapInfo {
        TrapInfo {
            kind,
            wio: self.loc(self.current),
            address,
        }
    }

    fn operand(&self, op: &Operand) -> u32 {
        match op {
            Operand::Reg(r) => self.read_reg(*r),
            Operand::Imm(v) => *v as u32,
            _ => 0,
        }
    }

    fn read_reg(&self, r: Register) -> u32 {
        if r == Register::PC {
            self.pc().wrapping_add(8)
        } else {
            self.state.regs[r.index()]
        }
    }

    /// Writes a register; writing `pc` is a jump and writing `sp` below the
    /// stack limit traps.
    fn write_reg(&mut self, r: Register, v: u32) -> Result<Flow, TrapInfo> {
        if r == Register::PC {
            return Ok(Flow::Jump(v));
        }
        self.state.regs[r.index()] = v;
        if r == Register::SP && v < self.layout.stack_limit {
            return Err(self.trap(TrapKind::StackOverflow, v));
        }
        Ok(Flow::Next)
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn load(&mut self, dest: Register, addr: u32, width: u32) -> Result<u32, TrapInfo> {
        let seq = self.next_seq();
        for i in 0..width {
            let a = addr.wrapping_add(i);
            if !self.state.memory.permissions(a).is_some_and(|p| p.readable) {
                return Err(self.trap(TrapKind::AccessViolation, a));
            }
        }
        if self.trace_opts.record_loads {
            self.trace.loads.push(LoadEvent {
                seq,
                loc: self.loc(self.current),
                dest,
                address: addr,
                width,
            });
        }
        Ok(self.state.memory.read(addr, width).unwrap_or(0))
    }

    fn check_store(&self, addr: u32, width: u32) -> Result<(), TrapInfo> {
        for i in 0..width {
            let a = addr.wrapping_add(i);
            let writable = match self.state.memory.permissions(a) {
                Some(p) => p.writable || (self.layout.in_proconda(a) && self.state.announce_depth > 0),
                None => false,
            };
            if !writable {
                let kind = if self.layout.in_proconda(a) && self.state.announce_depth == 0 {
                    TrapKind::ProtectedWrite
                } else {
                    TrapKind::AccessViolation
                };
                return Err(self.trap(kind, a));
            }
        }
        Ok(())
    }

    /// Caller has already run [`Machine::check_store`].
    fn commit_store(&mut self, addr: u32, width: u32, value: u32) {
        let seq = self.next_seq();
        let value = if width == 1 { value & 0xff } else { value };
        self.state.memory.write_unchecked(addr, width, value);
        let watched = self.trace_opts.record_all_stores
            || self
                .trace_opts
                .watchpoints
                .iter()
                .any(|w| w.overlaps(addr, width));
        if watched {
            self.trace.writes.push(WriteEvent {
                seq,
                wio: self.loc(self.current),
                address: addr,
                width,
                value,
            });
        }
    }

    fn target(&self, label: &str) -> u32 {
        let f = &self.program.functions[self.current.0];
        match f.local_index(label) {
            Some(i) => self.addrs.fn_addrs[self.current.0] + i as u32 * INSTRUCTION_SIZE,
            None => self.addrs.labels.get(label).copied().unwrap_or(0),
        }
    }

    fn address(&self, m: &MemOperand) -> u32 {
        let base = self.read_reg(m.base);
        if m.post_index {
            base
        } else {
            base.wrapping_add(m.offset as u32)
        }
    }

    fn writeback(&mut self, m: &MemOperand) -> Result<Flow, TrapInfo> {
        if m.post_index {
            let v = self.read_reg(m.base).wrapping_add(m.offset as u32);
            self.write_reg(m.base, v)
        } else {
            Ok(Flow::Next)
        }
    }

    fn condition(&self, m: Mnemonic) -> bool {
        let f = self.state.flags;
        match m {
            Mnemonic::Beq => f.z,
            Mnemonic::Bne => !f.z,
            Mnemonic::Blt => f.n != f.v,
            Mnemonic::Bge => f.n == f.v,
            _ => true,
        }
    }

    fn execute(&mut self, ins: &Instruction) -> Result<Flow, TrapInfo> {
        use Mnemonic::*;
        let next = self.pc().wrapping_add(INSTRUCTION_SIZE);
        let ops = &ins.operands;
        match ins.mnemonic {
            Mov => {
                let v = self.operand(&ops[1]);
                self.write_reg(ins.reg(0).unwrap(), v)
            }
            Add | Sub => {
                let a = self.operand(&ops[1]);
                let b = self.operand(&ops[2]);
                let v = if ins.mnemonic == Add {
                    a.wrapping_add(b)
                } else {
                    a.wrapping_sub(b)
                };
                self.write_reg(ins.reg(0).unwrap(), v)
            }
            Cmp => {
                let a = self.operand(&ops[0]);
                let b = self.operand(&ops[1]);
                let r = a.wrapping_sub(b);
                self.state.flags = Flags {
                    n: (r as i32) < 0,
                    z: r == 0,
                    c: a >= b,
                    v: ((a ^ b) & (a ^ r)) >> 31 == 1,
                };
                Ok(Flow::Next)
            }
            Ldr | Ldrb => {
                let rd = ins.reg(0).unwrap();
                if let Some(lit) = ins.literal() {
                    let v = match lit {
                        Literal::Imm(v) => *v as u32,
                        Literal::Label(l) => self.addrs.labels.get(l).copied().unwrap_or(0),
                    };
                    return self.write_reg(rd, v);
                }
                let m = ins.mem().unwrap();
                let addr = self.address(&m);
                let width = if ins.mnemonic == Ldr { 4 } else { 1 };
                let v = self.load(rd, addr, width)?;
                if let Flow::Jump(_) = self.writeback(&m)? {
                    unreachable!("pc is never a post-index base");
                }
                self.write_reg(rd, v)
            }
            Str | Strb => {
                let m = ins.mem().unwrap();
                let addr = self.address(&m);
                let width = if ins.mnemonic == Str { 4 } else { 1 };
                let v = self.read_reg(ins.reg(0).unwrap());
                self.check_store(addr, width)?;
                self.commit_store(addr, width, v);
                self.writeback(&m)
            }
            Push => {
                let list = ins.reg_list().unwrap();
                let sp = self.read_reg(Register::SP);
                let start = sp.wrapping_sub(4 * list.len() as u32);
                if start < self.layout.stack_limit || start > sp {
                    return Err(self.trap(TrapKind::StackOverflow, start));
                }
                self.check_store(start, 4 * list.len() as u32)?;
                for (i, r) in list.iter().enumerate() {
                    let v = self.read_reg(*r);
                    self.commit_store(start + 4 * i as u32, 4, v);
                }
                self.write_reg(Register::SP, start)
            }
            Pop => {
                let list = ins.reg_list().unwrap().to_vec();
                let sp = self.read_reg(Register::SP);
                let mut vals = Vec::with_capacity(list.len());
                for (i, r) in list.iter().enumerate() {
                    vals.push(self.load(*r, sp.wrapping_add(4 * i as u32), 4)?);
                }
                self.write_reg(Register::SP, sp.wrapping_add(4 * list.len() as u32))?;
                let mut flow = Flow::Next;
                for (r, v) in list.iter().zip(vals) {
                    if let Flow::Jump(t) = self.write_reg(*r, v)? {
                        flow = Flow::Jump(t);
                    }
                }
                Ok(flow)
            }
            B | Beq | Bne | Blt | Bge => {
                if self.condition(ins.mnemonic) {
                    Ok(Flow::Jump(self.target(ins.label().unwrap())))
                } else {
                    Ok(Flow::Next)
                }
            }
            Bl => {
                self.state.regs[Register::LR.index()] = next;
                Ok(Flow::Jump(self.target(ins.label().unwrap())))
            }
            Bx => Ok(Flow::Jump(self.read_reg(ins.reg(0).unwrap()))),
            Blx => {
                let t = match ins.reg(0) {
                    Some(r) => self.read_reg(r),
                    None => self.target(ins.label().unwrap()),
                };
                self.state.regs[Register::LR.index()] = next;
                Ok(Flow::Jump(t))
            }
            Svc => match ops.first() {
                Some(Operand::Imm(0)) => Ok(Flow::Exit(self.state.regs[0] as i32)),
                Some(Operand::Imm(1)) => {
                    self.state.output.push(self.state.regs[0] as i32);
                    Ok(Flow::Next)
                }
                _ => Err(self.trap(TrapKind::IllegalInstruction, self.pc())),
            },
            Nop => Ok(Flow::Next),
            AnnounceBegin => {
                self.state.announce_depth += 1;
                self.state.announces += 1;
                Ok(Flow::Next)
            }
            AnnounceEnd => {
                if self.state.announce_depth == 0 {
                    return Err(self.trap(TrapKind::IllegalInstruction, self.pc()));
                }
                self.state.announce_depth -= 1;
                self.state.announces += 1;
                Ok(Flow::Next)
            }
        }
    }

    fn halt(&mut self, code: i32) -> StepResult {
        self.state.halted = true;
        self.state.exit_value = Some(code);
        StepResult::Exit(code)
    }

    /// Executes one instruction. A trapped instruction leaves memory as it
    /// was and halts the machine.
    pub fn step(&mut self) -> StepResult {
        if self.state.halted {
            return match self.state.exit_value {
                Some(c) => StepResult::Exit(c),
                None => StepResult::Trap(self.trap(TrapKind::IllegalInstruction, self.pc())),
            };
        }
        let pc = self.pc();
        if pc == 0 {
            let code = self.state.regs[0] as i32;
            return self.halt(code);
        }
        let executable = self
            .state
            .memory
            .permissions(pc)
            .is_some_and(|p| p.executable);
        let Some(at) = self.addrs.decode(pc).filter(|_| executable) else {
            self.state.halted = true;
            let wio = self.last.map(|l| self.loc(l)).unwrap_or_else(|| {
                CodeLocation::new(self.program.entry.clone(), 0)
            });
            return StepResult::Trap(TrapInfo {
                kind: TrapKind::InvalidFetch,
                wio,
                address: pc,
            });
        };
        self.current = at;
        if let Some(b) = self.blocks.leader_block(at.0, at.1) {
            self.state.coverage.insert((at.0, b));
        }
        let program = self.program;
        let ins = &program.functions[at.0].instructions[at.1];
        let result = self.execute(ins);
        self.last = Some(at);
        match result {
            Err(t) => {
                self.state.halted = true;
                StepResult::Trap(t)
            }
            Ok(flow) => {
                self.state.steps += 1;
                self.state.cycles += match ins.mnemonic {
                    Mnemonic::AnnounceBegin | Mnemonic::AnnounceEnd => {
                        self.cost.announce_cost(self.mode)
                    }
                    _ => self.cost.per_instruction,
                };
                match flow {
                    Flow::Next => {
                        self.state.regs[Register::PC.index()] = pc.wrapping_add(INSTRUCTION_SIZE);
                        StepResult::Continue
                    }
                    Flow::Jump(t) => {
                        self.state.regs[Register::PC.index()] = t;
                        StepResult::Continue
                    }
                    Flow::Exit(c) => self.halt(c),
                }
            }
        }
    }

    /// Runs to exit or trap within `budget` instructions.
    pub fn run(&mut self, budget: u64) -> Result<RunEnd, MachineError> {
        loop {
            if self.state.steps >= budget && !self.state.halted && self.pc() != 0 {
                return Err(MachineError::StepBudget(budget));
            }
            match self.step() {
                StepResult::Continue => {}
                StepResult::Exit(c) => return Ok(RunEnd::Exit(c)),
                StepResult::Trap(t) => return Ok(RunEnd::Trap(t)),
            }
        }
    }
}

/// Result of [`run_with_watchpoints`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatchRun {
    pub events: Vec<WriteEvent>,
    pub end: RunEnd,
    pub coverage: Coverage,
}

pub fn run_with_watchpoints(
    p: &Program,
    layout: &MemoryLayout,
    input: &TestInput,
    watchpoints: &[Watchpoint],
    budget: u64,
) -> Result<WatchRun, MachineError> {
    let mut m = Machine::new(
        p,
        layout,
        CostModel::default(),
        AnnounceMode::SimulatedSyscall,
        input,
    )?
    .with_trace(TraceOptions {
        watchpoints: watchpoints.to_vec(),
        ..TraceOptions::default()
    });
    let end = m.run(budget)?;
    let (state, trace) = m.into_parts();
    Ok(WatchRun {
        events: trace.writes,
        end,
        coverage: state.coverage,
    })
}
