//! Static identification of control data.
//!
//! Every instruction whose target comes from a register or memory is a
//! control-flow site. For each consumed register the analysis walks the
//! def-use chain backwards inside the function. Loads of the form
//! `LDR rX, [rX, #k]` dereference and the walk continues past them; the first
//! other definition is the load site whose address is the control data.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::asm::{
    CodeLocation, FunctionBody, Instruction, Literal, Mnemonic, Operand, Program, Register,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlowKind {
    FallThrough,
    HardCodedTarget,
    DataDependentTarget,
}

pub fn classify_instruction(i: &Instruction) -> FlowKind {
    use Mnemonic::*;
    match i.mnemonic {
        B | Beq | Bne | Blt | Bge | Bl => FlowKind::HardCodedTarget,
        Blx if i.label().is_some() => FlowKind::HardCodedTarget,
        Bx | Blx => FlowKind::DataDependentTarget,
        // a literal pool constant is fixed at link time
        Ldr if i.writes_pc() && i.literal().is_some() => FlowKind::HardCodedTarget,
        _ if i.writes_pc() => FlowKind::DataDependentTarget,
        _ => FlowKind::FallThrough,
    }
}

/// What a control-flow site takes its target from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Consumed {
    Register { register: Register },
    /// `POP {.., pc}`: `position` in the register list, `sp_offset` of the
    /// slot from `sp` before the pop.
    StackSlot {
        register: Register,
        position: usize,
        sp_offset: i32,
    },
    Memory { base: Register, offset: i32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlFlowSite {
    pub loc: CodeLocation,
    pub instruction: String,
    pub consumed: Vec<Consumed>,
}

/// Where the address of a load site comes from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseExpr {
    /// `sp + sp_offset` at the load site; `entry_offset` is the same address
    /// relative to `sp` on function entry, when the frame is statically known.
    Stack {
        sp_offset: i32,
        entry_offset: Option<i32>,
    },
    Data { label: String, offset: i32 },
    Absolute { address: u32 },
    Indirect { base: Register, offset: i32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadKind {
    /// The load site reads the control data itself.
    Memory,
    /// The load site computes the address; the first dereference reads it.
    AddressOf,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LoadSite {
    pub loc: CodeLocation,
    pub target_register: Register,
    pub kind: LoadKind,
    pub base: BaseExpr,
    /// For `AddressOf` sites, the dereference that reads the control data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deref_at: Option<CodeLocation>,
    /// For stack slots, the `PUSH` of the same function that fills the slot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_store: Option<CodeLocation>,
}

impl LoadSite {
    /// The instruction whose load event carries the control-data address.
    pub fn watch_loc(&self) -> &CodeLocation {
        self.deref_at.as_ref().unwrap_or(&self.loc)
    }

    /// Stable identifier, `loc:reg`.
    pub fn slot_id(&self) -> String {
        format!("{}:{}", self.loc, self.target_register)
    }

    /// True for a slot filled by the function's own prologue and consumed as
    /// a return address.
    pub fn is_return_slot(&self) -> bool {
        self.frame_store.is_some()
            && matches!(self.target_register, Register::PC | Register::LR)
            && self.kind == LoadKind::Memory
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Chain {
    pub site: CodeLocation,
    pub register: Register,
    pub load_site: CodeLocation,
    /// Defining instructions from the load site to the consumer, inclusive.
    pub path: Vec<CodeLocation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnresolvedReason {
    /// Value lives only in a register, like `lr` on entry or after a call.
    RegisterResident,
    /// Value comes from the caller or a callee.
    CrossFunction,
    /// Value is an immediate or computed address never dereferenced.
    Constant,
    /// No path from the function entry reaches the site.
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnresolvedSite {
    pub site: CodeLocation,
    pub register: Register,
    pub reason: UnresolvedReason,
    /// Instruction where the walk stopped, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<CodeLocation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ControlDataReport {
    pub sites: Vec<ControlFlowSite>,
    pub load_sites: Vec<LoadSite>,
    pub chains: Vec<Chain>,
    pub unresolved: Vec<UnresolvedSite>,
}

impl ControlDataReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn load_site(&self, slot_id: &str) -> Option<&LoadSite> {
        self.load_sites.iter().find(|l| l.slot_id() == slot_id)
    }
}

/// Intra-procedural successors of instruction `i`.
pub fn successors(f: &FunctionBody, i: usize) -> Vec<usize> {
    let ins = &f.instructions[i];
    let mut out = Vec::new();
    if ins.mnemonic.is_local_branch() {
        if let Some(t) = ins.label().and_then(|l| f.local_index(l)) {
            out.push(t);
        }
    }
    if !ins.is_unconditional_transfer() && i + 1 < f.instructions.len() {
        out.push(i + 1);
    }
    out
}

fn predecessors(f: &FunctionBody) -> Vec<Vec<usize>> {
    let mut preds = vec![Vec::new(); f.instructions.len()];
    for i in 0..f.instructions.len() {
        for s in successors(f, i) {
            preds[s].push(i);
        }
    }
    preds
}

fn sp_effect(ins: &Instruction) -> Option<Option<i32>> {
    use Mnemonic::*;
    let sp = Register::SP;
    match ins.mnemonic {
        Push => Some(Some(-4 * ins.reg_list()?.len() as i32)),
        Pop => Some(Some(4 * ins.reg_list()?.len() as i32)),
        Add | Sub if ins.reg(0) == Some(sp) => {
            let k = match (ins.reg(1), ins.operands.get(2)) {
                (Some(r), Some(Operand::Imm(k))) if r == sp => Some(*k),
                _ => None,
            };
            Some(k.map(|k| if ins.mnemonic == Add { k } else { -k }))
        }
        Ldr | Ldrb | Str | Strb => match ins.mem() {
            Some(m) if m.post_index && m.base == sp => Some(Some(m.offset)),
            _ if ins.reg(0) == Some(sp) && matches!(ins.mnemonic, Ldr | Ldrb) => Some(None),
            _ => None,
        },
        Mov if ins.reg(0) == Some(sp) => Some(None),
        _ => None,
    }
}

/// `sp - sp_at_entry` before each instruction, where statically known.
pub fn sp_deltas(f: &FunctionBody) -> Vec<Option<i32>> {
    let n = f.instructions.len();
    let mut delta: Vec<Option<Option<i32>>> = vec![None; n];
    if n == 0 {
        return Vec::new();
    }
    delta[0] = Some(Some(0));
    let mut work = VecDeque::from([0usize]);
    while let Some(i) = work.pop_front() {
        let d = delta[i].flatten();
        let out = match sp_effect(&f.instructions[i]) {
            None => d,
            Some(e) => d.zip(e).map(|(a, b)| a + b),
        };
        for s in successors(f, i) {
            let merged = match delta[s] {
                None => Some(out),
                Some(prev) if prev == out => continue,
                Some(_) => Some(None),
            };
            if delta[s] != merged {
                delta[s] = merged;
                work.push_back(s);
            }
        }
    }
    delta.into_iter().map(Option::flatten).collect()
}

struct FnContext<'a> {
    f: &'a FunctionBody,
    preds: Vec<Vec<usize>>,
    deltas: Vec<Option<i32>>,
}

impl<'a> FnContext<'a> {
    fn new(f: &'a FunctionBody) -> Self {
        FnContext {
            f,
            preds: predecessors(f),
            deltas: sp_deltas(f),
        }
    }

    fn stack(&self, at: usize, sp_offset: i32) -> BaseExpr {
        BaseExpr::Stack {
            sp_offset,
            entry_offset: self.deltas[at].map(|d| d + sp_offset),
        }
    }

    /// Describes `base + offset` as used by instruction `at`.
    fn base_expr(&self, at: usize, base: Register, offset: i32) -> BaseExpr {
        if base == Register::SP {
            return self.stack(at, offset);
        }
        let indirect = BaseExpr::Indirect { base, offset };
        // follow a single reaching definition of the base register
        let mut i = at;
        loop {
            let preds = &self.preds[i];
            if preds.len() != 1 {
                return indirect;
            }
            i = preds[0];
            let ins = &self.f.instructions[i];
            if !defines(ins, base) {
                continue;
            }
            return match ins.mnemonic {
                Mnemonic::Ldr => match ins.literal() {
                    Some(Literal::Label(l)) => BaseExpr::Data {
                        label: l.clone(),
                        offset,
                    },
                    Some(Literal::Imm(v)) => BaseExpr::Absolute {
                        address: (*v as u32).wrapping_add(offset as u32),
                    },
                    None => indirect,
                },
                Mnemonic::Add | Mnemonic::Sub => match (ins.reg(1), ins.operands.get(2)) {
                    (Some(Register::SP), Some(Operand::Imm(k))) => {
                        let k = if ins.mnemonic == Mnemonic::Add { *k } else { -k };
                        match (self.deltas[i], self.deltas[at]) {
                            (Some(di), Some(da)) => self.stack(at, di + k - da + offset),
                            _ => indirect,
                        }
                    }
                    _ => indirect,
                },
                _ => indirect,
            };
        }
    }

    /// Matching prologue store for a stack slot at `entry_offset`.
    fn frame_store(&self, entry_offset: i32) -> Option<CodeLocation> {
        self.f.instructions.iter().enumerate().find_map(|(i, ins)| {
            let list = ins.reg_list().filter(|_| ins.mnemonic == Mnemonic::Push)?;
            let d = self.deltas[i]?;
            let start = d - 4 * list.len() as i32;
            (0..list.len())
                .any(|j| start + 4 * j as i32 == entry_offset)
                .then(|| self.f.location(i))
        })
    }

    fn pop_slot(&self, at: usize, reg: Register) -> LoadSite {
        let ins = &self.f.instructions[at];
        let pos = ins.reg_list().unwrap().iter().position(|r| *r == reg).unwrap();
        let base = self.stack(at, 4 * pos as i32);
        let frame_store = match &base {
            BaseExpr::Stack {
                entry_offset: Some(e),
                ..
            } => self.frame_store(*e),
            _ => None,
        };
        LoadSite {
            loc: self.f.location(at),
            target_register: reg,
            kind: LoadKind::Memory,
            base,
            deref_at: None,
            frame_store,
        }
    }
}

/// True when `ins` assigns register `r`.
fn defines(ins: &Instruction, r: Register) -> bool {
    use Mnemonic::*;
    match ins.mnemonic {
        Mov | Add | Sub | Ldr | Ldrb => {
            ins.reg(0) == Some(r) || ins.mem().is_some_and(|m| m.post_index && m.base == r)
        }
        Str | Strb => ins.mem().is_some_and(|m| m.post_index && m.base == r),
        Pop => ins.reg_list().is_some_and(|l| l.contains(&r)),
        Bl | Blx => call_clobbers(r),
        _ => false,
    }
}

fn call_clobbers(r: Register) -> bool {
    r == Register::LR || r.index() <= 3 || r == Register::R12
}

fn find_sites(f: &FunctionBody) -> Vec<ControlFlowSite> {
    let mut out = Vec::new();
    for (i, ins) in f.instructions.iter().enumerate() {
        if classify_instruction(ins) != FlowKind::DataDependentTarget {
            continue;
        }
        let consumed = match ins.mnemonic {
            Mnemonic::Bx | Mnemonic::Blx => vec![Consumed::Register {
                register: ins.reg(0).unwrap(),
            }],
            Mnemonic::Pop => {
                let list = ins.reg_list().unwrap();
                let pos = list.iter().position(|r| *r == Register::PC).unwrap();
                vec![Consumed::StackSlot {
                    register: Register::PC,
                    position: pos,
                    sp_offset: 4 * pos as i32,
                }]
            }
            Mnemonic::Ldr | Mnemonic::Ldrb => {
                let m = ins.mem().unwrap();
                vec![Consumed::Memory {
                    base: m.base,
                    offset: if m.post_index { 0 } else { m.offset },
                }]
            }
            _ => ins.operands[1..]
                .iter()
                .filter_map(|o| match o {
                    Operand::Reg(r) if *r != Register::PC => Some(Consumed::Register { register: *r }),
                    _ => None,
                })
                .collect(),
        };
        out.push(ControlFlowSite {
            loc: f.location(i),
            instruction: ins.to_string(),
            consumed,
        });
    }
    out
}

/// Every data-dependent control transfer, in program order.
pub fn find_control_flow_sites(p: &Program) -> Vec<ControlFlowSite> {
    let mut v: Vec<_> = p.functions.iter().flat_map(find_sites).collect();
    v.sort_by(|a, b| a.loc.cmp(&b.loc));
    v
}

/// Outcome of a backward walk from one consumed register.
#[derive(Debug, Default)]
pub struct TraceResult {
    pub load_sites: Vec<LoadSite>,
    pub chains: Vec<Chain>,
    pub unresolved: Vec<UnresolvedSite>,
}

#[derive(Clone)]
struct WalkState {
    /// Looking for the definition reaching instruction `at`.
    at: usize,
    reg: Register,
    /// Dereference seen so far, nearest the load site last.
    first_link: Option<usize>,
    path: Vec<usize>,
}

fn walk(cx: &FnContext, site: usize, reg: Register, out: &mut TraceResult) {
    let f = cx.f;
    let site_loc = f.location(site);
    let mut visited = BTreeSet::new();
    let mut work = VecDeque::from([WalkState {
        at: site,
        reg,
        first_link: None,
        path: vec![site],
    }]);
    let unresolved = |reason, at: Option<usize>, out: &mut TraceResult| {
        out.unresolved.push(UnresolvedSite {
            site: site_loc.clone(),
            register: reg,
            reason,
            at: at.map(|i| f.location(i)),
        });
    };
    let chain = |path: &[usize], load: usize| Chain {
        site: site_loc.clone(),
        register: reg,
        load_site: f.location(load),
        path: path.iter().rev().map(|i| f.location(*i)).collect(),
    };

    while let Some(st) = work.pop_front() {
        if !visited.insert((st.at, st.reg, st.first_link.is_some())) {
            continue;
        }
        if st.reg == Register::SP || st.reg == Register::PC {
            unresolved(UnresolvedReason::Constant, Some(st.at), out);
            continue;
        }
        if st.at == 0 {
            let reason = if st.reg == Register::LR {
                UnresolvedReason::RegisterResident
            } else {
                UnresolvedReason::CrossFunction
            };
            unresolved(reason, None, out);
        } else if cx.preds[st.at].is_empty() {
            unresolved(UnresolvedReason::Unreachable, Some(st.at), out);
        }
        for &p in &cx.preds[st.at] {
            let ins = &f.instructions[p];
            let mut next = st.clone();
            next.at = p;
            if !defines(ins, st.reg) {
                work.push_back(next);
                continue;
            }
            next.path.push(p);
            let linked = st.first_link.is_some();
            let found = |kind, base, out: &mut TraceResult, path: &[usize]| {
                let deref_at = match kind {
                    LoadKind::AddressOf => st.first_link.map(|i| f.location(i)),
                    LoadKind::Memory => None,
                };
                out.load_sites.push(LoadSite {
                    loc: f.location(p),
                    target_register: st.reg,
                    kind,
                    base,
                    deref_at,
                    frame_store: None,
                });
                out.chains.push(chain(path, p));
            };
            let post_update = ins
                .mem()
                .is_some_and(|m| m.post_index && m.base == st.reg);
            match ins.mnemonic {
                _ if post_update => work.push_back(next),
                Mnemonic::Bl | Mnemonic::Blx => {
                    let reason = if st.reg == Register::LR {
                        UnresolvedReason::RegisterResident
                    } else {
                        UnresolvedReason::CrossFunction
                    };
                    unresolved(reason, Some(p), out);
                }
                Mnemonic::Pop => {
                    let ls = cx.pop_slot(p, st.reg);
                    out.load_sites.push(ls);
                    out.chains.push(chain(&next.path, p));
                }
                Mnemonic::Ldr | Mnemonic::Ldrb => match (ins.literal(), ins.mem()) {
                    (Some(lit), _) => {
                        if !linked {
                            unresolved(UnresolvedReason::Constant, Some(p), out);
                            continue;
                        }
                        let base = match lit {
                            Literal::Label(l) => BaseExpr::Data {
                                label: l.clone(),
                                offset: 0,
                            },
                            Literal::Imm(v) => BaseExpr::Absolute { address: *v as u32 },
                        };
                        found(LoadKind::AddressOf, base, out, &next.path);
                    }
                    (None, Some(m)) if m.base == st.reg => {
                        // dereference link: keep walking the same register
                        next.first_link = Some(p);
                        work.push_back(next);
                    }
                    (None, Some(m)) => {
                        let base = cx.base_expr(p, m.base, m.offset);
                        found(LoadKind::Memory, base, out, &next.path);
                    }
                    (None, None) => unreachable!("LDR without a source operand"),
                },
                Mnemonic::Mov => match &ins.operands[1] {
                    Operand::Reg(Register::SP) if linked => {
                        found(LoadKind::AddressOf, cx.stack(p, 0), out, &next.path)
                    }
                    Operand::Reg(s) if *s != Register::SP && *s != Register::PC => {
                        next.reg = *s;
                        work.push_back(next);
                    }
                    _ => unresolved(UnresolvedReason::Constant, Some(p), out),
                },
                Mnemonic::Add | Mnemonic::Sub => {
                    let rn = ins.reg(1).unwrap();
                    match (&ins.operands[2], rn) {
                        (Operand::Imm(k), Register::SP) => {
                            if linked {
                                let k = if ins.mnemonic == Mnemonic::Add { *k } else { -k };
                                found(LoadKind::AddressOf, cx.stack(p, k), out, &next.path);
                            } else {
                                unresolved(UnresolvedReason::Constant, Some(p), out);
                            }
                        }
                        (op, _) => {
                            let mut srcs = vec![rn];
                            if let Operand::Reg(r) = op {
                                srcs.push(*r);
                            }
                            let srcs: Vec<_> =
                                srcs.into_iter().filter(|r| *r != Register::PC).collect();
                            if srcs.is_empty() {
                                unresolved(UnresolvedReason::Constant, Some(p), out);
                            }
                            for s in srcs {
                                let mut n = next.clone();
                                n.reg = s;
                                work.push_back(n);
                            }
                        }
                    }
                }
                _ => unreachable!("{} does not define registers", ins.mnemonic),
            }
        }
    }
}

/// Traces every register consumed by `site` back to its load sites.
pub fn trace_base_address(p: &Program, site: &ControlFlowSite) -> TraceResult {
    let mut out = TraceResult::default();
    let Some(f) = p.function(&site.loc.function) else {
        return out;
    };
    let cx = FnContext::new(f);
    let at = site.loc.index();
    let ins = &f.instructions[at];
    for c in &site.consumed {
        match c {
            Consumed::Register { register } => walk(&cx, at, *register, &mut out),
            Consumed::StackSlot { register, .. } => {
                out.load_sites.push(cx.pop_slot(at, *register));
                out.chains.push(Chain {
                    site: site.loc.clone(),
                    register: *register,
                    load_site: site.loc.clone(),
                    path: vec![site.loc.clone()],
                });
            }
            Consumed::Memory { base, offset } => {
                out.load_sites.push(LoadSite {
                    loc: site.loc.clone(),
                    target_register: ins.reg(0).unwrap(),
                    kind: LoadKind::Memory,
                    base: cx.base_expr(at, *base, *offset),
                    deref_at: None,
                    frame_store: None,
                });
                out.chains.push(Chain {
                    site: site.loc.clone(),
                    register: ins.reg(0).unwrap(),
                    load_site: site.loc.clone(),
                    path: vec![site.loc.clone()],
                });
            }
        }
    }
    out
}

/// Runs the whole static phase over `p`.
pub fn identify_control_data(p: &Program) -> ControlDataReport {
    let sites = find_control_flow_sites(p);
    let mut load_sites = BTreeSet::new();
    let mut chains = BTreeSet::new();
    let mut unresolved = BTreeSet::new();
    for site in &sites {
        let t = trace_base_address(p, site);
        load_sites.extend(t.load_sites);
        chains.extend(t.chains);
        unresolved.extend(t.unresolved);
    }
    // one entry per (loc, register); keep the first dereference seen
    let mut by_key: BTreeMap<(CodeLocation, Register), LoadSite> = BTreeMap::new();
    for ls in load_sites {
        by_key
            .entry((ls.loc.clone(), ls.target_register))
            .or_insert(ls);
    }
    ControlDataReport {
        sites,
        load_sites: by_key.into_values().collect(),
        chains: chains.into_iter().collect(),
        unresolved: unresolved.into_iter().collect(),
    }
}
