//! Relocation of control data into the protected region.
//!
//! Return addresses move to a shadow stack that mirrors the ordinary stack
//! inside `.proconda`: the shadow copy of stack address `a` lives at
//! `a + delta`, where `delta` is read from the protected word
//! [`SHADOW_LABEL`]. Prologues store `lr` there inside an announce bracket and
//! leave a hole in the ordinary frame so its layout does not change.
//! Epilogues read it back without announcing.
//!
//! Other control data gets one fixed protected word per base expression.
//! Writers found by slicing are redirected there and bracketed; readers are
//! retargeted.
//!
//! `r12` is the scratch register of all inserted code, so programs that use
//! it cannot be rewritten.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::asm::{
    AsmError, CodeLocation, DataItem, DataWord, FunctionBody, Instruction, LocalLabel, Literal,
    MemOperand, Mnemonic, Operand, Program, Register,
};
use crate::ident::{sp_deltas, BaseExpr, ControlDataReport, LoadKind, LoadSite, UnresolvedReason};
use crate::inputs::TestInput;
use crate::machine::{
    page_ceil, CostModel, Machine, MemoryLayout, RunEnd, SHADOW_LABEL,
};
use crate::slice::DataSourceGraph;

pub use crate::machine::AnnounceMode;

pub const SCRATCH: Register = Register::R12;
pub const SLOT_PREFIX: &str = "__pcd_slot_";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error("data source graph is not finalized")]
    NotFinalized,
    #[error("{0} uses r12, which rewriting reserves as scratch")]
    ReservedRegister(CodeLocation),
    #[error("cannot patch {register} at {site}: {reason:?}")]
    Unpatchable {
        site: CodeLocation,
        register: Register,
        reason: UnresolvedReason,
    },
    #[error("cannot relocate slot {slot}: base address is not static")]
    NonStaticSlot { slot: String },
    #[error("writer {wio} of {slot} is `{instruction}`; only word stores can be redirected")]
    UnsupportedWriter {
        wio: CodeLocation,
        slot: String,
        instruction: String,
    },
    #[error("reader {loc} (`{instruction}`) cannot be retargeted")]
    UnsupportedReader { loc: CodeLocation, instruction: String },
    #[error("unsupported frame in `{function}`: {detail}")]
    UnsupportedFrame { function: String, detail: String },
    #[error("protected region too small: {0}")]
    Capacity(String),
    #[error("{0} would need two different rewrites")]
    Conflict(CodeLocation),
    #[error("program already contains a protected section")]
    AlreadyProtected,
    #[error("rewritten program is invalid: {0}")]
    Invalid(AsmError),
}

/// Where a slot lives after relocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShadowDescriptor {
    /// Shadow copy of the frame word at `frame_offset` from `sp` on entry.
    ShadowStack { frame_offset: i32 },
    Fixed { label: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    ShadowStore,
    ShadowLoad,
    SlotStore,
    SlotLoad,
}

fn as_text<S: Serializer>(v: &[Instruction], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(ToString::to_string))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitOp {
    pub loc: CodeLocation,
    pub role: SplitRole,
    /// True when the replacement carries an announce bracket.
    pub announced: bool,
    #[serde(serialize_with = "as_text")]
    pub replacement: Vec<Instruction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FixedSlot {
    pub label: String,
    pub key: String,
    pub init: DataWord,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct RelocationPlan {
    pub slot_map: BTreeMap<String, ShadowDescriptor>,
    /// Protected word holding the shadow stack offset.
    pub shadow_sp_slot: String,
    pub fixed_slots: Vec<FixedSlot>,
    pub split_ops: Vec<SplitOp>,
}

impl RelocationPlan {
    pub fn is_empty(&self) -> bool {
        self.split_ops.is_empty() && self.fixed_slots.is_empty()
    }

    pub fn announce_pairs(&self) -> usize {
        self.split_ops.iter().filter(|o| o.announced).count()
    }
}

fn reg(r: Register) -> Operand {
    Operand::Reg(r)
}

fn ins(m: Mnemonic, ops: Vec<Operand>) -> Instruction {
    Instruction::new(m, ops)
}

fn lit(label: &str) -> Operand {
    Operand::Literal(Literal::Label(label.to_string()))
}

fn mem(base: Register, offset: i32) -> Operand {
    Operand::Mem(MemOperand::offset(base, offset))
}

fn bracket(announced: bool, store: Instruction) -> Vec<Instruction> {
    if announced {
        vec![
            Instruction::bare(Mnemonic::AnnounceBegin),
            store,
            Instruction::bare(Mnemonic::AnnounceEnd),
        ]
    } else {
        vec![store]
    }
}

/// `r12 = shadow address of the current sp`.
fn shadow_of_sp() -> Vec<Instruction> {
    vec![
        ins(Mnemonic::Ldr, vec![reg(SCRATCH), lit(SHADOW_LABEL)]),
        ins(Mnemonic::Ldr, vec![reg(SCRATCH), mem(SCRATCH, 0)]),
        ins(
            Mnemonic::Add,
            vec![reg(SCRATCH), reg(SCRATCH), reg(Register::SP)],
        ),
    ]
}

fn prologue(others: &[Register], announced: bool) -> Vec<Instruction> {
    let mut v = shadow_of_sp();
    v.extend(bracket(
        announced,
        ins(Mnemonic::Str, vec![reg(Register::LR), mem(SCRATCH, -4)]),
    ));
    v.push(ins(
        Mnemonic::Sub,
        vec![reg(Register::SP), reg(Register::SP), Operand::Imm(4)],
    ));
    if !others.is_empty() {
        v.push(ins(Mnemonic::Push, vec![Operand::RegList(others.to_vec())]));
    }
    v
}

fn epilogue(others: &[Register], target: Register) -> Vec<Instruction> {
    let mut v = Vec::new();
    if !others.is_empty() {
        v.push(ins(Mnemonic::Pop, vec![Operand::RegList(others.to_vec())]));
    }
    v.extend(shadow_of_sp());
    v.push(ins(
        Mnemonic::Add,
        vec![reg(Register::SP), reg(Register::SP), Operand::Imm(4)],
    ));
    v.push(ins(Mnemonic::Ldr, vec![reg(target), mem(SCRATCH, 0)]));
    v
}

fn post_update(m: &MemOperand) -> Option<Instruction> {
    m.post_index.then(|| {
        ins(
            Mnemonic::Add,
            vec![reg(m.base), reg(m.base), Operand::Imm(m.offset)],
        )
    })
}

/// Canonical key of a fixed slot, or `None` when its address is not static.
fn slot_key(ls: &LoadSite) -> Option<String> {
    match &ls.base {
        BaseExpr::Stack {
            entry_offset: Some(e),
            ..
        } => Some(format!("stack:{}:{}", ls.loc.function, e)),
        BaseExpr::Data { label, offset } => Some(format!("data:{label}+{offset}")),
        BaseExpr::Absolute { address } => Some(format!("abs:{address:#x}")),
        _ => None,
    }
}

fn initial_word(p: &Program, base: &BaseExpr) -> DataWord {
    if let BaseExpr::Data { label, offset } = base {
        if *offset >= 0 && offset % 4 == 0 {
            if let Some(w) = p
                .data
                .iter()
                .find(|d| &d.label == label)
                .and_then(|d| d.words.get(*offset as usize / 4))
            {
                return w.clone();
            }
        }
    }
    DataWord::Int(0)
}

struct Planner<'a> {
    p: &'a Program,
    ops: BTreeMap<CodeLocation, SplitOp>,
}

impl Planner<'_> {
    fn add(&mut self, op: SplitOp) -> Result<(), RewriteError> {
        match self.ops.get(&op.loc) {
            Some(prev) if *prev != op => Err(RewriteError::Conflict(op.loc)),
            _ => {
                self.ops.insert(op.loc.clone(), op);
                Ok(())
            }
        }
    }

    fn instruction(&self, loc: &CodeLocation) -> &Instruction {
        self.p.locate(loc).expect("analysis locations resolve")
    }

    fn frame(
        &mut self,
        f: &FunctionBody,
        slot_ids: &BTreeSet<String>,
        graph: &DataSourceGraph,
    ) -> Result<(), RewriteError> {
        let deltas = sp_deltas(f);
        let frame_err = |detail: String| RewriteError::UnsupportedFrame {
            function: f.label.clone(),
            detail,
        };
        for (i, x) in f.instructions.iter().enumerate() {
            let Some(list) = x.reg_list() else { continue };
            let loc = f.location(i);
            match x.mnemonic {
                Mnemonic::Push if list.contains(&Register::LR) => {
                    if deltas[i] != Some(0) {
                        return Err(frame_err(format!("{loc} saves lr below the entry sp")));
                    }
                    let announced = slot_ids.iter().any(|id| {
                        graph.edges.contains(&crate::slice::Edge {
                            from: loc.clone(),
                            to: id.clone(),
                        })
                    });
                    let others: Vec<_> = list.iter().copied().filter(|r| *r != Register::LR).collect();
                    self.add(SplitOp {
                        loc,
                        role: SplitRole::ShadowStore,
                        announced,
                        replacement: prologue(&others, announced),
                    })?;
                }
                Mnemonic::Pop if list.contains(&Register::LR) || list.contains(&Register::PC) => {
                    if list.contains(&Register::LR) && list.contains(&Register::PC) {
                        return Err(frame_err(format!("{loc} pops both lr and pc")));
                    }
                    let target = *list.last().unwrap();
                    let slot = deltas[i].map(|d| d + 4 * (list.len() as i32 - 1));
                    if slot != Some(-4) {
                        return Err(frame_err(format!(
                            "{loc} does not pop the return slot of the frame"
                        )));
                    }
                    let others = &list[..list.len() - 1];
                    self.add(SplitOp {
                        loc,
                        role: SplitRole::ShadowLoad,
                        announced: false,
                        replacement: epilogue(others, target),
                    })?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn reader(&mut self, ls: &LoadSite, label: &str) -> Result<(), RewriteError> {
        let x = self.instruction(&ls.loc).clone();
        let unsupported = || RewriteError::UnsupportedReader {
            loc: ls.loc.clone(),
            instruction: x.to_string(),
        };
        let rt = ls.target_register;
        let replacement = match (ls.kind, x.mnemonic, x.mem()) {
            (LoadKind::Memory, Mnemonic::Ldr | Mnemonic::Ldrb, Some(m)) => {
                let via = if rt == Register::PC { SCRATCH } else { rt };
                let mut v = Vec::new();
                if via == SCRATCH {
                    v.push(ins(Mnemonic::Ldr, vec![reg(SCRATCH), lit(label)]));
                    v.extend(post_update(&m));
                    v.push(ins(x.mnemonic, vec![reg(rt), mem(SCRATCH, 0)]));
                } else {
                    v.push(ins(Mnemonic::Ldr, vec![reg(rt), lit(label)]));
                    v.push(ins(x.mnemonic, vec![reg(rt), mem(rt, 0)]));
                    v.extend(post_update(&m));
                }
                v
            }
            (LoadKind::AddressOf, Mnemonic::Ldr | Mnemonic::Add | Mnemonic::Sub | Mnemonic::Mov, None) => {
                vec![ins(Mnemonic::Ldr, vec![reg(rt), lit(label)])]
            }
            _ => return Err(unsupported()),
        };
        self.add(SplitOp {
            loc: ls.loc.clone(),
            role: SplitRole::SlotLoad,
            announced: false,
            replacement,
        })
    }

    fn writer(&mut self, wio: &CodeLocation, slot: &str, label: &str) -> Result<(), RewriteError> {
        let x = self.instruction(wio).clone();
        let (Mnemonic::Str, Some(rx), Some(m)) = (x.mnemonic, x.reg(0), x.mem()) else {
            return Err(RewriteError::UnsupportedWriter {
                wio: wio.clone(),
                slot: slot.to_string(),
                instruction: x.to_string(),
            });
        };
        let mut v = vec![ins(Mnemonic::Ldr, vec![reg(SCRATCH), lit(label)])];
        v.extend(bracket(true, ins(Mnemonic::Str, vec![reg(rx), mem(SCRATCH, 0)])));
        v.extend(post_update(&m));
        self.add(SplitOp {
            loc: wio.clone(),
            role: SplitRole::SlotStore,
            announced: true,
            replacement: v,
        })
    }
}

/// Decides where every slot goes and how each affected instruction changes.
pub fn plan_relocation(
    p: &Program,
    graph: &DataSourceGraph,
    report: &ControlDataReport,
    layout: &MemoryLayout,
) -> Result<RelocationPlan, RewriteError> {
    if p.has_proconda_section() {
        return Err(RewriteError::AlreadyProtected);
    }
    for u in &report.unresolved {
        if matches!(
            u.reason,
            UnresolvedReason::CrossFunction | UnresolvedReason::Unreachable
        ) {
            return Err(RewriteError::Unpatchable {
                site: u.site.clone(),
                register: u.register,
                reason: u.reason,
            });
        }
    }
    let mut plan = RelocationPlan {
        shadow_sp_slot: SHADOW_LABEL.to_string(),
        ..RelocationPlan::default()
    };
    if report.load_sites.is_empty() {
        return Ok(plan);
    }
    if let Some((loc, _)) = p
        .instructions()
        .find(|(_, i)| i.registers().contains(&SCRATCH))
    {
        return Err(RewriteError::ReservedRegister(loc));
    }

    let mut planner = Planner {
        p,
        ops: BTreeMap::new(),
    };
    let mut frames: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    let mut groups: BTreeMap<String, Vec<&LoadSite>> = BTreeMap::new();
    for ls in &report.load_sites {
        if ls.is_return_slot() {
            let BaseExpr::Stack {
                entry_offset: Some(-4),
                ..
            } = ls.base
            else {
                return Err(RewriteError::UnsupportedFrame {
                    function: ls.loc.function.clone(),
                    detail: format!("{} is not the top word of the frame", ls.slot_id()),
                });
            };
            plan.slot_map.insert(
                ls.slot_id(),
                ShadowDescriptor::ShadowStack { frame_offset: -4 },
            );
            frames
                .entry(ls.loc.function.as_str())
                .or_default()
                .insert(ls.slot_id());
        } else {
            let key = slot_key(ls).ok_or_else(|| RewriteError::NonStaticSlot {
                slot: ls.slot_id(),
            })?;
            groups.entry(key).or_default().push(ls);
        }
    }

    for (fname, ids) in &frames {
        let f = p.function(fname).expect("load site function exists");
        planner.frame(f, ids, graph)?;
    }

    for (k, (key, sites)) in groups.iter().enumerate() {
        let label = format!("{SLOT_PREFIX}{k}");
        plan.fixed_slots.push(FixedSlot {
            label: label.clone(),
            key: key.clone(),
            init: initial_word(p, &sites[0].base),
        });
        for ls in sites {
            plan.slot_map.insert(
                ls.slot_id(),
                ShadowDescriptor::Fixed {
                    label: label.clone(),
                },
            );
            planner.reader(ls, &label)?;
            for wio in graph.writers_of(&ls.slot_id()) {
                planner.writer(wio, &ls.slot_id(), &label)?;
            }
        }
    }

    let fixed_bytes = 4 * (plan.fixed_slots.len() as u32 + 1);
    if fixed_bytes > layout.fixed_slot_capacity() {
        return Err(RewriteError::Capacity(format!(
            "{} fixed slots need {fixed_bytes} bytes",
            plan.fixed_slots.len()
        )));
    }
    if !frames.is_empty() && layout.shadow_delta().is_none() {
        return Err(RewriteError::Capacity(
            "no room to mirror the stack region".into(),
        ));
    }
    plan.split_ops = planner.ops.into_values().collect();
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteReport {
    pub mode: AnnounceMode,
    pub original_count: usize,
    pub rewritten_count: usize,
    pub inserted_instructions: usize,
    pub announce_pairs: usize,
    pub split_ops: usize,
    pub proconda_bytes: u32,
    /// Inserted code plus the page-rounded protected section.
    pub footprint_delta: u32,
    /// Rewritten location of every instruction to the original it came from.
    pub origin: BTreeMap<CodeLocation, CodeLocation>,
}

impl RewriteReport {
    pub fn original_location(&self, loc: &CodeLocation) -> Option<&CodeLocation> {
        self.origin.get(loc)
    }

    pub fn instr_delta_pct(&self) -> f64 {
        if self.original_count == 0 {
            return 0.0;
        }
        100.0 * self.inserted_instructions as f64 / self.original_count as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rewrite report serializes")
    }
}

/// Applies `plan` to `p`. Both modes emit the same code: announce
/// instructions still open the write window in the baseline build, and
/// `mode` only decides what they cost when the build is run.
pub fn instrument(
    p: &Program,
    plan: &RelocationPlan,
    mode: AnnounceMode,
) -> Result<(Program, RewriteReport), RewriteError> {
    let ops: BTreeMap<&CodeLocation, &SplitOp> = plan.split_ops.iter().map(|o| (&o.loc, o)).collect();
    let mut out = p.clone();
    let mut origin = BTreeMap::new();
    for (f, nf) in p.functions.iter().zip(out.functions.iter_mut()) {
        let mut body = Vec::with_capacity(f.instructions.len());
        let mut first = Vec::with_capacity(f.instructions.len());
        for (i, x) in f.instructions.iter().enumerate() {
            let loc = f.location(i);
            first.push(body.len());
            let repl: Vec<Instruction> = match ops.get(&loc) {
                Some(op) => op.replacement.clone(),
                None => vec![x.clone()],
            };
            for r in repl {
                origin.insert(nf.location(body.len()), loc.clone());
                body.push(r);
            }
        }
        nf.instructions = body;
        nf.labels = f
            .labels
            .iter()
            .map(|l| LocalLabel {
                name: l.name.clone(),
                index: first[l.index],
            })
            .collect();
    }
    if !plan.is_empty() {
        out.proconda.push(DataItem {
            label: plan.shadow_sp_slot.clone(),
            words: vec![DataWord::Int(0)],
        });
        for s in &plan.fixed_slots {
            out.proconda.push(DataItem {
                label: s.label.clone(),
                words: vec![s.init.clone()],
            });
        }
    }
    out.validate().map_err(RewriteError::Invalid)?;
    let original_count = p.instruction_count();
    let rewritten_count = out.instruction_count();
    let inserted = rewritten_count - original_count;
    let proconda_bytes: u32 = out.proconda.iter().map(DataItem::byte_len).sum();
    let report = RewriteReport {
        mode,
        original_count,
        rewritten_count,
        inserted_instructions: inserted,
        announce_pairs: plan.announce_pairs(),
        split_ops: plan.split_ops.len(),
        proconda_bytes,
        footprint_delta: 4 * inserted as u32 + page_ceil(proconda_bytes),
        origin,
    };
    Ok((out, report))
}

/// First observable difference between an original and a rewritten run.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct Divergence {
    pub input: String,
    pub observable: String,
    pub original: String,
    pub rewritten: String,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "input `{}`: {} differs (original {}, rewritten {})",
            self.input, self.observable, self.original, self.rewritten
        )
    }
}

fn observe(
    p: &Program,
    layout: &MemoryLayout,
    cost: CostModel,
    mode: AnnounceMode,
    input: &TestInput,
    budget: u64,
) -> (String, String) {
    let mut m = match Machine::new(p, layout, cost, mode, input) {
        Ok(m) => m,
        Err(e) => return (format!("load error: {e}"), String::new()),
    };
    let end = match m.run(budget) {
        Ok(RunEnd::Exit(c)) => format!("exit {c}"),
        Ok(RunEnd::Trap(t)) => t.to_string(),
        Err(e) => e.to_string(),
    };
    (end, format!("{:?}", m.state().output))
}

/// Checks that every benign input exits the same way with the same output
/// channel in both programs. The rewritten program may not trap.
pub fn verify_benign_equivalence(
    original: &Program,
    rewritten: &Program,
    layout: &MemoryLayout,
    cost: CostModel,
    suite: &[TestInput],
    budget: u64,
) -> Result<(), Divergence> {
    for input in suite {
        let (oe, oo) = observe(original, layout, cost, AnnounceMode::SimulatedSyscall, input, budget);
        let (re, ro) = observe(rewritten, layout, cost, AnnounceMode::SimulatedSyscall, input, budget);
        let diverge = |what: &str, a: String, b: String| Divergence {
            input: input.name.clone(),
            observable: what.to_string(),
            original: a,
            rewritten: b,
        };
        if !re.starts_with("exit") || oe != re {
            return Err(diverge("termination", oe, re));
        }
        if oo != ro {
            return Err(diverge("output", oo, ro));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
