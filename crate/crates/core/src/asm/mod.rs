//! Assembly IR for the ARM subset the toolchain understands.
//!
//! Every instruction occupies exactly four bytes, so the byte offset of the
//! instruction at index `k` of a function is `4 * k`. Code locations are
//! always expressed as `function + offset`, never as raw addresses.

mod emit;
mod parse;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use emit::emit_program;
pub use parse::parse_program;

/// Size in bytes of every encoded instruction, pseudo-instructions included.
pub const INSTRUCTION_SIZE: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("label `{label}` defined twice (line {first} and line {second})")]
    DuplicateLabel {
        label: String,
        first: usize,
        second: usize,
    },
    #[error("unresolved label `{label}` referenced from {context}")]
    UnresolvedLabel { label: String, context: String },
    #[error("entry label `{0}` does not name a function")]
    MissingEntry(String),
    #[error("invalid program: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LocateError {
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("offset {offset:#x} is not a multiple of 4")]
    Misaligned { offset: u32 },
    #[error("offset {offset:#x} is past the end of `{function}` ({len} instructions)")]
    OutOfRange {
        function: String,
        offset: u32,
        len: usize,
    },
}

/// One of the sixteen core registers. `sp`, `lr` and `pc` are r13, r14, r15.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Register(u8);

impl Register {
    pub const R0: Register = Register(0);
    pub const R1: Register = Register(1);
    pub const R2: Register = Register(2);
    pub const R3: Register = Register(3);
    pub const R4: Register = Register(4);
    pub const R5: Register = Register(5);
    pub const R11: Register = Register(11);
    pub const R12: Register = Register(12);
    pub const SP: Register = Register(13);
    pub const LR: Register = Register(14);
    pub const PC: Register = Register(15);

    pub const COUNT: usize = 16;

    pub fn new(index: u8) -> Option<Register> {
        (index < 16).then_some(Register(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = Register> {
        (0..16).map(Register)
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            13 => f.write_str("sp"),
            14 => f.write_str("lr"),
            15 => f.write_str("pc"),
            n => write!(f, "r{n}"),
        }
    }
}

impl FromStr for Register {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let reg = match lower.as_str() {
            "sp" => Register::SP,
            "lr" => Register::LR,
            "pc" => Register::PC,
            "ip" => Register::R12,
            "fp" => Register::R11,
            other => other
                .strip_prefix('r')
                .and_then(|n| n.parse::<u8>().ok())
                .and_then(Register::new)
                .ok_or_else(|| format!("unknown register `{s}`"))?,
        };
        Ok(reg)
    }
}

impl Serialize for Register {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Register {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mnemonic {
    Mov,
    Ldr,
    Ldrb,
    Str,
    Strb,
    Push,
    Pop,
    Add,
    Sub,
    Cmp,
    B,
    Beq,
    Bne,
    Blt,
    Bge,
    Bl,
    Bx,
    Blx,
    Svc,
    Nop,
    AnnounceBegin,
    AnnounceEnd,
}

impl Mnemonic {
    pub const ALL: [Mnemonic; 22] = [
        Mnemonic::Mov,
        Mnemonic::Ldr,
        Mnemonic::Ldrb,
        Mnemonic::Str,
        Mnemonic::Strb,
        Mnemonic::Push,
        Mnemonic::Pop,
        Mnemonic::Add,
        Mnemonic::Sub,
        Mnemonic::Cmp,
        Mnemonic::B,
        Mnemonic::Beq,
        Mnemonic::Bne,
        Mnemonic::Blt,
        Mnemonic::Bge,
        Mnemonic::Bl,
        Mnemonic::Bx,
        Mnemonic::Blx,
        Mnemonic::Svc,
        Mnemonic::Nop,
        Mnemonic::AnnounceBegin,
        Mnemonic::AnnounceEnd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mnemonic::Mov => "MOV",
            Mnemonic::Ldr => "LDR",
            Mnemonic::Ldrb => "LDRB",
            Mnemonic::Str => "STR",
            Mnemonic::Strb => "STRB",
            Mnemonic::Push => "PUSH",
            Mnemonic::Pop => "POP",
            Mnemonic::Add => "ADD",
            Mnemonic::Sub => "SUB",
            Mnemonic::Cmp => "CMP",
            Mnemonic::B => "B",
            Mnemonic::Beq => "BEQ",
            Mnemonic::Bne => "BNE",
            Mnemonic::Blt => "BLT",
            Mnemonic::Bge => "BGE",
            Mnemonic::Bl => "BL",
            Mnemonic::Bx => "BX",
            Mnemonic::Blx => "BLX",
            Mnemonic::Svc => "SVC",
            Mnemonic::Nop => "NOP",
            Mnemonic::AnnounceBegin => "ANNOUNCE_BEGIN",
            Mnemonic::AnnounceEnd => "ANNOUNCE_END",
        }
    }

    /// Local branches that carry a label operand (B and the conditional forms).
    pub fn is_local_branch(self) -> bool {
        matches!(
            self,
            Mnemonic::B | Mnemonic::Beq | Mnemonic::Bne | Mnemonic::Blt | Mnemonic::Bge
        )
    }

    pub fn is_conditional(self) -> bool {
        matches!(
            self,
            Mnemonic::Beq | Mnemonic::Bne | Mnemonic::Blt | Mnemonic::Bge
        )
    }

    pub fn is_store(self) -> bool {
        matches!(self, Mnemonic::Str | Mnemonic::Strb | Mnemonic::Push)
    }
}

impl fmt::Display for Mnemonic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mnemonic {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.to_ascii_uppercase();
        Mnemonic::ALL
            .into_iter()
            .find(|m| m.as_str() == upper)
            .ok_or(())
    }
}

/// `[base, #offset]` or, when `post_index` is set, `[base], #offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemOperand {
    pub base: Register,
    pub offset: i32,
    pub post_index: bool,
}

impl MemOperand {
    pub fn offset(base: Register, offset: i32) -> MemOperand {
        MemOperand {
            base,
            offset,
            post_index: false,
        }
    }

    pub fn post(base: Register, offset: i32) -> MemOperand {
        MemOperand {
            base,
            offset,
            post_index: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Literal {
    Label(String),
    Imm(i32),
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Label(l) => write!(f, "={l}"),
            Literal::Imm(v) => write!(f, "={v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Register),
    Imm(i32),
    Label(String),
    Mem(MemOperand),
    Literal(Literal),
    RegList(Vec<Register>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub mnemonic: Mnemonic,
    pub operands: Vec<Operand>,
}

impl Instruction {
    pub fn new(mnemonic: Mnemonic, operands: Vec<Operand>) -> Instruction {
        Instruction { mnemonic, operands }
    }

    pub fn bare(mnemonic: Mnemonic) -> Instruction {
        Instruction::new(mnemonic, Vec::new())
    }

    pub fn encoded_size(&self) -> u32 {
        INSTRUCTION_SIZE
    }

    pub fn reg(&self, i: usize) -> Option<Register> {
        match self.operands.get(i) {
            Some(Operand::Reg(r)) => Some(*r),
            _ => None,
        }
    }

    pub fn mem(&self) -> Option<MemOperand> {
        self.operands.iter().find_map(|o| match o {
            Operand::Mem(m) => Some(*m),
            _ => None,
        })
    }

    pub fn reg_list(&self) -> Option<&[Register]> {
        match self.operands.first() {
            Some(Operand::RegList(l)) => Some(l),
            _ => None,
        }
    }

    pub fn label(&self) -> Option<&str> {
        match self.operands.first() {
            Some(Operand::Label(l)) => Some(l),
            _ => None,
        }
    }

    pub fn literal(&self) -> Option<&Literal> {
        self.operands.iter().find_map(|o| match o {
            Operand::Literal(l) => Some(l),
            _ => None,
        })
    }

    /// True when the instruction loads or computes a new `pc` value.
    pub fn writes_pc(&self) -> bool {
        match self.mnemonic {
            Mnemonic::Mov | Mnemonic::Add | Mnemonic::Sub | Mnemonic::Ldr => {
                self.reg(0) == Some(Register::PC)
            }
            Mnemonic::Pop => self
                .reg_list()
                .is_some_and(|l| l.contains(&Register::PC)),
            _ => false,
        }
    }

    /// Control never falls through to the next instruction.
    pub fn is_unconditional_transfer(&self) -> bool {
        self.writes_pc()
            || matches!(self.mnemonic, Mnemonic::B | Mnemonic::Bx)
            || (self.mnemonic == Mnemonic::Svc && self.operands == [Operand::Imm(0)])
    }

    /// Every register this instruction names, in any role.
    pub fn registers(&self) -> BTreeSet<Register> {
        let mut out = BTreeSet::new();
        for op in &self.operands {
            match op {
                Operand::Reg(r) => {
                    out.insert(*r);
                }
                Operand::Mem(m) => {
                    out.insert(m.base);
                }
                Operand::RegList(l) => out.extend(l.iter().copied()),
                _ => {}
            }
        }
        out
    }

    /// Checks the operand shape against the mnemonic.
    pub fn check_shape(&self) -> Result<(), String> {
        use Mnemonic::*;
        use Operand as O;
        let ops = self.operands.as_slice();
        let reg_or_imm = |o: &Operand| matches!(o, O::Reg(_) | O::Imm(_));
        let ok = match self.mnemonic {
            Mov => matches!(ops, [O::Reg(_), x] if reg_or_imm(x)),
            Ldr => match ops {
                [O::Reg(_), O::Literal(_)] => true,
                [O::Reg(rd), O::Mem(m)] => !(m.post_index && m.base == *rd),
                _ => false,
            },
            Ldrb | Str | Strb => match ops {
                [O::Reg(rd), O::Mem(m)] => {
                    !(m.post_index && m.base == *rd)
                        && !(self.mnemonic != Str && *rd == Register::PC)
                }
                _ => false,
            },
            Push | Pop => match ops {
                [O::RegList(l)] => {
                    !l.is_empty()
                        && l.windows(2).all(|w| w[0] < w[1])
                        && !l.contains(&Register::SP)
                        && !(self.mnemonic == Push && l.contains(&Register::PC))
                }
                _ => false,
            },
            Add | Sub => matches!(ops, [O::Reg(_), O::Reg(_), x] if reg_or_imm(x)),
            Cmp => matches!(ops, [O::Reg(_), x] if reg_or_imm(x)),
            B | Beq | Bne | Blt | Bge | Bl => matches!(ops, [O::Label(_)]),
            Bx => matches!(ops, [O::Reg(_)]),
            Blx => matches!(ops, [O::Reg(_)] | [O::Label(_)]),
            Svc => matches!(ops, [O::Imm(_)]),
            Nop | AnnounceBegin | AnnounceEnd => ops.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("malformed operands for {}: `{}`", self.mnemonic, self))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LocalLabel {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FunctionBody {
    pub label: String,
    pub instructions: Vec<Instruction>,
    /// Local (`.L`-prefixed) labels, ordered by instruction index.
    pub labels: Vec<LocalLabel>,
}

impl FunctionBody {
    pub fn new(label: impl Into<String>) -> FunctionBody {
        FunctionBody {
            label: label.into(),
            instructions: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn local_index(&self, name: &str) -> Option<usize> {
        self.labels.iter().find(|l| l.name == name).map(|l| l.index)
    }

    pub fn byte_len(&self) -> u32 {
        self.instructions.len() as u32 * INSTRUCTION_SIZE
    }

    pub fn location(&self, index: usize) -> CodeLocation {
        CodeLocation::new(self.label.clone(), index as u32 * INSTRUCTION_SIZE)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataWord {
    Int(i32),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DataItem {
    pub label: String,
    pub words: Vec<DataWord>,
}

impl DataItem {
    pub fn byte_len(&self) -> u32 {
        self.words.len() as u32 * 4
    }
}

/// A write-instruction origin or any other instruction identity: the
/// enclosing function label plus a byte offset from it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CodeLocation {
    pub function: String,
    pub offset: u32,
}

impl CodeLocation {
    pub fn new(function: impl Into<String>, offset: u32) -> CodeLocation {
        CodeLocation {
            function: function.into(),
            offset,
        }
    }

    pub fn index(&self) -> usize {
        (self.offset / INSTRUCTION_SIZE) as usize
    }
}

impl fmt::Display for CodeLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{:#x}", self.function, self.offset)
    }
}

impl FromStr for CodeLocation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (function, off) = s
            .rsplit_once('+')
            .ok_or_else(|| format!("expected `function+0xOFF`, got `{s}`"))?;
        let offset = parse::parse_u32(off).ok_or_else(|| format!("bad offset in `{s}`"))?;
        if function.is_empty() {
            return Err(format!("empty function name in `{s}`"));
        }
        Ok(CodeLocation::new(function, offset))
    }
}

impl Serialize for CodeLocation {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CodeLocation {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Program {
    pub entry: String,
    pub functions: Vec<FunctionBody>,
    pub data: Vec<DataItem>,
    /// Contents of the protected `.proconda` section; empty for ordinary programs.
    pub proconda: Vec<DataItem>,
}

impl Default for Program {
    fn default() -> Self {
        Program {
            entry: "main".to_string(),
            functions: Vec::new(),
            data: Vec::new(),
            proconda: Vec::new(),
        }
    }
}

impl Program {
    pub fn function(&self, label: &str) -> Option<&FunctionBody> {
        self.functions.iter().find(|f| f.label == label)
    }

    pub fn function_index(&self, label: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.label == label)
    }

    pub fn instruction_count(&self) -> usize {
        self.functions.iter().map(|f| f.instructions.len()).sum()
    }

    pub fn has_proconda_section(&self) -> bool {
        !self.proconda.is_empty()
    }

    /// All instructions with their code locations, in program order.
    pub fn instructions(&self) -> impl Iterator<Item = (CodeLocation, &Instruction)> {
        self.functions.iter().flat_map(|f| {
            f.instructions
                .iter()
                .enumerate()
                .map(move |(i, ins)| (f.location(i), ins))
        })
    }

    pub fn locate(&self, loc: &CodeLocation) -> Result<&Instruction, LocateError> {
        let f = self
            .function(&loc.function)
            .ok_or_else(|| LocateError::UnknownFunction(loc.function.clone()))?;
        if !loc.offset.is_multiple_of(INSTRUCTION_SIZE) {
            return Err(LocateError::Misaligned { offset: loc.offset });
        }
        f.instructions
            .get(loc.index())
            .ok_or_else(|| LocateError::OutOfRange {
                function: loc.function.clone(),
                offset: loc.offset,
                len: f.instructions.len(),
            })
    }

    fn global_label_kind(&self, name: &str) -> Option<&'static str> {
        if self.function(name).is_some() {
            Some("function")
        } else if self.data.iter().any(|d| d.label == name) {
            Some("data")
        } else if self.proconda.iter().any(|d| d.label == name) {
            Some("proconda")
        } else {
            None
        }
    }

    /// Link-step checks: unique labels, operand shapes, and resolution of
    /// every label reference. An empty program is valid without an entry.
    pub fn validate(&self) -> Result<(), AsmError> {
        let mut seen = BTreeSet::new();
        let all_labels = self
            .functions
            .iter()
            .flat_map(|f| {
                std::iter::once(f.label.as_str()).chain(f.labels.iter().map(|l| l.name.as_str()))
            })
            .chain(self.data.iter().map(|d| d.label.as_str()))
            .chain(self.proconda.iter().map(|d| d.label.as_str()));
        for l in all_labels {
            if !seen.insert(l) {
                return Err(AsmError::Invalid(format!("label `{l}` defined twice")));
            }
        }
        if !self.functions.is_empty() && self.function(&self.entry).is_none() {
            return Err(AsmError::MissingEntry(self.entry.clone()));
        }
        for f in &self.functions {
            if f.instructions.is_empty() {
                return Err(AsmError::Invalid(format!("function `{}` is empty", f.label)));
            }
            for l in &f.labels {
                if l.index >= f.instructions.len() {
                    return Err(AsmError::Invalid(format!(
                        "label `{}` in `{}` does not precede an instruction",
                        l.name, f.label
                    )));
                }
            }
            if f.labels.windows(2).any(|w| w[0].index > w[1].index) {
                return Err(AsmError::Invalid(format!(
                    "local labels of `{}` are not in instruction order",
                    f.label
                )));
            }
            for (i, ins) in f.instructions.iter().enumerate() {
                let context = f.location(i).to_string();
                ins.check_shape()
                    .map_err(|m| AsmError::Invalid(format!("{context}: {m}")))?;
                let unresolved = |label: &str| AsmError::UnresolvedLabel {
                    label: label.to_string(),
                    context: context.clone(),
                };
                for op in &ins.operands {
                    match op {
                        Operand::Label(l) => {
                            let resolves = match ins.mnemonic {
                                m if m.is_local_branch() => {
                                    f.local_index(l).is_some() || self.function(l).is_some()
                                }
                                _ => self.function(l).is_some(),
                            };
                            if !resolves {
                                return Err(unresolved(l));
                            }
                        }
                        Operand::Literal(Literal::Label(l)) if self.global_label_kind(l).is_none() => {
                            return Err(unresolved(l));
                        }
                        _ => {}
                    }
                }
            }
        }
        for item in self.data.iter().chain(&self.proconda) {
            for w in &item.words {
                if let DataWord::Label(l) = w {
                    if self.global_label_kind(l).is_none() {
                        return Err(AsmError::UnresolvedLabel {
                            label: l.clone(),
                            context: format!("data item `{}`", item.label),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic.as_str())?;
        let mut first = true;
        for op in &self.operands {
            f.write_str(if first { " " } else { ", " })?;
            first = false;
            match op {
                Operand::Reg(r) => write!(f, "{r}")?,
                Operand::Imm(v) => write!(f, "#{v}")?,
                Operand::Label(l) => f.write_str(l)?,
                Operand::Literal(l) => write!(f, "{l}")?,
                Operand::Mem(m) if m.post_index => write!(f, "[{}], #{}", m.base, m.offset)?,
                Operand::Mem(m) if m.offset == 0 => write!(f, "[{}]", m.base)?,
                Operand::Mem(m) => write!(f, "[{}, #{}]", m.base, m.offset)?,
                Operand::RegList(l) => {
                    f.write_str("{")?;
                    for (i, r) in l.iter().enumerate() {
                        if i > 0 {
                            f.write_str(", ")?;
                        }
                        write!(f, "{r}")?;
                    }
                    f.write_str("}")?;
                }
            }
        }
        Ok(())
    }
}
