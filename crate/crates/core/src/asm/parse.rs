use std::collections::HashMap;

use super::{
    AsmError, DataItem, DataWord, FunctionBody, Instruction, Literal, LocalLabel, MemOperand,
    Mnemonic, Operand, Program, Register,
};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Text,
    Data,
    Proconda,
}

pub(crate) fn parse_u32(s: &str) -> Option<u32> {
    let s = s.trim();
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(hex, 16).ok(),
        None => s.parse().ok(),
    }
}

/// Accepts decimal or hex, signed, in `[-2^31, 2^32)`; values above
/// `i32::MAX` are taken as their 32-bit pattern.
fn parse_imm(s: &str) -> Option<i32> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let magnitude = match body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        Some(hex) => i64::from_str_radix(hex, 16).ok()?,
        None => body.parse::<i64>().ok()?,
    };
    let v = if neg { -magnitude } else { magnitude };
    if v < i32::MIN as i64 || v > u32::MAX as i64 {
        return None;
    }
    Some(v as u32 as i32)
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn is_local_label(name: &str) -> bool {
    name.starts_with(".L")
}

/// Splits on commas that are not nested in `[]` or `{}`.
fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

struct LineParser {
    line: usize,
}

impl LineParser {
    fn err(&self, message: impl Into<String>) -> AsmError {
        AsmError::Syntax {
            line: self.line,
            message: message.into(),
        }
    }

    fn register(&self, s: &str) -> Result<Register, AsmError> {
        s.parse::<Register>().map_err(|e| self.err(e))
    }

    fn immediate(&self, s: &str) -> Result<i32, AsmError> {
        let body = s
            .strip_prefix('#')
            .ok_or_else(|| self.err(format!("expected immediate `#n`, got `{s}`")))?;
        parse_imm(body).ok_or_else(|| self.err(format!("immediate `{s}` does not fit 32 bits")))
    }

    fn operand(&self, s: &str) -> Result<Operand, AsmError> {
        if let Some(inner) = s.strip_prefix('{') {
            let inner = inner
                .strip_suffix('}')
                .ok_or_else(|| self.err(format!("unterminated register list `{s}`")))?;
            let mut regs = inner
                .split(',')
                .map(|r| self.register(r))
                .collect::<Result<Vec<_>, _>>()?;
            regs.sort();
            let before = regs.len();
            regs.dedup();
            if regs.len() != before {
                return Err(self.err(format!("duplicate register in list `{s}`")));
            }
            return Ok(Operand::RegList(regs));
        }
        if let Some(inner) = s.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| self.err(format!("unterminated memory operand `{s}`")))?;
            let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
            let (base, offset) = match parts.as_slice() {
                [b] => (self.register(b)?, 0),
                [b, off] => (self.register(b)?, self.immediate(off)?),
                _ => return Err(self.err(format!("bad memory operand `{s}`"))),
            };
            return Ok(Operand::Mem(MemOperand::offset(base, offset)));
        }
        if s.starts_with('#') {
            return Ok(Operand::Imm(self.immediate(s)?));
        }
        if let Some(lit) = s.strip_prefix('=') {
            if let Some(v) = parse_imm(lit) {
                return Ok(Operand::Literal(Literal::Imm(v)));
            }
            if is_identifier(lit) {
                return Ok(Operand::Literal(Literal::Label(lit.to_string())));
            }
            return Err(self.err(format!("bad literal `{s}`")));
        }
        if let Ok(r) = s.parse::<Register>() {
            return Ok(Operand::Reg(r));
        }
        if is_identifier(s) {
            return Ok(Operand::Label(s.to_string()));
        }
        Err(self.err(format!("cannot parse operand `{s}`")))
    }

    fn instruction(&self, text: &str) -> Result<Instruction, AsmError> {
        let (head, rest) = match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], text[i..].trim()),
            None => (text, ""),
        };
        let mnemonic: Mnemonic = head.parse().map_err(|_| AsmError::UnknownMnemonic {
            line: self.line,
            mnemonic: head.to_string(),
        })?;
        let raw = split_operands(rest);
        let mut operands = Vec::with_capacity(raw.len());
        let mut i = 0;
        while i < raw.len() {
            let op = self.operand(&raw[i])?;
            // `[rN], #imm` is post-indexed addressing.
            if let Operand::Mem(m) = op {
                if m.offset == 0 && !raw[i].contains(',') {
                    if let Some(next) = raw.get(i + 1).filter(|n| n.starts_with('#')) {
                        operands.push(Operand::Mem(MemOperand::post(m.base, self.immediate(next)?)));
                        i += 2;
                        continue;
                    }
                }
            }
            operands.push(op);
            i += 1;
        }
        let ins = Instruction::new(mnemonic, operands);
        ins.check_shape().map_err(|m| self.err(m))?;
        Ok(ins)
    }
}

/// Parses assembly source into a [`Program`] and runs the link step.
pub fn parse_program(text: &str) -> Result<Program, AsmError> {
    let mut program = Program::default();
    let mut entry_set = false;
    let mut section = Section::Text;
    let mut defined: HashMap<String, usize> = HashMap::new();

    for (n, raw_line) in text.lines().enumerate() {
        let p = LineParser { line: n + 1 };
        let mut line = raw_line.split('@').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }

        if let Some(rest) = line.strip_prefix('.').filter(|_| !line.contains(':')) {
            let (name, args) = match rest.find(char::is_whitespace) {
                Some(i) => (&rest[..i], rest[i..].trim()),
                None => (rest, ""),
            };
            match (name, args) {
                ("text", "") => section = Section::Text,
                ("data", "") => section = Section::Data,
                ("section", ".proconda") => section = Section::Proconda,
                ("section", ".text") => section = Section::Text,
                ("section", ".data") => section = Section::Data,
                ("global" | "globl", sym) if is_identifier(sym) => {
                    if !entry_set {
                        program.entry = sym.to_string();
                        entry_set = true;
                    }
                }
                ("word", args) if section != Section::Text => {
                    let items = match section {
                        Section::Data => &mut program.data,
                        _ => &mut program.proconda,
                    };
                    let item = items
                        .last_mut()
                        .ok_or_else(|| p.err(".word before any data label"))?;
                    for w in args.split(',').map(str::trim) {
                        let word = if let Some(v) = parse_imm(w) {
                            DataWord::Int(v)
                        } else if is_identifier(w) {
                            DataWord::Label(w.to_string())
                        } else {
                            return Err(p.err(format!("bad .word value `{w}`")));
                        };
                        item.words.push(word);
                    }
                }
                ("word", _) => return Err(p.err(".word is only valid in a data section")),
                _ => return Err(p.err(format!("unsupported directive `{line}`"))),
            }
            continue;
        }

        if let Some(colon) = line.find(':') {
            let name = line[..colon].trim();
            if !is_identifier(name) {
                return Err(p.err(format!("bad label `{name}`")));
            }
            if let Some(first) = defined.insert(name.to_string(), p.line) {
                return Err(AsmError::DuplicateLabel {
                    label: name.to_string(),
                    first,
                    second: p.line,
                });
            }
            match section {
                Section::Text if is_local_label(name) => {
                    let f = program
                        .functions
                        .last_mut()
                        .ok_or_else(|| p.err(format!("local label `{name}` outside a function")))?;
                    f.labels.push(LocalLabel {
                        name: name.to_string(),
                        index: f.instructions.len(),
                    });
                }
                Section::Text => program.functions.push(FunctionBody::new(name)),
                Section::Data => program.data.push(DataItem {
                    label: name.to_string(),
                    words: Vec::new(),
                }),
                Section::Proconda => program.proconda.push(DataItem {
                    label: name.to_string(),
                    words: Vec::new(),
                }),
            }
            line = line[colon + 1..].trim();
            if line.is_empty() {
                continue;
            }
        }

        if section != Section::Text {
            return Err(p.err("instruction outside the text section"));
        }
        let ins = p.instruction(line)?;
        program
            .functions
            .last_mut()
            .ok_or_else(|| p.err("instruction before any function label"))?
            .instructions
            .push(ins);
    }

    program.validate()?;
    Ok(program)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::CodeLocation;

    #[test]
    fn empty_text_parses_to_empty_program() {
        let p = parse_program("").unwrap();
        assert!(p.functions.is_empty());
        assert_eq!(p.entry, "main");
    }

    #[test]
    fn operands_and_addressing_modes() {
        let p = parse_program(
            "main:\n  LDRB r3, [r1], #1 @ post\n  STR r2, [sp, #-4]\n  LDR r0, =0x10\n  POP {lr, r4}\n  SVC #0\n",
        )
        .unwrap();
        let f = &p.functions[0];
        assert_eq!(f.instructions[0].mem(), Some(MemOperand::post(Register::R1, 1)));
        assert_eq!(f.instructions[1].mem(), Some(MemOperand::offset(Register::SP, -4)));
        assert_eq!(f.instructions[2].literal(), Some(&Literal::Imm(16)));
        assert_eq!(
            f.instructions[3].reg_list().unwrap(),
            &[Register::R4, Register::LR]
        );
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse_program("main:\n  MOV r0, #1\n  FROB r1\n").unwrap_err();
        assert_eq!(
            err,
            AsmError::UnknownMnemonic {
                line: 3,
                mnemonic: "FROB".into()
            }
        );
        let err = parse_program("main:\n  MOV r0, [r1\n").unwrap_err();
        assert!(matches!(err, AsmError::Syntax { line: 2, .. }));
    }

    #[test]
    fn duplicate_labels_name_both_lines() {
        let err = parse_program("main:\n NOP\n.L1:\n NOP\n.L1:\n NOP\n").unwrap_err();
        assert_eq!(
            err,
            AsmError::DuplicateLabel {
                label: ".L1".into(),
                first: 3,
                second: 5
            }
        );
    }

    #[test]
    fn unresolved_labels_fail_link() {
        let err = parse_program("main:\n B .Lnowhere\n").unwrap_err();
        assert!(matches!(err, AsmError::UnresolvedLabel { ref label, .. } if label == ".Lnowhere"));
        let err = parse_program("main:\n LDR r0, =missing\n SVC #0\n").unwrap_err();
        assert!(matches!(err, AsmError::UnresolvedLabel { .. }));
    }

    #[test]
    fn locate_single_nop() {
        let p = parse_program("f:\n NOP\n").unwrap_err();
        // `f` is not the entry; give it one
        assert!(matches!(p, AsmError::MissingEntry(_)));
        let p = parse_program(".global f\nf:\n NOP\n").unwrap();
        assert_eq!(
            p.locate(&CodeLocation::new("f", 0)).unwrap().mnemonic,
            Mnemonic::Nop
        );
    }
}
