//! Basic-block leaders for coverage accounting.

use std::collections::BTreeSet;

use crate::asm::{FunctionBody, Instruction, Mnemonic, Operand, Program};

/// A block starts at a function entry, at every local branch target, and
/// right after every instruction that can transfer control.
fn ends_block(ins: &Instruction) -> bool {
    ins.mnemonic.is_local_branch()
        || matches!(ins.mnemonic, Mnemonic::Bl | Mnemonic::Bx | Mnemonic::Blx)
        || ins.writes_pc()
        || (ins.mnemonic == Mnemonic::Svc && ins.operands == [Operand::Imm(0)])
}

pub fn leaders(f: &FunctionBody) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    if f.instructions.is_empty() {
        return out;
    }
    out.insert(0);
    for (i, ins) in f.instructions.iter().enumerate() {
        if ins.mnemonic.is_local_branch() {
            if let Some(t) = ins.label().and_then(|l| f.local_index(l)) {
                out.insert(t);
            }
        }
        if ends_block(ins) && i + 1 < f.instructions.len() {
            out.insert(i + 1);
        }
    }
    out
}

/// Maps `(function, instruction)` to the id of the block it leads, if any.
#[derive(Debug, Clone)]
pub struct BlockMap {
    block_of: Vec<Vec<Option<usize>>>,
    total: usize,
}

impl BlockMap {
    pub fn new(p: &Program) -> BlockMap {
        let mut block_of = Vec::with_capacity(p.functions.len());
        let mut total = 0;
        for f in &p.functions {
            let ls = leaders(f);
            let mut row = vec![None; f.instructions.len()];
            for (b, i) in ls.iter().enumerate() {
                row[*i] = Some(b);
            }
            total += ls.len();
            block_of.push(row);
        }
        BlockMap { block_of, total }
    }

    pub fn leader_block(&self, function: usize, index: usize) -> Option<usize> {
        self.block_of.get(function)?.get(index).copied().flatten()
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Set of `(function index, block index)` pairs reached by a run.
pub type Coverage = BTreeSet<(usize, usize)>;

/// Fraction of all basic blocks reached by the union of `runs`. A program
/// without blocks is fully covered.
pub fn coverage_fraction<'a>(p: &Program, runs: impl IntoIterator<Item = &'a Coverage>) -> f64 {
    let map = BlockMap::new(p);
    let union: Coverage = runs.into_iter().flatten().copied().collect();
    if map.total() == 0 {
        return 1.0;
    }
    union.len() as f64 / map.total() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_program;

    #[test]
    fn straight_line_is_one_block() {
        let p = parse_program("main:\n MOV r0, #1\n ADD r0, r0, #2\n SVC #0\n").unwrap();
        assert_eq!(BlockMap::new(&p).total(), 1);
        let cov: Coverage = [(0, 0)].into_iter().collect();
        assert_eq!(coverage_fraction(&p, [&cov]), 1.0);
    }

    #[test]
    fn loop_and_exit_blocks() {
        let p = parse_program(
            "main:\n MOV r1, #3\n.Ltop:\n SUB r1, r1, #1\n CMP r1, #0\n BNE .Ltop\n SVC #0\n",
        )
        .unwrap();
        assert_eq!(leaders(&p.functions[0]), [0, 1, 4].into_iter().collect());
    }
}
