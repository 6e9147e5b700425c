use std::fmt::Write;

use super::{DataItem, DataWord, Program};

const HEADER: &str = "@ proconda assembly\n";

fn emit_items(out: &mut String, items: &[DataItem]) {
    for item in items {
        let _ = writeln!(out, "{}:", item.label);
        if item.words.is_empty() {
            continue;
        }
        let words: Vec<String> = item
            .words
            .iter()
            .map(|w| match w {
                DataWord::Int(v) => v.to_string(),
                DataWord::Label(l) => l.clone(),
            })
            .collect();
        // long tables are wrapped at eight words per line
        for chunk in words.chunks(8) {
            let _ = writeln!(out, "    .word {}", chunk.join(", "));
        }
    }
}

/// Renders a program in the canonical dialect. Output is deterministic and
/// re-parses to an identical [`Program`].
pub fn emit_program(p: &Program) -> String {
    let mut out = String::from(HEADER);
    if !p.functions.is_empty() {
        out.push_str("    .text\n");
        let _ = writeln!(out, "    .global {}", p.entry);
    }
    for f in &p.functions {
        let _ = writeln!(out, "{}:", f.label);
        let mut labels = f.labels.iter().peekable();
        for (i, ins) in f.instructions.iter().enumerate() {
            while let Some(l) = labels.next_if(|l| l.index == i) {
                let _ = writeln!(out, "{}:", l.name);
            }
            let _ = writeln!(out, "    {ins}");
        }
    }
    if !p.data.is_empty() {
        out.push_str("    .data\n");
        emit_items(&mut out, &p.data);
    }
    if !p.proconda.is_empty() {
        out.push_str("    .section .proconda\n");
        emit_items(&mut out, &p.proconda);
    }
    out
}
