use std::fmt::Write as _;
use std::path::Path;

use proconda_core::asm::{emit_program, parse_program, Program};
use proconda_core::harness::{
    execute, label_address, load_cases, overhead_for, run_exploit_matrix, HarnessError, Outcome,
    RunOptions,
};
use proconda_core::ident::identify_control_data;
use proconda_core::inputs::{InputBuffer, SuiteFile};
use proconda_core::rewrite::{instrument, plan_relocation};
use proconda_core::slice::build_dsg;
use proconda_core::{ControlDataReport, PipelineConfig, RewriteReport, SliceResult, TestInput};
use serde::de::DeserializeOwned;

use crate::exit;
use crate::{Cli, Command, GlobalOpts};

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

type Res<T> = Result<T, Failure>;

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn harness_failure(e: HarnessError) -> Failure {
    let code = match e {
        HarnessError::Io(_) | HarnessError::Parse { .. } | HarnessError::Manifest { .. } => exit::IO,
        HarnessError::CoverageGate { .. } => exit::COVERAGE,
        _ => exit::ANALYSIS,
    };
    fail(code, e.to_string())
}

fn read(path: &Path) -> Res<String> {
    std::fs::read_to_string(path).map_err(|e| fail(exit::IO, format!("{}: {e}", path.display())))
}

fn write_out(out: Option<&Path>, text: &str) -> Res<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| fail(exit::IO, format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_program(path: &Path) -> Res<Program> {
    parse_program(&read(path)?).map_err(|e| fail(exit::IO, format!("{}: {e}", path.display())))
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Res<T> {
    serde_json::from_str(&read(path)?).map_err(|e| fail(exit::IO, format!("{}: {e}", path.display())))
}

fn with_newline(mut s: String) -> String {
    s.push('\n');
    s
}

pub fn config(g: &GlobalOpts) -> Res<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => toml::from_str(&read(p)?).map_err(|e| fail(exit::IO, format!("{}: {e}", p.display())))?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = g.mode {
        cfg.mode = m;
    }
    if let Some(t) = g.coverage_threshold {
        cfg.coverage_threshold = t;
    }
    if let Some(a) = g.base_addr {
        cfg = cfg.with_base_addr(a);
    }
    if let Some(b) = g.step_budget {
        cfg.step_budget = b;
    }
    cfg.validate().map_err(|e| fail(exit::IO, format!("bad configuration: {e}")))?;
    Ok(cfg)
}

fn report_for(p: &Program, path: Option<&Path>) -> Res<ControlDataReport> {
    match path {
        Some(path) => load_json(path),
        None => Ok(identify_control_data(p)),
    }
}

pub fn dispatch(cli: Cli) -> Res<u8> {
    let cfg = config(&cli.global)?;
    match cli.command {
        Command::Analyze { program, out } => {
            let p = load_program(&program)?;
            write_out(out.as_deref(), &with_newline(identify_control_data(&p).to_json()))?;
            Ok(exit::OK)
        }
        Command::Slice {
            program,
            suite,
            report,
            out,
        } => {
            let p = load_program(&program)?;
            let suite: SuiteFile = load_json(&suite)?;
            let report = report_for(&p, report.as_deref())?;
            let result = build_dsg(&p, &cfg.slice_config(), &report, &suite.expand())
                .map_err(|e| fail(exit::ANALYSIS, e.to_string()))?;
            write_out(out.as_deref(), &with_newline(result.to_json()))?;
            if !result.finalized {
                eprintln!(
                    "coverage {:.4} is below the threshold {:.4}; graph not finalized",
                    result.coverage, result.threshold
                );
                return Ok(exit::COVERAGE);
            }
            Ok(exit::OK)
        }
        Command::Rewrite {
            program,
            slice,
            report,
            out,
            rewrite_report,
        } => {
            let p = load_program(&program)?;
            let slice: SliceResult = load_json(&slice)?;
            if !slice.finalized {
                return Err(fail(
                    exit::COVERAGE,
                    format!("slice result is not finalized (coverage {:.4})", slice.coverage),
                ));
            }
            let report = report_for(&p, report.as_deref())?;
            let plan = plan_relocation(&p, &slice.graph, &report, &cfg.layout)
                .map_err(|e| fail(exit::ANALYSIS, e.to_string()))?;
            let (q, rr) = instrument(&p, &plan, cfg.mode).map_err(|e| fail(exit::ANALYSIS, e.to_string()))?;
            write_out(out.as_deref(), &emit_program(&q))?;
            if let Some(path) = rewrite_report {
                write_out(Some(&path), &with_newline(rr.to_json()))?;
            }
            Ok(exit::OK)
        }
        Command::Run {
            program,
            input,
            scalar,
            buffer,
            attacker_target,
            rewrite_report,
            json,
        } => {
            let p = load_program(&program)?;
            let mut input = match input {
                Some(path) => load_json(&path)?,
                None => TestInput::new("cli"),
            };
            for b in buffer {
                let (role, text) = b
                    .split_once('=')
                    .ok_or_else(|| fail(exit::IO, format!("buffer `{b}` is not role=text")))?;
                input.buffers.push(InputBuffer::new(role, text.as_bytes()));
            }
            input.scalars.extend(scalar);
            let target = attacker_target
                .map(|l| label_address(&p, &l, &cfg.layout))
                .transpose()
                .map_err(harness_failure)?;
            let opts = RunOptions {
                mode: cfg.mode,
                attacker_target: target,
                ..RunOptions::default()
            };
            let run = execute(&p, &input, &cfg, &opts).map_err(harness_failure)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&run.outcome).expect("outcome serializes"));
            } else {
                println!("{}", run.outcome);
                if let Outcome::Faulted(t) = &run.outcome {
                    println!("{t}");
                    if let Some(path) = &rewrite_report {
                        let rr: RewriteReport = load_json(path)?;
                        if let Some(o) = rr.original_location(&t.wio) {
                            println!("original WIO={o}");
                        }
                    }
                }
                if !run.state.output.is_empty() {
                    println!("output {:?}", run.state.output);
                }
                println!("cycles {} steps {}", run.state.cycles, run.state.steps);
            }
            Ok(match run.outcome {
                Outcome::Completed { exit, .. } => (exit & 0xff) as u8,
                _ => exit::FAULT,
            })
        }
        Command::ExploitTest { dir, json } => {
            let cases = load_cases(&dir).map_err(harness_failure)?;
            let matrix = run_exploit_matrix(&cases, &cfg).map_err(harness_failure)?;
            print!("{}", matrix.render_table());
            if let Some(path) = json {
                write_out(Some(&path), &with_newline(matrix.to_json()))?;
            }
            Ok(if matrix.pass() { exit::OK } else { exit::FAULT })
        }
        Command::Overhead {
            program,
            suite,
            json,
        } => {
            let p = load_program(&program)?;
            let suite: SuiteFile = load_json(&suite)?;
            let r = overhead_for(&p, &suite.expand(), &cfg).map_err(harness_failure)?;
            if json {
                println!("{}", r.to_json());
            } else {
                let per = r.cost.announce_cost_syscall - r.cost.announce_cost_nop;
                let mut s = String::new();
                let _ = writeln!(s, "runs                 {}", r.runs);
                let _ = writeln!(s, "cycles unprotected   {}", r.cycles_unprotected);
                let _ = writeln!(s, "cycles nop mode      {}", r.cycles_nop_mode);
                let _ = writeln!(s, "cycles syscall mode  {}", r.cycles_syscall_mode);
                let _ = writeln!(s, "announce executions  {}", r.announce_executions);
                let _ = writeln!(
                    s,
                    "cost identity        {} (syscall - nop = {} x {per})",
                    if r.cost_identity_holds() { "holds" } else { "VIOLATED" },
                    r.announce_executions
                );
                let _ = writeln!(
                    s,
                    "instruction delta    +{} of {} ({:.2}%)",
                    r.inserted_instructions, r.original_instructions, r.instr_delta_pct
                );
                let _ = writeln!(
                    s,
                    "footprint delta      +{} of {} bytes ({:.2}%)",
                    r.footprint_delta, r.original_footprint, r.footprint_delta_pct
                );
                print!("{s}");
            }
            Ok(if r.cost_identity_holds() && r.ordering_holds() {
                exit::OK
            } else {
                exit::ANALYSIS
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn opts(args: &[&str]) -> GlobalOpts {
        let mut v = vec!["proconda"];
        v.extend_from_slice(args);
        v.extend_from_slice(&["analyze", "x.s"]);
        Cli::parse_from(v).global
    }

    #[test]
    fn flags_override_defaults() {
        let c = config(&opts(&["--mode", "nop", "--base-addr", "0x2000", "--step-budget", "7"])).unwrap();
        assert_eq!(c.mode, proconda_core::AnnounceMode::NopBaseline);
        assert_eq!(c.layout.code_base, 0x2000);
        assert_eq!(c.step_budget, 7);
    }

    #[test]
    fn invalid_threshold_is_a_usage_error() {
        let e = config(&opts(&["--coverage-threshold", "1.5"])).unwrap_err();
        assert_eq!(e.code, exit::IO);
    }

    #[test]
    fn toml_config_is_read_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "coverage_threshold = 0.5\nmode = \"nop\"\n[layout]\ncode_base = 0x1000\n").unwrap();
        let p = path.to_str().unwrap();
        let c = config(&opts(&["--config", p, "--mode", "syscall"])).unwrap();
        assert_eq!(c.coverage_threshold, 0.5);
        assert_eq!(c.layout.code_base, 0x1000);
        assert_eq!(c.mode, proconda_core::AnnounceMode::SimulatedSyscall);
        std::fs::write(&path, "threshold = 0.5\n").unwrap();
        assert_eq!(config(&opts(&["--config", p])).unwrap_err().code, exit::IO);
    }
}
