//! `proconda`: run the protection pipeline one phase at a time.
//!
//! Phases talk to each other only through files, so a report written by
//! `analyze` can be fed to `slice` and `rewrite` later.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use proconda_core::AnnounceMode;

use commands::Failure;

/// Exit status of every command.
pub mod exit {
    pub const OK: u8 = 0;
    pub const ANALYSIS: u8 = 1;
    pub const COVERAGE: u8 = 2;
    pub const FAULT: u8 = 3;
    /// Unreadable or malformed input, or bad arguments.
    pub const IO: u8 = 4;
}

#[derive(Debug, Parser)]
#[command(name = "proconda", version, about = "Write-origin protection of control data")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by all commands. Precedence: flag, then `PROCONDA_*`
/// environment variable, then `--config` file, then built-in defaults.
#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// TOML file with pipeline settings.
    #[arg(long, global = true, env = "PROCONDA_CONFIG")]
    pub config: Option<PathBuf>,
    /// Announce cost model: `syscall` or `nop`.
    #[arg(long, global = true, env = "PROCONDA_MODE")]
    pub mode: Option<AnnounceMode>,
    /// Minimum basic-block coverage, in (0, 1].
    #[arg(long, global = true, env = "PROCONDA_COVERAGE_THRESHOLD")]
    pub coverage_threshold: Option<f64>,
    /// Load address of the code image (decimal or 0x-prefixed hex).
    #[arg(long, global = true, env = "PROCONDA_BASE_ADDR", value_parser = parse_addr)]
    pub base_addr: Option<u32>,
    /// Maximum instructions per run.
    #[arg(long, global = true, env = "PROCONDA_STEP_BUDGET")]
    pub step_budget: Option<u64>,
}

fn parse_addr(s: &str) -> Result<u32, String> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u32::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|e| format!("bad address `{s}`: {e}"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Find control-flow sites and the loads that feed them.
    Analyze {
        program: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run a suite under watchpoints and build the data source graph.
    Slice {
        program: PathBuf,
        /// Suite file: explicit inputs and/or an input domain.
        #[arg(long)]
        suite: PathBuf,
        /// Report from `analyze`; recomputed when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Relocate control data and bracket legitimate writers.
    Rewrite {
        program: PathBuf,
        /// Result from `slice`.
        #[arg(long)]
        slice: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Rewritten assembly; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Where to write the rewrite report (JSON).
        #[arg(long)]
        rewrite_report: Option<PathBuf>,
    },
    /// Execute a program. The exit status mirrors the guest's; a trap or
    /// hijack exits with 3.
    Run {
        program: PathBuf,
        /// Input as JSON (`{"name", "buffers", "scalars"}`).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Scalar argument; repeatable.
        #[arg(long, allow_negative_numbers = true)]
        scalar: Vec<i32>,
        /// Text buffer argument as `role=text`; repeatable.
        #[arg(long)]
        buffer: Vec<String>,
        /// Label whose address counts as a hijack when reached.
        #[arg(long)]
        attacker_target: Option<String>,
        /// Rewrite report of this program; maps a trap back to the
        /// original instruction.
        #[arg(long)]
        rewrite_report: Option<PathBuf>,
        /// Print the outcome as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Replay every `*.case.json` in a directory against unprotected and
    /// protected builds.
    ExploitTest {
        dir: PathBuf,
        /// Also write the matrix as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare cycle counts of the unprotected, nop-mode and syscall-mode
    /// builds over a suite.
    Overhead {
        program: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    // clap would exit with 2, which is reserved for the coverage gate
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::IO } else { exit::OK });
        }
    };
    match commands::dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
