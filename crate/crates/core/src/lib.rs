//! Protection of control data through write-origin checking.
//!
//! The crate is organised as a pipeline:
//!
//! * [`asm`] parses and emits the ARM-subset assembly dialect.
//! * [`ident`] statically finds control-flow sites and the loads that feed them.
//! * [`slice`] runs a test suite under watchpoints and builds the data source
//!   graph of legitimate writers.
//! * [`rewrite`] relocates control data into the protected `.proconda`
//!   region and brackets every legitimate write with announce instructions.
//! * [`harness`] executes protected builds, replays exploits and reports
//!   overhead.
//!
//! [`machine`] is the deterministic simulator underneath all of it.

pub mod asm;
pub mod config;
pub mod corpus;
pub mod harness;
pub mod ident;
pub mod inputs;
pub mod machine;
pub mod rewrite;
pub mod slice;
pub mod testgen;

pub use asm::{
    emit_program, parse_program, CodeLocation, Instruction, Mnemonic, Operand, Program, Register,
};
pub use config::PipelineConfig;
pub use harness::{Outcome, OverheadReport};
pub use ident::{identify_control_data, ControlDataReport, FlowKind};
pub use inputs::TestInput;
pub use machine::{CostModel, Machine, MemoryLayout, TrapInfo, TrapKind};
pub use rewrite::{AnnounceMode, RelocationPlan, RewriteReport};
pub use slice::{DataSourceGraph, SliceResult};
