//! Settings shared by every pipeline stage.

use serde::{Deserialize, Serialize};

use crate::machine::{AnnounceMode, CostModel, MemoryLayout, DEFAULT_STEP_BUDGET};
use crate::slice::{SliceConfig, DEFAULT_COVERAGE_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub layout: MemoryLayout,
    pub coverage_threshold: f64,
    pub mode: AnnounceMode,
    pub cost: CostModel,
    pub step_budget: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            layout: MemoryLayout::default(),
            coverage_threshold: DEFAULT_COVERAGE_THRESHOLD,
            mode: AnnounceMode::SimulatedSyscall,
            cost: CostModel::default(),
            step_budget: DEFAULT_STEP_BUDGET,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.coverage_threshold > 0.0 && self.coverage_threshold <= 1.0) {
            return Err(format!(
                "coverage threshold {} is outside (0, 1]",
                self.coverage_threshold
            ));
        }
        if self.step_budget == 0 {
            return Err("step budget must be positive".into());
        }
        self.cost.validate()?;
        self.layout.validate().map_err(|e| e.to_string())
    }

    /// Moves the code image so that `main` starts at `addr`.
    pub fn with_base_addr(mut self, addr: u32) -> Self {
        self.layout.code_base = addr;
        self
    }

    pub fn slice_config(&self) -> SliceConfig {
        SliceConfig {
            layout: self.layout.clone(),
            threshold: self.coverage_threshold,
            step_budget: self.step_budget,
        }
    }
}
