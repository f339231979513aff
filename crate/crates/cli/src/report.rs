//! JSON documents written next to registration outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use svfreg::optimize::MetricBundle;
use svfreg::{LossBreakdown, RegistrationConfig};

use crate::error::{CliError, CliResult};

pub const TOOL: &str = "svfreg";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Paths and surface options a registration was run with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInputs {
    pub fixed: String,
    pub moving: String,
    pub fixed_seg: Option<String>,
    pub moving_seg: Option<String>,
    pub label: Option<u32>,
    pub surface_points: Option<usize>,
}

/// Everything needed to reproduce and judge one registration. Wall-clock
/// timings live in a separate file so that reports are byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub tool: String,
    pub version: String,
    pub config: RegistrationConfig,
    pub inputs: RunInputs,
    pub loss_trace: Vec<LossBreakdown>,
    pub metrics: MetricBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub tool: String,
    pub version: String,
    pub stages: Vec<StageTiming>,
}

impl Timings {
    pub fn new() -> Self {
        Timings {
            tool: TOOL.into(),
            version: VERSION.into(),
            stages: Vec::new(),
        }
    }

    pub fn record(&mut self, stage: &str, elapsed: std::time::Duration) {
        self.stages.push(StageTiming {
            stage: stage.into(),
            ms: elapsed.as_secs_f64() * 1e3,
        });
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

/// Reads a registration config either bare or from the `config` field of a
/// report.
pub fn read_config(path: &Path) -> CliResult<RegistrationConfig> {
    let value: serde_json::Value = read_json(path)?;
    let inner = value.get("config").cloned().unwrap_or(value);
    serde_json::from_value(inner).map_err(|e| CliError::format(path, e.to_string()))
}
