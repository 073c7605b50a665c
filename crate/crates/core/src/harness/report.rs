//! Machine-readable run reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::RunConfig;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    ValidationError,
    RuntimeError,
}

impl Status {
    pub fn of(err: &Error) -> Self {
        if err.is_validation() {
            Status::ValidationError
        } else {
            Status::RuntimeError
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::ValidationError => 1,
            Status::RuntimeError => 2,
        }
    }
}

/// One subcommand's outcome with the resolved config and seeds. Holds no
/// timestamps or timings, so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub status: Status,
    pub error: Option<String>,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub results: Value,
}

impl Report {
    pub fn new(command: &str, config: &RunConfig, outcome: std::result::Result<Value, (Status, String)>) -> Self {
        let (status, error, results) = match outcome {
            Ok(v) => (Status::Ok, None, v),
            Err((s, e)) => (s, Some(e), Value::Null),
        };
        Report {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            status,
            error,
            config: config.clone(),
            seeds: config.seeds(),
            results,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{}.json", self.command)), self.to_json())?;
        Ok(())
    }
}
