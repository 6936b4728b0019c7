//! Run manifests: the resolved configuration, outcome and metrics of one
//! command invocation, written as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    /// Ran to completion but an acceptance check failed.
    CheckFailed,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub version: String,
    pub threads: usize,
    pub config: Value,
    pub status: RunStatus,
    pub error: Option<String>,
    pub elapsed_secs: f64,
    pub checks: Vec<Check>,
    pub metrics: Value,
}

impl RunManifest {
    pub fn new(command: &str, config: Value) -> Self {
        Self {
            run_id: run_id(&config),
            command: command.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            threads: rayon::current_num_threads(),
            config,
            status: RunStatus::Ok,
            error: None,
            elapsed_secs: 0.0,
            checks: Vec::new(),
            metrics: Value::Null,
        }
    }

    pub fn check(&mut self, name: &str, value: f64, threshold: f64, passed: bool) {
        self.checks.push(Check {
            name: name.to_owned(),
            passed,
            value,
            threshold,
        });
    }

    pub fn checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(dir) = path.as_ref().parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// 12 hex digits of the FNV-1a hash of the canonical config JSON.
pub fn run_id(config: &Value) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in config.to_string().bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{:012x}", h >> 16)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn run_id_depends_on_config_only() {
        let a = run_id(&json!({"steps": 10, "seed": 1}));
        assert_eq!(a.len(), 12);
        assert_eq!(a, run_id(&json!({"steps": 10, "seed": 1})));
        assert_ne!(a, run_id(&json!({"steps": 11, "seed": 1})));
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("train", json!({"x": 1}));
        m.check("gain", 3.5, 3.0, true);
        let p = dir.path().join("sub/manifest.json");
        m.write(&p).unwrap();
        assert_eq!(RunManifest::read(&p).unwrap(), m);
        assert!(m.checks_passed());
    }
}
