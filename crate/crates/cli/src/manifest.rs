use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone)]
pub struct Input {
    pub role: &'static str,
    pub path: String,
    pub sha256: String,
}

/// Provenance block embedded in every report.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub command: String,
    pub inputs: Vec<Input>,
    pub seed: u64,
    pub timestamp: String,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self { command: command.to_string(), inputs: Vec::new(), seed, timestamp: timestamp() }
    }

    /// Reads `path`, records its digest, and returns the text.
    pub fn read(&mut self, role: &'static str, path: &Path) -> Result<String, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        self.inputs.push(Input { role, path: path.display().to_string(), sha256: hex::encode(Sha256::digest(&bytes)) });
        String::from_utf8(bytes).map_err(|_| CliError::Input(format!("{}: not UTF-8", path.display())))
    }

    pub fn to_json(&self) -> Value {
        json!({
            "command": self.command,
            "inputs": self.inputs.iter().map(|i| json!({"role": i.role, "path": i.path, "sha256": i.sha256})).collect::<Vec<_>>(),
            "seed": self.seed,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "timestamp": self.timestamp,
        })
    }

    /// `# key: value` lines for the head of a CSV report.
    pub fn csv_header(&self) -> String {
        let mut s = format!("# command: {}\n", self.command);
        for i in &self.inputs {
            s += &format!("# input {}: {} sha256={}\n", i.role, i.path, i.sha256);
        }
        s += &format!(
            "# seed: {}\n# tool_version: {}\n# timestamp: {}\n",
            self.seed,
            env!("CARGO_PKG_VERSION"),
            self.timestamp
        );
        s
    }
}

/// UTC now, or `SOURCE_DATE_EPOCH` when set so reruns can be byte-identical.
fn timestamp() -> String {
    let at = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0))
        .unwrap_or_else(chrono::Utc::now);
    at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
