use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{data, CliResult};

/// Record written by every run: what was asked, with which effective
/// settings, on which files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Effective configuration after defaults, config file and flags.
    pub config: Value,
    pub seed: u64,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub started_unix: f64,
    pub wall_seconds: f64,
    /// Command-specific results (counts, scores, report paths).
    pub summary: Value,
}

/// What a command hands back to the dispatcher.
#[derive(Debug, Default)]
pub struct Outcome {
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub summary: Value,
    /// Where the manifest goes unless `--manifest` says otherwise.
    pub manifest_path: Option<PathBuf>,
}

impl Outcome {
    pub fn new(config: impl Serialize) -> Self {
        Outcome { config: serde_json::to_value(config).unwrap_or(Value::Null), ..Default::default() }
    }

    pub fn input(mut self, p: impl AsRef<Path>) -> Self {
        self.inputs.push(p.as_ref().to_path_buf());
        self
    }

    pub fn inputs<P: AsRef<Path>>(mut self, ps: impl IntoIterator<Item = P>) -> Self {
        self.inputs.extend(ps.into_iter().map(|p| p.as_ref().to_path_buf()));
        self
    }

    /// Record an output file; the first one also fixes the default manifest
    /// location (`<file>.manifest.json`).
    pub fn output(mut self, p: impl AsRef<Path>) -> Self {
        let p = p.as_ref().to_path_buf();
        if self.manifest_path.is_none() {
            let mut name = p.clone().into_os_string();
            name.push(".manifest.json");
            self.manifest_path = Some(name.into());
        }
        self.outputs.push(p);
        self
    }

    /// Record an output directory; the manifest goes inside it.
    pub fn output_dir(mut self, p: impl AsRef<Path>) -> Self {
        let p = p.as_ref().to_path_buf();
        if self.manifest_path.is_none() {
            self.manifest_path = Some(p.join("manifest.json"));
        }
        self.outputs.push(p);
        self
    }

    pub fn summary(mut self, v: Value) -> Self {
        self.summary = v;
        self
    }
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn write_manifest(path: &Path, m: &RunManifest) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| data(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    std::fs::write(path, text + "\n").map_err(|e| data(format!("{}: {e}", path.display())))
}
