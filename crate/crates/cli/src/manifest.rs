use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use gravityflow::ModelConfig;
use serde::Serialize;

use crate::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";

pub fn build_id() -> &'static str {
    env!("GRAVITYFLOW_BUILD_ID")
}

/// Record of one command invocation, written last into its output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<ModelConfig>,
    pub dataset: Option<PathBuf>,
    pub seed: Option<u64>,
    pub build_id: String,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<PathBuf>,
}

pub struct RunClock {
    started: DateTime<Utc>,
}

impl RunClock {
    pub fn start() -> Self {
        RunClock {
            started: Utc::now(),
        }
    }

    pub fn manifest(&self, command: &str) -> RunManifest {
        RunManifest {
            command: command.into(),
            config: None,
            dataset: None,
            seed: None,
            build_id: build_id().into(),
            started: self.started.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished: String::new(),
            outputs: Vec::new(),
        }
    }
}

impl RunManifest {
    /// Stamps the finish time and writes atomically into `dir`. Every listed
    /// output must exist.
    pub fn write(mut self, dir: &Path) -> Result<PathBuf, CliError> {
        for out in &self.outputs {
            if !out.exists() {
                return Err(CliError::runtime(format!(
                    "manifest lists {} but it was not written",
                    out.display()
                )));
            }
        }
        self.finished = Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true);
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(&self).expect("manifest serialises");
        fs::write(&tmp, text + "\n").map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
