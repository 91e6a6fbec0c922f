use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

/// What a command produced, printed to stdout as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub tool_version: String,
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, config_digest: String) -> Self {
        Self {
            command: command.to_string(),
            config_digest,
            artifacts: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_seconds: 0.0,
        }
    }

    pub fn artifact(&mut self, key: &str, path: &Path) {
        self.artifacts.insert(key.to_string(), path.to_path_buf());
    }

    pub fn finish(mut self, start: Instant) -> Self {
        self.duration_seconds = start.elapsed().as_secs_f64();
        self
    }
}
