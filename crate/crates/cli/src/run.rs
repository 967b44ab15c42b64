//! `run.json`: what was run, with which inputs and resolved settings.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const VERSION: &str = env!("VESSELSEG_VERSION");
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    /// Resolved settings of the stage.
    pub config: Value,
    /// The user-supplied config text, if any; marks user-set keys.
    #[serde(default)]
    pub user_config: Option<String>,
    #[serde(default)]
    pub outputs: Value,
}

impl RunRecord {
    pub fn new(command: &str, argv: &[String], config: Value) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            version: VERSION.to_string(),
            seed: None,
            manifest: None,
            config,
            user_config: None,
            outputs: Value::Null,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let p = dir.join(RUN_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", p.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Absolute form of `p` so a record stays valid when read from elsewhere.
pub fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}
