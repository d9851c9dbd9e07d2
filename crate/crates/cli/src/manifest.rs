//! Run manifest written next to every output bundle.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;

pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: Option<PathBuf>,
    pub data: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub draws: Option<usize>,
    pub out: Option<PathBuf>,
    pub started: String,
    pub finished: Option<String>,
    pub exit_status: Option<u8>,
}

/// Current time, or `SOURCE_DATE_EPOCH` when set so that reruns produce
/// byte-identical manifests.
fn timestamp() -> String {
    let fixed = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| DateTime::<Utc>::from_timestamp(secs, 0));
    fixed.unwrap_or_else(Utc::now).to_rfc3339_opts(SecondsFormat::Secs, true)
}

impl Manifest {
    pub fn start(command: &str) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: None,
            data: Vec::new(),
            seed: None,
            draws: None,
            out: None,
            started: timestamp(),
            finished: None,
            exit_status: None,
        }
    }

    pub fn finish(mut self, exit_status: u8) -> Self {
        self.finished = Some(timestamp());
        self.exit_status = Some(exit_status);
        self
    }

    /// Writes via a temporary file and rename so a reader never sees a
    /// partial manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_JSON);
        let tmp = dir.join(format!(".{MANIFEST_JSON}.tmp"));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&tmp, text + "\n").with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, &path).with_context(|| format!("renaming to {}", path.display()))?;
        Ok(())
    }
}
