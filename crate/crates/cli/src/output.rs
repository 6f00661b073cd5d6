//! Report envelopes and atomic output.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

pub const CACHE_ENV: &str = "CIRCUITSCOPE_CACHE";

/// Reproducibility header wrapped around every result.
#[derive(Debug, Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_fingerprint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_digest: Option<String>,
    pub config: &'a ExperimentConfig,
    pub result: T,
}

/// Files buffered in memory and committed together.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, rel: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((rel.into(), bytes));
    }

    pub fn add_json(&mut self, rel: impl Into<PathBuf>, value: &impl Serialize) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(rel, bytes);
        Ok(())
    }

    /// Stage each file in the scratch directory, then rename into place.
    pub fn commit(self, out_dir: &Path) -> Result<Vec<PathBuf>> {
        let scratch = std::env::var_os(CACHE_ENV).map(PathBuf::from);
        let mut written = vec![];
        for (i, (rel, bytes)) in self.files.into_iter().enumerate() {
            let dest = out_dir.join(&rel);
            let dir = dest.parent().unwrap_or(out_dir).to_path_buf();
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let stage_dir = scratch.clone().unwrap_or_else(|| dir.clone());
            std::fs::create_dir_all(&stage_dir).with_context(|| format!("creating {}", stage_dir.display()))?;
            let staged = stage_dir.join(format!(".circuitscope-{}-{i}.tmp", std::process::id()));
            write_synced(&staged, &bytes)?;
            if std::fs::rename(&staged, &dest).is_err() {
                // scratch on another filesystem: copy beside the target first
                let near = dir.join(format!(".circuitscope-{}-{i}.tmp", std::process::id()));
                std::fs::copy(&staged, &near).with_context(|| format!("staging {}", near.display()))?;
                let _ = std::fs::remove_file(&staged);
                std::fs::rename(&near, &dest).with_context(|| format!("writing {}", dest.display()))?;
            }
            written.push(dest);
        }
        Ok(written)
    }
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}
