//! Experiment configuration: JSON file merged with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use circuitscope::patching::{FreezePolicy, Receiver};
use circuitscope::Site;
use clap::Args;
use serde::{Deserialize, Serialize};

/// Every knob a command may read. Flags override values from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory holding model.safetensors, config.json and optionally vocab.json
    #[arg(long = "model")]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_dir: Option<PathBuf>,
    /// JSON-lines dataset
    #[arg(long = "dataset")]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long = "out")]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Flow threshold
    #[arg(long)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Frequency threshold for head sets in `compare`
    #[arg(long)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_threshold: Option<f64>,
    /// Path-patching freeze policy: attn or all
    #[arg(long)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze: Option<String>,
    /// Path-patching receiver: logits, L.H or ffn.L
    #[arg(long)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receiver: Option<String>,
    /// MLP layer range, `A..B` (half-open), `A..=B` or `A`
    #[arg(long)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<String>,
    /// Heads as `L.H[,L.H...]`
    #[arg(long)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<String>,
    /// Rows to print or keep (top heads, promoted tokens, copy-score k)
    #[arg(long)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk: Option<usize>,
    /// Seed for random-token protocols (default 0)
    #[arg(long)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Worker threads; defaults to available parallelism
    #[arg(long)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f.clone(); } )*
    };
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `flags` wins wherever it sets a value.
    pub fn merged(mut self, flags: &ExperimentConfig) -> Self {
        overlay!(
            self, flags, model_dir, dataset_path, output_dir, tau, freq_threshold, freeze, receiver, layers, heads,
            topk, seed, workers
        );
        self
    }

    pub fn model_dir(&self) -> Result<&Path> {
        existing(self.model_dir.as_deref(), "--model")
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        existing(self.dataset_path.as_deref(), "--dataset")
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn freeze_policy(&self) -> Result<FreezePolicy> {
        match self.freeze.as_deref() {
            None | Some("attn") => Ok(FreezePolicy::FreezeAttnRecomputeMlp),
            Some("all") => Ok(FreezePolicy::FreezeAll),
            Some(other) => bail!("unknown freeze policy `{other}` (expected attn or all)"),
        }
    }

    pub fn receiver(&self) -> Result<Receiver> {
        match self.receiver.as_deref() {
            None | Some("logits") => Ok(Receiver::FinalLogits),
            Some(s) => Ok(Receiver::Site { site: s.parse::<Site>().with_context(|| format!("receiver `{s}`"))? }),
        }
    }

    pub fn head_list(&self) -> Result<Vec<(usize, usize)>> {
        self.heads.as_deref().map(parse_heads).transpose().map(Option::unwrap_or_default)
    }

    pub fn layer_list(&self) -> Result<Vec<usize>> {
        self.layers.as_deref().map(parse_layers).transpose().map(Option::unwrap_or_default)
    }

    /// Fills in defaults so reports echo what actually ran.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.seed = Some(self.seed());
        c
    }
}

fn existing<'a>(p: Option<&'a Path>, flag: &str) -> Result<&'a Path> {
    let p = p.with_context(|| format!("{flag} is required for this command"))?;
    if !p.exists() {
        bail!("path does not exist: {}", p.display());
    }
    Ok(p)
}

pub fn parse_heads(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let (l, h) = t.split_once('.').with_context(|| format!("head `{t}` is not L.H"))?;
            Ok((l.parse().with_context(|| format!("head `{t}`"))?, h.parse().with_context(|| format!("head `{t}`"))?))
        })
        .collect()
}

pub fn parse_layers(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    let num = |t: &str| t.trim().parse::<usize>().with_context(|| format!("layer range `{s}`"));
    let (a, b) = if let Some((a, b)) = s.split_once("..=") {
        (num(a)?, num(b)? + 1)
    } else if let Some((a, b)) = s.split_once("..") {
        (num(a)?, num(b)?)
    } else {
        let a = num(s)?;
        (a, a + 1)
    };
    if a >= b {
        bail!("layer range `{s}` is empty");
    }
    Ok((a..b).collect())
}
