//! Golden-logit fixtures: reference final-position logits for fixed prompts.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

pub const GOLDEN_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenPrompt {
    pub name: String,
    #[serde(default)]
    pub lang: Option<String>,
    pub tokens: Vec<u32>,
    /// Full-vocabulary logits at the last position.
    pub logits: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenFixture {
    pub model_id: String,
    pub prompts: Vec<GoldenPrompt>,
}

impl GoldenFixture {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenReport {
    pub model_id: String,
    /// Max absolute logit difference per prompt, fixture order.
    pub per_prompt: Vec<(String, f64)>,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn check_golden(model: &Model, fixture: &GoldenFixture) -> Result<GoldenReport> {
    if fixture.prompts.is_empty() {
        return Err(Error::InvalidArgument("golden fixture has no prompts".into()));
    }
    let per_prompt = fixture
        .prompts
        .par_iter()
        .map(|p| {
            if p.logits.len() != model.vocab_size() {
                return Err(Error::DimensionMismatch(format!(
                    "prompt {}: {} logits for vocabulary of {}",
                    p.name,
                    p.logits.len(),
                    model.vocab_size()
                )));
            }
            let out = model.forward(&p.tokens, None, false)?;
            let row = out.logits.row(p.tokens.len() - 1);
            let diff = row
                .iter()
                .zip(&p.logits)
                .map(|(a, b)| (*a as f64 - *b as f64).abs())
                .fold(0.0, f64::max);
            Ok((p.name.clone(), diff))
        })
        .collect::<Result<Vec<_>>>()?;
    let max_abs_diff = per_prompt.iter().map(|(_, d)| *d).fold(0.0, f64::max);
    Ok(GoldenReport {
        model_id: fixture.model_id.clone(),
        per_prompt,
        max_abs_diff,
        tolerance: GOLDEN_TOLERANCE,
        passed: max_abs_diff < GOLDEN_TOLERANCE,
    })
}
