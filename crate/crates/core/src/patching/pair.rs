use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cache::Logits;
use crate::error::{Error, Result};
use crate::metrics::{token_rank_in_row, Dataset, TaskExample};

/// Scalar read off the logits at the pair's END position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metric {
    LogitDiff { answer: u32, distractor: u32 },
    AnswerLogit { answer: u32 },
    AnswerRank { answer: u32 },
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::LogitDiff { .. } => "logit_diff",
            Metric::AnswerLogit { .. } => "answer_logit",
            Metric::AnswerRank { .. } => "answer_rank",
        }
    }

    pub fn eval_row(&self, row: &[f32]) -> Result<f64> {
        let get = |t: u32| {
            row.get(t as usize)
                .map(|v| *v as f64)
                .ok_or_else(|| Error::IndexOutOfBounds(format!("token {t} (vocab {})", row.len())))
        };
        match *self {
            Metric::LogitDiff { answer, distractor } => Ok(get(answer)? - get(distractor)?),
            Metric::AnswerLogit { answer } => get(answer),
            Metric::AnswerRank { answer } => Ok(token_rank_in_row(row, answer)? as f64),
        }
    }
}

/// Aligned clean/corrupted inputs plus what to measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastPair {
    pub clean: Vec<u32>,
    pub corrupted: Vec<u32>,
    pub roles: BTreeMap<String, usize>,
    pub metric: Metric,
}

impl ContrastPair {
    pub fn new(clean: Vec<u32>, corrupted: Vec<u32>, roles: BTreeMap<String, usize>, metric: Metric) -> Result<Self> {
        let pair = Self {
            clean,
            corrupted,
            roles,
            metric,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clean.len() != self.corrupted.len() {
            return Err(Error::LengthMismatch {
                clean: self.clean.len(),
                corrupted: self.corrupted.len(),
            });
        }
        let end = self
            .roles
            .get(TaskExample::END)
            .ok_or_else(|| Error::InvalidArgument("contrast pair needs an END role".into()))?;
        if let Some((r, p)) = self.roles.iter().find(|(_, p)| **p >= self.clean.len()) {
            return Err(Error::IndexOutOfBounds(format!("role {r} at {p}")));
        }
        debug_assert!(*end < self.clean.len());
        Ok(())
    }

    pub fn end(&self) -> usize {
        self.roles[TaskExample::END]
    }

    pub fn measure(&self, logits: &Logits) -> Result<f64> {
        self.metric.eval_row(logits.try_row(self.end())?)
    }

    /// Pair from a dataset example, truncated after END. Logit difference when a
    /// distractor exists, otherwise the answer logit.
    pub fn from_example(e: &TaskExample) -> Result<Self> {
        let corrupted = e
            .corrupted_tokens
            .as_ref()
            .ok_or_else(|| Error::MissingCorrupted(e.id.clone()))?;
        let end = e.end();
        let metric = match e.distractor {
            Some(distractor) => Metric::LogitDiff {
                answer: e.answer,
                distractor,
            },
            None => Metric::AnswerLogit { answer: e.answer },
        };
        Self::new(
            e.tokens[..=end].to_vec(),
            corrupted[..=end].to_vec(),
            e.roles.iter().filter(|(_, p)| **p <= end).map(|(k, v)| (k.clone(), *v)).collect(),
            metric,
        )
    }
}

/// Every example as a pair; fails on the first example without corrupted tokens.
pub fn pairs_from_dataset(dataset: &Dataset) -> Result<Vec<ContrastPair>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset.examples.iter().map(ContrastPair::from_example).collect()
}
