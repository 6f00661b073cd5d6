use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::Logits;
use crate::error::{Error, Result};
use crate::intervention::InterventionPlan;
use crate::model::Model;

use super::task::Dataset;

/// Rank of `token` in one logit row: strictly greater logits, plus ties with
/// a smaller token id. 0 is the top prediction.
pub fn token_rank_in_row(row: &[f32], token: u32) -> Result<usize> {
    let t = token as usize;
    let target = *row.get(t).ok_or_else(|| {
        Error::IndexOutOfBounds(format!("token {token} (vocab {})", row.len()))
    })?;
    Ok(row
        .iter()
        .enumerate()
        .filter(|(i, v)| **v > target || (**v == target && *i < t))
        .count())
}

pub fn token_rank(logits: &Logits, token: u32, position: usize) -> Result<usize> {
    token_rank_in_row(logits.try_row(position)?, token)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleEval {
    pub id: String,
    pub answer_rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Present iff every example carries a distractor.
    pub accuracy: Option<f64>,
    pub zero_rank_rate: f64,
    pub mean_answer_rank: f64,
    pub per_example: Vec<ExampleEval>,
}

/// Logit row at each example's END position, in dataset order.
pub fn end_logits(model: &Model, dataset: &Dataset, plan: Option<&InterventionPlan>) -> Result<Vec<Vec<f32>>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset
        .examples
        .par_iter()
        .map(|e| {
            let end = e.end();
            let r = model.forward(&e.tokens[..=end], plan, false)?;
            Ok(r.logits.row(end).to_vec())
        })
        .collect()
}

pub(crate) fn report_from_rows(dataset: &Dataset, rows: &[Vec<f32>]) -> Result<EvalReport> {
    let mut per_example = Vec::with_capacity(rows.len());
    for (e, row) in dataset.examples.iter().zip(rows) {
        let answer_rank = token_rank_in_row(row, e.answer)?;
        let logit_diff = match e.distractor {
            Some(d) => {
                let dv = *row
                    .get(d as usize)
                    .ok_or_else(|| Error::IndexOutOfBounds(format!("distractor {d}")))?;
                Some(row[e.answer as usize] as f64 - dv as f64)
            }
            None => None,
        };
        per_example.push(ExampleEval {
            id: e.id.clone(),
            answer_rank,
            logit_diff,
        });
    }
    let n = per_example.len();
    let accuracy = per_example
        .iter()
        .map(|p| p.logit_diff.map(|d| d > 0.0))
        .collect::<Option<Vec<bool>>>()
        .map(|wins| wins.iter().filter(|w| **w).count() as f64 / n as f64);
    let zero_rank_rate = per_example.iter().filter(|p| p.answer_rank == 0).count() as f64 / n as f64;
    let mean_answer_rank = per_example.iter().map(|p| p.answer_rank as f64).sum::<f64>() / n as f64;
    Ok(EvalReport {
        n,
        accuracy,
        zero_rank_rate,
        mean_answer_rank,
        per_example,
    })
}

/// Accuracy, zero-rank rate and answer ranks at each example's END position.
pub fn evaluate(model: &Model, dataset: &Dataset, plan: Option<&InterventionPlan>) -> Result<EvalReport> {
    dataset.kind()?;
    let rows = end_logits(model, dataset, plan)?;
    report_from_rows(dataset, &rows)
}

/// Ranks of a fixed token list at each example's END position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRanks {
    pub ids: Vec<String>,
    pub tokens: Vec<u32>,
    /// `ranks[example][i]` is the rank of `tokens[i]`.
    pub ranks: Vec<Vec<usize>>,
}

pub(crate) fn ranks_from_rows(dataset: &Dataset, rows: &[Vec<f32>], tokens: &[u32]) -> Result<TokenRanks> {
    let ranks = rows
        .iter()
        .map(|row| tokens.iter().map(|t| token_rank_in_row(row, *t)).collect())
        .collect::<Result<Vec<Vec<usize>>>>()?;
    Ok(TokenRanks {
        ids: dataset.examples.iter().map(|e| e.id.clone()).collect(),
        tokens: tokens.to_vec(),
        ranks,
    })
}

pub fn token_ranks(
    model: &Model,
    dataset: &Dataset,
    plan: Option<&InterventionPlan>,
    tokens: &[u32],
) -> Result<TokenRanks> {
    let rows = end_logits(model, dataset, plan)?;
    ranks_from_rows(dataset, &rows, tokens)
}

/// Mean over examples and `group` tokens of `baseline rank - treated rank`.
/// Positive means the group was promoted.
pub fn rank_shift(baseline: &TokenRanks, treated: &TokenRanks, group: &[u32]) -> Result<f64> {
    if baseline.ids != treated.ids {
        return Err(Error::ExampleMismatch("example ids differ between runs".into()));
    }
    if group.is_empty() {
        return Err(Error::InvalidArgument("empty token group".into()));
    }
    let index = |ranks: &TokenRanks, t: u32| {
        ranks
            .tokens
            .iter()
            .position(|x| *x == t)
            .ok_or_else(|| Error::ExampleMismatch(format!("token {t} not ranked in both runs")))
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for &t in group {
        let (bi, ti) = (index(baseline, t)?, index(treated, t)?);
        for (b, tr) in baseline.ranks.iter().zip(&treated.ranks) {
            total += b[bi] as f64 - tr[ti] as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / count as f64)
}
