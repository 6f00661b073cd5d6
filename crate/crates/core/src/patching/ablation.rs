use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::intervention::InterventionPlan;
use crate::metrics::{end_logits, rank_shift, Dataset, EvalReport};
use crate::model::Model;

use crate::metrics::eval::{ranks_from_rows, report_from_rows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGroup {
    pub name: String,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupShift {
    pub name: String,
    pub n_tokens: usize,
    /// Mean `baseline rank - ablated rank`; negative means demoted.
    pub mean_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: EvalReport,
    pub ablated: EvalReport,
    pub delta_accuracy: Option<f64>,
    pub delta_zero_rank_rate: f64,
    pub delta_mean_answer_rank: f64,
    pub rank_shifts: Vec<GroupShift>,
}

/// Evaluate with and without `plan`, and measure how each token group's rank moves.
pub fn ablate_and_eval(
    model: &Model,
    dataset: &Dataset,
    plan: &InterventionPlan,
    groups: &[TokenGroup],
) -> Result<AblationReport> {
    dataset.kind()?;
    // position bounds and replacement lengths depend on each example and are
    // checked per forward
    for (site, _) in plan.items() {
        site.site.check(model.config())?;
    }
    let base_rows = end_logits(model, dataset, None)?;
    let abl_rows = end_logits(model, dataset, Some(plan))?;
    let baseline = report_from_rows(dataset, &base_rows)?;
    let ablated = report_from_rows(dataset, &abl_rows)?;
    let rank_shifts = groups
        .iter()
        .filter(|g| !g.tokens.is_empty())
        .map(|g| {
            let b = ranks_from_rows(dataset, &base_rows, &g.tokens)?;
            let a = ranks_from_rows(dataset, &abl_rows, &g.tokens)?;
            Ok(GroupShift {
                name: g.name.clone(),
                n_tokens: g.tokens.len(),
                mean_shift: rank_shift(&b, &a, &g.tokens)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        delta_accuracy: match (baseline.accuracy, ablated.accuracy) {
            (Some(b), Some(a)) => Some(a - b),
            _ => None,
        },
        delta_zero_rank_rate: ablated.zero_rank_rate - baseline.zero_rank_rate,
        delta_mean_answer_rank: ablated.mean_answer_rank - baseline.mean_answer_rank,
        baseline,
        ablated,
        rank_shifts,
    })
}
