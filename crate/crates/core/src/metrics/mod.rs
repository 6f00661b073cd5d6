//! Task datasets, evaluation metrics and cross-run circuit comparison.

mod compare;
pub(crate) mod eval;
mod task;

pub use compare::{compare_circuits, pearson, pearson_matrices, ComparisonReport};
pub use eval::{
    end_logits, evaluate, rank_shift, token_rank, token_rank_in_row, token_ranks, EvalReport, ExampleEval,
    TokenRanks,
};
pub use task::{Dataset, Lang, Task, TaskExample, Variant};
