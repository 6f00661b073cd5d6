//! Direct logit attribution and head-function scores.

mod copy;
mod dla;
mod head_scores;
mod s_inhibition;

pub use copy::{copy_probe_vector, copy_score, copy_score_table, COPY_PROBE_DEFAULT_K};
pub use dla::{
    direct_logit_attribution, frozen_inv_scale, layernorm_bias_scores, logit_diff, rank_token_scores,
    site_vocab_scores, top_promoted_tokens, verb_group_score, verb_group_table, AttributionRecord,
};
pub use head_scores::{
    duplicate_token_score, induction_score, prev_token_score, random_token_samples, HeadScoreTable,
    ProtocolParams, RandomTokenProtocol, ScoreKind,
};
pub use s_inhibition::{s_inhibition_effect, MoverEffect, MoverReadout, SInhibitionReport};
