//! Copy scores: does a head's OV circuit map a token back onto itself?
//!
//! Probe for token `t`: its embedding (plus the learned position embedding at
//! `max_seq_len / 2`, and the embedding layernorm if present), with block 0's
//! MLP output added on top. The probe goes through the head's `ln1`, `W_V`,
//! `b_V` and `W_O`, then the final layernorm at its own scale and the
//! unembedding. The score is the fraction of probes ranked in their own top-k.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::{gelu, vec_mat_acc, LayerNorm};
use crate::site::Site;

use super::head_scores::{HeadScoreTable, ProtocolParams, ScoreKind};
use crate::matrix::HeadMatrix;
use crate::metrics::token_rank_in_row;

pub const COPY_PROBE_DEFAULT_K: usize = 5;

fn ln_apply(ln: &LayerNorm, x: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    ln.apply(x, &mut out);
    out
}

/// Residual-stream probe vector for `token` (see module docs).
pub fn copy_probe_vector(model: &Model, token: u32) -> Vec<f32> {
    let mid = model.config().max_seq_len / 2;
    let mut x = model.embed_token(token, mid);
    let b0 = model.block(0);
    let normed = ln_apply(&b0.ln2, &x);
    let mut hidden = b0.b_in.clone();
    vec_mat_acc(&normed, &b0.w_in, &mut hidden);
    hidden.iter_mut().for_each(|h| *h = gelu(*h, model.config().activation_fn));
    let mut ffn = b0.b_out.clone();
    vec_mat_acc(&hidden, &b0.w_out, &mut ffn);
    crate::ops::add_assign(&mut x, &ffn);
    x
}

fn ov_logits(model: &Model, layer: usize, head: usize, probe: &[f32]) -> Vec<f32> {
    let cfg = model.config();
    let (d, dh) = (cfg.d_model, cfg.d_head);
    let block = model.block(layer);
    let normed = ln_apply(&block.ln1, probe);
    let mut v = block.b_v[head * dh..(head + 1) * dh].to_vec();
    vec_mat_acc(&normed, &block.w_v[head * d * dh..(head + 1) * d * dh], &mut v);
    let mut out = vec![0.0f32; d];
    vec_mat_acc(&v, &block.w_o[head * dh * d..(head + 1) * dh * d], &mut out);
    model.unembed_residual(&out)
}

pub fn copy_score(model: &Model, layer: usize, head: usize, probe_tokens: &[u32], k: usize) -> Result<f64> {
    Site::head(layer, head).check(model.config()).map_err(|e| Error::IndexOutOfBounds(e.to_string()))?;
    if probe_tokens.is_empty() || k == 0 {
        return Err(Error::InvalidArgument("copy score needs probes and k >= 1".into()));
    }
    let hits = probe_tokens
        .iter()
        .map(|&t| {
            if t as usize >= model.vocab_size() {
                return Err(Error::IndexOutOfBounds(format!("probe token {t}")));
            }
            let logits = ov_logits(model, layer, head, &copy_probe_vector(model, t));
            Ok(token_rank_in_row(&logits, t)? < k)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// Copy score of every head.
pub fn copy_score_table(model: &Model, probe_tokens: &[u32], k: usize) -> Result<HeadScoreTable> {
    let heads = Site::all_heads(model.config());
    let scores = heads
        .par_iter()
        .map(|s| match *s {
            Site::Head { layer, head } => copy_score(model, layer, head, probe_tokens, k),
            _ => unreachable!(),
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(HeadScoreTable {
        score_kind: ScoreKind::Copy,
        protocol_params: ProtocolParams {
            token_group: probe_tokens.to_vec(),
            k: Some(k),
            note: Some(
                "probe = embed(+pos at max_seq_len/2) + mlp0(ln2_0(.)); through ln1, OV, ln_final, unembed".into(),
            ),
            ..Default::default()
        },
        values: HeadMatrix::from_values(model.n_layers(), model.n_heads(), scores)?,
        model_fingerprint: model.fingerprint().to_string(),
    })
}
