//! Projection of component outputs into vocabulary space.
//!
//! The final layernorm is linearised by freezing its scale at the value the
//! full residual produces, so per-component scores add up exactly to logits:
//! `logit(t) = sum_sites score(t) + <ln_final.b, W_U[:, t]>`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{ActivationCache, Logits};
use crate::error::{Error, Result};
use crate::matrix::HeadMatrix;
use crate::metrics::Dataset;
use crate::model::Model;
use crate::site::Site;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub site: Site,
    pub position: usize,
    pub token_scores: BTreeMap<u32, f64>,
    /// Scored tokens by descending score, ties by ascending id.
    pub top_k: Vec<(u32, f64)>,
}

/// Sort by score descending, then token id ascending.
pub fn rank_token_scores(scores: &mut [(u32, f64)]) {
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// `1 / sqrt(var + eps)` of the final residual at `position`.
pub fn frozen_inv_scale(model: &Model, cache: &ActivationCache, position: usize) -> Result<f32> {
    cache.check_pos(position)?;
    Ok(model.ln_final().inv_scale(cache.final_resid(position)))
}

fn project(model: &Model, normed: &[f32]) -> Vec<f64> {
    let vocab = model.vocab_size();
    let w_u = model.unembed();
    let mut out = vec![0.0f64; vocab];
    for (x, row) in normed.iter().zip(w_u.chunks_exact(vocab)) {
        let x = *x as f64;
        for (o, w) in out.iter_mut().zip(row) {
            *o += x * *w as f64;
        }
    }
    out
}

/// Frozen-scale vocabulary scores of one site at one position, whole vocabulary.
pub fn site_vocab_scores(model: &Model, cache: &ActivationCache, site: Site, position: usize) -> Result<Vec<f64>> {
    let v = cache.site_row(site, position)?;
    let inv = frozen_inv_scale(model, cache, position)?;
    let mut normed = vec![0.0f32; v.len()];
    model.ln_final().apply_frozen(v, inv, &mut normed);
    Ok(project(model, &normed))
}

/// `<ln_final.b, W_U[:, t]>` for every token: the part of each logit no site owns.
pub fn layernorm_bias_scores(model: &Model) -> Vec<f64> {
    project(model, &model.ln_final().bias)
}

pub fn direct_logit_attribution(
    model: &Model,
    cache: &ActivationCache,
    site: Site,
    targets: &[u32],
    position: usize,
) -> Result<AttributionRecord> {
    let all = site_vocab_scores(model, cache, site, position)?;
    let mut token_scores = BTreeMap::new();
    for &t in targets {
        let s = *all
            .get(t as usize)
            .ok_or_else(|| Error::IndexOutOfBounds(format!("token {t} (vocab {})", all.len())))?;
        token_scores.insert(t, s);
    }
    let mut top_k: Vec<(u32, f64)> = token_scores.iter().map(|(t, s)| (*t, *s)).collect();
    rank_token_scores(&mut top_k);
    Ok(AttributionRecord {
        site,
        position,
        token_scores,
        top_k,
    })
}

/// The `k` tokens a site promotes most at `position`. `k` above the vocabulary is clipped.
pub fn top_promoted_tokens(
    model: &Model,
    cache: &ActivationCache,
    site: Site,
    position: usize,
    k: usize,
) -> Result<Vec<(u32, f64)>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let all = site_vocab_scores(model, cache, site, position)?;
    let mut scored: Vec<(u32, f64)> = all.into_iter().enumerate().map(|(t, s)| (t as u32, s)).collect();
    rank_token_scores(&mut scored);
    scored.truncate(k);
    Ok(scored)
}

pub fn logit_diff(logits: &Logits, answer: u32, distractor: u32, position: usize) -> Result<f64> {
    let row = logits.try_row(position)?;
    let get = |t: u32| {
        row.get(t as usize)
            .copied()
            .ok_or_else(|| Error::IndexOutOfBounds(format!("token {t} (vocab {})", row.len())))
    };
    Ok(get(answer)? as f64 - get(distractor)? as f64)
}

/// Total direct effect of one head on a token group.
pub fn verb_group_score(
    model: &Model,
    cache: &ActivationCache,
    layer: usize,
    head: usize,
    position: usize,
    group: &[u32],
) -> Result<f64> {
    if group.is_empty() {
        return Err(Error::InvalidArgument("empty token group".into()));
    }
    let rec = direct_logit_attribution(model, cache, Site::head(layer, head), group, position)?;
    // duplicates in `group` count once per occurrence
    Ok(group.iter().map(|t| rec.token_scores[t]).sum())
}

/// Per-head group score at each example's END position, averaged over the dataset.
pub fn verb_group_table(model: &Model, dataset: &Dataset, group: &[u32]) -> Result<HeadMatrix> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (nl, nh) = (model.n_layers(), model.n_heads());
    let per_example = dataset
        .examples
        .par_iter()
        .map(|e| {
            let end = e.end();
            let (_, cache) = model.run_with_cache(&e.tokens[..=end], None)?;
            let mut m = HeadMatrix::zeros(nl, nh);
            for l in 0..nl {
                for h in 0..nh {
                    m.set(l, h, verb_group_score(model, &cache, l, h, end, group)?);
                }
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = HeadMatrix::zeros(nl, nh);
    for m in &per_example {
        out.values.iter_mut().zip(&m.values).for_each(|(o, v)| *o += v);
    }
    let n = per_example.len() as f64;
    out.values.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}
