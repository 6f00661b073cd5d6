//! Attention-pattern scores on random token sequences: previous-token,
//! duplicate-token and induction heads.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::ActivationCache;
use crate::error::{Error, Result};
use crate::matrix::HeadMatrix;
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    PrevToken,
    DuplicateToken,
    Induction,
    Copy,
    VerbGroup,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_group: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// A per-head score matrix plus how it was measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreTable {
    pub score_kind: ScoreKind,
    pub protocol_params: ProtocolParams,
    pub values: HeadMatrix,
    pub model_fingerprint: String,
}

/// Random-sequence protocol shared by the attention scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomTokenProtocol {
    pub n_samples: usize,
    pub seed: u64,
    /// Control/special ids never drawn.
    pub excluded: BTreeSet<u32>,
}

impl Default for RandomTokenProtocol {
    fn default() -> Self {
        Self {
            n_samples: 20,
            seed: 0,
            excluded: BTreeSet::new(),
        }
    }
}

/// `n_samples` sequences of `len` ids drawn uniformly from the allowed vocabulary,
/// all from one seeded stream.
pub fn random_token_samples(vocab: usize, len: usize, protocol: &RandomTokenProtocol) -> Result<Vec<Vec<u32>>> {
    let allowed: Vec<u32> = (0..vocab as u32).filter(|t| !protocol.excluded.contains(t)).collect();
    if allowed.is_empty() {
        return Err(Error::InvalidArgument("every token id is excluded".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    Ok((0..protocol.n_samples)
        .map(|_| (0..len).map(|_| *allowed.choose(&mut rng).expect("non-empty")).collect())
        .collect())
}

/// Mean over samples of `score(cache, layer, head)`, computed in parallel and
/// reduced in sample order.
fn mean_over_samples<F>(model: &Model, samples: &[Vec<u32>], score: F) -> Result<HeadMatrix>
where
    F: Fn(&ActivationCache, usize, usize) -> f64 + Sync,
{
    if samples.is_empty() {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let (nl, nh) = (model.n_layers(), model.n_heads());
    let per_sample = samples
        .par_iter()
        .map(|tokens| {
            let (_, cache) = model.run_with_cache(tokens, None)?;
            let mut m = HeadMatrix::zeros(nl, nh);
            for l in 0..nl {
                for h in 0..nh {
                    m.set(l, h, score(&cache, l, h));
                }
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = HeadMatrix::zeros(nl, nh);
    for m in &per_sample {
        out.values.iter_mut().zip(&m.values).for_each(|(o, v)| *o += v);
    }
    let n = samples.len() as f64;
    out.values.iter_mut().for_each(|v| *v = (*v / n).clamp(0.0, 1.0));
    Ok(out)
}

pub(crate) fn prev_token_pattern_score(cache: &ActivationCache, layer: usize, head: usize) -> f64 {
    let n = cache.seq_len();
    (1..n).map(|i| cache.attn(layer, head, i, i - 1) as f64).sum::<f64>() / (n - 1) as f64
}

/// Mean attention from `i` in the second half to `i - half_len + offset`.
pub(crate) fn repeat_pattern_score(
    cache: &ActivationCache,
    layer: usize,
    head: usize,
    half_len: usize,
    offset: usize,
) -> f64 {
    (half_len..2 * half_len)
        .map(|i| cache.attn(layer, head, i, i - half_len + offset) as f64)
        .sum::<f64>()
        / half_len as f64
}

fn params(protocol: &RandomTokenProtocol) -> ProtocolParams {
    ProtocolParams {
        n_samples: Some(protocol.n_samples),
        seed: Some(protocol.seed),
        excluded_ids: protocol.excluded.iter().copied().collect(),
        ..Default::default()
    }
}

/// Mean attention from each position `i >= 1` to `i - 1`.
pub fn prev_token_score(model: &Model, seq_len: usize, protocol: &RandomTokenProtocol) -> Result<HeadScoreTable> {
    if seq_len < 2 {
        return Err(Error::InvalidArgument("seq_len must be at least 2".into()));
    }
    let samples = random_token_samples(model.vocab_size(), seq_len, protocol)?;
    let values = mean_over_samples(model, &samples, prev_token_pattern_score)?;
    Ok(HeadScoreTable {
        score_kind: ScoreKind::PrevToken,
        protocol_params: ProtocolParams {
            seq_len: Some(seq_len),
            ..params(protocol)
        },
        values,
        model_fingerprint: model.fingerprint().to_string(),
    })
}

fn repeated_samples(model: &Model, half_len: usize, protocol: &RandomTokenProtocol) -> Result<Vec<Vec<u32>>> {
    Ok(random_token_samples(model.vocab_size(), half_len, protocol)?
        .into_iter()
        .map(|mut s| {
            s.extend_from_within(..);
            s
        })
        .collect())
}

fn repeated_score(
    model: &Model,
    half_len: usize,
    protocol: &RandomTokenProtocol,
    kind: ScoreKind,
    offset: usize,
) -> Result<HeadScoreTable> {
    let samples = repeated_samples(model, half_len, protocol)?;
    let values = mean_over_samples(model, &samples, |c, l, h| {
        repeat_pattern_score(c, l, h, half_len, offset)
    })?;
    Ok(HeadScoreTable {
        score_kind: kind,
        protocol_params: ProtocolParams {
            half_len: Some(half_len),
            seq_len: Some(2 * half_len),
            ..params(protocol)
        },
        values,
        model_fingerprint: model.fingerprint().to_string(),
    })
}

/// On sequences repeated once, mean attention from each second-half position
/// to the same token's first occurrence.
pub fn duplicate_token_score(model: &Model, half_len: usize, protocol: &RandomTokenProtocol) -> Result<HeadScoreTable> {
    if half_len < 1 {
        return Err(Error::InvalidArgument("half_len must be at least 1".into()));
    }
    repeated_score(model, half_len, protocol, ScoreKind::DuplicateToken, 0)
}

/// On sequences repeated once, mean attention from each second-half position
/// to the token after its first occurrence.
pub fn induction_score(model: &Model, half_len: usize, protocol: &RandomTokenProtocol) -> Result<HeadScoreTable> {
    if half_len < 2 {
        return Err(Error::InvalidArgument("half_len must be at least 2".into()));
    }
    repeated_score(model, half_len, protocol, ScoreKind::Induction, 1)
}
