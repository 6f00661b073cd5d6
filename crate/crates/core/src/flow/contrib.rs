use serde::{Deserialize, Serialize};

use crate::cache::ActivationCache;
use crate::decompose::head_output_per_source;
use crate::error::Result;
use crate::model::Model;
use crate::ops::dot_f64;

/// Updates with a smaller norm are reported as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    /// The layer's input stream at the same position.
    Carry,
    Head { head: usize, source: usize },
    Ffn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermScore {
    pub term: Term,
    /// `<t, o> / |o|^2`, before clipping.
    pub signed: f64,
    /// Positive part, renormalised to sum to one.
    pub normalized: f64,
}

/// Sum over every head and source position of one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockAggregate {
    pub signed: f64,
    pub normalized: f64,
}

/// How each term of `resid_post[layer][position]` contributes to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionRecord {
    pub layer: usize,
    pub position: usize,
    /// Carry first, then heads by (head, source), then the MLP.
    pub terms: Vec<TermScore>,
    pub attention_block: BlockAggregate,
    /// The update norm fell below [`DEGENERATE_NORM`]; every score is zero.
    pub degenerate: bool,
}

impl ContributionRecord {
    pub fn get(&self, term: Term) -> Option<&TermScore> {
        self.terms.iter().find(|t| t.term == term)
    }

    pub fn signed_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.signed).sum()
    }

    pub fn normalized_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.normalized).sum()
    }
}

pub(crate) fn score_terms(raw: Vec<(Term, Vec<f32>)>, output: &[f32]) -> (Vec<TermScore>, bool) {
    let norm2 = dot_f64(output, output);
    if norm2.sqrt() < DEGENERATE_NORM {
        let terms = raw
            .into_iter()
            .map(|(term, _)| TermScore { term, signed: 0.0, normalized: 0.0 })
            .collect();
        return (terms, true);
    }
    let signed: Vec<f64> = raw.iter().map(|(_, t)| dot_f64(t, output) / norm2).collect();
    let positive: f64 = signed.iter().filter(|s| **s > 0.0).sum();
    let terms = raw
        .into_iter()
        .zip(signed)
        .map(|((term, _), s)| TermScore {
            term,
            signed: s,
            normalized: if positive > 0.0 { s.max(0.0) / positive } else { 0.0 },
        })
        .collect();
    (terms, false)
}

pub fn residual_contributions(
    model: &Model,
    cache: &ActivationCache,
    layer: usize,
    position: usize,
) -> Result<ContributionRecord> {
    cache.check_layer(layer)?;
    cache.check_pos(position)?;
    let mut raw = vec![(Term::Carry, cache.resid_pre(layer, position).to_vec())];
    for head in 0..cache.n_heads() {
        for (source, t) in head_output_per_source(model, cache, layer, head, position)?.into_iter().enumerate() {
            raw.push((Term::Head { head, source }, t));
        }
    }
    raw.push((Term::Ffn, cache.ffn_out(layer, position).to_vec()));
    let (terms, degenerate) = score_terms(raw, cache.resid_post(layer, position));
    let attention_block = terms
        .iter()
        .filter(|t| matches!(t.term, Term::Head { .. }))
        .fold(BlockAggregate::default(), |acc, t| BlockAggregate {
            signed: acc.signed + t.signed,
            normalized: acc.normalized + t.normalized,
        });
    Ok(ContributionRecord {
        layer,
        position,
        terms,
        attention_block,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(i: usize) -> Vec<f32> {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v
    }

    #[test]
    fn single_term_gets_everything() {
        let head = Term::Head { head: 0, source: 2 };
        let (t, deg) = score_terms(vec![(Term::Carry, vec![0.0; 4]), (head, basis(1)), (Term::Ffn, vec![0.0; 4])], &basis(1));
        assert!(!deg);
        assert_eq!((t[1].signed, t[1].normalized), (1.0, 1.0));
        assert_eq!(t[0].normalized + t[2].normalized, 0.0);
    }

    #[test]
    fn orthogonal_equal_terms_split_evenly() {
        let o: Vec<f32> = vec![1.0, 1.0, 0.0, 0.0];
        let (t, _) = score_terms(vec![(Term::Carry, basis(0)), (Term::Ffn, basis(1))], &o);
        for s in t {
            assert_eq!((s.signed, s.normalized), (0.5, 0.5));
        }
    }

    #[test]
    fn negative_terms_are_clipped_before_normalising() {
        let o = basis(0);
        let a: Vec<f32> = vec![1.5, 0.0, 0.0, 0.0];
        let b: Vec<f32> = vec![-0.5, 0.0, 0.0, 0.0];
        let (t, _) = score_terms(vec![(Term::Carry, a), (Term::Ffn, b)], &o);
        assert_eq!((t[0].signed, t[1].signed), (1.5, -0.5));
        assert_eq!((t[0].normalized, t[1].normalized), (1.0, 0.0));
    }

    #[test]
    fn zero_update_is_flagged() {
        let (t, deg) = score_terms(vec![(Term::Carry, vec![0.0; 4])], &[0.0; 4]);
        assert!(deg);
        assert_eq!(t[0].signed, 0.0);
    }
}
