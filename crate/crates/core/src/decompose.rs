//! Exact additive decompositions of the residual stream.

use crate::cache::ActivationCache;
use crate::error::Result;
use crate::model::Model;
use crate::ops::vec_mat_acc;
use crate::site::Site;

/// Split `resid_post[layer][pos]` into the embedding carry
/// (`Site::ResidPre { layer: 0 }`) plus every head and MLP output up to `layer`.
pub fn decompose_residual(
    cache: &ActivationCache,
    layer: usize,
    pos: usize,
) -> Result<Vec<(Site, Vec<f32>)>> {
    cache.check_layer(layer)?;
    cache.check_pos(pos)?;
    let mut terms = vec![(Site::resid_pre(0), cache.resid_pre(0, pos).to_vec())];
    for l in 0..=layer {
        for h in 0..cache.n_heads() {
            terms.push((Site::head(l, h), cache.head_out(l, h, pos).to_vec()));
        }
        terms.push((Site::ffn(l), cache.ffn_out(l, pos).to_vec()));
    }
    Ok(terms)
}

/// `v_j · W_O + b_O / n_heads` for one head and source position: what the
/// head would write if it attended to `source` alone.
pub fn projected_value(
    model: &Model,
    cache: &ActivationCache,
    layer: usize,
    head: usize,
    source: usize,
) -> Vec<f32> {
    let block = model.block(layer);
    let (d, dh) = (model.d_model(), model.config().d_head);
    let n_heads = model.n_heads() as f32;
    let mut row: Vec<f32> = block.b_o.iter().map(|b| b / n_heads).collect();
    vec_mat_acc(
        cache.value_vec(layer, head, source),
        &block.w_o[head * dh * d..(head + 1) * dh * d],
        &mut row,
    );
    row
}

/// Split a head's output at `query_pos` by source position:
/// `term_j = attn[q][j] * projected_value(j)`, for `j` in `0..=query_pos`.
pub fn head_output_per_source(
    model: &Model,
    cache: &ActivationCache,
    layer: usize,
    head: usize,
    query_pos: usize,
) -> Result<Vec<Vec<f32>>> {
    cache.check_site(Site::head(layer, head))?;
    cache.check_pos(query_pos)?;
    let attn = cache.attn_row(layer, head, query_pos);
    Ok((0..=query_pos)
        .map(|j| {
            let a = attn[j];
            let mut t = projected_value(model, cache, layer, head, j);
            t.iter_mut().for_each(|v| *v *= a);
            t
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{random_model, tiny_config};

    fn setup() -> (Model, ActivationCache) {
        let model = random_model(&tiny_config(), 3).unwrap();
        let (_, cache) = model.run_with_cache(&[1, 7, 3, 9, 2], None).unwrap();
        (model, cache)
    }

    #[test]
    fn per_source_terms_sum_to_head_output() {
        let (model, cache) = setup();
        for q in 0..5 {
            let terms = head_output_per_source(&model, &cache, 1, 2, q).unwrap();
            assert_eq!(terms.len(), q + 1);
            let target = cache.head_out(1, 2, q);
            for c in 0..16 {
                let s: f32 = terms.iter().map(|t| t[c]).sum();
                assert!((s - target[c]).abs() < 1e-4 * (1.0 + target[c].abs()));
            }
        }
    }

    #[test]
    fn one_hot_attention_gives_single_term() {
        let (model, mut cache) = setup();
        let n = cache.seq_len();
        let pat = &mut cache.attn_pattern[0];
        pat[3 * n..4 * n].copy_from_slice(&[0.0, 1.0, 0.0, 0.0, 0.0]);
        let terms = head_output_per_source(&model, &cache, 0, 0, 3).unwrap();
        for (j, t) in terms.iter().enumerate() {
            let nz = t.iter().any(|v| *v != 0.0);
            assert_eq!(nz, j == 1, "source {j}");
        }
    }

    #[test]
    fn uniform_attention_equal_values_gives_equal_terms() {
        let (model, mut cache) = setup();
        let n = cache.seq_len();
        let dh = cache.d_head();
        cache.attn_pattern[0][3 * n..4 * n].copy_from_slice(&[0.25, 0.25, 0.25, 0.25, 0.0]);
        let v0 = cache.value_vec(0, 0, 0).to_vec();
        for p in 1..4 {
            cache.value_vec[0][p * dh..(p + 1) * dh].copy_from_slice(&v0);
        }
        let terms = head_output_per_source(&model, &cache, 0, 0, 3).unwrap();
        for t in &terms[1..] {
            assert_eq!(t, &terms[0]);
        }
    }

    #[test]
    fn bounds_are_checked() {
        let (model, cache) = setup();
        assert!(head_output_per_source(&model, &cache, 2, 0, 0).is_err());
        assert!(head_output_per_source(&model, &cache, 0, 4, 0).is_err());
        assert!(head_output_per_source(&model, &cache, 0, 0, 5).is_err());
        assert!(decompose_residual(&cache, 0, 9).is_err());
    }
}
