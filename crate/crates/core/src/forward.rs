//! The forward pass with optional capture and interventions.
//!
//! Each head's share of the attention output bias (`b_O / n_heads`) is folded
//! into that head's output, so head outputs sum exactly to the block's
//! attention update.

use crate::cache::{ActivationCache, ForwardResult, Logits};
use crate::error::{Error, Result};
use crate::intervention::InterventionPlan;
use crate::model::Model;
use crate::ops::{add_assign, gelu, softmax_in_place, vec_mat_acc};
use crate::site::Site;

impl Model {
    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let cfg = self.config();
        if tokens.is_empty() || tokens.len() > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some((position, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, t)| **t as usize >= cfg.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                token,
                position,
                vocab_size: cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Run the model on one sequence.
    pub fn forward(
        &self,
        tokens: &[u32],
        plan: Option<&InterventionPlan>,
        capture: bool,
    ) -> Result<ForwardResult> {
        self.check_tokens(tokens)?;
        let cfg = self.config();
        let (n, d, dh, n_heads) = (tokens.len(), cfg.d_model, cfg.d_head, cfg.n_heads);
        if let Some(plan) = plan {
            plan.validate(cfg, n)?;
        }
        let plan = plan.filter(|p| !p.is_empty());

        let mut x: Vec<f32> = Vec::with_capacity(n * d);
        for (pos, &t) in tokens.iter().enumerate() {
            x.extend(self.embed_token(t, pos));
        }

        let mut cache = capture.then(|| ActivationCache {
            tokens: tokens.to_vec(),
            n_heads,
            d_model: d,
            d_head: dh,
            resid_pre: Vec::with_capacity(cfg.n_layers),
            resid_mid: Vec::with_capacity(cfg.n_layers),
            resid_post: Vec::with_capacity(cfg.n_layers),
            head_out: Vec::with_capacity(cfg.n_layers * n_heads),
            attn_pattern: Vec::with_capacity(cfg.n_layers * n_heads),
            value_vec: Vec::with_capacity(cfg.n_layers * n_heads),
            ffn_out: Vec::with_capacity(cfg.n_layers),
        });

        let scale = 1.0 / (dh as f32).sqrt();
        let mut normed = vec![0.0f32; n * d];
        for (layer, block) in self.blocks.iter().enumerate() {
            if let Some(plan) = plan {
                plan.apply(Site::ResidPre { layer }, &mut x, d);
            }
            if let Some(c) = cache.as_mut() {
                c.resid_pre.push(x.clone());
            }

            for pos in 0..n {
                block
                    .ln1
                    .apply(&x[pos * d..(pos + 1) * d], &mut normed[pos * d..(pos + 1) * d]);
            }

            let mut mid = x.clone();
            let bias_share: Vec<f32> = block.b_o.iter().map(|b| b / n_heads as f32).collect();
            for head in 0..n_heads {
                let wq = &block.w_q[head * d * dh..(head + 1) * d * dh];
                let wk = &block.w_k[head * d * dh..(head + 1) * d * dh];
                let wv = &block.w_v[head * d * dh..(head + 1) * d * dh];
                let wo = &block.w_o[head * dh * d..(head + 1) * dh * d];
                let project = |w: &[f32], b: &[f32]| {
                    let mut out = Vec::with_capacity(n * dh);
                    for pos in 0..n {
                        let mut row = b[head * dh..(head + 1) * dh].to_vec();
                        vec_mat_acc(&normed[pos * d..(pos + 1) * d], w, &mut row);
                        out.extend(row);
                    }
                    out
                };
                let q = project(wq, &block.b_q);
                let k = project(wk, &block.b_k);
                let v = project(wv, &block.b_v);

                let slope = self.alibi.as_ref().map(|s| s[head]);
                let mut pattern = vec![0.0f32; n * n];
                for qi in 0..n {
                    let row = &mut pattern[qi * n..(qi + 1) * n];
                    let qv = &q[qi * dh..(qi + 1) * dh];
                    for (ki, r) in row.iter_mut().enumerate() {
                        *r = if ki > qi {
                            f32::NEG_INFINITY
                        } else {
                            let kv = &k[ki * dh..(ki + 1) * dh];
                            let mut s = crate::ops::dot(qv, kv) * scale;
                            if let Some(m) = slope {
                                s -= m * (qi - ki) as f32;
                            }
                            s
                        };
                    }
                    softmax_in_place(row);
                }

                let mut out = Vec::with_capacity(n * d);
                let mut z = vec![0.0f32; dh];
                for qi in 0..n {
                    z.fill(0.0);
                    for ki in 0..=qi {
                        let a = pattern[qi * n + ki];
                        for (zv, vv) in z.iter_mut().zip(&v[ki * dh..(ki + 1) * dh]) {
                            *zv += a * vv;
                        }
                    }
                    let mut row = bias_share.clone();
                    vec_mat_acc(&z, wo, &mut row);
                    out.extend(row);
                }
                if let Some(plan) = plan {
                    plan.apply(Site::Head { layer, head }, &mut out, d);
                }
                add_assign(&mut mid, &out);
                if let Some(c) = cache.as_mut() {
                    c.head_out.push(out);
                    c.attn_pattern.push(pattern);
                    c.value_vec.push(v);
                }
            }

            let mut ffn = Vec::with_capacity(n * d);
            let mut hidden = vec![0.0f32; cfg.d_mlp];
            let mut ln_row = vec![0.0f32; d];
            for pos in 0..n {
                block.ln2.apply(&mid[pos * d..(pos + 1) * d], &mut ln_row);
                hidden.copy_from_slice(&block.b_in);
                vec_mat_acc(&ln_row, &block.w_in, &mut hidden);
                hidden.iter_mut().for_each(|h| *h = gelu(*h, cfg.activation_fn));
                let mut row = block.b_out.clone();
                vec_mat_acc(&hidden, &block.w_out, &mut row);
                ffn.extend(row);
            }
            if let Some(plan) = plan {
                plan.apply(Site::Ffn { layer }, &mut ffn, d);
            }
            let mut post = mid.clone();
            add_assign(&mut post, &ffn);
            if let Some(c) = cache.as_mut() {
                c.resid_mid.push(mid);
                c.ffn_out.push(ffn);
                c.resid_post.push(post.clone());
            }
            x = post;
        }

        let mut data = Vec::with_capacity(n * cfg.vocab_size);
        for pos in 0..n {
            data.extend(self.unembed_residual(&x[pos * d..(pos + 1) * d]));
        }
        Ok(ForwardResult {
            logits: Logits {
                seq_len: n,
                vocab: cfg.vocab_size,
                data,
            },
            cache,
        })
    }

    /// Forward with capture; returns logits and cache.
    pub fn run_with_cache(
        &self,
        tokens: &[u32],
        plan: Option<&InterventionPlan>,
    ) -> Result<(Logits, ActivationCache)> {
        let r = self.forward(tokens, plan, true)?;
        Ok((r.logits, r.cache.expect("capture requested")))
    }
}
