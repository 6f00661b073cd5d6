//! Straight-line reference computations in f64.
//!
//! Nothing here touches the engine's forward pass, intervention plans or
//! caches; it only reads weights. Used by the self-test and the test suites
//! as an independent check of the optimised paths.

use std::collections::BTreeMap;

use crate::model::Model;
use crate::ops::{gelu, LayerNorm};
use crate::site::Site;

type Rows = Vec<Vec<f64>>;

fn layer_norm(ln: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + ln.eps as f64).sqrt();
    x.iter()
        .zip(ln.weight.iter().zip(&ln.bias))
        .map(|(v, (w, b))| (v - mean) * inv * *w as f64 + *b as f64)
        .collect()
}

/// `x · M` where `M` is row-major `[x.len(), cols]` stored at `m[offset..]`.
fn matvec(x: &[f64], m: &[f32], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for c in 0..cols {
            out[c] += xi * m[i * cols + c] as f64;
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Every residual write of one reference run.
#[derive(Debug, Clone)]
pub struct ReferenceRun {
    pub embed: Rows,
    pub resid_pre: Vec<Rows>,
    pub resid_mid: Vec<Rows>,
    pub heads: Vec<Vec<Rows>>,
    pub patterns: Vec<Vec<Rows>>,
    pub ffns: Vec<Rows>,
    pub final_resid: Rows,
    pub logits: Rows,
}

impl ReferenceRun {
    pub fn component(&self, site: Site) -> &Rows {
        match site {
            Site::ResidPre { layer } => &self.resid_pre[layer],
            Site::Head { layer, head } => &self.heads[layer][head],
            Site::Ffn { layer } => &self.ffns[layer],
        }
    }
}

pub fn embed(model: &Model, tokens: &[u32]) -> Rows {
    tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            let mut x: Vec<f64> = model.token_embedding(t).iter().map(|v| *v as f64).collect();
            if let Some(pe) = model.position_embedding(p) {
                x = x.iter().zip(pe).map(|(a, b)| a + *b as f64).collect();
            }
            match model.embed_ln() {
                Some(ln) => layer_norm(ln, &x),
                None => x,
            }
        })
        .collect()
}

/// Output of one head for every query position, given its input stream.
/// Returns `(outputs, pattern)`.
pub fn head_output(model: &Model, layer: usize, head: usize, stream: &Rows) -> (Rows, Rows) {
    let cfg = model.config();
    let (d, dh) = (cfg.d_model, cfg.d_head);
    let b = model.block(layer);
    let off_in = head * d * dh;
    let slice = |w: &[f32]| w[off_in..off_in + d * dh].to_vec();
    let (wq, wk, wv) = (slice(&b.w_q), slice(&b.w_k), slice(&b.w_v));
    let wo = &b.w_o[head * dh * d..(head + 1) * dh * d];
    let bias = |v: &[f32]| -> Vec<f64> { v[head * dh..(head + 1) * dh].iter().map(|x| *x as f64).collect() };
    let normed: Rows = stream.iter().map(|x| layer_norm(&b.ln1, x)).collect();
    let q: Rows = normed.iter().map(|x| add(&matvec(x, &wq, dh), &bias(&b.b_q))).collect();
    let k: Rows = normed.iter().map(|x| add(&matvec(x, &wk, dh), &bias(&b.b_k))).collect();
    let v: Rows = normed.iter().map(|x| add(&matvec(x, &wv, dh), &bias(&b.b_v))).collect();
    let n = stream.len();
    let slope = model.alibi_slopes().map(|s| s[head] as f64);
    let mut pattern = vec![vec![0.0; n]; n];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let scores: Vec<f64> = (0..=i)
            .map(|j| {
                let s: f64 = q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt();
                s - slope.map_or(0.0, |m| m * (i - j) as f64)
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut mixed = vec![0.0; dh];
        for j in 0..=i {
            pattern[i][j] = exps[j] / z;
            for c in 0..dh {
                mixed[c] += pattern[i][j] * v[j][c];
            }
        }
        let mut o = matvec(&mixed, wo, d);
        for (oc, bo) in o.iter_mut().zip(&b.b_o) {
            *oc += *bo as f64 / cfg.n_heads as f64;
        }
        out.push(o);
    }
    (out, pattern)
}

/// Per-source split of one head's output at query `q`:
/// `pattern[q][j] * (v_j · W_O + b_O / n_heads)` for `j` in `0..=q`.
pub fn head_terms(model: &Model, layer: usize, head: usize, stream: &Rows, q: usize) -> Rows {
    let cfg = model.config();
    let (d, dh) = (cfg.d_model, cfg.d_head);
    let b = model.block(layer);
    let (_, pattern) = head_output(model, layer, head, stream);
    let wv = &b.w_v[head * d * dh..(head + 1) * d * dh];
    let wo = &b.w_o[head * dh * d..(head + 1) * dh * d];
    (0..=q)
        .map(|j| {
            let x = layer_norm(&b.ln1, &stream[j]);
            let mut v = matvec(&x, wv, dh);
            for (c, vc) in v.iter_mut().enumerate() {
                *vc += b.b_v[head * dh + c] as f64;
            }
            let mut o = matvec(&v, wo, d);
            for (oc, bo) in o.iter_mut().zip(&b.b_o) {
                *oc += *bo as f64 / cfg.n_heads as f64;
            }
            o.iter().map(|x| x * pattern[q][j]).collect()
        })
        .collect()
}

pub fn ffn_output(model: &Model, layer: usize, stream: &Rows) -> Rows {
    let cfg = model.config();
    let b = model.block(layer);
    stream
        .iter()
        .map(|x| {
            let h = layer_norm(&b.ln2, x);
            let pre = add(&matvec(&h, &b.w_in, cfg.d_mlp), &b.b_in.iter().map(|v| *v as f64).collect::<Vec<_>>());
            let act: Vec<f64> = pre.iter().map(|v| gelu(*v as f32, cfg.activation_fn) as f64).collect();
            add(&matvec(&act, &b.w_out, cfg.d_model), &b.b_out.iter().map(|v| *v as f64).collect::<Vec<_>>())
        })
        .collect()
}

pub fn logits_of(model: &Model, resid: &[f64]) -> Vec<f64> {
    let normed = layer_norm(model.ln_final(), resid);
    matvec(&normed, model.unembed(), model.vocab_size())
}

/// Reference forward. `overrides` pins a component's output (all positions)
/// instead of computing it.
pub fn forward_with(model: &Model, tokens: &[u32], overrides: &BTreeMap<Site, Rows>) -> ReferenceRun {
    let cfg = model.config();
    let embed = embed(model, tokens);
    let mut x = embed.clone();
    let mut run = ReferenceRun {
        embed,
        resid_pre: vec![],
        resid_mid: vec![],
        heads: vec![],
        patterns: vec![],
        ffns: vec![],
        final_resid: vec![],
        logits: vec![],
    };
    for layer in 0..cfg.n_layers {
        if let Some(o) = overrides.get(&Site::resid_pre(layer)) {
            x = o.clone();
        }
        run.resid_pre.push(x.clone());
        let mut mid = x.clone();
        let mut heads = vec![];
        let mut patterns = vec![];
        for head in 0..cfg.n_heads {
            let (computed, pattern) = head_output(model, layer, head, &x);
            let out = overrides.get(&Site::head(layer, head)).cloned().unwrap_or(computed);
            for (m, o) in mid.iter_mut().zip(&out) {
                *m = add(m, o);
            }
            heads.push(out);
            patterns.push(pattern);
        }
        let ffn = overrides
            .get(&Site::ffn(layer))
            .cloned()
            .unwrap_or_else(|| ffn_output(model, layer, &mid));
        x = mid.iter().zip(&ffn).map(|(m, f)| add(m, f)).collect();
        run.resid_mid.push(mid);
        run.heads.push(heads);
        run.patterns.push(patterns);
        run.ffns.push(ffn);
    }
    run.logits = x.iter().map(|r| logits_of(model, r)).collect();
    run.final_resid = x;
    run
}

pub fn forward(model: &Model, tokens: &[u32]) -> ReferenceRun {
    forward_with(model, tokens, &BTreeMap::new())
}

/// Where the rerouted edge ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeTarget {
    FinalLogits,
    Component(Site),
}

/// Reroute exactly one edge, with every other component frozen to its clean
/// value: the sender's corrupted-minus-clean difference is added to the
/// target's input and nothing else. A component target is then recomputed on
/// that input and its new output is propagated through an otherwise clean run.
/// Returns logits at every position.
pub fn reroute_edge(
    model: &Model,
    clean_tokens: &[u32],
    corrupted_tokens: &[u32],
    sender: Site,
    target: EdgeTarget,
) -> Rows {
    let clean = forward(model, clean_tokens);
    let corrupted = forward(model, corrupted_tokens);
    let delta: Rows = clean
        .component(sender)
        .iter()
        .zip(corrupted.component(sender))
        .map(|(c, k)| k.iter().zip(c).map(|(a, b)| a - b).collect())
        .collect();
    match target {
        EdgeTarget::FinalLogits => clean
            .final_resid
            .iter()
            .zip(&delta)
            .map(|(r, dlt)| logits_of(model, &add(r, dlt)))
            .collect(),
        EdgeTarget::Component(site) => {
            let input: &Rows = match site {
                Site::Head { layer, .. } => &clean.resid_pre[layer],
                Site::Ffn { layer } => &clean.resid_mid[layer],
                Site::ResidPre { layer } => &clean.resid_pre[layer],
            };
            let perturbed: Rows = input.iter().zip(&delta).map(|(r, dlt)| add(r, dlt)).collect();
            let new_out = match site {
                Site::Head { layer, head } => head_output(model, layer, head, &perturbed).0,
                Site::Ffn { layer } => ffn_output(model, layer, &perturbed),
                Site::ResidPre { .. } => perturbed,
            };
            let overrides = BTreeMap::from([(site, new_out)]);
            forward_with(model, clean_tokens, &overrides).logits
        }
    }
}
