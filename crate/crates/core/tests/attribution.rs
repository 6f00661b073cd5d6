use std::collections::BTreeMap;

use circuitscope::attribution::*;
use circuitscope::metrics::{Dataset, Lang, Task, TaskExample, Variant};
use circuitscope::oracle;
use circuitscope::synthetic::*;
use circuitscope::{Error, InterventionPlan, Logits, Model, ModelConfig, Site};
use proptest::prelude::*;

const TOKENS: [u32; 8] = [3, 14, 15, 9, 26, 5, 3, 14];

fn ioi_example(id: usize, io: u32, s: u32) -> TaskExample {
    // S1 IO x y S2 z END
    TaskExample {
        id: format!("ioi-{id}"),
        task: Task::Ioi,
        lang: Lang::En,
        variant: Variant::Normal,
        tokens: vec![s, 7, io, 11, 12, s, 13, 20],
        corrupted_tokens: Some(vec![s, 7, io, 11, 12, 30 + id as u32, 13, 20]),
        roles: BTreeMap::from([("S1".into(), 0), ("IO".into(), 2), ("S2".into(), 5), ("END".into(), 7)]),
        answer: io,
        distractor: Some(s),
        template_id: 0,
    }
}

fn ioi_dataset() -> Dataset {
    Dataset::new((0..4).map(|i| ioi_example(i, 40 + i as u32, 45 - i as u32)).collect()).unwrap()
}

#[test]
fn frozen_scale_scores_sum_to_logits() {
    for cfg in [tiny_config(), tiny_alibi_config()] {
        let model = random_model(&cfg, 17).unwrap();
        let (logits, cache) = model.run_with_cache(&TOKENS, None).unwrap();
        let bias = layernorm_bias_scores(&model);
        for pos in [0, 4, 7] {
            let mut total = bias.clone();
            let mut sites = vec![Site::resid_pre(0)];
            sites.extend(Site::all_components(&cfg));
            for s in sites {
                let sc = site_vocab_scores(&model, &cache, s, pos).unwrap();
                total.iter_mut().zip(&sc).for_each(|(t, v)| *t += v);
            }
            for (t, (got, want)) in total.iter().zip(logits.row(pos)).enumerate() {
                assert!((got - *want as f64).abs() < 1e-3, "pos {pos} tok {t}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn dla_matches_explicit_frozen_layernorm_oracle() {
    let cfg = ModelConfig { n_layers: 1, ..tiny_config() };
    let model = random_model(&cfg, 23).unwrap();
    let (_, cache) = model.run_with_cache(&TOKENS, None).unwrap();
    let reference = oracle::forward(&model, &TOKENS);
    let ln = model.ln_final();
    let pos = 6;
    let r = &reference.final_resid[pos];
    let mean = r.iter().sum::<f64>() / 16.0;
    let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    let inv = 1.0 / (var + ln.eps as f64).sqrt();
    let targets: Vec<u32> = (0..50).collect();
    for h in 0..4 {
        let c = &reference.heads[0][h][pos];
        let cm = c.iter().sum::<f64>() / 16.0;
        let normed: Vec<f64> = (0..16).map(|i| (c[i] - cm) * inv * ln.weight[i] as f64).collect();
        let rec = direct_logit_attribution(&model, &cache, Site::head(0, h), &targets, pos).unwrap();
        for t in 0..50usize {
            let want: f64 = (0..16).map(|i| normed[i] * model.unembed()[i * 50 + t] as f64).sum();
            assert!((rec.token_scores[&(t as u32)] - want).abs() < 1e-4);
        }
    }
}

#[test]
fn zero_component_scores_zero() {
    let model = random_model(&tiny_config(), 2).unwrap();
    let mut plan = InterventionPlan::new();
    plan.zero(Site::head(1, 3)).unwrap();
    let (_, cache) = model.run_with_cache(&TOKENS, Some(&plan)).unwrap();
    let rec = direct_logit_attribution(&model, &cache, Site::head(1, 3), &[0, 5, 49], 7).unwrap();
    assert!(rec.token_scores.values().all(|v| *v == 0.0));
    assert_eq!(verb_group_score(&model, &cache, 1, 3, 7, &[1, 2, 3]).unwrap(), 0.0);
}

#[test]
fn top_k_ordering_total_and_full() {
    let model = random_model(&tiny_config(), 2).unwrap();
    let (_, cache) = model.run_with_cache(&TOKENS, None).unwrap();
    let all = top_promoted_tokens(&model, &cache, Site::ffn(0), 3, 50).unwrap();
    assert_eq!(all.len(), 50);
    assert!(all.windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
    let clipped = top_promoted_tokens(&model, &cache, Site::ffn(0), 3, 500).unwrap();
    assert_eq!(clipped, all);
    let top3 = top_promoted_tokens(&model, &cache, Site::ffn(0), 3, 3).unwrap();
    assert_eq!(&all[..3], &top3[..]);
    assert!(top_promoted_tokens(&model, &cache, Site::ffn(0), 3, 0).is_err());
}

#[test]
fn head_writing_unembed_column_promotes_that_token() {
    let (archive, cfg) = identity_ov_archive(12);
    let model = Model::load(&archive, cfg).unwrap();
    let target = 7usize;
    let column: Vec<f32> = (0..16).map(|i| model.unembed()[i * 12 + target]).collect();
    let tokens = [1u32, 2, 3];
    let mut plan = InterventionPlan::new();
    plan.replace(Site::head(0, 0), column.repeat(tokens.len())).unwrap();
    let (_, cache) = model.run_with_cache(&tokens, Some(&plan)).unwrap();
    let top = top_promoted_tokens(&model, &cache, Site::head(0, 0), 2, 1).unwrap();
    assert_eq!(top[0].0, target as u32);
}

#[test]
fn ties_in_attribution_break_by_token_id() {
    let mut scores = vec![(9, 1.0), (2, 1.0), (4, 3.0)];
    rank_token_scores(&mut scores);
    assert_eq!(scores, vec![(4, 3.0), (2, 1.0), (9, 1.0)]);
}

#[test]
fn verb_group_single_token_equals_attribution() {
    let model = random_model(&tiny_config(), 4).unwrap();
    let (_, cache) = model.run_with_cache(&TOKENS, None).unwrap();
    let rec = direct_logit_attribution(&model, &cache, Site::head(0, 1), &[11], 7).unwrap();
    let g = verb_group_score(&model, &cache, 0, 1, 7, &[11]).unwrap();
    assert_eq!(g, rec.token_scores[&11]);
    let g2 = verb_group_score(&model, &cache, 0, 1, 7, &[11, 12]).unwrap();
    let r12 = direct_logit_attribution(&model, &cache, Site::head(0, 1), &[12], 7).unwrap();
    assert!((g2 - g - r12.token_scores[&12]).abs() < 1e-12);
    assert!(verb_group_score(&model, &cache, 0, 1, 7, &[]).is_err());
}

#[test]
fn verb_group_table_averages_examples() {
    let model = random_model(&tiny_config(), 4).unwrap();
    let ds = ioi_dataset();
    let t = verb_group_table(&model, &ds, &[40, 41]).unwrap();
    let mut want = 0.0;
    for e in &ds.examples {
        let (_, cache) = model.run_with_cache(&e.tokens, None).unwrap();
        want += verb_group_score(&model, &cache, 1, 2, 7, &[40, 41]).unwrap();
    }
    assert!((t.get(1, 2) - want / 4.0).abs() < 1e-9);
}

#[test]
fn logit_diff_arithmetic() {
    let logits = Logits::from_rows(vec![vec![0.0, 2.0, 0.5]]);
    assert_eq!(logit_diff(&logits, 1, 2, 0).unwrap(), 1.5);
    assert_eq!(logit_diff(&logits, 1, 1, 0).unwrap(), 0.0);
    assert!(logit_diff(&logits, 1, 3, 0).is_err());
    assert!(logit_diff(&logits, 1, 2, 1).is_err());
}

#[test]
fn copy_score_identity_ov_is_one() {
    let (archive, cfg) = identity_ov_archive(12);
    let model = Model::load(&archive, cfg).unwrap();
    let probes: Vec<u32> = (0..12).collect();
    assert_eq!(copy_score(&model, 0, 0, &probes, 1).unwrap(), 1.0);
    let table = copy_score_table(&model, &probes, COPY_PROBE_DEFAULT_K).unwrap();
    assert_eq!(table.values.get(0, 0), 1.0);
    assert_eq!(table.score_kind, ScoreKind::Copy);
}

#[test]
fn copy_score_zero_value_weights_is_chance() {
    let (mut archive, cfg) = identity_ov_archive(12);
    archive.get_mut("blocks.0.attn.W_V").unwrap().data.fill(0.0);
    let model = Model::load(&archive, cfg).unwrap();
    let probes: Vec<u32> = (3..12).collect();
    assert_eq!(copy_score(&model, 0, 0, &probes, 1).unwrap(), 0.0);
    assert!(matches!(copy_score(&model, 1, 0, &probes, 1), Err(Error::IndexOutOfBounds(_))));
}

fn uniform_model() -> Model {
    let cfg = tiny_config();
    Model::load(&uniform_attention_archive(&cfg, 5), cfg).unwrap()
}

#[test]
fn uniform_attention_closed_forms() {
    let model = uniform_model();
    let p = RandomTokenProtocol { n_samples: 2, seed: 1, ..Default::default() };
    let n = 12;
    let prev = prev_token_score(&model, n, &p).unwrap();
    let want_prev = (1..n).map(|i| 1.0 / (i as f64 + 1.0)).sum::<f64>() / (n - 1) as f64;
    let half = 6;
    let dup = duplicate_token_score(&model, half, &p).unwrap();
    let ind = induction_score(&model, half, &p).unwrap();
    let want_rep = (half..2 * half).map(|i| 1.0 / (i as f64 + 1.0)).sum::<f64>() / half as f64;
    for v in &prev.values.values {
        assert!((v - want_prev).abs() < 1e-6);
    }
    for (a, b) in dup.values.values.iter().zip(&ind.values.values) {
        assert!((a - want_rep).abs() < 1e-6 && (b - want_rep).abs() < 1e-6);
    }
}

#[test]
fn attention_scores_match_reference_patterns() {
    let model = random_model(&tiny_config(), 31).unwrap();
    let p = RandomTokenProtocol { n_samples: 3, seed: 4, ..Default::default() };
    let half = 5;
    let dup = duplicate_token_score(&model, half, &p).unwrap();
    let ind = induction_score(&model, half, &p).unwrap();
    let prev = prev_token_score(&model, 2 * half, &p).unwrap();
    // brute force: same samples, reference patterns
    let samples = random_token_samples(50, half, &p).unwrap();
    let prev_samples = random_token_samples(50, 2 * half, &p).unwrap();
    for l in 0..2 {
        for h in 0..4 {
            let (mut d, mut i, mut pv) = (0.0, 0.0, 0.0);
            for (s, ps) in samples.iter().zip(&prev_samples) {
                let seq: Vec<u32> = s.iter().chain(s.iter()).copied().collect();
                let pat = &oracle::forward(&model, &seq).patterns[l][h];
                for q in half..2 * half {
                    d += pat[q][q - half];
                    i += pat[q][q - half + 1];
                }
                let ppat = &oracle::forward(&model, ps).patterns[l][h];
                for q in 1..2 * half {
                    pv += ppat[q][q - 1];
                }
            }
            let k = samples.len() as f64;
            assert!((dup.values.get(l, h) - d / (k * half as f64)).abs() < 1e-5);
            assert!((ind.values.get(l, h) - i / (k * half as f64)).abs() < 1e-5);
            assert!((prev.values.get(l, h) - pv / (k * (2 * half - 1) as f64)).abs() < 1e-5);
        }
    }
}

#[test]
fn head_scores_reproducible_across_thread_counts() {
    let model = random_model(&tiny_alibi_config(), 8).unwrap();
    let p = RandomTokenProtocol { n_samples: 6, seed: 3, ..Default::default() };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| induction_score(&model, 8, &p).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(4));
    assert_eq!(a, induction_score(&model, 8, &p).unwrap());
    assert!(a.values.values.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn protocol_preconditions() {
    let model = uniform_model();
    let p = RandomTokenProtocol::default();
    assert!(prev_token_score(&model, 1, &p).is_err());
    assert!(duplicate_token_score(&model, 0, &p).is_err());
    assert!(induction_score(&model, 1, &p).is_err());
}

#[test]
fn s_inhibition_rejects_non_downstream_movers() {
    let model = random_model(&tiny_config(), 1).unwrap();
    let ds = ioi_dataset();
    let r = s_inhibition_effect(&model, &ds, Site::head(1, 0), &[Site::head(1, 2)]);
    assert!(matches!(r, Err(Error::LayerOrderViolation(_))));
    let r = s_inhibition_effect(&model, &ds, Site::head(1, 0), &[Site::head(1, 0)]);
    assert!(matches!(r, Err(Error::LayerOrderViolation(_))));
}

#[test]
fn s_inhibition_zero_output_candidate_has_no_effect() {
    let cfg = tiny_config();
    let mut archive = random_archive(&cfg, 12, false);
    archive.get_mut("blocks.0.attn.b_O").unwrap().data.fill(0.0);
    let wo = archive.get_mut("blocks.0.attn.W_O").unwrap();
    wo.data[..4 * 16].fill(0.0); // head 0
    let model = Model::load(&archive, cfg).unwrap();
    let rep = s_inhibition_effect(&model, &ioi_dataset(), Site::head(0, 0), &[Site::head(1, 1), Site::head(1, 3)]).unwrap();
    assert_eq!(rep.n_examples, 4);
    for m in &rep.movers {
        let d = m.delta;
        for v in [d.attn_io, d.attn_s1, d.attn_s2, d.dla_io, d.dla_s, d.dla_logit_diff] {
            assert!(v.abs() < 1e-9, "{m:?}");
        }
    }
    // a head that does write something moves the movers
    let rep = s_inhibition_effect(&model, &ioi_dataset(), Site::head(0, 1), &[Site::head(1, 1)]).unwrap();
    assert!(rep.movers[0].delta.attn_io != 0.0 || rep.movers[0].delta.dla_io != 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn duplicate_and_induction_never_both_one(seed in 0u64..500, half in 2usize..8) {
        let model = random_model(&tiny_config(), seed).unwrap();
        let p = RandomTokenProtocol { n_samples: 2, seed, ..Default::default() };
        let d = duplicate_token_score(&model, half, &p).unwrap();
        let i = induction_score(&model, half, &p).unwrap();
        for (a, b) in d.values.values.iter().zip(&i.values.values) {
            prop_assert!((0.0..=1.0).contains(a) && (0.0..=1.0).contains(b));
            prop_assert!(!(*a == 1.0 && *b == 1.0));
            prop_assert!(a + b <= 1.0 + 1e-6);
        }
    }
}
