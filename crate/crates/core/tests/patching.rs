use std::collections::BTreeMap;

use circuitscope::metrics::{Dataset, Lang, Task, TaskExample, Variant};
use circuitscope::oracle::{self, EdgeTarget};
use circuitscope::patching::*;
use circuitscope::synthetic::*;
use circuitscope::{Error, InterventionPlan, InterventionSite, Model, ModelConfig, Site};
use proptest::prelude::*;

fn ioi_example(id: usize, io: u32, s: u32) -> TaskExample {
    TaskExample {
        id: format!("ioi-{id}"),
        task: Task::Ioi,
        lang: Lang::En,
        variant: Variant::Normal,
        tokens: vec![s, 7, io, 11, 12, s, 13, 20],
        corrupted_tokens: Some(vec![s + 1, 7, 33 - id as u32, 11, 12, 30 + id as u32, 13, 20]),
        roles: BTreeMap::from([("S1".into(), 0), ("IO".into(), 2), ("S2".into(), 5), ("END".into(), 7)]),
        answer: io,
        distractor: Some(s),
        template_id: 0,
    }
}

fn ioi_dataset(n: usize) -> Dataset {
    Dataset::new((0..n).map(|i| ioi_example(i, 40 + i as u32, 45 - i as u32)).collect()).unwrap()
}

fn pair(i: usize) -> ContrastPair {
    ContrastPair::from_example(&ioi_example(i, 40 + i as u32, 45 - i as u32)).unwrap()
}

fn models() -> Vec<Model> {
    vec![
        random_model(&tiny_config(), 21).unwrap(),
        random_model(&tiny_alibi_config(), 22).unwrap(),
    ]
}

fn metric_f64(metric: &Metric, row: &[f64]) -> f64 {
    match *metric {
        Metric::LogitDiff { answer, distractor } => row[answer as usize] - row[distractor as usize],
        Metric::AnswerLogit { answer } => row[answer as usize],
        Metric::AnswerRank { .. } => unreachable!(),
    }
}

fn oracle_metric(p: &ContrastPair, logits: &[Vec<f64>]) -> f64 {
    metric_f64(&p.metric, &logits[p.end()])
}

#[test]
fn identical_inputs_give_zero_deltas() {
    for model in models() {
        let p = pair(0);
        let same = ContrastPair::new(p.clean.clone(), p.clean.clone(), p.roles.clone(), p.metric.clone()).unwrap();
        for site in Site::all_components(model.config()) {
            assert!(activation_patch(&model, &same, site, None).unwrap().abs() < 1e-5);
            for policy in [FreezePolicy::FreezeAttnRecomputeMlp, FreezePolicy::FreezeAll] {
                let d = path_patch(&model, &same, site, Receiver::FinalLogits, policy, None).unwrap();
                assert!(d.abs() < 1e-5, "{site}: {d}");
            }
        }
    }
}

#[test]
fn patching_everything_recovers_corrupted_run() {
    for model in models() {
        let p = pair(1);
        let runs = PairRuns::new(&model, &p).unwrap();
        let mut sites = vec![Site::resid_pre(0)];
        sites.extend(Site::all_components(model.config()));
        let d = activation_patch_sites(&model, &p, &sites, None).unwrap();
        let want = runs.corrupted_metric - runs.clean_metric;
        assert!((d - want).abs() < 1e-4, "{d} vs {want}");
        assert!(want.abs() > 1e-3, "pair should not be degenerate");
    }
}

#[test]
fn head_with_zero_output_weights_has_no_effect() {
    let cfg = tiny_config();
    let mut archive = random_archive(&cfg, 5, false);
    let w_o = archive.get_mut("blocks.0.attn.W_O").unwrap();
    let block = cfg.d_head * cfg.d_model;
    w_o.data[block..2 * block].fill(0.0);
    let model = Model::load(&archive, cfg).unwrap();
    let p = pair(2);
    let site = Site::head(0, 1);
    assert!(activation_patch(&model, &p, site, None).unwrap().abs() < 1e-6);
    for policy in [FreezePolicy::FreezeAttnRecomputeMlp, FreezePolicy::FreezeAll] {
        for r in [Receiver::FinalLogits, Receiver::Site { site: Site::head(1, 2) }] {
            assert!(path_patch(&model, &p, site, r, policy, None).unwrap().abs() < 1e-6);
        }
    }
}

#[test]
fn activation_patch_matches_reference_override() {
    for model in models() {
        let p = pair(0);
        let clean = oracle::forward(&model, &p.clean);
        let corrupted = oracle::forward(&model, &p.corrupted);
        let base = oracle_metric(&p, &clean.logits);
        let mut sites = vec![Site::resid_pre(0), Site::resid_pre(1)];
        sites.extend(Site::all_components(model.config()));
        for site in sites {
            let overrides = BTreeMap::from([(site, corrupted.component(site).clone())]);
            let want = oracle_metric(&p, &oracle::forward_with(&model, &p.clean, &overrides).logits) - base;
            let got = activation_patch(&model, &p, site, None).unwrap();
            assert!((got - want).abs() < 1e-4, "{site}: {got} vs {want}");
        }
    }
}

#[test]
fn single_layer_path_patch_equals_activation_patch() {
    let cfg = ModelConfig { n_layers: 1, ..tiny_config() };
    let model = random_model(&cfg, 9).unwrap();
    let p = pair(3);
    for site in Site::all_heads(&cfg) {
        let a = activation_patch(&model, &p, site, None).unwrap();
        let b = path_patch(&model, &p, site, Receiver::FinalLogits, FreezePolicy::FreezeAttnRecomputeMlp, None).unwrap();
        assert!((a - b).abs() < 1e-5, "{site}: {a} vs {b}");
    }
}

#[test]
fn freeze_all_equals_single_edge_reroute() {
    for model in models() {
        let cfg = model.config().clone();
        let p = pair(1);
        let base = oracle_metric(&p, &oracle::forward(&model, &p.clean).logits);
        let mut receivers = vec![(Receiver::FinalLogits, EdgeTarget::FinalLogits)];
        for site in [Site::ffn(0), Site::head(1, 0), Site::head(1, 3 % cfg.n_heads), Site::ffn(1)] {
            receivers.push((Receiver::Site { site }, EdgeTarget::Component(site)));
        }
        let mut senders = Site::all_heads(&cfg);
        senders.push(Site::ffn(0));
        let mut checked = 0;
        for sender in senders {
            for &(receiver, target) in &receivers {
                if let EdgeTarget::Component(t) = target {
                    if t.stage() <= sender.stage() {
                        continue;
                    }
                }
                let got = path_patch(&model, &p, sender, receiver, FreezePolicy::FreezeAll, None).unwrap();
                let logits = oracle::reroute_edge(&model, &p.clean, &p.corrupted, sender, target);
                let want = oracle_metric(&p, &logits) - base;
                assert!((got - want).abs() < 1e-4, "{sender} -> {receiver:?}: {got} vs {want}");
                checked += 1;
            }
        }
        assert!(checked >= 18);
    }
}

#[test]
fn path_patch_rejects_bad_order() {
    let model = &models()[0];
    let p = pair(0);
    let r = Receiver::Site { site: Site::head(0, 2) };
    for sender in [Site::head(1, 0), Site::head(0, 1), Site::ffn(0)] {
        assert!(matches!(
            path_patch(model, &p, sender, r, FreezePolicy::FreezeAll, None),
            Err(Error::LayerOrderViolation(_))
        ));
    }
    assert!(matches!(
        path_patch(model, &p, Site::head(5, 0), Receiver::FinalLogits, FreezePolicy::FreezeAll, None),
        Err(Error::InvalidSite(_))
    ));
}

#[test]
fn empty_position_set_is_a_no_op() {
    let model = &models()[1];
    let p = pair(2);
    let d = path_patch(model, &p, Site::head(0, 0), Receiver::FinalLogits, FreezePolicy::FreezeAll, Some(&[])).unwrap();
    assert!(d.abs() < 1e-6);
}

#[test]
fn sweep_matches_individual_path_patches() {
    let model = &models()[0];
    let pairs = vec![pair(0), pair(1), pair(2)];
    let receiver = Receiver::Site { site: Site::head(1, 1) };
    let res = patch_sweep(model, &pairs, receiver, FreezePolicy::FreezeAttnRecomputeMlp, None).unwrap();
    assert_eq!(res.n_pairs, 3);
    assert_eq!(res.metric, "logit_diff");
    for h in 0..4 {
        let want: f64 = pairs
            .iter()
            .map(|p| path_patch(model, p, Site::head(0, h), receiver, FreezePolicy::FreezeAttnRecomputeMlp, None).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((res.matrix.get(0, h) - want).abs() < 1e-9);
        // heads not upstream of the receiver are left at zero
        assert_eq!(res.matrix.get(1, h), 0.0);
    }
    let json = serde_json::to_string(&res).unwrap();
    let back: PatchResult = serde_json::from_str(&json).unwrap();
    assert_eq!(back, res);
}

#[test]
fn sweep_over_duplicated_pair_equals_single_pair() {
    let model = &models()[1];
    let one = patch_sweep(model, &[pair(0)], Receiver::FinalLogits, FreezePolicy::FreezeAll, None).unwrap();
    let many = patch_sweep(model, &vec![pair(0); 5], Receiver::FinalLogits, FreezePolicy::FreezeAll, None).unwrap();
    for (a, b) in one.matrix.values.iter().zip(&many.matrix.values) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!((one.baseline_clean - many.baseline_clean).abs() < 1e-9);
    assert!(matches!(
        patch_sweep(model, &[], Receiver::FinalLogits, FreezePolicy::FreezeAll, None),
        Err(Error::EmptyDataset)
    ));
}

#[test]
fn sweep_is_identical_across_thread_counts() {
    let model = &models()[0];
    let pairs: Vec<_> = (0..4).map(pair).collect();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| patch_sweep(model, &pairs, Receiver::FinalLogits, FreezePolicy::FreezeAttnRecomputeMlp, None).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(3));
    assert_eq!(a, run(8));
}

#[test]
fn pairs_need_corrupted_tokens() {
    let mut e = ioi_example(0, 40, 45);
    e.task = Task::Tense;
    e.lang = Lang::Zh;
    e.corrupted_tokens = None;
    e.distractor = None;
    let ds = Dataset::new(vec![e]).unwrap();
    assert!(matches!(pairs_from_dataset(&ds), Err(Error::MissingCorrupted(id)) if id == "ioi-0"));
    assert_eq!(pairs_from_dataset(&ioi_dataset(3)).unwrap().len(), 3);

    let p = pair(0);
    let short = p.corrupted[..5].to_vec();
    assert!(matches!(
        ContrastPair::new(p.clean.clone(), short, p.roles.clone(), p.metric.clone()),
        Err(Error::LengthMismatch { clean: 8, corrupted: 5 })
    ));
}

#[test]
fn empty_plan_ablation_changes_nothing() {
    let model = &models()[0];
    let groups = vec![TokenGroup { name: "names".into(), tokens: vec![40, 41, 42, 45] }];
    let r = ablate_and_eval(model, &ioi_dataset(4), &InterventionPlan::new(), &groups).unwrap();
    assert_eq!(r.baseline, r.ablated);
    assert_eq!(r.delta_accuracy, Some(0.0));
    assert_eq!(r.delta_zero_rank_rate, 0.0);
    assert_eq!(r.delta_mean_answer_rank, 0.0);
    assert_eq!(r.rank_shifts.len(), 1);
    assert_eq!(r.rank_shifts[0].mean_shift, 0.0);
}

#[test]
fn ablating_everything_leaves_embedding_only_predictions() {
    for model in models() {
        let ds = ioi_dataset(4);
        let plan = InterventionPlan::ablate_everything(model.config());
        let r = ablate_and_eval(&model, &ds, &plan, &[]).unwrap();
        for (e, got) in ds.examples.iter().zip(&r.ablated.per_example) {
            let end = e.end();
            let emb = oracle::embed(&model, &e.tokens[..=end]);
            let row = oracle::logits_of(&model, &emb[end]);
            let rank = row.iter().filter(|v| **v > row[e.answer as usize]).count();
            assert_eq!(got.answer_rank, rank, "{}", e.id);
        }
    }
}

#[test]
fn ablation_accepts_positioned_sites_and_rejects_unknown_ones() {
    let model = &models()[0];
    let mut plan = InterventionPlan::new();
    plan.zero(InterventionSite::at(Site::head(1, 0), [7])).unwrap();
    assert!(ablate_and_eval(model, &ioi_dataset(2), &plan, &[]).is_ok());
    let mut bad = InterventionPlan::new();
    bad.zero(Site::ffn(9)).unwrap();
    assert!(matches!(ablate_and_eval(model, &ioi_dataset(2), &bad, &[]), Err(Error::InvalidSite(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn no_op_patch_on_random_inputs(seed in 0u64..1000, len in 2usize..10) {
        use rand::SeedableRng;
        let model = random_model(&tiny_config(), seed).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tokens = random_tokens(&mut rng, 50, len);
        let roles = BTreeMap::from([("END".to_string(), len - 1)]);
        let p = ContrastPair::new(tokens.clone(), tokens, roles, Metric::AnswerLogit { answer: 3 }).unwrap();
        for site in Site::all_components(model.config()) {
            prop_assert!(activation_patch(&model, &p, site, None).unwrap().abs() < 1e-5);
        }
    }

    #[test]
    fn full_patch_recovers_random_pairs(seed in 0u64..1000, len in 2usize..10) {
        use rand::SeedableRng;
        let model = random_model(&tiny_alibi_config(), seed).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let clean = random_tokens(&mut rng, 50, len);
        let corrupted = random_tokens(&mut rng, 50, len);
        let roles = BTreeMap::from([("END".to_string(), len - 1)]);
        let p = ContrastPair::new(clean, corrupted, roles, Metric::LogitDiff { answer: 1, distractor: 2 }).unwrap();
        let runs = PairRuns::new(&model, &p).unwrap();
        let mut sites = vec![Site::resid_pre(0)];
        sites.extend(Site::all_components(model.config()));
        let d = activation_patch_sites(&model, &p, &sites, None).unwrap();
        prop_assert!((d - (runs.corrupted_metric - runs.clean_metric)).abs() < 1e-4);
    }
}
