//! Property suite on small random models. Each check reports its worst
//! observed error against a fixed tolerance.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{induction_score, layernorm_bias_scores, site_vocab_scores, RandomTokenProtocol};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::flow::{activation_frequency, build_flow_graph, residual_contributions, DEFAULT_TAU};
use crate::metrics::{evaluate, Dataset, Lang, Task, TaskExample, Variant};
use crate::model::Model;
use crate::oracle::{self, EdgeTarget};
use crate::patching::{
    activation_patch, activation_patch_sites, patch_sweep, path_patch, ContrastPair, FreezePolicy, Metric, PairRuns,
    Receiver,
};
use crate::site::Site;
use crate::synthetic::{random_model, random_tokens, tiny_alibi_config, tiny_config};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn from_worst(name: &str, worst: Result<f64>, tol: f64) -> Self {
        match worst {
            Ok(w) => Check {
                name: name.into(),
                passed: w < tol,
                detail: format!("worst {w:.3e} (tolerance {tol:.0e})"),
            },
            Err(e) => Check { name: name.into(), passed: false, detail: format!("error: {e}") },
        }
    }

    fn from_bool(name: &str, ok: Result<bool>, what: &str) -> Self {
        match ok {
            Ok(p) => Check {
                name: name.into(),
                passed: p,
                detail: if p { what.to_string() } else { format!("violated: {what}") },
            },
            Err(e) => Check { name: name.into(), passed: false, detail: format!("error: {e}") },
        }
    }
}

const SEEDS: [u64; 4] = [1, 2, 3, 4];

fn configs() -> [ModelConfig; 2] {
    [tiny_config(), tiny_alibi_config()]
}

fn models() -> Result<Vec<Model>> {
    let mut out = vec![];
    for cfg in configs() {
        for s in SEEDS {
            out.push(random_model(&cfg, 1000 + s)?);
        }
    }
    Ok(out)
}

fn tokens(seed: u64, len: usize, vocab: usize) -> Vec<u32> {
    random_tokens(&mut ChaCha8Rng::seed_from_u64(seed), vocab, len)
}

fn random_pair(seed: u64, len: usize, vocab: usize) -> Result<ContrastPair> {
    let clean = tokens(seed, len, vocab);
    let corrupted = tokens(seed ^ 0x5eed, len, vocab);
    let roles = BTreeMap::from([(TaskExample::END.to_string(), len - 1)]);
    ContrastPair::new(clean, corrupted, roles, Metric::LogitDiff { answer: 1, distractor: 2 })
}

fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs() / (1.0 + (*x as f64).abs().max((*y as f64).abs())))
        .fold(0.0, f64::max)
}

/// Worst relative residual-additivity error; attention rows are checked to be
/// causal distributions (sum within 1e-5, exact zeros above the diagonal).
pub fn residual_additivity() -> Check {
    let run = || -> Result<(f64, f64)> {
        let (mut worst_add, mut worst_row) = (0.0f64, 0.0f64);
        for (i, model) in models()?.iter().enumerate() {
            let toks = tokens(i as u64, 12, model.vocab_size());
            let (_, cache) = model.run_with_cache(&toks, None)?;
            for l in 0..model.n_layers() {
                for p in 0..toks.len() {
                    let mut mid = cache.resid_pre(l, p).to_vec();
                    for h in 0..model.n_heads() {
                        mid.iter_mut().zip(cache.head_out(l, h, p)).for_each(|(m, v)| *m += v);
                        let row = cache.attn_row(l, h, p);
                        let sum: f64 = row.iter().map(|v| *v as f64).sum();
                        let above = row[p + 1..].iter().any(|v| *v != 0.0);
                        worst_row = worst_row.max(if above { f64::INFINITY } else { (sum - 1.0).abs() });
                    }
                    worst_add = worst_add.max(rel_err(&mid, cache.resid_mid(l, p)));
                    let mut post = cache.resid_mid(l, p).to_vec();
                    post.iter_mut().zip(cache.ffn_out(l, p)).for_each(|(m, v)| *m += v);
                    worst_add = worst_add.max(rel_err(&post, cache.resid_post(l, p)));
                }
            }
        }
        Ok((worst_add, worst_row))
    };
    match run() {
        Ok((add, row)) => Check {
            name: "residual additivity and attention stochasticity".into(),
            passed: add < 1e-4 && row <= 1e-5,
            detail: format!("additivity worst {add:.3e} (tolerance 1e-4), row-sum worst {row:.3e} (tolerance 1e-5)"),
        },
        Err(e) => Check::from_worst("residual additivity and attention stochasticity", Err(e), 0.0),
    }
}

/// Carry, component and layernorm-bias scores summed against the logits.
pub fn dla_completeness() -> Check {
    let run = || -> Result<f64> {
        let mut worst = 0.0f64;
        for (i, model) in models()?.iter().enumerate() {
            let toks = tokens(50 + i as u64, 10, model.vocab_size());
            let (logits, cache) = model.run_with_cache(&toks, None)?;
            let mut sites = vec![Site::resid_pre(0)];
            sites.extend(Site::all_components(model.config()));
            for pos in 0..toks.len() {
                let mut total = layernorm_bias_scores(model);
                for &s in &sites {
                    let sc = site_vocab_scores(model, &cache, s, pos)?;
                    total.iter_mut().zip(&sc).for_each(|(t, v)| *t += v);
                }
                for (got, want) in total.iter().zip(logits.row(pos)) {
                    worst = worst.max((got - *want as f64).abs());
                }
            }
        }
        Ok(worst)
    };
    Check::from_worst("frozen-scale DLA completeness", run(), 1e-3)
}

pub fn patching_no_op() -> Check {
    let run = || -> Result<f64> {
        let mut worst = 0.0f64;
        for (i, model) in models()?.iter().enumerate() {
            let p = random_pair(70 + i as u64, 8, model.vocab_size())?;
            let same = ContrastPair::new(p.clean.clone(), p.clean.clone(), p.roles.clone(), p.metric.clone())?;
            let mut sites = vec![Site::resid_pre(0), Site::resid_pre(1)];
            sites.extend(Site::all_components(model.config()));
            for s in sites {
                worst = worst.max(activation_patch(model, &same, s, None)?.abs());
            }
            for s in Site::all_heads(model.config()) {
                for policy in [FreezePolicy::FreezeAttnRecomputeMlp, FreezePolicy::FreezeAll] {
                    worst = worst.max(path_patch(model, &same, s, Receiver::FinalLogits, policy, None)?.abs());
                }
            }
        }
        Ok(worst)
    };
    Check::from_worst("patching no-op", run(), 1e-5)
}

pub fn full_patch_recovery() -> Check {
    let run = || -> Result<f64> {
        let mut worst = 0.0f64;
        for (i, model) in models()?.iter().enumerate() {
            let p = random_pair(90 + i as u64, 9, model.vocab_size())?;
            let runs = PairRuns::new(model, &p)?;
            let mut sites = vec![Site::resid_pre(0)];
            sites.extend(Site::all_components(model.config()));
            let d = activation_patch_sites(model, &p, &sites, None)?;
            worst = worst.max((d - (runs.corrupted_metric - runs.clean_metric)).abs());
        }
        Ok(worst)
    };
    Check::from_worst("full-patch recovery", run(), 1e-4)
}

/// Freeze-all path patching against the single-edge reroute oracle, for
/// every sender and every downstream receiver.
pub fn path_patch_oracle() -> Check {
    let run = || -> Result<f64> {
        let mut worst = 0.0f64;
        for (i, model) in models()?.iter().enumerate() {
            let cfg = model.config();
            let p = random_pair(110 + i as u64, 7, model.vocab_size())?;
            let end = p.end();
            let metric = |rows: &[Vec<f64>]| match p.metric {
                Metric::LogitDiff { answer, distractor } => rows[end][answer as usize] - rows[end][distractor as usize],
                _ => unreachable!(),
            };
            let base = metric(&oracle::forward(model, &p.clean).logits);
            let components = Site::all_components(cfg);
            let mut receivers = vec![(Receiver::FinalLogits, EdgeTarget::FinalLogits)];
            receivers.extend(components.iter().map(|s| (Receiver::Site { site: *s }, EdgeTarget::Component(*s))));
            for &sender in &components {
                for &(receiver, target) in &receivers {
                    if let EdgeTarget::Component(t) = target {
                        if t.stage() <= sender.stage() {
                            continue;
                        }
                    }
                    let got = path_patch(model, &p, sender, receiver, FreezePolicy::FreezeAll, None)?;
                    let want = metric(&oracle::reroute_edge(model, &p.clean, &p.corrupted, sender, target)) - base;
                    worst = worst.max((got - want).abs());
                }
            }
        }
        Ok(worst)
    };
    Check::from_worst("path-patch oracle equivalence", run(), 1e-4)
}

pub fn flow_signed_completeness() -> Check {
    flow_sums("flow signed contributions sum to one", |r| r.signed_sum(), 1e-4)
}

pub fn flow_normalized_completeness() -> Check {
    flow_sums("flow normalized contributions sum to one", |r| r.normalized_sum(), 1e-6)
}

fn flow_sums(name: &str, f: impl Fn(&crate::flow::ContributionRecord) -> f64, tol: f64) -> Check {
    let run = || -> Result<f64> {
        let mut worst = 0.0f64;
        for (i, model) in models()?.iter().enumerate() {
            let toks = tokens(130 + i as u64, 10, model.vocab_size());
            let (_, cache) = model.run_with_cache(&toks, None)?;
            for l in 0..model.n_layers() {
                for p in 0..toks.len() {
                    let r = residual_contributions(model, &cache, l, p)?;
                    if r.degenerate {
                        continue;
                    }
                    if r.terms.iter().any(|t| t.normalized < 0.0) {
                        return Ok(f64::INFINITY);
                    }
                    worst = worst.max((f(&r) - 1.0).abs());
                }
            }
        }
        Ok(worst)
    };
    Check::from_worst(name, run(), tol)
}

fn tiny_dataset(seed: u64, n: usize, vocab: usize) -> Result<Dataset> {
    let examples = (0..n)
        .map(|i| {
            let toks = tokens(seed + i as u64, 6 + i % 5, vocab);
            let end = toks.len() - 1;
            TaskExample {
                id: format!("st-{i}"),
                task: Task::Tense,
                lang: Lang::En,
                variant: Variant::Normal,
                tokens: toks,
                corrupted_tokens: None,
                roles: BTreeMap::from([(TaskExample::END.to_string(), end)]),
                answer: 3,
                distractor: Some(5),
                template_id: 0,
            }
        })
        .collect();
    Dataset::new(examples)
}

const TAUS: [f64; 6] = [0.0, 0.01, DEFAULT_TAU, 0.08, 0.2, 0.6];

pub fn flow_monotonicity() -> Check {
    let run = || -> Result<bool> {
        for (i, model) in models()?.iter().enumerate() {
            let toks = tokens(150 + i as u64, 10, model.vocab_size());
            let (_, cache) = model.run_with_cache(&toks, None)?;
            let graphs = TAUS.iter().map(|t| build_flow_graph(model, &cache, *t)).collect::<Result<Vec<_>>>()?;
            if graphs.windows(2).any(|w| !w[1].nodes.is_subset(&w[0].nodes)) {
                return Ok(false);
            }
            let ds = tiny_dataset(170 + i as u64, 4, model.vocab_size())?;
            let freqs = TAUS.iter().map(|t| activation_frequency(model, &ds, *t)).collect::<Result<Vec<_>>>()?;
            for w in freqs.windows(2) {
                if w[1].values.iter().zip(&w[0].values).any(|(hi, lo)| hi > lo) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    };
    Check::from_bool(
        "flow threshold monotonicity",
        run(),
        "graph nodes and frequencies never grow as the threshold rises",
    )
}

/// Sweeps, frequencies, head scores and evaluation reports compared bit for
/// bit across repeated runs and thread counts 1, 3 and 8.
pub fn determinism() -> Check {
    let run = || -> Result<bool> {
        let model = random_model(&tiny_alibi_config(), 77)?;
        let vocab = model.vocab_size();
        let pairs = (0..3).map(|i| random_pair(200 + i, 8, vocab)).collect::<Result<Vec<_>>>()?;
        let ds = tiny_dataset(210, 6, vocab)?;
        let protocol = RandomTokenProtocol { n_samples: 4, seed: 9, ..Default::default() };
        let once = || -> Result<String> {
            let sweep = patch_sweep(&model, &pairs, Receiver::FinalLogits, FreezePolicy::FreezeAttnRecomputeMlp, None)?;
            let freq = activation_frequency(&model, &ds, DEFAULT_TAU)?;
            let ind = induction_score(&model, 6, &protocol)?;
            let eval = evaluate(&model, &ds, None)?;
            Ok(serde_json::to_string(&(sweep, freq, ind, eval))?)
        };
        let mut outputs = vec![];
        for threads in [1, 3, 8] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| crate::error::Error::InvalidArgument(e.to_string()))?;
            outputs.push(pool.install(once)?);
        }
        outputs.push(once()?);
        Ok(outputs.windows(2).all(|w| w[0] == w[1]))
    };
    Check::from_bool("determinism across runs and worker counts", run(), "identical outputs")
}

/// Every check, in a fixed order.
pub fn run_all() -> Vec<Check> {
    vec![
        residual_additivity(),
        dla_completeness(),
        patching_no_op(),
        full_patch_recovery(),
        path_patch_oracle(),
        flow_signed_completeness(),
        flow_normalized_completeness(),
        flow_monotonicity(),
        determinism(),
    ]
}
