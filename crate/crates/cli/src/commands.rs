use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use circuitscope::attribution::{
    copy_score_table, duplicate_token_score, induction_score, prev_token_score, rank_token_scores, site_vocab_scores,
    RandomTokenProtocol, COPY_PROBE_DEFAULT_K,
};
use circuitscope::flow::{activation_frequency, build_flow_graph, export_graph, ExportFormat, DEFAULT_TAU};
use circuitscope::metrics::{compare_circuits, evaluate, Dataset};
use circuitscope::patching::{ablate_and_eval, pairs_from_dataset, patch_sweep, TokenGroup};
use circuitscope::{selftest, HeadMatrix, InterventionPlan, Model, Site, Vocab};
use log::{info, warn};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::output::{Envelope, Outputs};

const DEFAULT_TOPK: usize = 10;
const CONTRIBUTION_FORMULA: &str = "normalized positive projection: max(0, <t, o>/|o|^2) / sum of positive parts";

pub struct Loaded {
    pub model: Model,
    pub vocab: Vocab,
}

pub fn load_model(dir: &Path) -> Result<Loaded> {
    let model = Model::load_dir(dir).with_context(|| format!("loading model from {}", dir.display()))?;
    let vocab_path = dir.join("vocab.json");
    let vocab = if vocab_path.exists() {
        let v = Vocab::load(&vocab_path)?;
        v.check(model.vocab_size())?;
        v
    } else {
        info!("no vocab.json in {}; tokens shown by id", dir.display());
        Vocab::default()
    };
    Ok(Loaded { model, vocab })
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let ds = Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    ds.kind()?;
    Ok(ds)
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    command: &'static str,
    model: Option<&'a Model>,
    dataset: Option<&'a Dataset>,
}

impl Ctx<'_> {
    fn envelope<T: Serialize>(&self, result: T) -> Envelope<'_, T> {
        Envelope {
            tool: "circuitscope",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            model_fingerprint: self.model.map(|m| m.fingerprint().to_string()),
            dataset_digest: self.dataset.map(Dataset::digest),
            config: self.cfg,
            result,
        }
    }
}

fn finish(cfg: &ExperimentConfig, out: Outputs) -> Result<()> {
    for p in out.commit(&cfg.output_dir())? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn eval(cfg: &ExperimentConfig) -> Result<()> {
    let Loaded { model, .. } = load_model(cfg.model_dir()?)?;
    let ds = load_dataset(cfg.dataset_path()?)?;
    let report = evaluate(&model, &ds, None)?;
    match report.accuracy {
        Some(a) => println!("n={} accuracy={:.4} zero_rank={:.4}", report.n, a, report.zero_rank_rate),
        None => println!("n={} zero_rank={:.4}", report.n, report.zero_rank_rate),
    }
    let ctx = Ctx { cfg, command: "eval", model: Some(&model), dataset: Some(&ds) };
    let mut out = Outputs::default();
    out.add_json("eval_report.json", &ctx.envelope(&report))?;
    finish(cfg, out)
}

pub fn patch(cfg: &ExperimentConfig) -> Result<()> {
    let Loaded { model, .. } = load_model(cfg.model_dir()?)?;
    let ds = load_dataset(cfg.dataset_path()?)?;
    let pairs = pairs_from_dataset(&ds)?;
    let receiver = cfg.receiver()?;
    let freeze = cfg.freeze_policy()?;
    let result = patch_sweep(&model, &pairs, receiver, freeze, None)?;
    println!(
        "baseline clean={:.4} corrupted={:.4} over {} pairs",
        result.baseline_clean, result.baseline_corrupted, result.n_pairs
    );
    for (l, h, v) in result.matrix.ranked_by_magnitude().into_iter().take(cfg.topk.unwrap_or(DEFAULT_TOPK)) {
        println!("{l}.{h}\t{v:+.5}");
    }
    let ctx = Ctx { cfg, command: "patch", model: Some(&model), dataset: Some(&ds) };
    let mut out = Outputs::default();
    out.add_json("patch_result.json", &ctx.envelope(&result))?;
    out.add("patch_matrix.csv", result.matrix.to_csv().into_bytes());
    finish(cfg, out)
}

#[derive(Serialize)]
struct ExampleFlow {
    id: String,
    n_nodes: usize,
    n_edges: usize,
    flagged_heads: Vec<(usize, usize)>,
}

#[derive(Serialize)]
struct FlowReport {
    tau: f64,
    contribution_formula: &'static str,
    n_examples: usize,
    frequency: HeadMatrix,
    per_example: Vec<ExampleFlow>,
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn flow(cfg: &ExperimentConfig) -> Result<()> {
    let tau = cfg.tau.unwrap_or(DEFAULT_TAU);
    circuitscope::flow::check_threshold(tau)?;
    let Loaded { model, .. } = load_model(cfg.model_dir()?)?;
    let ds = load_dataset(cfg.dataset_path()?)?;
    let frequency = activation_frequency(&model, &ds, tau)?;
    let mut out = Outputs::default();
    let mut per_example = vec![];
    for e in &ds.examples {
        let (_, cache) = model.run_with_cache(&e.tokens[..=e.end()], None)?;
        let g = build_flow_graph(&model, &cache, tau)?;
        let stem = file_stem(&e.id);
        out.add(format!("graphs/{stem}.dot"), export_graph(&g, ExportFormat::Dot)?);
        out.add(format!("graphs/{stem}.json"), export_graph(&g, ExportFormat::Json)?);
        per_example.push(ExampleFlow {
            id: e.id.clone(),
            n_nodes: g.nodes.len(),
            n_edges: g.edges.len(),
            flagged_heads: g.head_nodes().collect::<BTreeSet<_>>().into_iter().collect(),
        });
    }
    let active = frequency.values.iter().filter(|v| **v > 0.0).count();
    println!("tau={tau} examples={} heads with nonzero frequency={active}", ds.len());
    out.add("frequency.csv", frequency.to_csv().into_bytes());
    let report = FlowReport { tau, contribution_formula: CONTRIBUTION_FORMULA, n_examples: ds.len(), frequency, per_example };
    let ctx = Ctx { cfg, command: "flow", model: Some(&model), dataset: Some(&ds) };
    out.add_json("flow_report.json", &ctx.envelope(&report))?;
    finish(cfg, out)
}

fn zero_plan(model: &Model, cfg: &ExperimentConfig) -> Result<InterventionPlan> {
    let mut plan = InterventionPlan::new();
    for (l, h) in cfg.head_list()? {
        let s = Site::head(l, h);
        s.check(model.config())?;
        plan.zero(s)?;
    }
    for l in cfg.layer_list()? {
        let s = Site::ffn(l);
        s.check(model.config())?;
        plan.zero(s)?;
    }
    Ok(plan)
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<()> {
    let Loaded { model, .. } = load_model(cfg.model_dir()?)?;
    let ds = load_dataset(cfg.dataset_path()?)?;
    let plan = zero_plan(&model, cfg)?;
    if plan.is_empty() {
        warn!("no --heads or --layers given; ablating nothing");
    }
    let uniq = |v: Vec<u32>| v.into_iter().collect::<BTreeSet<_>>().into_iter().collect::<Vec<_>>();
    let groups = vec![
        TokenGroup { name: "answers".into(), tokens: uniq(ds.answer_tokens()) },
        TokenGroup { name: "distractors".into(), tokens: uniq(ds.distractor_tokens()) },
    ];
    let report = ablate_and_eval(&model, &ds, &plan, &groups)?;
    println!(
        "zero_rank {:.4} -> {:.4} (delta {:+.4})",
        report.baseline.zero_rank_rate, report.ablated.zero_rank_rate, report.delta_zero_rank_rate
    );
    if let Some(d) = report.delta_accuracy {
        println!("accuracy delta {d:+.4}");
    }
    for g in &report.rank_shifts {
        println!("{}: mean rank shift {:+.3}", g.name, g.mean_shift);
    }
    let ctx = Ctx { cfg, command: "ablate", model: Some(&model), dataset: Some(&ds) };
    let mut out = Outputs::default();
    out.add_json("ablation_report.json", &ctx.envelope(&report))?;
    finish(cfg, out)
}

#[derive(Serialize)]
struct LensRow {
    token: u32,
    display: String,
    score: f64,
}

#[derive(Serialize)]
struct LensTable {
    site: Site,
    rows: Vec<LensRow>,
}

pub fn lens(cfg: &ExperimentConfig) -> Result<()> {
    let Loaded { model, vocab } = load_model(cfg.model_dir()?)?;
    let ds = load_dataset(cfg.dataset_path()?)?;
    let mut sites: Vec<Site> = cfg.head_list()?.into_iter().map(|(l, h)| Site::head(l, h)).collect();
    sites.extend(cfg.layer_list()?.into_iter().map(Site::ffn));
    if sites.is_empty() {
        sites = Site::all_components(model.config());
    }
    for s in &sites {
        s.check(model.config())?;
    }
    let mut k = cfg.topk.unwrap_or(DEFAULT_TOPK);
    if k == 0 {
        bail!("--topk must be at least 1");
    }
    if k > model.vocab_size() {
        warn!("--topk {k} exceeds the vocabulary; clipped to {}", model.vocab_size());
        k = model.vocab_size();
    }
    let caches = ds
        .examples
        .iter()
        .map(|e| Ok((e.end(), model.run_with_cache(&e.tokens[..=e.end()], None)?.1)))
        .collect::<Result<Vec<_>>>()?;
    let mut tables = vec![];
    for &site in &sites {
        let mut mean = vec![0.0f64; model.vocab_size()];
        for (end, cache) in &caches {
            for (m, v) in mean.iter_mut().zip(site_vocab_scores(&model, cache, site, *end)?) {
                *m += v;
            }
        }
        let n = caches.len() as f64;
        let mut scored: Vec<(u32, f64)> = mean.into_iter().enumerate().map(|(t, s)| (t as u32, s / n)).collect();
        rank_token_scores(&mut scored);
        let rows: Vec<LensRow> = scored
            .into_iter()
            .take(k)
            .map(|(token, score)| LensRow { token, display: vocab.display(token), score })
            .collect();
        let shown: Vec<String> = rows.iter().map(|r| format!("{:?} {:+.3}", r.display, r.score)).collect();
        println!("{site}: {}", shown.join(", "));
        tables.push(LensTable { site, rows });
    }
    let ctx = Ctx { cfg, command: "lens", model: Some(&model), dataset: Some(&ds) };
    let mut out = Outputs::default();
    out.add_json("lens_report.json", &ctx.envelope(&tables))?;
    finish(cfg, out)
}

/// A bare matrix, or any report whose `result.frequency` is one.
fn load_frequency(path: &Path) -> Result<HeadMatrix> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let m = v.pointer("/result/frequency").cloned().unwrap_or(v);
    serde_json::from_value(m).with_context(|| format!("{} holds no frequency matrix", path.display()))
}

pub fn compare(cfg: &ExperimentConfig, a: &Path, b: &Path) -> Result<()> {
    for p in [a, b] {
        if !p.exists() {
            bail!("path does not exist: {}", p.display());
        }
    }
    let (fa, fb) = (load_frequency(a)?, load_frequency(b)?);
    let report = compare_circuits(&fa, &fb, cfg.freq_threshold.unwrap_or(0.0))?;
    match report.pearson_rho {
        Some(r) => println!("pearson={r:.4} jaccard={:.4}", report.jaccard),
        None => println!("pearson=undefined jaccard={:.4}", report.jaccard),
    }
    println!("shared={} only_a={} only_b={}", report.shared_heads.len(), report.only_a.len(), report.only_b.len());
    #[derive(Serialize)]
    struct Compared<'a> {
        a: &'a Path,
        b: &'a Path,
        #[serde(flatten)]
        report: &'a circuitscope::metrics::ComparisonReport,
    }
    let ctx = Ctx { cfg, command: "compare", model: None, dataset: None };
    let mut out = Outputs::default();
    out.add_json("comparison.json", &ctx.envelope(Compared { a, b, report: &report }))?;
    out.add("abs_diff.csv", report.abs_diff.to_csv().into_bytes());
    finish(cfg, out)
}

pub fn scores(cfg: &ExperimentConfig, seq_len: usize, n_samples: usize) -> Result<()> {
    let Loaded { model, vocab } = load_model(cfg.model_dir()?)?;
    let ds = cfg.dataset_path.as_ref().map(|_| load_dataset(cfg.dataset_path()?)).transpose()?;
    let protocol = RandomTokenProtocol { n_samples, seed: cfg.seed(), excluded: vocab.special_ids.clone() };
    let mut tables = vec![
        prev_token_score(&model, seq_len, &protocol)?,
        duplicate_token_score(&model, seq_len, &protocol)?,
        induction_score(&model, seq_len, &protocol)?,
    ];
    let probes: Vec<u32> = match &ds {
        Some(d) => d.answer_tokens().into_iter().collect::<BTreeSet<_>>().into_iter().collect(),
        None => (0..model.vocab_size() as u32).filter(|t| !vocab.special_ids.contains(t)).collect(),
    };
    tables.push(copy_score_table(&model, &probes, cfg.topk.unwrap_or(COPY_PROBE_DEFAULT_K))?);
    let mut out = Outputs::default();
    for t in &tables {
        let name = serde_json::to_value(t.score_kind)?.as_str().unwrap_or("score").to_string();
        if let Some((l, h, v)) = t.values.ranked_by_magnitude().first() {
            println!("{name}: strongest head {l}.{h} ({v:.3})");
        }
        out.add(format!("{name}.csv"), t.values.to_csv().into_bytes());
    }
    let ctx = Ctx { cfg, command: "scores", model: Some(&model), dataset: ds.as_ref() };
    out.add_json("head_scores.json", &ctx.envelope(&tables))?;
    finish(cfg, out)
}

/// Returns whether every check passed.
pub fn selftest_cmd() -> bool {
    let start = std::time::Instant::now();
    let checks = selftest::run_all();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{} checks in {:.2}s", checks.len(), start.elapsed().as_secs_f64());
    checks.iter().all(|c| c.passed)
}
