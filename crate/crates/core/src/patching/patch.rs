//! Activation patching and three-phase path patching.
//!
//! Deltas are always `metric(patched) - metric(clean)`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{ActivationCache, Logits};
use crate::error::{Error, Result};
use crate::intervention::{InterventionPlan, InterventionSite};
use crate::matrix::HeadMatrix;
use crate::model::Model;
use crate::site::Site;

use super::pair::ContrastPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Other heads frozen to clean values, MLPs recomputed.
    #[default]
    FreezeAttnRecomputeMlp,
    /// Every other head and MLP frozen to clean values.
    FreezeAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Receiver {
    FinalLogits,
    Site { site: Site },
}

impl Receiver {
    fn stage(&self) -> usize {
        match self {
            Receiver::FinalLogits => usize::MAX,
            Receiver::Site { site } => site.stage(),
        }
    }
}

/// Clean and corrupted runs of one pair, computed once and shared read-only.
#[derive(Debug, Clone)]
pub struct PairRuns {
    pub clean_logits: Logits,
    pub clean: ActivationCache,
    pub corrupted: ActivationCache,
    pub clean_metric: f64,
    pub corrupted_metric: f64,
}

impl PairRuns {
    pub fn new(model: &Model, pair: &ContrastPair) -> Result<Self> {
        pair.validate()?;
        let (clean_logits, clean) = model.run_with_cache(&pair.clean, None)?;
        let (corr_logits, corrupted) = model.run_with_cache(&pair.corrupted, None)?;
        Ok(Self {
            clean_metric: pair.measure(&clean_logits)?,
            corrupted_metric: pair.measure(&corr_logits)?,
            clean_logits,
            clean,
            corrupted,
        })
    }
}

fn block(cache: &ActivationCache, site: Site) -> Result<Arc<[f32]>> {
    Ok(Arc::from(cache.site_block(site)?))
}

fn patch_site(site: Site, positions: Option<&[usize]>) -> InterventionSite {
    match positions {
        Some(p) => InterventionSite::at(site, p.iter().copied()),
        None => InterventionSite::all_positions(site),
    }
}

/// Patch several sites at once with their corrupted values.
pub fn activation_patch_sites(
    model: &Model,
    pair: &ContrastPair,
    sites: &[Site],
    positions: Option<&[usize]>,
) -> Result<f64> {
    let runs = PairRuns::new(model, pair)?;
    activation_patch_with(model, pair, &runs, sites, positions)
}

fn activation_patch_with(
    model: &Model,
    pair: &ContrastPair,
    runs: &PairRuns,
    sites: &[Site],
    positions: Option<&[usize]>,
) -> Result<f64> {
    let mut plan = InterventionPlan::new();
    for &s in sites {
        s.check(model.config())?;
        plan.replace(patch_site(s, positions), block(&runs.corrupted, s)?)?;
    }
    let patched = model.forward(&pair.clean, Some(&plan), false)?;
    Ok(pair.measure(&patched.logits)? - runs.clean_metric)
}

/// Replace one site's output on the clean run with its corrupted value;
/// everything downstream is recomputed.
pub fn activation_patch(model: &Model, pair: &ContrastPair, site: Site, positions: Option<&[usize]>) -> Result<f64> {
    activation_patch_sites(model, pair, &[site], positions)
}

fn check_path(model: &Model, sender: Site, receiver: Receiver) -> Result<()> {
    sender.check(model.config())?;
    if matches!(sender, Site::ResidPre { .. }) {
        return Err(Error::InvalidSite("a path sender must be a head or MLP".into()));
    }
    if let Receiver::Site { site } = receiver {
        site.check(model.config())?;
        if sender.stage() >= site.stage() {
            return Err(Error::LayerOrderViolation(format!(
                "sender {sender} is not upstream of receiver {site}"
            )));
        }
    }
    Ok(())
}

fn path_patch_with(
    model: &Model,
    pair: &ContrastPair,
    runs: &PairRuns,
    sender: Site,
    receiver: Receiver,
    freeze: FreezePolicy,
    positions: Option<&[usize]>,
) -> Result<f64> {
    check_path(model, sender, receiver)?;
    let cfg = model.config();
    let receiver_site = match receiver {
        Receiver::Site { site } => Some(site),
        Receiver::FinalLogits => None,
    };

    // phase 3: sender corrupted, everything after it frozen to clean except
    // the receiver (and MLPs under the recompute policy)
    let mut plan = InterventionPlan::new();
    plan.replace(patch_site(sender, positions), block(&runs.corrupted, sender)?)?;
    for s in Site::all_components(cfg) {
        if s == sender || Some(s) == receiver_site || s.stage() <= sender.stage() {
            continue;
        }
        if s.stage() > receiver.stage() {
            continue;
        }
        let frozen = match s {
            Site::Head { .. } => true,
            Site::Ffn { .. } => freeze == FreezePolicy::FreezeAll,
            Site::ResidPre { .. } => false,
        };
        if frozen {
            plan.replace(s, block(&runs.clean, s)?)?;
        }
    }

    let logits = match receiver_site {
        None => model.forward(&pair.clean, Some(&plan), false)?.logits,
        Some(r) => {
            let (_, phase3) = model.run_with_cache(&pair.clean, Some(&plan))?;
            // phase 4: only the receiver carries the perturbation
            let mut plan4 = InterventionPlan::new();
            plan4.replace(r, block(&phase3, r)?)?;
            model.forward(&pair.clean, Some(&plan4), false)?.logits
        }
    };
    Ok(pair.measure(&logits)? - runs.clean_metric)
}

/// Effect of the sender on the receiver through the direct path only.
pub fn path_patch(
    model: &Model,
    pair: &ContrastPair,
    sender: Site,
    receiver: Receiver,
    freeze: FreezePolicy,
    positions: Option<&[usize]>,
) -> Result<f64> {
    check_path(model, sender, receiver)?;
    let runs = PairRuns::new(model, pair)?;
    path_patch_with(model, pair, &runs, sender, receiver, freeze, positions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchResult {
    /// Mean metric delta per sender head; heads not upstream of the receiver are 0.
    pub matrix: HeadMatrix,
    pub baseline_clean: f64,
    pub baseline_corrupted: f64,
    pub receiver: Receiver,
    pub freeze_policy: FreezePolicy,
    pub metric: String,
    pub n_pairs: usize,
}

/// Order-independent mean: values are summed in sorted order.
fn stable_mean(mut v: Vec<f64>) -> f64 {
    let n = v.len() as f64;
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / n
}

/// Path-patch every head into `receiver`, averaged over pairs.
pub fn patch_sweep(
    model: &Model,
    pairs: &[ContrastPair],
    receiver: Receiver,
    freeze: FreezePolicy,
    positions: Option<&[usize]>,
) -> Result<PatchResult> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Receiver::Site { site } = receiver {
        site.check(model.config())?;
    }
    let runs = pairs
        .par_iter()
        .map(|p| PairRuns::new(model, p))
        .collect::<Result<Vec<_>>>()?;
    let senders: Vec<Site> = Site::all_heads(model.config())
        .into_iter()
        .filter(|s| s.stage() < receiver.stage())
        .collect();
    let jobs: Vec<(usize, Site)> = (0..pairs.len())
        .flat_map(|i| senders.iter().map(move |s| (i, *s)))
        .collect();
    let deltas = jobs
        .par_iter()
        .map(|(i, s)| path_patch_with(model, &pairs[*i], &runs[*i], *s, receiver, freeze, positions))
        .collect::<Result<Vec<f64>>>()?;

    let mut matrix = HeadMatrix::zeros(model.n_layers(), model.n_heads());
    for (k, s) in senders.iter().enumerate() {
        let per_pair: Vec<f64> = (0..pairs.len()).map(|i| deltas[i * senders.len() + k]).collect();
        if let Site::Head { layer, head } = *s {
            matrix.set(layer, head, stable_mean(per_pair));
        }
    }
    let metric = pairs[0].metric.name().to_string();
    Ok(PatchResult {
        matrix,
        baseline_clean: stable_mean(runs.iter().map(|r| r.clean_metric).collect()),
        baseline_corrupted: stable_mean(runs.iter().map(|r| r.corrupted_metric).collect()),
        receiver,
        freeze_policy: freeze,
        metric,
        n_pairs: pairs.len(),
    })
}
