//! Effect of zero-ablating a candidate S-inhibition head on downstream name movers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::ActivationCache;
use crate::error::{Error, Result};
use crate::intervention::InterventionPlan;
use crate::metrics::{Dataset, TaskExample};
use crate::model::Model;
use crate::site::Site;

use super::dla::site_vocab_scores;

/// What one mover does at END, averaged over the dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MoverReadout {
    pub attn_io: f64,
    pub attn_s1: f64,
    pub attn_s2: f64,
    /// Direct effect on the IO (answer) logit.
    pub dla_io: f64,
    /// Direct effect on the S (distractor) logit.
    pub dla_s: f64,
    pub dla_logit_diff: f64,
}

impl MoverReadout {
    fn add(&mut self, o: &MoverReadout) {
        self.attn_io += o.attn_io;
        self.attn_s1 += o.attn_s1;
        self.attn_s2 += o.attn_s2;
        self.dla_io += o.dla_io;
        self.dla_s += o.dla_s;
        self.dla_logit_diff += o.dla_logit_diff;
    }

    fn scale(&mut self, f: f64) {
        self.attn_io *= f;
        self.attn_s1 *= f;
        self.attn_s2 *= f;
        self.dla_io *= f;
        self.dla_s *= f;
        self.dla_logit_diff *= f;
    }

    fn minus(&self, o: &MoverReadout) -> MoverReadout {
        MoverReadout {
            attn_io: self.attn_io - o.attn_io,
            attn_s1: self.attn_s1 - o.attn_s1,
            attn_s2: self.attn_s2 - o.attn_s2,
            dla_io: self.dla_io - o.dla_io,
            dla_s: self.dla_s - o.dla_s,
            dla_logit_diff: self.dla_logit_diff - o.dla_logit_diff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoverEffect {
    pub mover: Site,
    pub baseline: MoverReadout,
    pub ablated: MoverReadout,
    /// `ablated - baseline`.
    pub delta: MoverReadout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SInhibitionReport {
    pub candidate: Site,
    pub n_examples: usize,
    pub movers: Vec<MoverEffect>,
}

fn readout(model: &Model, cache: &ActivationCache, e: &TaskExample, mover: Site) -> Result<MoverReadout> {
    let (layer, head) = match mover {
        Site::Head { layer, head } => (layer, head),
        other => return Err(Error::InvalidSite(format!("{other} is not a head"))),
    };
    let end = e.end();
    let distractor = e
        .distractor
        .ok_or_else(|| Error::InvalidExample { id: e.id.clone(), reason: "no distractor".into() })?;
    let row = cache.attn_row(layer, head, end);
    let scores = site_vocab_scores(model, cache, mover, end)?;
    let (dla_io, dla_s) = (scores[e.answer as usize], scores[distractor as usize]);
    Ok(MoverReadout {
        attn_io: row[e.role("IO")?] as f64,
        attn_s1: row[e.role("S1")?] as f64,
        attn_s2: row[e.role("S2")?] as f64,
        dla_io,
        dla_s,
        dla_logit_diff: dla_io - dla_s,
    })
}

pub fn s_inhibition_effect(
    model: &Model,
    dataset: &Dataset,
    candidate: Site,
    movers: &[Site],
) -> Result<SInhibitionReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    candidate.check(model.config())?;
    for m in movers {
        m.check(model.config())?;
        if m.layer() <= candidate.layer() {
            return Err(Error::LayerOrderViolation(format!(
                "mover {m} is not strictly after candidate {candidate}"
            )));
        }
    }
    let mut plan = InterventionPlan::new();
    plan.zero(candidate)?;

    let per_example = dataset
        .examples
        .par_iter()
        .map(|e| {
            let tokens = &e.tokens[..=e.end()];
            let (_, base) = model.run_with_cache(tokens, None)?;
            let (_, abl) = model.run_with_cache(tokens, Some(&plan))?;
            movers
                .iter()
                .map(|m| Ok((readout(model, &base, e, *m)?, readout(model, &abl, e, *m)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_example.len() as f64;
    let movers = movers
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut baseline = MoverReadout::default();
            let mut ablated = MoverReadout::default();
            for ex in &per_example {
                baseline.add(&ex[i].0);
                ablated.add(&ex[i].1);
            }
            baseline.scale(1.0 / n);
            ablated.scale(1.0 / n);
            MoverEffect {
                mover: *m,
                delta: ablated.minus(&baseline),
                baseline,
                ablated,
            }
        })
        .collect();
    Ok(SInhibitionReport {
        candidate,
        n_examples: per_example.len(),
        movers,
    })
}
