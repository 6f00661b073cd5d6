//! Declarative edits applied during a forward pass.
//!
//! An action runs after its component's natural computation and before the
//! result joins the residual stream. For `ResidPre` sites the stream entering
//! the block is edited directly.

use std::sync::Arc;

use crate::cache::ActivationCache;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::site::Site;

/// A site plus the positions an action touches (`None` = every position).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InterventionSite {
    pub site: Site,
    pub positions: Option<Vec<usize>>,
}

impl InterventionSite {
    pub fn all_positions(site: Site) -> Self {
        Self {
            site,
            positions: None,
        }
    }

    pub fn at(site: Site, positions: impl IntoIterator<Item = usize>) -> Self {
        let mut p: Vec<usize> = positions.into_iter().collect();
        p.sort_unstable();
        p.dedup();
        Self {
            site,
            positions: Some(p),
        }
    }

    fn covers(&self, pos: usize) -> bool {
        match &self.positions {
            None => true,
            Some(p) => p.binary_search(&pos).is_ok(),
        }
    }
}

impl From<Site> for InterventionSite {
    fn from(site: Site) -> Self {
        Self::all_positions(site)
    }
}

/// Per-position mean over a set of reference runs.
#[derive(Debug, Clone)]
pub struct MeanReference {
    /// One row-major `[len_i, d_model]` block per reference run.
    runs: Vec<Vec<f32>>,
    width: usize,
}

impl MeanReference {
    pub fn from_caches(caches: &[&ActivationCache], site: Site) -> Result<Self> {
        if caches.is_empty() {
            return Err(Error::InvalidPlan("mean reference needs at least one cache".into()));
        }
        let width = caches[0].d_model();
        let runs = caches
            .iter()
            .map(|c| c.site_block(site).map(<[f32]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { runs, width })
    }

    /// Mean at `pos`; a run shorter than `pos + 1` contributes its last position.
    pub fn row(&self, pos: usize) -> Vec<f32> {
        let mut acc = vec![0.0f32; self.width];
        for run in &self.runs {
            let len = run.len() / self.width;
            let p = pos.min(len - 1);
            for (a, v) in acc.iter_mut().zip(&run[p * self.width..(p + 1) * self.width]) {
                *a += v;
            }
        }
        let n = self.runs.len() as f32;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

#[derive(Debug, Clone)]
pub enum Action {
    Zero,
    /// Row-major `[seq_len, d_model]` values covering the whole run; only the
    /// site's positions are written.
    Replace(Arc<[f32]>),
    Mean(Arc<MeanReference>),
}

#[derive(Debug, Clone, Default)]
pub struct InterventionPlan {
    items: Vec<(InterventionSite, Action)>,
}

impl InterventionPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn items(&self) -> &[(InterventionSite, Action)] {
        &self.items
    }

    /// Add an action. Two actions on the exact same site are rejected.
    pub fn push(&mut self, site: impl Into<InterventionSite>, action: Action) -> Result<&mut Self> {
        let site = site.into();
        if self.items.iter().any(|(s, _)| *s == site) {
            return Err(Error::InvalidPlan(format!(
                "duplicate action on {}",
                site.site
            )));
        }
        self.items.push((site, action));
        Ok(self)
    }

    pub fn zero(&mut self, site: impl Into<InterventionSite>) -> Result<&mut Self> {
        self.push(site, Action::Zero)
    }

    pub fn replace(
        &mut self,
        site: impl Into<InterventionSite>,
        values: impl Into<Arc<[f32]>>,
    ) -> Result<&mut Self> {
        self.push(site, Action::Replace(values.into()))
    }

    /// Zero every head and MLP output in the model.
    pub fn ablate_everything(config: &ModelConfig) -> Self {
        let mut plan = Self::new();
        for site in Site::all_components(config) {
            plan.items.push((site.into(), Action::Zero));
        }
        plan
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        for (site, action) in &self.items {
            site.site.check(config)?;
            if let Some(ps) = &site.positions {
                if let Some(p) = ps.iter().find(|p| **p >= seq_len) {
                    return Err(Error::InvalidSite(format!(
                        "{}: position {p} beyond sequence length {seq_len}",
                        site.site
                    )));
                }
            }
            if let Action::Replace(v) = action {
                if v.len() != seq_len * config.d_model {
                    return Err(Error::InvalidPlan(format!(
                        "{}: replacement has {} values, expected {}",
                        site.site,
                        v.len(),
                        seq_len * config.d_model
                    )));
                }
            }
        }
        Ok(())
    }

    /// Apply every action registered for `site` to a `[seq, d]` block.
    pub(crate) fn apply(&self, site: Site, block: &mut [f32], d: usize) {
        for (s, action) in self.items.iter().filter(|(s, _)| s.site == site) {
            let seq = block.len() / d;
            for pos in (0..seq).filter(|p| s.covers(*p)) {
                let row = &mut block[pos * d..(pos + 1) * d];
                match action {
                    Action::Zero => row.fill(0.0),
                    Action::Replace(v) => row.copy_from_slice(&v[pos * d..(pos + 1) * d]),
                    Action::Mean(m) => row.copy_from_slice(&m.row(pos)),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_exact_site_rejected() {
        let mut plan = InterventionPlan::new();
        plan.zero(Site::head(0, 1)).unwrap();
        assert!(plan.zero(Site::head(0, 1)).is_err());
        // a different position set is a different site
        plan.zero(InterventionSite::at(Site::head(0, 1), [2])).unwrap();
        assert_eq!(plan.len(), 2);
    }

    #[test]
    fn apply_respects_positions() {
        let mut plan = InterventionPlan::new();
        plan.zero(InterventionSite::at(Site::ffn(0), [1])).unwrap();
        let mut block = vec![1.0; 6];
        plan.apply(Site::ffn(0), &mut block, 2);
        assert_eq!(block, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        plan.apply(Site::ffn(1), &mut block, 2);
        assert_eq!(block, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_reuses_last_position_of_short_runs() {
        let m = MeanReference {
            runs: vec![vec![1.0, 1.0, 3.0, 3.0], vec![5.0, 5.0]],
            width: 2,
        };
        assert_eq!(m.row(0), vec![3.0, 3.0]);
        assert_eq!(m.row(1), vec![4.0, 4.0]);
        assert_eq!(m.row(7), vec![4.0, 4.0]);
    }
}
