use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::HeadMatrix;

/// Product-moment correlation. Both inputs constant is an error; exactly
/// one constant input yields 0.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} vs {} entries", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    match (saa == 0.0, sbb == 0.0) {
        (true, true) => Err(Error::ConstantInput),
        (true, false) | (false, true) => Ok(0.0),
        _ => Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)),
    }
}

pub fn pearson_matrices(a: &HeadMatrix, b: &HeadMatrix) -> Result<f64> {
    a.same_shape(b)?;
    pearson(&a.values, &b.values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// `None` when both matrices are constant.
    pub pearson_rho: Option<f64>,
    pub shared_heads: BTreeSet<(usize, usize)>,
    pub only_a: BTreeSet<(usize, usize)>,
    pub only_b: BTreeSet<(usize, usize)>,
    /// `|shared| / |union|`; 1.0 when the union is empty.
    pub jaccard: f64,
    pub freq_threshold: f64,
    /// `|a - b|` per head.
    pub abs_diff: HeadMatrix,
}

/// Overlap of the head sets `{h : freq(h) > freq_threshold}` plus the raw correlation.
pub fn compare_circuits(a: &HeadMatrix, b: &HeadMatrix, freq_threshold: f64) -> Result<ComparisonReport> {
    a.same_shape(b)?;
    if !(0.0..=1.0).contains(&freq_threshold) {
        return Err(Error::InvalidThreshold(freq_threshold));
    }
    let flagged = |m: &HeadMatrix| -> BTreeSet<(usize, usize)> {
        (0..m.n_layers)
            .flat_map(|l| (0..m.n_heads).map(move |h| (l, h)))
            .filter(|(l, h)| m.get(*l, *h) > freq_threshold)
            .collect()
    };
    let (sa, sb) = (flagged(a), flagged(b));
    let shared: BTreeSet<_> = sa.intersection(&sb).copied().collect();
    let union = sa.union(&sb).count();
    let jaccard = if union == 0 { 1.0 } else { shared.len() as f64 / union as f64 };
    let pearson_rho = match pearson(&a.values, &b.values) {
        Ok(r) => Some(r),
        Err(Error::ConstantInput) => None,
        Err(e) => return Err(e),
    };
    let abs_diff = HeadMatrix {
        n_layers: a.n_layers,
        n_heads: a.n_heads,
        values: a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).collect(),
    };
    Ok(ComparisonReport {
        pearson_rho,
        only_a: sa.difference(&sb).copied().collect(),
        only_b: sb.difference(&sa).copied().collect(),
        shared_heads: shared,
        jaccard,
        freq_threshold,
        abs_diff,
    })
}
