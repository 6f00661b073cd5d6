use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::ActivationCache;
use crate::error::{Error, Result};
use crate::matrix::HeadMatrix;
use crate::metrics::Dataset;
use crate::model::Model;

use super::contrib::{residual_contributions, ContributionRecord, Term};

pub const DEFAULT_TAU: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Component {
    /// The residual stream entering `layer`; `layer == n_layers` is the final stream.
    Resid,
    Head { head: usize },
    Ffn,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Resid => write!(f, "resid"),
            Component::Head { head } => write!(f, "h{head}"),
            Component::Ffn => write!(f, "ffn"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Node {
    pub layer: usize,
    pub position: usize,
    pub component: Component,
}

impl Node {
    pub fn resid(layer: usize, position: usize) -> Self {
        Self { layer, position, component: Component::Resid }
    }

    /// Topological rank: a layer's input, then its heads, then its MLP.
    pub fn stage(&self) -> usize {
        3 * self.layer
            + match self.component {
                Component::Resid => 0,
                Component::Head { .. } => 1,
                Component::Ffn => 2,
            }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}@p{}", self.layer, self.component, self.position)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: Node,
    pub dst: Node,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowGraph {
    pub threshold: f64,
    pub sink: Node,
    pub nodes: BTreeSet<Node>,
    /// Sorted by (src, dst).
    pub edges: Vec<Edge>,
}

impl FlowGraph {
    pub fn head_nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes.iter().filter_map(|n| match n.component {
            Component::Head { head } => Some((n.layer, head)),
            _ => None,
        })
    }

    /// Every edge above threshold and running forward in stage order.
    pub fn check(&self) -> Result<()> {
        for e in &self.edges {
            if !(e.weight > self.threshold && e.weight <= 1.0 + 1e-9) {
                return Err(Error::InvalidArgument(format!("edge {} -> {} has weight {}", e.src, e.dst, e.weight)));
            }
            if e.src.stage() >= e.dst.stage() {
                return Err(Error::InvalidArgument(format!("edge {} -> {} runs backwards", e.src, e.dst)));
            }
            if !self.nodes.contains(&e.src) || !self.nodes.contains(&e.dst) {
                return Err(Error::InvalidArgument(format!("edge {} -> {} has a dangling end", e.src, e.dst)));
            }
        }
        if !self.nodes.contains(&self.sink) {
            return Err(Error::InvalidArgument("graph has no sink".into()));
        }
        Ok(())
    }
}

/// Thresholds outside `[0, 1]` are rejected. `1` is accepted and yields a
/// graph holding the sink alone.
pub fn check_threshold(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::InvalidThreshold(tau))
    }
}

/// Trace backward from the final stream at the last position.
///
/// Entering `resid(l + 1, p)` decomposes layer `l`'s update at `p`. A carry
/// term above `tau` links `resid(l, p)`; a head term `(h, j)` above `tau` links
/// `resid(l, j) -> head(l, h)@p`, and the head node feeds `resid(l + 1, p)`
/// with the summed weight of its kept sources; the MLP term links
/// `resid(l, p) -> ffn(l)@p -> resid(l + 1, p)`. Every linked stream node is
/// expanded in turn.
pub fn build_flow_graph(model: &Model, cache: &ActivationCache, tau: f64) -> Result<FlowGraph> {
    check_threshold(tau)?;
    let n_layers = cache.n_layers();
    let end = cache.seq_len() - 1;
    let sink = Node::resid(n_layers, end);
    let mut nodes = BTreeSet::from([sink]);
    let mut edges = Vec::new();
    // stream nodes still to expand, deepest layer first
    let mut pending = BTreeSet::from([(std::cmp::Reverse(n_layers), end)]);
    while let Some(item) = pending.pop_first() {
        let (std::cmp::Reverse(out_layer), p) = item;
        if out_layer == 0 {
            continue;
        }
        let layer = out_layer - 1;
        let rec = residual_contributions(model, cache, layer, p)?;
        let dst = Node::resid(out_layer, p);
        for (src, via, weight) in kept_links(&rec, tau) {
            match via {
                Some(mid) => {
                    nodes.insert(mid);
                    edges.push(Edge { src, dst: mid, weight });
                }
                None => edges.push(Edge { src, dst, weight }),
            }
            if nodes.insert(src) {
                pending.insert((std::cmp::Reverse(layer), src.position));
            }
        }
        let mut into_dst: BTreeMap<Node, f64> = BTreeMap::new();
        for t in rec.terms.iter().filter(|t| t.normalized > tau) {
            match t.term {
                Term::Head { head, .. } => {
                    *into_dst.entry(Node { layer, position: p, component: Component::Head { head } }).or_default() +=
                        t.normalized
                }
                Term::Ffn => {
                    into_dst.insert(Node { layer, position: p, component: Component::Ffn }, t.normalized);
                }
                Term::Carry => {}
            }
        }
        for (mid, weight) in into_dst {
            edges.push(Edge { src: mid, dst, weight });
        }
    }
    edges.sort_by(|a, b| (a.src, a.dst).cmp(&(b.src, b.dst)));
    Ok(FlowGraph { threshold: tau, sink, nodes, edges })
}

/// `(source stream node, intermediate component node, weight)` for each term above `tau`.
fn kept_links(rec: &ContributionRecord, tau: f64) -> Vec<(Node, Option<Node>, f64)> {
    let (layer, p) = (rec.layer, rec.position);
    rec.terms
        .iter()
        .filter(|t| t.normalized > tau)
        .map(|t| match t.term {
            Term::Carry => (Node::resid(layer, p), None, t.normalized),
            Term::Head { head, source } => (
                Node::resid(layer, source),
                Some(Node { layer, position: p, component: Component::Head { head } }),
                t.normalized,
            ),
            Term::Ffn => (
                Node::resid(layer, p),
                Some(Node { layer, position: p, component: Component::Ffn }),
                t.normalized,
            ),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadFlags {
    pub n_layers: usize,
    pub n_heads: usize,
    pub flags: Vec<bool>,
}

impl HeadFlags {
    pub fn get(&self, layer: usize, head: usize) -> bool {
        self.flags[layer * self.n_heads + head]
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }
}

/// A head is flagged iff it is a node anywhere in the flow graph.
pub fn head_activation_flags(model: &Model, cache: &ActivationCache, tau: f64) -> Result<HeadFlags> {
    let graph = build_flow_graph(model, cache, tau)?;
    let (n_layers, n_heads) = (cache.n_layers(), cache.n_heads());
    let mut flags = vec![false; n_layers * n_heads];
    for (l, h) in graph.head_nodes() {
        flags[l * n_heads + h] = true;
    }
    Ok(HeadFlags { n_layers, n_heads, flags })
}

/// Fraction of examples (run up to END) in which each head is flagged.
pub fn activation_frequency(model: &Model, dataset: &Dataset, tau: f64) -> Result<HeadMatrix> {
    check_threshold(tau)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let flags = dataset
        .examples
        .par_iter()
        .map(|e| {
            let (_, cache) = model.run_with_cache(&e.tokens[..=e.end()], None)?;
            head_activation_flags(model, &cache, tau)
        })
        .collect::<Result<Vec<_>>>()?;
    let (n_layers, n_heads) = (model.n_layers(), model.n_heads());
    let n = flags.len() as f64;
    let values = (0..n_layers * n_heads)
        .map(|i| flags.iter().filter(|f| f.flags[i]).count() as f64 / n)
        .collect();
    HeadMatrix::from_values(n_layers, n_heads, values)
}
