use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::graph::FlowGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Dot,
    Json,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(Self::Dot),
            "json" => Ok(Self::Json),
            _ => Err(Error::UnsupportedFormat(s.to_string())),
        }
    }
}

/// A named set of `(layer, head)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitHeads {
    pub name: String,
    pub heads: BTreeSet<(usize, usize)>,
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

pub fn export_graph(graph: &FlowGraph, format: ExportFormat) -> Result<Vec<u8>> {
    match format {
        ExportFormat::Json => Ok(serde_json::to_vec_pretty(graph)?),
        ExportFormat::Dot => {
            let mut s = String::from("digraph flow {\n");
            let _ = writeln!(s, "  // threshold {}", graph.threshold);
            for n in &graph.nodes {
                let shape = if *n == graph.sink { " [shape=doublecircle]" } else { "" };
                let _ = writeln!(s, "  {}{shape};", quote(&n.to_string()));
            }
            for e in &graph.edges {
                let _ = writeln!(
                    s,
                    "  {} -> {} [label=\"{:.4}\"];",
                    quote(&e.src.to_string()),
                    quote(&e.dst.to_string()),
                    e.weight
                );
            }
            s.push_str("}\n");
            Ok(s.into_bytes())
        }
    }
}

pub fn load_graph_json(bytes: &[u8]) -> Result<FlowGraph> {
    let g: FlowGraph = serde_json::from_slice(bytes)?;
    g.check()?;
    Ok(g)
}

pub fn export_circuit(circuit: &CircuitHeads, format: ExportFormat) -> Result<Vec<u8>> {
    match format {
        ExportFormat::Json => Ok(serde_json::to_vec_pretty(circuit)?),
        ExportFormat::Dot => {
            let mut s = format!("digraph {} {{\n", quote(&circuit.name));
            for (l, h) in &circuit.heads {
                let _ = writeln!(s, "  \"L{l}.h{h}\";");
            }
            s.push_str("}\n");
            Ok(s.into_bytes())
        }
    }
}
