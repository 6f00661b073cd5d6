//! Information-flow routes: per-update contributions, thresholded graphs and
//! head activation frequencies.

mod contrib;
mod export;
mod graph;

pub use contrib::{residual_contributions, BlockAggregate, ContributionRecord, Term, TermScore, DEGENERATE_NORM};
pub use export::{export_circuit, export_graph, load_graph_json, CircuitHeads, ExportFormat};
pub use graph::{
    activation_frequency, build_flow_graph, check_threshold, head_activation_flags, Component, Edge, FlowGraph,
    HeadFlags, Node, DEFAULT_TAU,
};
