//! Activation patching, path patching and ablation experiments.

mod ablation;
mod pair;
mod patch;

pub use ablation::{ablate_and_eval, AblationReport, GroupShift, TokenGroup};
pub use pair::{pairs_from_dataset, ContrastPair, Metric};
pub use patch::{
    activation_patch, activation_patch_sites, patch_sweep, path_patch, FreezePolicy, PairRuns, PatchResult, Receiver,
};
