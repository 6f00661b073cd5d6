//! Decoder-only transformer inference with full activation capture, plus the
//! circuit-analysis toolkit built on it: activation and path patching,
//! information-flow routes, direct logit attribution, head-function scores,
//! ablation and cross-language circuit comparison.

pub mod archive;
pub mod attribution;
pub mod cache;
pub mod config;
pub mod decompose;
pub mod error;
pub mod flow;
mod forward;
pub mod golden;
pub mod intervention;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod oracle;
pub mod patching;
pub mod selftest;
pub mod site;
pub mod synthetic;
pub mod vocab;

pub use archive::{NamedTensorArchive, Tensor};
pub use cache::{ActivationCache, ForwardResult, Logits};
pub use config::{ActivationFn, ModelConfig, PositionalScheme};
pub use error::{Error, Result};
pub use intervention::{Action, InterventionPlan, InterventionSite, MeanReference};
pub use matrix::HeadMatrix;
pub use model::Model;
pub use site::Site;
pub use vocab::Vocab;
