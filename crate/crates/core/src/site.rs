use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// A component whose output is added into the residual stream, or the
/// stream itself at a block's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Site {
    /// Residual stream entering block `layer`. At layer 0 this is the embedding carry.
    ResidPre { layer: usize },
    /// One attention head's output (after `W_O`, before summation).
    Head { layer: usize, head: usize },
    /// The MLP output of block `layer`.
    Ffn { layer: usize },
}

impl Site {
    pub fn head(layer: usize, head: usize) -> Self {
        Site::Head { layer, head }
    }

    pub fn ffn(layer: usize) -> Self {
        Site::Ffn { layer }
    }

    pub fn resid_pre(layer: usize) -> Self {
        Site::ResidPre { layer }
    }

    pub fn layer(&self) -> usize {
        match *self {
            Site::ResidPre { layer } | Site::Head { layer, .. } | Site::Ffn { layer } => layer,
        }
    }

    /// Position in the computation order; equal stages run in parallel.
    pub fn stage(&self) -> usize {
        match *self {
            Site::ResidPre { layer } => 3 * layer,
            Site::Head { layer, .. } => 3 * layer + 1,
            Site::Ffn { layer } => 3 * layer + 2,
        }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layer() >= config.n_layers {
            return Err(Error::InvalidSite(format!(
                "{self}: layer out of range (n_layers = {})",
                config.n_layers
            )));
        }
        if let Site::Head { head, .. } = *self {
            if head >= config.n_heads {
                return Err(Error::InvalidSite(format!(
                    "{self}: head out of range (n_heads = {})",
                    config.n_heads
                )));
            }
        }
        Ok(())
    }

    /// Every head and MLP site, in computation order.
    pub fn all_components(config: &ModelConfig) -> Vec<Site> {
        let mut out = Vec::with_capacity(config.n_layers * (config.n_heads + 1));
        for layer in 0..config.n_layers {
            out.extend((0..config.n_heads).map(|head| Site::Head { layer, head }));
            out.push(Site::Ffn { layer });
        }
        out
    }

    pub fn all_heads(config: &ModelConfig) -> Vec<Site> {
        (0..config.n_layers)
            .flat_map(|layer| (0..config.n_heads).map(move |head| Site::Head { layer, head }))
            .collect()
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::ResidPre { layer } => write!(f, "resid_pre.{layer}"),
            Site::Head { layer, head } => write!(f, "{layer}.{head}"),
            Site::Ffn { layer } => write!(f, "ffn.{layer}"),
        }
    }
}

impl FromStr for Site {
    type Err = Error;

    /// Accepts `L.H`, `ffn.L` and `resid_pre.L`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSite(format!("cannot parse site `{s}`"));
        let (a, b) = s.trim().split_once('.').ok_or_else(bad)?;
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        match a {
            "ffn" => Ok(Site::Ffn { layer: num(b)? }),
            "resid_pre" => Ok(Site::ResidPre { layer: num(b)? }),
            _ => Ok(Site::Head {
                layer: num(a)?,
                head: num(b)?,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_display_roundtrip() {
        for s in [Site::head(8, 9), Site::ffn(3), Site::resid_pre(0)] {
            assert_eq!(s.to_string().parse::<Site>().unwrap(), s);
        }
        assert!("8".parse::<Site>().is_err());
        assert!("a.b".parse::<Site>().is_err());
    }

    #[test]
    fn stages_follow_computation_order() {
        assert!(Site::resid_pre(1).stage() < Site::head(1, 0).stage());
        assert!(Site::head(1, 3).stage() < Site::ffn(1).stage());
        assert!(Site::ffn(0).stage() < Site::resid_pre(1).stage());
        assert_eq!(Site::head(2, 0).stage(), Site::head(2, 5).stage());
    }
}
