//! Vocabulary sidecar: display strings per id plus special/control ids.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Vocab {
    pub id_to_token: BTreeMap<u32, String>,
    /// Never drawn by random-token protocols.
    #[serde(default)]
    pub special_ids: BTreeSet<u32>,
}

impl Vocab {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Display form of a token; unknown ids render as `<id>`.
    pub fn display(&self, id: u32) -> String {
        self.id_to_token.get(&id).cloned().unwrap_or_else(|| format!("<{id}>"))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Ids present here but outside `0..vocab_size`.
    pub fn check(&self, vocab_size: usize) -> Result<()> {
        let out = self
            .id_to_token
            .keys()
            .chain(&self.special_ids)
            .find(|id| **id as usize >= vocab_size);
        match out {
            Some(id) => Err(Error::TokenOutOfRange { token: *id, position: 0, vocab_size }),
            None => Ok(()),
        }
    }
}
