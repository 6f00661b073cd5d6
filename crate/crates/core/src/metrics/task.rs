use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ioi,
    Tense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    En,
    Zh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Normal,
    Flipped,
}

/// One pre-tokenized prompt. `roles["END"]` is the position whose
/// next-token distribution is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub id: String,
    pub task: Task,
    pub lang: Lang,
    pub variant: Variant,
    pub tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupted_tokens: Option<Vec<u32>>,
    pub roles: BTreeMap<String, usize>,
    pub answer: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractor: Option<u32>,
    pub template_id: usize,
}

impl TaskExample {
    pub const END: &'static str = "END";

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidExample {
            id: self.id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(self.invalid("empty token sequence"));
        }
        if !self.roles.contains_key(Self::END) {
            return Err(self.invalid("missing END role"));
        }
        if let Some((role, pos)) = self.roles.iter().find(|(_, p)| **p >= self.tokens.len()) {
            return Err(self.invalid(format!("role {role} at {pos} beyond {} tokens", self.tokens.len())));
        }
        if let Some(c) = &self.corrupted_tokens {
            if c.len() != self.tokens.len() {
                return Err(self.invalid("corrupted_tokens length differs from tokens"));
            }
        }
        if self.distractor == Some(self.answer) {
            return Err(self.invalid("answer equals distractor"));
        }
        match (self.task, self.lang, self.distractor) {
            (Task::Ioi, _, None) => return Err(self.invalid("ioi examples need a distractor")),
            (Task::Tense, Lang::Zh, Some(_)) => {
                return Err(self.invalid("zh tense examples have no minimal-pair distractor"))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn end(&self) -> usize {
        self.roles[Self::END]
    }

    pub fn role(&self, name: &str) -> Result<usize> {
        self.roles
            .get(name)
            .copied()
            .ok_or_else(|| self.invalid(format!("missing role {name}")))
    }
}

/// An ordered list of validated examples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<TaskExample>,
}

impl Dataset {
    pub fn new(examples: Vec<TaskExample>) -> Result<Self> {
        for e in &examples {
            e.validate()?;
        }
        Ok(Self { examples })
    }

    /// Parse JSON lines; blank lines are skipped.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let examples = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str::<TaskExample>)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(examples)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.examples {
            s.push_str(&serde_json::to_string(e).expect("example serializes"));
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the canonical JSON-lines form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// The common (task, lang, variant), or an error if empty or mixed.
    pub fn kind(&self) -> Result<(Task, Lang, Variant)> {
        let first = self.examples.first().ok_or(Error::EmptyDataset)?;
        let k = (first.task, first.lang, first.variant);
        if let Some(e) = self.examples.iter().find(|e| (e.task, e.lang, e.variant) != k) {
            return Err(Error::MixedDataset(format!(
                "`{}` is {:?}/{:?}/{:?}, `{}` is {:?}/{:?}/{:?}",
                first.id, k.0, k.1, k.2, e.id, e.task, e.lang, e.variant
            )));
        }
        Ok(k)
    }

    /// Distinct answer tokens, ascending.
    pub fn answer_tokens(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.examples.iter().map(|e| e.answer).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn distractor_tokens(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.examples.iter().filter_map(|e| e.distractor).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ioi(id: &str) -> TaskExample {
        TaskExample {
            id: id.into(),
            task: Task::Ioi,
            lang: Lang::En,
            variant: Variant::Normal,
            tokens: vec![1, 2, 3, 4, 1, 5],
            corrupted_tokens: Some(vec![1, 2, 3, 4, 6, 5]),
            roles: BTreeMap::from([
                ("S1".into(), 0),
                ("IO".into(), 2),
                ("S2".into(), 4),
                ("END".into(), 5),
            ]),
            answer: 3,
            distractor: Some(1),
            template_id: 0,
        }
    }

    #[test]
    fn jsonl_field_names_are_exact() {
        let e = ioi("a");
        let line = serde_json::to_string(&e).unwrap();
        for f in ["\"id\"", "\"task\":\"ioi\"", "\"lang\":\"en\"", "\"variant\":\"normal\"", "\"corrupted_tokens\"", "\"template_id\""] {
            assert!(line.contains(f), "{f} missing in {line}");
        }
        let ds = Dataset::from_jsonl(&format!("{line}\n\n{line}\n")).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.examples[0], e);
    }

    #[test]
    fn invariants_enforced() {
        let mut e = ioi("a");
        e.distractor = Some(3);
        assert!(e.validate().is_err());
        let mut e = ioi("a");
        e.distractor = None;
        assert!(e.validate().is_err());
        let mut e = ioi("a");
        e.roles.insert("END".into(), 6);
        assert!(e.validate().is_err());
        let mut e = ioi("a");
        e.corrupted_tokens = Some(vec![1]);
        assert!(e.validate().is_err());
        let mut e = ioi("a");
        e.task = Task::Tense;
        e.lang = Lang::Zh;
        assert!(e.validate().is_err());
        e.distractor = None;
        e.corrupted_tokens = None;
        assert!(e.validate().is_ok());
    }

    #[test]
    fn mixed_and_empty_datasets() {
        assert!(matches!(Dataset::default().kind(), Err(Error::EmptyDataset)));
        let mut b = ioi("b");
        b.lang = Lang::Zh;
        let ds = Dataset::new(vec![ioi("a"), b]).unwrap();
        assert!(matches!(ds.kind(), Err(Error::MixedDataset(_))));
    }
}
