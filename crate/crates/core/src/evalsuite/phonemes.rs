use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::{CoreError, Result};

const DEFAULT_TABLE: &str = include_str!("../../data/timit_61_to_39.tsv");

/// A label folding table. `None` targets mark labels whose frames are dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeFolding {
    map: BTreeMap<String, Option<String>>,
}

impl PhonemeFolding {
    /// The standard 61 -> 39 TIMIT folding.
    pub fn timit39() -> Self {
        Self::parse(DEFAULT_TABLE).expect("bundled table parses")
    }

    /// Two tab-separated columns per line; `-` in the second column drops the
    /// label; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(src), Some(dst), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(CoreError::Invalid(format!("folding table line {}: expected two columns", n + 1)));
            };
            let dst = if dst == "-" { None } else { Some(dst.to_string()) };
            if map.insert(src.to_string(), dst).is_some() {
                return Err(CoreError::Invalid(format!("folding table lists {src:?} twice")));
            }
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?)
    }

    /// Folded class, `None` for dropped labels.
    pub fn collapse(&self, label: &str) -> Result<Option<&str>> {
        self.map
            .get(label)
            .map(|d| d.as_deref())
            .ok_or_else(|| CoreError::UnknownLabel(label.to_string()))
    }

    /// Folds many labels, reporting every unknown one at once.
    pub fn collapse_all<'a>(&'a self, labels: &[&str]) -> Result<Vec<Option<&'a str>>> {
        let unknown: BTreeSet<&str> = labels.iter().copied().filter(|l| !self.map.contains_key(*l)).collect();
        if !unknown.is_empty() {
            return Err(CoreError::UnknownLabel(unknown.into_iter().collect::<Vec<_>>().join(", ")));
        }
        Ok(labels.iter().map(|l| self.map[*l].as_deref()).collect())
    }

    /// Sorted output classes.
    pub fn classes(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.map.values().flatten().map(String::as_str).collect();
        set.into_iter().collect()
    }

    pub fn source_labels(&self) -> usize {
        self.map.len()
    }
}

/// Folds one TIMIT label with the standard table.
pub fn collapse_phoneme(label: &str) -> Result<Option<String>> {
    Ok(PhonemeFolding::timit39().collapse(label)?.map(str::to_string))
}
