use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusManifest;
use crate::error::{MerlError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMapping {
    pub source: String,
    /// Empty when no target category belongs to this source category.
    pub targets: Vec<String>,
}

/// How target-domain categories fold into the source vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferMap {
    pub source_task: String,
    pub target_task: String,
    pub mapping: Vec<CategoryMapping>,
    pub dropped_target_categories: Vec<String>,
}

const BUILTIN: [(&str, &str); 3] = [
    ("ptbxl_super_to_cpsc2018", include_str!("../../fixtures/transfer/ptbxl_super_to_cpsc2018.json")),
    ("ptbxl_super_to_csn", include_str!("../../fixtures/transfer/ptbxl_super_to_csn.json")),
    ("cpsc2018_to_csn", include_str!("../../fixtures/transfer/cpsc2018_to_csn.json")),
];

impl TransferMap {
    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|(n, _)| *n).collect()
    }

    /// One of the checked-in maps, by file stem.
    pub fn builtin(name: &str) -> Result<Self> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| MerlError::Config(format!("no built-in transfer map {name:?}; known: {:?}", Self::builtin_names())))?;
        let map: TransferMap = serde_json::from_str(text)?;
        map.validate()?;
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MerlError::io(path, e))?;
        let map: TransferMap = serde_json::from_str(&text)?;
        map.validate()?;
        Ok(map)
    }

    pub fn source_vocabulary(&self) -> Vec<String> {
        self.mapping.iter().map(|m| m.source.clone()).collect()
    }

    /// Source categories each target category folds into.
    pub fn sources_of(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for m in &self.mapping {
            for t in &m.targets {
                out.entry(t.as_str()).or_default().push(m.source.as_str());
            }
        }
        out
    }

    /// Target categories listed under more than one source category.
    pub fn shared_targets(&self) -> Vec<String> {
        self.sources_of()
            .into_iter()
            .filter(|(_, s)| s.len() > 1)
            .map(|(t, _)| t.to_string())
            .collect()
    }

    /// Rejects dropped categories that also appear in the mapping and
    /// repeated source categories. A target under several sources is allowed
    /// (one checked-in table needs it); such samples receive every source label.
    pub fn validate(&self) -> Result<()> {
        let mut sources = BTreeSet::new();
        for m in &self.mapping {
            if !sources.insert(m.source.as_str()) {
                return Err(MerlError::Config(format!("source category {:?} listed twice", m.source)));
            }
        }
        let mapped = self.sources_of();
        let clash: Vec<&String> = self
            .dropped_target_categories
            .iter()
            .filter(|d| mapped.contains_key(d.as_str()))
            .collect();
        if !clash.is_empty() {
            return Err(MerlError::Config(format!("categories both mapped and dropped: {clash:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferOutcome {
    pub manifest: CorpusManifest,
    pub removed: Vec<String>,
}

/// Rewrites target labels into the source vocabulary.
///
/// A label that is a mapped target becomes its source categories; a label
/// that already is a source category is kept; dropped labels vanish, and a
/// sample left with no labels is removed. Anything else is an error listing
/// the uncovered labels.
pub fn apply_transfer_map(target: &CorpusManifest, map: &TransferMap) -> Result<TransferOutcome> {
    map.validate()?;
    let sources_of = map.sources_of();
    let source_vocab = map.source_vocabulary();
    let source_set: BTreeSet<&str> = source_vocab.iter().map(String::as_str).collect();
    let dropped: BTreeSet<&str> = map.dropped_target_categories.iter().map(String::as_str).collect();

    let mut uncovered = BTreeSet::new();
    let mut entries = Vec::with_capacity(target.len());
    let mut removed = Vec::new();
    for e in &target.entries {
        let mut labels = BTreeSet::new();
        for l in &e.labels {
            if let Some(srcs) = sources_of.get(l.as_str()) {
                labels.extend(srcs.iter().copied());
            } else if source_set.contains(l.as_str()) {
                labels.insert(l.as_str());
            } else if !dropped.contains(l.as_str()) {
                uncovered.insert(l.clone());
            }
        }
        if labels.is_empty() {
            removed.push(e.record_id.clone());
            continue;
        }
        let mut out = e.clone();
        // keep source-vocabulary order for stable label columns
        out.labels = source_vocab.iter().filter(|s| labels.contains(s.as_str())).cloned().collect();
        entries.push(out);
    }
    if !uncovered.is_empty() {
        return Err(MerlError::TransferIncomplete(uncovered.into_iter().collect()));
    }
    let split_assignment = entries
        .iter()
        .filter_map(|e| target.split_of(&e.record_id).map(|s| (e.record_id.clone(), s)))
        .collect();
    let manifest = CorpusManifest {
        entries,
        label_vocabulary: source_vocab,
        split_assignment,
        base_dir: target.base_dir.clone(),
    };
    manifest.validate()?;
    Ok(TransferOutcome { manifest, removed })
}
