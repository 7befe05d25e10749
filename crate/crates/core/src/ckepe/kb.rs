use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MerlError, Result};
use crate::text::normalize_term;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KbKind {
    WebSnomed,
    LocalScp,
}

impl KbKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KbKind::WebSnomed => "web_snomed",
            KbKind::LocalScp => "local_scp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "web_snomed" => Ok(KbKind::WebSnomed),
            "local_scp" => Ok(KbKind::LocalScp),
            other => Err(MerlError::Config(format!("unknown knowledge base kind {other:?}"))),
        }
    }
}

/// One row of a KB file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbEntry {
    pub canonical: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

/// Trusted vocabulary. Every key is stored normalised.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    pub name: String,
    pub kind: KbKind,
    pub terms: BTreeSet<String>,
    pub synonym_map: BTreeMap<String, String>,
}

impl KnowledgeBase {
    pub fn from_entries(name: impl Into<String>, kind: KbKind, entries: &[KbEntry]) -> Result<Self> {
        let name = name.into();
        let mut terms = BTreeSet::new();
        let mut synonym_map: BTreeMap<String, String> = BTreeMap::new();
        let mut conflicts = Vec::new();
        for e in entries {
            let canonical = normalize_term(&e.canonical);
            if canonical.is_empty() {
                continue;
            }
            terms.insert(canonical.clone());
            for s in &e.synonyms {
                let key = normalize_term(s);
                if key.is_empty() || key == canonical {
                    continue;
                }
                match synonym_map.get(&key) {
                    Some(prev) if prev != &canonical => {
                        conflicts.push(format!("{key:?} -> {prev:?} and {canonical:?}"));
                    }
                    _ => {
                        synonym_map.insert(key, canonical.clone());
                    }
                }
            }
        }
        for (syn, canon) in &synonym_map {
            if terms.contains(syn) {
                conflicts.push(format!("{syn:?} is a canonical term and a synonym of {canon:?}"));
            }
        }
        if !conflicts.is_empty() {
            return Err(MerlError::KnowledgeBaseConflict(conflicts));
        }
        if terms.is_empty() {
            return Err(MerlError::EmptyKnowledgeBase(name));
        }
        Ok(KnowledgeBase {
            name,
            kind,
            terms,
            synonym_map,
        })
    }

    /// Canonical term for `term` or one of its synonyms.
    pub fn lookup(&self, term: &str) -> Option<&str> {
        let key = normalize_term(term);
        if let Some(t) = self.terms.get(&key) {
            return Some(t.as_str());
        }
        self.synonym_map.get(&key).map(String::as_str)
    }
}

/// Reads a KB file (JSON array of `{canonical, synonyms}`); the KB is named
/// after the file stem.
pub fn load_kb(path: &Path, kind: KbKind) -> Result<KnowledgeBase> {
    let text = fs::read_to_string(path).map_err(|e| MerlError::io(path, e))?;
    let entries: Vec<KbEntry> = serde_json::from_str(&text)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| kind.as_str().to_string());
    KnowledgeBase::from_entries(name, kind, &entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(c: &str, syn: &[&str]) -> KbEntry {
        KbEntry {
            canonical: c.into(),
            synonyms: syn.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn lookup_and_synonyms() {
        let kb = KnowledgeBase::from_entries(
            "kb",
            KbKind::LocalScp,
            &[entry("Atrial Fibrillation", &["AFib"]), entry("sinus rhythm", &[]), entry("ST elevation", &[])],
        )
        .unwrap();
        assert_eq!(kb.terms.len(), 3);
        assert_eq!(kb.lookup("atrial  fibrillation"), Some("atrial fibrillation"));
        assert_eq!(kb.lookup("afib"), Some("atrial fibrillation"));
        assert_eq!(kb.lookup("flutter"), None);
    }

    #[test]
    fn conflicts_and_empty() {
        let err = KnowledgeBase::from_entries("kb", KbKind::WebSnomed, &[entry("a", &["x"]), entry("b", &["X"])]).unwrap_err();
        match err {
            MerlError::KnowledgeBaseConflict(c) => assert_eq!(c.len(), 1),
            e => panic!("{e:?}"),
        }
        assert!(matches!(
            KnowledgeBase::from_entries("kb", KbKind::WebSnomed, &[]),
            Err(MerlError::EmptyKnowledgeBase(_))
        ));
        let merged = KnowledgeBase::from_entries("kb", KbKind::WebSnomed, &[entry("a", &["x"]), entry("A", &["y"])]).unwrap();
        assert_eq!(merged.terms.len(), 1);
        assert_eq!(merged.lookup("y"), Some("a"));
    }
}
