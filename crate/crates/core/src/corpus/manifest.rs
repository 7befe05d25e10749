//! Manifest CSV: `record_id,signal_path,report,labels,split`.
//!
//! `labels` is `|`-separated; `split` is one of `train`, `valid`, `test` or
//! empty. A `report` cell starting with `file:` names a text file (relative
//! to the manifest directory) holding the report.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::signal_io::read_signal;
use super::{default_lead_names, ClinicalReport, EcgRecord, EcgReportPair};
use crate::error::{MerlError, Result};

pub const MANIFEST_HEADER: [&str; 5] = ["record_id", "signal_path", "report", "labels", "split"];
const REPORT_FILE_PREFIX: &str = "file:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportSource {
    Text(String),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record_id: String,
    pub signal_path: PathBuf,
    pub report: ReportSource,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub label_vocabulary: Vec<String>,
    pub split_assignment: BTreeMap<String, Split>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn new(entries: Vec<ManifestEntry>, label_vocabulary: Vec<String>) -> Result<Self> {
        let m = CorpusManifest {
            entries,
            label_vocabulary,
            split_assignment: BTreeMap::new(),
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let vocab: HashSet<&str> = self.label_vocabulary.iter().map(String::as_str).collect();
        for (i, e) in self.entries.iter().enumerate() {
            if !seen.insert(e.record_id.as_str()) {
                return Err(MerlError::DuplicateRecord(e.record_id.clone()));
            }
            if let Some(bad) = e.labels.iter().find(|l| !vocab.contains(l.as_str())) {
                return Err(MerlError::Vocabulary {
                    label: bad.clone(),
                    line: i + 2,
                });
            }
        }
        Ok(())
    }

    pub fn split_of(&self, record_id: &str) -> Option<Split> {
        self.split_assignment.get(record_id).copied()
    }

    /// Indices of entries assigned to `split`, in manifest order.
    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| self.split_of(&e.record_id) == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in self.split_assignment.values() {
            c[*s as usize] += 1;
        }
        c
    }

    /// A manifest holding only the given entries (in the given order).
    pub fn subset(&self, indices: &[usize]) -> CorpusManifest {
        let entries: Vec<ManifestEntry> = indices.iter().map(|&i| self.entries[i].clone()).collect();
        let split_assignment = entries
            .iter()
            .filter_map(|e| self.split_of(&e.record_id).map(|s| (e.record_id.clone(), s)))
            .collect();
        CorpusManifest {
            entries,
            label_vocabulary: self.label_vocabulary.clone(),
            split_assignment,
            base_dir: self.base_dir.clone(),
        }
    }

    /// Multi-hot label matrix `(entries, vocabulary)` for the given rows.
    pub fn label_matrix(&self, indices: &[usize]) -> Array2<u8> {
        let col: BTreeMap<&str, usize> = self
            .label_vocabulary
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let mut m = Array2::zeros((indices.len(), self.label_vocabulary.len()));
        for (r, &i) in indices.iter().enumerate() {
            for l in &self.entries[i].labels {
                if let Some(&c) = col.get(l.as_str()) {
                    m[[r, c]] = 1;
                }
            }
        }
        m
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn report_text(&self, entry: &ManifestEntry) -> Result<String> {
        match &entry.report {
            ReportSource::Text(t) => Ok(t.clone()),
            ReportSource::File(p) => {
                let p = self.resolve(p);
                fs::read_to_string(&p).map_err(|e| MerlError::io(p, e))
            }
        }
    }

    pub fn load_pair(&self, index: usize) -> Result<EcgReportPair> {
        let entry = &self.entries[index];
        let (signal, rate) = read_signal(&self.resolve(&entry.signal_path))?;
        let leads = signal.nrows();
        Ok(EcgReportPair {
            ecg: EcgRecord::new(entry.record_id.clone(), signal, rate, default_lead_names(leads))?,
            report: ClinicalReport::new(self.report_text(entry)?),
        })
    }

    pub fn load_pairs(&self) -> Result<Vec<EcgReportPair>> {
        (0..self.entries.len()).map(|i| self.load_pair(i)).collect()
    }
}

/// Options for [`load_manifest`]. Without an explicit vocabulary, the
/// vocabulary is the sorted set of labels that occur in the file.
#[derive(Debug, Clone, Default)]
pub struct ManifestLoader {
    pub vocabulary: Option<Vec<String>>,
    /// Skip the existence check on signal files.
    pub lazy: bool,
}

impl ManifestLoader {
    pub fn with_vocabulary(mut self, vocabulary: Vec<String>) -> Self {
        self.vocabulary = Some(vocabulary);
        self
    }

    pub fn lazy(mut self, lazy: bool) -> Self {
        self.lazy = lazy;
        self
    }

    pub fn load(&self, path: &Path) -> Result<CorpusManifest> {
        let text = fs::read_to_string(path).map_err(|e| MerlError::io(path, e))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let shown = path.display().to_string();
        let parse_err = |line: usize, message: String| MerlError::Parse {
            path: shown.clone(),
            line,
            message,
        };

        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(parse_err(
                1,
                format!("expected header {}", MANIFEST_HEADER.join(",")),
            ));
        }

        let vocab_set: Option<HashSet<&str>> = self
            .vocabulary
            .as_ref()
            .map(|v| v.iter().map(String::as_str).collect());
        let mut entries = Vec::new();
        let mut splits = BTreeMap::new();
        let mut seen = HashSet::new();
        let mut observed = BTreeSet::new();
        for row in reader.records() {
            let row = row.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                parse_err(line, e.to_string())
            })?;
            let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
            if row.len() != MANIFEST_HEADER.len() {
                return Err(parse_err(
                    line,
                    format!("expected {} fields, found {}", MANIFEST_HEADER.len(), row.len()),
                ));
            }
            let record_id = row[0].trim().to_string();
            if record_id.is_empty() {
                return Err(parse_err(line, "empty record_id".into()));
            }
            if !seen.insert(record_id.clone()) {
                return Err(MerlError::DuplicateRecord(record_id));
            }
            let signal_path = PathBuf::from(row[1].trim());
            if !self.lazy {
                let resolved = if signal_path.is_absolute() {
                    signal_path.clone()
                } else {
                    base_dir.join(&signal_path)
                };
                if !resolved.exists() {
                    return Err(parse_err(
                        line,
                        format!("signal file {} does not exist", resolved.display()),
                    ));
                }
            }
            let report = match row[2].strip_prefix(REPORT_FILE_PREFIX) {
                Some(p) => ReportSource::File(PathBuf::from(p.trim())),
                None => ReportSource::Text(row[2].to_string()),
            };
            let labels: Vec<String> = row[3]
                .split('|')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            if let Some(vocab) = &vocab_set {
                if let Some(bad) = labels.iter().find(|l| !vocab.contains(l.as_str())) {
                    return Err(MerlError::Vocabulary {
                        label: bad.clone(),
                        line,
                    });
                }
            }
            observed.extend(labels.iter().cloned());
            match row[4].trim() {
                "" => {}
                s => {
                    let split = Split::parse(s)
                        .ok_or_else(|| parse_err(line, format!("unknown split {s:?}")))?;
                    splits.insert(record_id.clone(), split);
                }
            }
            entries.push(ManifestEntry {
                record_id,
                signal_path,
                report,
                labels,
            });
        }
        let label_vocabulary = match &self.vocabulary {
            Some(v) => v.clone(),
            None => observed.into_iter().collect(),
        };
        Ok(CorpusManifest {
            entries,
            label_vocabulary,
            split_assignment: splits,
            base_dir,
        })
    }
}

pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    ManifestLoader::default().load(path)
}

pub fn write_manifest(manifest: &CorpusManifest, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for e in &manifest.entries {
        let report = match &e.report {
            ReportSource::Text(t) => t.clone(),
            ReportSource::File(p) => format!("{REPORT_FILE_PREFIX}{}", p.display()),
        };
        let split = manifest.split_of(&e.record_id).map(Split::as_str).unwrap_or("");
        let signal = e.signal_path.display().to_string();
        w.write_record([
            e.record_id.as_str(),
            signal.as_str(),
            report.as_str(),
            e.labels.join("|").as_str(),
            split,
        ])?;
    }
    w.flush().map_err(|e| MerlError::io(path, e))
}
