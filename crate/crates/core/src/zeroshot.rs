//! Zero-shot multi-label scoring against class prompts, and macro AUC.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::corpus::EcgRecord;
use crate::encoders::{MerlModel, Modality};
use crate::error::{MerlError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    NameOnly,
    Template,
    #[default]
    Ckepe,
}

impl PromptStyle {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "name_only" => Ok(PromptStyle::NameOnly),
            "template" => Ok(PromptStyle::Template),
            "ckepe" => Ok(PromptStyle::Ckepe),
            other => Err(MerlError::Config(format!("unknown prompt style {other:?}"))),
        }
    }
}

/// A knowledge-base match that justified keeping a term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbHit {
    pub term: String,
    pub kb: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default)]
    pub kb_hits: Vec<KbHit>,
}

/// One entry of the prompt file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPrompt {
    pub class_name: String,
    pub prompt_text: String,
    #[serde(default)]
    pub subtypes: Vec<String>,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl ClassPrompt {
    pub fn plain(class_name: impl Into<String>, prompt_text: impl Into<String>) -> Self {
        ClassPrompt {
            class_name: class_name.into(),
            prompt_text: prompt_text.into(),
            subtypes: Vec::new(),
            attributes: Vec::new(),
            provenance: Provenance::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPromptSet {
    pub entries: Vec<ClassPrompt>,
    pub style: PromptStyle,
}

impl ClassPromptSet {
    pub fn new(entries: Vec<ClassPrompt>, style: PromptStyle) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.class_name.as_str()) {
                return Err(MerlError::Config(format!("class {:?} has two prompts", e.class_name)));
            }
        }
        Ok(ClassPromptSet { entries, style })
    }

    /// `name_only` prompts: the class name is the prompt.
    pub fn names(classes: &[impl AsRef<str>]) -> Result<Self> {
        Self::new(
            classes.iter().map(|c| ClassPrompt::plain(c.as_ref(), c.as_ref())).collect(),
            PromptStyle::NameOnly,
        )
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.class_name.as_str()).collect()
    }

    /// Reorders entries to follow `vocabulary`. Every vocabulary label needs a prompt.
    pub fn aligned_to(&self, vocabulary: &[String]) -> Result<Self> {
        let mut missing = Vec::new();
        let entries = vocabulary
            .iter()
            .filter_map(|label| {
                let e = self.entries.iter().find(|e| &e.class_name == label).cloned();
                if e.is_none() {
                    missing.push(label.clone());
                }
                e
            })
            .collect();
        if !missing.is_empty() {
            return Err(MerlError::Config(format!("no prompt for classes {missing:?}")));
        }
        Ok(ClassPromptSet { entries, style: self.style })
    }
}

pub fn write_prompt_file(path: &Path, prompts: &ClassPromptSet) -> Result<()> {
    let json = serde_json::to_string_pretty(&prompts.entries)?;
    fs::write(path, json + "\n").map_err(|e| MerlError::io(path, e))
}

/// Reads a prompt file. Style is `ckepe` when any entry carries verified
/// terms, `template` otherwise.
pub fn read_prompt_file(path: &Path) -> Result<ClassPromptSet> {
    let text = fs::read_to_string(path).map_err(|e| MerlError::io(path, e))?;
    let entries: Vec<ClassPrompt> = serde_json::from_str(&text)?;
    let style = if entries.iter().any(|e| !e.subtypes.is_empty() || !e.attributes.is_empty() || !e.provenance.kb_hits.is_empty()) {
        PromptStyle::Ckepe
    } else if entries.iter().all(|e| e.class_name == e.prompt_text) {
        PromptStyle::NameOnly
    } else {
        PromptStyle::Template
    };
    ClassPromptSet::new(entries, style)
}

/// `(classes, d)` unit-norm prompt embeddings.
pub fn embed_class_prompts<F: Scalar>(prompts: &ClassPromptSet, model: &MerlModel<F>) -> Result<Array2<F>> {
    if let Some(e) = prompts.entries.iter().find(|e| e.prompt_text.trim().is_empty()) {
        return Err(MerlError::EmptyPrompt(e.class_name.clone()));
    }
    let texts: Vec<&str> = prompts.entries.iter().map(|e| e.prompt_text.as_str()).collect();
    model.project(&model.encode_text(&texts)?, Modality::Text)
}

/// Raw cosine scores: `ecg` rows and `prompts` rows must already be unit norm.
pub fn zero_shot_scores<F: Scalar>(ecg: &Array2<F>, prompts: &Array2<F>) -> Result<Array2<F>> {
    if ecg.ncols() != prompts.ncols() {
        return Err(MerlError::Dimension(format!(
            "ECG embeddings have {} dims, prompt embeddings {}",
            ecg.ncols(),
            prompts.ncols()
        )));
    }
    Ok(ecg.dot(&prompts.t()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub record_ids: Vec<String>,
    pub class_names: Vec<String>,
    pub values: Array2<f64>,
}

/// Encodes records and prompts with the same model and scores every pair.
pub fn score_records<F: Scalar>(records: &[&EcgRecord], prompts: &ClassPromptSet, model: &MerlModel<F>) -> Result<ScoreMatrix> {
    let p = embed_class_prompts(prompts, model)?;
    let e = model.project(&model.encode_ecg(records)?, Modality::Ecg)?;
    let s = zero_shot_scores(&e, &p)?;
    Ok(ScoreMatrix {
        record_ids: records.iter().map(|r| r.record_id.clone()).collect(),
        class_names: prompts.class_names().into_iter().map(String::from).collect(),
        values: s.mapv(|v| v.as_f64()),
    })
}

pub fn write_scores_csv(path: &Path, scores: &ScoreMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| MerlError::Csv(e))?;
    let mut header = vec!["record_id".to_string()];
    header.extend(scores.class_names.iter().cloned());
    w.write_record(&header)?;
    for (id, row) in scores.record_ids.iter().zip(scores.values.rows()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| MerlError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub macro_auc: f64,
    /// `None` where the class has no positives or no negatives.
    pub per_class: Vec<Option<f64>>,
}

impl AucReport {
    pub fn defined_classes(&self) -> usize {
        self.per_class.iter().filter(|c| c.is_some()).count()
    }
}

/// ROC AUC of one class via the rank-sum statistic (ties share ranks, which
/// credits tied positive/negative pairs one half).
pub fn binary_auc(scores: ArrayView1<f64>, labels: ArrayView1<u8>) -> Option<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64 * avg_rank;
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l != 0).count() as f64;
    let neg = n as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return None;
    }
    Some((rank_sum_pos - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Mean one-vs-rest AUC over classes where it is defined.
pub fn macro_auc(scores: &Array2<f64>, labels: &Array2<u8>) -> Result<AucReport> {
    if scores.dim() != labels.dim() {
        return Err(MerlError::Dimension(format!(
            "scores {:?} vs labels {:?}",
            scores.dim(),
            labels.dim()
        )));
    }
    if let Some(((i, j), _)) = scores.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(MerlError::NonFinite { indices: vec![(i, j)] });
    }
    let per_class: Vec<Option<f64>> = (0..scores.ncols())
        .map(|c| binary_auc(scores.column(c), labels.column(c)))
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MerlError::AllClassesUndefined);
    }
    Ok(AucReport {
        macro_auc: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
    })
}
