use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, EcgRecord};
use crate::encoders::{MerlModel, Modality};
use crate::error::{MerlError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// Encoder output before projection.
    Encoder,
    /// Unit-norm shared-space embedding.
    Projected,
}

impl EmbeddingKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "z_e" | "encoder" => Ok(EmbeddingKind::Encoder),
            "projected" => Ok(EmbeddingKind::Projected),
            other => Err(MerlError::Config(format!("embedding kind {other:?}: expected z_e or projected"))),
        }
    }
}

/// Visualisation filter: single-label rows only, and drop classes rarer than `min_class_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExportFilter {
    pub single_label_only: bool,
    pub min_class_size: Option<usize>,
}

impl ExportFilter {
    pub fn visualisation() -> Self {
        ExportFilter {
            single_label_only: true,
            min_class_size: Some(50),
        }
    }

    fn keep(&self, manifest: &CorpusManifest, rows: &[usize]) -> Vec<usize> {
        let mut rows: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&i| !self.single_label_only || manifest.entries[i].labels.len() == 1)
            .collect();
        if let Some(min) = self.min_class_size {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for &i in &rows {
                for l in &manifest.entries[i].labels {
                    *counts.entry(l).or_default() += 1;
                }
            }
            rows.retain(|&i| manifest.entries[i].labels.iter().all(|l| counts[l.as_str()] >= min));
        }
        rows
    }
}

/// Writes `record_id,labels,e0..` for the selected manifest rows; `records`
/// must be aligned with `manifest.entries`. Labels are `|`-joined. Returns
/// the number of data rows written.
pub fn export_embeddings<F: Scalar>(
    model: &MerlModel<F>,
    manifest: &CorpusManifest,
    records: &[&EcgRecord],
    rows: &[usize],
    which: EmbeddingKind,
    filter: ExportFilter,
    path: &Path,
) -> Result<usize> {
    let rows = filter.keep(manifest, rows);
    let recs: Vec<&EcgRecord> = rows.iter().map(|&i| records[i]).collect();
    let z = model.encode_ecg(&recs)?;
    let z = match which {
        EmbeddingKind::Encoder => z,
        EmbeddingKind::Projected => model.project(&z, Modality::Ecg)?,
    };
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["record_id".to_string(), "labels".to_string()];
    header.extend((0..z.ncols()).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    for (r, &i) in rows.iter().enumerate() {
        let e = &manifest.entries[i];
        let mut line = vec![e.record_id.clone(), e.labels.join("|")];
        line.extend(z.row(r).iter().map(|v| format!("{v}")));
        w.write_record(&line)?;
    }
    w.flush().map_err(|e| MerlError::io(path, e))?;
    Ok(rows.len())
}
