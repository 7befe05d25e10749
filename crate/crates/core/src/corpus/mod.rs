//! Paired ECG/report datasets: ingestion, curation, splitting and synthesis.

mod curate;
mod manifest;
mod repair;
mod signal_io;
mod split;
mod synthetic;

pub use curate::{curate_pairs, Curated, RejectReason, Rejected};
pub use manifest::{
    load_manifest, write_manifest, CorpusManifest, ManifestEntry, ManifestLoader, ReportSource,
    Split,
};
pub use repair::{count_non_finite, repair_invalid, repair_lead, MIN_FINITE_PER_LEAD};
pub use signal_io::{read_signal, read_signal_csv, write_signal, SIGNAL_MAGIC};
pub use split::{split_by_ratio, stratified_order, SplitReport};
pub(crate) use split::stratum_key;
pub use synthetic::{
    generate_synthetic_corpus, plant_defects, write_corpus, SyntheticClass, SyntheticCorpusSpec,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{MerlError, Result};

const TWELVE_LEADS: [&str; 12] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

/// Standard names for 12-lead recordings, `lead{i}` otherwise.
pub fn default_lead_names(num_leads: usize) -> Vec<String> {
    if num_leads == TWELVE_LEADS.len() {
        TWELVE_LEADS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..num_leads).map(|i| format!("lead{i}")).collect()
    }
}

/// A multi-lead, fixed-rate recording. `signal` is lead-major: `(num_leads, num_samples)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    pub signal: Array2<f32>,
    pub sampling_rate_hz: u32,
    pub lead_names: Vec<String>,
}

impl EcgRecord {
    pub fn new(
        record_id: impl Into<String>,
        signal: Array2<f32>,
        sampling_rate_hz: u32,
        lead_names: Vec<String>,
    ) -> Result<Self> {
        let record_id = record_id.into();
        let (leads, samples) = signal.dim();
        if leads == 0 || samples == 0 {
            return Err(MerlError::BatchShape(format!(
                "record {record_id}: empty signal ({leads}x{samples})"
            )));
        }
        if sampling_rate_hz == 0 {
            return Err(MerlError::Config(format!(
                "record {record_id}: sampling rate must be positive"
            )));
        }
        if lead_names.len() != leads {
            return Err(MerlError::BatchShape(format!(
                "record {record_id}: {} lead names for {leads} leads",
                lead_names.len()
            )));
        }
        Ok(EcgRecord {
            record_id,
            signal,
            sampling_rate_hz,
            lead_names,
        })
    }

    pub fn num_leads(&self) -> usize {
        self.signal.nrows()
    }

    pub fn num_samples(&self) -> usize {
        self.signal.ncols()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.num_samples() as f64 / self.sampling_rate_hz as f64
    }

    pub fn is_finite(&self) -> bool {
        self.signal.iter().all(|v| v.is_finite())
    }
}

/// Free-text report with its whitespace word count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalReport {
    pub text: String,
    pub word_count: usize,
}

impl ClinicalReport {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let word_count = text.split_whitespace().count();
        ClinicalReport { text, word_count }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcgReportPair {
    pub ecg: EcgRecord,
    pub report: ClinicalReport,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_count_uses_unicode_whitespace() {
        assert_eq!(ClinicalReport::new("sinus rhythm normal ecg").word_count, 4);
        assert_eq!(ClinicalReport::new("  abnormal\u{00A0}ecg ").word_count, 2);
        assert_eq!(ClinicalReport::new("rate 60, normal.").word_count, 3);
        assert_eq!(ClinicalReport::new("").word_count, 0);
    }

    #[test]
    fn record_rejects_mismatched_lead_names() {
        let err = EcgRecord::new("r", Array2::zeros((2, 10)), 500, vec!["I".into()]);
        assert!(matches!(err, Err(MerlError::BatchShape(_))));
        assert_eq!(default_lead_names(12)[3], "aVR");
        assert_eq!(default_lead_names(2), vec!["lead0", "lead1"]);
    }
}
