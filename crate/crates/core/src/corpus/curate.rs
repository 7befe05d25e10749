use serde::{Deserialize, Serialize};

use super::repair::repair_invalid;
use super::EcgReportPair;

pub const MIN_REPORT_WORDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    EmptyReport,
    ShortReport,
    UnrecoverableSignal,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::EmptyReport => "empty_report",
            RejectReason::ShortReport => "short_report",
            RejectReason::UnrecoverableSignal => "unrecoverable_signal",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rejected {
    /// Position of the pair in the curation input.
    pub index: usize,
    pub pair: EcgReportPair,
    pub reason: RejectReason,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Curated {
    /// Kept pairs with repaired signals, in input order.
    pub kept: Vec<EcgReportPair>,
    pub kept_indices: Vec<usize>,
    pub rejected: Vec<Rejected>,
}

/// Drops pairs with empty or short reports, repairs non-finite samples, and
/// drops pairs whose signal cannot be repaired.
pub fn curate_pairs(pairs: Vec<EcgReportPair>) -> Curated {
    let mut out = Curated::default();
    for (index, mut pair) in pairs.into_iter().enumerate() {
        let reason = if pair.report.text.trim().is_empty() || pair.report.word_count == 0 {
            Some((RejectReason::EmptyReport, None))
        } else if pair.report.word_count < MIN_REPORT_WORDS {
            Some((RejectReason::ShortReport, None))
        } else {
            match repair_invalid(&pair.ecg.signal, &pair.ecg.record_id) {
                Ok(fixed) => {
                    pair.ecg.signal = fixed;
                    None
                }
                Err(e) => Some((RejectReason::UnrecoverableSignal, Some(e.to_string()))),
            }
        };
        match reason {
            None => {
                out.kept.push(pair);
                out.kept_indices.push(index);
            }
            Some((reason, detail)) => out.rejected.push(Rejected {
                index,
                pair,
                reason,
                detail,
            }),
        }
    }
    out
}
