use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MerlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Zeroshot,
    LinearProbe,
    Transfer,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Zeroshot => "zeroshot",
            EvalMode::LinearProbe => "linear_probe",
            EvalMode::Transfer => "transfer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub experiment: String,
    pub task_id: String,
    pub mode: EvalMode,
    /// 0 for zero-shot evaluation.
    pub training_ratio: f64,
    pub macro_auc: f64,
    pub per_class_auc: Vec<Option<f64>>,
    pub class_names: Vec<String>,
    pub config_fingerprint: String,
}

/// One line of the results store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResultRecord {
    Result(EvalResult),
    Failure {
        experiment: String,
        task_id: String,
        mode: EvalMode,
        error_code: String,
        message: String,
    },
}

/// Appends one record as a single write so concurrent writers never interleave lines.
pub fn append_result(path: &Path, record: &ResultRecord) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MerlError::io(dir, e))?;
    }
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| MerlError::io(path, e))?;
    f.write_all(&line).map_err(|e| MerlError::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = fs::read_to_string(path).map_err(|e| MerlError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MerlError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn column_of(r: &EvalResult) -> String {
    match r.mode {
        EvalMode::Zeroshot => format!("{} zero-shot", r.task_id),
        EvalMode::LinearProbe => format!("{} {}%", r.task_id, r.training_ratio * 100.0),
        EvalMode::Transfer if r.training_ratio == 0.0 => format!("{} zero-shot", r.task_id),
        EvalMode::Transfer => format!("{} {}%", r.task_id, r.training_ratio * 100.0),
    }
}

/// Experiments as rows, task/ratio as columns, macro AUC in percent.
/// The last result wins when a cell repeats. Returns `(csv, text)`.
pub fn render_table(records: &[ResultRecord]) -> (String, String) {
    let mut columns: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for r in records {
        if let ResultRecord::Result(r) = r {
            let col = column_of(r);
            if !columns.contains(&col) {
                columns.push(col.clone());
            }
            rows.entry(r.experiment.clone()).or_default().insert(col, r.macro_auc * 100.0);
        }
    }
    let cell = |v: Option<&f64>| v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());

    let mut csv = String::from("experiment");
    for c in &columns {
        csv += &format!(",{c}");
    }
    csv.push('\n');
    for (name, cells) in &rows {
        csv += name;
        for c in &columns {
            csv += &format!(",{}", cell(cells.get(c)));
        }
        csv.push('\n');
    }

    let name_w = rows.keys().map(String::len).max().unwrap_or(0).max("experiment".len());
    let widths: Vec<usize> = columns.iter().map(|c| c.len().max(6)).collect();
    let mut text = format!("{:<name_w$}", "experiment");
    for (c, w) in columns.iter().zip(&widths) {
        text += &format!(" | {c:>w$}");
    }
    text.push('\n');
    text += &"-".repeat(text.trim_end().len());
    text.push('\n');
    for (name, cells) in &rows {
        text += &format!("{name:<name_w$}");
        for (c, w) in columns.iter().zip(&widths) {
            text += &format!(" | {:>w$}", cell(cells.get(c)));
        }
        text.push('\n');
    }
    let failures: Vec<String> = records
        .iter()
        .filter_map(|r| match r {
            ResultRecord::Failure {
                experiment,
                task_id,
                mode,
                error_code,
                ..
            } => Some(format!("{experiment}/{task_id} ({}) failed: {error_code}", mode.as_str())),
            _ => None,
        })
        .collect();
    if !failures.is_empty() {
        text += "\n";
        text += &failures.join("\n");
        text.push('\n');
    }
    (csv, text)
}
