//! Deterministic, order-independent train/valid/test assignment.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;

use super::manifest::{CorpusManifest, Split};
use crate::error::{MerlError, Result};
use crate::util::{keyed_hash, keyed_unit};

#[derive(Debug, Clone, PartialEq)]
pub struct SplitReport {
    pub counts: [usize; 3],
    pub stratified: bool,
    pub warning: Option<String>,
}

/// Order in which records are drawn when taking prefixes for splits and
/// subsamples. Each stratum's records are spread evenly along the order, so
/// every prefix holds each stratum in proportion (±1). The order depends only
/// on `(record_id, stratum)` pairs and `seed`, never on input position.
pub fn stratified_order(items: &[(&str, String)], seed: u64) -> Vec<usize> {
    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (_, s)) in items.iter().enumerate() {
        strata.entry(s.as_str()).or_default().push(i);
    }
    let mut keyed: Vec<(f64, u64, usize)> = Vec::with_capacity(items.len());
    for members in strata.values_mut() {
        members.sort_by_key(|&i| (keyed_hash(seed, "order", items[i].0), items[i].0));
        let n = members.len() as f64;
        for (rank, &i) in members.iter().enumerate() {
            let jitter = keyed_unit(seed, "jitter", items[i].0);
            keyed.push(((rank as f64 + jitter) / n, keyed_hash(seed, "tie", items[i].0), i));
        }
    }
    keyed.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then_with(|| items[a.2].0.cmp(items[b.2].0))
    });
    keyed.into_iter().map(|(_, _, i)| i).collect()
}

fn unstratified_order(ids: &[&str], seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    idx.sort_by_key(|&i| (keyed_hash(seed, "order", ids[i]), ids[i]));
    idx
}

/// Largest-remainder allocation of `n` items over `ratios`.
pub(crate) fn allocate(n: usize, ratios: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut by_frac: Vec<usize> = (0..ratios.len()).collect();
    by_frac.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
    for &i in by_frac.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

pub(crate) fn stratum_key(labels: &[String]) -> String {
    let set: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
    set.into_iter().collect::<Vec<_>>().join("|")
}

/// Assigns every record to train/valid/test in the given proportions.
pub fn split_by_ratio(
    manifest: &CorpusManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(CorpusManifest, SplitReport)> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(MerlError::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    if manifest.is_empty() {
        return Err(MerlError::EmptyManifest);
    }
    let n = manifest.len();
    let counts = allocate(n, &r);
    let items: Vec<(&str, String)> = manifest
        .entries
        .iter()
        .map(|e| (e.record_id.as_str(), stratum_key(&e.labels)))
        .collect();

    let assign = |order: &[usize]| -> Vec<Split> {
        let mut out = vec![Split::Train; n];
        for (pos, &i) in order.iter().enumerate() {
            out[i] = if pos < counts[0] {
                Split::Train
            } else if pos < counts[0] + counts[1] {
                Split::Valid
            } else {
                Split::Test
            };
        }
        out
    };

    let mut splits = assign(&stratified_order(&items, seed));
    let mut stratified = true;
    let mut warning = None;

    // every class must reach every non-empty split, else fall back
    let mut reach: BTreeMap<&str, [bool; 3]> = BTreeMap::new();
    for (e, s) in manifest.entries.iter().zip(&splits) {
        for l in &e.labels {
            reach.entry(l.as_str()).or_default()[*s as usize] = true;
        }
    }
    let missing: Vec<&str> = reach
        .iter()
        .filter(|(_, hit)| (0..3).any(|k| counts[k] > 0 && !hit[k]))
        .map(|(l, _)| *l)
        .collect();
    if !missing.is_empty() {
        let msg = format!(
            "classes {} cannot be represented in every split; using an unstratified split",
            missing.join(", ")
        );
        warn!("{msg}");
        warning = Some(msg);
        stratified = false;
        let ids: Vec<&str> = items.iter().map(|(id, _)| *id).collect();
        splits = assign(&unstratified_order(&ids, seed));
    }

    let mut out = manifest.clone();
    out.split_assignment = manifest
        .entries
        .iter()
        .zip(&splits)
        .map(|(e, s)| (e.record_id.clone(), *s))
        .collect();
    let report = SplitReport {
        counts: out.split_counts(),
        stratified,
        warning,
    };
    Ok((out, report))
}
