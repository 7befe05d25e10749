use crate::corpus::{stratified_order, CorpusManifest};
use crate::corpus::stratum_key;
use crate::error::{MerlError, Result};

/// Picks `round(ratio * n)` of the given manifest rows, stratified by label set.
///
/// Subsets for one seed are nested across ratios: they are prefixes of the
/// same draw order. Ratio 1.0 returns `indices` unchanged; otherwise the
/// chosen rows come back in their original relative order.
pub fn subsample_split(manifest: &CorpusManifest, indices: &[usize], ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(MerlError::Config(format!("training ratio must lie in (0, 1], got {ratio}")));
    }
    if ratio == 1.0 {
        return Ok(indices.to_vec());
    }
    let k = (ratio * indices.len() as f64).round() as usize;
    if k == 0 {
        return Err(MerlError::Config(format!(
            "ratio {ratio} of {} training rows selects nothing",
            indices.len()
        )));
    }
    let items: Vec<(&str, String)> = indices
        .iter()
        .map(|&i| {
            let e = &manifest.entries[i];
            (e.record_id.as_str(), stratum_key(&e.labels))
        })
        .collect();
    let mut picked: Vec<usize> = stratified_order(&items, seed)[..k].to_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|p| indices[p]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ManifestEntry, ReportSource};
    use proptest::prelude::*;

    fn manifest(n: usize, classes: usize) -> CorpusManifest {
        let entries = (0..n)
            .map(|i| ManifestEntry {
                record_id: format!("r{i:05}"),
                signal_path: "x".into(),
                report: ReportSource::Text(String::new()),
                labels: vec![format!("c{}", (i * 7) % classes)],
            })
            .collect();
        CorpusManifest::new(entries, (0..classes).map(|c| format!("c{c}")).collect()).unwrap()
    }

    #[test]
    fn sizes_and_identity() {
        let m = manifest(1000, 4);
        let all: Vec<usize> = (0..1000).collect();
        assert_eq!(subsample_split(&m, &all, 0.1, 3).unwrap().len(), 100);
        assert_eq!(subsample_split(&m, &all, 1.0, 3).unwrap(), all);
        assert!(subsample_split(&m, &all[..10], 0.01, 3).is_err());
        assert!(subsample_split(&m, &all, 0.0, 3).is_err());
    }

    #[test]
    fn strata_are_proportional() {
        let m = manifest(1000, 4);
        let all: Vec<usize> = (0..1000).collect();
        let sub = subsample_split(&m, &all, 0.1, 9).unwrap();
        for c in 0..4 {
            let n = sub.iter().filter(|&&i| m.entries[i].labels[0] == format!("c{c}")).count();
            assert!((24..=26).contains(&n), "class {c}: {n}");
        }
    }

    proptest! {
        #[test]
        fn nested_across_ratios(seed in 0u64..500, n in 100usize..600) {
            let m = manifest(n, 5);
            let all: Vec<usize> = (0..n).collect();
            let small = subsample_split(&m, &all, 0.01, seed).unwrap();
            let mid = subsample_split(&m, &all, 0.1, seed).unwrap();
            prop_assert!(small.iter().all(|i| mid.contains(i)));
            prop_assert!(mid.iter().all(|i| all.contains(i)));
        }
    }
}
