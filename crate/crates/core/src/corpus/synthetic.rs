//! Class-coded synthetic ECG/report corpora for desk-scale experiments.
//!
//! Class `k` is a sinusoid at `1 + 1.5k` Hz under a slow class-specific
//! amplitude envelope, phase-shifted per lead. With `variability > 0` each
//! record also gets a random time shift, amplitude factor and a distractor
//! sinusoid at a random in-band frequency. Reports are template
//! sentences naming the class's subtype and attribute tokens, so the text
//! predicts the label. Multi-label records sum their class waveforms.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, CorpusManifest, ManifestEntry, ReportSource};
use super::signal_io::write_signal;
use super::{default_lead_names, ClinicalReport, EcgRecord, EcgReportPair};
use crate::error::{MerlError, Result};
use crate::util::rng_stream;

const SUBTYPES: [&str; 8] = [
    "sinus", "atrial", "ventricular", "junctional", "septal", "lateral", "inferior", "nodal",
];
const ATTRIBUTES: [&str; 8] = [
    "peaked", "flattened", "widened", "inverted", "notched", "prolonged", "elevated", "slurred",
];
pub const DEFAULT_VARIABILITY: f64 = 1.0;
const DISTRACTOR_BAND_HZ: (f64, f64) = (0.5, 8.0);
const OPENERS: [&str; 4] = ["ecg shows", "findings consistent with", "recording demonstrates", "tracing suggests"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub num_pairs: usize,
    pub num_classes: usize,
    pub num_leads: usize,
    pub num_samples: usize,
    pub sampling_rate_hz: u32,
    pub noise_std: f64,
    pub seed: u64,
    /// Probability that a record carries a second, distinct label.
    #[serde(default)]
    pub multi_label_prob: f64,
    /// Per-record nuisance strength in [0, 1]; 0 makes every record of a
    /// class the same template plus white noise.
    #[serde(default)]
    pub variability: f64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            num_pairs: 2000,
            num_classes: 4,
            num_leads: 12,
            num_samples: 1000,
            sampling_rate_hz: 100,
            noise_std: 0.5,
            seed: 0,
            multi_label_prob: 0.0,
            variability: DEFAULT_VARIABILITY,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MerlError::Config(format!("synthetic corpus: {m}")));
        if self.num_pairs == 0 {
            return bad("num_pairs must be positive");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.num_leads == 0 || self.num_samples == 0 || self.sampling_rate_hz == 0 {
            return bad("leads, samples and sampling rate must be positive");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.variability) {
            return bad("variability must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.multi_label_prob) {
            return bad("multi_label_prob must lie in [0, 1]");
        }
        let top = SyntheticClass::new(self.num_classes - 1).frequency_hz;
        if top >= self.sampling_rate_hz as f64 / 2.0 {
            return bad("highest class frequency exceeds Nyquist; raise sampling_rate_hz");
        }
        Ok(())
    }
}

/// Tokens and waveform parameters of one synthetic class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClass {
    pub name: String,
    pub subtype: String,
    pub attribute: String,
    pub frequency_hz: f64,
    pub envelope_hz: f64,
}

impl SyntheticClass {
    pub fn new(k: usize) -> Self {
        let round = k / SUBTYPES.len();
        let suffix = if round == 0 { String::new() } else { round.to_string() };
        SyntheticClass {
            name: format!("syn{k}"),
            subtype: format!("{}{suffix}", SUBTYPES[k % SUBTYPES.len()]),
            attribute: format!("{}{suffix}", ATTRIBUTES[(k * 3) % ATTRIBUTES.len()]),
            frequency_hz: 1.0 + 1.5 * k as f64,
            envelope_hz: 0.1 * (k + 1) as f64,
        }
    }

    pub fn all(num_classes: usize) -> Vec<SyntheticClass> {
        (0..num_classes).map(SyntheticClass::new).collect()
    }

    /// Fixed-template prompt built from the class tokens.
    pub fn template_prompt(&self) -> String {
        format!("{} rhythm with {} waves", self.subtype, self.attribute)
    }

    fn sample(&self, lead: usize, num_leads: usize, t: f64) -> f64 {
        let phase = PI * lead as f64 / num_leads as f64;
        let envelope = 1.0 + 0.5 * (2.0 * PI * self.envelope_hz * t).sin();
        envelope * (2.0 * PI * self.frequency_hz * t + phase).sin()
    }
}

/// Generates a corpus; `pairs[i]` corresponds to `manifest.entries[i]`.
/// Signal paths point at `signals/<record_id>.ecg` (see [`write_corpus`]).
pub fn generate_synthetic_corpus(
    spec: &SyntheticCorpusSpec,
) -> Result<(CorpusManifest, Vec<EcgReportPair>)> {
    spec.validate()?;
    let classes = SyntheticClass::all(spec.num_classes);
    let mut label_rng = rng_stream(spec.seed, 1);
    let mut noise_rng = rng_stream(spec.seed, 2);
    let mut text_rng = rng_stream(spec.seed, 3);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0))
        .map_err(|e| MerlError::Config(e.to_string()))?;
    let lead_names = default_lead_names(spec.num_leads);
    let width = (spec.num_pairs.max(1) as f64).log10().floor() as usize + 1;

    let mut nuisance_rng = rng_stream(spec.seed, 4);
    let rate = spec.sampling_rate_hz as f64;
    let v = spec.variability;

    let mut entries = Vec::with_capacity(spec.num_pairs);
    let mut pairs = Vec::with_capacity(spec.num_pairs);
    for i in 0..spec.num_pairs {
        let mut ks = vec![label_rng.gen_range(0..spec.num_classes)];
        if spec.multi_label_prob > 0.0 && label_rng.gen_bool(spec.multi_label_prob) {
            let mut other = label_rng.gen_range(0..spec.num_classes - 1);
            if other >= ks[0] {
                other += 1;
            }
            ks.push(other);
        }
        ks.sort_unstable();

        let mut signal = Array2::<f64>::zeros((spec.num_leads, spec.num_samples));
        for &k in &ks {
            let (shift, gain) = if v > 0.0 {
                (
                    nuisance_rng.gen_range(0.0..v / classes[k].frequency_hz),
                    nuisance_rng.gen_range(1.0 - v / 2.0..=1.0 + v / 2.0),
                )
            } else {
                (0.0, 1.0)
            };
            signal.indexed_iter_mut().for_each(|((l, t), x)| {
                *x += gain * classes[k].sample(l, spec.num_leads, t as f64 / rate + shift);
            });
        }
        if v > 0.0 {
            let f = nuisance_rng.gen_range(DISTRACTOR_BAND_HZ.0..DISTRACTOR_BAND_HZ.1);
            let phase = nuisance_rng.gen_range(0.0..2.0 * PI);
            signal.indexed_iter_mut().for_each(|((l, t), x)| {
                let lead_phase = PI * l as f64 / spec.num_leads as f64;
                *x += v * (2.0 * PI * f * t as f64 / rate + phase + lead_phase).sin();
            });
        }
        if spec.noise_std > 0.0 {
            signal.mapv_inplace(|v| v + noise.sample(&mut noise_rng));
        }
        let signal = signal.mapv(|v| v as f32);

        let opener = OPENERS.choose(&mut text_rng).unwrap();
        let findings: Vec<String> = ks
            .iter()
            .map(|&k| format!("{} rhythm with {} waves", classes[k].subtype, classes[k].attribute))
            .collect();
        let text = format!("{opener} {}", findings.join(" and "));

        let record_id = format!("syn{i:0width$}");
        entries.push(ManifestEntry {
            record_id: record_id.clone(),
            signal_path: format!("signals/{record_id}.ecg").into(),
            report: ReportSource::Text(text.clone()),
            labels: ks.iter().map(|&k| classes[k].name.clone()).collect(),
        });
        pairs.push(EcgReportPair {
            ecg: EcgRecord::new(record_id, signal, spec.sampling_rate_hz, lead_names.clone())?,
            report: ClinicalReport::new(text),
        });
    }
    let manifest = CorpusManifest::new(entries, classes.iter().map(|c| c.name.clone()).collect())?;
    Ok((manifest, pairs))
}

/// Writes `manifest.csv` and `signals/*.ecg` under `dir`.
pub fn write_corpus(dir: &Path, manifest: &CorpusManifest, pairs: &[EcgReportPair]) -> Result<()> {
    fs::create_dir_all(dir.join("signals")).map_err(|e| MerlError::io(dir, e))?;
    for (entry, pair) in manifest.entries.iter().zip(pairs) {
        write_signal(
            &dir.join(&entry.signal_path),
            &pair.ecg.signal,
            pair.ecg.sampling_rate_hz,
        )?;
    }
    write_manifest(manifest, &dir.join("manifest.csv"))
}

/// Fault injection for curation tests: plants `non_finite` NaN/Inf samples
/// (repairable: at most one per lead) and replaces `bad_reports` reports by
/// empty or two-word texts, on distinct records chosen by `seed`. Returns
/// the indices whose reports were damaged.
pub fn plant_defects(
    pairs: &mut [EcgReportPair],
    non_finite: usize,
    bad_reports: usize,
    seed: u64,
) -> Vec<usize> {
    let mut rng = rng_stream(seed, 7);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let damaged: Vec<usize> = order.iter().copied().take(bad_reports).collect();
    for (n, &i) in damaged.iter().enumerate() {
        let text = if n % 2 == 0 { "" } else { "abnormal ecg" };
        pairs[i].report = ClinicalReport::new(text);
    }
    let mut slots: Vec<(usize, usize)> = order
        .iter()
        .skip(bad_reports)
        .flat_map(|&i| (0..pairs[i].ecg.num_leads()).map(move |l| (i, l)))
        .collect();
    slots.shuffle(&mut rng);
    for (n, &(i, l)) in slots.iter().take(non_finite).enumerate() {
        let t = rng.gen_range(0..pairs[i].ecg.num_samples());
        pairs[i].ecg.signal[[l, t]] = match n % 3 {
            0 => f32::NAN,
            1 => f32::INFINITY,
            _ => f32::NEG_INFINITY,
        };
    }
    damaged
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_manifest;

    fn small(seed: u64, noise: f64) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            num_pairs: 40,
            num_classes: 3,
            num_leads: 2,
            num_samples: 200,
            sampling_rate_hz: 100,
            noise_std: noise,
            seed,
            multi_label_prob: 0.0,
            variability: 0.0,
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let (m1, p1) = generate_synthetic_corpus(&small(7, 0.3)).unwrap();
        let (m2, p2) = generate_synthetic_corpus(&small(7, 0.3)).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(p1, p2);
        let (_, p3) = generate_synthetic_corpus(&small(8, 0.3)).unwrap();
        assert_ne!(p1, p3);
    }

    #[test]
    fn noiseless_distances() {
        let (m, p) = generate_synthetic_corpus(&small(1, 0.0)).unwrap();
        for i in 0..p.len() {
            for j in 0..p.len() {
                let d: f32 = (&p[i].ecg.signal - &p[j].ecg.signal).iter().map(|v| v * v).sum();
                if m.entries[i].labels == m.entries[j].labels {
                    assert_eq!(d, 0.0);
                } else {
                    assert!(d > 0.0);
                }
            }
        }
    }

    #[test]
    fn reports_name_class_tokens() {
        let (m, p) = generate_synthetic_corpus(&small(2, 0.1)).unwrap();
        let classes = SyntheticClass::all(3);
        for (e, pair) in m.entries.iter().zip(&p) {
            let k: usize = e.labels[0][3..].parse().unwrap();
            assert!(pair.report.text.contains(&classes[k].subtype));
            assert!(pair.report.text.contains(&classes[k].attribute));
            assert!(pair.report.word_count >= 3);
        }
    }

    #[test]
    fn class_balance_under_uniform_sampling() {
        let spec = SyntheticCorpusSpec {
            num_pairs: 2000,
            num_classes: 4,
            num_leads: 1,
            num_samples: 20,
            ..SyntheticCorpusSpec::default()
        };
        let (m, _) = generate_synthetic_corpus(&spec).unwrap();
        // binomial(2000, 1/4): sd ~ 19.4, 5 sd ~ 97
        for c in 0..4 {
            let n = m.entries.iter().filter(|e| e.labels[0] == format!("syn{c}")).count();
            assert!((403..=597).contains(&n), "class {c}: {n}");
        }
    }

    #[test]
    fn multi_label_sums_waveforms() {
        let spec = SyntheticCorpusSpec {
            multi_label_prob: 1.0,
            ..small(3, 0.0)
        };
        let (m, p) = generate_synthetic_corpus(&spec).unwrap();
        let classes = SyntheticClass::all(3);
        let e = &m.entries[0];
        assert_eq!(e.labels.len(), 2);
        let ks: Vec<usize> = e.labels.iter().map(|l| l[3..].parse().unwrap()).collect();
        let want = classes[ks[0]].sample(1, 2, 0.37) + classes[ks[1]].sample(1, 2, 0.37);
        assert!((p[0].ecg.signal[[1, 37]] as f64 - want).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_synthetic_corpus(&SyntheticCorpusSpec { num_classes: 1, ..small(0, 0.0) }).is_err());
        assert!(generate_synthetic_corpus(&SyntheticCorpusSpec { sampling_rate_hz: 8, ..small(0, 0.0) }).is_err());
    }

    #[test]
    fn written_corpus_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let (m, p) = generate_synthetic_corpus(&small(4, 0.2)).unwrap();
        write_corpus(dir.path(), &m, &p).unwrap();
        let loaded = load_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(loaded.entries, m.entries);
        assert_eq!(loaded.load_pairs().unwrap(), p);
    }

    #[test]
    fn planting_counts() {
        let (_, mut p) = generate_synthetic_corpus(&small(5, 0.1)).unwrap();
        let damaged = plant_defects(&mut p, 10, 3, 11);
        assert_eq!(damaged.len(), 3);
        let nonfinite: usize = p.iter().map(|x| x.ecg.signal.iter().filter(|v| !v.is_finite()).count()).sum();
        assert_eq!(nonfinite, 10);
        assert_eq!(p.iter().filter(|x| x.report.word_count < 3).count(), 3);
    }
}
