//! INI experiment configuration. Every known key has a default; the resolved
//! key set (defaults overlaid with file values and `--set` overrides) is what
//! gets fingerprinted and written next to the results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use sha2::{Digest, Sha256};

use crate::alignment::{DenominatorVariant, PretrainConfig, UmaMode};
use crate::augmentation::{AugmentationKind, AugmentationSpec};
use crate::ckepe::PROMPT_TEMPLATE_VERSION;
use crate::corpus::SyntheticCorpusSpec;
use crate::encoders::{EcgBackbone, EncoderConfig, TextEncoderKind, VitConfig};
use crate::error::{MerlError, Result};
use crate::harness::ProbeConfig;
use crate::zeroshot::PromptStyle;

const DEFAULTS: &[(&str, &str)] = &[
    ("experiment.name", "merl"),
    ("experiment.seed", "0"),
    ("experiment.output_dir", "runs/merl"),
    ("experiment.tasks", "zeroshot,probe"),
    ("experiment.precision", "f32"),
    ("experiment.checkpoint", ""),
    ("corpus.manifest", ""),
    ("corpus.split", "0.8,0.1,0.1"),
    ("synthetic.num_pairs", "2000"),
    ("synthetic.num_classes", "4"),
    ("synthetic.num_leads", "12"),
    ("synthetic.num_samples", "1000"),
    ("synthetic.sampling_rate_hz", "100"),
    ("synthetic.noise_std", "0.5"),
    ("synthetic.multi_label_prob", "0"),
    ("synthetic.variability", "1.0"),
    ("encoder.backbone", "resnet1d_18"),
    ("encoder.resnet_width", "64"),
    ("encoder.ecg_embed_dim", "512"),
    ("encoder.text_encoder", "stub_hash"),
    ("encoder.text_embed_dim", "768"),
    ("encoder.text_trainable", "true"),
    ("encoder.shared_dim", "256"),
    ("encoder.projector_hidden", "512"),
    ("encoder.vit_dim", "192"),
    ("encoder.vit_depth", "12"),
    ("encoder.vit_heads", "3"),
    ("encoder.vit_mlp_ratio", "4"),
    ("encoder.vit_patch_len", "50"),
    ("pretrain.epochs", "50"),
    ("pretrain.learning_rate", "2e-4"),
    ("pretrain.weight_decay", "1e-5"),
    ("pretrain.batch_size", "512"),
    ("pretrain.temperature", "0.07"),
    ("pretrain.denominator_variant", "standard"),
    ("pretrain.uma", "latent_dropout"),
    ("pretrain.dropout_ratio", "0.1"),
    ("pretrain.dropout_rescale", "false"),
    ("pretrain.augmentation", "cutout"),
    ("pretrain.augmentation_magnitude", "0.1"),
    ("pretrain.scale_lr_with_batch", "true"),
    ("pretrain.reference_batch", "512"),
    ("pretrain.warmup_steps", "0"),
    ("probe.ratios", "0.01,0.1,1.0"),
    ("probe.learning_rate", "1e-3"),
    ("probe.batch_size", "16"),
    ("probe.epochs", "100"),
    ("probe.warmup_steps", "5"),
    ("probe.weight_decay", "0"),
    ("zeroshot.prompts", ""),
    ("zeroshot.style", "template"),
    ("transfer.map", ""),
    ("transfer.target_manifest", ""),
    ("transfer.prompts", ""),
    ("ckepe.classes", ""),
    ("ckepe.style", "ckepe"),
    ("ckepe.web_kb", ""),
    ("ckepe.local_kb", ""),
    ("ckepe.llm", "fixture"),
    ("ckepe.llm_fixture", ""),
    ("ckepe.endpoint", ""),
    ("ckepe.model", ""),
    ("ckepe.api_key_env", "MERL_LLM_API_KEY"),
    ("ckepe.output", ""),
];

/// Flat `section.key -> value` view of a configuration.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawConfig {
    pub values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn defaults() -> Self {
        RawConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    fn check_key(key: &str) -> Result<()> {
        if DEFAULTS.iter().any(|(k, _)| *k == key) {
            Ok(())
        } else {
            Err(MerlError::Config(format!("unknown configuration key {key:?}")))
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        Self::check_key(key)?;
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| MerlError::Config(format!("override {spec:?} is not section.key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn merge_ini_str(&mut self, text: &str) -> Result<()> {
        let ini = Ini::load_from_str(text).map_err(|e| MerlError::Config(format!("INI parse error: {e}")))?;
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let key = match section {
                    Some(s) => format!("{s}.{k}"),
                    None => k.to_string(),
                };
                self.set(&key, v)?;
            }
        }
        Ok(())
    }

    pub fn merge_ini_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| MerlError::io(path, e))?;
        self.merge_ini_str(&text)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse()
            .map_err(|e| MerlError::Config(format!("{key} = {raw:?}: {e}")))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| MerlError::Config(format!("{key}: {s:?}: {e}"))))
            .collect()
    }

    /// Canonical text: sorted `key=value` lines.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, v) in &self.values {
            let (s, key) = k.split_once('.').unwrap_or(("", k));
            if s != section {
                if !out.is_empty() {
                    out.push('\n');
                }
                out += &format!("[{s}]\n");
                section = s;
            }
            out += &format!("{key} = {v}\n");
        }
        out
    }

    /// SHA-256 over the canonical key set plus the prompt template version.
    /// Where results are written does not affect them, so the output
    /// directory is left out.
    pub fn fingerprint(&self, extra: &str) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.values.iter().filter(|(k, _)| k.as_str() != "experiment.output_dir") {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.update(format!("prompt_template={PROMPT_TEMPLATE_VERSION}\n").as_bytes());
        h.update(extra.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Resolves defaults, then the optional file, then overrides, then `--seed`.
pub fn resolve_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RawConfig> {
    let mut raw = RawConfig::defaults();
    if let Some(p) = path {
        raw.merge_ini_file(p)?;
    }
    for o in overrides {
        raw.apply_override(o)?;
    }
    if let Some(s) = seed {
        raw.set("experiment.seed", &s.to_string())?;
    }
    Ok(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Zeroshot,
    Probe,
    Transfer,
}

/// Typed view of a resolved [`RawConfig`].
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub raw: RawConfig,
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub tasks: Vec<TaskKind>,
    pub precision: Precision,
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub split: (f64, f64, f64),
    pub synthetic: SyntheticCorpusSpec,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub probe_ratios: Vec<f64>,
    pub probe: ProbeConfig,
    pub prompts: Option<PathBuf>,
    pub prompt_style: PromptStyle,
    pub transfer_map: Option<String>,
    pub transfer_target: Option<PathBuf>,
    pub transfer_prompts: Option<PathBuf>,
    pub ckepe: CkepeSettings,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LlmSource {
    Fixture(Option<PathBuf>),
    Live {
        endpoint: String,
        model: String,
        api_key_env: String,
    },
}

/// Prompt-construction inputs. `classes` holds `(class_name, condition)`;
/// empty means "use the corpus vocabulary, condition = class name".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CkepeSettings {
    pub classes: Vec<(String, String)>,
    pub style: PromptStyle,
    pub web_kb: Option<PathBuf>,
    pub local_kb: Option<PathBuf>,
    pub llm: LlmSource,
    pub output: Option<PathBuf>,
}

impl CkepeSettings {
    fn from_raw(raw: &RawConfig) -> Result<Self> {
        let classes = raw
            .list::<String>("ckepe.classes")?
            .into_iter()
            .map(|c| match c.split_once(':') {
                Some((name, cond)) => (name.trim().to_string(), cond.trim().to_string()),
                None => (c.clone(), c),
            })
            .collect();
        let llm = match raw.get("ckepe.llm") {
            "fixture" => LlmSource::Fixture(raw.path("ckepe.llm_fixture")),
            "live" => LlmSource::Live {
                endpoint: raw.get("ckepe.endpoint").to_string(),
                model: raw.get("ckepe.model").to_string(),
                api_key_env: raw.get("ckepe.api_key_env").to_string(),
            },
            other => return Err(MerlError::Config(format!("ckepe.llm = {other:?}: expected fixture or live"))),
        };
        Ok(CkepeSettings {
            classes,
            style: PromptStyle::parse(raw.get("ckepe.style"))?,
            web_kb: raw.path("ckepe.web_kb"),
            local_kb: raw.path("ckepe.local_kb"),
            llm,
            output: raw.path("ckepe.output"),
        })
    }
}

fn parse_bool(raw: &RawConfig, key: &str) -> Result<bool> {
    match raw.get(key).to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(MerlError::Config(format!("{key} = {other:?} is not a boolean"))),
    }
}

impl ExperimentConfig {
    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let seed: u64 = raw.parse("experiment.seed")?;
        let tasks = raw
            .list::<String>("experiment.tasks")?
            .iter()
            .map(|t| match t.as_str() {
                "zeroshot" => Ok(TaskKind::Zeroshot),
                "probe" => Ok(TaskKind::Probe),
                "transfer" => Ok(TaskKind::Transfer),
                other => Err(MerlError::Config(format!("unknown task {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let precision = match raw.get("experiment.precision") {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => return Err(MerlError::Config(format!("precision {other:?}: expected f32 or f64"))),
        };
        let split: Vec<f64> = raw.list("corpus.split")?;
        if split.len() != 3 {
            return Err(MerlError::Config("corpus.split needs three ratios".into()));
        }
        let synthetic = SyntheticCorpusSpec {
            num_pairs: raw.parse("synthetic.num_pairs")?,
            num_classes: raw.parse("synthetic.num_classes")?,
            num_leads: raw.parse("synthetic.num_leads")?,
            num_samples: raw.parse("synthetic.num_samples")?,
            sampling_rate_hz: raw.parse("synthetic.sampling_rate_hz")?,
            noise_std: raw.parse("synthetic.noise_std")?,
            seed,
            multi_label_prob: raw.parse("synthetic.multi_label_prob")?,
            variability: raw.parse("synthetic.variability")?,
        };
        let encoder = EncoderConfig {
            ecg_backbone: EcgBackbone::parse(raw.get("encoder.backbone"))?,
            num_leads: synthetic.num_leads,
            num_samples: synthetic.num_samples,
            resnet_width: raw.parse("encoder.resnet_width")?,
            vit: VitConfig {
                dim: raw.parse("encoder.vit_dim")?,
                depth: raw.parse("encoder.vit_depth")?,
                heads: raw.parse("encoder.vit_heads")?,
                mlp_ratio: raw.parse("encoder.vit_mlp_ratio")?,
                patch_len: raw.parse("encoder.vit_patch_len")?,
                stem_channels: synthetic.num_leads,
            },
            ecg_embed_dim: raw.parse("encoder.ecg_embed_dim")?,
            text_encoder: TextEncoderKind::parse(raw.get("encoder.text_encoder"))?,
            text_embed_dim: raw.parse("encoder.text_embed_dim")?,
            text_trainable: parse_bool(&raw, "encoder.text_trainable")?,
            shared_dim: raw.parse("encoder.shared_dim")?,
            projector_hidden: raw.parse("encoder.projector_hidden")?,
            seed,
        };
        let uma = match raw.get("pretrain.uma") {
            "latent_dropout" => UmaMode::LatentDropout {
                ratio: raw.parse("pretrain.dropout_ratio")?,
            },
            "none" => UmaMode::None,
            "input_augmentation" => {
                let magnitude: f64 = raw.parse("pretrain.augmentation_magnitude")?;
                let kind = match AugmentationKind::parse(raw.get("pretrain.augmentation"))? {
                    AugmentationKind::Cutout { .. } => AugmentationKind::Cutout { segment_fraction: magnitude },
                    AugmentationKind::Drop { .. } => AugmentationKind::Drop { point_fraction: magnitude },
                    AugmentationKind::GaussianNoise { .. } => AugmentationKind::GaussianNoise { sigma: magnitude },
                };
                UmaMode::InputAugmentation {
                    augmentation: AugmentationSpec { kind, seed },
                }
            }
            other => return Err(MerlError::Config(format!("pretrain.uma = {other:?}"))),
        };
        let pretrain = PretrainConfig {
            epochs: raw.parse("pretrain.epochs")?,
            learning_rate: raw.parse("pretrain.learning_rate")?,
            weight_decay: raw.parse("pretrain.weight_decay")?,
            batch_size: raw.parse("pretrain.batch_size")?,
            seed,
            temperature: raw.parse("pretrain.temperature")?,
            denominator_variant: DenominatorVariant::parse(raw.get("pretrain.denominator_variant"))?,
            uma,
            dropout_rescale: parse_bool(&raw, "pretrain.dropout_rescale")?,
            scale_lr_with_batch: parse_bool(&raw, "pretrain.scale_lr_with_batch")?,
            reference_batch: raw.parse("pretrain.reference_batch")?,
            warmup_steps: raw.parse("pretrain.warmup_steps")?,
        };
        let probe = ProbeConfig {
            training_ratio: 1.0,
            learning_rate: raw.parse("probe.learning_rate")?,
            batch_size: raw.parse("probe.batch_size")?,
            epochs: raw.parse("probe.epochs")?,
            warmup_steps: raw.parse("probe.warmup_steps")?,
            weight_decay: raw.parse("probe.weight_decay")?,
            seed,
        };
        let cfg = ExperimentConfig {
            name: raw.get("experiment.name").to_string(),
            seed,
            output_dir: PathBuf::from(raw.get("experiment.output_dir")),
            tasks,
            precision,
            checkpoint: raw.path("experiment.checkpoint"),
            manifest: raw.path("corpus.manifest"),
            split: (split[0], split[1], split[2]),
            synthetic,
            encoder,
            pretrain,
            probe_ratios: raw.list("probe.ratios")?,
            probe,
            prompts: raw.path("zeroshot.prompts"),
            prompt_style: PromptStyle::parse(raw.get("zeroshot.style"))?,
            transfer_map: Some(raw.get("transfer.map").to_string()).filter(|s| !s.is_empty()),
            transfer_target: raw.path("transfer.target_manifest"),
            transfer_prompts: raw.path("transfer.prompts"),
            ckepe: CkepeSettings::from_raw(&raw)?,
            raw,
        };
        cfg.encoder.validate()?;
        cfg.pretrain.validate()?;
        for &r in &cfg.probe_ratios {
            ProbeConfig {
                training_ratio: r,
                ..cfg.probe.clone()
            }
            .validate()?;
        }
        Ok(cfg)
    }

    pub fn fingerprint(&self, extra: &str) -> String {
        self.raw.fingerprint(extra)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_and_unknown_keys() {
        let mut raw = RawConfig::defaults();
        raw.merge_ini_str("[pretrain]\nepochs = 3\n[experiment]\nname = toy\n").unwrap();
        raw.apply_override("pretrain.dropout_ratio=0.2").unwrap();
        let cfg = ExperimentConfig::from_raw(raw.clone()).unwrap();
        assert_eq!(cfg.pretrain.epochs, 3);
        assert_eq!(cfg.name, "toy");
        assert_eq!(cfg.pretrain.uma, UmaMode::LatentDropout { ratio: 0.2 });
        assert!(raw.apply_override("pretrain.dropout=0.2").is_err());
        assert!(raw.merge_ini_str("[nope]\nx = 1\n").is_err());
    }

    #[test]
    fn fingerprints() {
        let a = resolve_config(None, &[], Some(1)).unwrap();
        let b = resolve_config(None, &[], Some(1)).unwrap();
        let c = resolve_config(None, &["pretrain.dropout_ratio=0.2".into()], Some(1)).unwrap();
        let d = resolve_config(None, &[], Some(2)).unwrap();
        assert_eq!(a.fingerprint(""), b.fingerprint(""));
        assert_ne!(a.fingerprint(""), c.fingerprint(""));
        assert_ne!(a.fingerprint(""), d.fingerprint(""));
        assert_ne!(a.fingerprint("x"), a.fingerprint("y"));
        let mut again = RawConfig::defaults();
        again.merge_ini_str(&a.to_ini()).unwrap();
        assert_eq!(again.fingerprint(""), a.fingerprint(""));
    }

    #[test]
    fn bad_values() {
        let mut raw = RawConfig::defaults();
        raw.set("pretrain.uma", "magic").unwrap();
        assert!(ExperimentConfig::from_raw(raw).is_err());
        let mut raw = RawConfig::defaults();
        raw.set("probe.ratios", "0,1").unwrap();
        assert!(ExperimentConfig::from_raw(raw).is_err());
    }
}
