use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use super::config::{ExperimentConfig, LlmSource, Precision, TaskKind};
use super::probe::{linear_probe, ProbeConfig, ProbeOutcome};
use super::results::{append_result, render_table, EvalMode, EvalResult, ResultRecord};
use super::subsample::subsample_split;
use super::transfer::{apply_transfer_map, TransferMap};
use crate::alignment::{pretrain, PretrainOutputs, PretrainReport};
use crate::ckepe::{build_prompt_set, load_kb, FixtureClient, KbKind, KnowledgeBase, LiveClient, LlmClient, VerifiedPrompt};
use crate::corpus::{
    curate_pairs, generate_synthetic_corpus, split_by_ratio, CorpusManifest, EcgRecord, EcgReportPair, ManifestLoader,
    Split, SyntheticClass,
};
use crate::encoders::{load_checkpoint, AdapterRegistry, EncoderConfig, MerlModel};
use crate::error::{MerlError, Result};
use crate::scalar::Scalar;
use crate::zeroshot::{read_prompt_file, score_records, AucReport, ClassPrompt, ClassPromptSet, PromptStyle, ScoreMatrix};

/// Curated pairs aligned with a split-assigned manifest.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub task_id: String,
    pub manifest: CorpusManifest,
    pub pairs: Vec<EcgReportPair>,
    pub rejected: usize,
}

impl Corpus {
    /// Curates, then assigns splits when the manifest carries none.
    pub fn prepare(task_id: String, manifest: CorpusManifest, pairs: Vec<EcgReportPair>, split: (f64, f64, f64), seed: u64) -> Result<Self> {
        let curated = curate_pairs(pairs);
        for r in &curated.rejected {
            info!("rejected {} ({})", r.pair.ecg.record_id, r.reason.as_str());
        }
        let mut manifest = manifest.subset(&curated.kept_indices);
        if manifest.split_assignment.len() != manifest.len() {
            let (m, report) = split_by_ratio(&manifest, split, seed)?;
            if let Some(w) = report.warning {
                warn!("{task_id}: {w}");
            }
            manifest = m;
        }
        Ok(Corpus {
            task_id,
            manifest,
            pairs: curated.kept,
            rejected: curated.rejected.len(),
        })
    }

    pub fn records(&self, indices: &[usize]) -> Vec<&EcgRecord> {
        indices.iter().map(|&i| &self.pairs[i].ecg).collect()
    }

    pub fn pairs_in(&self, split: Split) -> Vec<EcgReportPair> {
        self.manifest.indices_in(split).into_iter().map(|i| self.pairs[i].clone()).collect()
    }
}

fn load_manifest_corpus(path: &Path, cfg: &ExperimentConfig) -> Result<Corpus> {
    let manifest = ManifestLoader::default().load(path)?;
    let pairs = manifest.load_pairs()?;
    // `<task>/manifest.csv` is named after its directory
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let task_id = match path.parent().and_then(Path::file_name) {
        Some(dir) if stem == "manifest" => dir.to_string_lossy().into_owned(),
        _ if stem.is_empty() => "corpus".into(),
        _ => stem,
    };
    Corpus::prepare(task_id, manifest, pairs, cfg.split, cfg.seed)
}

/// The configured corpus: a manifest on disk, or the synthetic generator.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match &cfg.manifest {
        Some(path) => load_manifest_corpus(path, cfg),
        None => {
            let (manifest, pairs) = generate_synthetic_corpus(&cfg.synthetic)?;
            Corpus::prepare("synthetic".into(), manifest, pairs, cfg.split, cfg.seed)
        }
    }
}

/// `synK` labels get the generator's template prompt; anything else its name.
pub fn default_prompts(vocabulary: &[String], style: PromptStyle) -> Result<ClassPromptSet> {
    let synthetic = |l: &str| l.strip_prefix("syn").and_then(|k| k.parse::<usize>().ok());
    let entries = vocabulary
        .iter()
        .map(|l| match (style, synthetic(l)) {
            (PromptStyle::NameOnly, _) | (_, None) => ClassPrompt::plain(l.clone(), l.clone()),
            (_, Some(k)) => ClassPrompt::plain(l.clone(), SyntheticClass::new(k).template_prompt()),
        })
        .collect();
    ClassPromptSet::new(entries, style)
}

pub fn class_prompts(path: Option<&Path>, vocabulary: &[String], style: PromptStyle) -> Result<ClassPromptSet> {
    match path {
        Some(p) => read_prompt_file(p)?.aligned_to(vocabulary),
        None => default_prompts(vocabulary, style),
    }
}

/// Zero-shot scores on one split of the corpus.
pub fn evaluate_zeroshot<F: Scalar>(
    model: &MerlModel<F>,
    corpus: &Corpus,
    prompts: &ClassPromptSet,
    split: Split,
) -> Result<(AucReport, ScoreMatrix)> {
    let idx = corpus.manifest.indices_in(split);
    let prompts = prompts.aligned_to(&corpus.manifest.label_vocabulary)?;
    let scores = score_records(&corpus.records(&idx), &prompts, model)?;
    let auc = crate::zeroshot::macro_auc(&scores.values, &corpus.manifest.label_matrix(&idx))?;
    Ok((auc, scores))
}

/// Linear probe: train split subsampled to `cfg.training_ratio`, scored on test.
pub fn evaluate_probe<F: Scalar>(model: &MerlModel<F>, corpus: &Corpus, cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    let train_all = corpus.manifest.indices_in(Split::Train);
    let train = subsample_split(&corpus.manifest, &train_all, cfg.training_ratio, cfg.seed)?;
    let test = corpus.manifest.indices_in(Split::Test);
    let y_train = corpus.manifest.label_matrix(&train);
    let y_test = corpus.manifest.label_matrix(&test);
    linear_probe(
        model,
        (&corpus.records(&train), &y_train),
        (&corpus.records(&test), &y_test),
        cfg,
    )
}

/// Sets input shape from the data so on-disk corpora need no shape keys.
pub fn encoder_for(cfg: &ExperimentConfig, corpus: &Corpus) -> EncoderConfig {
    let mut enc = cfg.encoder.clone();
    if let Some(p) = corpus.pairs.first() {
        enc.num_leads = p.ecg.num_leads();
        enc.num_samples = p.ecg.num_samples();
        enc.vit.stem_channels = enc.num_leads;
    }
    enc
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<ResultRecord>,
    pub checkpoint: PathBuf,
    pub table_text: String,
    pub table_csv: String,
}

impl ExperimentOutcome {
    pub fn results(&self) -> Vec<&EvalResult> {
        self.records
            .iter()
            .filter_map(|r| match r {
                ResultRecord::Result(r) => Some(r),
                _ => None,
            })
            .collect()
    }
}

/// Pretrain (or load) a model, then run every declared evaluation.
/// Evaluation failures are recorded and do not stop later evaluations.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg),
        Precision::F64 => run_typed::<f64>(cfg),
    }
}

pub fn load_model<F: Scalar>(checkpoint: &Path) -> Result<MerlModel<F>> {
    Ok(load_checkpoint(checkpoint, &AdapterRegistry::new())?.0)
}

/// Fresh model pretrained on the corpus train split; the log and the
/// checkpoint land in `out_dir`.
pub fn pretrain_model<F: Scalar>(cfg: &ExperimentConfig, corpus: &Corpus, out_dir: &Path) -> Result<(MerlModel<F>, PretrainReport, PathBuf)> {
    let mut model = MerlModel::new(encoder_for(cfg, corpus), &AdapterRegistry::new())?;
    let ckpt = out_dir.join("checkpoint.merl");
    let outputs = PretrainOutputs {
        log: Some(out_dir.join("train_log.jsonl")),
        checkpoint: Some(ckpt.clone()),
    };
    let report = pretrain(&corpus.pairs_in(Split::Train), &mut model, &cfg.pretrain, &outputs)?;
    Ok((model, report, ckpt))
}

/// Class list for prompt construction.
pub fn ckepe_classes(cfg: &ExperimentConfig) -> Result<Vec<(String, String)>> {
    if !cfg.ckepe.classes.is_empty() {
        return Ok(cfg.ckepe.classes.clone());
    }
    let vocab = match &cfg.manifest {
        Some(p) => ManifestLoader::default().lazy(true).load(p)?.label_vocabulary,
        None => SyntheticClass::all(cfg.synthetic.num_classes).into_iter().map(|c| c.name).collect(),
    };
    Ok(vocab.into_iter().map(|v| (v.clone(), v)).collect())
}

/// Builds a prompt set from the configured knowledge bases and LLM client.
pub fn build_ckepe_prompts(cfg: &ExperimentConfig) -> Result<(ClassPromptSet, Vec<VerifiedPrompt>)> {
    let s = &cfg.ckepe;
    let mut kbs = Vec::new();
    if let Some(p) = &s.web_kb {
        kbs.push(load_kb(p, KbKind::WebSnomed)?);
    }
    if let Some(p) = &s.local_kb {
        kbs.push(load_kb(p, KbKind::LocalScp)?);
    }
    let client: Box<dyn LlmClient> = match &s.llm {
        LlmSource::Fixture(Some(p)) => Box::new(FixtureClient::from_file(p)?),
        LlmSource::Fixture(None) if s.style != PromptStyle::Ckepe => Box::new(FixtureClient::new(Vec::new())),
        LlmSource::Fixture(None) => {
            return Err(MerlError::Config("ckepe style needs ckepe.llm_fixture or ckepe.llm = live".into()))
        }
        LlmSource::Live {
            endpoint,
            model,
            api_key_env,
        } => {
            if endpoint.is_empty() || model.is_empty() {
                return Err(MerlError::Config("live LLM client needs ckepe.endpoint and ckepe.model".into()));
            }
            Box::new(LiveClient::new(endpoint.clone(), model.clone(), api_key_env.clone()))
        }
    };
    let kb_refs: Vec<&KnowledgeBase> = kbs.iter().collect();
    build_prompt_set(&ckepe_classes(cfg)?, client.as_ref(), &kb_refs, s.style)
}

fn eval_result(cfg: &ExperimentConfig, task_id: &str, mode: EvalMode, ratio: f64, auc: AucReport, classes: &[String]) -> EvalResult {
    EvalResult {
        experiment: cfg.name.clone(),
        task_id: task_id.to_string(),
        mode,
        training_ratio: ratio,
        macro_auc: auc.macro_auc,
        per_class_auc: auc.per_class,
        class_names: classes.to_vec(),
        config_fingerprint: cfg.fingerprint(&format!("task={task_id};mode={};ratio={ratio}", mode.as_str())),
    }
}

fn record(cfg: &ExperimentConfig, task_id: &str, mode: EvalMode, res: Result<EvalResult>) -> ResultRecord {
    match res {
        Ok(r) => {
            info!("{task_id} {} ratio {}: macro AUC {:.4}", mode.as_str(), r.training_ratio, r.macro_auc);
            ResultRecord::Result(r)
        }
        Err(e) => {
            warn!("{task_id} {} failed: {e}", mode.as_str());
            ResultRecord::Failure {
                experiment: cfg.name.clone(),
                task_id: task_id.to_string(),
                mode,
                error_code: e.code().to_string(),
                message: e.to_string(),
            }
        }
    }
}

fn transfer_corpus(cfg: &ExperimentConfig) -> Result<(String, Corpus)> {
    let name = cfg
        .transfer_map
        .clone()
        .ok_or_else(|| MerlError::Config("transfer task needs transfer.map".into()))?;
    let map = if Path::new(&name).exists() {
        TransferMap::load(Path::new(&name))?
    } else {
        TransferMap::builtin(&name)?
    };
    let target = cfg
        .transfer_target
        .as_ref()
        .ok_or_else(|| MerlError::Config("transfer task needs transfer.target_manifest".into()))?;
    let raw = load_manifest_corpus(target, cfg)?;
    let remapped = apply_transfer_map(&raw.manifest, &map)?.manifest;
    let by_id: BTreeMap<&str, &EcgReportPair> = raw.pairs.iter().map(|p| (p.ecg.record_id.as_str(), p)).collect();
    let pairs = remapped.entries.iter().map(|e| by_id[e.record_id.as_str()].clone()).collect();
    let task_id = format!("{}->{}", map.source_task, map.target_task);
    Ok((
        task_id.clone(),
        Corpus {
            task_id,
            manifest: remapped,
            pairs,
            rejected: raw.rejected,
        },
    ))
}

fn run_typed<F: Scalar>(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let out_dir = cfg.output_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| MerlError::io(&out_dir, e))?;
    fs::write(out_dir.join("config.resolved.ini"), cfg.raw.to_ini()).map_err(|e| MerlError::io(&out_dir, e))?;
    // the source corpus is only needed for pretraining or in-domain tasks
    let needs_corpus = cfg.checkpoint.is_none() || cfg.tasks.iter().any(|t| *t != TaskKind::Transfer);
    let corpus = if needs_corpus {
        let c = load_corpus(cfg)?;
        info!("{}: {} pairs kept, {} rejected", c.task_id, c.pairs.len(), c.rejected);
        Some(c)
    } else {
        None
    };
    let (model, checkpoint) = match (&cfg.checkpoint, &corpus) {
        (Some(p), _) => (load_model::<F>(p)?, p.clone()),
        (None, Some(c)) => {
            let (m, _, p) = pretrain_model::<F>(cfg, c, &out_dir)?;
            (m, p)
        }
        (None, None) => unreachable!("a corpus is loaded whenever no checkpoint is given"),
    };
    let store = out_dir.join("results.jsonl");
    let mut records = Vec::new();
    let mut push = |r: ResultRecord| -> Result<()> {
        append_result(&store, &r)?;
        records.push(r);
        Ok(())
    };
    let probe_at = |ratio: f64| ProbeConfig {
        training_ratio: ratio,
        ..cfg.probe.clone()
    };

    for task in &cfg.tasks {
        match (task, &corpus) {
            (TaskKind::Zeroshot, Some(corpus)) => {
                let vocab = &corpus.manifest.label_vocabulary;
                let res = class_prompts(cfg.prompts.as_deref(), vocab, cfg.prompt_style)
                    .and_then(|p| evaluate_zeroshot(&model, corpus, &p, Split::Test))
                    .map(|(auc, _)| eval_result(cfg, &corpus.task_id, EvalMode::Zeroshot, 0.0, auc, vocab));
                push(record(cfg, &corpus.task_id, EvalMode::Zeroshot, res))?;
            }
            (TaskKind::Probe, Some(corpus)) => {
                let vocab = &corpus.manifest.label_vocabulary;
                for &ratio in &cfg.probe_ratios {
                    let res = evaluate_probe(&model, corpus, &probe_at(ratio))
                        .map(|o| eval_result(cfg, &corpus.task_id, EvalMode::LinearProbe, ratio, o.auc, vocab));
                    push(record(cfg, &corpus.task_id, EvalMode::LinearProbe, res))?;
                }
            }
            (TaskKind::Transfer, _) => match transfer_corpus(cfg) {
                Err(e) => push(record(cfg, "transfer", EvalMode::Transfer, Err(e)))?,
                Ok((task_id, target)) => {
                    let tv = &target.manifest.label_vocabulary;
                    let res = class_prompts(cfg.transfer_prompts.as_deref(), tv, PromptStyle::NameOnly)
                        .and_then(|p| evaluate_zeroshot(&model, &target, &p, Split::Test))
                        .map(|(auc, _)| eval_result(cfg, &task_id, EvalMode::Transfer, 0.0, auc, tv));
                    push(record(cfg, &task_id, EvalMode::Transfer, res))?;
                    for &ratio in &cfg.probe_ratios {
                        let res = evaluate_probe(&model, &target, &probe_at(ratio))
                            .map(|o| eval_result(cfg, &task_id, EvalMode::Transfer, ratio, o.auc, tv));
                        push(record(cfg, &task_id, EvalMode::Transfer, res))?;
                    }
                }
            },
            (_, None) => unreachable!("in-domain tasks always load the corpus"),
        }
    }
    let (table_csv, table_text) = render_table(&records);
    fs::write(out_dir.join("results_table.csv"), &table_csv).map_err(|e| MerlError::io(&out_dir, e))?;
    fs::write(out_dir.join("results_table.txt"), &table_text).map_err(|e| MerlError::io(&out_dir, e))?;
    Ok(ExperimentOutcome {
        records,
        checkpoint,
        table_text,
        table_csv,
    })
}
