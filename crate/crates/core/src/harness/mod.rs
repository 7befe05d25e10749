//! Evaluation harness: linear probing, data-ratio subsampling, domain
//! transfer, embedding export, configuration and experiment orchestration.

mod config;
mod experiment;
mod export;
mod probe;
mod results;
mod subsample;
mod transfer;

pub use config::{resolve_config, CkepeSettings, ExperimentConfig, LlmSource, Precision, RawConfig, TaskKind};
pub use experiment::{
    build_ckepe_prompts, ckepe_classes, class_prompts, default_prompts, encoder_for, evaluate_probe, evaluate_zeroshot,
    load_corpus, load_model, pretrain_model, run_experiment, Corpus, ExperimentOutcome,
};
pub use export::{export_embeddings, EmbeddingKind, ExportFilter};
pub use probe::{bce_with_logits, linear_probe, probe_logits, train_linear_probe, ProbeConfig, ProbeOutcome};
pub use results::{append_result, read_results, render_table, EvalMode, EvalResult, ResultRecord};
pub use subsample::subsample_split;
pub use transfer::{apply_transfer_map, CategoryMapping, TransferMap, TransferOutcome};
