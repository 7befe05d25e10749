//! `merl` command-line front end. Every subcommand reads the same INI
//! configuration; on failure a JSON object `{"error", "message"}` goes to
//! stderr and the exit status is nonzero.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use merl::corpus::{generate_synthetic_corpus, split_by_ratio, write_corpus, Split};
use merl::encoders::MerlModel;
use merl::harness::{
    build_ckepe_prompts, class_prompts, evaluate_zeroshot, export_embeddings, load_corpus, load_model, pretrain_model,
    read_results, render_table, resolve_config, run_experiment, EmbeddingKind, ExperimentConfig, ExportFilter,
    Precision, ResultRecord, TaskKind,
};
use merl::zeroshot::{write_prompt_file, write_scores_csv};
use merl::{MerlError, Result, Scalar};

#[derive(Parser)]
#[command(name = "merl", version, about = "ECG-report representation learning toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// INI configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, `section.key=value`; repeatable
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Overrides experiment.seed
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus on disk
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a model and write its checkpoint
    Pretrain,
    /// Linear-probe a checkpoint at every configured ratio
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Zero-shot classification of the test split
    Zeroshot {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prompt file; defaults to zeroshot.prompts
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Also write the per-record score matrix here
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Build knowledge-verified class prompts
    Ckepe {
        /// Prompt file to write; defaults to ckepe.output or <output_dir>/prompts.json
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a remapped target domain
    Transfer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render the results store as a table
    Report {
        /// Results store; defaults to <output_dir>/results.jsonl
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Export ECG embeddings of the corpus to CSV
    Export {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// z_e or projected
        #[arg(long, default_value = "projected")]
        which: String,
        /// Drop multi-label records and classes with fewer than 50 records
        #[arg(long)]
        filter: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain (unless a checkpoint is configured) and run every declared task
    Run,
}

fn load_config(common: &Common, checkpoint: Option<&Path>) -> Result<ExperimentConfig> {
    let mut raw = resolve_config(common.config.as_deref(), &common.set, common.seed)?;
    if let Some(c) = checkpoint {
        raw.set("experiment.checkpoint", &c.display().to_string())?;
    }
    ExperimentConfig::from_raw(raw)
}

fn require_checkpoint(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.checkpoint
        .clone()
        .ok_or_else(|| MerlError::Config("a checkpoint is required (--checkpoint or experiment.checkpoint)".into()))
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn evaluate_only(mut cfg: ExperimentConfig, task: TaskKind) -> Result<()> {
    require_checkpoint(&cfg)?;
    cfg.tasks = vec![task];
    let outcome = run_experiment(&cfg)?;
    print!("{}", outcome.table_text);
    let failures = outcome
        .records
        .iter()
        .filter(|r| matches!(r, ResultRecord::Failure { .. }))
        .count();
    if failures > 0 {
        return Err(MerlError::Config(format!("{failures} evaluation(s) failed; see results.jsonl")));
    }
    Ok(())
}

fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (manifest, pairs) = generate_synthetic_corpus(&cfg.synthetic)?;
    let (manifest, report) = split_by_ratio(&manifest, cfg.split, cfg.seed)?;
    write_corpus(out, &manifest, &pairs)?;
    emit(json!({
        "manifest": out.join("manifest.csv"),
        "pairs": pairs.len(),
        "splits": report.counts,
        "classes": manifest.label_vocabulary,
    }));
    Ok(())
}

fn pretrain_typed<F: Scalar>(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| MerlError::io(&cfg.output_dir, e))?;
    fs::write(cfg.output_dir.join("config.resolved.ini"), cfg.raw.to_ini())
        .map_err(|e| MerlError::io(&cfg.output_dir, e))?;
    let corpus = load_corpus(cfg)?;
    let (_, report, ckpt) = pretrain_model::<F>(cfg, &corpus, &cfg.output_dir)?;
    emit(json!({
        "checkpoint": ckpt,
        "steps": report.steps,
        "effective_lr": report.effective_lr,
        "final": report.epochs.last(),
    }));
    Ok(())
}

fn zeroshot_scores<F: Scalar>(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let model: MerlModel<F> = load_model(&require_checkpoint(cfg)?)?;
    let corpus = load_corpus(cfg)?;
    let prompts = class_prompts(cfg.prompts.as_deref(), &corpus.manifest.label_vocabulary, cfg.prompt_style)?;
    let (_, scores) = evaluate_zeroshot(&model, &corpus, &prompts, Split::Test)?;
    write_scores_csv(path, &scores)
}

fn export_typed<F: Scalar>(cfg: &ExperimentConfig, which: EmbeddingKind, filter: bool, out: &Path) -> Result<()> {
    let model: MerlModel<F> = load_model(&require_checkpoint(cfg)?)?;
    let corpus = load_corpus(cfg)?;
    let rows: Vec<usize> = (0..corpus.pairs.len()).collect();
    let records = corpus.records(&rows);
    let filter = if filter { ExportFilter::visualisation() } else { ExportFilter::default() };
    let n = export_embeddings(&model, &corpus.manifest, &records, &rows, which, filter, out)?;
    emit(json!({ "embeddings": out, "rows": n }));
    Ok(())
}

fn ckepe(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    let out = out
        .or_else(|| cfg.ckepe.output.clone())
        .unwrap_or_else(|| cfg.output_dir.join("prompts.json"));
    let (prompts, verified) = build_ckepe_prompts(cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MerlError::io(dir, e))?;
    }
    write_prompt_file(&out, &prompts)?;
    let summary: Vec<_> = verified
        .iter()
        .map(|v| {
            json!({
                "condition": v.condition,
                "kept": v.kept_subtypes.len() + v.kept_attributes.len(),
                "discarded": v.discarded.iter().map(|d| &d.term).collect::<Vec<_>>(),
            })
        })
        .collect();
    emit(json!({ "prompts": out, "classes": summary }));
    Ok(())
}

fn report(cfg: &ExperimentConfig, results: Option<PathBuf>, csv: Option<PathBuf>) -> Result<()> {
    let path = results.unwrap_or_else(|| cfg.output_dir.join("results.jsonl"));
    let records = read_results(&path)?;
    let (table_csv, table_text) = render_table(&records);
    if let Some(p) = csv {
        fs::write(&p, table_csv).map_err(|e| MerlError::io(&p, e))?;
    }
    print!("{table_text}");
    Ok(())
}

macro_rules! by_precision {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn dispatch(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Synth { out } => synth(&load_config(common, None)?, &out),
        Command::Pretrain => {
            let cfg = load_config(common, None)?;
            by_precision!(cfg, pretrain_typed(&cfg))
        }
        Command::Probe { checkpoint } => evaluate_only(load_config(common, checkpoint.as_deref())?, TaskKind::Probe),
        Command::Zeroshot {
            checkpoint,
            prompts,
            scores,
        } => {
            let mut cfg = load_config(common, checkpoint.as_deref())?;
            if prompts.is_some() {
                cfg.prompts = prompts;
            }
            if let Some(path) = &scores {
                by_precision!(cfg, zeroshot_scores(&cfg, path))?;
                info!("scores written to {}", path.display());
            }
            evaluate_only(cfg, TaskKind::Zeroshot)
        }
        Command::Ckepe { out } => ckepe(&load_config(common, None)?, out),
        Command::Transfer { checkpoint } => {
            evaluate_only(load_config(common, checkpoint.as_deref())?, TaskKind::Transfer)
        }
        Command::Report { results, csv } => report(&load_config(common, None)?, results, csv),
        Command::Export {
            checkpoint,
            which,
            filter,
            out,
        } => {
            let cfg = load_config(common, checkpoint.as_deref())?;
            let which = EmbeddingKind::parse(&which)?;
            by_precision!(cfg, export_typed(&cfg, which, filter, &out))
        }
        Command::Run => {
            let outcome = run_experiment(&load_config(common, None)?)?;
            print!("{}", outcome.table_text);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.code(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
