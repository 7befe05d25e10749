use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{concatenate, s, Array2, ArrayD, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dropout::{latent_dropout_views_with, uma_loss_with_grad};
use super::loss::{cma_loss_with_grad, diagonal_margin, similarity_matrix, view_contrast_with_grad, DenominatorVariant, LossBreakdown};
use crate::augmentation::AugmentationSpec;
use crate::corpus::EcgReportPair;
use crate::encoders::{normalize_rows, normalize_rows_backward, save_checkpoint, MerlModel, Modality};
use crate::error::{MerlError, Result};
use crate::nn::{AdamW, AdamWConfig, Layer, Mode};
use crate::scalar::Scalar;
use crate::util::rng_stream;

/// Source of the two uni-modal views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum UmaMode {
    /// Two Bernoulli masks over the ECG embedding (the method).
    LatentDropout { ratio: f64 },
    /// Cross-modal loss only.
    None,
    /// Two augmented copies of the raw signal, each encoded (ablation).
    InputAugmentation { augmentation: AugmentationSpec },
}

impl Default for UmaMode {
    fn default() -> Self {
        UmaMode::LatentDropout { ratio: super::DEFAULT_DROPOUT_RATIO }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub temperature: f64,
    pub denominator_variant: DenominatorVariant,
    pub uma: UmaMode,
    pub dropout_rescale: bool,
    /// Scale the learning rate by `batch_size / reference_batch` for smaller batches.
    pub scale_lr_with_batch: bool,
    pub reference_batch: usize,
    pub warmup_steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 50,
            learning_rate: 2e-4,
            weight_decay: 1e-5,
            batch_size: 512,
            seed: 0,
            temperature: super::DEFAULT_TEMPERATURE,
            denominator_variant: DenominatorVariant::Standard,
            uma: UmaMode::default(),
            dropout_rescale: false,
            scale_lr_with_batch: true,
            reference_batch: 512,
            warmup_steps: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 || !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return Err(MerlError::Config(
                "pretrain needs epochs > 0, batch_size >= 2, positive lr and temperature".into(),
            ));
        }
        match self.uma {
            UmaMode::LatentDropout { ratio } if !(0.0..1.0).contains(&ratio) => {
                Err(MerlError::Config(format!("dropout ratio {ratio} outside [0, 1)")))
            }
            UmaMode::InputAugmentation { augmentation } => augmentation.validate(),
            _ => Ok(()),
        }
    }

    pub fn effective_lr(&self) -> f64 {
        if self.scale_lr_with_batch && self.batch_size < self.reference_batch {
            self.learning_rate * self.batch_size as f64 / self.reference_batch as f64
        } else {
            self.learning_rate
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub record: String,
    pub epoch: usize,
    pub step: usize,
    pub cma: f64,
    pub uma: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOutputs {
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub epochs: Vec<LogRecord>,
    pub steps: usize,
    pub effective_lr: f64,
}

fn run<F: Scalar>(layer: &mut dyn Layer<F>, x: &ArrayD<F>, record: bool) -> ArrayD<F> {
    if record {
        layer.forward_train(x)
    } else {
        layer.forward(x, Mode::Train)
    }
}

fn two_d<F: Scalar>(x: ArrayD<F>) -> Array2<F> {
    x.into_dimensionality().expect("2-d activations")
}

/// Computes the training objective on one batch. With `accumulate` set,
/// caches activations, back-propagates, and adds into the parameter grads;
/// otherwise the forward is side-effect free (batch statistics are still
/// used for normalisation, as during training).
pub fn batch_objective<F: Scalar>(
    model: &mut MerlModel<F>,
    signals: &[&Array2<f32>],
    text_embeddings: &Array2<F>,
    cfg: &PretrainConfig,
    view_seed: u64,
    accumulate: bool,
) -> Result<LossBreakdown> {
    let b = signals.len();
    if b < 2 {
        return Err(MerlError::BatchTooSmall(b));
    }
    let tau = F::of(cfg.temperature);
    let variant = cfg.denominator_variant;
    let x = match cfg.uma {
        UmaMode::InputAugmentation { augmentation } => {
            let a1: Vec<Array2<f32>> = signals.iter().enumerate().map(|(i, s)| augmentation.apply(s, view_seed ^ (2 * i as u64))).collect();
            let a2: Vec<Array2<f32>> = signals.iter().enumerate().map(|(i, s)| augmentation.apply(s, view_seed ^ (2 * i as u64 + 1))).collect();
            let all: Vec<&Array2<f32>> = signals.iter().copied().chain(a1.iter()).chain(a2.iter()).collect();
            model.ecg.batch_signals(&all)?
        }
        _ => model.ecg.batch_signals(signals)?,
    };
    let z_all = two_d(run(&mut model.ecg, &x, accumulate));
    let z_e = z_all.slice(s![..b, ..]).to_owned();

    let p_e = two_d(run(&mut model.ecg_projector, &z_e.clone().into_dyn(), accumulate));
    let p_r = two_d(run(&mut model.text_projector, &text_embeddings.clone().into_dyn(), accumulate));
    let (e, norm_e) = normalize_rows(&p_e);
    let (r, norm_r) = normalize_rows(&p_r);
    let sim = similarity_matrix(&e, &r, tau)?;
    let (cma, ds) = cma_loss_with_grad(&sim, variant)?;

    let (uma, dz_uma) = match cfg.uma {
        UmaMode::None => (F::zero(), None),
        UmaMode::LatentDropout { ratio } => {
            let views = latent_dropout_views_with(&z_e, ratio, view_seed, cfg.dropout_rescale)?;
            let (l, dz) = uma_loss_with_grad(&views, tau, variant)?;
            (l, Some(dz))
        }
        UmaMode::InputAugmentation { .. } => {
            let v1 = z_all.slice(s![b..2 * b, ..]).to_owned();
            let v2 = z_all.slice(s![2 * b.., ..]).to_owned();
            let (l, d1, d2) = view_contrast_with_grad(&v1, &v2, tau, variant)?;
            (l, Some(concatenate![Axis(0), d1, d2]))
        }
    };
    let breakdown = LossBreakdown {
        cma: cma.as_f64(),
        uma: uma.as_f64(),
        total: cma.as_f64() + uma.as_f64(),
        batch_size: b,
    };
    if !breakdown.total.is_finite() || !accumulate {
        return Ok(breakdown);
    }

    let de = ds.dot(&r);
    let dr = ds.t().dot(&e);
    let dp_e = normalize_rows_backward(&de, &e, &norm_e);
    let dp_r = normalize_rows_backward(&dr, &r, &norm_r);
    model.text_projector.backward(&dp_r.into_dyn());
    let mut dz = two_d(model.ecg_projector.backward(&dp_e.into_dyn()));
    let dz_all = match (cfg.uma, dz_uma) {
        (UmaMode::InputAugmentation { .. }, Some(dv)) => concatenate![Axis(0), dz, dv],
        (_, Some(du)) => {
            dz += &du;
            dz
        }
        (_, None) => dz,
    };
    model.ecg.backward(&dz_all.into_dyn());
    Ok(breakdown)
}

fn grads_finite<F: Scalar>(model: &mut MerlModel<F>) -> bool {
    let mut ok = true;
    model.visit_all_params(&mut |_, p| ok &= p.grad.iter().all(|g| g.is_finite()));
    ok
}

struct LogSink(Option<BufWriter<fs::File>>);

impl LogSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(LogSink(None)) };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| MerlError::io(dir, e))?;
        }
        let f = fs::File::create(path).map_err(|e| MerlError::io(path, e))?;
        Ok(LogSink(Some(BufWriter::new(f))))
    }

    fn write(&mut self, rec: &LogRecord) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| MerlError::io("training log", e))?;
        }
        Ok(())
    }
}

/// Trains the ECG encoder and both projectors on curated pairs.
///
/// Text embeddings are computed once up front since the text encoder has no
/// trainable parameters here. A checkpoint (when requested) is written after
/// every completed epoch, so on divergence the file holds the last good state.
pub fn pretrain<F: Scalar>(
    pairs: &[EcgReportPair],
    model: &mut MerlModel<F>,
    cfg: &PretrainConfig,
    outputs: &PretrainOutputs,
) -> Result<PretrainReport> {
    cfg.validate()?;
    if cfg.batch_size > pairs.len() {
        return Err(MerlError::Config(format!(
            "batch_size {} exceeds corpus size {}",
            cfg.batch_size,
            pairs.len()
        )));
    }
    let texts: Vec<&str> = pairs.iter().map(|p| p.report.text.as_str()).collect();
    let z_r = model.encode_text(&texts)?;
    let mut log = LogSink::open(outputs.log.as_deref())?;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let base_lr = cfg.effective_lr();
    let batches_per_epoch = pairs.len() / cfg.batch_size + usize::from(pairs.len() % cfg.batch_size >= 2);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_stream(cfg.seed, 1_000 + epoch as u64));
        let (mut sum_cma, mut sum_uma, mut n) = (0.0, 0.0, 0usize);
        let mut lr = base_lr;
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            lr = cosine_lr_at(base_lr, step, total_steps, cfg.warmup_steps);
            let signals: Vec<&Array2<f32>> = chunk.iter().map(|&i| &pairs[i].ecg.signal).collect();
            let zr = z_r.select(Axis(0), chunk);
            let view_seed = cfg.seed ^ ((step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            for (_, c) in model.components_mut() {
                crate::nn::zero_grads(c);
            }
            let loss = batch_objective(model, &signals, &zr, cfg, view_seed, true)?;
            let rec = LogRecord {
                record: "step".into(),
                epoch,
                step,
                cma: loss.cma,
                uma: loss.uma,
                total: loss.total,
                lr,
            };
            log.write(&rec)?;
            if !loss.total.is_finite() || !grads_finite(model) {
                return Err(MerlError::Divergence { epoch, step });
            }
            opt.begin_step();
            for (name, c) in model.components_mut() {
                opt.update(name, c, lr);
            }
            sum_cma += loss.cma;
            sum_uma += loss.uma;
            n += 1;
            step += 1;
        }
        let n = n.max(1) as f64;
        let rec = LogRecord {
            record: "epoch".into(),
            epoch,
            step,
            cma: sum_cma / n,
            uma: sum_uma / n,
            total: sum_cma / n + sum_uma / n,
            lr,
        };
        info!("epoch {epoch}: cma {:.4} uma {:.4} total {:.4}", rec.cma, rec.uma, rec.total);
        log.write(&rec)?;
        epochs.push(rec);
        if let Some(path) = &outputs.checkpoint {
            save_checkpoint(
                path,
                model,
                serde_json::json!({ "epoch": epoch, "step": step, "pretrain": cfg }),
            )?;
        }
    }
    Ok(PretrainReport {
        epochs,
        steps: step,
        effective_lr: base_lr,
    })
}

fn cosine_lr_at(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    crate::nn::cosine_lr(base, step, total, warmup)
}

/// Mean diagonal and off-diagonal similarity of projected pairs (eval mode).
pub fn alignment_margin<F: Scalar>(model: &MerlModel<F>, pairs: &[EcgReportPair]) -> Result<(f64, f64)> {
    let recs: Vec<_> = pairs.iter().map(|p| &p.ecg).collect();
    let texts: Vec<&str> = pairs.iter().map(|p| p.report.text.as_str()).collect();
    let e = model.project(&model.encode_ecg(&recs)?, Modality::Ecg)?;
    let r = model.project(&model.encode_text(&texts)?, Modality::Text)?;
    Ok(diagonal_margin(&similarity_matrix(&e, &r, F::one())?))
}
