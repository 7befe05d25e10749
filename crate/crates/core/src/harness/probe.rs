use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::EcgRecord;
use crate::encoders::MerlModel;
use crate::error::{MerlError, Result};
use crate::nn::{cosine_lr, AdamW, AdamWConfig, Layer, Linear, Mode};
use crate::scalar::Scalar;
use crate::util::rng_stream;
use crate::zeroshot::{macro_auc, AucReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub training_ratio: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            training_ratio: 1.0,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 100,
            warmup_steps: 5,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.training_ratio > 0.0 && self.training_ratio <= 1.0) {
            return Err(MerlError::Config(format!("training ratio {} outside (0, 1]", self.training_ratio)));
        }
        if self.batch_size == 0 || self.epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(MerlError::Config("probe needs positive batch size, epochs and lr".into()));
        }
        Ok(())
    }
}

/// Mean per-class binary cross-entropy on logits and its gradient.
pub fn bce_with_logits<F: Scalar>(logits: &Array2<F>, labels: &Array2<u8>) -> (F, Array2<F>) {
    let n = F::of_usize(logits.len().max(1));
    let mut loss = F::zero();
    let mut grad = Array2::zeros(logits.dim());
    ndarray::Zip::from(&mut grad).and(logits).and(labels).for_each(|g, &x, &y| {
        let y = F::of_usize(y as usize);
        // softplus(x) - y x, written to avoid overflow
        let softplus = x.max(F::zero()) + (-x.abs()).exp().ln_1p();
        loss += softplus - y * x;
        let sig = F::one() / (F::one() + (-x).exp());
        *g = (sig - y) / n;
    });
    (loss / n, grad)
}

/// Fits a fresh affine map from features to per-class logits.
pub fn train_linear_probe<F: Scalar>(x: &Array2<F>, y: &Array2<u8>, cfg: &ProbeConfig) -> Result<Linear<F>> {
    cfg.validate()?;
    if x.nrows() != y.nrows() || x.nrows() == 0 {
        return Err(MerlError::Dimension(format!("{} feature rows vs {} label rows", x.nrows(), y.nrows())));
    }
    let mut rng = rng_stream(cfg.seed, 0x9E0);
    let mut head = Linear::new(x.ncols(), y.ncols(), true, &mut rng);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let steps_per_epoch = x.nrows().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            crate::nn::zero_grads::<F>(&mut head);
            let logits: Array2<F> = head.forward_train(&xb.into_dyn()).into_dimensionality().expect("2-d logits");
            let (_, g) = bce_with_logits(&logits, &yb);
            head.backward(&g.into_dyn());
            opt.begin_step();
            opt.update("probe", &mut head, cosine_lr(cfg.learning_rate, step, total, cfg.warmup_steps));
            step += 1;
        }
    }
    Ok(head)
}

pub fn probe_logits<F: Scalar>(head: &Linear<F>, x: &Array2<F>) -> Array2<F> {
    head.forward(&x.clone().into_dyn(), Mode::Eval).into_dimensionality().expect("2-d logits")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub auc: AucReport,
    pub train_size: usize,
    pub encoder_hash: String,
}

/// Frozen-encoder evaluation: encodes train and test records to `z_e`,
/// fits a linear head on the training rows, scores the test rows.
/// Fails with a protocol violation if the encoder changed meanwhile.
pub fn linear_probe<F: Scalar>(
    model: &MerlModel<F>,
    train: (&[&EcgRecord], &Array2<u8>),
    test: (&[&EcgRecord], &Array2<u8>),
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    let before = model.ecg_encoder_hash();
    let x_train = model.encode_ecg(train.0)?;
    let x_test = model.encode_ecg(test.0)?;
    let head = train_linear_probe(&x_train, train.1, cfg)?;
    let scores = probe_logits(&head, &x_test).mapv(|v| v.as_f64());
    let after = model.ecg_encoder_hash();
    if before != after {
        return Err(MerlError::ProtocolViolation(format!(
            "encoder parameters changed during probing ({before} -> {after})"
        )));
    }
    Ok(ProbeOutcome {
        auc: macro_auc(&scores, test.1)?,
        train_size: train.0.len(),
        encoder_hash: after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn bce_matches_direct_formula() {
        let x = array![[0.3f64, -2.0], [40.0, -40.0]];
        let y = array![[1u8, 0], [0, 1]];
        let (l, g) = bce_with_logits(&x, &y);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let direct = [-(sig(0.3)).ln(), -(1.0 - sig(-2.0)).ln(), 40.0, 40.0];
        assert_abs_diff_eq!(l, direct.iter().sum::<f64>() / 4.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g[[0, 0]], (sig(0.3) - 1.0) / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn separable_data_is_learned() {
        let mut rng = rng_stream(5, 0);
        let n = 200;
        let y = Array2::from_shape_fn((n, 2), |(i, c)| u8::from((i + c) % 2 == 0));
        let x = Array2::from_shape_fn((n, 3), |(i, j)| {
            let signal = if j == 0 { if i % 2 == 0 { 1.0 } else { -1.0 } } else { 0.0 };
            signal + rng.gen_range(-0.3..0.3)
        });
        let cfg = ProbeConfig {
            epochs: 20,
            learning_rate: 1e-2,
            ..ProbeConfig::default()
        };
        let head = train_linear_probe(&x, &y, &cfg).unwrap();
        let s = probe_logits(&head, &x);
        let r = macro_auc(&s, &y).unwrap();
        assert!(r.macro_auc > 0.99, "{r:?} {:?}", s.slice(ndarray::s![0..4, ..]));
        let again = train_linear_probe(&x, &y, &cfg).unwrap();
        assert_eq!(probe_logits(&again, &x), s);
    }
}
