//! ECG and report encoders and the projection into the shared space.

mod checkpoint;
mod resnet;
mod text;
mod vit;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use resnet::{build_resnet, BlockKind};
pub use text::{AdapterRegistry, StubHashEncoder, TextAdapter, TextEncoder, TextEncoderKind};
pub use vit::{build_vit, num_tokens, VitConfig};

use std::fmt;

use log::warn;
use ndarray::{Array1, Array2, Array3, ArrayD, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ClinicalReport, EcgRecord};
use crate::error::{MerlError, Result};
use crate::nn::{join, num_params, Layer, Linear, Mode, ParamReader, ParamVisitor, Relu, Sequential};
use crate::scalar::Scalar;
use crate::util::rng_stream;

const NORM_EPS: f64 = 1e-12;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EcgBackbone {
    #[serde(rename = "resnet1d_18")]
    Resnet1d18,
    #[serde(rename = "resnet1d_50")]
    Resnet1d50,
    #[serde(rename = "resnet1d_101")]
    Resnet1d101,
    #[serde(rename = "vit1d_tiny")]
    Vit1dTiny,
}

impl EcgBackbone {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "resnet1d_18" => Ok(EcgBackbone::Resnet1d18),
            "resnet1d_50" => Ok(EcgBackbone::Resnet1d50),
            "resnet1d_101" => Ok(EcgBackbone::Resnet1d101),
            "vit1d_tiny" => Ok(EcgBackbone::Vit1dTiny),
            other => Err(MerlError::Config(format!("unknown ECG backbone {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EcgBackbone::Resnet1d18 => "resnet1d_18",
            EcgBackbone::Resnet1d50 => "resnet1d_50",
            EcgBackbone::Resnet1d101 => "resnet1d_101",
            EcgBackbone::Vit1dTiny => "vit1d_tiny",
        }
    }
}

impl fmt::Display for EcgBackbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub ecg_backbone: EcgBackbone,
    pub num_leads: usize,
    pub num_samples: usize,
    /// Channel width of the first ResNet stage.
    pub resnet_width: usize,
    pub vit: VitConfig,
    /// `D_e`. A linear head is appended when the backbone's natural width differs.
    pub ecg_embed_dim: usize,
    pub text_encoder: TextEncoderKind,
    /// `D_r`; must match the adapter's output for external encoders.
    pub text_embed_dim: usize,
    pub text_trainable: bool,
    pub shared_dim: usize,
    pub projector_hidden: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            ecg_backbone: EcgBackbone::Resnet1d18,
            num_leads: 12,
            num_samples: 5000,
            resnet_width: 64,
            vit: VitConfig::default(),
            ecg_embed_dim: 512,
            text_encoder: TextEncoderKind::StubHash,
            text_embed_dim: 768,
            text_trainable: true,
            shared_dim: 256,
            projector_hidden: 512,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_leads", self.num_leads),
            ("num_samples", self.num_samples),
            ("resnet_width", self.resnet_width),
            ("ecg_embed_dim", self.ecg_embed_dim),
            ("text_embed_dim", self.text_embed_dim),
            ("shared_dim", self.shared_dim),
            ("projector_hidden", self.projector_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(MerlError::Config(format!("encoder.{name} must be positive")));
        }
        if self.ecg_backbone == EcgBackbone::Vit1dTiny {
            num_tokens(self.num_samples, &self.vit)?;
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        crate::util::sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }
}

/// ECG backbone plus optional linear head to `D_e`.
pub struct EcgEncoder<F> {
    net: Sequential<F>,
    head: Option<Linear<F>>,
    embed_dim: usize,
    num_leads: usize,
    num_samples: usize,
}

/// Builds an initialised, trainable ECG encoder.
pub fn build_ecg_encoder<F: Scalar>(config: &EncoderConfig) -> Result<EcgEncoder<F>> {
    config.validate()?;
    let mut rng = rng_stream(config.seed, 10);
    let (net, natural) = match config.ecg_backbone {
        EcgBackbone::Resnet1d18 => {
            build_resnet(BlockKind::Basic, [2, 2, 2, 2], config.num_leads, config.resnet_width, &mut rng)
        }
        EcgBackbone::Resnet1d50 => {
            build_resnet(BlockKind::Bottleneck, [3, 4, 6, 3], config.num_leads, config.resnet_width, &mut rng)
        }
        EcgBackbone::Resnet1d101 => {
            build_resnet(BlockKind::Bottleneck, [3, 4, 23, 3], config.num_leads, config.resnet_width, &mut rng)
        }
        EcgBackbone::Vit1dTiny => build_vit(&config.vit, config.num_leads, config.num_samples, &mut rng)?,
    };
    let head = (natural != config.ecg_embed_dim)
        .then(|| Linear::new(natural, config.ecg_embed_dim, true, &mut rng));
    Ok(EcgEncoder {
        net,
        head,
        embed_dim: config.ecg_embed_dim,
        num_leads: config.num_leads,
        num_samples: config.num_samples,
    })
}

impl<F: Scalar> EcgEncoder<F> {
    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_params(&self) -> usize {
        num_params::<F>(self)
    }

    /// Stacks signals into a `(batch, leads, samples)` tensor.
    pub fn batch_signals(&self, signals: &[&Array2<f32>]) -> Result<ArrayD<F>> {
        let mut out = Array3::zeros((signals.len(), self.num_leads, self.num_samples));
        for (i, s) in signals.iter().enumerate() {
            if s.dim() != (self.num_leads, self.num_samples) {
                return Err(MerlError::BatchShape(format!(
                    "item {i} has shape {:?}, encoder expects ({}, {})",
                    s.dim(),
                    self.num_leads,
                    self.num_samples
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(MerlError::BatchShape(format!("item {i} contains non-finite samples")));
            }
            out.index_axis_mut(Axis(0), i).assign(&s.mapv(|v| F::of(v as f64)));
        }
        Ok(out.into_dyn())
    }

    /// `(records, D_e)` embeddings in evaluation mode.
    pub fn encode(&self, signals: &[&Array2<f32>]) -> Result<Array2<F>> {
        let mut out = Array2::zeros((signals.len(), self.embed_dim));
        for (c, chunk) in signals.chunks(EVAL_CHUNK).enumerate() {
            let x = self.batch_signals(chunk)?;
            let z = self.forward(&x, Mode::Eval);
            let z: Array2<F> = z.into_dimensionality().expect("2-d embeddings");
            out.slice_mut(ndarray::s![c * EVAL_CHUNK..c * EVAL_CHUNK + chunk.len(), ..]).assign(&z);
        }
        Ok(out)
    }
}

impl<F: Scalar> Layer<F> for EcgEncoder<F> {
    fn forward(&self, x: &ArrayD<F>, mode: Mode) -> ArrayD<F> {
        let h = self.net.forward(x, mode);
        match &self.head {
            Some(l) => l.forward(&h, mode),
            None => h,
        }
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        let h = self.net.forward_train(x);
        match &mut self.head {
            Some(l) => l.forward_train(&h),
            None => h,
        }
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        let g = match &mut self.head {
            Some(l) => l.backward(grad),
            None => grad.clone(),
        };
        self.net.backward(&g)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        self.net.visit_params(prefix, f);
        if let Some(l) = &mut self.head {
            l.visit_params(&join(prefix, "head"), f);
        }
    }

    fn read_params(&self, prefix: &str, f: &mut ParamReader<'_, F>) {
        self.net.read_params(prefix, f);
        if let Some(l) = &self.head {
            l.read_params(&join(prefix, "head"), f);
        }
    }
}

/// Two-layer projector: affine → ReLU → affine. Output is not normalised;
/// see [`normalize_rows`].
pub struct Projector<F> {
    net: Sequential<F>,
    pub inputs: usize,
    pub outputs: usize,
}

impl<F: Scalar> Projector<F> {
    pub fn new(inputs: usize, hidden: usize, outputs: usize, seed: u64, stream: u64) -> Self {
        let mut rng = rng_stream(seed, stream);
        Projector {
            net: Sequential::new()
                .push("fc1", Linear::new(inputs, hidden, true, &mut rng))
                .push("act", Relu::new())
                .push("fc2", Linear::new(hidden, outputs, true, &mut rng)),
            inputs,
            outputs,
        }
    }
}

impl<F: Scalar> Layer<F> for Projector<F> {
    fn forward(&self, x: &ArrayD<F>, mode: Mode) -> ArrayD<F> {
        self.net.forward(x, mode)
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        self.net.forward_train(x)
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        self.net.backward(grad)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        self.net.visit_params(prefix, f)
    }

    fn read_params(&self, prefix: &str, f: &mut ParamReader<'_, F>) {
        self.net.read_params(prefix, f)
    }
}

/// Row-wise L2 normalisation. Rows with norm below 1e-12 are divided by the
/// epsilon instead (with a warning). Returns the normalised rows and the
/// (guarded) norms, which [`normalize_rows_backward`] needs.
pub fn normalize_rows<F: Scalar>(z: &Array2<F>) -> (Array2<F>, Array1<F>) {
    let eps = F::of(NORM_EPS);
    let mut norms = Array1::zeros(z.nrows());
    let mut out = z.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
        let n = if n < eps {
            warn!("row {i} has near-zero norm before normalisation; using epsilon guard");
            eps
        } else {
            n
        };
        norms[i] = n;
        row.mapv_inplace(|v| v / n);
    }
    (out, norms)
}

/// Gradient of [`normalize_rows`]: `dx = (dy - y (y·dy)) / |x|`.
pub fn normalize_rows_backward<F: Scalar>(dy: &Array2<F>, y: &Array2<F>, norms: &Array1<F>) -> Array2<F> {
    let mut dx = dy.clone();
    for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
        let yr = y.row(i);
        let dot = (&row * &yr).sum();
        let n = norms[i];
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - yr[j] * dot) / n;
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Ecg,
    Text,
}

/// The full two-tower model.
pub struct MerlModel<F> {
    pub config: EncoderConfig,
    pub ecg: EcgEncoder<F>,
    pub ecg_projector: Projector<F>,
    pub text: TextEncoder,
    pub text_projector: Projector<F>,
}

impl<F: Scalar> MerlModel<F> {
    pub fn new(config: EncoderConfig, registry: &AdapterRegistry) -> Result<Self> {
        config.validate()?;
        let text = match &config.text_encoder {
            TextEncoderKind::StubHash => TextEncoder::StubHash(StubHashEncoder {
                dim: config.text_embed_dim,
                seed: config.seed,
            }),
            TextEncoderKind::External(name) => {
                let adapter = registry.get(name)?;
                if adapter.dim() != config.text_embed_dim {
                    return Err(MerlError::Config(format!(
                        "adapter {name} produces {} dims, config says {}",
                        adapter.dim(),
                        config.text_embed_dim
                    )));
                }
                TextEncoder::External(adapter)
            }
        };
        let ecg = build_ecg_encoder(&config)?;
        let ecg_projector = Projector::new(config.ecg_embed_dim, config.projector_hidden, config.shared_dim, config.seed, 11);
        let text_projector = Projector::new(config.text_embed_dim, config.projector_hidden, config.shared_dim, config.seed, 12);
        Ok(MerlModel {
            config,
            ecg,
            ecg_projector,
            text,
            text_projector,
        })
    }

    pub fn components_mut(&mut self) -> [(&'static str, &mut dyn Layer<F>); 3] {
        [
            ("ecg_encoder", &mut self.ecg),
            ("ecg_projector", &mut self.ecg_projector),
            ("text_projector", &mut self.text_projector),
        ]
    }

    pub fn components(&self) -> [(&'static str, &dyn Layer<F>); 3] {
        [
            ("ecg_encoder", &self.ecg),
            ("ecg_projector", &self.ecg_projector),
            ("text_projector", &self.text_projector),
        ]
    }

    pub fn read_all_params(&self, f: &mut ParamReader<'_, F>) {
        for (name, c) in self.components() {
            c.read_params(name, f);
        }
    }

    pub fn visit_all_params(&mut self, f: &mut ParamVisitor<'_, F>) {
        for (name, c) in self.components_mut() {
            c.visit_params(name, f);
        }
    }

    /// SHA-256 over names and values of the ECG encoder parameters, buffers included.
    pub fn ecg_encoder_hash(&self) -> String {
        let mut h = Sha256::new();
        self.ecg.read_params("ecg_encoder", &mut |name, p| {
            h.update(name.as_bytes());
            for v in p.value.iter() {
                h.update(v.as_f64().to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    /// `z_e` for records (evaluation mode).
    pub fn encode_ecg(&self, records: &[&EcgRecord]) -> Result<Array2<F>> {
        let signals: Vec<&Array2<f32>> = records.iter().map(|r| &r.signal).collect();
        self.ecg.encode(&signals)
    }

    pub fn encode_text<S: AsRef<str>>(&self, texts: &[S]) -> Result<Array2<F>> {
        self.text.encode_batch(texts)
    }

    /// Projects raw embeddings of the given modality to unit-norm rows.
    pub fn project(&self, z: &Array2<F>, which: Modality) -> Result<Array2<F>> {
        let proj = match which {
            Modality::Ecg => &self.ecg_projector,
            Modality::Text => &self.text_projector,
        };
        if z.ncols() != proj.inputs {
            return Err(MerlError::Dimension(format!(
                "{which:?} projector expects {} columns, got {}",
                proj.inputs,
                z.ncols()
            )));
        }
        let p: Array2<F> = proj
            .forward(&z.clone().into_dyn(), Mode::Eval)
            .into_dimensionality()
            .expect("2-d projection");
        Ok(normalize_rows(&p).0)
    }
}

/// `(records, D_e)` ECG embeddings. All records must share the encoder's shape.
pub fn encode_ecg_batch<F: Scalar>(records: &[&EcgRecord], model: &MerlModel<F>) -> Result<Array2<F>> {
    model.encode_ecg(records)
}

pub fn encode_report_batch<F: Scalar>(reports: &[&ClinicalReport], model: &MerlModel<F>) -> Result<Array2<F>> {
    let texts: Vec<&str> = reports.iter().map(|r| r.text.as_str()).collect();
    model.encode_text(&texts)
}

pub fn project_and_normalize<F: Scalar>(z: &Array2<F>, which: Modality, model: &MerlModel<F>) -> Result<Array2<F>> {
    model.project(z, which)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticCorpusSpec};
    use rand::Rng;

    fn small_config(backbone: EcgBackbone) -> EncoderConfig {
        EncoderConfig {
            ecg_backbone: backbone,
            num_leads: 2,
            num_samples: 100,
            resnet_width: 4,
            vit: VitConfig {
                dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                patch_len: 10,
                stem_channels: 2,
            },
            ecg_embed_dim: 16,
            text_embed_dim: 12,
            shared_dim: 8,
            projector_hidden: 10,
            ..EncoderConfig::default()
        }
    }

    fn signals(n: usize, seed: u64) -> Vec<Array2<f32>> {
        let mut rng = crate::util::rng_stream(seed, 0);
        (0..n)
            .map(|_| Array2::from_shape_fn((2, 100), |_| rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn resnet18_full_size_shape() {
        let cfg = EncoderConfig {
            num_samples: 5000,
            ..EncoderConfig::default()
        };
        let enc: EcgEncoder<f32> = build_ecg_encoder(&cfg).unwrap();
        let mut rng = crate::util::rng_stream(0, 0);
        let sig: Vec<Array2<f32>> = (0..4)
            .map(|_| Array2::from_shape_fn((12, 5000), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let refs: Vec<&Array2<f32>> = sig.iter().collect();
        let z = enc.encode(&refs).unwrap();
        assert_eq!(z.dim(), (4, 512));
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn parameter_count_ordering() {
        let counts: Vec<usize> = [EcgBackbone::Resnet1d18, EcgBackbone::Resnet1d50, EcgBackbone::Resnet1d101]
            .iter()
            .map(|&b| build_ecg_encoder::<f32>(&small_config(b)).unwrap().num_params())
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }

    #[test]
    fn vit_needs_divisible_length() {
        let mut cfg = small_config(EcgBackbone::Vit1dTiny);
        let enc: EcgEncoder<f64> = build_ecg_encoder(&cfg).unwrap();
        let s = signals(3, 1);
        let refs: Vec<&Array2<f32>> = s.iter().collect();
        assert_eq!(enc.encode(&refs).unwrap().dim(), (3, 16));
        cfg.num_samples = 105;
        assert!(matches!(build_ecg_encoder::<f64>(&cfg), Err(MerlError::Config(_))));
    }

    #[test]
    fn batch_shape_mismatch() {
        let enc: EcgEncoder<f32> = build_ecg_encoder(&small_config(EcgBackbone::Resnet1d18)).unwrap();
        let a = Array2::zeros((2, 100));
        let b = Array2::zeros((2, 90));
        assert!(matches!(enc.encode(&[&a, &b]), Err(MerlError::BatchShape(_))));
    }

    #[test]
    fn eval_is_deterministic_and_permutation_equivariant() {
        let enc: EcgEncoder<f64> = build_ecg_encoder(&small_config(EcgBackbone::Resnet1d18)).unwrap();
        let s = signals(4, 2);
        let fwd: Vec<&Array2<f32>> = vec![&s[0], &s[1], &s[2], &s[0]];
        let z = enc.encode(&fwd).unwrap();
        assert_eq!(z.row(0), z.row(3));
        let perm: Vec<&Array2<f32>> = vec![&s[2], &s[0], &s[1]];
        let zp = enc.encode(&perm).unwrap();
        for (a, b) in [(0, 2), (1, 0), (2, 1)] {
            for (x, y) in zp.row(a).iter().zip(z.row(b).iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn untrained_encoder_separates_synthetic_classes() {
        let spec = SyntheticCorpusSpec {
            num_pairs: 40,
            num_classes: 2,
            num_leads: 2,
            num_samples: 100,
            sampling_rate_hz: 100,
            noise_std: 0.1,
            seed: 5,
            multi_label_prob: 0.0,
            variability: 0.0,
        };
        let (m, pairs) = generate_synthetic_corpus(&spec).unwrap();
        let model: MerlModel<f64> = MerlModel::new(small_config(EcgBackbone::Resnet1d18), &AdapterRegistry::new()).unwrap();
        let recs: Vec<&EcgRecord> = pairs.iter().map(|p| &p.ecg).collect();
        let z = model.encode_ecg(&recs).unwrap();
        let mean_of = |class: &str| {
            let idx: Vec<usize> = (0..m.len()).filter(|&i| m.entries[i].labels[0] == class).collect();
            z.select(Axis(0), &idx).mean_axis(Axis(0)).unwrap()
        };
        let d = (&mean_of("syn0") - &mean_of("syn1")).mapv(|v| v * v).sum();
        assert!(d > 0.0);
    }

    #[test]
    fn projection_is_unit_norm() {
        let model: MerlModel<f64> = MerlModel::new(small_config(EcgBackbone::Resnet1d18), &AdapterRegistry::new()).unwrap();
        let mut rng = crate::util::rng_stream(3, 0);
        let z = Array2::from_shape_fn((8, 16), |_| rng.gen_range(-3.0..3.0));
        let p = project_and_normalize(&z, Modality::Ecg, &model).unwrap();
        let scaled = project_and_normalize(&(&z * 5.0), Modality::Ecg, &model).unwrap();
        assert_ne!(p, scaled);
        for m in [&p, &scaled] {
            for row in m.rows() {
                let n = row.dot(&row).sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
        let g = p.dot(&p.t());
        assert!(g.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        assert!(matches!(
            project_and_normalize(&Array2::zeros((2, 5)), Modality::Ecg, &model),
            Err(MerlError::Dimension(_))
        ));
    }

    #[test]
    fn zero_row_is_guarded() {
        let (y, n) = normalize_rows(&Array2::<f64>::zeros((1, 3)));
        assert!(y.iter().all(|v| *v == 0.0));
        assert_eq!(n[0], 1e-12);
    }

    #[test]
    fn normalisation_gradient() {
        let mut rng = crate::util::rng_stream(4, 0);
        let x = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0f64));
        let w = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0f64));
        let (y, n) = normalize_rows(&x);
        let dx = normalize_rows_backward(&w, &y, &n);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = ((&normalize_rows(&xp).0 * &w).sum() - (&normalize_rows(&xm).0 * &w).sum()) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn external_text_encoder_must_be_registered() {
        let cfg = EncoderConfig {
            text_encoder: TextEncoderKind::External("medcpt".into()),
            ..small_config(EcgBackbone::Resnet1d18)
        };
        assert!(matches!(MerlModel::<f32>::new(cfg, &AdapterRegistry::new()), Err(MerlError::Capability(_))));
    }
}
