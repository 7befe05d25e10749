use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MerlError, Result};
use crate::scalar::Scalar;
use crate::text::tokens;
use crate::util::{keyed_hash, rng_stream};

/// Which text encoder a model uses.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoderKind {
    /// Offline encoder: each token maps to a fixed pseudo-random vector
    /// seeded by its hash; a report is the mean of its token vectors.
    StubHash,
    /// A pretrained encoder supplied at runtime through [`AdapterRegistry`].
    External(String),
}

impl TextEncoderKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "stub_hash" => Ok(TextEncoderKind::StubHash),
            other => match other.strip_prefix("external:") {
                Some(name) if !name.trim().is_empty() => Ok(TextEncoderKind::External(name.trim().to_string())),
                _ => Err(MerlError::Config(format!(
                    "text encoder {other:?}: expected stub_hash or external:<name>"
                ))),
            },
        }
    }
}

impl fmt::Display for TextEncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TextEncoderKind::StubHash => f.write_str("stub_hash"),
            TextEncoderKind::External(n) => write!(f, "external:{n}"),
        }
    }
}

/// Contract for pretrained clinical text encoders (raw text in, fixed-size
/// vector out).
pub trait TextAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f32>>;
    /// Whether the adapter's own weights would be updated during pretraining.
    fn trainable(&self) -> bool {
        false
    }
}

#[derive(Clone, Default)]
pub struct AdapterRegistry {
    adapters: BTreeMap<String, Arc<dyn TextAdapter>>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, adapter: Arc<dyn TextAdapter>) {
        self.adapters.insert(adapter.name().to_string(), adapter);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn TextAdapter>> {
        self.adapters.get(name).cloned().ok_or_else(|| {
            MerlError::Capability(format!("no text adapter named {name:?} is registered"))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubHashEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl StubHashEncoder {
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = rng_stream(keyed_hash(self.seed, "token", token), 0);
        let scale = 1.0 / (self.dim as f64).sqrt();
        (0..self.dim)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect()
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        let mut n = 0usize;
        for tok in tokens(text) {
            for (a, v) in acc.iter_mut().zip(self.token_vector(&tok)) {
                *a += v;
            }
            n += 1;
        }
        if n > 0 {
            acc.iter_mut().for_each(|a| *a /= n as f64);
        }
        acc
    }
}

#[derive(Clone)]
pub enum TextEncoder {
    StubHash(StubHashEncoder),
    External(Arc<dyn TextAdapter>),
}

impl fmt::Debug for TextEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TextEncoder::StubHash(s) => write!(f, "StubHash({s:?})"),
            TextEncoder::External(a) => write!(f, "External({})", a.name()),
        }
    }
}

impl TextEncoder {
    pub fn dim(&self) -> usize {
        match self {
            TextEncoder::StubHash(s) => s.dim,
            TextEncoder::External(a) => a.dim(),
        }
    }

    /// `(reports, dim)` embedding matrix; row `i` encodes `texts[i]`.
    pub fn encode_batch<F: Scalar, S: AsRef<str>>(&self, texts: &[S]) -> Result<Array2<F>> {
        let dim = self.dim();
        let mut out = Array2::zeros((texts.len(), dim));
        for (i, t) in texts.iter().enumerate() {
            let row: Vec<F> = match self {
                TextEncoder::StubHash(s) => s.encode(t.as_ref()).into_iter().map(F::of).collect(),
                TextEncoder::External(a) => {
                    let v = a.encode(t.as_ref())?;
                    if v.len() != dim {
                        return Err(MerlError::Dimension(format!(
                            "adapter {} returned {} values, expected {dim}",
                            a.name(),
                            v.len()
                        )));
                    }
                    v.into_iter().map(|x| F::of(x as f64)).collect()
                }
            };
            out.row_mut(i).assign(&ndarray::Array1::from(row));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_parsing() {
        assert_eq!(TextEncoderKind::parse("stub_hash").unwrap(), TextEncoderKind::StubHash);
        let k = TextEncoderKind::parse("external:medcpt").unwrap();
        assert_eq!(k, TextEncoderKind::External("medcpt".into()));
        assert_eq!(k.to_string(), "external:medcpt");
        assert!(TextEncoderKind::parse("bert").is_err());
    }

    #[test]
    fn stub_properties() {
        let enc = TextEncoder::StubHash(StubHashEncoder { dim: 16, seed: 3 });
        let m: Array2<f64> = enc
            .encode_batch(&["sinus rhythm", "Sinus  rhythm.", "atrial fibrillation", "sinus"])
            .unwrap();
        assert_eq!(m.row(0), m.row(1));
        assert_ne!(m.row(0), m.row(2));
        let StubHashEncoder { .. } = StubHashEncoder { dim: 16, seed: 3 };
        let single = StubHashEncoder { dim: 16, seed: 3 }.token_vector("sinus");
        assert_eq!(m.row(3).to_vec(), single);
    }

    #[test]
    fn missing_adapter_is_a_capability_error() {
        let reg = AdapterRegistry::new();
        assert!(matches!(reg.get("medcpt"), Err(MerlError::Capability(_))));
    }
}
