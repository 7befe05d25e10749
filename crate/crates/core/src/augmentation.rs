//! Input-level ECG augmentations. These exist for the ablation that swaps
//! latent dropout for augmented input views; the method itself does not use them.

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MerlError, Result};
use crate::scalar::Scalar;
use crate::util::rng_stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentationKind {
    Cutout { segment_fraction: f64 },
    Drop { point_fraction: f64 },
    GaussianNoise { sigma: f64 },
}

impl AugmentationKind {
    pub fn name(&self) -> &'static str {
        match self {
            AugmentationKind::Cutout { .. } => "cutout",
            AugmentationKind::Drop { .. } => "drop",
            AugmentationKind::GaussianNoise { .. } => "gaussian_noise",
        }
    }

    /// Kind with default magnitude: `cutout`, `drop` or `gaussian_noise`.
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim() {
            "cutout" => Ok(AugmentationKind::Cutout { segment_fraction: 0.1 }),
            "drop" => Ok(AugmentationKind::Drop { point_fraction: 0.1 }),
            "gaussian_noise" => Ok(AugmentationKind::GaussianNoise { sigma: 0.05 }),
            other => Err(MerlError::Config(format!("unknown augmentation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    #[serde(flatten)]
    pub kind: AugmentationKind,
    pub seed: u64,
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            AugmentationKind::Cutout { segment_fraction: f } | AugmentationKind::Drop { point_fraction: f } => {
                f > 0.0 && f < 1.0
            }
            AugmentationKind::GaussianNoise { sigma } => sigma >= 0.0 && sigma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(MerlError::Config(format!("invalid augmentation magnitude in {:?}", self.kind)))
        }
    }

    /// Applies the augmentation with a per-call seed mixed into the spec seed.
    pub fn apply<F: Scalar>(&self, signal: &Array2<F>, call_seed: u64) -> Array2<F> {
        let seed = self.seed ^ call_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        match self.kind {
            AugmentationKind::Cutout { segment_fraction } => cutout(signal, segment_fraction, seed),
            AugmentationKind::Drop { point_fraction } => random_drop(signal, point_fraction, seed),
            AugmentationKind::GaussianNoise { sigma } => gaussian_noise(signal, sigma, seed),
        }
    }
}

fn count_for(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).floor() as usize).clamp(1, n)
}

/// Zeroes one contiguous window of `floor(fraction * samples)` per lead
/// (at least one sample), at a uniformly random position.
pub fn cutout<F: Scalar>(signal: &Array2<F>, segment_fraction: f64, seed: u64) -> Array2<F> {
    let n = signal.ncols();
    let mut out = signal.clone();
    if n == 0 {
        return out;
    }
    let w = count_for(segment_fraction, n);
    let mut rng = rng_stream(seed, 0xC07);
    for mut lead in out.axis_iter_mut(Axis(0)) {
        let start = rng.gen_range(0..=n - w);
        lead.slice_mut(ndarray::s![start..start + w]).fill(F::zero());
    }
    out
}

/// Zeroes `floor(fraction * samples)` distinct, uniformly chosen samples per lead.
pub fn random_drop<F: Scalar>(signal: &Array2<F>, point_fraction: f64, seed: u64) -> Array2<F> {
    let n = signal.ncols();
    let mut out = signal.clone();
    if n == 0 {
        return out;
    }
    let k = count_for(point_fraction, n);
    let mut rng = rng_stream(seed, 0xD20);
    for mut lead in out.axis_iter_mut(Axis(0)) {
        for t in sample(&mut rng, n, k) {
            lead[t] = F::zero();
        }
    }
    out
}

/// Adds N(0, (sigma * lead std)^2) noise independently to every sample.
pub fn gaussian_noise<F: Scalar>(signal: &Array2<F>, sigma: f64, seed: u64) -> Array2<F> {
    let mut out = signal.clone();
    if sigma == 0.0 {
        return out;
    }
    let mut rng = rng_stream(seed, 0x6A5);
    for mut lead in out.axis_iter_mut(Axis(0)) {
        let std = lead.mapv(|v| v.as_f64()).std(0.0);
        let scale = sigma * std;
        for v in lead.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += F::of(scale * e);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wave(leads: usize, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((leads, n), |(l, t)| 1.0 + ((t as f64) * 0.01 + l as f64).sin())
    }

    #[test]
    fn cutout_window() {
        let x = wave(3, 5000);
        let y = cutout(&x, 0.1, 7);
        for l in 0..3 {
            let zeros: Vec<usize> = (0..5000).filter(|&t| y[[l, t]] == 0.0).collect();
            assert_eq!(zeros.len(), 500);
            assert_eq!(zeros[499] - zeros[0], 499);
        }
        assert_eq!(y, cutout(&x, 0.1, 7));
        let one = cutout(&x, 1e-9, 7);
        assert_eq!(one.iter().filter(|v| **v == 0.0).count(), 3);
    }

    #[test]
    fn drop_count_and_position() {
        let x = wave(1, 5000);
        let y = random_drop(&x, 0.1, 1);
        assert_eq!(y.iter().filter(|v| **v == 0.0).count(), 500);

        // mean index of dropped samples over many seeds
        let n = 1000usize;
        let x = wave(1, n);
        let mut sum = 0.0;
        let mut count = 0.0;
        for seed in 0..200 {
            let y = random_drop(&x, 0.05, seed);
            for t in 0..n {
                if y[[0, t]] == 0.0 {
                    sum += t as f64;
                    count += 1.0;
                }
            }
        }
        let mean = sum / count;
        let sd = ((n * n) as f64 / 12.0 / count).sqrt();
        assert!((mean - (n - 1) as f64 / 2.0).abs() < 5.0 * sd, "{mean}");
    }

    #[test]
    fn noise_scale() {
        let x = wave(2, 5000);
        assert_eq!(gaussian_noise(&x, 0.0, 3), x);
        let y = gaussian_noise(&x, 0.2, 3);
        for l in 0..2 {
            let diff = (&y.row(l) - &x.row(l)).std(0.0);
            let ratio = diff / x.row(l).std(0.0);
            assert!((ratio / 0.2 - 1.0).abs() < 0.05, "{ratio}");
        }
        assert_eq!(y, gaussian_noise(&x, 0.2, 3));
        assert_ne!(y, gaussian_noise(&x, 0.2, 4));
    }

    #[test]
    fn spec_serialises_flat() {
        let s = AugmentationSpec {
            kind: AugmentationKind::Cutout { segment_fraction: 0.2 },
            seed: 5,
        };
        let j = serde_json::to_value(s).unwrap();
        assert_eq!(j["kind"], "cutout");
        assert_eq!(serde_json::from_value::<AugmentationSpec>(j).unwrap(), s);
        assert!(AugmentationSpec {
            kind: AugmentationKind::Drop { point_fraction: 1.0 },
            seed: 0
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn masking_ops_touch_only_zeroed_entries(seed in 0u64..1000, frac in 0.01f64..0.9) {
            let x = wave(2, 97);
            for y in [cutout(&x, frac, seed), random_drop(&x, frac, seed)] {
                prop_assert_eq!(y.dim(), x.dim());
                for (a, b) in x.iter().zip(y.iter()) {
                    prop_assert!(*b == 0.0 || a.to_bits() == b.to_bits());
                }
            }
        }
    }
}
