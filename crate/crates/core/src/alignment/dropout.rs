use ndarray::Array2;
use rand::Rng;

use super::loss::{view_contrast_with_grad, DenominatorVariant};
use crate::error::{MerlError, Result};
use crate::scalar::Scalar;
use crate::util::rng_stream;

pub const DEFAULT_DROPOUT_RATIO: f64 = 0.1;

/// Two masked copies of a batch of ECG embeddings. `true` in a mask keeps the entry.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutViewPair<F> {
    pub view1: Array2<F>,
    pub view2: Array2<F>,
    pub mask1: Array2<bool>,
    pub mask2: Array2<bool>,
    pub ratio: f64,
    /// Kept entries were multiplied by `1/(1-p)`.
    pub rescaled: bool,
}

impl<F: Scalar> DropoutViewPair<F> {
    fn keep_scale(&self) -> F {
        if self.rescaled {
            F::of(1.0 / (1.0 - self.ratio))
        } else {
            F::one()
        }
    }
}

fn bernoulli_mask(shape: (usize, usize), p: f64, seed: u64, stream: u64) -> Array2<bool> {
    let mut rng = rng_stream(seed, stream);
    Array2::from_shape_simple_fn(shape, || rng.gen::<f64>() >= p)
}

/// Masks `z` twice with independent Bernoulli(keep = 1-p) masks, no rescaling.
pub fn latent_dropout_views<F: Scalar>(z: &Array2<F>, p: f64, seed: u64) -> Result<DropoutViewPair<F>> {
    latent_dropout_views_with(z, p, seed, false)
}

pub fn latent_dropout_views_with<F: Scalar>(z: &Array2<F>, p: f64, seed: u64, rescale: bool) -> Result<DropoutViewPair<F>> {
    if !(0.0..1.0).contains(&p) {
        return Err(MerlError::Config(format!("dropout ratio must lie in [0, 1), got {p}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(MerlError::NonFinite {
            indices: z.indexed_iter().filter(|(_, v)| !v.is_finite()).map(|(i, _)| i).collect(),
        });
    }
    let mask1 = bernoulli_mask(z.dim(), p, seed, 0xA1);
    let mask2 = bernoulli_mask(z.dim(), p, seed, 0xA2);
    let scale = if rescale { F::of(1.0 / (1.0 - p)) } else { F::one() };
    let apply = |m: &Array2<bool>| {
        let mut v = z.clone();
        ndarray::Zip::from(&mut v).and(m).for_each(|x, &k| *x = if k { *x * scale } else { F::zero() });
        v
    };
    Ok(DropoutViewPair {
        view1: apply(&mask1),
        view2: apply(&mask2),
        mask1,
        mask2,
        ratio: p,
        rescaled: rescale,
    })
}

/// Contrast between the two views: rows normalised, diagonal positives,
/// cross-view negatives, both directions.
pub fn uma_loss<F: Scalar>(views: &DropoutViewPair<F>, temperature: F, variant: DenominatorVariant) -> Result<F> {
    Ok(view_contrast_with_grad(&views.view1, &views.view2, temperature, variant)?.0)
}

/// Loss and gradient with respect to the unmasked embeddings.
pub fn uma_loss_with_grad<F: Scalar>(
    views: &DropoutViewPair<F>,
    temperature: F,
    variant: DenominatorVariant,
) -> Result<(F, Array2<F>)> {
    let (loss, d1, d2) = view_contrast_with_grad(&views.view1, &views.view2, temperature, variant)?;
    let scale = views.keep_scale();
    let mut dz = Array2::zeros(d1.dim());
    ndarray::Zip::from(&mut dz)
        .and(&d1)
        .and(&d2)
        .and(&views.mask1)
        .and(&views.mask2)
        .for_each(|g, &a, &b, &m1, &m2| {
            if m1 {
                *g += a * scale;
            }
            if m2 {
                *g += b * scale;
            }
        });
    Ok((loss, dz))
}
