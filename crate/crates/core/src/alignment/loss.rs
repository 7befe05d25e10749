use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::encoders::{normalize_rows, normalize_rows_backward};
use crate::error::{MerlError, Result};
use crate::scalar::{log_sum_exp, Scalar};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Whether the positive pair appears in the softmax denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorVariant {
    /// Usual InfoNCE: the positive is one of the candidates.
    #[default]
    Standard,
    /// Positive excluded from the denominator. Unbounded below.
    Decoupled,
}

impl DenominatorVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "standard" => Ok(DenominatorVariant::Standard),
            "decoupled" => Ok(DenominatorVariant::Decoupled),
            other => Err(MerlError::Config(format!("unknown denominator variant {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DenominatorVariant::Standard => "standard",
            DenominatorVariant::Decoupled => "decoupled",
        }
    }
}

/// Pairwise similarities between a batch of ECGs (rows) and reports (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<F> {
    pub values: Array2<F>,
    pub temperature: F,
}

impl<F: Scalar> SimilarityMatrix<F> {
    pub fn new(values: Array2<F>, temperature: F) -> Result<Self> {
        if !(temperature > F::zero()) {
            return Err(MerlError::Config(format!("temperature must be positive, got {temperature}")));
        }
        if values.nrows() != values.ncols() {
            return Err(MerlError::Dimension(format!("similarity matrix is {:?}, not square", values.dim())));
        }
        if values.nrows() < 2 {
            return Err(MerlError::BatchTooSmall(values.nrows()));
        }
        Ok(SimilarityMatrix { values, temperature })
    }

    pub fn batch_size(&self) -> usize {
        self.values.nrows()
    }

    /// Report-to-ECG view.
    pub fn transposed(&self) -> Self {
        SimilarityMatrix {
            values: self.values.t().to_owned(),
            temperature: self.temperature,
        }
    }
}

/// `values[i][j] = E_i · R_j`. Inputs are expected to be unit-norm rows.
pub fn similarity_matrix<F: Scalar>(e: &Array2<F>, r: &Array2<F>, temperature: F) -> Result<SimilarityMatrix<F>> {
    if e.dim() != r.dim() {
        return Err(MerlError::Dimension(format!(
            "ECG batch {:?} and report batch {:?} differ",
            e.dim(),
            r.dim()
        )));
    }
    if e.nrows() < 2 {
        return Err(MerlError::BatchTooSmall(e.nrows()));
    }
    SimilarityMatrix::new(e.dot(&r.t()), temperature)
}

fn check_finite<F: Scalar>(values: &Array2<F>) -> Result<()> {
    let bad: Vec<(usize, usize)> = values
        .indexed_iter()
        .filter(|(_, v)| !v.is_finite())
        .map(|(ix, _)| ix)
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(MerlError::NonFinite { indices: bad })
    }
}

/// Cross-entropy of row `i` with positive at column `i`; writes d/ds into `grad`.
fn row_term<F: Scalar>(row: ArrayView1<F>, i: usize, inv_tau: F, variant: DenominatorVariant, grad: &mut [F]) -> F {
    let include = |k: usize| variant == DenominatorVariant::Standard || k != i;
    let logits = row
        .iter()
        .enumerate()
        .filter(|(k, _)| include(*k))
        .map(|(_, &s)| s * inv_tau);
    let lse = log_sum_exp(logits);
    for (k, g) in grad.iter_mut().enumerate() {
        *g = if include(k) { (row[k] * inv_tau - lse).exp() * inv_tau } else { F::zero() };
    }
    grad[i] -= inv_tau;
    lse - row[i] * inv_tau
}

/// Bidirectional contrastive loss averaged as `1/(2L)` over both directions,
/// together with its gradient with respect to `S.values`.
pub fn cma_loss_with_grad<F: Scalar>(s: &SimilarityMatrix<F>, variant: DenominatorVariant) -> Result<(F, Array2<F>)> {
    check_finite(&s.values)?;
    let l = s.batch_size();
    let inv_tau = F::one() / s.temperature;
    let mut grad = Array2::zeros((l, l));
    let mut buf = vec![F::zero(); l];
    let mut total = F::zero();
    for i in 0..l {
        total += row_term(s.values.row(i), i, inv_tau, variant, &mut buf);
        for k in 0..l {
            grad[[i, k]] += buf[k];
        }
        total += row_term(s.values.column(i), i, inv_tau, variant, &mut buf);
        for k in 0..l {
            grad[[k, i]] += buf[k];
        }
    }
    let scale = F::one() / F::of_usize(2 * l);
    grad.mapv_inplace(|g| g * scale);
    Ok((total * scale, grad))
}

pub fn cma_loss<F: Scalar>(s: &SimilarityMatrix<F>, variant: DenominatorVariant) -> Result<F> {
    Ok(cma_loss_with_grad(s, variant)?.0)
}

/// Contrastive loss between two views of the same batch. Rows are normalised
/// first; returns the loss and gradients with respect to both raw views.
pub fn view_contrast_with_grad<F: Scalar>(
    v1: &Array2<F>,
    v2: &Array2<F>,
    temperature: F,
    variant: DenominatorVariant,
) -> Result<(F, Array2<F>, Array2<F>)> {
    let (n1, norms1) = normalize_rows(v1);
    let (n2, norms2) = normalize_rows(v2);
    let s = similarity_matrix(&n1, &n2, temperature)?;
    let (loss, ds) = cma_loss_with_grad(&s, variant)?;
    let dn1 = ds.dot(&n2);
    let dn2 = ds.t().dot(&n1);
    Ok((
        loss,
        normalize_rows_backward(&dn1, &n1, &norms1),
        normalize_rows_backward(&dn2, &n2, &norms2),
    ))
}

/// Per-batch losses. `total` is always `cma + uma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cma: f64,
    pub uma: f64,
    pub total: f64,
    pub batch_size: usize,
}

pub fn total_loss(cma: f64, uma: f64) -> LossBreakdown {
    LossBreakdown {
        cma,
        uma,
        total: cma + uma,
        batch_size: 0,
    }
}

/// Mean of diagonal and off-diagonal entries.
pub fn diagonal_margin<F: Scalar>(s: &SimilarityMatrix<F>) -> (f64, f64) {
    let l = s.batch_size();
    let diag: f64 = s.values.diag().iter().map(|v| v.as_f64()).sum::<f64>() / l as f64;
    let all: f64 = s.values.iter().map(|v| v.as_f64()).sum();
    let off = (all - diag * l as f64) / (l * l - l) as f64;
    (diag, off)
}
