//! 1-D vision transformer. Leads are first mixed by a pointwise linear stem,
//! then the mixed signal is cut into non-overlapping time patches; each
//! patch (all stem channels) becomes one token.

use ndarray::{s, Array3, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MerlError, Result};
use crate::nn::{
    join, Conv1d, Layer, LayerNorm, Linear, Mode, Param, ParamReader, ParamVisitor, Sequential,
    TransformerBlock,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_len: usize,
    pub stem_channels: usize,
}

impl Default for VitConfig {
    /// ViT-Tiny proportions with 50-sample patches.
    fn default() -> Self {
        VitConfig {
            dim: 192,
            depth: 12,
            heads: 3,
            mlp_ratio: 4,
            patch_len: 50,
            stem_channels: 12,
        }
    }
}

/// `(batch, channels, time)` → `(batch, time / patch, channels * patch)`.
struct Patchify {
    patch: usize,
    input_shape: (usize, usize, usize),
}

impl<F: Scalar> Layer<F> for Patchify {
    fn forward(&self, x: &ArrayD<F>, _mode: Mode) -> ArrayD<F> {
        let x: Array3<F> = x.as_standard_layout().into_owned().into_dimensionality().unwrap();
        let (b, c, t) = x.dim();
        let n = t / self.patch;
        let mut out = Array3::zeros((b, n, c * self.patch));
        for bi in 0..b {
            for ni in 0..n {
                for ci in 0..c {
                    out.slice_mut(s![bi, ni, ci * self.patch..(ci + 1) * self.patch])
                        .assign(&x.slice(s![bi, ci, ni * self.patch..(ni + 1) * self.patch]));
                }
            }
        }
        out.into_dyn()
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        self.input_shape = (x.shape()[0], x.shape()[1], x.shape()[2]);
        self.forward(x, Mode::Train)
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        let g: Array3<F> = grad.as_standard_layout().into_owned().into_dimensionality().unwrap();
        let (b, c, t) = self.input_shape;
        let mut dx = Array3::zeros((b, c, t));
        for bi in 0..b {
            for ni in 0..t / self.patch {
                for ci in 0..c {
                    dx.slice_mut(s![bi, ci, ni * self.patch..(ni + 1) * self.patch])
                        .assign(&g.slice(s![bi, ni, ci * self.patch..(ci + 1) * self.patch]));
                }
            }
        }
        dx.into_dyn()
    }
}

/// Learned additive position embedding over `(batch, tokens, dim)`.
struct PositionEmbedding<F> {
    table: Param<F>,
}

impl<F: Scalar> Layer<F> for PositionEmbedding<F> {
    fn forward(&self, x: &ArrayD<F>, _mode: Mode) -> ArrayD<F> {
        x + &self.table.value
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        self.forward(x, Mode::Train)
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        self.table.grad += &grad.sum_axis(Axis(0));
        grad.clone()
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        f(&join(prefix, "table"), &mut self.table);
    }

    fn read_params(&self, prefix: &str, f: &mut ParamReader<'_, F>) {
        f(&join(prefix, "table"), &self.table);
    }
}

/// Mean over the token axis.
struct TokenMean {
    tokens: usize,
}

impl<F: Scalar> Layer<F> for TokenMean {
    fn forward(&self, x: &ArrayD<F>, _mode: Mode) -> ArrayD<F> {
        x.mean_axis(Axis(1)).unwrap()
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        self.tokens = x.shape()[1];
        self.forward(x, Mode::Train)
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        let g = (grad / F::of_usize(self.tokens)).insert_axis(Axis(1));
        let shape = [g.shape()[0], self.tokens, g.shape()[2]];
        g.broadcast(IxDyn(&shape)).unwrap().to_owned()
    }
}

pub fn num_tokens(num_samples: usize, cfg: &VitConfig) -> Result<usize> {
    if cfg.patch_len == 0 || num_samples % cfg.patch_len != 0 {
        return Err(MerlError::Config(format!(
            "vit1d: {num_samples} samples are not divisible by patch length {}",
            cfg.patch_len
        )));
    }
    Ok(num_samples / cfg.patch_len)
}

/// Returns the network and its output width.
pub fn build_vit<F: Scalar>(
    cfg: &VitConfig,
    in_channels: usize,
    num_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Sequential<F>, usize)> {
    let tokens = num_tokens(num_samples, cfg)?;
    if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
        return Err(MerlError::Config(format!(
            "vit1d: dim {} is not divisible by {} heads",
            cfg.dim, cfg.heads
        )));
    }
    let normal = Normal::new(0.0, 0.02).unwrap();
    let table = ArrayD::from_shape_simple_fn(IxDyn(&[tokens, cfg.dim]), || F::of(normal.sample(rng)));
    let mut net = Sequential::new()
        .push("stem", Conv1d::new(in_channels, cfg.stem_channels, 1, 1, 0, true, rng))
        .push(
            "patchify",
            Patchify {
                patch: cfg.patch_len,
                input_shape: (0, 0, 0),
            },
        )
        .push("patch_embed", Linear::new(cfg.stem_channels * cfg.patch_len, cfg.dim, true, rng))
        .push("pos_embed", PositionEmbedding { table: Param::new(table).no_decay() });
    let mut blocks = Sequential::new();
    for i in 0..cfg.depth {
        blocks = blocks.push(i.to_string(), TransformerBlock::new(cfg.dim, cfg.heads, cfg.mlp_ratio, rng));
    }
    net = net
        .push("blocks", blocks)
        .push("norm", LayerNorm::new(cfg.dim))
        .push("pool", TokenMean { tokens });
    Ok((net, cfg.dim))
}
