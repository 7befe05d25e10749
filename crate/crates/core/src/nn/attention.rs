use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis};
use rand_chacha::ChaCha8Rng;

use super::{join, Gelu, Layer, LayerNorm, Linear, Mode, ParamReader, ParamVisitor, Sequential};
use crate::scalar::Scalar;

fn softmax_rows<F: Scalar>(m: &mut Array2<F>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.fold(F::neg_infinity(), |a, &b| if b > a { b } else { a });
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head self-attention over `(batch, tokens, dim)`.
pub struct MultiHeadSelfAttention<F> {
    pub qkv: Linear<F>,
    pub out: Linear<F>,
    pub heads: usize,
    cache: Option<AttnCache<F>>,
}

struct AttnCache<F> {
    qkv: Array3<F>,
    attn: Array4<F>,
}

impl<F: Scalar> MultiHeadSelfAttention<F> {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        MultiHeadSelfAttention {
            qkv: Linear::new(dim, 3 * dim, true, rng),
            out: Linear::new(dim, dim, true, rng),
            heads,
            cache: None,
        }
    }

    /// Returns concatenated head outputs and the attention weights.
    fn attend(&self, qkv: &Array3<F>) -> (Array3<F>, Array4<F>) {
        let (b, n, three_d) = qkv.dim();
        let d = three_d / 3;
        let dh = d / self.heads;
        let scale = F::one() / F::of_usize(dh).sqrt();
        let mut concat = Array3::zeros((b, n, d));
        let mut weights = Array4::zeros((b, self.heads, n, n));
        for bi in 0..b {
            for h in 0..self.heads {
                let q = qkv.slice(s![bi, .., h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![bi, .., d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![bi, .., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut a = q.dot(&k.t()) * scale;
                softmax_rows(&mut a);
                concat.slice_mut(s![bi, .., h * dh..(h + 1) * dh]).assign(&a.dot(&v));
                weights.slice_mut(s![bi, h, .., ..]).assign(&a);
            }
        }
        (concat, weights)
    }
}

impl<F: Scalar> Layer<F> for MultiHeadSelfAttention<F> {
    fn forward(&self, x: &ArrayD<F>, mode: Mode) -> ArrayD<F> {
        let qkv: Array3<F> = self.qkv.forward(x, mode).into_dimensionality().unwrap();
        let (concat, _) = self.attend(&qkv);
        self.out.forward(&concat.into_dyn(), mode)
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        let qkv: Array3<F> = self.qkv.forward_train(x).into_dimensionality().unwrap();
        let (concat, attn) = self.attend(&qkv);
        self.cache = Some(AttnCache { qkv, attn });
        self.out.forward_train(&concat.into_dyn())
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        let dconcat: Array3<F> = self.out.backward(grad).into_dimensionality().unwrap();
        let cache = self.cache.as_ref().expect("backward before forward_train");
        let (b, n, three_d) = cache.qkv.dim();
        let d = three_d / 3;
        let dh = d / self.heads;
        let scale = F::one() / F::of_usize(dh).sqrt();
        let mut dqkv = Array3::<F>::zeros((b, n, three_d));
        for bi in 0..b {
            for h in 0..self.heads {
                let (qs, ks, vs) = (h * dh, d + h * dh, 2 * d + h * dh);
                let q = cache.qkv.slice(s![bi, .., qs..qs + dh]);
                let k = cache.qkv.slice(s![bi, .., ks..ks + dh]);
                let v = cache.qkv.slice(s![bi, .., vs..vs + dh]);
                let a = cache.attn.slice(s![bi, h, .., ..]);
                let dout = dconcat.slice(s![bi, .., qs..qs + dh]);
                let da = dout.dot(&v.t());
                let dv = a.t().dot(&dout);
                let mut dsc = da.clone();
                for (r, mut row) in dsc.axis_iter_mut(Axis(0)).enumerate() {
                    let ar = a.row(r);
                    let dot = (&row * &ar).sum();
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = ar[j] * (*x - dot) * scale;
                    }
                }
                dqkv.slice_mut(s![bi, .., qs..qs + dh]).assign(&dsc.dot(&k));
                dqkv.slice_mut(s![bi, .., ks..ks + dh]).assign(&dsc.t().dot(&q));
                dqkv.slice_mut(s![bi, .., vs..vs + dh]).assign(&dv);
            }
        }
        self.qkv.backward(&dqkv.into_dyn())
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        self.qkv.visit_params(&join(prefix, "qkv"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }

    fn read_params(&self, prefix: &str, f: &mut ParamReader<'_, F>) {
        self.qkv.read_params(&join(prefix, "qkv"), f);
        self.out.read_params(&join(prefix, "out"), f);
    }
}

/// Pre-norm transformer encoder block.
pub struct TransformerBlock<F> {
    norm1: LayerNorm<F>,
    attn: MultiHeadSelfAttention<F>,
    norm2: LayerNorm<F>,
    mlp: Sequential<F>,
}

impl<F: Scalar> TransformerBlock<F> {
    pub fn new(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = dim * mlp_ratio;
        TransformerBlock {
            norm1: LayerNorm::new(dim),
            attn: MultiHeadSelfAttention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim),
            mlp: Sequential::new()
                .push("fc1", Linear::new(dim, hidden, true, rng))
                .push("act", Gelu::new())
                .push("fc2", Linear::new(hidden, dim, true, rng)),
        }
    }
}

impl<F: Scalar> Layer<F> for TransformerBlock<F> {
    fn forward(&self, x: &ArrayD<F>, mode: Mode) -> ArrayD<F> {
        let h = x + &self.attn.forward(&self.norm1.forward(x, mode), mode);
        &h + &self.mlp.forward(&self.norm2.forward(&h, mode), mode)
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        let a = self.norm1.forward_train(x);
        let h = x + &self.attn.forward_train(&a);
        let m = self.norm2.forward_train(&h);
        &h + &self.mlp.forward_train(&m)
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        let dm = self.mlp.backward(grad);
        let dh = grad + &self.norm2.backward(&dm);
        let da = self.attn.backward(&dh);
        &dh + &self.norm1.backward(&da)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }

    fn read_params(&self, prefix: &str, f: &mut ParamReader<'_, F>) {
        self.norm1.read_params(&join(prefix, "norm1"), f);
        self.attn.read_params(&join(prefix, "attn"), f);
        self.norm2.read_params(&join(prefix, "norm2"), f);
        self.mlp.read_params(&join(prefix, "mlp"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::*;

    #[test]
    fn attention_gradients() {
        let mut rng = crate::util::rng_stream(3, 0);
        let mut attn: MultiHeadSelfAttention<f64> = MultiHeadSelfAttention::new(6, 2, &mut rng);
        check_layer(&mut attn, &random_input(&[2, 4, 6], 1), 2, 1e-5);
    }

    #[test]
    fn block_gradients() {
        let mut rng = crate::util::rng_stream(4, 0);
        let mut block: TransformerBlock<f64> = TransformerBlock::new(4, 2, 2, &mut rng);
        check_layer(&mut block, &random_input(&[2, 3, 4], 3), 4, 1e-5);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = crate::util::rng_stream(5, 0);
        let attn: MultiHeadSelfAttention<f64> = MultiHeadSelfAttention::new(4, 2, &mut rng);
        let x: Array3<f64> = random_input(&[1, 5, 12], 2).into_dimensionality().unwrap();
        let (_, w) = attn.attend(&x);
        for r in w.slice(s![0, 1, .., ..]).axis_iter(Axis(0)) {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }
}
