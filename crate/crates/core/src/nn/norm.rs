use ndarray::{Array1, Array3, ArrayD, Axis, IxDyn};

use super::{as_rows, join, Layer, Mode, Param, ParamReader, ParamVisitor};
use crate::scalar::Scalar;

const BN_MOMENTUM: f64 = 0.1;
const EPS: f64 = 1e-5;

/// Batch normalisation over `(batch, channels, time)` or `(batch, channels)`.
/// Running statistics use the unbiased batch variance.
pub struct BatchNorm1d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    cache: Option<BnCache<F>>,
}

struct BnCache<F> {
    xhat: Array3<F>,
    inv_std: Array1<F>,
    was_2d: bool,
}

fn to3<F: Scalar>(x: &ArrayD<F>) -> (Array3<F>, bool) {
    match x.ndim() {
        2 => (
            x.view().insert_axis(Axis(2)).into_dimensionality().unwrap().to_owned(),
            true,
        ),
        3 => (
            x.as_standard_layout().into_owned().into_dimensionality().unwrap(),
            false,
        ),
        n => panic!("batch norm expects 2-d or 3-d input, got {n}-d"),
    }
}

fn back_to<F: Scalar>(y: Array3<F>, was_2d: bool) -> ArrayD<F> {
    if was_2d {
        y.index_axis_move(Axis(2), 0).into_dyn()
    } else {
        y.into_dyn()
    }
}

impl<F: Scalar> BatchNorm1d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm1d {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))).no_decay(),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))).no_decay(),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::ones(IxDyn(&[channels]))),
            cache: None,
        }
    }

    fn batch_stats(x: &Array3<F>) -> (Array1<F>, Array1<F>) {
        let n = F::of_usize(x.len() / x.dim().1);
        let mean = x.sum_axis(Axis(2)).sum_axis(Axis(0)) / n;
        let mut var = Array1::zeros(x.dim().1);
        for ((_, c, _), &v) in x.indexed_iter() {
            let d = v - mean[c];
            var[c] += d * d;
        }
        (mean, var / n)
    }

    fn normalise(&self, x: &Array3<F>, mean: &Array1<F>, var: &Array1<F>) -> (Array3<F>, Array3<F>, Array1<F>) {
        let eps = F::of(EPS);
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let mut xhat = x.clone();
        for ((_, c, _), v) in xhat.indexed_iter_mut() {
            *v = (*v - mean[c]) * inv_std[c];
        }
        let mut y = xhat.clone();
        for ((_, c, _), v) in y.indexed_iter_mut() {
            *v = *v * self.gamma.value[[c]] + self.beta.value[[c]];
        }
        (y, xhat, inv_std)
    }

    fn running(&self) -> (Array1<F>, Array1<F>) {
        let m = self.running_mean.value.view().into_dimensionality().unwrap().to_owned();
        let v = self.running_var.value.view().into_dimensionality().unwrap().to_owned();
        (m, v)
    }
}

impl<F: Scalar> Layer<F> for BatchNorm1d<F> {
    fn forward(&self, x: &ArrayD<F>, mode: Mode) -> ArrayD<F> {
        let (x3, was_2d) = to3(x);
        let (mean, var) = match mode {
            Mode::Train => Self::batch_stats(&x3),
            Mode::Eval => self.running(),
        };
        back_to(self.normalise(&x3, &mean, &var).0, was_2d)
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        let (x3, was_2d) = to3(x);
        let (mean, var) = Self::batch_stats(&x3);
        let (y, xhat, inv_std) = self.normalise(&x3, &mean, &var);
        let n = x3.len() / x3.dim().1;
        let unbias = if n > 1 {
            F::of_usize(n) / F::of_usize(n - 1)
        } else {
            F::one()
        };
        let m = F::of(BN_MOMENTUM);
        ndarray::Zip::from(&mut self.running_mean.value)
            .and(&mean.view().into_dyn())
            .for_each(|r, &b| *r = (F::one() - m) * *r + m * b);
        ndarray::Zip::from(&mut self.running_var.value)
            .and(&var.view().into_dyn())
            .for_each(|r, &b| *r = (F::one() - m) * *r + m * b * unbias);
        self.cache = Some(BnCache { xhat, inv_std, was_2d });
        back_to(y, was_2d)
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        let cache = self.cache.as_ref().expect("backward before forward_train");
        let (g, _) = to3(grad);
        let channels = g.dim().1;
        let n = F::of_usize(g.len() / channels);
        let mut sum_g = Array1::<F>::zeros(channels);
        let mut sum_gx = Array1::<F>::zeros(channels);
        for ((b, c, t), &v) in g.indexed_iter() {
            sum_g[c] += v;
            sum_gx[c] += v * cache.xhat[[b, c, t]];
        }
        for c in 0..channels {
            self.gamma.grad[[c]] += sum_gx[c];
            self.beta.grad[[c]] += sum_g[c];
        }
        let mut dx = g.clone();
        for ((b, c, t), v) in dx.indexed_iter_mut() {
            let gamma = self.gamma.value[[c]];
            *v = gamma * cache.inv_std[c] / n
                * (n * *v - sum_g[c] - cache.xhat[[b, c, t]] * sum_gx[c]);
        }
        back_to(dx, cache.was_2d)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }

    fn read_params(&self, prefix: &str, f: &mut ParamReader<'_, F>) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
}

/// Layer normalisation over the last axis.
pub struct LayerNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    cache: Option<(ndarray::Array2<F>, Array1<F>, Vec<usize>)>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(ArrayD::ones(IxDyn(&[dim]))).no_decay(),
            beta: Param::new(ArrayD::zeros(IxDyn(&[dim]))).no_decay(),
            cache: None,
        }
    }

    fn run(&self, x: &ArrayD<F>) -> (ArrayD<F>, ndarray::Array2<F>, Array1<F>) {
        let rows = as_rows(x);
        let d = F::of_usize(rows.ncols());
        let eps = F::of(EPS);
        let mut xhat = rows.clone();
        let mut inv = Array1::zeros(rows.nrows());
        for (r, mut row) in xhat.axis_iter_mut(Axis(0)).enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / d;
            let is = F::one() / (var + eps).sqrt();
            inv[r] = is;
            row.mapv_inplace(|v| (v - mean) * is);
        }
        let g: ndarray::ArrayView1<F> = self.gamma.value.view().into_dimensionality().unwrap();
        let b: ndarray::ArrayView1<F> = self.beta.value.view().into_dimensionality().unwrap();
        let y = &xhat * &g + &b;
        (y.into_shape_with_order(IxDyn(x.shape())).unwrap(), xhat, inv)
    }
}

impl<F: Scalar> Layer<F> for LayerNorm<F> {
    fn forward(&self, x: &ArrayD<F>, _mode: Mode) -> ArrayD<F> {
        self.run(x).0
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        let (y, xhat, inv) = self.run(x);
        self.cache = Some((xhat, inv, x.shape().to_vec()));
        y
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        let (xhat, inv, shape) = self.cache.as_ref().expect("backward before forward_train");
        let g = as_rows(grad);
        let d = F::of_usize(g.ncols());
        {
            let mut gg: ndarray::ArrayViewMut1<F> = self.gamma.grad.view_mut().into_dimensionality().unwrap();
            gg += &(&g * xhat).sum_axis(Axis(0));
            let mut bg: ndarray::ArrayViewMut1<F> = self.beta.grad.view_mut().into_dimensionality().unwrap();
            bg += &g.sum_axis(Axis(0));
        }
        let gamma: ndarray::ArrayView1<F> = self.gamma.value.view().into_dimensionality().unwrap();
        let dxhat = &g * &gamma;
        let mut dx = dxhat.clone();
        for (r, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
            let dh = dxhat.row(r);
            let xh = xhat.row(r);
            let s1 = dh.sum();
            let s2 = (&dh * &xh).sum();
            for (j, v) in row.iter_mut().enumerate() {
                *v = inv[r] / d * (d * dh[j] - s1 - xh[j] * s2);
            }
        }
        dx.into_shape_with_order(IxDyn(shape)).unwrap()
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
    }

    fn read_params(&self, prefix: &str, f: &mut ParamReader<'_, F>) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::*;
    use rand::Rng;

    fn randomise<F: Scalar>(layer: &mut dyn Layer<F>, seed: u64) {
        let mut rng = crate::util::rng_stream(seed, 1);
        layer.visit_params("", &mut |_, p| {
            if p.trainable {
                p.value.mapv_inplace(|_| F::of(rng.gen_range(0.5..1.5)));
            }
        });
    }

    #[test]
    fn batchnorm_gradients() {
        let mut bn: BatchNorm1d<f64> = BatchNorm1d::new(3);
        randomise(&mut bn, 1);
        check_layer(&mut bn, &random_input(&[4, 3, 5], 2), 3, 1e-5);
        let mut bn: BatchNorm1d<f64> = BatchNorm1d::new(4);
        randomise(&mut bn, 2);
        check_layer(&mut bn, &random_input(&[6, 4], 4), 5, 1e-5);
    }

    #[test]
    fn batchnorm_running_stats() {
        let mut bn: BatchNorm1d<f64> = BatchNorm1d::new(1);
        let x = ArrayD::from_shape_vec(IxDyn(&[2, 1, 2]), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let _ = bn.forward_train(&x);
        // mean 4, unbiased var 20/3
        assert!((bn.running_mean.value[[0]] - 0.4).abs() < 1e-12);
        assert!((bn.running_var.value[[0]] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
        let y = bn.forward(&x, Mode::Eval);
        assert!((y[[0, 0, 0]] - (1.0 - 0.4) / (bn.running_var.value[[0]] + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn layernorm_gradients() {
        let mut ln: LayerNorm<f64> = LayerNorm::new(6);
        randomise(&mut ln, 3);
        check_layer(&mut ln, &random_input(&[2, 3, 6], 6), 7, 1e-5);
    }
}
