use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{join, Layer, Mode, Param, ParamReader, ParamVisitor};
use crate::scalar::Scalar;

fn as3<F: Scalar>(x: &ArrayD<F>) -> Array3<F> {
    x.as_standard_layout()
        .into_owned()
        .into_dimensionality()
        .expect("expected (batch, channels, time)")
}

/// 1-D convolution over `(batch, channels, time)` via im2col + GEMM.
pub struct Conv1d<F> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub stride: usize,
    pub padding: usize,
    cols: Option<Array2<F>>,
    input_shape: (usize, usize, usize),
}

impl<F: Scalar> Conv1d<F> {
    /// Kaiming-normal (fan-out, ReLU gain) initialisation, as for ResNets.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (out_channels * kernel) as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[out_channels, in_channels, kernel]), || {
            F::of(normal.sample(rng))
        });
        Conv1d {
            weight: Param::new(w),
            bias: bias.then(|| Param::new(ArrayD::zeros(IxDyn(&[out_channels]))).no_decay()),
            stride: stride.max(1),
            padding,
            cols: None,
            input_shape: (0, 0, 0),
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1], s[2])
    }

    pub fn output_len(&self, t: usize) -> usize {
        let k = self.dims().2;
        (t + 2 * self.padding).saturating_sub(k) / self.stride + 1
    }

    fn im2col(&self, x: &Array3<F>) -> Array2<F> {
        let (b, c, t) = x.dim();
        let (_, _, k) = self.dims();
        let t_out = self.output_len(t);
        let mut cols = Array2::<F>::zeros((c * k, b * t_out));
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().unwrap();
        let width = b * t_out;
        for ci in 0..c {
            for ki in 0..k {
                let row = &mut cs[(ci * k + ki) * width..(ci * k + ki + 1) * width];
                for bi in 0..b {
                    let src = &xs[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                    let dst = &mut row[bi * t_out..(bi + 1) * t_out];
                    for (to, d) in dst.iter_mut().enumerate() {
                        let pos = (to * self.stride + ki) as isize - self.padding as isize;
                        if pos >= 0 && (pos as usize) < t {
                            *d = src[pos as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn weight2(&self) -> ndarray::ArrayView2<'_, F> {
        let (o, c, k) = self.dims();
        self.weight.value.view().into_shape_with_order((o, c * k)).unwrap()
    }

    fn from_cols(&self, cols: &Array2<F>, b: usize, t_out: usize) -> ArrayD<F> {
        let (o, _, _) = self.dims();
        let y2 = self.weight2().dot(cols); // (o, b*t_out)
        let mut y = y2
            .into_shape_with_order((o, b, t_out))
            .unwrap()
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned();
        if let Some(bias) = &self.bias {
            for (oi, mut ch) in y.axis_iter_mut(Axis(1)).enumerate() {
                let v = bias.value[[oi]];
                ch.mapv_inplace(|x| x + v);
            }
        }
        y.into_dyn()
    }
}

impl<F: Scalar> Layer<F> for Conv1d<F> {
    fn forward(&self, x: &ArrayD<F>, _mode: Mode) -> ArrayD<F> {
        let x = as3(x);
        let (b, _, t) = x.dim();
        let cols = self.im2col(&x);
        self.from_cols(&cols, b, self.output_len(t))
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        let x = as3(x);
        let (b, _, t) = x.dim();
        self.input_shape = x.dim();
        let cols = self.im2col(&x);
        let y = self.from_cols(&cols, b, self.output_len(t));
        self.cols = Some(cols);
        y
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        let cols = self.cols.as_ref().expect("backward before forward_train");
        let (b, c, t) = self.input_shape;
        let (o, _, k) = self.dims();
        let g = as3(grad);
        let t_out = g.dim().2;
        let g2 = g
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, b * t_out))
            .unwrap();
        let dw = g2.dot(&cols.t());
        let mut wg = self.weight.grad.view_mut().into_shape_with_order((o, c * k)).unwrap();
        wg += &dw;
        if let Some(bias) = &mut self.bias {
            let db = g2.sum_axis(Axis(1));
            let mut bg: ndarray::ArrayViewMut1<F> = bias.grad.view_mut().into_dimensionality().unwrap();
            bg += &db;
        }
        let dcols = self.weight2().t().dot(&g2); // (c*k, b*t_out)
        let mut dx = Array3::<F>::zeros((b, c, t));
        let ds = dcols.as_slice().unwrap();
        let dxs = dx.as_slice_mut().unwrap();
        let width = b * t_out;
        for ci in 0..c {
            for ki in 0..k {
                let row = &ds[(ci * k + ki) * width..(ci * k + ki + 1) * width];
                for bi in 0..b {
                    let dst = &mut dxs[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                    for (to, &v) in row[bi * t_out..(bi + 1) * t_out].iter().enumerate() {
                        let pos = (to * self.stride + ki) as isize - self.padding as isize;
                        if pos >= 0 && (pos as usize) < t {
                            dst[pos as usize] += v;
                        }
                    }
                }
            }
        }
        dx.into_dyn()
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn read_params(&self, prefix: &str, f: &mut ParamReader<'_, F>) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Max pooling with implicit `-inf` padding.
pub struct MaxPool1d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    argmax: Option<Array3<usize>>,
    input_shape: (usize, usize, usize),
}

impl MaxPool1d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool1d {
            kernel,
            stride,
            padding,
            argmax: None,
            input_shape: (0, 0, 0),
        }
    }

    fn pool<F: Scalar>(&self, x: &Array3<F>) -> (Array3<F>, Array3<usize>) {
        let (b, c, t) = x.dim();
        let t_out = (t + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        let mut y = Array3::from_elem((b, c, t_out), F::neg_infinity());
        let mut arg = Array3::zeros((b, c, t_out));
        for bi in 0..b {
            for ci in 0..c {
                for to in 0..t_out {
                    let start = (to * self.stride) as isize - self.padding as isize;
                    for k in 0..self.kernel {
                        let pos = start + k as isize;
                        if pos >= 0 && (pos as usize) < t {
                            let v = x[[bi, ci, pos as usize]];
                            if v > y[[bi, ci, to]] {
                                y[[bi, ci, to]] = v;
                                arg[[bi, ci, to]] = pos as usize;
                            }
                        }
                    }
                }
            }
        }
        (y, arg)
    }
}

impl<F: Scalar> Layer<F> for MaxPool1d {
    fn forward(&self, x: &ArrayD<F>, _mode: Mode) -> ArrayD<F> {
        self.pool(&as3(x)).0.into_dyn()
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        let x = as3(x);
        self.input_shape = x.dim();
        let (y, arg) = self.pool(&x);
        self.argmax = Some(arg);
        y.into_dyn()
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        let arg = self.argmax.as_ref().expect("backward before forward_train");
        let g = as3(grad);
        let mut dx = Array3::<F>::zeros(self.input_shape);
        for ((bi, ci, to), &v) in g.indexed_iter() {
            dx[[bi, ci, arg[[bi, ci, to]]]] += v;
        }
        dx.into_dyn()
    }
}

/// Mean over time: `(batch, channels, time)` → `(batch, channels)`.
#[derive(Default)]
pub struct GlobalAvgPool1d {
    time: usize,
}

impl GlobalAvgPool1d {
    pub fn new() -> Self {
        GlobalAvgPool1d { time: 0 }
    }
}

impl<F: Scalar> Layer<F> for GlobalAvgPool1d {
    fn forward(&self, x: &ArrayD<F>, _mode: Mode) -> ArrayD<F> {
        x.mean_axis(Axis(2)).expect("non-empty time axis")
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        self.time = x.shape()[2];
        self.forward(x, Mode::Train)
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        let scale = F::one() / F::of_usize(self.time);
        let g = grad.mapv(|v| v * scale).insert_axis(Axis(2));
        let mut shape = g.shape().to_vec();
        shape[2] = self.time;
        g.broadcast(IxDyn(&shape)).unwrap().to_owned()
    }
}
