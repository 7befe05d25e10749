use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{as_rows, join, with_last_dim, Layer, Mode, Param, ParamReader, ParamVisitor};
use crate::scalar::Scalar;

/// Affine map over the last axis: `y = x Wᵀ + b`, `W` is `(out, in)`.
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    input: Option<Array2<F>>,
    input_shape: Vec<usize>,
}

impl<F: Scalar> Linear<F> {
    /// Uniform(±1/√in) initialisation for weight and bias.
    pub fn new(inputs: usize, outputs: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let mut draw = || F::of(rng.gen_range(-bound..bound));
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[outputs, inputs]), &mut draw);
        let b = bias.then(|| Param::new(ArrayD::from_shape_simple_fn(IxDyn(&[outputs]), &mut draw)).no_decay());
        Linear {
            weight: Param::new(w),
            bias: b,
            input: None,
            input_shape: Vec::new(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn w2(&self) -> ndarray::ArrayView2<'_, F> {
        self.weight.value.view().into_dimensionality().expect("2-d weight")
    }

    fn apply(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.w2().t());
        if let Some(b) = &self.bias {
            let b: ndarray::ArrayView1<F> = b.value.view().into_dimensionality().unwrap();
            y += &b;
        }
        y
    }
}

impl<F: Scalar> Layer<F> for Linear<F> {
    fn forward(&self, x: &ArrayD<F>, _mode: Mode) -> ArrayD<F> {
        let rows = as_rows(x);
        with_last_dim(self.apply(&rows), x.shape(), self.outputs())
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        let rows = as_rows(x);
        let y = self.apply(&rows);
        self.input = Some(rows);
        self.input_shape = x.shape().to_vec();
        with_last_dim(y, &self.input_shape, self.outputs())
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        let x = self.input.as_ref().expect("backward before forward_train");
        let g = as_rows(grad);
        let dw = g.t().dot(x);
        let mut wg: ndarray::ArrayViewMut2<F> = self.weight.grad.view_mut().into_dimensionality().unwrap();
        wg += &dw;
        if let Some(b) = &mut self.bias {
            let db: Array1<F> = g.sum_axis(Axis(0));
            let mut bg: ndarray::ArrayViewMut1<F> = b.grad.view_mut().into_dimensionality().unwrap();
            bg += &db;
        }
        let dx = g.dot(&self.w2());
        with_last_dim(dx, &self.input_shape, self.inputs())
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
