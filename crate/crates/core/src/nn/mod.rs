//! Minimal layer library with explicit backward passes.
//!
//! Layers cache what their backward pass needs during [`Layer::forward_train`]
//! and accumulate parameter gradients into [`Param::grad`]. The pure
//! [`Layer::forward`] never mutates, so evaluation can share a model across
//! threads.

mod attention;
mod conv;
mod linear;
mod norm;
mod optim;

pub use attention::{MultiHeadSelfAttention, TransformerBlock};
pub use conv::{Conv1d, GlobalAvgPool1d, MaxPool1d};
pub use linear::Linear;
pub use norm::{BatchNorm1d, LayerNorm};
pub use optim::{cosine_lr, AdamW, AdamWConfig};

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A tensor owned by a layer. Non-trainable params (running statistics) are
/// saved in checkpoints but skipped by the optimizer.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub trainable: bool,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            trainable: true,
            decay: true,
        }
    }

    pub fn no_decay(mut self) -> Self {
        self.decay = false;
        self
    }

    pub fn buffer(value: ArrayD<F>) -> Self {
        Param {
            trainable: false,
            decay: false,
            ..Param::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

pub type ParamVisitor<'a, F> = dyn FnMut(&str, &mut Param<F>) + 'a;
pub type ParamReader<'a, F> = dyn FnMut(&str, &Param<F>) + 'a;

pub trait Layer<F: Scalar>: Send + Sync {
    /// Side-effect-free forward. In `Train` mode normalization uses batch
    /// statistics but running statistics are left alone.
    fn forward(&self, x: &ArrayD<F>, mode: Mode) -> ArrayD<F>;

    /// Training forward: caches activations and updates running state.
    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F>;

    /// Accumulates parameter gradients, returns the gradient w.r.t. the input
    /// of the last `forward_train`.
    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F>;

    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamVisitor<'_, F>) {}

    fn read_params(&self, _prefix: &str, _f: &mut ParamReader<'_, F>) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Total number of scalar parameters (buffers excluded).
pub fn num_params<F: Scalar>(layer: &dyn Layer<F>) -> usize {
    let mut n = 0;
    layer.read_params("", &mut |_, p| {
        if p.trainable {
            n += p.value.len();
        }
    });
    n
}

pub fn zero_grads<F: Scalar>(layer: &mut dyn Layer<F>) {
    layer.visit_params("", &mut |_, p| p.zero_grad());
}

/// Named children applied in order.
#[derive(Default)]
pub struct Sequential<F> {
    layers: Vec<(String, Box<dyn Layer<F>>)>,
}

impl<F: Scalar> Sequential<F> {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(mut self, name: impl Into<String>, layer: impl Layer<F> + 'static) -> Self {
        self.layers.push((name.into(), Box::new(layer)));
        self
    }

    pub fn push_boxed(&mut self, name: impl Into<String>, layer: Box<dyn Layer<F>>) {
        self.layers.push((name.into(), layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<F: Scalar> Layer<F> for Sequential<F> {
    fn forward(&self, x: &ArrayD<F>, mode: Mode) -> ArrayD<F> {
        let mut h = x.clone();
        for (_, l) in &self.layers {
            h = l.forward(&h, mode);
        }
        h
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        let mut h = x.clone();
        for (_, l) in &mut self.layers {
            h = l.forward_train(&h);
        }
        h
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        let mut g = grad.clone();
        for (_, l) in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        for (name, l) in &mut self.layers {
            l.visit_params(&join(prefix, name), f);
        }
    }

    fn read_params(&self, prefix: &str, f: &mut ParamReader<'_, F>) {
        for (name, l) in &self.layers {
            l.read_params(&join(prefix, name), f);
        }
    }
}

#[derive(Default)]
pub struct Relu {
    mask: Option<ArrayD<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { mask: None }
    }
}

impl<F: Scalar> Layer<F> for Relu {
    fn forward(&self, x: &ArrayD<F>, _mode: Mode) -> ArrayD<F> {
        x.mapv(|v| if v > F::zero() { v } else { F::zero() })
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        self.mask = Some(x.mapv(|v| v > F::zero()));
        self.forward(x, Mode::Train)
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        let mask = self.mask.as_ref().expect("backward before forward_train");
        let mut g = grad.clone();
        ndarray::Zip::from(&mut g).and(mask).for_each(|g, &m| {
            if !m {
                *g = F::zero();
            }
        });
        g
    }
}

/// GELU, tanh approximation.
pub struct Gelu<F> {
    input: Option<ArrayD<F>>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl<F: Scalar> Gelu<F> {
    pub fn new() -> Self {
        Gelu { input: None }
    }
}

impl<F: Scalar> Default for Gelu<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Layer<F> for Gelu<F> {
    fn forward(&self, x: &ArrayD<F>, _mode: Mode) -> ArrayD<F> {
        x.mapv(|v| F::of(gelu_parts(v.as_f64()).0))
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        self.input = Some(x.clone());
        self.forward(x, Mode::Train)
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        let x = self.input.as_ref().expect("backward before forward_train");
        let mut g = grad.clone();
        ndarray::Zip::from(&mut g).and(x).for_each(|g, &x| {
            *g *= F::of(gelu_parts(x.as_f64()).1);
        });
        g
    }
}

/// Reshapes a dynamic array to `(rows, last_dim)`.
pub(crate) fn as_rows<F: Scalar>(x: &ArrayD<F>) -> ndarray::Array2<F> {
    let last = *x.shape().last().expect("non-scalar input");
    let rows = x.len() / last.max(1);
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, last))
        .expect("contiguous reshape")
}

pub(crate) fn with_last_dim<F: Scalar>(y: ndarray::Array2<F>, like: &[usize], last: usize) -> ArrayD<F> {
    let mut shape = like.to_vec();
    *shape.last_mut().unwrap() = last;
    y.into_shape_with_order(IxDyn(&shape)).expect("contiguous reshape")
}


#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;

    #[test]
    fn relu_and_gelu_gradients() {
        let x = random_input(&[3, 5], 1);
        check_layer(&mut Relu::new(), &x, 2, 1e-6);
        check_layer(&mut Gelu::new(), &x, 3, 1e-6);
    }

    #[test]
    fn sequential_names_children() {
        let mut rng = crate::util::rng_stream(0, 0);
        let seq: Sequential<f64> = Sequential::new()
            .push("fc1", Linear::new(3, 4, true, &mut rng))
            .push("act", Relu::new())
            .push("fc2", Linear::new(4, 2, true, &mut rng));
        let mut names = Vec::new();
        seq.read_params("proj", &mut |n, _| names.push(n.to_string()));
        assert_eq!(names, vec!["proj.fc1.weight", "proj.fc1.bias", "proj.fc2.weight", "proj.fc2.bias"]);
        assert_eq!(num_params::<f64>(&seq), 3 * 4 + 4 + 4 * 2 + 2);
    }
}
