//! 1-D ResNets: 18 uses basic blocks, 50 and 101 use bottleneck blocks.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    join, BatchNorm1d, Conv1d, GlobalAvgPool1d, Layer, MaxPool1d, Mode, ParamReader, ParamVisitor,
    Relu, Sequential,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

struct ResidualBlock<F> {
    main: Sequential<F>,
    shortcut: Option<Sequential<F>>,
    act: Relu,
}

impl<F: Scalar> ResidualBlock<F> {
    fn new(kind: BlockKind, inputs: usize, width: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let outputs = width * kind.expansion();
        let main = match kind {
            BlockKind::Basic => Sequential::new()
                .push("conv1", Conv1d::new(inputs, width, 3, stride, 1, false, rng))
                .push("bn1", BatchNorm1d::new(width))
                .push("relu1", Relu::new())
                .push("conv2", Conv1d::new(width, width, 3, 1, 1, false, rng))
                .push("bn2", BatchNorm1d::new(width)),
            BlockKind::Bottleneck => Sequential::new()
                .push("conv1", Conv1d::new(inputs, width, 1, 1, 0, false, rng))
                .push("bn1", BatchNorm1d::new(width))
                .push("relu1", Relu::new())
                .push("conv2", Conv1d::new(width, width, 3, stride, 1, false, rng))
                .push("bn2", BatchNorm1d::new(width))
                .push("relu2", Relu::new())
                .push("conv3", Conv1d::new(width, outputs, 1, 1, 0, false, rng))
                .push("bn3", BatchNorm1d::new(outputs)),
        };
        let shortcut = (stride != 1 || inputs != outputs).then(|| {
            Sequential::new()
                .push("conv", Conv1d::new(inputs, outputs, 1, stride, 0, false, rng))
                .push("bn", BatchNorm1d::new(outputs))
        });
        ResidualBlock {
            main,
            shortcut,
            act: Relu::new(),
        }
    }
}

impl<F: Scalar> Layer<F> for ResidualBlock<F> {
    fn forward(&self, x: &ArrayD<F>, mode: Mode) -> ArrayD<F> {
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, mode),
            None => x.clone(),
        };
        self.act.forward(&(self.main.forward(x, mode) + skip), mode)
    }

    fn forward_train(&mut self, x: &ArrayD<F>) -> ArrayD<F> {
        let skip = match &mut self.shortcut {
            Some(s) => s.forward_train(x),
            None => x.clone(),
        };
        let sum = self.main.forward_train(x) + skip;
        self.act.forward_train(&sum)
    }

    fn backward(&mut self, grad: &ArrayD<F>) -> ArrayD<F> {
        let g = self.act.backward(grad);
        let dx = self.main.backward(&g);
        match &mut self.shortcut {
            Some(s) => dx + s.backward(&g),
            None => dx + g,
        }
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        self.main.visit_params(prefix, f);
        if let Some(s) = &mut self.shortcut {
            s.visit_params(&join(prefix, "downsample"), f);
        }
    }

    fn read_params(&self, prefix: &str, f: &mut ParamReader<'_, F>) {
        self.main.read_params(prefix, f);
        if let Some(s) = &self.shortcut {
            s.read_params(&join(prefix, "downsample"), f);
        }
    }
}

/// Builds the convolutional trunk ending in global average pooling.
/// Returns the network and its output width.
pub fn build_resnet<F: Scalar>(
    kind: BlockKind,
    blocks: [usize; 4],
    in_channels: usize,
    base_width: usize,
    rng: &mut ChaCha8Rng,
) -> (Sequential<F>, usize) {
    let mut net = Sequential::new()
        .push("conv1", Conv1d::new(in_channels, base_width, 7, 2, 3, false, rng))
        .push("bn1", BatchNorm1d::new(base_width))
        .push("relu", Relu::new())
        .push("maxpool", MaxPool1d::new(3, 2, 1));
    let mut channels = base_width;
    for (stage, &count) in blocks.iter().enumerate() {
        let width = base_width << stage;
        let mut layer = Sequential::new();
        for b in 0..count {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            layer = layer.push(b.to_string(), ResidualBlock::new(kind, channels, width, stride, rng));
            channels = width * kind.expansion();
        }
        net = net.push(format!("layer{}", stage + 1), layer);
    }
    (net.push("pool", GlobalAvgPool1d::new()), channels)
}
