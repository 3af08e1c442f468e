use rand::Rng;

use crate::nn::ops::{self, Relu, Sigmoid};
use crate::nn::{BatchNorm2d, Conv2d, Mode, Param, Real, Tensor};

#[derive(Clone, Debug)]
struct DenseLayer<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu<T>,
}

/// Densely connected conv-BN-ReLU stack followed by a 1x1 transition conv.
///
/// Layer `i` sees the block input concatenated with the outputs of layers `0..i`.
#[derive(Clone, Debug)]
pub struct DenseBlock<T> {
    layers: Vec<DenseLayer<T>>,
    transition: Conv2d<T>,
    in_channels: usize,
    growth: usize,
}

impl<T: Real> DenseBlock<T> {
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        n_layers: usize,
        growth: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| DenseLayer {
                conv: Conv2d::new(
                    &format!("{name}.layer{i}.conv"),
                    in_channels + i * growth,
                    growth,
                    3,
                    false,
                    rng,
                ),
                bn: BatchNorm2d::new(&format!("{name}.layer{i}.bn"), growth),
                relu: Relu::default(),
            })
            .collect();
        let transition = Conv2d::new(
            &format!("{name}.transition"),
            in_channels + n_layers * growth,
            out_channels,
            1,
            true,
            rng,
        );
        Self {
            layers,
            transition,
            in_channels,
            growth,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.conv.params());
            v.extend(l.bn.params());
        }
        v.extend(self.transition.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.extend(l.conv.params_mut());
            v.extend(l.bn.params_mut());
        }
        v.extend(self.transition.params_mut());
        v
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let keep = mode.keeps_cache();
        let mut features = vec![x.clone()];
        for layer in &mut self.layers {
            let refs: Vec<&Tensor<T>> = features.iter().collect();
            let input = Tensor::concat_channels(&refs);
            let y = layer.conv.forward(&input, keep);
            let y = layer.bn.forward(&y, mode);
            let y = layer.relu.forward(&y, keep);
            features.push(y);
        }
        let refs: Vec<&Tensor<T>> = features.iter().collect();
        self.transition.forward(&Tensor::concat_channels(&refs), keep)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let n = self.layers.len();
        let mut counts = vec![self.in_channels];
        counts.extend(std::iter::repeat(self.growth).take(n));
        let g_cat = self
            .transition
            .backward(grad_out, true)
            .expect("transition input grad");
        let mut grads = g_cat.split_channels(&counts);
        for i in (0..n).rev() {
            let g_y = grads.pop().expect("feature gradient");
            let layer = &mut self.layers[i];
            let g = layer.relu.backward(&g_y);
            let g = layer.bn.backward(&g);
            let need = i > 0 || need_input_grad;
            if let Some(g_in) = layer.conv.backward(&g, need) {
                for (acc, part) in grads.iter_mut().zip(g_in.split_channels(&counts[..=i])) {
                    acc.add_assign(&part);
                }
            }
        }
        need_input_grad.then(|| grads.pop().expect("block input gradient"))
    }
}

/// Nearest-neighbour upsampling followed by a 3x3 conv and ReLU.
#[derive(Clone, Debug)]
pub struct UpConv<T> {
    conv: Conv2d<T>,
    relu: Relu<T>,
}

impl<T: Real> UpConv<T> {
    pub fn new<R: Rng>(name: &str, in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), in_channels, out_channels, 3, true, rng),
            relu: Relu::default(),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.conv.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.conv.params_mut()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let keep = mode.keeps_cache();
        let y = self.conv.forward(&ops::upsample2(x), keep);
        self.relu.forward(&y, keep)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let g = self.relu.backward(grad_out);
        let g = self.conv.backward(&g, true).expect("upconv input grad");
        ops::upsample2_backward(&g)
    }
}

/// 1x1 conv to a single channel followed by a sigmoid.
#[derive(Clone, Debug)]
pub struct Head<T> {
    conv: Conv2d<T>,
    sigmoid: Sigmoid<T>,
}

impl<T: Real> Head<T> {
    pub fn new<R: Rng>(name: &str, in_channels: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), in_channels, 1, 1, true, rng),
            sigmoid: Sigmoid::default(),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.conv.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.conv.params_mut()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let keep = mode.keeps_cache();
        let y = self.conv.forward(x, keep);
        self.sigmoid.forward(&y, keep)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let g = self.sigmoid.backward(grad_out);
        self.conv.backward(&g, true).expect("head input grad")
    }
}
