//! Parameter-free layers: activations, pooling and upsampling.

use super::{Real, Tensor};

pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[derive(Clone, Debug, Default)]
pub struct Relu<T> {
    mask: Option<Vec<bool>>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Real> Relu<T> {
    pub fn forward(&mut self, x: &Tensor<T>, keep: bool) -> Tensor<T> {
        let out = x.map(|v| v.max(T::zero()));
        self.mask = keep.then(|| x.data().iter().map(|&v| v > T::zero()).collect());
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let mask = self.mask.take().expect("relu backward without cached forward");
        let mut g = grad_out.clone();
        for (v, &m) in g.data_mut().iter_mut().zip(&mask) {
            if !m {
                *v = T::zero();
            }
        }
        g
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sigmoid<T> {
    out: Option<Tensor<T>>,
}

impl<T: Real> Sigmoid<T> {
    pub fn forward(&mut self, x: &Tensor<T>, keep: bool) -> Tensor<T> {
        let out = x.map(sigmoid);
        self.out = keep.then(|| out.clone());
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let out = self.out.take().expect("sigmoid backward without cached forward");
        grad_out.zip_map(&out, |g, s| g * s * (T::one() - s))
    }
}

/// 2x2 max pooling with stride 2. Ties resolve to the first element in row-major order.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2<T> {
    cache: Option<([usize; 4], Vec<usize>)>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Real> MaxPool2<T> {
    pub fn forward(&mut self, x: &Tensor<T>, keep: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "max-pool needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = Vec::with_capacity(if keep { out.len() } else { 0 });
        for s in 0..n {
            for ch in 0..c {
                let src = x.channel(s, ch);
                let dst = out.channel_mut(s, ch);
                for y in 0..oh {
                    for xx in 0..ow {
                        let base = 2 * y * w + 2 * xx;
                        let mut best = base;
                        for idx in [base + 1, base + w, base + w + 1] {
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                        dst[y * ow + xx] = src[best];
                        if keep {
                            argmax.push(best);
                        }
                    }
                }
            }
        }
        self.cache = keep.then_some((x.shape(), argmax));
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let (shape, argmax) = self.cache.take().expect("max-pool backward without cached forward");
        let [n, c, _, _] = shape;
        let mut g = Tensor::zeros(shape);
        let op = grad_out.plane();
        for s in 0..n {
            for ch in 0..c {
                let src = grad_out.channel(s, ch);
                let idx = &argmax[(s * c + ch) * op..(s * c + ch + 1) * op];
                let dst = g.channel_mut(s, ch);
                for (&i, &v) in idx.iter().zip(src) {
                    dst[i] += v;
                }
            }
        }
        g
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for s in 0..n {
        for ch in 0..c {
            let src = x.channel(s, ch);
            let dst = out.channel_mut(s, ch);
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sum each 2x2 block.
pub fn upsample2_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = grad_out.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut g = Tensor::zeros([n, c, h, w]);
    for s in 0..n {
        for ch in 0..c {
            let src = grad_out.channel(s, ch);
            let dst = g.channel_mut(s, ch);
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 4], vec![1.0, 5.0, 0.0, 0.0, 2.0, 3.0, 0.0, 7.0]);
        let mut pool = MaxPool2::default();
        let y = pool.forward(&x, true);
        assert_eq!(y.data(), &[5.0, 7.0]);
        let g = pool.backward(&Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]));
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::<f64>::from_vec([1, 2, 2, 3], (0..12).map(|v| v as f64 * 0.3 - 1.0).collect());
        let y = Tensor::<f64>::from_vec([1, 2, 4, 6], (0..48).map(|v| (v as f64).cos()).collect());
        let lhs: f64 = upsample2(&x).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(upsample2_backward(&y).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
