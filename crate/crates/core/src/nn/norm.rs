use super::{Param, Real, Tensor};

/// How a forward pass treats batch-norm statistics and caches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated, activations cached for backward.
    Train,
    /// Batch statistics, nothing updated or cached (gradient-free probing during training).
    Probe,
    /// Running statistics, nothing cached.
    Eval,
}

impl Mode {
    pub fn keeps_cache(self) -> bool {
        self == Mode::Train
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::constant(format!("{name}.gamma"), vec![channels], 1.0, true),
            beta: Param::constant(format!("{name}.beta"), vec![channels], 0.0, true),
            running_mean: Param::constant(format!("{name}.running_mean"), vec![channels], 0.0, false),
            running_var: Param::constant(format!("{name}.running_var"), vec![channels], 1.0, false),
            cache: None,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let [n, c, _, _] = x.shape();
        assert_eq!(c, self.gamma.len());
        let count = (n * x.plane()) as f64;
        let eps = T::lit(BN_EPS);
        let mut out = Tensor::zeros(x.shape());
        let mut x_hat = mode.keeps_cache().then(|| Tensor::zeros(x.shape()));
        let mut inv_stds = Vec::with_capacity(c);
        for ch in 0..c {
            let (mean, var) = if mode == Mode::Eval {
                (self.running_mean.value[ch], self.running_var.value[ch])
            } else {
                let mut sum = T::zero();
                for s in 0..n {
                    sum += x.channel(s, ch).iter().copied().sum();
                }
                let mean = sum / T::lit(count);
                let mut sq = T::zero();
                for s in 0..n {
                    sq += x.channel(s, ch).iter().map(|&v| (v - mean) * (v - mean)).sum();
                }
                let var = sq / T::lit(count);
                if mode == Mode::Train {
                    let m = T::lit(BN_MOMENTUM);
                    let unbiased = if count > 1.0 { var * T::lit(count / (count - 1.0)) } else { var };
                    let rm = &mut self.running_mean.value[ch];
                    *rm = (T::one() - m) * *rm + m * mean;
                    let rv = &mut self.running_var.value[ch];
                    *rv = (T::one() - m) * *rv + m * unbiased;
                }
                (mean, var)
            };
            let inv_std = T::one() / (var + eps).sqrt();
            inv_stds.push(inv_std);
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for s in 0..n {
                let src = x.channel(s, ch);
                let dst = out.channel_mut(s, ch);
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v - mean) * inv_std;
                }
                if let Some(xh) = x_hat.as_mut() {
                    xh.channel_mut(s, ch).copy_from_slice(dst);
                }
                dst.iter_mut().for_each(|d| *d = *d * g + b);
            }
        }
        self.cache = x_hat.map(|x_hat| BnCache {
            x_hat,
            inv_std: inv_stds,
        });
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("batch-norm backward without cached forward");
        let [n, c, _, _] = grad_out.shape();
        let count = T::lit((n * grad_out.plane()) as f64);
        let mut grad_in = Tensor::zeros(grad_out.shape());
        let mut d_gamma = vec![T::zero(); c];
        let mut d_beta = vec![T::zero(); c];
        for ch in 0..c {
            let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
            for s in 0..n {
                for (&g, &xh) in grad_out.channel(s, ch).iter().zip(cache.x_hat.channel(s, ch)) {
                    sum_g += g;
                    sum_gx += g * xh;
                }
            }
            d_gamma[ch] = sum_gx;
            d_beta[ch] = sum_g;
            let scale = self.gamma.value[ch] * cache.inv_std[ch] / count;
            for s in 0..n {
                let dst = grad_in.channel_mut(s, ch);
                for ((d, &g), &xh) in dst
                    .iter_mut()
                    .zip(grad_out.channel(s, ch))
                    .zip(cache.x_hat.channel(s, ch))
                {
                    *d = scale * (count * g - sum_g - xh * sum_gx);
                }
            }
        }
        for (acc, v) in self.gamma.grad_mut().iter_mut().zip(d_gamma) {
            *acc += v;
        }
        for (acc, v) in self.beta.grad_mut().iter_mut().zip(d_beta) {
            *acc += v;
        }
        grad_in
    }
}
