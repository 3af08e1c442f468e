//! Attention gates.
//!
//! [`ChannelGate`] sits on every encoder to PET-decoder skip and rescales each channel by a
//! squeeze-and-excitation style score in (0, 1). [`SpatialGate`] turns the absolute ASL
//! reconstruction residual into a per-pixel attention mask.

use rand::Rng;

use crate::nn::ops::sigmoid;
use crate::nn::{Param, Real, Tensor};

/// Channel reduction of the gate bottleneck.
pub const GATE_REDUCTION: usize = 4;

/// Trainable parameter count of a [`ChannelGate`] over `channels` channels.
pub fn channel_gate_param_count(channels: usize) -> usize {
    let hidden = (channels / GATE_REDUCTION).max(1);
    2 * channels * hidden + hidden + channels
}

#[derive(Clone, Debug)]
pub struct ChannelGate<T> {
    pub fc1_weight: Param<T>,
    pub fc1_bias: Param<T>,
    pub fc2_weight: Param<T>,
    pub fc2_bias: Param<T>,
    channels: usize,
    hidden: usize,
    cache: Option<GateCache<T>>,
}

#[derive(Clone, Debug)]
struct GateCache<T> {
    input: Tensor<T>,
    pooled: Vec<T>,
    hidden_pre: Vec<T>,
    scales: Vec<T>,
}

impl<T: Real> ChannelGate<T> {
    pub fn new<R: Rng>(name: &str, channels: usize, rng: &mut R) -> Self {
        let hidden = (channels / GATE_REDUCTION).max(1);
        Self {
            fc1_weight: Param::normal(
                format!("{name}.fc1.weight"),
                vec![hidden, channels],
                (2.0 / channels as f64).sqrt(),
                rng,
            ),
            fc1_bias: Param::constant(format!("{name}.fc1.bias"), vec![hidden], 0.0, true),
            fc2_weight: Param::normal(
                format!("{name}.fc2.weight"),
                vec![channels, hidden],
                (1.0 / hidden as f64).sqrt(),
                rng,
            ),
            fc2_bias: Param::constant(format!("{name}.fc2.bias"), vec![channels], 0.0, true),
            channels,
            hidden,
            cache: None,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.fc1_weight, &self.fc1_bias, &self.fc2_weight, &self.fc2_bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }

    /// Per-sample channel scales, `n x channels`.
    pub fn scales(&self, x: &Tensor<T>) -> Vec<T> {
        self.squeeze_excite(x).2
    }

    fn squeeze_excite(&self, x: &Tensor<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
        let [n, c, _, _] = x.shape();
        assert_eq!(c, self.channels, "gate channel count");
        let inv_p = T::one() / T::lit(x.plane() as f64);
        let (h, w1, w2) = (self.hidden, &self.fc1_weight.value, &self.fc2_weight.value);
        let mut pooled = Vec::with_capacity(n * c);
        let mut hidden_pre = Vec::with_capacity(n * h);
        let mut scales = Vec::with_capacity(n * c);
        for s in 0..n {
            let z: Vec<T> = (0..c)
                .map(|ch| x.channel(s, ch).iter().copied().sum::<T>() * inv_p)
                .collect();
            let a1: Vec<T> = (0..h)
                .map(|j| {
                    self.fc1_bias.value[j]
                        + (0..c).map(|ch| w1[j * c + ch] * z[ch]).sum::<T>()
                })
                .collect();
            for ch in 0..c {
                let a2 = self.fc2_bias.value[ch]
                    + (0..h)
                        .map(|j| w2[ch * h + j] * a1[j].max(T::zero()))
                        .sum::<T>();
                scales.push(sigmoid(a2));
            }
            pooled.extend(z);
            hidden_pre.extend(a1);
        }
        (pooled, hidden_pre, scales)
    }

    pub fn forward(&mut self, x: &Tensor<T>, keep: bool) -> Tensor<T> {
        let (pooled, hidden_pre, scales) = self.squeeze_excite(x);
        let [n, c, _, _] = x.shape();
        let mut out = x.clone();
        for s in 0..n {
            for ch in 0..c {
                let sc = scales[s * c + ch];
                out.channel_mut(s, ch).iter_mut().for_each(|v| *v *= sc);
            }
        }
        self.cache = keep.then(|| GateCache {
            input: x.clone(),
            pooled,
            hidden_pre,
            scales,
        });
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("gate backward without cached forward");
        let x = &cache.input;
        let [n, c, _, _] = x.shape();
        let h = self.hidden;
        let inv_p = T::one() / T::lit(x.plane() as f64);
        let mut grad_in = Tensor::zeros(x.shape());
        let mut d_w1 = vec![T::zero(); h * c];
        let mut d_b1 = vec![T::zero(); h];
        let mut d_w2 = vec![T::zero(); c * h];
        let mut d_b2 = vec![T::zero(); c];
        for s in 0..n {
            let scales = &cache.scales[s * c..(s + 1) * c];
            let z = &cache.pooled[s * c..(s + 1) * c];
            let a1 = &cache.hidden_pre[s * h..(s + 1) * h];
            let g_a2: Vec<T> = (0..c)
                .map(|ch| {
                    let g_s: T = grad_out
                        .channel(s, ch)
                        .iter()
                        .zip(x.channel(s, ch))
                        .map(|(&g, &v)| g * v)
                        .sum();
                    g_s * scales[ch] * (T::one() - scales[ch])
                })
                .collect();
            let mut g_a1 = vec![T::zero(); h];
            for ch in 0..c {
                d_b2[ch] += g_a2[ch];
                for j in 0..h {
                    d_w2[ch * h + j] += g_a2[ch] * a1[j].max(T::zero());
                    g_a1[j] += self.fc2_weight.value[ch * h + j] * g_a2[ch];
                }
            }
            for j in 0..h {
                if a1[j] <= T::zero() {
                    g_a1[j] = T::zero();
                }
                d_b1[j] += g_a1[j];
                for ch in 0..c {
                    d_w1[j * c + ch] += g_a1[j] * z[ch];
                }
            }
            for ch in 0..c {
                let g_z: T = (0..h).map(|j| self.fc1_weight.value[j * c + ch] * g_a1[j]).sum::<T>() * inv_p;
                let sc = scales[ch];
                let dst = grad_in.channel_mut(s, ch);
                for (d, &g) in dst.iter_mut().zip(grad_out.channel(s, ch)) {
                    *d = g * sc + g_z;
                }
            }
        }
        accumulate(&mut self.fc1_weight, &d_w1);
        accumulate(&mut self.fc1_bias, &d_b1);
        accumulate(&mut self.fc2_weight, &d_w2);
        accumulate(&mut self.fc2_bias, &d_b2);
        grad_in
    }
}

fn accumulate<T: Real>(p: &mut Param<T>, d: &[T]) {
    for (acc, &v) in p.grad_mut().iter_mut().zip(d) {
        *acc += v;
    }
}

/// Initial slope of the residual-to-attention map; positive so that larger residuals
/// receive more attention.
pub const SPATIAL_GATE_INIT_WEIGHT: f64 = 10.0;

/// `mask = sigmoid(w * |asl_in - asl_recon| + b)`, rescaled per slice so its maximum is 1
/// whenever the residual is nonzero.
#[derive(Clone, Debug)]
pub struct SpatialGate<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<SpatialCache<T>>,
}

#[derive(Clone, Debug)]
struct SpatialCache<T> {
    residual: Tensor<T>,
    raw: Tensor<T>,
    /// Per slice: index of the maximum raw value when rescaled, else `None`.
    argmax: Vec<Option<usize>>,
}

impl<T: Real> SpatialGate<T> {
    pub fn new(name: &str) -> Self {
        Self {
            weight: Param::constant(format!("{name}.weight"), vec![1, 1, 1, 1], SPATIAL_GATE_INIT_WEIGHT, true),
            bias: Param::constant(format!("{name}.bias"), vec![1], 0.0, true),
            cache: None,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn forward(&mut self, asl_in: &Tensor<T>, asl_recon: &Tensor<T>, keep: bool) -> Tensor<T> {
        assert_eq!(asl_in.shape(), asl_recon.shape(), "spatial gate input shapes");
        assert_eq!(asl_in.channels(), 1, "spatial gate expects single-channel slices");
        let (w, b) = (self.weight.value[0], self.bias.value[0]);
        let diff = asl_in.zip_map(asl_recon, |a, r| a - r);
        let raw = diff.map(|d| sigmoid(w * d.abs() + b));
        let mut mask = raw.clone();
        let mut argmax = Vec::with_capacity(asl_in.batch());
        for s in 0..asl_in.batch() {
            let nonzero = diff.channel(s, 0).iter().any(|&d| d != T::zero());
            if !nonzero {
                argmax.push(None);
                continue;
            }
            let plane = raw.channel(s, 0);
            let (idx, &max) = plane
                .iter()
                .enumerate()
                .fold((0, &plane[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
            mask.channel_mut(s, 0).iter_mut().for_each(|v| *v /= max);
            argmax.push(Some(idx));
        }
        self.cache = keep.then(|| SpatialCache {
            residual: diff,
            raw,
            argmax,
        });
        mask
    }

    /// Gradients with respect to `asl_in` and `asl_recon`; parameter gradients accumulate.
    pub fn backward(&mut self, grad_mask: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let cache = self.cache.take().expect("spatial gate backward without cached forward");
        let w = self.weight.value[0];
        let mut g_in = Tensor::zeros(grad_mask.shape());
        let (mut d_w, mut d_b) = (T::zero(), T::zero());
        for s in 0..grad_mask.batch() {
            let raw = cache.raw.channel(s, 0);
            let gm = grad_mask.channel(s, 0);
            // gradient with respect to the raw sigmoid output
            let g_raw: Vec<T> = match cache.argmax[s] {
                None => gm.to_vec(),
                Some(k) => {
                    let max = raw[k];
                    let mut g: Vec<T> = gm.iter().map(|&v| v / max).collect();
                    let through_max: T = gm.iter().zip(raw).map(|(&v, &r)| v * r).sum::<T>() / (max * max);
                    g[k] -= through_max;
                    g
                }
            };
            let residual = cache.residual.channel(s, 0);
            let dst = g_in.channel_mut(s, 0);
            for i in 0..raw.len() {
                let g_pre = g_raw[i] * raw[i] * (T::one() - raw[i]);
                let r = residual[i];
                let sign = if r > T::zero() {
                    T::one()
                } else if r < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                d_b += g_pre;
                d_w += g_pre * r.abs();
                dst[i] = g_pre * w * sign;
            }
        }
        let g_recon = g_in.map(|v| -v);
        self.weight.grad_mut()[0] += d_w;
        self.bias.grad_mut()[0] += d_b;
        (g_in, g_recon)
    }
}
