use super::{Param, Real, Tensor};
use rand::Rng;

/// Same-padded, stride-1 2D convolution with an odd square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    cache: Option<ConvCache<T>>,
}

#[derive(Clone, Debug)]
struct ConvCache<T> {
    input_shape: [usize; 4],
    /// Per-sample column matrices (`cin*k*k x h*w`); for 1x1 kernels the input itself.
    cols: Vec<Vec<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = (in_channels * kernel * kernel) as f64;
        let weight = Param::normal(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            (2.0 / fan_in).sqrt(),
            rng,
        );
        let bias = bias.then(|| Param::constant(format!("{name}.bias"), vec![out_channels], 0.0, true));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    pub fn forward(&mut self, x: &Tensor<T>, keep: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let p = h * w;
        let k_dim = c * self.kernel * self.kernel;
        let mut out = Tensor::zeros([n, self.out_channels, h, w]);
        let mut cols = Vec::new();
        for s in 0..n {
            let col_owned;
            let col: &[T] = if self.kernel == 1 {
                x.sample(s)
            } else {
                col_owned = im2col(x.sample(s), c, h, w, self.kernel);
                &col_owned
            };
            T::gemm(
                self.out_channels,
                k_dim,
                p,
                T::one(),
                &self.weight.value,
                (k_dim as isize, 1),
                col,
                (p as isize, 1),
                T::zero(),
                out.sample_mut(s),
                (p as isize, 1),
            );
            if keep {
                cols.push(col.to_vec());
            }
        }
        if let Some(b) = &self.bias {
            for s in 0..n {
                for (o, &bv) in b.value.iter().enumerate() {
                    out.channel_mut(s, o).iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        self.cache = keep.then_some(ConvCache {
            input_shape: x.shape(),
            cols,
        });
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when `need_input_grad`.
    pub fn backward(&mut self, grad_out: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let cache = self.cache.take().expect("conv backward without cached forward");
        let [n, c, h, w] = cache.input_shape;
        let p = h * w;
        let k_dim = c * self.kernel * self.kernel;
        assert_eq!(grad_out.shape(), [n, self.out_channels, h, w]);
        let mut grad_in = need_input_grad.then(|| Tensor::zeros(cache.input_shape));
        let mut dcol = vec![T::zero(); if need_input_grad { k_dim * p } else { 0 }];
        for s in 0..n {
            let g = grad_out.sample(s);
            // dW += g * col^T
            T::gemm(
                self.out_channels,
                p,
                k_dim,
                T::one(),
                g,
                (p as isize, 1),
                &cache.cols[s],
                (1, p as isize),
                T::one(),
                self.weight.grad_mut(),
                (k_dim as isize, 1),
            );
            if let Some(gi) = grad_in.as_mut() {
                if self.kernel == 1 {
                    T::gemm(
                        k_dim,
                        self.out_channels,
                        p,
                        T::one(),
                        &self.weight.value,
                        (1, k_dim as isize),
                        g,
                        (p as isize, 1),
                        T::zero(),
                        gi.sample_mut(s),
                        (p as isize, 1),
                    );
                } else {
                    T::gemm(
                        k_dim,
                        self.out_channels,
                        p,
                        T::one(),
                        &self.weight.value,
                        (1, k_dim as isize),
                        g,
                        (p as isize, 1),
                        T::zero(),
                        &mut dcol,
                        (p as isize, 1),
                    );
                    col2im(&dcol, gi.sample_mut(s), c, h, w, self.kernel);
                }
            }
        }
        if let Some(b) = self.bias.as_mut() {
            let gb = b.grad_mut();
            for s in 0..n {
                for (o, gbo) in gb.iter_mut().enumerate() {
                    *gbo += grad_out.channel(s, o).iter().copied().sum();
                }
            }
        }
        grad_in
    }
}

/// Unfold one sample (`c x h x w`) into `(c*k*k) x (h*w)` columns with zero padding.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let p = h * w;
    let mut col = vec![T::zero(); c * k * k * p];
    for ch in 0..c {
        let plane = &x[ch * p..(ch + 1) * p];
        for ky in 0..k {
            let dy = ky as isize - r;
            for kx in 0..k {
                let dx = kx as isize - r;
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let sx_lo = (x_lo as isize + dx) as usize;
                    dst[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&src_row[sx_lo..sx_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add columns back into one sample.
fn col2im<T: Real>(col: &[T], out: &mut [T], c: usize, h: usize, w: usize, k: usize) {
    let r = (k / 2) as isize;
    let p = h * w;
    out.iter_mut().for_each(|v| *v = T::zero());
    for ch in 0..c {
        let plane = &mut out[ch * p..(ch + 1) * p];
        for ky in 0..k {
            let dy = ky as isize - r;
            for kx in 0..k {
                let dx = kx as isize - r;
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let sx_lo = (x_lo as isize + dx) as usize;
                    let dst_row = &mut plane[sy as usize * w + sx_lo..sy as usize * w + sx_lo + (x_hi - x_lo)];
                    for (d, &s) in dst_row.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let [n, c, h, w] = x.shape();
        let k = conv.kernel as isize;
        let r = k / 2;
        let mut out = Tensor::zeros([n, conv.out_channels, h, w]);
        for s in 0..n {
            for o in 0..conv.out_channels {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]);
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (sy, sx) = (y + ky - r, xx + kx - r);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wi = ((o * c + ci) * conv.kernel + ky as usize) * conv.kernel + kx as usize;
                                    acc += conv.weight.value[wi] * x.channel(s, ci)[sy as usize * w + sx as usize];
                                }
                            }
                        }
                        out.channel_mut(s, o)[y as usize * w + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3] {
            let mut conv = Conv2d::<f64>::new("c", 3, 4, k, true, &mut rng);
            conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3, 0.0];
            let x = Tensor::from_vec([2, 3, 5, 6], (0..180).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.4).collect());
            let got = conv.forward(&x, false);
            let want = naive_conv(&x, &conv);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * h * w).map(|i| (i as f64 * 0.11).cos()).collect();
        let ax = im2col(&x, c, h, w, k);
        let mut aty = vec![0.0; x.len()];
        col2im(&y, &mut aty, c, h, w, k);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
