//! Image similarity metrics and the SSIM-based training losses.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) applied as a same-size separable filter
//! with reflected borders; the score of a slice is the mean of its local SSIM map. Every
//! `(sample, channel)` plane of a tensor is one slice.

use thiserror::Error;

use crate::nn::{Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 4], [usize; 4]),
    #[error("empty input")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalised 1D Gaussian taps; the 2D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// Index into `0..n` after mirror reflection without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Sparse 1D filtering operator with reflected borders, stored as rows of `(source, weight)`.
struct Filter1d<T> {
    rows: Vec<Vec<(usize, T)>>,
}

impl<T: Real> Filter1d<T> {
    fn new(n: usize, taps: &[f64]) -> Self {
        let r = (taps.len() / 2) as isize;
        let rows = (0..n as isize)
            .map(|i| {
                let mut row: Vec<(usize, T)> = Vec::with_capacity(taps.len());
                for (k, &w) in taps.iter().enumerate() {
                    let j = reflect_index(i + k as isize - r, n);
                    match row.iter_mut().find(|(idx, _)| *idx == j) {
                        Some(e) => e.1 += T::lit(w),
                        None => row.push((j, T::lit(w))),
                    }
                }
                row
            })
            .collect();
        Self { rows }
    }
}

/// Separable Gaussian blur of one `h x w` plane and its adjoint.
struct Blur<T> {
    h: usize,
    w: usize,
    rows: Filter1d<T>,
    cols: Filter1d<T>,
}

impl<T: Real> Blur<T> {
    fn new(h: usize, w: usize, taps: &[f64]) -> Self {
        Self {
            h,
            w,
            rows: Filter1d::new(w, taps),
            cols: Filter1d::new(h, taps),
        }
    }

    fn apply(&self, x: &[T]) -> Vec<T> {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![T::zero(); h * w];
        for y in 0..h {
            let src = &x[y * w..(y + 1) * w];
            for (xx, row) in self.rows.rows.iter().enumerate() {
                tmp[y * w + xx] = row.iter().map(|&(j, wt)| wt * src[j]).sum();
            }
        }
        let mut out = vec![T::zero(); h * w];
        for (y, col) in self.cols.rows.iter().enumerate() {
            for &(j, wt) in col {
                let src = &tmp[j * w..(j + 1) * w];
                for (o, &s) in out[y * w..(y + 1) * w].iter_mut().zip(src) {
                    *o += wt * s;
                }
            }
        }
        out
    }

    fn adjoint(&self, g: &[T]) -> Vec<T> {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![T::zero(); h * w];
        for (y, col) in self.cols.rows.iter().enumerate() {
            for &(j, wt) in col {
                let src = &g[y * w..(y + 1) * w];
                for (t, &s) in tmp[j * w..(j + 1) * w].iter_mut().zip(src) {
                    *t += wt * s;
                }
            }
        }
        let mut out = vec![T::zero(); h * w];
        for y in 0..h {
            for (xx, row) in self.rows.rows.iter().enumerate() {
                let gv = tmp[y * w + xx];
                for &(j, wt) in row {
                    out[y * w + j] += wt * gv;
                }
            }
        }
        out
    }
}

fn check_shapes<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<(), LossError> {
    if x.shape() != y.shape() {
        return Err(LossError::ShapeMismatch(x.shape(), y.shape()));
    }
    if x.is_empty() {
        return Err(LossError::Empty);
    }
    Ok(())
}

/// SSIM of one plane and, optionally, its gradient with respect to `x`.
fn ssim_plane<T: Real>(x: &[T], y: &[T], blur: &Blur<T>, params: &SsimParams, want_grad: bool) -> (T, Option<Vec<T>>) {
    let c1 = T::lit(params.c1());
    let c2 = T::lit(params.c2());
    let two = T::lit(2.0);
    let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
    let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    let mx = blur.apply(x);
    let my = blur.apply(y);
    let exx = blur.apply(&xx);
    let eyy = blur.apply(&yy);
    let exy = blur.apply(&xy);
    let p = x.len();
    let inv_p = T::one() / T::lit(p as f64);
    let mut total = T::zero();
    let (mut ga, mut gb, mut gc) = if want_grad {
        (vec![T::zero(); p], vec![T::zero(); p], vec![T::zero(); p])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..p {
        let (mxi, myi) = (mx[i], my[i]);
        let sxx = exx[i] - mxi * mxi;
        let syy = eyy[i] - myi * myi;
        let sxy = exy[i] - mxi * myi;
        let a = two * mxi * myi + c1;
        let b = two * sxy + c2;
        let c = mxi * mxi + myi * myi + c1;
        let d = sxx + syy + c2;
        let s = a * b / (c * d);
        total += s;
        if want_grad {
            let ds_da = b / (c * d);
            let ds_db = a / (c * d);
            let ds_dc = -s / c;
            let ds_dd = -s / d;
            ga[i] = (ds_da * two * myi + ds_dc * two * mxi - ds_dd * two * mxi - ds_db * two * myi) * inv_p;
            gb[i] = ds_dd * inv_p;
            gc[i] = ds_db * two * inv_p;
        }
    }
    let grad = want_grad.then(|| {
        let la = blur.adjoint(&ga);
        let lb = blur.adjoint(&gb);
        let lc = blur.adjoint(&gc);
        (0..p).map(|i| la[i] + two * x[i] * lb[i] + y[i] * lc[i]).collect()
    });
    (total / T::lit(p as f64), grad)
}

fn ssim_impl<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    params: &SsimParams,
    want_grad: bool,
) -> Result<(Vec<T>, Option<Tensor<T>>), LossError> {
    check_shapes(x, y)?;
    let [n, c, h, w] = x.shape();
    let blur = Blur::new(h, w, &params.taps());
    let mut scores = Vec::with_capacity(n * c);
    let mut grad = want_grad.then(|| Tensor::zeros(x.shape()));
    for s in 0..n {
        for ch in 0..c {
            let (v, g) = ssim_plane(x.channel(s, ch), y.channel(s, ch), &blur, params, want_grad);
            scores.push(v);
            if let (Some(gt), Some(g)) = (grad.as_mut(), g) {
                gt.channel_mut(s, ch).copy_from_slice(&g);
            }
        }
    }
    Ok((scores, grad))
}

/// Per-slice SSIM scores.
pub fn ssim<T: Real>(x: &Tensor<T>, y: &Tensor<T>, params: &SsimParams) -> Result<Vec<f64>, LossError> {
    Ok(ssim_impl(x, y, params, false)?.0.into_iter().map(Real::f64).collect())
}

/// Mean SSIM over all slices.
pub fn ssim_mean<T: Real>(x: &Tensor<T>, y: &Tensor<T>, params: &SsimParams) -> Result<f64, LossError> {
    let s = ssim(x, y, params)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Per-slice SSIM together with `d ssim_k / d x` for every slice `k` (stored in that slice's plane).
pub fn ssim_with_grad<T: Real>(x: &Tensor<T>, y: &Tensor<T>, params: &SsimParams) -> Result<(Vec<T>, Tensor<T>), LossError> {
    let (s, g) = ssim_impl(x, y, params, true)?;
    Ok((s, g.expect("gradient requested")))
}

/// Per-slice mean squared error.
pub fn mse<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Vec<f64>, LossError> {
    check_shapes(x, y)?;
    let [n, c, _, _] = x.shape();
    Ok((0..n)
        .flat_map(|s| (0..c).map(move |ch| (s, ch)))
        .map(|(s, ch)| {
            let (a, b) = (x.channel(s, ch), y.channel(s, ch));
            a.iter().zip(b).map(|(&u, &v)| (u.f64() - v.f64()).powi(2)).sum::<f64>() / a.len() as f64
        })
        .collect())
}

/// Peak signal-to-noise ratio in dB for a given mean squared error; `+inf` when `mse == 0`.
pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// Per-slice PSNR.
pub fn psnr<T: Real>(x: &Tensor<T>, y: &Tensor<T>, data_range: f64) -> Result<Vec<f64>, LossError> {
    Ok(mse(x, y)?.into_iter().map(|m| psnr_from_mse(m, data_range)).collect())
}

/// Batch-mean loss value with gradients for the prediction heads that contribute to it.
#[derive(Clone, Debug)]
pub struct LossTerms<T> {
    pub value: f64,
    pub grad_pet: Option<Tensor<T>>,
    pub grad_asl: Option<Tensor<T>>,
}

/// `mean_k (1 - ssim(pred_k, target_k))` and its gradient, scaled by `weight`.
fn dissimilarity<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, weight: f64, params: &SsimParams) -> Result<(f64, Tensor<T>), LossError> {
    let (scores, mut grad) = ssim_with_grad(pred, target, params)?;
    let k = scores.len() as f64;
    let value = weight * scores.iter().map(|s| 1.0 - s.f64()).sum::<f64>() / k;
    let scale = T::lit(-weight / k);
    grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    Ok((value, grad))
}

/// Paired (PET available) loss: PET and ASL dissimilarities weighted equally.
pub fn paired_loss<T: Real>(
    pet_pred: &Tensor<T>,
    pet_gt: &Tensor<T>,
    asl_recon: &Tensor<T>,
    asl_gt: &Tensor<T>,
    params: &SsimParams,
) -> Result<LossTerms<T>, LossError> {
    check_shapes(pet_pred, asl_recon)?;
    let (vp, gp) = dissimilarity(pet_pred, pet_gt, 0.5, params)?;
    let (va, ga) = dissimilarity(asl_recon, asl_gt, 0.5, params)?;
    Ok(LossTerms {
        value: vp + va,
        grad_pet: Some(gp),
        grad_asl: Some(ga),
    })
}

/// Single-task paired loss: the PET term alone.
pub fn pet_only_loss<T: Real>(pet_pred: &Tensor<T>, pet_gt: &Tensor<T>, params: &SsimParams) -> Result<LossTerms<T>, LossError> {
    let (v, g) = dissimilarity(pet_pred, pet_gt, 1.0, params)?;
    Ok(LossTerms {
        value: v,
        grad_pet: Some(g),
        grad_asl: None,
    })
}

/// Unpaired loss: ASL reconstruction only.
pub fn unpaired_loss<T: Real>(asl_recon: &Tensor<T>, asl_gt: &Tensor<T>, params: &SsimParams) -> Result<LossTerms<T>, LossError> {
    let (v, g) = dissimilarity(asl_recon, asl_gt, 1.0, params)?;
    Ok(LossTerms {
        value: v,
        grad_pet: None,
        grad_asl: Some(g),
    })
}
