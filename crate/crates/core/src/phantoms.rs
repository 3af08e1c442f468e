//! Procedural "brain-like" phantoms with a known ASL to PET mapping.
//!
//! Geometry: a noisy head ellipse containing a CSF rim, a gray-matter ribbon and a
//! white-matter core with two CSF ventricles. Each pixel is supersampled 4x4 so boundary
//! pixels carry partial-volume tissue fractions.
//!
//! Signals, in fixed calibrated units that land in `[0, 1]`:
//! - perfusion: per-tissue values times a per-subject global factor, plus an optional hotspot
//!   disk scaled by the local GM+WM fraction;
//! - ASL: perfusion blurred with a Gaussian (sigma 1 px) plus N(0, 0.03^2) noise, clipped;
//! - T1: per-tissue intensities with no blur and no noise;
//! - PET: `f(perfusion) = 1.3 x / (x + 0.3)` (so `f(1) = 1`) blurred with sigma 2 px.
//!
//! Randomness comes from ChaCha8 seeded with `seed` on stream `subject_id`; geometry is drawn
//! first and the ASL noise last, so activation never changes the noise realisation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::datasets::format::{self, Manifest, ManifestEntry, ManifestHeader, MANIFEST_FORMAT, MANIFEST_VERSION};
use crate::datasets::{DatasetError, Modality, Slice};

/// Grid dims must be multiples of this (`2^(levels - 1)` for the default three-level network).
pub const GRID_MULTIPLE: usize = 4;

pub const ASL_BLUR_SIGMA: f64 = 1.0;
pub const PET_BLUR_SIGMA: f64 = 2.0;
pub const ASL_NOISE_SIGMA: f64 = 0.03;
/// Gaussian kernels are truncated at this many standard deviations.
pub const BLUR_TRUNCATE: f64 = 3.0;

const PERFUSION_GM: f64 = 0.6;
const PERFUSION_WM: f64 = 0.25;
const PERFUSION_CSF: f64 = 0.02;
const T1_GM: f64 = 0.55;
const T1_WM: f64 = 0.85;
const T1_CSF: f64 = 0.12;
const PET_SATURATION: f64 = 0.3;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("grid {0}x{1} is not a multiple of {GRID_MULTIPLE}")]
    InvalidGrid(usize, usize),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] DatasetError),
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    None,
    /// Disk of elevated perfusion; `amplitude` is a fraction of the GM perfusion level.
    LocalHotspot {
        center_row: f64,
        center_col: f64,
        radius: f64,
        amplitude: f64,
    },
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// 3 = CSF/GM/WM; 2 folds CSF into GM.
    pub tissue_classes: usize,
    pub activation: Activation,
    pub paired: bool,
    pub subject_id: u64,
}

impl PhantomSpec {
    pub fn new(seed: u64, height: usize, width: usize) -> Self {
        Self {
            seed,
            height,
            width,
            tissue_classes: 3,
            activation: Activation::None,
            paired: true,
            subject_id: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.height == 0 || self.width == 0 {
            return Err(PhantomError::InvalidSpec(format!(
                "grid dims must be positive, got {}x{}",
                self.height, self.width
            )));
        }
        if self.height % GRID_MULTIPLE != 0 || self.width % GRID_MULTIPLE != 0 {
            return Err(PhantomError::InvalidGrid(self.height, self.width));
        }
        if !(2..=3).contains(&self.tissue_classes) {
            return Err(PhantomError::InvalidSpec(format!(
                "tissue_classes must be 2 or 3, got {}",
                self.tissue_classes
            )));
        }
        if let Activation::LocalHotspot { radius, amplitude, center_row, center_col } = self.activation {
            if !(radius > 0.0) || !(amplitude >= 0.0) || !center_row.is_finite() || !center_col.is_finite() {
                return Err(PhantomError::InvalidSpec("hotspot needs positive radius and non-negative amplitude".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomTriple {
    pub asl: Slice,
    pub t1: Slice,
    pub pet: Option<Slice>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tissue {
    Background,
    Csf,
    Gm,
    Wm,
}

/// Smooth radial perturbation `1 + sum_k a_k cos(k phi + p_k)`.
#[derive(Clone, Debug)]
struct Wobble {
    terms: Vec<(f64, f64, f64)>,
}

impl Wobble {
    fn draw<R: Rng>(rng: &mut R, amplitude: f64) -> Self {
        Self {
            terms: (2..=5)
                .map(|k| (k as f64, rng.random_range(0.0..amplitude), rng.random_range(0.0..std::f64::consts::TAU)))
                .collect(),
        }
    }

    fn at(&self, phi: f64) -> f64 {
        1.0 + self.terms.iter().map(|&(k, a, p)| a * (k * phi + p).cos()).sum::<f64>()
    }
}

#[derive(Clone, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Self {
        Self {
            cx,
            cy,
            a,
            b,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
        }
    }

    /// Normalised radius and polar angle of `(u, v)` in the ellipse frame.
    fn polar(&self, u: f64, v: f64) -> (f64, f64) {
        let (du, dv) = (u - self.cx, v - self.cy);
        let x = (du * self.cos_t + dv * self.sin_t) / self.a;
        let y = (-du * self.sin_t + dv * self.cos_t) / self.b;
        ((x * x + y * y).sqrt(), y.atan2(x))
    }
}

#[derive(Clone, Debug)]
struct Geometry {
    head: Ellipse,
    outer: Wobble,
    csf_rim: f64,
    gm_inner: f64,
    inner: Wobble,
    ventricles: [Ellipse; 2],
    global_flow: f64,
}

impl Geometry {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        let cx = rng.random_range(-0.03..0.03);
        let cy = rng.random_range(-0.03..0.03);
        let head = Ellipse::new(
            cx,
            cy,
            rng.random_range(0.78..0.88),
            rng.random_range(0.85..0.95),
            rng.random_range(-0.15..0.15),
        );
        let outer = Wobble::draw(rng, 0.03);
        let csf_rim = rng.random_range(0.90..0.94);
        let gm_inner = rng.random_range(0.64..0.74);
        let inner = Wobble::draw(rng, 0.06);
        let vy = cy + rng.random_range(-0.08..0.0);
        let spread = rng.random_range(0.10..0.15);
        let va = rng.random_range(0.05..0.08);
        let vb = rng.random_range(0.15..0.22);
        let tilt = rng.random_range(0.1..0.3);
        let ventricles = [
            Ellipse::new(cx - spread, vy, va, vb, tilt),
            Ellipse::new(cx + spread, vy, va, vb, -tilt),
        ];
        let global_flow = rng.random_range(0.85..1.15);
        Self {
            head,
            outer,
            csf_rim,
            gm_inner,
            inner,
            ventricles,
            global_flow,
        }
    }

    /// Tissue at normalised coordinates `u, v` in `[-1, 1]`.
    fn tissue(&self, u: f64, v: f64, classes: usize) -> Tissue {
        let (r, phi) = self.head.polar(u, v);
        let r = r / self.outer.at(phi);
        let csf = if classes >= 3 { Tissue::Csf } else { Tissue::Gm };
        if r >= 1.0 {
            Tissue::Background
        } else if r >= self.csf_rim {
            csf
        } else if r >= self.gm_inner * self.inner.at(phi) {
            Tissue::Gm
        } else if self.ventricles.iter().any(|e| e.polar(u, v).0 < 1.0) {
            csf
        } else {
            Tissue::Wm
        }
    }
}

/// Per-pixel tissue fractions `(csf, gm, wm)` from supersampling.
fn tissue_fractions(geo: &Geometry, h: usize, w: usize, classes: usize) -> Vec<[f64; 3]> {
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut out = vec![[0.0; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let acc = &mut out[y * w + x];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let u = 2.0 * px / w as f64 - 1.0;
                    let v = 2.0 * py / h as f64 - 1.0;
                    match geo.tissue(u, v, classes) {
                        Tissue::Csf => acc[0] += inv,
                        Tissue::Gm => acc[1] += inv,
                        Tissue::Wm => acc[2] += inv,
                        Tissue::Background => {}
                    }
                }
            }
        }
    }
    out
}

/// Fraction of pixel `(y, x)` covered by a disk, by supersampling.
fn disk_coverage(y: usize, x: usize, center_row: f64, center_col: f64, radius: f64) -> f64 {
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
            let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
            if (py - center_row).powi(2) + (px - center_col).powi(2) <= radius * radius {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

/// Separable Gaussian blur with zero padding, kernel truncated at [`BLUR_TRUNCATE`] sigmas.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = blur_radius(sigma) as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.into_iter().map(|t| t / total).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let sx = x as isize + k as isize - r;
                if sx >= 0 && sx < w as isize {
                    acc += t * img[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let sy = y as isize + k as isize - r;
                if sy >= 0 && sy < h as isize {
                    acc += t * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Support radius in pixels of the truncated Gaussian kernel.
pub fn blur_radius(sigma: f64) -> usize {
    (BLUR_TRUNCATE * sigma).ceil() as usize
}

/// Saturating flow-to-uptake map, monotone with `f(0) = 0` and `f(1) = 1`.
pub fn pet_response(perfusion: f64) -> f64 {
    (1.0 + PET_SATURATION) * perfusion / (perfusion + PET_SATURATION)
}

fn to_slice(values: &[f64], spec: &PhantomSpec, modality: Modality) -> Slice {
    Slice::new(
        values.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
        spec.height,
        spec.width,
        modality,
        spec.subject_id,
    )
}

/// Render one subject. Pure function of `spec`.
pub fn generate_subject(spec: &PhantomSpec) -> Result<PhantomTriple, PhantomError> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.subject_id);
    let geo = Geometry::draw(&mut rng);
    let fractions = tissue_fractions(&geo, h, w, spec.tissue_classes);

    let mut perfusion: Vec<f64> = fractions
        .iter()
        .map(|f| geo.global_flow * (f[0] * PERFUSION_CSF + f[1] * PERFUSION_GM + f[2] * PERFUSION_WM))
        .collect();
    if let Activation::LocalHotspot { center_row, center_col, radius, amplitude } = spec.activation {
        let boost = amplitude * PERFUSION_GM * geo.global_flow;
        for y in 0..h {
            for x in 0..w {
                let cover = disk_coverage(y, x, center_row, center_col, radius);
                if cover > 0.0 {
                    let f = fractions[y * w + x];
                    perfusion[y * w + x] += boost * cover * (f[1] + f[2]);
                }
            }
        }
    }
    let t1: Vec<f64> = fractions
        .iter()
        .map(|f| f[0] * T1_CSF + f[1] * T1_GM + f[2] * T1_WM)
        .collect();

    let mut asl = gaussian_blur(&perfusion, h, w, ASL_BLUR_SIGMA);
    for v in asl.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += ASL_NOISE_SIGMA * n;
    }
    let pet = spec.paired.then(|| {
        let mapped: Vec<f64> = perfusion.iter().map(|&p| pet_response(p)).collect();
        gaussian_blur(&mapped, h, w, PET_BLUR_SIGMA)
    });

    Ok(PhantomTriple {
        asl: to_slice(&asl, spec, Modality::Asl),
        t1: to_slice(&t1, spec, Modality::T1),
        pet: pet.map(|p| to_slice(&p, spec, Modality::Pet)),
    })
}

/// Corpus layout parameters beyond the subject counts.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusOptions {
    pub height: usize,
    pub width: usize,
    pub tissue_classes: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            tissue_classes: 3,
        }
    }
}

/// Subject specs of a corpus: ids `0..n_paired` are paired, the rest unpaired; every
/// odd-numbered subject carries a hotspot placed in the cortical ribbon.
pub fn corpus_specs(n_paired: usize, n_unpaired: usize, base_seed: u64, options: &CorpusOptions) -> Vec<PhantomSpec> {
    let mut placement = ChaCha8Rng::seed_from_u64(base_seed);
    placement.set_stream(u64::MAX);
    let scale = options.height.min(options.width) as f64 / 64.0;
    (0..n_paired + n_unpaired)
        .map(|i| {
            let angle: f64 = placement.random_range(0.0..std::f64::consts::TAU);
            let ring: f64 = placement.random_range(0.62..0.78);
            let radius: f64 = placement.random_range(3.0..6.0) * scale;
            let amplitude: f64 = placement.random_range(0.3..0.6);
            let activation = if i % 2 == 1 {
                Activation::LocalHotspot {
                    center_row: (0.5 + 0.5 * ring * angle.sin()) * options.height as f64 - 0.5,
                    center_col: (0.5 + 0.5 * ring * angle.cos()) * options.width as f64 - 0.5,
                    radius,
                    amplitude,
                }
            } else {
                Activation::None
            };
            PhantomSpec {
                seed: base_seed,
                height: options.height,
                width: options.width,
                tissue_classes: options.tissue_classes,
                activation,
                paired: i < n_paired,
                subject_id: i as u64,
            }
        })
        .collect()
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Render a corpus into `out_dir` and write its manifest; returns the manifest and its path.
pub fn generate_corpus(
    n_paired: usize,
    n_unpaired: usize,
    base_seed: u64,
    out_dir: &Path,
    options: &CorpusOptions,
) -> Result<(Manifest, PathBuf), PhantomError> {
    fs::create_dir_all(out_dir).map_err(|e| DatasetError::io(out_dir, e))?;
    let specs = corpus_specs(n_paired, n_unpaired, base_seed, options);
    let mut entries = Vec::with_capacity(specs.len());
    for spec in &specs {
        let triple = generate_subject(spec)?;
        let stem = format!("sub-{:04}", spec.subject_id);
        let asl = format::write_slice(out_dir, &format!("{stem}_asl"), &triple.asl)?;
        let t1 = format::write_slice(out_dir, &format!("{stem}_t1"), &triple.t1)?;
        let pet = triple
            .pet
            .as_ref()
            .map(|p| format::write_slice(out_dir, &format!("{stem}_pet"), p))
            .transpose()?;
        entries.push(ManifestEntry {
            subject_id: spec.subject_id,
            paired: spec.paired,
            activated: matches!(spec.activation, Activation::LocalHotspot { .. }),
            asl,
            t1,
            pet,
        });
    }
    let manifest = Manifest {
        header: ManifestHeader {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            base_seed,
            height: options.height,
            width: options.width,
            subjects: entries.len(),
        },
        entries,
    };
    let path = out_dir.join(MANIFEST_NAME);
    manifest.write(&path)?;
    Ok((manifest, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_subject_is_in_unit_range_with_pet() {
        let t = generate_subject(&PhantomSpec::new(0, 64, 64)).unwrap();
        assert!(t.asl.in_unit_range() && t.t1.in_unit_range());
        assert!(t.pet.as_ref().unwrap().in_unit_range());
    }

    #[test]
    fn unpaired_subject_has_no_pet() {
        let spec = PhantomSpec {
            paired: false,
            ..PhantomSpec::new(1, 32, 32)
        };
        assert!(generate_subject(&spec).unwrap().pet.is_none());
    }

    #[test]
    fn grid_errors() {
        assert!(matches!(
            generate_subject(&PhantomSpec::new(0, 30, 32)),
            Err(PhantomError::InvalidGrid(30, 32))
        ));
        assert!(matches!(
            generate_subject(&PhantomSpec::new(0, 0, 32)),
            Err(PhantomError::InvalidSpec(_))
        ));
    }

    #[test]
    fn pet_response_is_monotone_and_normalised() {
        assert_eq!(pet_response(0.0), 0.0);
        assert!((pet_response(1.0) - 1.0).abs() < 1e-15);
        let mut prev = -1.0;
        for i in 0..=100 {
            let v = pet_response(i as f64 / 100.0);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn tissue_contrast_in_t1() {
        let t = generate_subject(&PhantomSpec::new(5, 64, 64)).unwrap();
        let centre_left = t.t1.pixels[32 * 64 + 20];
        let corner = t.t1.pixels[0];
        assert_eq!(corner, 0.0);
        assert!(centre_left > 0.5);
    }
}
