//! Random backgrounds and the differentiable crop/resize applied to renders.

use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    GaussianNoise,
    Checkerboard,
    FourierTexture,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 3] =
        [BackgroundKind::GaussianNoise, BackgroundKind::Checkerboard, BackgroundKind::FourierTexture];
}

impl FromStr for BackgroundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_noise" | "noise" => Ok(BackgroundKind::GaussianNoise),
            "checkerboard" => Ok(BackgroundKind::Checkerboard),
            "fourier_texture" | "fourier" => Ok(BackgroundKind::FourierTexture),
            other => Err(Error::Config(format!("unknown background kind `{other}`"))),
        }
    }
}

/// Parameters of the random background family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundSpec {
    /// Blur standard deviation range in pixels.
    pub blur_sigma_range: (f64, f64),
    /// Checkerboard tile size range in pixels.
    pub tile_size_range: (usize, usize),
    /// Highest spatial frequency of Fourier textures, in cycles per image.
    pub fourier_max_frequency: f64,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self { blur_sigma_range: (0.0, 10.0), tile_size_range: (4, 32), fourier_max_frequency: 16.0 }
    }
}

impl BackgroundSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.blur_sigma_range;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(Error::Config(format!("blur sigma range {:?} is invalid", self.blur_sigma_range)));
        }
        let (a, b) = self.tile_size_range;
        if a == 0 || b < a {
            return Err(Error::Config(format!("tile size range {:?} is invalid", self.tile_size_range)));
        }
        if !(self.fourier_max_frequency >= 0.0) {
            return Err(Error::Config("fourier max frequency must be non-negative".into()));
        }
        Ok(())
    }
}

/// Draws a background kind uniformly, then a background of that kind.
pub fn sample_background<F: Real, R: Rng + ?Sized>(
    spec: &BackgroundSpec,
    resolution: usize,
    rng: &mut R,
) -> Result<(BackgroundKind, Array3<F>)> {
    let kind = BackgroundKind::ALL[rng.gen_range(0..3)];
    Ok((kind, make_background(kind, spec, resolution, rng)?))
}

/// Generates a `resolution²` background of `kind`, blurred with a random
/// standard deviation and clamped to `[0, 1]`.
pub fn make_background<F: Real, R: Rng + ?Sized>(
    kind: BackgroundKind,
    spec: &BackgroundSpec,
    resolution: usize,
    rng: &mut R,
) -> Result<Array3<F>> {
    spec.validate()?;
    if resolution == 0 {
        return Err(Error::Argument("background resolution must be positive".into()));
    }
    let (lo, hi) = spec.blur_sigma_range;
    let blur = lo + (hi - lo) * rng.gen::<f64>();
    let raw = match kind {
        BackgroundKind::GaussianNoise => gaussian_noise(resolution, rng),
        BackgroundKind::Checkerboard => {
            let (a, b) = spec.tile_size_range;
            let tile = rng.gen_range(a..=b);
            let low: [f64; 3] = rng.gen();
            let high: [f64; 3] = rng.gen();
            checkerboard(resolution, tile, low, high)
        }
        BackgroundKind::FourierTexture => fourier_texture(resolution, spec.fourier_max_frequency, rng),
    };
    let blurred = gaussian_blur(&raw, blur);
    Ok(blurred.mapv(|v| F::lit(v.clamp(0.0, 1.0))))
}

fn gaussian_noise<R: Rng + ?Sized>(resolution: usize, rng: &mut R) -> Array3<f64> {
    let normal = Normal::new(0.5, 0.25).expect("valid noise");
    Array3::from_shape_simple_fn((resolution, resolution, 3), || normal.sample(rng))
}

/// Alternating tiles of `low` and `high`, starting with `low` at the top left.
pub fn checkerboard(resolution: usize, tile: usize, low: [f64; 3], high: [f64; 3]) -> Array3<f64> {
    Array3::from_shape_fn((resolution, resolution, 3), |(r, c, ch)| {
        if (r / tile + c / tile) % 2 == 0 {
            low[ch]
        } else {
            high[ch]
        }
    })
}

/// Random texture with `1/|k|` amplitude falloff up to `max_frequency`
/// cycles per image, min-max normalized per channel.
pub fn fourier_texture<R: Rng + ?Sized>(resolution: usize, max_frequency: f64, rng: &mut R) -> Array3<f64> {
    let n = resolution;
    let mut out = Array3::<f64>::zeros((n, n, 3));
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_inverse(n);
    let signed = |i: usize| if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
    for ch in 0..3 {
        let mut spectrum = vec![Complex::new(0.0, 0.0); n * n];
        for ky in 0..n {
            for kx in 0..n {
                let k = (signed(ky).powi(2) + signed(kx).powi(2)).sqrt();
                if k > 0.0 && k <= max_frequency {
                    let re: f64 = StandardNormal.sample(rng);
                    let im: f64 = StandardNormal.sample(rng);
                    spectrum[ky * n + kx] = Complex::new(re, im) / k;
                }
            }
        }
        for row in spectrum.chunks_exact_mut(n) {
            fft.process(row);
        }
        let mut column = vec![Complex::new(0.0, 0.0); n];
        for kx in 0..n {
            for ky in 0..n {
                column[ky] = spectrum[ky * n + kx];
            }
            fft.process(&mut column);
            for ky in 0..n {
                spectrum[ky * n + kx] = column[ky];
            }
        }
        let values: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
        let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if max - min < 1e-12 {
            let level: f64 = rng.gen();
            out.slice_mut(s![.., .., ch]).fill(level);
        } else {
            for (i, v) in values.iter().enumerate() {
                out[[i / n, i % n, ch]] = (v - min) / (max - min);
            }
        }
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with mirrored borders. `sigma = 0` is the identity.
pub fn gaussian_blur(image: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w, c) = image.dim();
    let mut tmp = Array3::<f64>::zeros((h, w, c));
    for r in 0..h {
        for x in 0..w {
            for ch in 0..c {
                tmp[[r, x, ch]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wt)| wt * image[[r, reflect(x as isize + k as isize - radius, w), ch]])
                    .sum();
            }
        }
    }
    let mut out = Array3::<f64>::zeros((h, w, c));
    for r in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[r, x, ch]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wt)| wt * tmp[[reflect(r as isize + k as isize - radius, h), x, ch]])
                    .sum();
            }
        }
    }
    out
}

/// Top-left corner of a crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropOffset {
    pub row: usize,
    pub col: usize,
}

/// Draws a uniform crop offset for a `crop²` window inside `height × width`.
pub fn sample_crop_offset<R: Rng + ?Sized>(height: usize, width: usize, crop: usize, rng: &mut R) -> Result<CropOffset> {
    if crop == 0 || crop > height || crop > width {
        return Err(Error::Argument(format!("cannot crop {crop}x{crop} from {height}x{width}")));
    }
    Ok(CropOffset { row: rng.gen_range(0..=height - crop), col: rng.gen_range(0..=width - crop) })
}

/// Crops `crop²` pixels at a uniform random offset.
pub fn random_crop<F: Real, R: Rng + ?Sized>(image: ArrayView3<'_, F>, crop: usize, rng: &mut R) -> Result<(Array3<F>, CropOffset)> {
    let (h, w, _) = image.dim();
    let offset = sample_crop_offset(h, w, crop, rng)?;
    Ok((crop_at(image, offset, crop), offset))
}

pub fn crop_at<F: Real>(image: ArrayView3<'_, F>, offset: CropOffset, crop: usize) -> Array3<F> {
    image.slice(s![offset.row..offset.row + crop, offset.col..offset.col + crop, ..]).to_owned()
}

/// Scatters a crop gradient back into a zero image of the original size.
pub fn crop_backward<F: Real>(grad: ArrayView3<'_, F>, offset: CropOffset, height: usize, width: usize) -> Array3<F> {
    let (ch, cw, c) = grad.dim();
    let mut full = Array3::<F>::zeros((height, width, c));
    full.slice_mut(s![offset.row..offset.row + ch, offset.col..offset.col + cw, ..]).assign(&grad);
    full
}

/// Source coordinates of corner-aligned bilinear resampling along one axis.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|i| {
            let src = if output == 1 {
                (input - 1) as f64 / 2.0
            } else {
                i as f64 * (input - 1) as f64 / (output - 1) as f64
            };
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to `target × target` with corner-aligned sampling: output
/// corners coincide with input corners.
pub fn resize_bilinear<F: Real>(image: ArrayView3<'_, F>, target: usize) -> Array3<F> {
    assert!(target >= 1, "target size must be positive");
    let (h, w, c) = image.dim();
    let rows = taps(h, target);
    let cols = taps(w, target);
    let mut out = Array3::<F>::zeros((target, target, c));
    for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
        let (fr, gr) = (F::lit(fr), F::lit(1.0 - fr));
        for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
            let (fc, gc) = (F::lit(fc), F::lit(1.0 - fc));
            for ch in 0..c {
                out[[i, j, ch]] = gr * (gc * image[[r0, c0, ch]] + fc * image[[r0, c1, ch]])
                    + fr * (gc * image[[r1, c0, ch]] + fc * image[[r1, c1, ch]]);
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`] for an input of `height × width`.
pub fn resize_bilinear_backward<F: Real>(grad: ArrayView3<'_, F>, height: usize, width: usize) -> Array3<F> {
    let (target, _, c) = grad.dim();
    let rows = taps(height, target);
    let cols = taps(width, target);
    let mut out = Array3::<F>::zeros((height, width, c));
    for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
        let (fr, gr) = (F::lit(fr), F::lit(1.0 - fr));
        for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
            let (fc, gc) = (F::lit(fc), F::lit(1.0 - fc));
            for ch in 0..c {
                let g = grad[[i, j, ch]];
                out[[r0, c0, ch]] = out[[r0, c0, ch]] + gr * gc * g;
                out[[r0, c1, ch]] = out[[r0, c1, ch]] + gr * fc * g;
                out[[r1, c0, ch]] = out[[r1, c0, ch]] + fr * gc * g;
                out[[r1, c1, ch]] = out[[r1, c1, ch]] + fr * fc * g;
            }
        }
    }
    out
}

/// Per-channel population variance.
pub fn channel_variance(image: &Array3<f64>) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (ch, v) in out.iter_mut().enumerate() {
        let plane: Array2<f64> = image.slice(s![.., .., ch]).to_owned();
        let mean = plane.mean().unwrap_or(0.0);
        *v = plane.mapv(|x| (x - mean).powi(2)).mean().unwrap_or(0.0);
    }
    out
}
