//! Random Fourier features evaluated as Gaussian expectations.
//!
//! A frequency `ω = 2^u · d` has `u ~ U[0, L]` and `d` uniform on the unit
//! sphere. For a point distributed as `N(μ, Σ)` the expected features are
//! `cos(ωᵀμ)·exp(-½ωᵀΣω)` and `sin(ωᵀμ)·exp(-½ωᵀΣω)`, which fade out
//! frequencies the footprint cannot resolve.

use ndarray::ArrayViewMut2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, Vec3};
use crate::real::Real;

/// Encoding hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingConfig {
    pub levels: f64,
    pub features: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { levels: 8.0, features: 128 }
    }
}

impl EncodingConfig {
    pub fn output_dim(&self) -> usize {
        2 * self.features
    }
}

/// A frozen set of frequency vectors.
///
/// Frequencies are rounded to `f32` when sampled so that a checkpointed basis
/// restores bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierBasis {
    pub levels: f64,
    pub frequencies: Vec<Vec3<f64>>,
}

impl FourierBasis {
    pub fn count(&self) -> usize {
        self.frequencies.len()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.frequencies.len()
    }

    pub fn from_f32(levels: f64, flat: &[f32]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::Shape(format!("basis length {} is not a multiple of 3", flat.len())));
        }
        let frequencies = flat
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect();
        Ok(Self { levels, frequencies })
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.frequencies.iter().flat_map(|w| w.iter().map(|&x| x as f32)).collect()
    }

    fn cast<F: Real>(&self) -> Vec<Vec3<F>> {
        self.frequencies.iter().map(|w| [F::lit(w[0]), F::lit(w[1]), F::lit(w[2])]).collect()
    }
}

/// Samples `count` frequencies with log2-magnitude uniform on `[0, levels]`.
pub fn sample_basis<R: Rng + ?Sized>(rng: &mut R, levels: f64, count: usize) -> Result<FourierBasis> {
    if !(levels >= 0.0) {
        return Err(Error::Argument(format!("levels must be non-negative, got {levels}")));
    }
    if count == 0 {
        return Err(Error::Argument("need at least one frequency".into()));
    }
    let frequencies = (0..count)
        .map(|_| {
            let u: f64 = rng.gen::<f64>() * levels;
            let magnitude = u.exp2();
            let dir = unit_vector(rng);
            [
                (magnitude * dir[0]) as f32 as f64,
                (magnitude * dir[1]) as f32 as f64,
                (magnitude * dir[2]) as f32 as f64,
            ]
        })
        .collect();
    Ok(FourierBasis { levels, frequencies })
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3<f64> {
    loop {
        let v: Vec3<f64> = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = dot(v, v).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Covariance of the position Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variance<F> {
    Isotropic(F),
    Diagonal(Vec3<F>),
}

impl<F: Real> Variance<F> {
    fn quadratic_form(&self, w: Vec3<F>) -> F {
        match *self {
            Variance::Isotropic(v) => v * dot(w, w),
            Variance::Diagonal(d) => d[0] * w[0] * w[0] + d[1] * w[1] * w[1] + d[2] * w[2] * w[2],
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            Variance::Isotropic(v) => v >= F::zero(),
            Variance::Diagonal(d) => d.iter().all(|&v| v >= F::zero()),
        }
    }
}

/// Expected Fourier features of `N(mean, variance)`.
///
/// Output layout is all cosines followed by all sines.
pub fn encode_ipe<F: Real>(mean: Vec3<F>, variance: Variance<F>, basis: &FourierBasis) -> Result<Vec<F>> {
    if !variance.is_valid() {
        return Err(Error::Argument("variance must be non-negative".into()));
    }
    let m = basis.count();
    let mut out = vec![F::zero(); 2 * m];
    let half = F::lit(0.5);
    for (j, w) in basis.cast::<F>().into_iter().enumerate() {
        let phase = dot(w, mean);
        let atten = (-half * variance.quadratic_form(w)).exp();
        let (s, c) = phase.sin_cos();
        out[j] = c * atten;
        out[m + j] = s * atten;
    }
    Ok(out)
}

/// Vector-Jacobian product of [`encode_ipe`] with respect to the mean.
pub fn encode_ipe_mean_vjp<F: Real>(
    mean: Vec3<F>,
    variance: Variance<F>,
    basis: &FourierBasis,
    upstream: &[F],
) -> Result<Vec3<F>> {
    if !variance.is_valid() {
        return Err(Error::Argument("variance must be non-negative".into()));
    }
    let m = basis.count();
    if upstream.len() != 2 * m {
        return Err(Error::Shape(format!("upstream has {} entries, expected {}", upstream.len(), 2 * m)));
    }
    let half = F::lit(0.5);
    let mut grad = [F::zero(); 3];
    for (j, w) in basis.cast::<F>().into_iter().enumerate() {
        let phase = dot(w, mean);
        let atten = (-half * variance.quadratic_form(w)).exp();
        let (s, c) = phase.sin_cos();
        // d cos / dμ = -sin·ω, d sin / dμ = cos·ω
        let coeff = atten * (upstream[m + j] * c - upstream[j] * s);
        for k in 0..3 {
            grad[k] = grad[k] + coeff * w[k];
        }
    }
    Ok(grad)
}

/// Batched isotropic encoding into the rows of `out`.
pub(crate) fn encode_batch<F: Real>(
    points: &[Vec3<F>],
    variances: &[F],
    frequencies: &[Vec3<F>],
    mut out: ArrayViewMut2<F>,
) {
    let m = frequencies.len();
    debug_assert_eq!(out.ncols(), 2 * m);
    let half = F::lit(0.5);
    let sq: Vec<F> = frequencies.iter().map(|&w| dot(w, w)).collect();
    for (p, (x, &var)) in points.iter().zip(variances).enumerate() {
        let mut row = out.row_mut(p);
        let row = row.as_slice_mut().expect("encoding rows are contiguous");
        for j in 0..m {
            let w = frequencies[j];
            let phase = w[0] * x[0] + w[1] * x[1] + w[2] * x[2];
            let atten = (-half * var * sq[j]).fast_exp();
            let (s, c) = phase.fast_sin_cos();
            row[j] = c * atten;
            row[m + j] = s * atten;
        }
    }
}

pub(crate) fn frequencies_as<F: Real>(basis: &FourierBasis) -> Vec<Vec3<F>> {
    basis.cast()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn magnitudes_stay_within_levels() {
        let mut rng = stream(0, 0, Purpose::Basis);
        let basis = sample_basis(&mut rng, 8.0, 10_000).unwrap();
        for w in &basis.frequencies {
            let n = dot(*w, *w).sqrt();
            assert!((1.0 - 1e-6..=256.0 * (1.0 + 1e-6)).contains(&n), "|w| = {n}");
        }
    }

    #[test]
    fn zero_levels_gives_unit_frequencies() {
        let mut rng = stream(1, 0, Purpose::Basis);
        let basis = sample_basis(&mut rng, 0.0, 500).unwrap();
        for w in &basis.frequencies {
            // exactly one before rounding to f32
            assert!((dot(*w, *w).sqrt() - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn log_magnitude_is_uniform() {
        // One-sample Kolmogorov-Smirnov against U[0, 8]; critical value at
        // alpha = 0.01 is 1.628 / sqrt(n).
        let n = 100_000;
        let mut rng = stream(2, 0, Purpose::Basis);
        let basis = sample_basis(&mut rng, 8.0, n).unwrap();
        let mut u: Vec<f64> = basis.frequencies.iter().map(|w| dot(*w, *w).sqrt().log2() / 8.0).collect();
        u.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let d = u
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let lo = (x - i as f64 / n as f64).abs();
                let hi = ((i + 1) as f64 / n as f64 - x).abs();
                lo.max(hi)
            })
            .fold(0.0f64, f64::max);
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn zero_variance_is_plain_encoding() {
        let mut rng = stream(3, 0, Purpose::Basis);
        let basis = sample_basis(&mut rng, 4.0, 16).unwrap();
        let x = [0.3, -0.2, 0.7];
        let f = encode_ipe(x, Variance::Isotropic(0.0), &basis).unwrap();
        for (j, w) in basis.frequencies.iter().enumerate() {
            assert!((f[j] - dot(*w, x).cos()).abs() < 1e-15);
            assert!((f[16 + j] - dot(*w, x).sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn origin_encodes_to_ones_and_zeros() {
        let mut rng = stream(4, 0, Purpose::Basis);
        let basis = sample_basis(&mut rng, 8.0, 32).unwrap();
        let f = encode_ipe([0.0; 3], Variance::Isotropic(0.0), &basis).unwrap();
        assert!(f[..32].iter().all(|&c| c == 1.0));
        assert!(f[32..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn negative_variance_is_rejected() {
        let basis = FourierBasis { levels: 0.0, frequencies: vec![[1.0, 0.0, 0.0]] };
        assert!(matches!(encode_ipe([0.0; 3], Variance::Isotropic(-1.0), &basis), Err(Error::Argument(_))));
        assert!(encode_ipe([0.0; 3], Variance::Diagonal([0.1, -0.1, 0.1]), &basis).is_err());
    }

    #[test]
    fn mean_gradient_matches_central_differences() {
        let mut rng = StdRng::seed_from_u64(5);
        let basis = sample_basis(&mut rng, 6.0, 24).unwrap();
        for _ in 0..20 {
            let mu = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let var = Variance::Diagonal([rng.gen_range(0.0..0.01), rng.gen_range(0.0..0.01), rng.gen_range(0.0..0.01)]);
            let upstream: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let objective = |m: Vec3<f64>| -> f64 {
                encode_ipe(m, var, &basis).unwrap().iter().zip(&upstream).map(|(a, b)| a * b).sum()
            };
            let g = encode_ipe_mean_vjp(mu, var, &basis, &upstream).unwrap();
            let h = 1e-6;
            for k in 0..3 {
                let mut p = mu;
                let mut q = mu;
                p[k] += h;
                q[k] -= h;
                let fd = (objective(p) - objective(q)) / (2.0 * h);
                let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
                assert!(rel < 1e-4, "component {k}: analytic {} fd {}", g[k], fd);
            }
        }
    }

    proptest! {
        #[test]
        fn features_bounded_and_attenuate_with_variance(
            seed in any::<u64>(), x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, var in 0.0f64..0.5
        ) {
            let mut rng = StdRng::seed_from_u64(seed);
            let basis = sample_basis(&mut rng, 8.0, 8).unwrap();
            let a = encode_ipe([x, y, z], Variance::Isotropic(var), &basis).unwrap();
            let b = encode_ipe([x, y, z], Variance::Isotropic(2.0 * var), &basis).unwrap();
            for (fa, fb) in a.iter().zip(&b) {
                prop_assert!(fa.abs() <= 1.0);
                prop_assert!(fb.abs() <= fa.abs());
            }
        }
    }
}
