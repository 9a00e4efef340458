//! Camera poses, primary rays and stratified segment sampling.
//!
//! World frame is right-handed with +z up. A camera at azimuth `az` and
//! elevation `el` sits at `radius * (cos el cos az, cos el sin az, sin el)`
//! relative to the look-at point and looks at it with +z as the up vector.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub type Vec3<F> = [F; 3];

/// Half-diagonal of the default scene cube (side 2).
pub const CUBE_HALF_DIAGONAL: f64 = 1.732_050_807_568_877_2;

/// Radius the base focal length is derived for.
pub const REFERENCE_RADIUS: f64 = 4.0;

#[inline]
pub fn dot<F: Real>(a: Vec3<F>, b: Vec3<F>) -> F {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<F: Real>(a: Vec3<F>, b: Vec3<F>) -> Vec3<F> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm<F: Real>(a: Vec3<F>) -> F {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize<F: Real>(a: Vec3<F>) -> Vec3<F> {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[inline]
pub fn add<F: Real>(a: Vec3<F>, b: Vec3<F>) -> Vec3<F> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<F: Real>(a: Vec3<F>, b: Vec3<F>) -> Vec3<F> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<F: Real>(a: Vec3<F>, s: F) -> Vec3<F> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn cast3<F: Real>(a: Vec3<f64>) -> Vec3<F> {
    [F::lit(a[0]), F::lit(a[1]), F::lit(a[2])]
}

/// Azimuth/elevation/radius/focal description of a view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Radians in `[0, 2π)`.
    pub azimuth: f64,
    /// Radians above the equator.
    pub elevation: f64,
    pub radius: f64,
    /// Multiplier on the base focal length.
    pub focal_scale: f64,
}

impl CameraPose {
    pub fn new(azimuth: f64, elevation: f64, radius: f64, focal_scale: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Argument(format!("camera radius must be positive, got {radius}")));
        }
        if !(focal_scale > 0.0) {
            return Err(Error::Argument(format!("focal scale must be positive, got {focal_scale}")));
        }
        Ok(Self {
            azimuth: azimuth.rem_euclid(TAU),
            elevation,
            radius,
            focal_scale,
        })
    }

    /// Builds a pose from angles in degrees.
    pub fn from_degrees(azimuth: f64, elevation: f64, radius: f64, focal_scale: f64) -> Result<Self> {
        Self::new(azimuth.to_radians(), elevation.to_radians(), radius, focal_scale)
    }

    /// Camera position relative to the look-at point.
    pub fn offset(&self) -> Vec3<f64> {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        [self.radius * ce * ca, self.radius * ce * sa, self.radius * se]
    }

    /// Tangent of the half field of view.
    pub fn tan_half_fov(&self) -> f64 {
        base_tan_half_fov() / self.focal_scale
    }
}

/// Tangent of the half field of view before focal scaling: the cone from a
/// camera at the reference radius that just contains the cube's bounding sphere.
pub fn base_tan_half_fov() -> f64 {
    let r = REFERENCE_RADIUS;
    let h = CUBE_HALF_DIAGONAL;
    h / (r * r - h * h).sqrt()
}

/// Closed interval of azimuths in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AzimuthRange {
    pub start: f64,
    pub end: f64,
}

impl AzimuthRange {
    pub fn full() -> Self {
        Self { start: 0.0, end: TAU }
    }

    pub fn from_degrees(start: f64, end: f64) -> Self {
        Self {
            start: start.to_radians(),
            end: end.to_radians(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.start.is_finite()
            && self.end.is_finite()
            && self.start >= 0.0
            && self.end <= TAU + 1e-12
            && self.start <= self.end;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "azimuth range [{}, {}] rad is empty or outside [0, 2π]",
                self.start, self.end
            )))
        }
    }

    pub fn width(&self) -> f64 {
        self.end - self.start
    }
}

/// Draws a training pose: azimuth uniform over `range`, the rest fixed.
pub fn sample_pose<R: Rng + ?Sized>(
    rng: &mut R,
    range: AzimuthRange,
    elevation: f64,
    radius: f64,
    focal_scale: f64,
) -> Result<CameraPose> {
    range.validate()?;
    let u: f64 = rng.gen();
    let azimuth = range.start + u * range.width();
    CameraPose::new(azimuth, elevation, radius, focal_scale)
}

/// A primary ray. `direction` is unit length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<F> {
    pub origin: Vec3<F>,
    pub direction: Vec3<F>,
    pub t_near: F,
    pub t_far: F,
    /// Growth rate of the pixel footprint radius with distance.
    pub cone: F,
}

impl<F: Real> Ray<F> {
    #[inline]
    pub fn at(&self, t: F) -> Vec3<F> {
        add(self.origin, scale(self.direction, t))
    }
}

/// Row-major `resolution × resolution` grid of rays.
#[derive(Clone, Debug)]
pub struct RayGrid<F> {
    pub resolution: usize,
    pub rays: Vec<Ray<F>>,
}

impl<F> RayGrid<F> {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Mip-NeRF style footprint radius relative to the pixel width.
pub const DEFAULT_CONE_SCALE: f64 = 0.577_350_269_189_625_8; // 2 / sqrt(12)

/// Builds the pinhole camera rays for `pose` looking at `origin_shift`.
///
/// Pixel `(row, col)` goes through the center of its cell; row 0 is the top of
/// the image. Near and far planes are at `radius ∓ √3`.
pub fn camera_rays<F: Real>(
    pose: &CameraPose,
    resolution: usize,
    origin_shift: Vec3<F>,
    cone_scale: f64,
) -> RayGrid<F> {
    assert!(resolution >= 1, "resolution must be at least one pixel");
    let offset = pose.offset();
    let target: Vec3<f64> = [
        origin_shift[0].to_f64_lossy(),
        origin_shift[1].to_f64_lossy(),
        origin_shift[2].to_f64_lossy(),
    ];
    let eye = add(target, offset);
    let forward = normalize(scale(offset, -1.0));
    let mut right = cross(forward, [0.0, 0.0, 1.0]);
    if norm(right) < 1e-12 {
        // Looking straight up or down: fall back to the azimuth tangent.
        right = [-pose.azimuth.sin(), pose.azimuth.cos(), 0.0];
    }
    let right = normalize(right);
    let up = cross(right, forward);

    let tan_half = pose.tan_half_fov();
    let pixel = 2.0 * tan_half / resolution as f64;
    let t_near = F::lit(pose.radius - CUBE_HALF_DIAGONAL);
    let t_far = F::lit(pose.radius + CUBE_HALF_DIAGONAL);
    let origin = cast3(eye);

    let mut rays = Vec::with_capacity(resolution * resolution);
    for row in 0..resolution {
        let y = tan_half - (row as f64 + 0.5) * pixel;
        for col in 0..resolution {
            let x = -tan_half + (col as f64 + 0.5) * pixel;
            let d = add(forward, add(scale(right, x), scale(up, y)));
            let n = norm(d);
            let dir = scale(d, 1.0 / n);
            // Footprint grows with the off-axis stretch of the pixel.
            let cone = cone_scale * pixel / n;
            rays.push(Ray {
                origin,
                direction: cast3(dir),
                t_near,
                t_far,
                cone: F::lit(cone),
            });
        }
    }
    RayGrid { resolution, rays }
}

/// Stratified samples along one ray.
///
/// Each sample owns the segment between the midpoints to its neighbours; the
/// first segment starts at `t_near` and the last ends at `t_far`, so the
/// segment lengths tile the ray exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSamples<F> {
    pub t: Vec<F>,
    pub delta: Vec<F>,
    /// Gaussian radius of the footprint at each sample.
    pub radius: Vec<F>,
}

/// Splits `[t_near, t_far]` into `n` equal bins and draws one sample per bin.
///
/// Without a random source every sample sits at its bin center.
pub fn sample_segments<F: Real, R: Rng + ?Sized>(
    ray: &Ray<F>,
    n: usize,
    rng: Option<&mut R>,
) -> SegmentSamples<F> {
    let mut t = vec![F::zero(); n];
    fill_samples(ray.t_near, ray.t_far, rng, &mut t);
    let mut delta = vec![F::zero(); n];
    segment_lengths(ray.t_near, ray.t_far, &t, &mut delta);
    let radius = t.iter().map(|&ti| ray.cone * ti).collect();
    SegmentSamples { t, delta, radius }
}

pub(crate) fn fill_samples<F: Real, R: Rng + ?Sized>(
    t_near: F,
    t_far: F,
    rng: Option<&mut R>,
    out: &mut [F],
) {
    let n = out.len();
    assert!(n >= 1, "need at least one sample per ray");
    let bin = (t_far - t_near) / F::lit(n as f64);
    match rng {
        Some(rng) => {
            for (i, t) in out.iter_mut().enumerate() {
                let u: f64 = rng.gen();
                *t = t_near + bin * (F::lit(i as f64) + F::lit(u));
            }
        }
        None => {
            for (i, t) in out.iter_mut().enumerate() {
                *t = t_near + bin * F::lit(i as f64 + 0.5);
            }
        }
    }
}

pub(crate) fn segment_lengths<F: Real>(t_near: F, t_far: F, t: &[F], out: &mut [F]) {
    let n = t.len();
    let half = F::lit(0.5);
    let mut left = t_near;
    for i in 0..n {
        let right = if i + 1 < n { (t[i] + t[i + 1]) * half } else { t_far };
        out[i] = right - left;
        left = right;
    }
}

/// Azimuths in radians for `frames` equally spaced turntable views.
pub fn turntable_azimuths(frames: usize) -> Vec<f64> {
    (0..frames).map(|k| 2.0 * PI * k as f64 / frames as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn no_rng() -> Option<&'static mut StdRng> {
        None
    }

    #[test]
    fn default_pose_is_fixed_elevation_and_radius() {
        let mut rng = stream(0, 0, Purpose::Pose);
        let pose = sample_pose(&mut rng, AzimuthRange::full(), 30f64.to_radians(), 4.0, 1.2).unwrap();
        assert_eq!(pose.elevation, 30f64.to_radians());
        assert_eq!(pose.radius, 4.0);
        assert_eq!(pose.focal_scale, 1.2);
    }

    #[test]
    fn degenerate_range_pins_azimuth() {
        let mut rng = stream(1, 0, Purpose::Pose);
        let range = AzimuthRange::from_degrees(90.0, 90.0);
        for _ in 0..100 {
            let pose = sample_pose(&mut rng, range, 0.5, 4.0, 1.0).unwrap();
            assert_eq!(pose.azimuth, 90f64.to_radians());
        }
    }

    #[test]
    fn empty_range_is_a_config_error() {
        let mut rng = stream(1, 0, Purpose::Pose);
        let range = AzimuthRange { start: 2.0, end: 1.0 };
        assert!(matches!(sample_pose(&mut rng, range, 0.5, 4.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn azimuth_histogram_is_uniform() {
        // Pearson chi-square with 36 bins; the 0.99 quantile of chi2(35) is 57.34.
        let mut rng = stream(11, 0, Purpose::Pose);
        let bins = 36;
        let draws = 100_000;
        let mut counts = vec![0usize; bins];
        for _ in 0..draws {
            let pose = sample_pose(&mut rng, AzimuthRange::full(), 0.5, 4.0, 1.2).unwrap();
            let b = ((pose.azimuth / TAU) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        let expected = draws as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 57.34, "chi2 = {chi2}");
    }

    #[test]
    fn central_ray_points_at_look_target() {
        let pose = CameraPose::new(0.0, 0.0, 4.0, 1.0).unwrap();
        let shift = [0.1, -0.2, 0.3];
        let grid = camera_rays::<f64>(&pose, 5, shift, DEFAULT_CONE_SCALE);
        let center = grid.rays[2 * 5 + 2];
        let expected = normalize(sub(shift, center.origin));
        for k in 0..3 {
            assert!((center.direction[k] - expected[k]).abs() < 1e-12);
        }
        assert_eq!(center.origin, [4.1, -0.2, 0.3]);
    }

    #[test]
    fn grid_has_fixed_depth_range() {
        let pose = CameraPose::from_degrees(37.0, 30.0, 4.0, 1.2).unwrap();
        let grid = camera_rays::<f32>(&pose, 168, [0.0; 3], DEFAULT_CONE_SCALE);
        assert_eq!(grid.len(), 168 * 168);
        let span = 2.0 * 3f32.sqrt();
        for ray in &grid.rays {
            assert!((ray.t_far - ray.t_near - span).abs() < 1e-5);
        }
    }

    #[test]
    fn focal_scale_narrows_field_of_view() {
        let wide = CameraPose::new(0.3, 0.5, 4.0, 1.0).unwrap();
        let narrow = CameraPose { focal_scale: 1.2, ..wide };
        let res = 16;
        let corner_tan = |pose: &CameraPose| {
            let grid = camera_rays::<f64>(pose, res, [0.0; 3], DEFAULT_CONE_SCALE);
            let forward = normalize(scale(pose.offset(), -1.0));
            let d = grid.rays[0].direction;
            let c = dot(d, forward);
            (1.0 - c * c).sqrt() / c
        };
        let ratio = corner_tan(&wide) / corner_tan(&narrow);
        assert!((ratio - 1.2).abs() < 1e-12, "ratio = {ratio}");
    }

    #[test]
    fn unjittered_samples_are_bin_centers_with_equal_lengths() {
        let ray = Ray { origin: [0.0; 3], direction: [1.0, 0.0, 0.0], t_near: 1.0, t_far: 3.0, cone: 0.0 };
        let s = sample_segments::<f64, StdRng>(&ray, 4, no_rng());
        assert_eq!(s.t, vec![1.25, 1.75, 2.25, 2.75]);
        assert!(s.delta.iter().all(|&d| (d - 0.5).abs() < 1e-15));
    }

    #[test]
    fn training_and_test_sample_counts() {
        let ray = Ray { origin: [0.0; 3], direction: [0.0, 0.0, 1.0], t_near: 2.27, t_far: 5.73, cone: 0.01 };
        let mut rng = stream(0, 0, Purpose::Segments);
        assert_eq!(sample_segments(&ray, 192, Some(&mut rng)).t.len(), 192);
        assert_eq!(sample_segments(&ray, 512, Some(&mut rng)).t.len(), 512);
    }

    #[test]
    fn segment_lengths_tile_the_ray() {
        let ray = Ray { origin: [0.0; 3], direction: [0.0, 1.0, 0.0], t_near: 2.0, t_far: 6.0, cone: 0.0 };
        let mut rng = stream(3, 0, Purpose::Segments);
        let s = sample_segments(&ray, 37, Some(&mut rng));
        let total: f64 = s.delta.iter().sum();
        assert!((total - 4.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ray_directions_are_unit(az in 0.0..TAU, el in -1.5f64..1.5, res in 1usize..12, fs in 0.5f64..2.0) {
            let pose = CameraPose::new(az, el, 4.0, fs).unwrap();
            let grid = camera_rays::<f64>(&pose, res, [0.2, 0.0, -0.1], DEFAULT_CONE_SCALE);
            for ray in &grid.rays {
                prop_assert!((norm(ray.direction) - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn narrowing_range_keeps_elevation_and_radius(
            start in 0.0..3.0f64, width in 0.0..3.0f64, el in -1.0f64..1.0, r in 0.5f64..8.0, seed in any::<u64>()
        ) {
            let mut rng = stream(seed, 0, Purpose::Pose);
            let range = AzimuthRange { start, end: start + width };
            let pose = sample_pose(&mut rng, range, el, r, 1.2).unwrap();
            prop_assert_eq!(pose.elevation, el);
            prop_assert_eq!(pose.radius, r);
            prop_assert!(pose.azimuth >= start && pose.azimuth <= start + width);
        }
    }

    #[test]
    fn samples_sorted_and_contained_for_random_rays() {
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..1000 {
            let near: f64 = rng.gen_range(0.0..5.0);
            let far = near + rng.gen_range(1e-3..5.0);
            let n = rng.gen_range(1..64);
            let ray = Ray { origin: [0.0; 3], direction: [0.0, 0.0, 1.0], t_near: near, t_far: far, cone: 0.0 };
            let s = sample_segments(&ray, n, Some(&mut rng));
            assert!(s.t.windows(2).all(|w| w[0] < w[1]));
            assert!(s.t.iter().all(|&t| t >= near && t <= far));
            assert!(s.delta.iter().all(|&d| d > 0.0));
        }
    }
}
