//! Discrete emission-absorption volume rendering.
//!
//! Along a ray with samples `i = 1..N`:
//!
//! ```text
//! T_i = exp(-Σ_{j<i} σ_j δ_j)
//! w_i = T_i (1 - exp(-σ_i δ_i))
//! C   = Σ_i w_i c_i + T_final · background
//! ```
//!
//! Samples outside the scene cube have zero density and therefore zero
//! weight, so they are never sent to the field. Dropping them changes neither
//! the image nor any gradient.

use ndarray::{Array2, Array3, ArrayView3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::field::{inside_cube, FieldOutput, RadianceField};
use crate::geometry::{fill_samples, segment_lengths, RayGrid, Vec3};
use crate::real::Real;

/// Floor on the accumulated weight when normalizing depth.
pub const DEPTH_WEIGHT_FLOOR: f64 = 1e-8;

/// Per-sample transmittance, weights and the transmittance past the last sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmittanceWeights<F> {
    pub transmittance: Vec<F>,
    pub weights: Vec<F>,
    pub final_transmittance: F,
}

/// Evaluates transmittance and compositing weights for one ray.
pub fn transmittance_weights<F: Real>(sigmas: &[F], deltas: &[F]) -> TransmittanceWeights<F> {
    assert_eq!(sigmas.len(), deltas.len(), "one delta per sample");
    let mut transmittance = Vec::with_capacity(sigmas.len());
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut depth = F::zero();
    for (&s, &d) in sigmas.iter().zip(deltas) {
        let t = (-depth).exp();
        let od = s * d;
        transmittance.push(t);
        weights.push(t * -(-od).exp_m1());
        depth = depth + od;
    }
    TransmittanceWeights { transmittance, weights, final_transmittance: (-depth).exp() }
}

/// What shows through where the volume is transparent.
#[derive(Clone, Copy, Debug)]
pub enum Background<'a, F> {
    Constant(Vec3<F>),
    Image(ArrayView3<'a, F>),
}

impl<F: Real> Background<'_, F> {
    pub fn white() -> Self {
        Background::Constant([F::one(); 3])
    }

    pub fn black() -> Self {
        Background::Constant([F::zero(); 3])
    }

    fn check(&self, resolution: usize) -> Result<()> {
        if let Background::Image(img) = self {
            if img.dim() != (resolution, resolution, 3) {
                return Err(Error::Shape(format!(
                    "background is {:?} but the render is {resolution}x{resolution}x3",
                    img.dim()
                )));
            }
        }
        Ok(())
    }

    #[inline]
    fn at(&self, row: usize, col: usize) -> Vec3<F> {
        match self {
            Background::Constant(c) => *c,
            Background::Image(img) => [img[[row, col, 0]], img[[row, col, 1]], img[[row, col, 2]]],
        }
    }
}

/// Sample positions of a ray grid, restricted to points inside the cube.
#[derive(Clone, Debug)]
pub struct SampleLayout<F> {
    pub resolution: usize,
    /// `ray_offsets[r]..ray_offsets[r + 1]` indexes the points of ray `r`.
    pub ray_offsets: Vec<usize>,
    pub t: Vec<F>,
    pub delta: Vec<F>,
    pub points: Vec<Vec3<F>>,
    /// Isotropic footprint variance at each point.
    pub variances: Vec<F>,
    pub t_far: Vec<F>,
}

impl<F> SampleLayout<F> {
    pub fn point_count(&self) -> usize {
        self.points.len()
    }
}

/// Stratifies every ray into `samples` segments and keeps those inside the cube.
pub fn layout_samples<F: Real, R: Rng + ?Sized>(
    rays: &RayGrid<F>,
    samples: usize,
    mut rng: Option<&mut R>,
    half_side: F,
) -> SampleLayout<F> {
    let n_rays = rays.len();
    let mut layout = SampleLayout {
        resolution: rays.resolution,
        ray_offsets: Vec::with_capacity(n_rays + 1),
        t: Vec::new(),
        delta: Vec::new(),
        points: Vec::new(),
        variances: Vec::new(),
        t_far: Vec::with_capacity(n_rays),
    };
    let mut t = vec![F::zero(); samples];
    let mut delta = vec![F::zero(); samples];
    layout.ray_offsets.push(0);
    for ray in &rays.rays {
        fill_samples(ray.t_near, ray.t_far, rng.as_deref_mut(), &mut t);
        segment_lengths(ray.t_near, ray.t_far, &t, &mut delta);
        for (&ti, &di) in t.iter().zip(&delta) {
            let p = ray.at(ti);
            if inside_cube(&p, half_side) {
                let radius = ray.cone * ti;
                layout.t.push(ti);
                layout.delta.push(di);
                layout.points.push(p);
                layout.variances.push(radius * radius);
            }
        }
        layout.ray_offsets.push(layout.points.len());
        layout.t_far.push(ray.t_far);
    }
    layout
}

/// A rendered view.
#[derive(Clone, Debug)]
pub struct RenderOutput<F> {
    /// `H × W × 3`, composited over the background.
    pub rgb: Array3<F>,
    pub final_transmittance: Array2<F>,
    pub depth: Array2<F>,
    /// Weighted mean of sample positions over the whole image; NaN when
    /// nothing was hit.
    pub center_of_mass: Vec3<F>,
    /// Compositing weight of every point in the layout.
    pub sample_weights: Vec<F>,
}

impl<F: Real> RenderOutput<F> {
    pub fn mean_transmittance(&self) -> F {
        self.final_transmittance.mean().unwrap_or(F::one())
    }
}

/// Composites field samples along every ray of `layout`.
pub fn composite<F: Real>(
    layout: &SampleLayout<F>,
    field: &FieldOutput<F>,
    background: &Background<'_, F>,
) -> Result<RenderOutput<F>> {
    let res = layout.resolution;
    background.check(res)?;
    if field.sigma.len() != layout.point_count() || field.color.len() != layout.point_count() {
        return Err(Error::Shape("field output does not match the sample layout".into()));
    }
    let mut rgb = Array3::<F>::zeros((res, res, 3));
    let mut final_t = Array2::<F>::zeros((res, res));
    let mut depth = Array2::<F>::zeros((res, res));
    let mut sample_weights = Vec::with_capacity(layout.point_count());
    let mut com = [F::zero(); 3];
    let mut total_w = F::zero();
    let floor = F::lit(DEPTH_WEIGHT_FLOOR);

    for r in 0..res * res {
        let (row, col) = (r / res, r % res);
        let range = layout.ray_offsets[r]..layout.ray_offsets[r + 1];
        let tw = transmittance_weights(&field.sigma[range.clone()], &layout.delta[range.clone()]);
        let mut c = [F::zero(); 3];
        let mut wsum = F::zero();
        let mut wt = F::zero();
        for (k, &w) in range.clone().zip(&tw.weights) {
            for ch in 0..3 {
                c[ch] = c[ch] + w * field.color[k][ch];
                com[ch] = com[ch] + w * layout.points[k][ch];
            }
            wsum = wsum + w;
            wt = wt + w * layout.t[k];
        }
        sample_weights.extend_from_slice(&tw.weights);
        total_w = total_w + wsum;
        let bg = background.at(row, col);
        for ch in 0..3 {
            rgb[[row, col, ch]] = c[ch] + tw.final_transmittance * bg[ch];
        }
        final_t[[row, col]] = tw.final_transmittance;
        depth[[row, col]] = if wsum > floor { wt / wsum.max(floor) } else { layout.t_far[r] };
    }
    let center_of_mass = if total_w > F::zero() {
        [com[0] / total_w, com[1] / total_w, com[2] / total_w]
    } else {
        [F::nan(); 3]
    };
    Ok(RenderOutput { rgb, final_transmittance: final_t, depth, center_of_mass, sample_weights })
}

/// Gradients of the loss with respect to per-point density and color.
#[derive(Clone, Debug)]
pub struct SampleGrads<F> {
    pub d_sigma: Vec<F>,
    pub d_color: Vec<Vec3<F>>,
}

/// Backpropagates `∂L/∂rgb` and `∂L/∂T_final` through [`composite`].
pub fn composite_backward<F: Real>(
    layout: &SampleLayout<F>,
    field: &FieldOutput<F>,
    output: &RenderOutput<F>,
    background: &Background<'_, F>,
    d_rgb: &Array3<F>,
    d_transmittance: &Array2<F>,
) -> Result<SampleGrads<F>> {
    let res = layout.resolution;
    background.check(res)?;
    if d_rgb.dim() != (res, res, 3) || d_transmittance.dim() != (res, res) {
        return Err(Error::Shape("upstream image gradients do not match the render".into()));
    }
    let n = layout.point_count();
    let mut d_sigma = vec![F::zero(); n];
    let mut d_color = vec![[F::zero(); 3]; n];
    for r in 0..res * res {
        let (row, col) = (r / res, r % res);
        let (a, b) = (layout.ray_offsets[r], layout.ray_offsets[r + 1]);
        if a == b {
            continue;
        }
        let g = [d_rgb[[row, col, 0]], d_rgb[[row, col, 1]], d_rgb[[row, col, 2]]];
        let bg = background.at(row, col);
        let t_final = output.final_transmittance[[row, col]];
        let g_t = d_transmittance[[row, col]] + g[0] * bg[0] + g[1] * bg[1] + g[2] * bg[2];
        let tw = transmittance_weights(&field.sigma[a..b], &layout.delta[a..b]);
        // Walk back to front keeping the suffix sum of w_i (g·c_i) for i > k.
        let mut suffix = F::zero();
        for k in (a..b).rev() {
            let local = k - a;
            let t_next = tw.transmittance.get(local + 1).copied().unwrap_or(tw.final_transmittance);
            let w = tw.weights[local];
            let c = field.color[k];
            let s = g[0] * c[0] + g[1] * c[1] + g[2] * c[2];
            d_sigma[k] = layout.delta[k] * (t_next * s - suffix - g_t * t_final);
            d_color[k] = [w * g[0], w * g[1], w * g[2]];
            suffix = suffix + w * s;
        }
    }
    Ok(SampleGrads { d_sigma, d_color })
}

/// Renders `field` for every ray in `rays`.
pub fn render_rays<F: Real, R: Rng + ?Sized>(
    field: &dyn RadianceField<F>,
    rays: &RayGrid<F>,
    samples: usize,
    rng: Option<&mut R>,
    half_side: f64,
    background: &Background<'_, F>,
) -> Result<RenderOutput<F>> {
    let layout = layout_samples(rays, samples, rng, F::lit(half_side));
    let out = field.query(&layout.points, &layout.variances)?;
    composite(&layout, &out, background)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{Slab, SphereScene};
    use crate::geometry::{camera_rays, CameraPose, Ray, DEFAULT_CONE_SCALE};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn empty_medium_passes_everything() {
        let tw = transmittance_weights(&[0.0f64; 10], &[0.1; 10]);
        assert!(tw.transmittance.iter().all(|&t| t == 1.0));
        assert!(tw.weights.iter().all(|&w| w == 0.0));
        assert_eq!(tw.final_transmittance, 1.0);
    }

    #[test]
    fn constant_density_is_beer_lambert() {
        let deltas = [0.3, 0.1, 0.25, 0.05, 0.4];
        let sigma = 1.7;
        let tw = transmittance_weights(&[sigma; 5], &deltas);
        let length: f64 = deltas.iter().sum();
        assert!((tw.final_transmittance - (-sigma * length).exp()).abs() < 1e-6);
    }

    #[test]
    fn weights_and_final_transmittance_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..20.0)).collect();
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-3..0.2)).collect();
            let tw = transmittance_weights(&s, &d);
            let total: f64 = tw.weights.iter().sum::<f64>() + tw.final_transmittance;
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    struct Empty;
    impl RadianceField<f64> for Empty {
        fn query(&self, points: &[Vec3<f64>], _: &[f64]) -> Result<FieldOutput<f64>> {
            Ok(FieldOutput { sigma: vec![0.0; points.len()], color: vec![[0.3, 0.2, 0.1]; points.len()] })
        }
    }

    #[test]
    fn empty_field_shows_white_background() {
        let pose = CameraPose::from_degrees(20.0, 30.0, 4.0, 1.2).unwrap();
        let rays = camera_rays::<f64>(&pose, 12, [0.0; 3], DEFAULT_CONE_SCALE);
        let out = render_rays::<f64, StdRng>(&Empty, &rays, 32, None, 1.0, &Background::white()).unwrap();
        assert!(out.rgb.iter().all(|&v| v == 1.0));
        assert!(out.final_transmittance.iter().all(|&t| t == 1.0));
        assert!(out.center_of_mass.iter().all(|c| c.is_nan()));
        for (r, &d) in out.depth.iter().enumerate() {
            assert_eq!(d, rays.rays[r].t_far);
        }
    }

    #[test]
    fn opaque_slab_shows_its_color() {
        let slab = Slab { sigma: 1000.0, color: [0.2, 0.6, 0.9], normal: [1.0, 0.0, 0.0] };
        let pose = CameraPose::new(0.0, 0.0, 4.0, 1.2).unwrap();
        let rays = camera_rays::<f64>(&pose, 16, [0.0; 3], DEFAULT_CONE_SCALE);
        let out = render_rays::<f64, StdRng>(&slab, &rays, 512, None, 1.0, &Background::black()).unwrap();
        // The central rays cross the face x = 1 of the cube and enter the slab x <= 0.
        for row in 6..10 {
            for col in 6..10 {
                for ch in 0..3 {
                    assert!((out.rgb[[row, col, ch]] - slab.color[ch]).abs() < 1e-3);
                }
                assert!(out.final_transmittance[[row, col]] < 1e-3);
            }
        }
    }

    #[test]
    fn mirrored_spheres_center_of_mass_on_axis() {
        // Mirror-symmetric about x = 0 and z = 0 as seen from +y; the visible
        // mass sits on the camera-facing surfaces, so y is biased forward.
        let mut scene = SphereScene::two_spheres();
        for s in &mut scene.spheres {
            s.center[1] = 0.0;
        }
        let pose = CameraPose::from_degrees(90.0, 0.0, 4.0, 1.0).unwrap();
        let rays = camera_rays::<f64>(&pose, 48, [0.0; 3], DEFAULT_CONE_SCALE);
        let out = render_rays::<f64, StdRng>(&scene, &rays, 256, None, 1.0, &Background::white()).unwrap();
        let com = out.center_of_mass;
        assert!(com[0].abs() < 1e-6 && com[2].abs() < 1e-6, "{com:?}");
        assert!(com[1] > 0.0 && com[1] < 0.38, "{com:?}");
    }

    #[test]
    fn mismatched_background_is_rejected() {
        let pose = CameraPose::new(0.0, 0.0, 4.0, 1.0).unwrap();
        let rays = camera_rays::<f64>(&pose, 4, [0.0; 3], DEFAULT_CONE_SCALE);
        let bg = Array3::<f64>::zeros((5, 5, 3));
        let r = render_rays::<f64, StdRng>(&Empty, &rays, 8, None, 1.0, &Background::Image(bg.view()));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(3);
        let ray = Ray { origin: [-3.0, 0.1, 0.05], direction: [1.0, 0.0, 0.0], t_near: 2.0, t_far: 4.0, cone: 0.0 };
        let rays = RayGrid { resolution: 1, rays: vec![ray] };
        let layout = layout_samples::<f64, StdRng>(&rays, 12, None, 1.0);
        let n = layout.point_count();
        assert!(n > 0);
        let field = FieldOutput {
            sigma: (0..n).map(|_| rng.gen_range(0.0..3.0)).collect(),
            color: (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
        };
        let bg = [0.3, 0.5, 0.7];
        let g_rgb = Array3::from_shape_fn((1, 1, 3), |(_, _, c)| [0.4, -1.1, 0.8][c]);
        let g_t = Array2::from_elem((1, 1), 0.6);
        let loss = |f: &FieldOutput<f64>| {
            let out = composite(&layout, f, &Background::Constant(bg)).unwrap();
            (0..3).map(|c| out.rgb[[0, 0, c]] * g_rgb[[0, 0, c]]).sum::<f64>() + 0.6 * out.final_transmittance[[0, 0]]
        };
        let out = composite(&layout, &field, &Background::Constant(bg)).unwrap();
        let grads = composite_backward(&layout, &field, &out, &Background::Constant(bg), &g_rgb, &g_t).unwrap();
        let h = 1e-6;
        for k in 0..n {
            let mut p = field.clone();
            p.sigma[k] += h;
            let mut m = field.clone();
            m.sigma[k] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grads.d_sigma[k]).abs() < 1e-8, "sigma {k}: {fd} vs {}", grads.d_sigma[k]);
            for c in 0..3 {
                let mut p = field.clone();
                p.color[k][c] += h;
                let mut m = field.clone();
                m.color[k][c] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - grads.d_color[k][c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn denser_medium_never_transmits_more() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..500 {
            let n = rng.gen_range(1..30);
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
            let bumped: Vec<f64> = s.iter().map(|&x| x + rng.gen_range(0.0..2.0)).collect();
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-3..0.3)).collect();
            assert!(transmittance_weights(&bumped, &d).final_transmittance <= transmittance_weights(&s, &d).final_transmittance);
        }
    }
}
