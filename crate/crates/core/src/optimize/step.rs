//! One differentiable evaluation of the training objective.
//!
//! Forward: rays → stratified samples → field → composite → crop → resize →
//! score, plus the sparsity term on the rendered transmittance. Backward runs
//! the same chain in reverse and accumulates parameter gradients.

use ndarray::{s, Array3, ArrayView3};
use rand_chacha::ChaCha8Rng;

use crate::augment::{crop_at, crop_backward, resize_bilinear, resize_bilinear_backward, CropOffset};
use crate::encoding::FourierBasis;
use crate::error::{Error, Result};
use crate::field::{density_noise, field_backward, field_forward, FieldParams};
use crate::geometry::{camera_rays, CameraPose, RayGrid, Vec3};
use crate::guidance::Scorer;
use crate::objective::{loss_total, SparsityConfig, SparsityMode};
use crate::real::Real;
use crate::render::{composite, composite_backward, layout_samples, Background, RenderOutput};

/// A `size²` window of the rendered image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub offset: CropOffset,
    pub size: usize,
}

/// Everything one evaluation depends on besides the parameters.
#[derive(Clone, Debug)]
pub struct StepSpec<'a, F> {
    pub pose: CameraPose,
    pub origin: Vec3<F>,
    pub resolution: usize,
    pub samples: usize,
    pub cone_scale: f64,
    pub half_side: f64,
    /// Full-resolution background.
    pub background: Background<'a, F>,
    pub crop: Option<Crop>,
    pub tau: f64,
    pub sparsity: SparsityConfig,
    /// Stratification stream; `None` puts samples at bin centers.
    pub segments: Option<ChaCha8Rng>,
    /// Density noise stream and scale.
    pub perturb: Option<(ChaCha8Rng, f64)>,
    /// Full-resolution target for scorers that need one.
    pub target: Option<ArrayView3<'a, F>>,
    /// Render only the crop window when nothing else affects the loss.
    pub render_window: bool,
}

impl<F: Real> StepSpec<'_, F> {
    /// True when the crop window alone is rendered: windowing was requested
    /// and no pixel outside the crop affects the loss.
    pub fn crop_only(&self) -> bool {
        let t_free = match self.sparsity.mode {
            SparsityMode::None | SparsityMode::PerturbDensity => true,
            SparsityMode::Additive | SparsityMode::BetaPrior => self.sparsity.lambda == 0.0,
            SparsityMode::Gated => false,
        };
        t_free && self.render_window && self.crop.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome<F> {
    pub total: f64,
    pub guidance: f64,
    /// Mean transmittance over the rendered pixels.
    pub mean_transmittance: f64,
    pub center_of_mass: Vec3<f64>,
    pub render: RenderOutput<F>,
}

fn finite<F: Real>(what: &str, mut values: impl Iterator<Item = F>) -> Result<()> {
    if values.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn window<F: Copy>(grid: &RayGrid<F>, crop: Crop) -> RayGrid<F> {
    let res = grid.resolution;
    let rays = (0..crop.size)
        .flat_map(|r| {
            let row = crop.offset.row + r;
            (0..crop.size).map(move |c| row * res + crop.offset.col + c)
        })
        .map(|i| grid.rays[i])
        .collect();
    RayGrid { resolution: crop.size, rays }
}

fn prepare<F: Real>(image: ArrayView3<'_, F>, crop: Option<Crop>, input: Option<usize>) -> Array3<F> {
    let cropped = match crop {
        Some(c) => crop_at(image, c.offset, c.size),
        None => image.to_owned(),
    };
    match input {
        Some(r) if r != cropped.dim().0 => resize_bilinear(cropped.view(), r),
        _ => cropped,
    }
}

/// Evaluates the loss and, when `grads` is given, accumulates `∂loss/∂θ`.
pub fn evaluate<F: Real>(
    params: &FieldParams<F>,
    basis: &FourierBasis,
    spec: &StepSpec<'_, F>,
    scorer: &mut dyn Scorer<F>,
    grads: Option<&mut FieldParams<F>>,
) -> Result<StepOutcome<F>> {
    let full = camera_rays::<F>(&spec.pose, spec.resolution, spec.origin, spec.cone_scale);
    let crop_only = spec.crop_only();
    let (rays, image_crop, background) = match spec.crop {
        Some(c) if crop_only => {
            let bg = match spec.background {
                Background::Image(img) => Background::Image(img.slice_move(s![
                    c.offset.row..c.offset.row + c.size,
                    c.offset.col..c.offset.col + c.size,
                    ..
                ])),
                other => other,
            };
            (window(&full, c), None, bg)
        }
        other => (full, other, spec.background),
    };

    let mut segments = spec.segments.clone();
    let layout = layout_samples(&rays, spec.samples, segments.as_mut(), F::lit(spec.half_side));
    let noise = spec.perturb.clone().map(|(mut rng, sigma)| density_noise::<F, _>(&mut rng, layout.point_count(), sigma));
    let field = field_forward(params, basis, &layout.points, &layout.variances, noise.as_deref())?;
    finite("field_forward", field.sigma.iter().copied().chain(field.color.iter().flatten().copied()))?;
    let render = composite(&layout, &field, &background)?;
    finite("composite", render.rgb.iter().copied())?;

    let input = scorer.input_resolution();
    let image = prepare(render.rgb.view(), image_crop, input);
    let target = if scorer.needs_target() {
        let t = spec.target.ok_or_else(|| Error::Argument("the scorer needs a target image".into()))?;
        let t = if crop_only {
            let c = spec.crop.expect("crop_only implies a crop");
            t.slice_move(s![c.offset.row..c.offset.row + c.size, c.offset.col..c.offset.col + c.size, ..])
        } else {
            t
        };
        Some(prepare(t, image_crop, input))
    } else {
        None
    };
    let scored = scorer.score(image.view(), target.as_ref().map(|t| t.view()))?;
    if scored.image_gradient.dim() != image.dim() {
        return Err(Error::Shape(format!(
            "scorer returned a {:?} gradient for a {:?} image",
            scored.image_gradient.dim(),
            image.dim()
        )));
    }
    if !scored.loss.is_finite() {
        return Err(Error::NonFinite("guidance loss".into()));
    }
    let loss = loss_total(scored.loss, &render.final_transmittance, spec.tau, &spec.sparsity);
    let mean_transmittance = render.mean_transmittance().to_f64_lossy();
    let com = render.center_of_mass;
    let center_of_mass = [com[0].to_f64_lossy(), com[1].to_f64_lossy(), com[2].to_f64_lossy()];

    if let Some(grads) = grads {
        let d_image = scored.image_gradient.mapv(|g| g * F::lit(loss.d_guidance));
        finite("guidance gradient", d_image.iter().copied())?;
        let rendered = render.rgb.dim().0;
        let pre_resize = image_crop.map_or(rendered, |c| c.size);
        let d_crop = match input {
            Some(r) if r != pre_resize => resize_bilinear_backward(d_image.view(), pre_resize, pre_resize),
            _ => d_image,
        };
        let d_rgb = match image_crop {
            Some(c) => crop_backward(d_crop.view(), c.offset, rendered, rendered),
            None => d_crop,
        };
        let sample_grads = composite_backward(&layout, &field, &render, &background, &d_rgb, &loss.d_transmittance)?;
        finite("composite_backward", sample_grads.d_sigma.iter().copied())?;
        field_backward(
            params,
            basis,
            &layout.points,
            &layout.variances,
            noise.as_deref(),
            &sample_grads.d_sigma,
            &sample_grads.d_color,
            grads,
        )?;
        finite("field_backward", grads.iter().copied())?;
    }
    Ok(StepOutcome { total: loss.value, guidance: scored.loss, mean_transmittance, center_of_mass, render })
}
