//! Image scorers that drive the optimization.
//!
//! The optimizer only sees [`Scorer`]: given a processed render it returns a
//! scalar loss and the gradient of that loss with respect to every pixel.
//! Differentiation through rendering, cropping and resizing happens on this
//! side of the boundary.

mod linear;
mod remote;
pub mod wire;

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::real::Real;

pub use linear::{LinearEmbedding, LinearEmbeddingScorer};
pub use remote::{embed_batch, EmbedItems, ModelInfo, RemoteScorer, RetryPolicy, ServiceClient};

/// Loss and `∂loss/∂pixel` for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceResult<F> {
    pub loss: f64,
    pub image_gradient: Array3<F>,
}

/// A caption and, once computed, its unit-norm text embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    pub text: String,
    pub embedding: Option<Vec<f32>>,
}

impl Caption {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into(), embedding: None }
    }
}

/// Anything that can score a rendered image.
pub trait Scorer<F: Real> {
    /// Side length the scorer expects; `None` accepts crops unchanged.
    fn input_resolution(&self) -> Option<usize>;

    /// Whether [`Scorer::score`] needs a target image.
    fn needs_target(&self) -> bool {
        false
    }

    fn score(&mut self, image: ArrayView3<'_, F>, target: Option<ArrayView3<'_, F>>) -> Result<GuidanceResult<F>>;
}

/// Mean squared error against `target`.
pub fn score_photometric<F: Real>(image: ArrayView3<'_, F>, target: ArrayView3<'_, F>) -> Result<GuidanceResult<F>> {
    if image.dim() != target.dim() {
        return Err(Error::Shape(format!("image {:?} vs target {:?}", image.dim(), target.dim())));
    }
    let n = image.len().max(1) as f64;
    let diff = &image - &target;
    let loss = diff.iter().map(|d| d.to_f64_lossy().powi(2)).sum::<f64>() / n;
    let scale = F::lit(2.0 / n);
    let image_gradient = diff.mapv(|d| d * scale);
    Ok(GuidanceResult { loss, image_gradient })
}

/// Reconstruction oracle: scores renders by MSE against posed targets.
#[derive(Clone, Copy, Debug, Default)]
pub struct PhotometricScorer;

impl<F: Real> Scorer<F> for PhotometricScorer {
    fn input_resolution(&self) -> Option<usize> {
        None
    }

    fn needs_target(&self) -> bool {
        true
    }

    fn score(&mut self, image: ArrayView3<'_, F>, target: Option<ArrayView3<'_, F>>) -> Result<GuidanceResult<F>> {
        let target = target.ok_or_else(|| Error::Argument("the photometric scorer needs a target image".into()))?;
        score_photometric(image, target)
    }
}
