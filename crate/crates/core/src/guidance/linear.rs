//! A linear image-text embedding: `g(I) = normalize(A · vec(I))`.
//!
//! It behaves like a contrastive model at the interface level (unit
//! embeddings, loss `-⟨g(I), h(y)⟩`) while having an exact closed-form pixel
//! gradient, which makes it useful for offline runs and protocol tests.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Caption, GuidanceResult, Scorer};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct LinearEmbedding {
    pub resolution: usize,
    /// `dim × (resolution² · 3)`.
    pub matrix: Array2<f64>,
    seed: u64,
}

impl LinearEmbedding {
    pub fn new(resolution: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = resolution * resolution * 3;
        let scale = 1.0 / (cols as f64).sqrt();
        let matrix = Array2::from_shape_simple_fn((dim, cols), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self { resolution, matrix, seed }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn check(&self, dim: (usize, usize, usize)) -> Result<()> {
        if dim != (self.resolution, self.resolution, 3) {
            return Err(Error::Shape(format!(
                "expected a {r}x{r}x3 image, got {dim:?}",
                r = self.resolution
            )));
        }
        Ok(())
    }

    fn project<F: Real>(&self, image: ArrayView3<'_, F>) -> Array1<f64> {
        let flat: Array1<f64> = image.iter().map(|v| v.to_f64_lossy()).collect();
        self.matrix.dot(&flat)
    }

    /// Unit-norm image embedding.
    pub fn embed_image<F: Real>(&self, image: ArrayView3<'_, F>) -> Result<Vec<f64>> {
        self.check(image.dim())?;
        let v = self.project(image);
        let n = v.dot(&v).sqrt();
        Ok(v.iter().map(|x| x / n).collect())
    }

    /// Deterministic unit-norm embedding of a caption.
    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        // FNV-1a of the caption, mixed with the model seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let v: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    /// `-⟨g(I), text⟩` and its gradient with respect to the image.
    pub fn loss_and_gradient<F: Real>(&self, image: ArrayView3<'_, F>, text: &[f64]) -> Result<GuidanceResult<F>> {
        self.check(image.dim())?;
        if text.len() != self.dim() {
            return Err(Error::Shape(format!("text embedding has {} entries, expected {}", text.len(), self.dim())));
        }
        let v = self.project(image);
        let norm = v.dot(&v).sqrt();
        let g = &v / norm;
        let h = Array1::from(text.to_vec());
        let cos = g.dot(&h);
        // d(-hᵀv/|v|)/dv = -(h - (hᵀg) g) / |v|
        let dv = (&h - &(&g * cos)) * (-1.0 / norm);
        let di = self.matrix.t().dot(&dv);
        let image_gradient = Array3::from_shape_vec(image.dim(), di.iter().map(|&x| F::lit(x)).collect())
            .expect("gradient matches image size");
        Ok(GuidanceResult { loss: -cos, image_gradient })
    }
}

/// In-process scorer backed by [`LinearEmbedding`].
#[derive(Clone, Debug)]
pub struct LinearEmbeddingScorer {
    pub model: LinearEmbedding,
    pub caption: Caption,
    text: Vec<f64>,
}

impl LinearEmbeddingScorer {
    pub fn new(model: LinearEmbedding, caption: impl Into<String>) -> Self {
        let mut caption = Caption::new(caption);
        let text = model.embed_text(&caption.text);
        caption.embedding = Some(text.iter().map(|&x| x as f32).collect());
        Self { model, caption, text }
    }
}

impl<F: Real> Scorer<F> for LinearEmbeddingScorer {
    fn input_resolution(&self) -> Option<usize> {
        Some(self.model.resolution)
    }

    fn score(&mut self, image: ArrayView3<'_, F>, _target: Option<ArrayView3<'_, F>>) -> Result<GuidanceResult<F>> {
        self.model.loss_and_gradient(image, &self.text)
    }
}
