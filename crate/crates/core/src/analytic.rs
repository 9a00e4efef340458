//! Closed-form scenes used as ground truth for rendering and reconstruction.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::{FieldOutput, RadianceField};
use crate::geometry::{dot, sub, Vec3};
use crate::real::Real;

/// A constant-density, constant-color ball.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Vec3<f64>,
    pub radius: f64,
    pub sigma: f64,
    pub color: Vec3<f64>,
}

/// Union of disjoint spheres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereScene {
    pub spheres: Vec<Sphere>,
}

impl SphereScene {
    /// Two spheres placed symmetrically about the origin: an orange one on
    /// the +x side and a blue one on the -x side.
    pub fn two_spheres() -> Self {
        Self {
            spheres: vec![
                Sphere { center: [0.45, 0.1, 0.0], radius: 0.38, sigma: 40.0, color: [0.95, 0.55, 0.15] },
                Sphere { center: [-0.45, -0.1, 0.0], radius: 0.38, sigma: 40.0, color: [0.15, 0.35, 0.9] },
            ],
        }
    }
}

impl<F: Real> RadianceField<F> for SphereScene {
    fn query(&self, points: &[Vec3<F>], _variances: &[F]) -> Result<FieldOutput<F>> {
        let mut out = FieldOutput { sigma: vec![F::zero(); points.len()], color: vec![[F::zero(); 3]; points.len()] };
        for (k, p) in points.iter().enumerate() {
            let p = [p[0].to_f64_lossy(), p[1].to_f64_lossy(), p[2].to_f64_lossy()];
            for s in &self.spheres {
                let d = sub(p, s.center);
                if dot(d, d) <= s.radius * s.radius {
                    out.sigma[k] = F::lit(s.sigma);
                    out.color[k] = [F::lit(s.color[0]), F::lit(s.color[1]), F::lit(s.color[2])];
                    break;
                }
            }
        }
        Ok(out)
    }
}

/// Dense half-space `{x : x·normal ≤ 0}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slab {
    pub sigma: f64,
    pub color: Vec3<f64>,
    pub normal: Vec3<f64>,
}

impl<F: Real> RadianceField<F> for Slab {
    fn query(&self, points: &[Vec3<F>], _variances: &[F]) -> Result<FieldOutput<F>> {
        let color = [F::lit(self.color[0]), F::lit(self.color[1]), F::lit(self.color[2])];
        let normal = [F::lit(self.normal[0]), F::lit(self.normal[1]), F::lit(self.normal[2])];
        let sigma = points
            .iter()
            .map(|p| if dot(*p, normal) <= F::zero() { F::lit(self.sigma) } else { F::zero() })
            .collect();
        Ok(FieldOutput { sigma, color: vec![color; points.len()] })
    }
}

/// Smooth Gaussian density blob with a position-dependent color.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianBlob {
    pub center: Vec3<f64>,
    pub width: f64,
    pub peak: f64,
}

impl<F: Real> RadianceField<F> for GaussianBlob {
    fn query(&self, points: &[Vec3<F>], _variances: &[F]) -> Result<FieldOutput<F>> {
        let mut out = FieldOutput::default();
        for p in points {
            let p = [p[0].to_f64_lossy(), p[1].to_f64_lossy(), p[2].to_f64_lossy()];
            let d = sub(p, self.center);
            let r2 = dot(d, d) / (self.width * self.width);
            out.sigma.push(F::lit(self.peak * (-0.5 * r2).exp()));
            out.color.push([
                F::lit(0.5 + 0.4 * p[0].tanh()),
                F::lit(0.5 + 0.4 * p[1].tanh()),
                F::lit(0.5 + 0.4 * p[2].tanh()),
            ]);
        }
        Ok(out)
    }
}
