//! Total loss: guidance plus a sparsity regularizer on rendered transmittance.

use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Clamp applied to transmittance before taking logs in the beta prior.
pub const BETA_PRIOR_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    /// Guidance only.
    None,
    /// Guidance only; density noise is injected by the field.
    PerturbDensity,
    /// `λ · mean(log T + log(1 - T))`.
    BetaPrior,
    /// Guidance scaled by `min(τ, mean T)`.
    Gated,
    /// Guidance plus `λ · -min(τ, mean T)`.
    Additive,
}

impl FromStr for SparsityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SparsityMode::None),
            "perturb" | "perturb_density" => Ok(SparsityMode::PerturbDensity),
            "beta" | "beta_prior" => Ok(SparsityMode::BetaPrior),
            "gated" => Ok(SparsityMode::Gated),
            "additive" => Ok(SparsityMode::Additive),
            other => Err(Error::Config(format!("unknown sparsity mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SparsityConfig {
    pub mode: SparsityMode,
    pub tau_target: f64,
    pub tau_start: f64,
    pub anneal_iters: u64,
    pub lambda: f64,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self { mode: SparsityMode::Additive, tau_target: 0.88, tau_start: 0.40, anneal_iters: 500, lambda: 0.5 }
    }
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_target > 0.0 && self.tau_target <= 1.0) {
            return Err(Error::Config(format!("tau target {} must lie in (0, 1]", self.tau_target)));
        }
        if !(self.tau_start >= 0.0 && self.tau_start <= self.tau_target) {
            return Err(Error::Config(format!(
                "tau start {} must lie in [0, tau target = {}]",
                self.tau_start, self.tau_target
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        Ok(())
    }
}

/// Target transmittance at `iteration`: linear from `tau_start` to
/// `tau_target` over `anneal_iters`, constant afterwards.
pub fn anneal_tau(iteration: u64, config: &SparsityConfig) -> f64 {
    if config.anneal_iters == 0 || iteration >= config.anneal_iters {
        return config.tau_target;
    }
    let frac = iteration as f64 / config.anneal_iters as f64;
    config.tau_start + (config.tau_target - config.tau_start) * frac
}

/// `-min(τ, mean T)` and its derivative with respect to `mean T`.
///
/// The derivative is taken as zero at the kink.
pub fn loss_transmittance(mean_transmittance: f64, tau: f64) -> (f64, f64) {
    if mean_transmittance < tau {
        (-mean_transmittance, -1.0)
    } else {
        (-tau, 0.0)
    }
}

/// Total loss with its partial derivatives.
#[derive(Clone, Debug)]
pub struct TotalLoss<F> {
    pub value: f64,
    /// `∂L/∂(guidance loss)`.
    pub d_guidance: f64,
    /// `∂L/∂T` for every pixel of the transmittance map.
    pub d_transmittance: Array2<F>,
}

/// Combines the guidance loss with the configured sparsity term.
pub fn loss_total<F: Real>(
    guidance: f64,
    transmittance: &Array2<F>,
    tau: f64,
    config: &SparsityConfig,
) -> TotalLoss<F> {
    let pixels = transmittance.len().max(1) as f64;
    let mean_t = transmittance.iter().map(|t| t.to_f64_lossy()).sum::<f64>() / pixels;
    let uniform = |d_mean: f64| Array2::from_elem(transmittance.dim(), F::lit(d_mean / pixels));
    match config.mode {
        SparsityMode::None | SparsityMode::PerturbDensity => TotalLoss {
            value: guidance,
            d_guidance: 1.0,
            d_transmittance: Array2::zeros(transmittance.dim()),
        },
        SparsityMode::Additive => {
            let (lt, dlt) = loss_transmittance(mean_t, tau);
            TotalLoss { value: guidance + config.lambda * lt, d_guidance: 1.0, d_transmittance: uniform(config.lambda * dlt) }
        }
        SparsityMode::Gated => {
            let (gate, d_gate) = if mean_t < tau { (mean_t, 1.0) } else { (tau, 0.0) };
            TotalLoss { value: gate * guidance, d_guidance: gate, d_transmittance: uniform(d_gate * guidance) }
        }
        SparsityMode::BetaPrior => {
            let lo = BETA_PRIOR_CLAMP;
            let hi = 1.0 - BETA_PRIOR_CLAMP;
            let mut total = 0.0;
            let d = transmittance.mapv(|t| {
                let raw = t.to_f64_lossy();
                let c = raw.clamp(lo, hi);
                total += c.ln() + (1.0 - c).ln();
                let slope = if raw > lo && raw < hi { 1.0 / c - 1.0 / (1.0 - c) } else { 0.0 };
                F::lit(config.lambda * slope / pixels)
            });
            TotalLoss { value: guidance + config.lambda * total / pixels, d_guidance: 1.0, d_transmittance: d }
        }
    }
}

/// Rescales τ so the expected object cross-section stays fixed when the
/// focal length or camera distance changes: `1 - τ ∝ f² / d²`.
pub fn scale_tau_for_camera(tau: f64, focal_scale: f64, distance: f64, reference_focal: f64, reference_distance: f64) -> f64 {
    let opaque = (1.0 - tau) * (focal_scale / reference_focal).powi(2) * (reference_distance / distance).powi(2);
    (1.0 - opaque).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}
