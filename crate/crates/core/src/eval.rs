//! Evaluation renders and caption retrieval.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::NeuralField;
use crate::geometry::{camera_rays, turntable_azimuths, CameraPose, CUBE_HALF_DIAGONAL, DEFAULT_CONE_SCALE};
use crate::imageio::{save_gray16_png, save_rgb_png};
use crate::optimize::TrainState;
use crate::render::{render_rays, Background, RenderOutput};

/// Elevation of evaluation cameras, in degrees.
pub const EVAL_ELEVATION_DEG: f64 = 45.0;
/// Samples per ray for evaluation renders.
pub const EVAL_SAMPLES: usize = 512;

/// Peak signal-to-noise ratio for images in `[0, 1]`.
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64;
    Ok(-10.0 * mse.log10())
}

/// Camera and sampling for evaluation renders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewSettings {
    pub resolution: usize,
    pub samples: usize,
    pub half_side: f64,
    pub cone_scale: f64,
}

impl Default for ViewSettings {
    fn default() -> Self {
        Self { resolution: 168, samples: EVAL_SAMPLES, half_side: 1.0, cone_scale: DEFAULT_CONE_SCALE }
    }
}

/// Deterministic white-background render of the trained field.
pub fn render_view(state: &TrainState, pose: &CameraPose, view: &ViewSettings) -> Result<RenderOutput<f32>> {
    let field = NeuralField { params: &state.params, basis: &state.basis, noise: None };
    let rays = camera_rays::<f32>(pose, view.resolution, state.origin.origin, view.cone_scale);
    render_rays::<f32, rand::rngs::StdRng>(&field, &rays, view.samples, None, view.half_side, &Background::white())
}

/// Renders at each azimuth (degrees) and the given elevation.
pub fn heldout_render(
    state: &TrainState,
    elevation_deg: f64,
    azimuths_deg: &[f64],
    radius: f64,
    focal_scale: f64,
    view: &ViewSettings,
) -> Result<Vec<RenderOutput<f32>>> {
    azimuths_deg
        .iter()
        .map(|&az| render_view(state, &CameraPose::from_degrees(az, elevation_deg, radius, focal_scale)?, view))
        .collect()
}

/// `frames` renders orbiting the object at equal azimuth steps.
pub fn turntable(
    state: &TrainState,
    frames: usize,
    elevation_deg: f64,
    radius: f64,
    focal_scale: f64,
    view: &ViewSettings,
) -> Result<Vec<RenderOutput<f32>>> {
    if frames == 0 {
        return Err(Error::Argument("a turntable needs at least one frame".into()));
    }
    let azimuths: Vec<f64> = turntable_azimuths(frames).iter().map(|a| a.to_degrees()).collect();
    heldout_render(state, elevation_deg, &azimuths, radius, focal_scale, view)
}

/// Writes `frame_NNN.png`, `depth_NNN.png` and `transmittance_NNN.png`.
///
/// Depth is scaled so the near and far planes of a camera at `radius` map to
/// black and white.
pub fn write_frames(dir: &Path, renders: &[RenderOutput<f32>], radius: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let near = (radius - CUBE_HALF_DIAGONAL) as f32;
    let far = (radius + CUBE_HALF_DIAGONAL) as f32;
    for (i, r) in renders.iter().enumerate() {
        save_rgb_png(&dir.join(format!("frame_{i:03}.png")), &r.rgb)?;
        save_gray16_png(&dir.join(format!("depth_{i:03}.png")), &r.depth, near, far)?;
        save_gray16_png(&dir.join(format!("transmittance_{i:03}.png")), &r.final_transmittance, 0.0, 1.0)?;
    }
    Ok(())
}

fn check_unit(rows: &[Vec<f32>], what: &str, dim: usize) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(Error::Argument(format!("{what} {i} has dimension {}, expected {dim}", r.len())));
        }
        let n = r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::Argument(format!("{what} {i} has norm {n}")));
        }
    }
    Ok(())
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Caption indices ordered by decreasing similarity to `query`; equal scores
/// keep the lower index first.
pub fn rank_captions(query: &[f32], captions: &[Vec<f32>]) -> Vec<usize> {
    let scores: Vec<f64> = captions.iter().map(|c| dot(query, c)).collect();
    let mut order: Vec<usize> = (0..captions.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Fraction of renders whose best-matching caption is their source caption.
pub fn r_precision(renders: &[Vec<f32>], captions: &[Vec<f32>], source: &[usize]) -> Result<f64> {
    if renders.len() != source.len() {
        return Err(Error::Argument(format!("{} renders but {} source indices", renders.len(), source.len())));
    }
    if captions.len() < 2 {
        return Err(Error::Argument("the caption pool needs at least two captions".into()));
    }
    if renders.is_empty() {
        return Err(Error::Argument("no renders to score".into()));
    }
    let dim = captions[0].len();
    check_unit(captions, "caption embedding", dim)?;
    check_unit(renders, "render embedding", dim)?;
    if let Some(&bad) = source.iter().find(|&&s| s >= captions.len()) {
        return Err(Error::Argument(format!("source caption {bad} is outside the pool")));
    }
    let hits = renders.iter().zip(source).filter(|(r, &s)| rank_captions(r, captions)[0] == s).count();
    Ok(hits as f64 / renders.len() as f64)
}

/// Reads a caption pool: one caption per non-empty line.
pub fn read_caption_pool(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub caption: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectReport {
    pub checkpoint: String,
    pub source_caption: String,
    pub hit: bool,
    pub top5: Vec<Retrieved>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub pool_size: usize,
    pub r_precision: f64,
    pub objects: Vec<ObjectReport>,
}

/// Builds the per-object report alongside the aggregate precision.
pub fn retrieval_report(
    names: &[String],
    renders: &[Vec<f32>],
    pool: &[String],
    captions: &[Vec<f32>],
    source: &[usize],
) -> Result<RetrievalReport> {
    let precision = r_precision(renders, captions, source)?;
    let objects = names
        .iter()
        .zip(renders)
        .zip(source)
        .map(|((name, r), &s)| {
            let order = rank_captions(r, captions);
            ObjectReport {
                checkpoint: name.clone(),
                source_caption: pool[s].clone(),
                hit: order[0] == s,
                top5: order.iter().take(5).map(|&i| Retrieved { caption: pool[i].clone(), score: dot(r, &captions[i]) }).collect(),
            }
        })
        .collect();
    Ok(RetrievalReport { pool_size: pool.len(), r_precision: precision, objects })
}
