//! Posed image sets for reconstruction runs.
//!
//! A dataset directory holds PNG frames plus `poses.txt` (training views) and
//! optionally `heldout.txt`. Each non-empty line reads
//! `filename azimuth_deg elevation_deg radius focal_scale`; `#` starts a comment.

use std::fs;
use std::path::Path;

use crate::analytic::SphereScene;
use crate::error::{Error, Result};
use crate::geometry::{camera_rays, CameraPose, DEFAULT_CONE_SCALE};
use crate::imageio::{load_rgb_png, save_rgb_png};
use crate::optimize::PosedView;
use crate::render::{render_rays, Background};

pub const TRAIN_POSES: &str = "poses.txt";
pub const HELDOUT_POSES: &str = "heldout.txt";

/// One line of a pose file.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRecord {
    pub file: String,
    pub pose: CameraPose,
}

pub fn parse_pose_file(text: &str, origin: &str) -> Result<Vec<PoseRecord>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |why: &str| Error::Argument(format!("{origin}:{}: {why}: `{raw}`", n + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(bad("expected `filename azimuth elevation radius focal_scale`"));
        }
        let nums: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("non-numeric pose value"))?;
        let pose = CameraPose::from_degrees(nums[0], nums[1], nums[2], nums[3]).map_err(|e| bad(&e.to_string()))?;
        out.push(PoseRecord { file: fields[0].to_string(), pose });
    }
    Ok(out)
}

pub fn format_pose_line(file: &str, pose: &CameraPose) -> String {
    // Nanodegree rounding hides the radian round trip (30 rather than 29.999…).
    let deg = |r: f64| (r.to_degrees() * 1e9).round() / 1e9;
    format!(
        "{file} {} {} {} {}",
        deg(pose.azimuth),
        deg(pose.elevation),
        pose.radius,
        pose.focal_scale
    )
}

/// Loads the views listed in `dir/list`.
pub fn load_views(dir: &Path, list: &str) -> Result<Vec<PosedView>> {
    let pose_path = dir.join(list);
    let text = fs::read_to_string(&pose_path)
        .map_err(|e| Error::Argument(format!("{}: {e}", pose_path.display())))?;
    parse_pose_file(&text, &pose_path.display().to_string())?
        .into_iter()
        .map(|r| {
            let image = load_rgb_png(&dir.join(&r.file))?;
            Ok(PosedView { name: r.file, pose: r.pose, image })
        })
        .collect()
}

/// Layout of the synthetic two-sphere set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub resolution: usize,
    pub train_views: usize,
    pub train_elevation_deg: f64,
    pub heldout_azimuth_deg: f64,
    pub heldout_elevation_deg: f64,
    pub radius: f64,
    pub focal_scale: f64,
    pub samples: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            train_views: 8,
            train_elevation_deg: 30.0,
            heldout_azimuth_deg: 22.5,
            heldout_elevation_deg: 45.0,
            radius: 4.0,
            focal_scale: 1.2,
            samples: 1024,
        }
    }
}

/// Renders the analytic two-sphere scene on a white background.
pub fn render_two_spheres(pose: &CameraPose, resolution: usize, samples: usize) -> Result<ndarray::Array3<f32>> {
    let rays = camera_rays::<f64>(pose, resolution, [0.0; 3], DEFAULT_CONE_SCALE);
    let out = render_rays::<f64, rand::rngs::StdRng>(&SphereScene::two_spheres(), &rays, samples, None, 1.0, &Background::white())?;
    Ok(out.rgb.mapv(|v| v as f32))
}

/// Writes training views at evenly spaced azimuths and one held-out view.
pub fn write_two_sphere_dataset(dir: &Path, spec: &SyntheticSpec) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut train = String::from("# filename azimuth_deg elevation_deg radius focal_scale\n");
    for i in 0..spec.train_views {
        let az = 360.0 * i as f64 / spec.train_views as f64;
        let pose = CameraPose::from_degrees(az, spec.train_elevation_deg, spec.radius, spec.focal_scale)?;
        let file = format!("train_{i:02}.png");
        save_rgb_png(&dir.join(&file), &render_two_spheres(&pose, spec.resolution, spec.samples)?)?;
        train += &format_pose_line(&file, &pose);
        train.push('\n');
    }
    fs::write(dir.join(TRAIN_POSES), train)?;
    let pose = CameraPose::from_degrees(spec.heldout_azimuth_deg, spec.heldout_elevation_deg, spec.radius, spec.focal_scale)?;
    save_rgb_png(&dir.join("heldout_00.png"), &render_two_spheres(&pose, spec.resolution, spec.samples)?)?;
    fs::write(dir.join(HELDOUT_POSES), format_pose_line("heldout_00.png", &pose) + "\n")?;
    Ok(())
}
