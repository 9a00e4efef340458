//! Run configuration.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, LrSchedule};
use crate::augment::BackgroundSpec;
use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};
use crate::field::FieldArch;
use crate::geometry::{AzimuthRange, CameraPose, DEFAULT_CONE_SCALE, REFERENCE_RADIUS};
use crate::objective::{SparsityConfig, SparsityMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// MSE against posed target images.
    Photometric,
    /// The HTTP image-text service.
    Remote,
    /// The in-process linear embedding stand-in.
    Linear,
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "photometric" => Ok(ScorerKind::Photometric),
            "remote" => Ok(ScorerKind::Remote),
            "linear" => Ok(ScorerKind::Linear),
            other => Err(Error::Config(format!("unknown scorer `{other}`"))),
        }
    }
}

/// What is composited behind the volume during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    White,
    Black,
    /// A fresh random noise, checkerboard or Fourier texture every iteration.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseConfig {
    /// Azimuths are drawn from `[0, azimuth_range_deg]`.
    pub azimuth_range_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub focal_scale: f64,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self { azimuth_range_deg: 360.0, elevation_deg: 30.0, radius: REFERENCE_RADIUS, focal_scale: 1.2 }
    }
}

impl PoseConfig {
    pub fn azimuth_range(&self) -> AzimuthRange {
        AzimuthRange::from_degrees(0.0, self.azimuth_range_deg)
    }

    pub fn validate(&self) -> Result<()> {
        self.azimuth_range().validate()?;
        CameraPose::from_degrees(0.0, self.elevation_deg, self.radius, self.focal_scale)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Field widths; the input width follows from the encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldSize {
    pub width: usize,
    pub hidden: usize,
    pub blocks: usize,
}

impl Default for FieldSize {
    fn default() -> Self {
        let a = FieldArch::default();
        Self { width: a.width, hidden: a.hidden, blocks: a.blocks }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OriginConfig {
    pub enabled: bool,
    pub decay: f32,
}

impl Default for OriginConfig {
    fn default() -> Self {
        Self { enabled: true, decay: 0.999 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub caption: String,
    pub seed: u64,
    pub iterations: u64,
    pub train_resolution: usize,
    pub crop: usize,
    pub samples: usize,
    /// Samples per ray for evaluation renders.
    pub test_samples: usize,
    pub sparsity: SparsityConfig,
    /// Density noise scale, used only in `perturb_density` mode.
    pub perturb_sigma: f64,
    pub scorer: ScorerKind,
    pub endpoint: Option<String>,
    pub pose: PoseConfig,
    pub encoding: EncodingConfig,
    pub field: FieldSize,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub half_side: f64,
    pub cone_scale: f64,
    pub origin: OriginConfig,
    pub background: BackgroundMode,
    pub background_spec: BackgroundSpec,
    /// Stratified sampling along rays; bin centers otherwise.
    pub stratified: bool,
    /// Render only the crop window when the loss ignores the rest.
    pub render_window: bool,
    /// Checkpoint period in iterations; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            caption: String::new(),
            seed: 0,
            iterations: 10_000,
            train_resolution: 168,
            crop: 154,
            samples: 192,
            test_samples: 512,
            sparsity: SparsityConfig::default(),
            perturb_sigma: 1.0,
            scorer: ScorerKind::Remote,
            endpoint: None,
            pose: PoseConfig::default(),
            encoding: EncodingConfig::default(),
            field: FieldSize::default(),
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
            half_side: 1.0,
            cone_scale: DEFAULT_CONE_SCALE,
            origin: OriginConfig::default(),
            background: BackgroundMode::Random,
            background_spec: BackgroundSpec::default(),
            stratified: true,
            render_window: true,
            checkpoint_every: 1000,
            out_dir: PathBuf::from("runs/latest"),
        }
    }
}

impl RunConfig {
    /// Photometric reconstruction of 64² posed views.
    ///
    /// Differs from the text-guided defaults where fitting targets needs it:
    /// a smaller field, a faster learning-rate warmup, no sparsity term, a
    /// fixed white background, and a fixed origin so the posed cameras stay
    /// registered to the targets.
    pub fn reconstruction() -> Self {
        Self {
            iterations: 2000,
            train_resolution: 64,
            crop: 32,
            samples: 48,
            sparsity: SparsityConfig { mode: SparsityMode::None, ..Default::default() },
            scorer: ScorerKind::Photometric,
            encoding: EncodingConfig { levels: 3.0, features: 64 },
            field: FieldSize { width: 64, hidden: 64, blocks: 2 },
            lr: LrSchedule { start: 1e-4, peak: 5e-3, warmup_iters: 100 },
            origin: OriginConfig { enabled: false, ..Default::default() },
            background: BackgroundMode::White,
            checkpoint_every: 500,
            out_dir: PathBuf::from("runs/reconstruct"),
            ..Default::default()
        }
    }

    pub fn arch(&self) -> FieldArch {
        FieldArch {
            input_dim: self.encoding.output_dim(),
            width: self.field.width,
            hidden: self.field.hidden,
            blocks: self.field.blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train resolution", self.train_resolution),
            ("crop", self.crop),
            ("samples", self.samples),
            ("test samples", self.test_samples),
            ("encoding features", self.encoding.features),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.crop > self.train_resolution {
            return Err(Error::Config(format!(
                "crop {} exceeds the train resolution {}",
                self.crop, self.train_resolution
            )));
        }
        if !(self.half_side > 0.0) || !(self.cone_scale >= 0.0) || !(self.perturb_sigma >= 0.0) {
            return Err(Error::Config("half side, cone scale and perturb sigma must be non-negative".into()));
        }
        if !(self.encoding.levels >= 0.0) {
            return Err(Error::Config("encoding levels must be non-negative".into()));
        }
        if !(self.origin.decay >= 0.0 && self.origin.decay <= 1.0) {
            return Err(Error::Config(format!("origin decay {} must lie in [0, 1]", self.origin.decay)));
        }
        self.sparsity.validate()?;
        self.pose.validate()?;
        self.lr.validate()?;
        self.background_spec.validate()?;
        self.arch().validate()
    }

    /// Density noise scale actually applied.
    pub fn effective_perturb_sigma(&self) -> Option<f64> {
        (self.sparsity.mode == SparsityMode::PerturbDensity && self.perturb_sigma > 0.0).then_some(self.perturb_sigma)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_over(&Self::default(), text)
    }

    /// Keys present in `text` replace those of `base`; tables merge key by key.
    pub fn from_toml_over(base: &Self, text: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let mut merged = toml::Table::try_from(base).map_err(|e| bad(&e))?;
        let overlay: toml::Table = text.parse().map_err(|e| bad(&e))?;
        merge_tables(&mut merged, overlay);
        toml::Value::Table(merged).try_into().map_err(|e| bad(&e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
