//! Run flags, their resolution against config files and defaults, and the
//! run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use dreamfield::objective::SparsityMode;
use dreamfield::optimize::{MetricRow, RunConfig, ScorerKind};
use dreamfield::{Error, Result};
use serde::Serialize;

pub const ENDPOINT_ENV: &str = "DREAMFIELD_ENDPOINT";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Flags shared by `generate` and `reconstruct`. Unset flags fall back to the
/// `--config` file, then to the command's defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub train_res: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    /// Samples per ray during training.
    #[arg(long)]
    pub samples: Option<usize>,
    /// none, perturb, beta, gated or additive.
    #[arg(long)]
    pub sparsity: Option<SparsityMode>,
    /// Target transmittance.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tau_start: Option<f64>,
    #[arg(long)]
    pub anneal_iters: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Camera elevation in degrees.
    #[arg(long, allow_negative_numbers = true)]
    pub elevation: Option<f64>,
    /// Azimuths are drawn from [0, this] degrees.
    #[arg(long)]
    pub azimuth_range: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub focal_scale: Option<f64>,
    /// photometric, remote or linear (in-process stand-in, offline).
    #[arg(long)]
    pub scorer: Option<ScorerKind>,
    /// Scoring service URL [fallback: DREAMFIELD_ENDPOINT].
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML file with any RunConfig keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

impl RunArgs {
    /// Flags over the config file over `base`.
    pub fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
                RunConfig::from_toml_over(&base, &text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => base,
        };
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field).+ = v;
                }
            };
        }
        set!(prompt => caption);
        set!(seed => seed);
        set!(iters => iterations);
        set!(train_res => train_resolution);
        set!(crop => crop);
        set!(samples => samples);
        set!(sparsity => sparsity.mode);
        set!(tau => sparsity.tau_target);
        set!(tau_start => sparsity.tau_start);
        set!(anneal_iters => sparsity.anneal_iters);
        set!(lambda => sparsity.lambda);
        set!(elevation => pose.elevation_deg);
        set!(azimuth_range => pose.azimuth_range_deg);
        set!(radius => pose.radius);
        set!(focal_scale => pose.focal_scale);
        set!(scorer => scorer);
        set!(out => out_dir);
        if let Some(e) = &self.endpoint {
            c.endpoint = Some(e.clone());
        }
        if c.endpoint.is_none() {
            c.endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|e| !e.is_empty());
        }
        c.validate()?;
        Ok(c)
    }
}

/// Service URL from the flag, then the environment.
pub fn endpoint_or_env(flag: &Option<String>) -> Result<String> {
    flag.clone()
        .or_else(|| std::env::var(ENDPOINT_ENV).ok().filter(|e| !e.is_empty()))
        .ok_or_else(|| Error::Argument(format!("no service endpoint: pass --endpoint or set {ENDPOINT_ENV}")))
}

#[derive(Clone, Debug, Serialize)]
pub struct FinalMetrics {
    pub iteration: u64,
    pub total_loss: f64,
    pub guidance_loss: f64,
    pub mean_transmittance: f64,
    pub tau: f64,
    pub lr: f64,
}

impl From<&MetricRow> for FinalMetrics {
    fn from(r: &MetricRow) -> Self {
        Self {
            iteration: r.iteration,
            total_loss: r.total_loss,
            guidance_loss: r.guidance_loss,
            mean_transmittance: r.mean_transmittance,
            tau: r.tau,
            lr: r.lr,
        }
    }
}

/// `manifest.json`: everything needed to understand or resume a run.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub status: String,
    pub started: String,
    pub finished: Option<String>,
    pub config: RunConfig,
    pub final_metrics: Option<FinalMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl Manifest {
    pub fn start(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            status: "running".into(),
            started: now(),
            finished: None,
            config: config.clone(),
            final_metrics: None,
            heldout_psnr_db: None,
            train_psnr_db: None,
            error: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}
