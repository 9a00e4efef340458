//! The training loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;

use super::adam::{adam_step, AdamState};
use super::checkpoint::{save_checkpoint, TrainState};
use super::config::{BackgroundMode, RunConfig};
use super::step::{evaluate, Crop, StepSpec};
use crate::augment::{sample_background, sample_crop_offset};
use crate::encoding::sample_basis;
use crate::error::{Error, Result};
use crate::field::{init_params, FieldParams};
use crate::geometry::{sample_pose, CameraPose, REFERENCE_RADIUS};
use crate::guidance::Scorer;
use crate::objective::{anneal_tau, scale_tau_for_camera};
use crate::render::Background;
use crate::rng::{stream, Purpose};

/// Focal scale the default τ is calibrated for.
pub const REFERENCE_FOCAL_SCALE: f64 = 1.2;

pub const METRICS_HEADER: &str = "iter,total_loss,guidance_loss,mean_T,tau,lr";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.dfc";

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: u64,
    pub total_loss: f64,
    pub guidance_loss: f64,
    pub mean_transmittance: f64,
    pub tau: f64,
    pub lr: f64,
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration, self.total_loss, self.guidance_loss, self.mean_transmittance, self.tau, self.lr
        )
    }
}

/// A training image with a known camera.
#[derive(Clone, Debug)]
pub struct PosedView {
    pub name: String,
    pub pose: CameraPose,
    pub image: Array3<f32>,
}

/// Where training cameras come from.
#[derive(Clone, Debug)]
pub enum ViewSource {
    /// Poses drawn from the run's pose distribution; no targets.
    Random,
    /// One of a fixed set of posed targets, drawn uniformly.
    Posed(Vec<PosedView>),
}

/// Fresh parameters, encoding basis, optimizer state and origin tracker.
pub fn init_state(config: &RunConfig) -> Result<TrainState> {
    config.validate()?;
    let basis = sample_basis(
        &mut stream(config.seed, 0, Purpose::Basis),
        config.encoding.levels,
        config.encoding.features,
    )?;
    let params: FieldParams<f32> = init_params(&mut stream(config.seed, 0, Purpose::Init), config.arch())?;
    let adam = AdamState::new(&params);
    Ok(TrainState {
        params,
        basis,
        origin: crate::field::OriginTracker::new(config.origin.decay),
        adam,
        iteration: 0,
        caption: config.caption.clone(),
        seed: config.seed,
    })
}

pub struct Trainer<'a> {
    pub config: RunConfig,
    pub state: TrainState,
    views: ViewSource,
    scorer: &'a mut dyn Scorer<f32>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, state: TrainState, views: ViewSource, scorer: &'a mut dyn Scorer<f32>) -> Result<Self> {
        config.validate()?;
        if state.params.arch != config.arch() {
            return Err(Error::Shape(format!(
                "state field {:?} does not match the configured {:?}",
                state.params.arch,
                config.arch()
            )));
        }
        match &views {
            ViewSource::Posed(v) if v.is_empty() => return Err(Error::Argument("no training views".into())),
            ViewSource::Posed(v) => {
                let res = config.train_resolution;
                if let Some(bad) = v.iter().find(|v| v.image.dim() != (res, res, 3)) {
                    return Err(Error::Shape(format!(
                        "view {} is {:?}, expected {res}x{res}x3",
                        bad.name,
                        bad.image.dim()
                    )));
                }
            }
            ViewSource::Random if scorer.needs_target() => {
                return Err(Error::Argument("this scorer needs posed target views".into()))
            }
            ViewSource::Random => {}
        }
        Ok(Self { config, state, views, scorer })
    }

    /// Target τ at `iteration`, adjusted for the camera.
    pub fn tau_at(&self, iteration: u64, pose: &CameraPose) -> f64 {
        let tau = anneal_tau(iteration, &self.config.sparsity);
        scale_tau_for_camera(tau, pose.focal_scale, pose.radius, REFERENCE_FOCAL_SCALE, REFERENCE_RADIUS)
    }

    /// Runs one iteration and advances the state.
    pub fn step(&mut self) -> Result<MetricRow> {
        let cfg = &self.config;
        let k = self.state.iteration;
        let seed = cfg.seed;
        let res = cfg.train_resolution;

        let mut pose_rng = stream(seed, k, Purpose::Pose);
        let (pose, target) = match &self.views {
            ViewSource::Random => {
                let p = &cfg.pose;
                let pose = sample_pose(
                    &mut pose_rng,
                    p.azimuth_range(),
                    p.elevation_deg.to_radians(),
                    p.radius,
                    p.focal_scale,
                )?;
                (pose, None)
            }
            ViewSource::Posed(views) => {
                let v = &views[pose_rng.gen_range(0..views.len())];
                (v.pose, Some(v.image.view()))
            }
        };
        let background_image: Option<Array3<f32>> = match cfg.background {
            BackgroundMode::Random => {
                Some(sample_background(&cfg.background_spec, res, &mut stream(seed, k, Purpose::Background))?.1)
            }
            _ => None,
        };
        let background = match (cfg.background, &background_image) {
            (BackgroundMode::Black, _) => Background::black(),
            (BackgroundMode::Random, Some(img)) => Background::Image(img.view()),
            _ => Background::white(),
        };
        let crop = if cfg.crop < res {
            Some(Crop { offset: sample_crop_offset(res, res, cfg.crop, &mut stream(seed, k, Purpose::Crop))?, size: cfg.crop })
        } else {
            None
        };
        let tau = self.tau_at(k, &pose);
        let origin = if cfg.origin.enabled { self.state.origin.origin } else { [0.0; 3] };
        let spec = StepSpec {
            pose,
            origin,
            resolution: res,
            samples: cfg.samples,
            cone_scale: cfg.cone_scale,
            half_side: cfg.half_side,
            background,
            crop,
            tau,
            sparsity: cfg.sparsity,
            segments: cfg.stratified.then(|| stream(seed, k, Purpose::Segments)),
            perturb: cfg.effective_perturb_sigma().map(|s| (stream(seed, k, Purpose::Perturb), s)),
            target,
            render_window: cfg.render_window,
        };

        let mut grads = self.state.params.zeros_like();
        let out = evaluate(&self.state.params, &self.state.basis, &spec, &mut *self.scorer, Some(&mut grads))?;
        let lr = cfg.lr.at(k);
        adam_step(&mut self.state.params, &grads, &mut self.state.adam, lr, &cfg.adam)?;
        if cfg.origin.enabled {
            self.state.origin = self.state.origin.update(out.center_of_mass);
        }
        self.state.iteration += 1;
        Ok(MetricRow {
            iteration: k,
            total_loss: out.total,
            guidance_loss: out.guidance,
            mean_transmittance: out.mean_transmittance,
            tau,
            lr,
        })
    }

    /// Steps until `config.iterations` iterations have completed.
    pub fn run(&mut self) -> Result<Vec<MetricRow>> {
        let mut rows = Vec::new();
        while self.state.iteration < self.config.iterations {
            rows.push(self.step()?);
        }
        Ok(rows)
    }

    /// Like [`Trainer::run`], but appends to `metrics.csv` in `dir` and
    /// writes periodic checkpoints there. On failure the last good state is
    /// checkpointed before the error is returned.
    pub fn run_logged(&mut self, dir: &Path) -> Result<Vec<MetricRow>> {
        fs::create_dir_all(dir)?;
        let metrics_path = dir.join(METRICS_FILE);
        let fresh = self.state.iteration == 0 || !metrics_path.exists();
        let file = if fresh {
            File::create(&metrics_path)?
        } else {
            truncate_metrics(&metrics_path, self.state.iteration)?;
            OpenOptions::new().append(true).open(&metrics_path)?
        };
        let mut log = BufWriter::new(file);
        if fresh {
            writeln!(log, "{METRICS_HEADER}")?;
        }
        let ckpt = dir.join(CHECKPOINT_FILE);
        let every = self.config.checkpoint_every;
        let mut rows = Vec::new();
        while self.state.iteration < self.config.iterations {
            match self.step() {
                Ok(row) => {
                    writeln!(log, "{}", row.csv_line())?;
                    rows.push(row);
                    if every > 0 && self.state.iteration % every == 0 {
                        log.flush()?;
                        save_checkpoint(&self.state, &ckpt)?;
                    }
                }
                Err(e) => {
                    log.flush()?;
                    save_checkpoint(&self.state, &ckpt)?;
                    log::error!("run stopped at iteration {}: {e}", self.state.iteration);
                    return Err(e);
                }
            }
        }
        log.flush()?;
        save_checkpoint(&self.state, &ckpt)?;
        Ok(rows)
    }
}

/// Drops metric lines at or past `iteration` so a resumed run does not
/// duplicate them.
fn truncate_metrics(path: &PathBuf, iteration: u64) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let kept: Vec<&str> = text
        .lines()
        .filter(|l| l.split(',').next().and_then(|i| i.parse::<u64>().ok()).is_none_or(|i| i < iteration))
        .collect();
    fs::write(path, kept.join("\n") + "\n")?;
    Ok(())
}

/// Parses a metrics log back into rows.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| -> Result<f64> {
            f.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Argument(format!("bad metrics line `{line}`")))
        };
        rows.push(MetricRow {
            iteration: num(0)? as u64,
            total_loss: num(1)?,
            guidance_loss: num(2)?,
            mean_transmittance: num(3)?,
            tau: num(4)?,
            lr: num(5)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{LinearEmbedding, LinearEmbeddingScorer, PhotometricScorer};
    use crate::optimize::config::{FieldSize, ScorerKind};
    use crate::encoding::EncodingConfig;

    fn tiny() -> RunConfig {
        RunConfig {
            caption: "a small red ball".into(),
            iterations: 6,
            train_resolution: 12,
            crop: 10,
            samples: 10,
            scorer: ScorerKind::Linear,
            encoding: EncodingConfig { levels: 4.0, features: 8 },
            field: FieldSize { width: 8, hidden: 8, blocks: 1 },
            checkpoint_every: 3,
            ..Default::default()
        }
    }

    fn rows_for(cfg: &RunConfig) -> Vec<MetricRow> {
        let mut scorer = LinearEmbeddingScorer::new(LinearEmbedding::new(8, 6, 1), cfg.caption.clone());
        let state = init_state(cfg).unwrap();
        Trainer::new(cfg.clone(), state, ViewSource::Random, &mut scorer).unwrap().run().unwrap()
    }

    #[test]
    fn same_seed_same_metrics() {
        let a: Vec<String> = rows_for(&tiny()).iter().map(MetricRow::csv_line).collect();
        let b: Vec<String> = rows_for(&tiny()).iter().map(MetricRow::csv_line).collect();
        assert_eq!(a, b);
        let c: Vec<String> = rows_for(&RunConfig { seed: 1, ..tiny() }).iter().map(MetricRow::csv_line).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn logged_runs_write_metrics_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let mut scorer = LinearEmbeddingScorer::new(LinearEmbedding::new(8, 6, 1), cfg.caption.clone());
        let state = init_state(&cfg).unwrap();
        let rows = Trainer::new(cfg, state, ViewSource::Random, &mut scorer).unwrap().run_logged(dir.path()).unwrap();
        let back = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(back.len(), rows.len());
        assert_eq!(back[2].csv_line(), rows[2].csv_line());
        assert!(dir.path().join(CHECKPOINT_FILE).exists());
    }

    #[test]
    fn photometric_scorer_needs_posed_views() {
        let cfg = RunConfig { scorer: ScorerKind::Photometric, ..tiny() };
        let state = init_state(&cfg).unwrap();
        let mut scorer = PhotometricScorer;
        assert!(Trainer::new(cfg, state, ViewSource::Random, &mut scorer).is_err());
    }

    #[test]
    fn schedules_reach_the_metrics() {
        let rows = rows_for(&tiny());
        assert_eq!(rows[0].lr, 1e-5);
        assert_eq!(rows[0].tau, 0.40);
        assert!(rows.iter().all(|r| r.total_loss.is_finite()));
    }
}
