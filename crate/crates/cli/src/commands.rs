use std::fs;
use std::path::{Path, PathBuf};

use dreamfield::augment::resize_bilinear;
use dreamfield::dataset::{load_views, write_two_sphere_dataset, SyntheticSpec, HELDOUT_POSES, TRAIN_POSES};
use dreamfield::eval::{
    psnr, read_caption_pool, render_view, retrieval_report, turntable, write_frames, ViewSettings, EVAL_ELEVATION_DEG,
};
use dreamfield::geometry::CameraPose;
use dreamfield::guidance::{
    embed_batch, EmbedItems, LinearEmbedding, LinearEmbeddingScorer, PhotometricScorer, RemoteScorer, Scorer,
    ServiceClient,
};
use dreamfield::imageio::save_rgb_png;
use dreamfield::optimize::{
    init_state, load_checkpoint, read_metrics, PosedView, RunConfig, ScorerKind, TrainState, Trainer, ViewSource,
    CHECKPOINT_FILE, METRICS_FILE,
};
use dreamfield::{Error, Result};

use crate::settings::{endpoint_or_env, now, FinalMetrics, Manifest};
use crate::{EvalArgs, GenerateArgs, ReconstructArgs, RenderArgs, SynthArgs};

/// Size of the in-process linear scorer used with `--scorer linear`.
const OFFLINE_RESOLUTION: usize = 32;
const OFFLINE_DIM: usize = 64;

fn load_state(path: &Path, config: Option<&RunConfig>) -> Result<TrainState> {
    if !path.is_file() {
        return Err(Error::Argument(format!("checkpoint {} not found", path.display())));
    }
    load_checkpoint(path, config.map(RunConfig::arch))
}

fn initial_state(cfg: &RunConfig, resume: bool) -> Result<TrainState> {
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    if resume && ckpt.is_file() {
        let state = load_state(&ckpt, Some(cfg))?;
        if state.seed != cfg.seed {
            return Err(Error::Argument(format!(
                "checkpoint was trained with seed {}, not {}",
                state.seed, cfg.seed
            )));
        }
        log::info!("resuming from iteration {}", state.iteration);
        Ok(state)
    } else {
        init_state(cfg)
    }
}

fn view_settings(cfg: &RunConfig, resolution: usize) -> ViewSettings {
    ViewSettings { resolution, samples: cfg.test_samples, half_side: cfg.half_side, cone_scale: cfg.cone_scale }
}

/// Trains with `run_logged`, keeping `manifest.json` current. On failure the
/// manifest records the error before it is returned.
fn train(
    command: &str,
    cfg: &RunConfig,
    state: TrainState,
    views: ViewSource,
    scorer: &mut dyn Scorer<f32>,
) -> Result<(TrainState, Manifest)> {
    let out = &cfg.out_dir;
    let mut manifest = Manifest::start(command, cfg);
    manifest.write(out)?;
    let mut trainer = Trainer::new(cfg.clone(), state, views, scorer)?;
    let result = trainer.run_logged(out);
    manifest.finished = Some(now());
    manifest.final_metrics = read_metrics(&out.join(METRICS_FILE))?.last().map(FinalMetrics::from);
    if let Err(e) = result {
        manifest.status = "failed".into();
        manifest.error = Some(e.to_string());
        manifest.write(out)?;
        return Err(e);
    }
    manifest.status = "complete".into();
    Ok((trainer.state, manifest))
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = a.run.resolve(RunConfig::default())?;
    if cfg.caption.trim().is_empty() {
        return Err(Error::Argument("--prompt is required".into()));
    }
    let mut scorer: Box<dyn Scorer<f32>> = match cfg.scorer {
        ScorerKind::Remote => {
            let ep = cfg.endpoint.clone().ok_or_else(|| {
                Error::Argument("the remote scorer needs --endpoint or DREAMFIELD_ENDPOINT".into())
            })?;
            Box::new(RemoteScorer::connect(ServiceClient::new(&ep), cfg.caption.clone())?)
        }
        ScorerKind::Linear => {
            Box::new(LinearEmbeddingScorer::new(LinearEmbedding::new(OFFLINE_RESOLUTION, OFFLINE_DIM, 0), cfg.caption.clone()))
        }
        ScorerKind::Photometric => {
            return Err(Error::Argument("the photometric scorer needs posed targets; use `reconstruct`".into()))
        }
    };
    let state = initial_state(&cfg, a.run.resume)?;
    let (state, manifest) = train("generate", &cfg, state, ViewSource::Random, scorer.as_mut())?;
    let frames = turntable(
        &state,
        a.frames,
        EVAL_ELEVATION_DEG,
        cfg.pose.radius,
        cfg.pose.focal_scale,
        &view_settings(&cfg, cfg.train_resolution),
    )?;
    write_frames(&cfg.out_dir.join("frames"), &frames, cfg.pose.radius)?;
    manifest.write(&cfg.out_dir)?;
    if let Some(m) = &manifest.final_metrics {
        println!("iteration {}: loss {:.5}, mean T {:.3}", m.iteration, m.total_loss, m.mean_transmittance);
    }
    println!("outputs in {}", cfg.out_dir.display());
    Ok(())
}

fn mean_psnr(state: &TrainState, views: &[PosedView], settings: &ViewSettings, save: Option<&Path>) -> Result<f64> {
    let mut total = 0.0;
    for v in views {
        let render = render_view(state, &v.pose, settings)?;
        if let Some(dir) = save {
            fs::create_dir_all(dir)?;
            save_rgb_png(&dir.join(&v.name), &render.rgb)?;
        }
        total += psnr(&render.rgb, &v.image)?;
    }
    Ok(total / views.len() as f64)
}

pub fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let views = load_views(&a.targets, TRAIN_POSES)?;
    let first = views.first().ok_or_else(|| {
        Error::Argument(format!("{} lists no views", a.targets.join(TRAIN_POSES).display()))
    })?;
    let resolution = first.image.dim().0;
    let heldout =
        if a.targets.join(HELDOUT_POSES).is_file() { load_views(&a.targets, HELDOUT_POSES)? } else { Vec::new() };

    let mut base = RunConfig::reconstruction();
    base.train_resolution = resolution;
    base.crop = base.crop.min(resolution);
    let cfg = a.run.resolve(base)?;
    if cfg.scorer != ScorerKind::Photometric {
        return Err(Error::Argument("reconstruct only supports the photometric scorer".into()));
    }
    let state = initial_state(&cfg, a.run.resume)?;
    let mut scorer = PhotometricScorer;
    let (state, mut manifest) = train("reconstruct", &cfg, state, ViewSource::Posed(views.clone()), &mut scorer)?;

    let settings = view_settings(&cfg, resolution);
    let train_psnr = mean_psnr(&state, &views, &settings, None)?;
    manifest.train_psnr_db = Some(train_psnr);
    println!("training-view PSNR: {train_psnr:.2} dB over {} views", views.len());
    if !heldout.is_empty() {
        let h = mean_psnr(&state, &heldout, &settings, Some(&cfg.out_dir.join("heldout")))?;
        manifest.heldout_psnr_db = Some(h);
        println!("held-out PSNR: {h:.2} dB over {} views", heldout.len());
    }
    manifest.write(&cfg.out_dir)?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let pool = read_caption_pool(&a.pool)?;
    if pool.len() < 2 {
        return Err(Error::Argument(format!("{} needs at least two captions", a.pool.display())));
    }
    let settings = ViewSettings { resolution: a.resolution, samples: a.samples, ..Default::default() };
    let pose = CameraPose::from_degrees(a.azimuth, a.elevation, a.radius, a.focal_scale)?;
    let mut names = Vec::new();
    let mut sources = Vec::new();
    let mut states = Vec::new();
    for path in &a.checkpoints {
        let state = load_state(path, None)?;
        let source = pool.iter().position(|c| *c == state.caption).ok_or_else(|| {
            Error::Argument(format!("{}: caption `{}` is not in the pool", path.display(), state.caption))
        })?;
        names.push(path.display().to_string());
        sources.push(source);
        states.push(state);
    }

    let client = ServiceClient::new(&endpoint_or_env(&a.endpoint)?);
    let info = client.info()?;
    let mut renders = Vec::new();
    for state in &states {
        let rgb = render_view(state, &pose, &settings)?.rgb;
        renders.push(if rgb.dim().0 == info.resolution { rgb } else { resize_bilinear(rgb.view(), info.resolution) });
    }
    let image_embeddings = embed_batch(&client, EmbedItems::Images(&renders), a.batch, a.in_flight)?;
    let caption_embeddings = embed_batch(&client, EmbedItems::Captions(&pool), a.batch, a.in_flight)?;
    let report = retrieval_report(&names, &image_embeddings, &pool, &caption_embeddings, &sources)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match &a.out {
        Some(path) => {
            fs::write(path, text)?;
            println!(
                "R-Precision {:.4} over {} objects, pool of {} (model {})",
                report.r_precision,
                report.objects.len(),
                report.pool_size,
                info.model
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn render(a: RenderArgs) -> Result<()> {
    let state = load_state(&a.checkpoint, None)?;
    let out = a.out.unwrap_or_else(|| {
        a.checkpoint.parent().map_or_else(|| PathBuf::from("frames"), |p| p.join("frames"))
    });
    let settings = ViewSettings { resolution: a.resolution, samples: a.samples, ..Default::default() };
    let frames = turntable(&state, a.frames, a.elevation, a.radius, a.focal_scale, &settings)?;
    write_frames(&out, &frames, a.radius)?;
    println!("{} frames in {}", frames.len(), out.display());
    Ok(())
}

pub fn synth_dataset(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec { resolution: a.resolution, train_views: a.views, samples: a.samples, ..Default::default() };
    if spec.train_views == 0 || spec.resolution == 0 || spec.samples == 0 {
        return Err(Error::Argument("resolution, views and samples must be positive".into()));
    }
    write_two_sphere_dataset(&a.out, &spec)?;
    println!("{} training views and 1 held-out view in {}", spec.train_views, a.out.display());
    Ok(())
}
