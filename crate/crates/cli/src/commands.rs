//! Pipelines behind the subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use alignfield_core::checkpoint::Checkpoint;
use alignfield_core::config::{CriticKind, SessionConfig, SourceKind};
use alignfield_core::field::LatentCode;
use alignfield_core::fixtures::{centered_sphere, toy_pair, AnalyticScene};
use alignfield_core::gradcheck::{photometric_grad_check, GradCheck};
use alignfield_core::guidance::{BlendedTargetCritic, Critic};
use alignfield_core::hybrid::parse_anchors;
use alignfield_core::metrics::{multiview_alignment, AlignmentReport, CoordinateFeatures, MultiviewConfig};
use alignfield_core::optim::{FdOptions, FdReport};
use alignfield_core::raster::Image;
use alignfield_core::remote::RemoteCritic;
use alignfield_core::render::{render_view, LatentSource};
use alignfield_core::toy::{tiny_field_config, toy_critic, toy_orbit, toy_ray_march};
use alignfield_core::train::{fit_to_views, ring_views, train_generation, train_transform, Guidance, LogRecord, PosedView, TrainObserver};
use alignfield_core::{LightSample, NeuralField, RadianceField, RenderedView};
use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::request::{render, CameraSpec, LatentSpec, MapKind, Model, RenderRequest};

/// Writes the metrics log and periodic checkpoints into the output directory.
pub struct FileObserver {
    dir: PathBuf,
    prompts: Vec<String>,
    log: BufWriter<File>,
    pub last_iteration: Option<usize>,
}

impl FileObserver {
    pub fn create(dir: &Path, prompts: &[String]) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let log = File::create(dir.join("log.jsonl")).context("creating metrics log")?;
        Ok(FileObserver {
            dir: dir.to_path_buf(),
            prompts: prompts.to_vec(),
            log: BufWriter::new(log),
            last_iteration: None,
        })
    }
}

impl TrainObserver for FileObserver {
    fn record(&mut self, record: &LogRecord) {
        self.last_iteration = Some(record.iteration);
        if let Ok(line) = serde_json::to_string(record) {
            let _ = writeln!(self.log, "{line}");
        }
    }

    fn checkpoint(&mut self, iteration: usize, field: &NeuralField) -> alignfield_core::Result<()> {
        self.log.flush()?;
        let path = self.dir.join(format!("checkpoint_{iteration:06}.a3df"));
        Checkpoint::from_field(field, &self.prompts, iteration as u64).save(&path)
    }
}

pub fn build_critic(config: &SessionConfig) -> Result<Box<dyn Critic>> {
    Ok(match config.critic.kind {
        CriticKind::Toy => Box::new(toy_critic()),
        CriticKind::PointMass => {
            let targets = config
                .critic
                .targets
                .iter()
                .map(|p| Image::load_png(p).with_context(|| format!("loading critic target {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            Box::new(BlendedTargetCritic::new(targets, config.generation.schedule.clone())?)
        }
        CriticKind::Remote => Box::new(RemoteCritic::new(&config.critic.remote)?),
    })
}

/// Marks an output directory whose run stopped early.
fn flag_partial(dir: &Path, err: &anyhow::Error, last_iteration: Option<usize>) {
    let note = serde_json::json!({ "error": format!("{err:#}"), "last_iteration": last_iteration });
    let _ = std::fs::write(dir.join("INCOMPLETE.json"), note.to_string());
}

fn finish(field: &NeuralField, prompts: &[String], iteration: usize, dir: &Path) -> Result<PathBuf> {
    let path = dir.join("model.a3df");
    Checkpoint::from_field(field, prompts, iteration as u64).save(&path)?;
    let _ = std::fs::remove_file(dir.join("INCOMPLETE.json"));
    Ok(path)
}

/// Joint generation over the simplex; returns the final checkpoint path.
pub fn generate(config: &SessionConfig) -> Result<PathBuf> {
    let dir = &config.output_dir;
    let mut observer = FileObserver::create(dir, &config.prompts)?;
    let run = |observer: &mut FileObserver| -> Result<NeuralField> {
        let critic = build_critic(config)?;
        let embeddings = config.embeddings();
        let guidance = Guidance {
            critic: critic.as_ref(),
            embeddings: &embeddings,
            prompts: &config.prompts,
            general_prompt: &config.general_prompt,
        };
        let mut field = NeuralField::new(config.field_config(), config.seed)?;
        let report = train_generation(&config.generation(), &mut field, &guidance, observer)?;
        if report.skipped_steps > 0 {
            tracing::warn!(skipped = report.skipped_steps, "critic failures skipped steps");
        }
        Ok(field)
    };
    match run(&mut observer) {
        Ok(field) => finish(&field, &config.prompts, config.generation.iterations, dir),
        Err(e) => {
            flag_partial(dir, &e, observer.last_iteration);
            Err(e)
        }
    }
}

fn source_scene(kind: SourceKind) -> Option<AnalyticScene> {
    match kind {
        SourceKind::CenteredSphere => Some(centered_sphere()),
        SourceKind::ToyA => Some(toy_pair().0),
        SourceKind::ToyB => Some(toy_pair().1),
        SourceKind::Checkpoint => None,
    }
}

/// Posed renders of the configured source model around the field bounds.
pub fn source_views(config: &SessionConfig) -> Result<Vec<PosedView>> {
    let src = &config.transform.source;
    let bounds = config.field.grid.bounds;
    let ray_march = alignfield_core::RayMarchConfig {
        stratified_jitter: false,
        ..config.transform.fit.ray_march.clone()
    };
    let elevations = [0.0, 15.0, 30.0];
    let radius = 2.0 * bounds.radius();
    let views = match source_scene(src.kind) {
        Some(scene) => ring_views(&scene, &LatentCode::vertex(1, 0), bounds.center(), radius, &elevations, src.views, src.resolution, &ray_march)?,
        None => {
            let model = Model::load(&src.checkpoint).with_context(|| format!("loading source {}", src.checkpoint.display()))?;
            if src.vertex >= model.latent_dim() {
                bail!("transform.source.vertex {} is out of range for a {}-prompt checkpoint", src.vertex, model.latent_dim());
            }
            let u = LatentCode::vertex(model.latent_dim(), src.vertex);
            ring_views(&model.field, &u, bounds.center(), radius, &elevations, src.views, src.resolution, &ray_march)?
        }
    };
    Ok(views)
}

/// Photometric fit to the source views, then generation with the source
/// vertex pinned photometrically.
pub fn transform(config: &SessionConfig) -> Result<PathBuf> {
    let dir = &config.output_dir;
    let mut observer = FileObserver::create(dir, &config.prompts)?;
    let run = |observer: &mut FileObserver| -> Result<NeuralField> {
        let views = source_views(config)?;
        let critic = build_critic(config)?;
        let embeddings = config.embeddings();
        let guidance = Guidance {
            critic: critic.as_ref(),
            embeddings: &embeddings,
            prompts: &config.prompts,
            general_prompt: &config.general_prompt,
        };
        let mut field = NeuralField::new(config.field_config(), config.seed)?;
        let fit = fit_to_views(&views, &mut field, &config.transform.fit)?;
        tracing::info!(iterations = fit.iterations, psnr = fit.running_psnr, "fitted source views");
        train_transform(&config.generation(), &config.transform.options(), &views, &mut field, &guidance, observer)?;
        Ok(field)
    };
    match run(&mut observer) {
        Ok(field) => finish(&field, &config.prompts, config.generation.iterations, dir),
        Err(e) => {
            flag_partial(dir, &e, observer.last_iteration);
            Err(e)
        }
    }
}

/// What varies across rendered frames.
#[derive(Clone, Debug)]
pub enum FramePlan {
    /// Turntable at one latent: frame `k` adds `360·k/frames` degrees of azimuth.
    Turntable { latent: LatentSpec, frames: usize },
    /// `u(t)` along `pair` with `t` evenly spaced over `[from, to]`.
    Sweep { from: f64, to: f64, pair: [usize; 2], frames: usize },
}

impl FramePlan {
    pub fn requests(&self, camera: &CameraSpec, maps: &[MapKind], samples: usize) -> Vec<RenderRequest> {
        let base = |camera: CameraSpec, latent: LatentSpec| RenderRequest {
            camera,
            latent,
            maps: maps.to_vec(),
            samples,
        };
        match self {
            FramePlan::Turntable { latent, frames } => (0..*frames)
                .map(|k| {
                    let cam = CameraSpec {
                        azimuth_deg: camera.azimuth_deg + 360.0 * k as f64 / *frames as f64,
                        ..camera.clone()
                    };
                    base(cam, latent.clone())
                })
                .collect(),
            FramePlan::Sweep { from, to, pair, frames } => (0..*frames)
                .map(|k| {
                    let t = if *frames == 1 {
                        *from
                    } else if k + 1 == *frames {
                        *to
                    } else {
                        from + (to - from) * k as f64 / (*frames - 1) as f64
                    };
                    base(camera.clone(), LatentSpec::sweep(t, pair[0], pair[1]))
                })
                .collect(),
        }
    }
}

pub fn frame_path(dir: &Path, frame: usize, map: MapKind) -> PathBuf {
    dir.join(format!("frame_{frame:03}_{}.png", map.name()))
}

/// Renders every request and writes `frame_<k>_<map>.png`.
pub fn write_frames(model: &Model, requests: &[RenderRequest], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (k, req) in requests.iter().enumerate() {
        for m in render(model, req)? {
            let path = frame_path(dir, k, m.kind);
            std::fs::write(&path, &m.png)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn hybridize(model: &Model, anchors_file: &Path, smoothing: f64, camera: &CameraSpec, maps: &[MapKind], samples: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(anchors_file).with_context(|| format!("reading {}", anchors_file.display()))?;
    let anchors = parse_anchors(&text)?;
    let req = RenderRequest {
        camera: camera.clone(),
        latent: LatentSpec::anchors(&anchors, smoothing),
        maps: maps.to_vec(),
        samples,
    };
    write_frames(model, &[req], dir)
}

/// Multiview alignment between vertex `a` of one model and vertex `b` of
/// another (or the same) model.
pub fn eval_align(model_a: &Model, a: usize, model_b: &Model, b: usize, config: &MultiviewConfig) -> Result<AlignmentReport> {
    for (m, v) in [(model_a, a), (model_b, b)] {
        if v >= m.latent_dim() {
            bail!("vertex {v} is out of range for a {}-prompt model", m.latent_dim());
        }
    }
    let ua = LatentCode::vertex(model_a.latent_dim(), a);
    let ub = LatentCode::vertex(model_b.latent_dim(), b);
    let ray_march = toy_ray_march(false);
    let light = LightSample::ambient_only();
    let source = |field: &NeuralField, u: &LatentCode| {
        let field = field.clone();
        let u = u.clone();
        let ray_march = ray_march.clone();
        move |camera: &alignfield_core::Camera| -> alignfield_core::Result<RenderedView> {
            render_view(&field, camera, LatentSource::Fixed(&u), &light, &ray_march, 0)
        }
    };
    let sa = source(&model_a.field, &ua);
    let sb = source(&model_b.field, &ub);
    let prompt = |m: &Model, v: usize| m.prompts.get(v).cloned().unwrap_or_else(|| format!("vertex {v}"));
    Ok(multiview_alignment(&sa, &sb, config, &CoordinateFeatures, (&prompt(model_a, a), &prompt(model_b, b)))?)
}

/// Evaluation ring sized to a model's bounds.
pub fn multiview_for(model: &Model, views: usize, resolution: usize, elevation_deg: f64, stride: usize) -> MultiviewConfig {
    let bounds = model.field.bounds().unwrap_or_else(|| alignfield_core::Aabb::cube(1.0));
    MultiviewConfig {
        n_views: views,
        elevation_deg,
        radius: 2.0 * bounds.radius(),
        center: bounds.center(),
        resolution,
        stride,
        ..Default::default()
    }
}

/// Finite-difference check of the render + photometric gradient on a
/// freshly initialized tiny field.
pub fn check_grad(samples: usize, seed: u64, resolution: usize) -> Result<FdReport> {
    let field = NeuralField::new(tiny_field_config(2), seed)?;
    let camera = toy_orbit(0.7, 0.3, resolution);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let target = Image::from_data(resolution, resolution, 3, (0..resolution * resolution * 3).map(|_| rng.random::<f64>()).collect())?;
    let latent = LatentCode::new(vec![0.3, 0.7])?;
    let check = GradCheck {
        camera: &camera,
        latent: &latent,
        target: &target,
        ray_march: &toy_ray_march(false),
        samples,
        seed,
    };
    Ok(photometric_grad_check(&field, &check, &FdOptions::default())?)
}
