//! Training loops over the latent simplex: joint generation with score
//! distillation and normal regularizers, photometric fitting to posed views,
//! and the structure-preserving transformation that combines the two.

use crate::diffrender::{backprop_rays, render_rays, RayAdjoint, Reduction, ViewAdjoint};
use crate::error::{Error, Result};
use crate::field::{LatentCode, NeuralField, RadianceField};
use crate::guidance::{blend_embeddings, sds_image_grad, Conditioning, ConditioningMode, Critic, DiffusionSchedule, EmbeddingSet};
use crate::math::{Aabb, Vec3};
use crate::optim::{adam_step, loss_and_grads_for, AdamConfig, AdamState, LossBreakdown, RenderPass, Term, ViewLoss};
use crate::raster::Image;
use crate::render::{generate_rays, Camera, LatentSource, LightSample, Ray, RayMarchConfig, RenderedView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Where on the simplex a latent draw landed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Vertex(usize),
    Edge(usize, usize),
}

/// With probability `1 − p` a uniform vertex; otherwise a uniform unordered
/// pair `(i, j)` and `u = t·eᵢ + (1 − t)·eⱼ` with `t ~ U(0, 1)`.
pub fn sample_latent<R: Rng + ?Sized>(p: f64, n: usize, rng: &mut R) -> (LatentCode, Site) {
    assert!(n >= 1);
    if n < 2 || rng.random::<f64>() >= p {
        let i = rng.random_range(0..n);
        return (LatentCode::vertex(n, i), Site::Vertex(i));
    }
    let (i, j) = pair_from_index(n, rng.random_range(0..n * (n - 1) / 2));
    let t = rng.random::<f64>();
    (LatentCode::edge(n, i, j, t), Site::Edge(i, j))
}

/// `k`-th unordered pair `i < j` in lexicographic order.
pub fn pair_from_index(n: usize, mut k: usize) -> (usize, usize) {
    for i in 0..n {
        let row = n - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
    }
    panic!("pair index out of range");
}

/// Seeded [`sample_latent`] stream.
#[derive(Clone, Debug)]
pub struct SimplexSampler {
    pub p: f64,
    rng: ChaCha8Rng,
}

impl SimplexSampler {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(format!("edge probability {p} outside [0, 1]")));
        }
        Ok(SimplexSampler { p, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn sample(&mut self, n: usize) -> (LatentCode, Site) {
        sample_latent(self.p, n, &mut self.rng)
    }
}

/// Uniform point on the simplex (flat Dirichlet).
pub fn uniform_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> LatentCode {
    if n == 1 {
        return LatentCode::vertex(1, 0);
    }
    let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = e.iter().sum();
    let mut v: Vec<f64> = e.iter().map(|x| x / s).collect();
    let rest: f64 = v[..n - 1].iter().sum();
    v[n - 1] = (1.0 - rest).max(0.0);
    LatentCode::new(v).expect("normalized exponentials lie on the simplex")
}

/// Mean over the `(H−1)(W−1)` grid of `|N_{i,j+1} − N_{i,j}|₁ + |N_{i+1,j} − N_{i,j}|₁`.
pub fn normal_smoothness_loss(map: &Image) -> f64 {
    normal_smoothness_with_grad(map).0
}

/// Loss and its (sub)gradient with respect to every map entry.
pub fn normal_smoothness_with_grad(map: &Image) -> (f64, Vec<f64>) {
    let (h, w, c) = (map.height, map.width, map.channels);
    let mut grad = vec![0.0; map.data.len()];
    if h < 2 || w < 2 {
        return (0.0, grad);
    }
    let scale = 1.0 / ((h - 1) * (w - 1)) as f64;
    let mut sum = 0.0;
    for i in 0..h - 1 {
        for j in 0..w - 1 {
            let o = map.offset(i, j);
            let right = map.offset(i, j + 1);
            let down = map.offset(i + 1, j);
            for k in 0..c {
                for n in [right, down] {
                    let d = map.data[n + k] - map.data[o + k];
                    sum += d.abs();
                    let s = if d > 0.0 {
                        scale
                    } else if d < 0.0 {
                        -scale
                    } else {
                        0.0
                    };
                    grad[n + k] += s;
                    grad[o + k] -= s;
                }
            }
        }
    }
    (sum * scale, grad)
}

/// Pixels below this opacity are not foreground for the orientation penalty.
pub const FOREGROUND_OPACITY: f64 = 0.01;

/// Mean over foreground pixels of `O·max(0, n·v)²`, `v` the unit
/// camera-to-point direction.
pub fn orientation_penalty(normals: &[Vec3], dirs: &[Vec3], opacity: &[f64]) -> f64 {
    orientation_with_grad(normals, dirs, opacity).0
}

/// Penalty with gradients for normals and opacities. The foreground set is
/// held fixed.
pub fn orientation_with_grad(normals: &[Vec3], dirs: &[Vec3], opacity: &[f64]) -> (f64, Vec<Vec3>, Vec<f64>) {
    assert!(normals.len() == dirs.len() && dirs.len() == opacity.len());
    let count = opacity.iter().filter(|&&o| o > FOREGROUND_OPACITY).count();
    let mut dn = vec![Vec3::ZERO; normals.len()];
    let mut dop = vec![0.0; normals.len()];
    if count == 0 {
        return (0.0, dn, dop);
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for i in 0..normals.len() {
        let o = opacity[i];
        if o <= FOREGROUND_OPACITY {
            continue;
        }
        let f = normals[i].dot(dirs[i]).max(0.0);
        sum += o * f * f;
        dop[i] = f * f * inv;
        dn[i] = dirs[i] * (2.0 * o * f * inv);
    }
    (sum * inv, dn, dop)
}

/// Mean over rays of the squared color deviation, summed over channels.
/// Inputs are flat RGB triples.
pub fn photometric_loss(render: &[f64], target: &[f64]) -> f64 {
    assert_eq!(render.len(), target.len());
    let rays = render.len() / 3;
    if rays == 0 {
        return 0.0;
    }
    render.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / rays as f64
}

/// Normal smoothness on opacity-weighted normals, so the background carries
/// no arbitrary normals into the differences.
pub struct NormalSmoothness;

impl ViewLoss for NormalSmoothness {
    fn name(&self) -> &str {
        "normal_smoothness"
    }

    fn evaluate(&self, view: &RenderedView) -> (f64, ViewAdjoint) {
        let (value, g) = normal_smoothness_with_grad(&view.weighted_normals());
        let mut adj = ViewAdjoint::zeros(view.width(), view.height());
        for (i, &o) in view.opacity.data.iter().enumerate() {
            let n = &view.normal.data[3 * i..3 * i + 3];
            let gi = &g[3 * i..3 * i + 3];
            for k in 0..3 {
                adj.d_normal[3 * i + k] = o * gi[k];
            }
            adj.d_opacity[i] = n[0] * gi[0] + n[1] * gi[1] + n[2] * gi[2];
        }
        (value, adj)
    }
}

pub struct Orientation {
    /// Per-pixel ray directions of the rendered camera.
    pub dirs: Vec<Vec3>,
}

impl ViewLoss for Orientation {
    fn name(&self) -> &str {
        "orientation"
    }

    fn evaluate(&self, view: &RenderedView) -> (f64, ViewAdjoint) {
        let normals: Vec<Vec3> = view.normal.data.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        let (value, dn, dop) = orientation_with_grad(&normals, &self.dirs, &view.opacity.data);
        let mut adj = ViewAdjoint::zeros(view.width(), view.height());
        for (i, d) in dn.iter().enumerate() {
            adj.d_normal[3 * i..3 * i + 3].copy_from_slice(&d.to_array());
        }
        adj.d_opacity = dop;
        (value, adj)
    }
}

pub struct Photometric<'a> {
    pub target: &'a Image,
}

impl ViewLoss for Photometric<'_> {
    fn name(&self) -> &str {
        "photometric"
    }

    fn evaluate(&self, view: &RenderedView) -> (f64, ViewAdjoint) {
        let value = photometric_loss(&view.rgb.data, &self.target.data);
        let mut adj = ViewAdjoint::zeros(view.width(), view.height());
        let scale = 2.0 / view.rgb.pixel_count().max(1) as f64;
        for (d, (a, b)) in adj.d_rgb.iter_mut().zip(view.rgb.data.iter().zip(&self.target.data)) {
            *d = scale * (a - b);
        }
        (value, adj)
    }
}

/// Injects the SDS image gradient `g = w(t)(ε̂ − ε)` as `∂L/∂x`. The logged
/// value is `½‖g‖²`, the value of `½‖x − sg(x − g)‖²` whose gradient is `g`.
pub struct Sds<'a> {
    pub grad: &'a Image,
}

impl ViewLoss for Sds<'_> {
    fn name(&self) -> &str {
        "sds"
    }

    fn evaluate(&self, view: &RenderedView) -> (f64, ViewAdjoint) {
        let mut adj = ViewAdjoint::zeros(view.width(), view.height());
        adj.d_rgb.copy_from_slice(&self.grad.data);
        (0.5 * self.grad.data.iter().map(|g| g * g).sum::<f64>(), adj)
    }
}

/// Training camera distribution around the field bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSampler {
    pub elevation_deg: [f64; 2],
    /// Orbit radius as a multiple of the bounds' circumscribed radius.
    pub radius_scale: [f64; 2],
    pub fov_deg: f64,
}

impl Default for CameraSampler {
    fn default() -> Self {
        CameraSampler {
            elevation_deg: [-10.0, 45.0],
            radius_scale: [1.5, 2.2],
            fov_deg: 40.0,
        }
    }
}

impl CameraSampler {
    pub fn sample<R: Rng + ?Sized>(&self, bounds: &Aabb, resolution: usize, rng: &mut R) -> Camera {
        let az = rng.random::<f64>() * std::f64::consts::TAU;
        let el = lerp(self.elevation_deg[0], self.elevation_deg[1], rng.random::<f64>()).to_radians();
        let r = lerp(self.radius_scale[0], self.radius_scale[1], rng.random::<f64>()) * bounds.radius();
        Camera::orbit(bounds.center(), r, az, el, self.fov_deg.to_radians(), resolution, resolution)
    }

    pub fn validate(&self) -> Result<()> {
        let [e0, e1] = self.elevation_deg;
        let [r0, r1] = self.radius_scale;
        if !(e0 <= e1 && e0 > -90.0 && e1 < 90.0) {
            return Err(Error::config("camera.elevation_deg must be an ordered range inside (-90, 90)"));
        }
        if !(r0 > 1.0 && r0 <= r1) {
            return Err(Error::config("camera.radius_scale must be an ordered range above 1"));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::config("camera.fov_deg must be in (0, 180)"));
        }
        Ok(())
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightingMode {
    /// Albedo only.
    Ambient,
    /// Point-ish light jittered around the camera direction.
    #[default]
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LightingConfig {
    pub mode: LightingMode,
    pub ambient: f64,
    pub diffuse: f64,
    /// Standard deviation of the direction jitter, per axis.
    pub jitter: f64,
}

impl Default for LightingConfig {
    fn default() -> Self {
        LightingConfig {
            mode: LightingMode::Random,
            ambient: 0.3,
            diffuse: 0.7,
            jitter: 0.4,
        }
    }
}

impl LightingConfig {
    pub fn ambient() -> Self {
        LightingConfig {
            mode: LightingMode::Ambient,
            ..Default::default()
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, camera: &Camera, rng: &mut R) -> LightSample {
        match self.mode {
            LightingMode::Ambient => LightSample::ambient_only(),
            LightingMode::Random => {
                let base = (camera.position - camera.target).normalized();
                let mut j = || self.jitter * rng.sample::<f64, _>(StandardNormal);
                let d = base + Vec3::new(j(), j(), j());
                let dir = if d.norm() < 1e-9 { base } else { d.normalized() };
                LightSample {
                    direction: dir,
                    diffuse: [self.diffuse; 3],
                    ambient: [self.ambient; 3],
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub iterations: usize,
    /// Edge-sampling probability `p`.
    pub edge_probability: f64,
    pub conditioning_mode: ConditioningMode,
    pub sds_weight: f64,
    pub orientation_weight_start: f64,
    pub orientation_weight_end: f64,
    pub normal_smoothness_weight: f64,
    pub views_per_step: usize,
    /// Render resolution for the first half of training.
    pub resolution_start: usize,
    /// Render resolution for the second half.
    pub resolution_end: usize,
    pub guidance_scale: f64,
    pub camera: CameraSampler,
    pub lighting: LightingConfig,
    pub ray_march: RayMarchConfig,
    pub adam: AdamConfig,
    pub schedule: DiffusionSchedule,
    pub reduction: Reduction,
    /// Checkpoint period in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            iterations: 10_000,
            edge_probability: 0.5,
            conditioning_mode: ConditioningMode::Blended,
            sds_weight: 1.0,
            orientation_weight_start: 100.0,
            orientation_weight_end: 1000.0,
            normal_smoothness_weight: 10.0,
            views_per_step: 1,
            resolution_start: 64,
            resolution_end: 128,
            guidance_scale: 7.5,
            camera: CameraSampler::default(),
            lighting: LightingConfig::default(),
            ray_march: RayMarchConfig {
                n_samples: 64,
                stratified_jitter: true,
                ..Default::default()
            },
            adam: AdamConfig::default(),
            schedule: DiffusionSchedule::default(),
            reduction: Reduction::Sequential,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    /// `start + (end − start)·k/(iterations − 1)`.
    pub fn orientation_weight(&self, k: usize) -> f64 {
        if self.iterations <= 1 {
            return self.orientation_weight_start;
        }
        let (a, b) = (self.orientation_weight_start, self.orientation_weight_end);
        a + (b - a) * k as f64 / (self.iterations - 1) as f64
    }

    pub fn resolution(&self, k: usize) -> usize {
        if 2 * k < self.iterations {
            self.resolution_start
        } else {
            self.resolution_end
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.edge_probability) {
            return Err(Error::config("edge_probability must be in [0, 1]"));
        }
        for (name, w) in [
            ("sds_weight", self.sds_weight),
            ("orientation_weight_start", self.orientation_weight_start),
            ("orientation_weight_end", self.orientation_weight_end),
            ("normal_smoothness_weight", self.normal_smoothness_weight),
            ("guidance_scale", self.guidance_scale),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("{name} must be a finite non-negative number")));
            }
        }
        if self.orientation_weight_end < self.orientation_weight_start {
            return Err(Error::config("orientation weight ramp must be non-decreasing"));
        }
        if self.views_per_step == 0 || self.resolution_start == 0 || self.resolution_end == 0 {
            return Err(Error::config("views_per_step and resolutions must be positive"));
        }
        self.camera.validate()?;
        self.ray_march.validate()?;
        self.schedule.validate()
    }
}

/// Critic plus everything needed to condition it per latent draw.
pub struct Guidance<'a> {
    pub critic: &'a dyn Critic,
    pub embeddings: &'a EmbeddingSet,
    pub prompts: &'a [String],
    /// Prompt sent for edges in general-prompt mode.
    pub general_prompt: &'a str,
}

struct Conditioned {
    embedding: Vec<f64>,
    prompts: Vec<String>,
}

impl Guidance<'_> {
    fn condition(&self, u: &LatentCode, site: Site, mode: ConditioningMode) -> Result<Conditioned> {
        let general = || {
            self.embeddings
                .general
                .as_ref()
                .map(|g| g.0.clone())
                .ok_or_else(|| Error::config("conditioning mode needs a general embedding"))
        };
        Ok(match (site, mode) {
            (Site::Vertex(i), _) => Conditioned {
                embedding: self.embeddings.vertices[i].0.clone(),
                prompts: self.prompts.to_vec(),
            },
            (Site::Edge(..), ConditioningMode::Blended) => Conditioned {
                embedding: blend_embeddings(u, self.embeddings)?.0,
                prompts: self.prompts.to_vec(),
            },
            (Site::Edge(..), ConditioningMode::GeneralPrompt) => Conditioned {
                embedding: general()?,
                prompts: vec![self.general_prompt.to_string(); self.prompts.len()],
            },
            (Site::Edge(..), ConditioningMode::Unconditioned) => Conditioned {
                embedding: general()?,
                prompts: vec![String::new(); self.prompts.len()],
            },
        })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub losses: LossBreakdown,
    pub u: Vec<f64>,
    pub site: Site,
    /// Timestep of the first view's SDS draw.
    pub t: Option<f64>,
    /// Set when the critic failed and the step was not applied.
    pub skipped: Option<String>,
}

/// Receives log records and checkpoint opportunities.
pub trait TrainObserver {
    fn record(&mut self, _record: &LogRecord) {}

    fn checkpoint(&mut self, _iteration: usize, _field: &NeuralField) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects records in memory.
#[derive(Default)]
pub struct RecordLog(pub Vec<LogRecord>);

impl TrainObserver for RecordLog {
    fn record(&mut self, record: &LogRecord) {
        self.0.push(record.clone());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub iterations: usize,
    pub skipped_steps: usize,
}

/// Images of the source model with their cameras.
#[derive(Clone, Debug)]
pub struct PosedView {
    pub camera: Camera,
    pub image: Image,
}

/// Every pixel ray of a view set with its target color.
struct RayPool {
    rays: Vec<Ray>,
    colors: Vec<[f64; 3]>,
}

impl RayPool {
    fn new(views: &[PosedView]) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::invalid("no source views"));
        }
        let mut rays = Vec::new();
        let mut colors = Vec::new();
        for v in views {
            if (v.image.width, v.image.height, v.image.channels) != (v.camera.width, v.camera.height, 3) {
                return Err(Error::invalid("source view image does not match its camera"));
            }
            rays.extend(generate_rays(&v.camera)?);
            colors.extend(v.image.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]));
        }
        Ok(RayPool { rays, colors })
    }

    /// Photometric loss of a random batch and its accumulated gradient.
    #[allow(clippy::too_many_arguments)]
    fn batch_step<R: Rng + ?Sized>(
        &self,
        field: &NeuralField,
        u: &LatentCode,
        batch: usize,
        config: &RayMarchConfig,
        reduction: Reduction,
        rng: &mut R,
        grads: &mut [f64],
    ) -> Result<f64> {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.rays.len())).collect();
        let rays: Vec<Ray> = idx.iter().map(|&i| self.rays[i]).collect();
        let seed = rng.random::<u64>();
        let light = LightSample::ambient_only();
        let latent = LatentSource::Fixed(u);
        let out = render_rays(field, &rays, latent, &light, config, seed);
        let scale = 2.0 / batch as f64;
        let mut loss = 0.0;
        let adjoints: Vec<RayAdjoint> = out
            .iter()
            .zip(&idx)
            .map(|(o, &i)| {
                let target = self.colors[i];
                let mut d = [0.0; 3];
                for k in 0..3 {
                    let r = o.color[k] - target[k];
                    loss += r * r;
                    d[k] = scale * r;
                }
                RayAdjoint { d_color: d, d_opacity: 0.0 }
            })
            .collect();
        backprop_rays(field, &rays, latent, &light, config, seed, &adjoints, grads, reduction)?;
        Ok(loss / batch as f64)
    }
}

struct PhotometricAnchor {
    pool: RayPool,
    weight: f64,
    source_vertex: usize,
    rays_per_step: usize,
    rng: ChaCha8Rng,
}

/// Joint generation over the latent simplex.
pub fn train_generation(config: &GenerationConfig, field: &mut NeuralField, guidance: &Guidance<'_>, observer: &mut dyn TrainObserver) -> Result<TrainReport> {
    run_loop(config, field, guidance, None, observer)
}

fn run_loop(
    config: &GenerationConfig,
    field: &mut NeuralField,
    guidance: &Guidance<'_>,
    mut anchor: Option<PhotometricAnchor>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    config.validate()?;
    let n = field.config().latent_dim;
    if guidance.embeddings.len() != n {
        return Err(Error::config(format!("{} embeddings for a field with N = {n}", guidance.embeddings.len())));
    }
    let schedule = config.schedule.clone().with_horizon(config.iterations);
    let bounds = field.config().grid.bounds;
    let mut adam = AdamState::for_field(field, &config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut skipped = 0;

    for k in 0..config.iterations {
        let (u, site) = sample_latent(config.edge_probability, n, &mut rng);
        let cond = guidance.condition(&u, site, config.conditioning_mode)?;
        let resolution = config.resolution(k);
        let orientation_weight = config.orientation_weight(k);
        let mut losses = LossBreakdown::default();
        let mut grads = vec![0.0; field.param_count()];
        let mut first_t = None;
        let mut skip_reason = None;
        let view_scale = 1.0 / config.views_per_step as f64;

        for _ in 0..config.views_per_step {
            let camera = config.camera.sample(&bounds, resolution, &mut rng);
            let light = config.lighting.sample(&camera, &mut rng);
            let pass = RenderPass {
                camera: &camera,
                latent: LatentSource::Fixed(&u),
                light: &light,
                config: &config.ray_march,
                seed: rng.random::<u64>(),
            };
            let view = pass.render(field)?;
            let conditioning = Conditioning {
                embedding: &cond.embedding,
                weights: u.as_slice(),
                prompts: &cond.prompts,
                guidance_scale: config.guidance_scale,
                camera: Some(&camera),
            };
            let draw = match sds_image_grad(&view.rgb, &conditioning, guidance.critic, &schedule, k, &mut rng) {
                Ok(d) => d,
                Err(e) if e.is_retriable() => {
                    tracing::warn!(iteration = k, error = %e, "critic failed, skipping step");
                    skip_reason = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            };
            first_t.get_or_insert(draw.t);
            let dirs: Vec<Vec3> = generate_rays(&camera)?.iter().map(|r| r.dir).collect();
            let sds = Sds { grad: &draw.grad };
            let orientation = Orientation { dirs };
            let terms = [
                Term::View { weight: config.sds_weight * view_scale, loss: &sds },
                Term::View { weight: orientation_weight * view_scale, loss: &orientation },
                Term::View { weight: config.normal_smoothness_weight * view_scale, loss: &NormalSmoothness },
            ];
            let step = loss_and_grads_for(field, Some(pass), Some(view), &terms, k, config.reduction)?;
            losses.merge(step.losses);
            for (g, s) in grads.iter_mut().zip(&step.grads.0) {
                *g += s;
            }
        }

        if skip_reason.is_none() {
            if let Some(a) = anchor.as_mut() {
                if site == Site::Vertex(a.source_vertex) && a.weight > 0.0 {
                    let mut pg = vec![0.0; grads.len()];
                    let value = a.pool.batch_step(field, &u, a.rays_per_step, &config.ray_march, config.reduction, &mut a.rng, &mut pg)?;
                    if !value.is_finite() {
                        return Err(Error::NonFiniteLoss { term: "photometric".into(), iteration: k });
                    }
                    losses.push("photometric", a.weight, value);
                    for (g, p) in grads.iter_mut().zip(&pg) {
                        *g += a.weight * p;
                    }
                }
            }
        }

        let record = LogRecord {
            iteration: k,
            losses,
            u: u.as_slice().to_vec(),
            site,
            t: first_t,
            skipped: skip_reason.clone(),
        };
        if skip_reason.is_some() {
            skipped += 1;
            observer.record(&record);
            continue;
        }
        if !record.losses.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { term: "total".into(), iteration: k });
        }
        adam_step(&mut field.params.values, &grads, &mut adam)?;
        field.params.round_to_storage();
        observer.record(&record);
        if config.checkpoint_every > 0 && (k + 1) % config.checkpoint_every == 0 {
            observer.checkpoint(k + 1, field)?;
        }
    }
    Ok(TrainReport {
        iterations: config.iterations,
        skipped_steps: skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub rays_per_step: usize,
    /// Stop once the running PSNR of the batch loss reaches this value.
    pub psnr_target: Option<f64>,
    pub ray_march: RayMarchConfig,
    pub adam: AdamConfig,
    pub reduction: Reduction,
    /// Divergence check: the running loss may not grow by `divergence_factor`
    /// over `divergence_window` steps.
    pub divergence_window: usize,
    pub divergence_factor: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 3000,
            rays_per_step: 1024,
            psnr_target: None,
            ray_march: RayMarchConfig {
                n_samples: 64,
                stratified_jitter: true,
                ..Default::default()
            },
            adam: AdamConfig::default(),
            reduction: Reduction::Sequential,
            divergence_window: 200,
            divergence_factor: 10.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub iterations: usize,
    /// Running (exponentially averaged) batch loss at the end.
    pub running_loss: f64,
    pub running_psnr: f64,
}

/// PSNR of a mean-over-rays, summed-over-channels squared error.
fn loss_psnr(loss: f64) -> f64 {
    -10.0 * (loss / 3.0).max(1e-20).log10()
}

/// Fits the field to posed views with `u` drawn uniformly from the whole
/// simplex each step, so every latent code starts as the source model. The
/// latent input weights are zeroed first.
pub fn fit_to_views(views: &[PosedView], field: &mut NeuralField, config: &FitConfig) -> Result<FitReport> {
    config.ray_march.validate()?;
    if config.rays_per_step == 0 {
        return Err(Error::config("rays_per_step must be positive"));
    }
    let pool = RayPool::new(views)?;
    field.zero_latent_weights();
    let n = field.config().latent_dim;
    let mut adam = AdamState::for_field(field, &config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ema: Option<f64> = None;
    let mut history: VecDeque<f64> = VecDeque::with_capacity(config.divergence_window + 1);
    let mut done = 0;
    for k in 0..config.iterations {
        let u = uniform_simplex(n, &mut rng);
        let mut grads = vec![0.0; field.param_count()];
        let loss = pool.batch_step(field, &u, config.rays_per_step, &config.ray_march, config.reduction, &mut rng, &mut grads)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { term: "photometric".into(), iteration: k });
        }
        let running = match ema {
            None => loss,
            Some(e) => 0.95 * e + 0.05 * loss,
        };
        ema = Some(running);
        history.push_back(running);
        if history.len() > config.divergence_window {
            let old = history.pop_front().expect("non-empty");
            if config.divergence_window > 0 && running > config.divergence_factor * old {
                return Err(Error::Divergence(format!(
                    "photometric loss rose from {old:.3e} to {running:.3e} over {} steps (iteration {k})",
                    config.divergence_window
                )));
            }
        }
        adam_step(&mut field.params.values, &grads, &mut adam)?;
        field.params.round_to_storage();
        done = k + 1;
        if let Some(target) = config.psnr_target {
            if k >= 50 && loss_psnr(running) >= target {
                break;
            }
        }
    }
    let running_loss = ema.unwrap_or(0.0);
    Ok(FitReport {
        iterations: done,
        running_loss,
        running_psnr: loss_psnr(running_loss),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    pub photometric_weight: f64,
    /// Simplex vertex that carries the source prompt.
    pub source_vertex: usize,
    pub photometric_rays: usize,
    pub fit: FitConfig,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            photometric_weight: 1.0,
            source_vertex: 0,
            photometric_rays: 1024,
            fit: FitConfig::default(),
        }
    }
}

impl TransformConfig {
    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if latent_dim != 2 {
            return Err(Error::config("transformation needs a two-vertex latent segment"));
        }
        if self.source_vertex >= latent_dim {
            return Err(Error::config("source_vertex must be 0 or 1"));
        }
        if !(self.photometric_weight >= 0.0 && self.photometric_weight.is_finite()) {
            return Err(Error::config("photometric_weight must be a finite non-negative number"));
        }
        if self.photometric_rays == 0 {
            return Err(Error::config("photometric_rays must be positive"));
        }
        Ok(())
    }
}

/// Generation over the segment with a photometric term toward the source
/// views whenever the source vertex is drawn. The photometric batches use
/// their own random stream, so with weight 0 this is exactly
/// [`train_generation`].
pub fn train_transform(
    generation: &GenerationConfig,
    transform: &TransformConfig,
    views: &[PosedView],
    field: &mut NeuralField,
    guidance: &Guidance<'_>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    transform.validate(field.config().latent_dim)?;
    let anchor = PhotometricAnchor {
        pool: RayPool::new(views)?,
        weight: transform.photometric_weight,
        source_vertex: transform.source_vertex,
        rays_per_step: transform.photometric_rays,
        rng: ChaCha8Rng::seed_from_u64(generation.seed ^ 0x5eed_0f_f1e1d),
    };
    run_loop(generation, field, guidance, Some(anchor), observer)
}

/// Renders `count` views of `source` on a ring around `center` for fitting.
pub fn ring_views<F: RadianceField + ?Sized>(
    source: &F,
    latent: &LatentCode,
    center: Vec3,
    radius: f64,
    elevations_deg: &[f64],
    count: usize,
    resolution: usize,
    config: &RayMarchConfig,
) -> Result<Vec<PosedView>> {
    let mut views = Vec::with_capacity(count);
    for k in 0..count {
        let az = std::f64::consts::TAU * (k as f64 + 0.5) / count as f64;
        let el = elevations_deg[k % elevations_deg.len().max(1)].to_radians();
        let camera = Camera::orbit(center, radius, az, el, 40f64.to_radians(), resolution, resolution);
        let view = crate::render::render_view(source, &camera, LatentSource::Fixed(latent), &LightSample::ambient_only(), config, 0)?;
        views.push(PosedView { camera, image: view.rgb });
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_indexing_covers_all_pairs() {
        let n = 5;
        let pairs: Vec<_> = (0..n * (n - 1) / 2).map(|k| pair_from_index(n, k)).collect();
        let mut want = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                want.push((i, j));
            }
        }
        assert_eq!(pairs, want);
    }

    #[test]
    fn degenerate_sampler_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            assert!(matches!(sample_latent(0.0, 3, &mut rng).1, Site::Vertex(_)));
            assert!(matches!(sample_latent(1.0, 1, &mut rng).1, Site::Vertex(0)));
            let (u, s) = sample_latent(1.0, 3, &mut rng);
            assert!(matches!(s, Site::Edge(..)));
            assert_eq!(u.as_slice().iter().filter(|&&x| x > 0.0).count(), 2);
        }
    }

    #[test]
    fn smoothness_hand_cases() {
        let flat = Image::filled(4, 3, &[0.0, 0.0, 1.0]);
        assert_eq!(normal_smoothness_loss(&flat), 0.0);
        let step = Image::from_data(2, 2, 3, vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(normal_smoothness_loss(&step), 1.0);
    }

    #[test]
    fn orientation_hand_cases() {
        let v = vec![Vec3::Z; 4];
        let facing = vec![-Vec3::Z; 4];
        assert_eq!(orientation_penalty(&facing, &v, &[1.0; 4]), 0.0);
        assert_eq!(orientation_penalty(&v, &v, &[1.0; 4]), 1.0);
        assert_eq!(orientation_penalty(&v, &v, &[0.0; 4]), 0.0);
    }

    #[test]
    fn photometric_hand_cases() {
        let a = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
        assert_eq!(photometric_loss(&a, &a), 0.0);
        let mut b = a;
        b[0] += 0.1;
        assert!((photometric_loss(&b, &a) - 0.01 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn ramp_and_resolution() {
        let c = GenerationConfig {
            iterations: 11,
            ..Default::default()
        };
        assert_eq!(c.orientation_weight(0), 100.0);
        assert_eq!(c.orientation_weight(10), 1000.0);
        assert_eq!(c.orientation_weight(5), 550.0);
        assert_eq!(c.resolution(5), 64);
        assert_eq!(c.resolution(6), 128);
    }

    #[test]
    fn uniform_simplex_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..5 {
            for _ in 0..200 {
                let u = uniform_simplex(n, &mut rng);
                assert_eq!(u.dim(), n);
            }
        }
    }
}
