//! Score-distillation guidance: noise schedule, embedding blending over the
//! latent simplex, the critic abstraction, and the image-space SDS gradient
//! `w(t)(ε̂ − ε)` for one `(t, ε)` draw.

use crate::error::{Error, Result};
use crate::field::LatentCode;
use crate::fixtures::AnalyticScene;
use crate::raster::Image;
use crate::render::{render_view, Camera, LatentSource, LightSample, RayMarchConfig};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

/// Conditioning vector `y` for the critic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding(pub Vec<f64>);

impl PromptEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// One embedding per simplex vertex plus an optional general embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSet {
    pub vertices: Vec<PromptEmbedding>,
    pub general: Option<PromptEmbedding>,
}

impl EmbeddingSet {
    pub fn new(vertices: Vec<PromptEmbedding>, general: Option<PromptEmbedding>) -> Result<Self> {
        let dim = vertices.first().map(|v| v.dim()).ok_or_else(|| Error::config("embedding set is empty"))?;
        if vertices.iter().chain(general.iter()).any(|v| v.dim() != dim) {
            return Err(Error::config("embeddings have mixed dimensions"));
        }
        if vertices.iter().chain(general.iter()).any(|v| v.0.iter().any(|x| !x.is_finite())) {
            return Err(Error::config("embeddings contain non-finite values"));
        }
        Ok(EmbeddingSet { vertices, general })
    }

    /// Vertex `i` is `eᵢ`, the general embedding is the uniform average.
    /// With this set the blended embedding equals the latent code itself.
    pub fn one_hot(n: usize) -> Self {
        let vertices = (0..n).map(|i| PromptEmbedding(LatentCode::vertex(n, i).as_slice().to_vec())).collect();
        EmbeddingSet {
            vertices,
            general: Some(PromptEmbedding(vec![1.0 / n as f64; n])),
        }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].dim()
    }
}

/// `y(u) = Σ uᵢ yᵢ`.
pub fn blend_embeddings(u: &LatentCode, set: &EmbeddingSet) -> Result<PromptEmbedding> {
    if u.dim() != set.len() {
        return Err(Error::config(format!(
            "latent code has {} components but {} embeddings are configured",
            u.dim(),
            set.len()
        )));
    }
    if let Some(i) = u.vertex_index() {
        return Ok(set.vertices[i].clone());
    }
    let mut out = vec![0.0; set.dim()];
    for (w, y) in u.as_slice().iter().zip(&set.vertices) {
        for (o, v) in out.iter_mut().zip(&y.0) {
            *o += w * v;
        }
    }
    Ok(PromptEmbedding(out))
}

/// How transitions (non-vertex codes) are conditioned. Vertices always use
/// their own embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    #[default]
    Blended,
    GeneralPrompt,
    /// General embedding with empty prompt strings on the wire.
    Unconditioned,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// `α = cos(πt/2)`, `σ = sin(πt/2)`.
    #[default]
    Cosine,
    /// `α = √(1 − t)`, `σ = √t`.
    SqrtLinear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w(t) = σ_t²`.
    #[default]
    SigmaSquared,
    Unit,
}

/// Variance-preserving schedule with an annealed timestep range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSchedule {
    pub noise: NoiseKind,
    pub weighting: Weighting,
    pub t_min: f64,
    pub t_max_start: f64,
    pub t_max_end: f64,
    /// Iterations over which `t_max` is annealed; trainers overwrite it with
    /// their iteration count.
    pub horizon: usize,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule {
            noise: NoiseKind::Cosine,
            weighting: Weighting::SigmaSquared,
            t_min: 0.02,
            t_max_start: 0.98,
            t_max_end: 0.5,
            horizon: 10_000,
        }
    }
}

impl DiffusionSchedule {
    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.noise {
            NoiseKind::Cosine => (FRAC_PI_2 * t).cos(),
            NoiseKind::SqrtLinear => (1.0 - t).sqrt(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.noise {
            NoiseKind::Cosine => (FRAC_PI_2 * t).sin(),
            NoiseKind::SqrtLinear => t.sqrt(),
        }
    }

    pub fn weight(&self, t: f64) -> f64 {
        match self.weighting {
            Weighting::SigmaSquared => self.sigma(t).powi(2),
            Weighting::Unit => 1.0,
        }
    }

    /// Upper end of the timestep interval at `iteration`, linear from
    /// `t_max_start` at 0 to `t_max_end` at `horizon − 1`.
    pub fn t_max(&self, iteration: usize) -> f64 {
        let frac = if self.horizon <= 1 {
            1.0
        } else {
            (iteration as f64 / (self.horizon - 1) as f64).min(1.0)
        };
        self.t_max_start + (self.t_max_end - self.t_max_start) * frac
    }

    pub fn t_range(&self, iteration: usize) -> (f64, f64) {
        (self.t_min, self.t_max(iteration))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_min && self.t_min < self.t_max_end && self.t_max_end <= self.t_max_start && self.t_max_start < 1.0) {
            return Err(Error::config("schedule requires 0 < t_min < t_max_end <= t_max_start < 1"));
        }
        Ok(())
    }
}

/// Uniform timestep in the annealed range.
pub fn sample_timestep<R: Rng + ?Sized>(iteration: usize, schedule: &DiffusionSchedule, rng: &mut R) -> f64 {
    let (lo, hi) = schedule.t_range(iteration);
    lo + (hi - lo) * rng.random::<f64>()
}

/// What the critic is conditioned on for one call.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a> {
    pub embedding: &'a [f64],
    /// Latent code `u`, sent so blending can be delegated to a remote critic.
    pub weights: &'a [f64],
    pub prompts: &'a [String],
    /// Passed through to the critic untouched.
    pub guidance_scale: f64,
    pub camera: Option<&'a Camera>,
}

/// A denoiser `ε̂ = E(y, t, x_t)`.
pub trait Critic: Send + Sync {
    fn denoise(&self, noisy: &Image, t: f64, cond: &Conditioning<'_>) -> Result<Image>;
}

/// Optimal denoiser for a point-mass data distribution at `target`:
/// `ε̂ = (x_t − α_t x*) / σ_t`.
#[derive(Clone, Debug)]
pub struct PointMassCritic {
    pub target: Image,
    pub schedule: DiffusionSchedule,
}

impl PointMassCritic {
    pub fn new(target: Image, schedule: DiffusionSchedule) -> Result<Self> {
        if !target.is_finite() {
            return Err(Error::invalid("point-mass target must be finite"));
        }
        Ok(PointMassCritic { target, schedule })
    }
}

pub(crate) fn point_mass_epsilon(noisy: &Image, target: &Image, alpha: f64, sigma: f64) -> Result<Image> {
    if !noisy.same_shape(target) {
        return Err(Error::Guidance {
            message: format!(
                "critic target is {}x{}x{}, input is {}x{}x{}",
                target.width, target.height, target.channels, noisy.width, noisy.height, noisy.channels
            ),
            retriable: false,
        });
    }
    let data = noisy.data.iter().zip(&target.data).map(|(x, t)| (x - alpha * t) / sigma).collect();
    Ok(Image { data, ..noisy.clone() })
}

impl Critic for PointMassCritic {
    fn denoise(&self, noisy: &Image, t: f64, _cond: &Conditioning<'_>) -> Result<Image> {
        point_mass_epsilon(noisy, &self.target, self.schedule.alpha(t), self.schedule.sigma(t))
    }
}

/// Point-mass critic with one target image per vertex; the target for a
/// call is `Σ yᵢ x*ᵢ` with the conditioning embedding `y` read as vertex
/// weights (an all-zero embedding means the uniform blend).
#[derive(Clone, Debug)]
pub struct BlendedTargetCritic {
    pub targets: Vec<Image>,
    pub schedule: DiffusionSchedule,
}

fn blend_weights(weights: &[f64], n: usize) -> Result<Vec<f64>> {
    if weights.len() != n {
        return Err(Error::config(format!("critic has {n} targets but conditioning has {} weights", weights.len())));
    }
    if weights.iter().sum::<f64>().abs() < 1e-12 {
        return Ok(vec![1.0 / n as f64; n]);
    }
    Ok(weights.to_vec())
}

impl BlendedTargetCritic {
    pub fn new(targets: Vec<Image>, schedule: DiffusionSchedule) -> Result<Self> {
        let first = targets.first().ok_or_else(|| Error::config("no critic targets"))?;
        if targets.iter().any(|t| !t.same_shape(first) || !t.is_finite()) {
            return Err(Error::config("critic targets must be finite and share one shape"));
        }
        Ok(BlendedTargetCritic { targets, schedule })
    }

    pub fn target_for(&self, weights: &[f64]) -> Result<Image> {
        let w = blend_weights(weights, self.targets.len())?;
        let mut out = Image { data: vec![0.0; self.targets[0].data.len()], ..self.targets[0].clone() };
        for (t, &wi) in self.targets.iter().zip(&w) {
            for (o, v) in out.data.iter_mut().zip(&t.data) {
                *o += wi * v;
            }
        }
        Ok(out)
    }
}

impl Critic for BlendedTargetCritic {
    fn denoise(&self, noisy: &Image, t: f64, cond: &Conditioning<'_>) -> Result<Image> {
        let target = self.target_for(cond.embedding)?;
        point_mass_epsilon(noisy, &target, self.schedule.alpha(t), self.schedule.sigma(t))
    }
}

/// Multi-object toy critic: each vertex owns an analytic scene; the target
/// for a call is the per-vertex target renders from the call's camera,
/// blended with the conditioning embedding read as vertex weights. The
/// point-mass denoiser is then applied to that target.
pub struct SceneTargetCritic {
    pub scenes: Vec<AnalyticScene>,
    pub schedule: DiffusionSchedule,
    pub ray_config: RayMarchConfig,
}

impl SceneTargetCritic {
    pub fn target_for(&self, camera: &Camera, weights: &[f64]) -> Result<Image> {
        let weights = blend_weights(weights, self.scenes.len())?;
        let mut out = Image::new(camera.width, camera.height, 3);
        for (scene, &w) in self.scenes.iter().zip(&weights) {
            if w == 0.0 {
                continue;
            }
            let code = LatentCode::vertex(scene.latent_dim, 0);
            let view = render_view(scene, camera, LatentSource::Fixed(&code), &LightSample::ambient_only(), &self.ray_config, 0)?;
            for (o, v) in out.data.iter_mut().zip(&view.rgb.data) {
                *o += w * v;
            }
        }
        Ok(out)
    }
}

impl Critic for SceneTargetCritic {
    fn denoise(&self, noisy: &Image, t: f64, cond: &Conditioning<'_>) -> Result<Image> {
        let camera = cond.camera.ok_or_else(|| Error::Guidance {
            message: "scene target critic needs the view camera".into(),
            retriable: false,
        })?;
        let target = self.target_for(&camera.with_size(noisy.width, noisy.height), cond.embedding)?;
        point_mass_epsilon(noisy, &target, self.schedule.alpha(t), self.schedule.sigma(t))
    }
}

/// One SDS draw.
#[derive(Clone, Debug)]
pub struct SdsDraw {
    /// `w(t)(ε̂ − ε)`, shaped like the rendered image.
    pub grad: Image,
    pub t: f64,
}

/// SDS image gradient at a fixed `(t, ε)`.
pub fn sds_grad_at(x: &Image, t: f64, eps: &Image, cond: &Conditioning<'_>, critic: &dyn Critic, schedule: &DiffusionSchedule) -> Result<Image> {
    if !x.same_shape(eps) {
        return Err(Error::invalid("noise and image shapes differ"));
    }
    if !x.is_finite() {
        return Err(Error::invalid("rendered image is not finite"));
    }
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let noisy = Image {
        data: x.data.iter().zip(&eps.data).map(|(xv, e)| a * xv + s * e).collect(),
        ..x.clone()
    };
    let eps_hat = critic.denoise(&noisy, t, cond)?;
    if !eps_hat.same_shape(x) {
        return Err(Error::Protocol(format!(
            "critic returned {}x{}x{} for a {}x{}x{} input",
            eps_hat.width, eps_hat.height, eps_hat.channels, x.width, x.height, x.channels
        )));
    }
    let w = schedule.weight(t);
    Ok(Image {
        data: eps_hat.data.iter().zip(&eps.data).map(|(eh, e)| w * (eh - e)).collect(),
        ..x.clone()
    })
}

/// Draws `t` from the annealed range and `ε ~ N(0, I)`, then returns the SDS
/// image gradient.
pub fn sds_image_grad<R: Rng + ?Sized>(
    x: &Image,
    cond: &Conditioning<'_>,
    critic: &dyn Critic,
    schedule: &DiffusionSchedule,
    iteration: usize,
    rng: &mut R,
) -> Result<SdsDraw> {
    let t = sample_timestep(iteration, schedule, rng);
    let eps = Image {
        data: (0..x.data.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        ..x.clone()
    };
    let grad = sds_grad_at(x, t, &eps, cond, critic, schedule)?;
    Ok(SdsDraw { grad, t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cond<'a>(e: &'a [f64]) -> Conditioning<'a> {
        Conditioning {
            embedding: e,
            weights: e,
            prompts: &[],
            guidance_scale: 1.0,
            camera: None,
        }
    }

    struct Echo(Image);
    impl Critic for Echo {
        fn denoise(&self, _noisy: &Image, _t: f64, _c: &Conditioning<'_>) -> Result<Image> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn blend_cases() {
        let set = EmbeddingSet::new(vec![PromptEmbedding(vec![1.0, 0.0]), PromptEmbedding(vec![0.0, 1.0])], None).unwrap();
        let y = blend_embeddings(&LatentCode::new(vec![0.25, 0.75]).unwrap(), &set).unwrap();
        assert_eq!(y.0, vec![0.25, 0.75]);
        assert_eq!(blend_embeddings(&LatentCode::vertex(2, 1), &set).unwrap(), set.vertices[1]);
        let same = EmbeddingSet::new(vec![PromptEmbedding(vec![0.3, -2.0]); 3], None).unwrap();
        let y = blend_embeddings(&LatentCode::new(vec![0.2, 0.3, 0.5]).unwrap(), &same).unwrap();
        assert!((y.0[0] - 0.3).abs() < 1e-15 && (y.0[1] + 2.0).abs() < 1e-15);
        assert!(blend_embeddings(&LatentCode::vertex(3, 0), &set).is_err());
    }

    #[test]
    fn schedules_preserve_variance() {
        for noise in [NoiseKind::Cosine, NoiseKind::SqrtLinear] {
            let s = DiffusionSchedule { noise, ..Default::default() };
            for i in 1..100 {
                let t = i as f64 / 100.0;
                assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-12);
                assert!(s.weight(t) > 0.0);
            }
        }
    }

    #[test]
    fn timestep_range_anneals() {
        let s = DiffusionSchedule::default().with_horizon(101);
        assert_eq!(s.t_range(0), (0.02, 0.98));
        assert!((s.t_max(100) - 0.5).abs() < 1e-15);
        assert!((s.t_max(500) - 0.5).abs() < 1e-15);
        let mut prev = 1.0;
        for i in 0..101 {
            assert!(s.t_max(i) <= prev);
            prev = s.t_max(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in [0, 100] {
            for _ in 0..1000 {
                let t = sample_timestep(i, &s, &mut rng);
                let (lo, hi) = s.t_range(i);
                assert!(t >= lo && t <= hi);
            }
        }
    }

    #[test]
    fn oracle_critic_gives_zero_gradient() {
        let x = Image::filled(3, 2, &[0.4, 0.5, 0.6]);
        let eps = Image::filled(3, 2, &[0.1, -0.7, 1.3]);
        let s = DiffusionSchedule::default();
        let g = sds_grad_at(&x, 0.4, &eps, &cond(&[1.0]), &Echo(eps.clone()), &s).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn point_mass_inverts_noise() {
        let s = DiffusionSchedule::default();
        let target = Image::filled(2, 2, &[0.2, 0.9, 0.5]);
        let critic = PointMassCritic::new(target.clone(), s.clone()).unwrap();
        let t = 0.3;
        let clean = Image {
            data: target.data.iter().map(|v| s.alpha(t) * v).collect(),
            ..target.clone()
        };
        let e = critic.denoise(&clean, t, &cond(&[1.0])).unwrap();
        assert!(e.data.iter().all(|v| v.abs() < 1e-15));
        let eps = Image::filled(2, 2, &[0.3, -1.1, 0.05]);
        let noisy = Image {
            data: target.data.iter().zip(&eps.data).map(|(v, n)| s.alpha(t) * v + s.sigma(t) * n).collect(),
            ..target.clone()
        };
        let e = critic.denoise(&noisy, t, &cond(&[1.0])).unwrap();
        assert!(e.max_abs_diff(&eps) < 1e-12);
    }

    #[test]
    fn point_mass_at_optimum_is_zero_for_any_draw() {
        let s = DiffusionSchedule::default();
        let x = Image::filled(4, 4, &[0.3, 0.6, 0.1]);
        let critic = PointMassCritic::new(x.clone(), s.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for it in 0..20 {
            let d = sds_image_grad(&x, &cond(&[1.0]), &critic, &s, it, &mut rng).unwrap();
            assert!(d.grad.data.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let s = DiffusionSchedule::default();
        let critic = PointMassCritic::new(Image::new(2, 2, 3), s.clone()).unwrap();
        let x = Image::new(3, 2, 3);
        let err = sds_grad_at(&x, 0.5, &x, &cond(&[1.0]), &critic, &s).unwrap_err();
        assert!(matches!(err, Error::Guidance { retriable: false, .. }));
        let wrong = Echo(Image::new(1, 1, 3));
        let err = sds_grad_at(&x, 0.5, &x, &cond(&[1.0]), &wrong, &s).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }
}
