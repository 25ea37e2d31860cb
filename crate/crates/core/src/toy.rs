//! Desk-scale setup: a small field over a tight box around the toy pair, and
//! the matching training, critic and camera settings.

use crate::error::Result;
use crate::field::{FieldConfig, HashGridConfig, LatentCode, MlpConfig, NeuralField, RadianceField};
use crate::fixtures::toy_pair;
use crate::guidance::{DiffusionSchedule, EmbeddingSet, SceneTargetCritic};
use crate::math::{Aabb, Vec3};
use crate::metrics::MultiviewConfig;
use crate::optim::AdamConfig;
use crate::render::{render_view, Camera, LatentSource, LightSample, RayMarchConfig, RenderedView};
use crate::train::{train_generation, CameraSampler, FitConfig, GenerationConfig, Guidance, LightingConfig, TrainObserver};

pub const TOY_HALF_EXTENT: f64 = 0.6;
pub const TOY_RESOLUTION: usize = 64;

pub fn toy_bounds() -> Aabb {
    Aabb::cube(TOY_HALF_EXTENT)
}

/// Six levels from resolution 4 up to about 45 cells across the box.
pub fn toy_field_config(latent_dim: usize) -> FieldConfig {
    FieldConfig {
        grid: HashGridConfig {
            levels: 6,
            base_resolution: 4,
            per_level_scale: 1.62,
            features_per_level: 2,
            table_size_log2: 14,
            bounds: toy_bounds(),
        },
        mlp: MlpConfig { hidden_layers: 1, width: 16 },
        latent_dim,
    }
}

/// Two levels and width 8, for finite-difference checks.
pub fn tiny_field_config(latent_dim: usize) -> FieldConfig {
    FieldConfig {
        grid: HashGridConfig {
            levels: 2,
            base_resolution: 4,
            per_level_scale: 2.0,
            features_per_level: 2,
            table_size_log2: 10,
            bounds: toy_bounds(),
        },
        mlp: MlpConfig { hidden_layers: 1, width: 8 },
        latent_dim,
    }
}

pub fn toy_ray_march(jitter: bool) -> RayMarchConfig {
    RayMarchConfig {
        n_samples: 24,
        near: 0.1,
        far: 6.0,
        stratified_jitter: jitter,
        background: [1.0; 3],
    }
}

pub fn toy_camera_sampler() -> CameraSampler {
    CameraSampler {
        elevation_deg: [0.0, 30.0],
        radius_scale: [1.9, 2.1],
        fov_deg: 40.0,
    }
}

/// Pixel-space point-mass gradients are far weaker than latent-space
/// ones, so the normal regularizers are scaled down by this factor.
pub const TOY_REGULARIZER_SCALE: f64 = 0.01;

/// Training resolution for toy generation; evaluation stays at
/// [`TOY_RESOLUTION`].
pub const TOY_TRAIN_RESOLUTION: usize = 32;

pub fn toy_generation_config(iterations: usize, edge_probability: f64, seed: u64) -> GenerationConfig {
    let base = GenerationConfig::default();
    GenerationConfig {
        iterations,
        edge_probability,
        orientation_weight_start: base.orientation_weight_start * TOY_REGULARIZER_SCALE,
        orientation_weight_end: base.orientation_weight_end * TOY_REGULARIZER_SCALE,
        normal_smoothness_weight: base.normal_smoothness_weight * TOY_REGULARIZER_SCALE,
        adam: AdamConfig {
            lr_mlp: 1e-2,
            ..AdamConfig::default()
        },
        resolution_start: TOY_TRAIN_RESOLUTION,
        resolution_end: TOY_TRAIN_RESOLUTION,
        camera: toy_camera_sampler(),
        lighting: LightingConfig::ambient(),
        ray_march: toy_ray_march(true),
        checkpoint_every: 0,
        seed,
        ..Default::default()
    }
}

pub fn toy_fit_config(iterations: usize, seed: u64) -> FitConfig {
    FitConfig {
        iterations,
        rays_per_step: 512,
        ray_march: toy_ray_march(true),
        seed,
        ..Default::default()
    }
}

pub fn toy_prompts() -> Vec<String> {
    vec!["a red sphere".into(), "a blue cube".into()]
}

pub fn toy_embeddings() -> EmbeddingSet {
    EmbeddingSet::one_hot(2)
}

/// Point-mass critic whose per-vertex targets are the toy sphere and cube.
pub fn toy_critic() -> SceneTargetCritic {
    let (sphere, cube) = toy_pair();
    SceneTargetCritic {
        scenes: vec![sphere, cube],
        schedule: DiffusionSchedule::default(),
        ray_config: toy_ray_march(false),
    }
}

/// Orbit camera around the toy box at the evaluation distance.
pub fn toy_orbit(azimuth: f64, elevation: f64, resolution: usize) -> Camera {
    Camera::orbit(Vec3::ZERO, 2.0 * toy_bounds().radius(), azimuth, elevation, 40f64.to_radians(), resolution, resolution)
}

/// Evaluation ring for the toy pair: 120 views at 15° elevation.
pub fn toy_multiview(resolution: usize) -> MultiviewConfig {
    MultiviewConfig {
        radius: 2.0 * toy_bounds().radius(),
        resolution,
        stride: (resolution / 16).max(1),
        ..Default::default()
    }
}

/// Generation on the toy pair with the crossfading toy critic.
pub fn train_toy(config: &GenerationConfig, observer: &mut dyn TrainObserver) -> Result<NeuralField> {
    let mut field = NeuralField::new(toy_field_config(2), config.seed)?;
    let critic = toy_critic();
    let embeddings = toy_embeddings();
    let prompts = toy_prompts();
    let guidance = Guidance {
        critic: &critic,
        embeddings: &embeddings,
        prompts: &prompts,
        general_prompt: "an object",
    };
    train_generation(config, &mut field, &guidance, observer)?;
    Ok(field)
}

/// Mean over `cameras` of the summed pixel opacity at latent `u`.
pub fn opacity_mass<F: RadianceField + ?Sized>(field: &F, u: &LatentCode, cameras: &[Camera]) -> Result<f64> {
    let mut total = 0.0;
    for camera in cameras {
        let view = render_view(field, camera, LatentSource::Fixed(u), &LightSample::ambient_only(), &toy_ray_march(false), 0)?;
        total += view.opacity.data.iter().sum::<f64>();
    }
    Ok(total / cameras.len().max(1) as f64)
}

/// Renders `field` at a fixed latent for the multiview harness.
pub fn latent_view_source<'a, F: RadianceField + ?Sized>(field: &'a F, u: &'a LatentCode) -> impl Fn(&Camera) -> Result<RenderedView> + Sync + 'a
where
    F: Sync,
{
    move |camera: &Camera| render_view(field, camera, LatentSource::Fixed(u), &LightSample::ambient_only(), &toy_ray_march(false), 0)
}
