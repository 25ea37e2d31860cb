//! Reverse-mode differentiation of rendered pixels with respect to the
//! neural field's parameters.
//!
//! The differentiable surface is a fixed vocabulary: trilinear gather and
//! dense layers (inside [`NeuralField::backward`]), softplus/sigmoid
//! activations, Lambertian shading, the compositing scan, and the
//! central-difference normal estimate. Each ray is re-marched with
//! [`EvalTape`]s recorded per sample and then swept back to front.

use crate::error::{Error, Result};
use crate::field::{normal_from_gradient, EvalTape, NeuralField, RadianceField};
use crate::math::Vec3;
use crate::render::{generate_rays, ray_key, sample_segments, Camera, LatentSource, LightSample, Ray, RayMarchConfig, RayOutput, RenderedView, NORMAL_OPACITY_FLOOR, TRANSMITTANCE_CUTOFF};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Loss sensitivity for one ray's outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RayAdjoint {
    pub d_color: [f64; 3],
    pub d_opacity: f64,
}

impl RayAdjoint {
    fn is_zero(&self) -> bool {
        self.d_opacity == 0.0 && self.d_color.iter().all(|&d| d == 0.0)
    }
}

/// Loss sensitivity for every map of a [`RenderedView`]. Depth is treated as
/// a constant (normals are read at the depth point without differentiating
/// the location).
#[derive(Clone, Debug, PartialEq)]
pub struct ViewAdjoint {
    pub width: usize,
    pub height: usize,
    pub d_rgb: Vec<f64>,
    pub d_opacity: Vec<f64>,
    pub d_normal: Vec<f64>,
}

impl ViewAdjoint {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        ViewAdjoint {
            width,
            height,
            d_rgb: vec![0.0; n * 3],
            d_opacity: vec![0.0; n],
            d_normal: vec![0.0; n * 3],
        }
    }

    /// `self += weight · other`.
    pub fn add_scaled(&mut self, other: &ViewAdjoint, weight: f64) {
        debug_assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, b) in self.d_rgb.iter_mut().zip(&other.d_rgb) {
            *a += weight * b;
        }
        for (a, b) in self.d_opacity.iter_mut().zip(&other.d_opacity) {
            *a += weight * b;
        }
        for (a, b) in self.d_normal.iter_mut().zip(&other.d_normal) {
            *a += weight * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_rgb.iter().chain(&self.d_opacity).chain(&self.d_normal).all(|v| v.is_finite())
    }
}

/// Order of gradient accumulation across rays.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Single pass in ray order; bit-reproducible.
    #[default]
    Sequential,
    /// Per-worker partial sums added in chunk order.
    Parallel,
}

#[derive(Clone, Copy, Default)]
struct SampleRecord {
    delta: f64,
    alpha: f64,
    transmittance: f64,
    albedo: [f64; 3],
    color: [f64; 3],
    lambert_raw: f64,
    normal: Vec3,
    grad_norm: f64,
    normal_ok: bool,
}

struct Workspace {
    tapes: Vec<EvalTape>,
    normal_tapes: Vec<EvalTape>,
    ts: Vec<f64>,
    deltas: Vec<f64>,
    records: Vec<SampleRecord>,
}

impl Workspace {
    fn new(field: &NeuralField, n_samples: usize, shading_normals: bool) -> Self {
        let tape = field.new_tape();
        Workspace {
            tapes: vec![tape.clone(); n_samples],
            normal_tapes: vec![tape; if shading_normals { n_samples * 6 } else { 6 }],
            ts: Vec::with_capacity(n_samples),
            deltas: Vec::with_capacity(n_samples),
            records: vec![SampleRecord::default(); n_samples],
        }
    }
}

/// Taped central-difference density gradient at `p`; tapes `[+x,−x,+y,−y,+z,−z]`.
fn taped_density_gradient(field: &NeuralField, p: Vec3, u: &[f64], h: f64, tapes: &mut [EvalTape]) -> Vec3 {
    let mut g = [0.0; 3];
    for a in 0..3 {
        let e = Vec3::axis(a) * h;
        let up = field.forward_taped(p + e, u, &mut tapes[2 * a]).density;
        let down = field.forward_taped(p - e, u, &mut tapes[2 * a + 1]).density;
        g[a] = (up - down) / (2.0 * h);
    }
    Vec3::from_array(g)
}

/// Backpropagates `d_normal` through `n = −g/‖g‖` and the central differences.
fn normal_backward(field: &NeuralField, normal: Vec3, grad_norm: f64, d_normal: Vec3, h: f64, tapes: &[EvalTape], grads: &mut [f64]) {
    // dn/dg = −(I − n nᵀ)/‖g‖
    let proj = d_normal - normal * normal.dot(d_normal);
    let d_g = proj * (-1.0 / grad_norm);
    for a in 0..3 {
        let d = d_g[a] / (2.0 * h);
        if d == 0.0 {
            continue;
        }
        field.backward(&tapes[2 * a], d, [0.0; 3], grads);
        field.backward(&tapes[2 * a + 1], -d, [0.0; 3], grads);
    }
}

#[allow(clippy::too_many_arguments)]
fn ray_backward(
    field: &NeuralField,
    ray: &Ray,
    latent: LatentSource<'_>,
    light: &LightSample,
    config: &RayMarchConfig,
    key: u64,
    adj: RayAdjoint,
    ws: &mut Workspace,
    grads: &mut [f64],
) {
    if !sample_segments(ray, config, field.bounds(), key, &mut ws.ts, &mut ws.deltas) {
        return;
    }
    let n = ws.ts.len();
    let diffuse = light.has_diffuse();
    let h = field.normal_step();

    let mut transmittance = 1.0;
    let mut used = n;
    for i in 0..n {
        let p = ray.at(ws.ts[i]);
        let u = latent.code_at(p);
        let s = field.forward_taped(p, &u, &mut ws.tapes[i]);
        let mut rec = SampleRecord {
            delta: ws.deltas[i],
            alpha: 1.0 - (-s.density * ws.deltas[i]).exp(),
            transmittance,
            albedo: s.albedo,
            normal: Vec3::Z,
            ..Default::default()
        };
        if diffuse {
            let g = taped_density_gradient(field, p, &u, h, &mut ws.normal_tapes[i * 6..i * 6 + 6]);
            let est = normal_from_gradient(g);
            rec.normal = est.normal;
            rec.grad_norm = g.norm();
            rec.normal_ok = !est.degenerate;
        }
        rec.lambert_raw = rec.normal.dot(light.direction);
        let lambert = rec.lambert_raw.max(0.0);
        for k in 0..3 {
            rec.color[k] = (s.albedo[k] * (light.ambient[k] + light.diffuse[k] * lambert)).clamp(0.0, 1.0);
        }
        transmittance *= 1.0 - rec.alpha;
        ws.records[i] = rec;
        if transmittance < TRANSMITTANCE_CUTOFF {
            used = i + 1;
            break;
        }
    }

    // R: color composited from sample i+1 onward (background behind);
    // Q: opacity composited from sample i+1 onward.
    let mut rest_color = config.background;
    let mut rest_opacity = 0.0;
    for i in (0..used).rev() {
        let rec = ws.records[i];
        let t = rec.transmittance;
        let mut d_alpha = adj.d_opacity * (1.0 - rest_opacity);
        for k in 0..3 {
            d_alpha += adj.d_color[k] * (rec.color[k] - rest_color[k]);
        }
        d_alpha *= t;
        let d_density = d_alpha * rec.delta * (1.0 - rec.alpha);

        let w = t * rec.alpha;
        let lambert = rec.lambert_raw.max(0.0);
        let mut d_albedo = [0.0; 3];
        let mut d_lambert = 0.0;
        for k in 0..3 {
            let d_c = w * adj.d_color[k];
            let light_k = light.ambient[k] + light.diffuse[k] * lambert;
            let raw = rec.albedo[k] * light_k;
            if (0.0..=1.0).contains(&raw) {
                d_albedo[k] = d_c * light_k;
                d_lambert += d_c * rec.albedo[k] * light.diffuse[k];
            }
        }
        field.backward(&ws.tapes[i], d_density, d_albedo, grads);
        if diffuse && rec.normal_ok && rec.lambert_raw > 0.0 && d_lambert != 0.0 {
            let d_normal = light.direction * d_lambert;
            normal_backward(field, rec.normal, rec.grad_norm, d_normal, h, &ws.normal_tapes[i * 6..i * 6 + 6], grads);
        }

        for k in 0..3 {
            rest_color[k] = rec.alpha * rec.color[k] + (1.0 - rec.alpha) * rest_color[k];
        }
        rest_opacity = rec.alpha + (1.0 - rec.alpha) * rest_opacity;
    }
}

fn pixel_normal_backward(field: &NeuralField, point: Vec3, latent: LatentSource<'_>, d_normal: Vec3, ws: &mut Workspace, grads: &mut [f64]) {
    let h = field.normal_step();
    let u = latent.code_at(point);
    let tapes = &mut ws.normal_tapes[..6];
    let g = taped_density_gradient(field, point, &u, h, tapes);
    let est = normal_from_gradient(g);
    if est.degenerate {
        return;
    }
    normal_backward(field, est.normal, g.norm(), d_normal, h, tapes, grads);
}

/// Runs `work` over `0..count`, accumulating into `grads` in the requested order.
fn accumulate<W>(field: &NeuralField, count: usize, reduction: Reduction, n_samples: usize, shading_normals: bool, grads: &mut [f64], work: W)
where
    W: Fn(usize, &mut Workspace, &mut [f64]) + Sync,
{
    match reduction {
        Reduction::Sequential => {
            let mut ws = Workspace::new(field, n_samples, shading_normals);
            for i in 0..count {
                work(i, &mut ws, grads);
            }
        }
        Reduction::Parallel => {
            let chunks = rayon::current_num_threads().max(1);
            let per = count.div_ceil(chunks).max(1);
            let partials: Vec<Vec<f64>> = (0..count)
                .step_by(per)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|start| {
                    let mut local = vec![0.0; grads.len()];
                    let mut ws = Workspace::new(field, n_samples, shading_normals);
                    for i in start..(start + per).min(count) {
                        work(i, &mut ws, &mut local);
                    }
                    local
                })
                .collect();
            for part in partials {
                for (g, p) in grads.iter_mut().zip(part) {
                    *g += p;
                }
            }
        }
    }
}

/// Accumulates `∂L/∂θ` for a full view given per-pixel adjoints. `view` must
/// be the forward render of the same inputs (its depth and opacity locate
/// the normal-map points).
#[allow(clippy::too_many_arguments)]
pub fn backprop_view(
    field: &NeuralField,
    camera: &Camera,
    latent: LatentSource<'_>,
    light: &LightSample,
    config: &RayMarchConfig,
    seed: u64,
    view: &RenderedView,
    adjoint: &ViewAdjoint,
    grads: &mut [f64],
    reduction: Reduction,
) -> Result<()> {
    if grads.len() != field.param_count() {
        return Err(Error::invalid("gradient buffer length does not match parameter count"));
    }
    if (adjoint.width, adjoint.height) != (camera.width, camera.height) || (view.width(), view.height()) != (camera.width, camera.height) {
        return Err(Error::invalid("adjoint/view shape does not match camera"));
    }
    let rays = generate_rays(camera)?;
    accumulate(field, rays.len(), reduction, config.n_samples, light.has_diffuse(), grads, |i, ws, g| {
        let adj = RayAdjoint {
            d_color: [adjoint.d_rgb[3 * i], adjoint.d_rgb[3 * i + 1], adjoint.d_rgb[3 * i + 2]],
            d_opacity: adjoint.d_opacity[i],
        };
        if !adj.is_zero() {
            ray_backward(field, &rays[i], latent, light, config, ray_key(seed, i), adj, ws, g);
        }
        let dn = Vec3::new(adjoint.d_normal[3 * i], adjoint.d_normal[3 * i + 1], adjoint.d_normal[3 * i + 2]);
        if dn != Vec3::ZERO && view.opacity.data[i] > NORMAL_OPACITY_FLOOR {
            let point = rays[i].at(view.depth.data[i]);
            pixel_normal_backward(field, point, latent, dn, ws, g);
        }
    });
    Ok(())
}

/// Forward render of an arbitrary ray batch; ray `i` uses jitter key `ray_key(seed, i)`.
pub fn render_rays<F: RadianceField + ?Sized>(
    field: &F,
    rays: &[Ray],
    latent: LatentSource<'_>,
    light: &LightSample,
    config: &RayMarchConfig,
    seed: u64,
) -> Vec<RayOutput> {
    rays.par_iter()
        .enumerate()
        .map(|(i, r)| crate::render::render_ray(field, r, latent, light, config, ray_key(seed, i)))
        .collect()
}

/// Gradient of a ray-batch loss given per-ray adjoints.
#[allow(clippy::too_many_arguments)]
pub fn backprop_rays(
    field: &NeuralField,
    rays: &[Ray],
    latent: LatentSource<'_>,
    light: &LightSample,
    config: &RayMarchConfig,
    seed: u64,
    adjoints: &[RayAdjoint],
    grads: &mut [f64],
    reduction: Reduction,
) -> Result<()> {
    if adjoints.len() != rays.len() || grads.len() != field.param_count() {
        return Err(Error::invalid("ray adjoint or gradient length mismatch"));
    }
    accumulate(field, rays.len(), reduction, config.n_samples, light.has_diffuse(), grads, |i, ws, g| {
        if !adjoints[i].is_zero() {
            ray_backward(field, &rays[i], latent, light, config, ray_key(seed, i), adjoints[i], ws, g);
        }
    });
    Ok(())
}
