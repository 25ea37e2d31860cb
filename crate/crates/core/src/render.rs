//! Ray-march rendering of a radiance field into RGB, opacity, depth and
//! normal maps.
//!
//! Compositing follows the standard quadrature: with samples `μᵢ` at ray
//! distances `tᵢ` and segment lengths `δᵢ = tᵢ₊₁ − tᵢ` (the last segment
//! runs to `far`), `αᵢ = 1 − exp(−τᵢ δᵢ)`, `Tᵢ = Π_{j<i} (1 − αⱼ)` and
//! `C = Σ αᵢ Tᵢ cᵢ + T_final · background`.

use crate::error::{Error, Result};
use crate::field::{field_normal, LatentCode, RadianceField};
use crate::math::{hash_uniform, splitmix64, Aabb, Vec3};
use crate::raster::Image;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::borrow::Cow;

/// Pixels with opacity below this get no normal estimate.
pub const NORMAL_OPACITY_FLOOR: f64 = 1e-4;

/// Marching stops once transmittance falls below this; the remaining
/// samples and background are dropped from both the forward and backward
/// passes.
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub target: Vec3,
    pub up: Vec3,
    /// Radians.
    pub vertical_fov: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera on a sphere around `center`, looking at it, with `+y` up.
    /// Azimuth is measured in the xz-plane from `+z`, elevation from that plane.
    pub fn orbit(center: Vec3, radius: f64, azimuth: f64, elevation: f64, vertical_fov: f64, width: usize, height: usize) -> Self {
        let dir = Vec3::new(
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
            elevation.cos() * azimuth.cos(),
        );
        Camera {
            position: center + dir * radius,
            target: center,
            up: Vec3::Y,
            vertical_fov,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.position.is_finite() || !self.target.is_finite() || !self.up.is_finite() {
            return Err(Error::invalid("camera has non-finite vectors"));
        }
        if (self.position - self.target).norm() == 0.0 {
            return Err(Error::invalid("camera position equals target"));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < std::f64::consts::PI) {
            return Err(Error::invalid("camera fov must lie in (0, π)"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image must be at least 1x1"));
        }
        Ok(())
    }

    /// Orthonormal (forward, right, up) basis.
    pub fn basis(&self) -> Result<(Vec3, Vec3, Vec3)> {
        self.validate()?;
        let forward = (self.target - self.position).normalized();
        let side = forward.cross(self.up);
        if side.norm() < 1e-9 * self.up.norm().max(1e-300) {
            return Err(Error::invalid("camera up vector is parallel to the view direction"));
        }
        let right = side.normalized();
        let up = right.cross(forward);
        Ok((forward, right, up))
    }

    pub fn with_size(&self, width: usize, height: usize) -> Camera {
        Camera {
            width,
            height,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Pinhole rays through pixel centers, row-major from the top-left pixel.
pub fn generate_rays(camera: &Camera) -> Result<Vec<Ray>> {
    let (forward, right, up) = camera.basis()?;
    let tan_half = (camera.vertical_fov * 0.5).tan();
    let aspect = camera.width as f64 / camera.height as f64;
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for row in 0..camera.height {
        let y = (1.0 - 2.0 * (row as f64 + 0.5) / camera.height as f64) * tan_half;
        for col in 0..camera.width {
            let x = (2.0 * (col as f64 + 0.5) / camera.width as f64 - 1.0) * tan_half * aspect;
            rays.push(Ray {
                origin: camera.position,
                dir: (forward + right * x + up * y).normalized(),
            });
        }
    }
    Ok(rays)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RayMarchConfig {
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    pub stratified_jitter: bool,
    pub background: [f64; 3],
}

impl Default for RayMarchConfig {
    fn default() -> Self {
        RayMarchConfig {
            n_samples: 96,
            near: 0.1,
            far: 6.0,
            stratified_jitter: false,
            background: [1.0; 3],
        }
    }
}

impl RayMarchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::config("ray march requires 0 < near < far"));
        }
        if self.n_samples < 2 {
            return Err(Error::config("ray march requires at least 2 samples"));
        }
        if self.background.iter().any(|c| !c.is_finite()) {
            return Err(Error::config("background must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightSample {
    pub direction: Vec3,
    pub diffuse: [f64; 3],
    pub ambient: [f64; 3],
}

impl LightSample {
    /// Unlit: emitted radiance equals albedo.
    pub fn ambient_only() -> Self {
        LightSample {
            direction: Vec3::Z,
            diffuse: [0.0; 3],
            ambient: [1.0; 3],
        }
    }

    pub fn has_diffuse(&self) -> bool {
        self.diffuse.iter().any(|&d| d != 0.0)
    }
}

/// `c = ρ ⊙ (ambient + diffuse · max(0, n·ℓ))`, clamped to [0, 1].
pub fn shade(albedo: [f64; 3], normal: Vec3, light: &LightSample) -> [f64; 3] {
    let lambert = normal.dot(light.direction).max(0.0);
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = (albedo[k] * (light.ambient[k] + light.diffuse[k] * lambert)).clamp(0.0, 1.0);
    }
    c
}

/// Where the latent code comes from at each sample point.
#[derive(Clone, Copy)]
pub enum LatentSource<'a> {
    Fixed(&'a LatentCode),
    Spatial(&'a (dyn Fn(Vec3) -> LatentCode + Sync)),
}

impl<'a> LatentSource<'a> {
    pub fn code_at(&self, p: Vec3) -> Cow<'a, [f64]> {
        match *self {
            LatentSource::Fixed(c) => Cow::Borrowed(c.as_slice()),
            LatentSource::Spatial(f) => Cow::Owned(f(p).as_slice().to_vec()),
        }
    }

    fn check_dim(&self, expected: usize) -> Result<()> {
        let dim = match self {
            LatentSource::Fixed(c) => c.dim(),
            LatentSource::Spatial(f) => f(Vec3::ZERO).dim(),
        };
        if dim != expected {
            return Err(Error::config(format!(
                "latent source has dimension {dim}, field expects {expected}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayOutput {
    pub color: [f64; 3],
    pub opacity: f64,
    /// Opacity-weighted expected distance.
    pub depth: f64,
}

/// Jitter key for ray `index` of a pass seeded with `seed`.
pub fn ray_key(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64 ^ 0xA3D0_0000_0000_0001))
}

/// Sample distances and segment lengths for one ray. Returns `false` if the
/// ray misses the field bounds.
pub(crate) fn sample_segments(
    ray: &Ray,
    config: &RayMarchConfig,
    bounds: Option<Aabb>,
    key: u64,
    ts: &mut Vec<f64>,
    deltas: &mut Vec<f64>,
) -> bool {
    ts.clear();
    deltas.clear();
    let (mut t0, mut t1) = (config.near, config.far);
    if let Some(b) = bounds {
        match b.intersect(ray.origin, ray.dir) {
            Some((a, c)) => {
                t0 = t0.max(a);
                t1 = t1.min(c);
            }
            None => return false,
        }
    }
    if !(t1 > t0) {
        return false;
    }
    let n = config.n_samples;
    let bin = (t1 - t0) / n as f64;
    for i in 0..n {
        let j = if config.stratified_jitter {
            hash_uniform(key.wrapping_add(i as u64))
        } else {
            0.5
        };
        ts.push(t0 + (i as f64 + j) * bin);
    }
    for i in 0..n {
        let next = if i + 1 < n { ts[i + 1] } else { t1 };
        deltas.push(next - ts[i]);
    }
    true
}

/// Renders one ray. `key` seeds stratified jitter when enabled.
pub fn render_ray<F: RadianceField + ?Sized>(
    field: &F,
    ray: &Ray,
    latent: LatentSource<'_>,
    light: &LightSample,
    config: &RayMarchConfig,
    key: u64,
) -> RayOutput {
    let mut ts = Vec::with_capacity(config.n_samples);
    let mut deltas = Vec::with_capacity(config.n_samples);
    if !sample_segments(ray, config, field.bounds(), key, &mut ts, &mut deltas) {
        return RayOutput {
            color: config.background,
            opacity: 0.0,
            depth: 0.0,
        };
    }
    let diffuse = light.has_diffuse();
    let h = field.normal_step();
    let mut transmittance = 1.0;
    let mut color = [0.0; 3];
    let mut opacity = 0.0;
    let mut depth_sum = 0.0;
    for (&t, &delta) in ts.iter().zip(&deltas) {
        let p = ray.at(t);
        let u = latent.code_at(p);
        let s = field.sample(p, &u);
        let alpha = 1.0 - (-s.density * delta).exp();
        let w = transmittance * alpha;
        if w > 0.0 {
            let n = if diffuse {
                field_normal(field, p, &u, h).normal
            } else {
                Vec3::Z
            };
            let c = shade(s.albedo, n, light);
            for k in 0..3 {
                color[k] += w * c[k];
            }
            opacity += w;
            depth_sum += w * t;
        }
        transmittance *= 1.0 - alpha;
        if transmittance < TRANSMITTANCE_CUTOFF {
            break;
        }
    }
    for k in 0..3 {
        color[k] += transmittance * config.background[k];
    }
    RayOutput {
        color,
        opacity,
        depth: depth_sum / opacity.max(1e-6),
    }
}

/// Per-pixel maps from one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub rgb: Image,
    pub opacity: Image,
    pub depth: Image,
    /// Unit normals at the expected termination point; `+z` where the pixel
    /// is (nearly) transparent.
    pub normal: Image,
}

impl RenderedView {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    /// Normals scaled by pixel opacity (zero on background).
    pub fn weighted_normals(&self) -> Image {
        let mut out = self.normal.clone();
        for (px, &o) in out.data.chunks_mut(3).zip(&self.opacity.data) {
            for v in px {
                *v *= o;
            }
        }
        out
    }
}

/// Renders all maps for one view. `seed` keys the jitter stream.
pub fn render_view<F: RadianceField + ?Sized>(
    field: &F,
    camera: &Camera,
    latent: LatentSource<'_>,
    light: &LightSample,
    config: &RayMarchConfig,
    seed: u64,
) -> Result<RenderedView> {
    config.validate()?;
    latent.check_dim(field.latent_dim())?;
    let rays = generate_rays(camera)?;
    let (w, h) = (camera.width, camera.height);
    let outputs: Vec<(RayOutput, Vec3)> = rays
        .par_iter()
        .enumerate()
        .map(|(i, ray)| {
            let out = render_ray(field, ray, latent, light, config, ray_key(seed, i));
            let normal = if out.opacity > NORMAL_OPACITY_FLOOR {
                let p = ray.at(out.depth);
                let u = latent.code_at(p);
                field_normal(field, p, &u, field.normal_step()).normal
            } else {
                Vec3::Z
            };
            (out, normal)
        })
        .collect();
    let mut view = RenderedView {
        rgb: Image::new(w, h, 3),
        opacity: Image::new(w, h, 1),
        depth: Image::new(w, h, 1),
        normal: Image::new(w, h, 3),
    };
    for (i, (out, n)) in outputs.into_iter().enumerate() {
        view.rgb.data[i * 3..i * 3 + 3].copy_from_slice(&out.color);
        view.opacity.data[i] = out.opacity;
        view.depth.data[i] = out.depth;
        view.normal.data[i * 3..i * 3 + 3].copy_from_slice(&n.to_array());
    }
    Ok(view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{AnalyticScene, DensityFn, Shape, Solid};

    fn cam(w: usize, h: usize, fov_deg: f64) -> Camera {
        Camera {
            position: Vec3::new(0.0, 0.0, -3.0),
            target: Vec3::ZERO,
            up: Vec3::Y,
            vertical_fov: fov_deg.to_radians(),
            width: w,
            height: h,
        }
    }

    #[test]
    fn single_pixel_ray_is_central() {
        let c = cam(1, 1, 40.0);
        let rays = generate_rays(&c).unwrap();
        assert_eq!(rays.len(), 1);
        assert!((rays[0].dir - Vec3::Z).norm() < 1e-15);
    }

    #[test]
    fn two_by_two_rays_are_mirror_symmetric() {
        let rays = generate_rays(&cam(2, 2, 90.0)).unwrap();
        let d: Vec<Vec3> = rays.iter().map(|r| r.dir).collect();
        // row-major: 0 1 / 2 3
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(d[0].x, -d[1].x) && close(d[0].y, d[1].y) && close(d[0].z, d[1].z));
        assert!(close(d[0].y, -d[2].y) && close(d[0].x, d[2].x));
        assert!(close(d[3].x, -d[2].x) && close(d[3].y, -d[1].y));
        for r in &rays {
            assert!((r.dir.norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn corner_ray_angle_matches_pinhole_geometry() {
        let c = cam(64, 64, 40.0);
        let rays = generate_rays(&c).unwrap();
        let t = (20f64).to_radians().tan();
        // top-left pixel center offsets in the image plane at unit distance
        let x = (2.0 * 0.5 / 64.0 - 1.0) * t;
        let y = (1.0 - 2.0 * 0.5 / 64.0) * t;
        let expected = (x * x + y * y).sqrt().atan();
        let angle = rays[0].dir.dot(Vec3::Z).acos();
        assert!((angle - expected).abs() < 1e-12);
    }

    #[test]
    fn degenerate_camera_basis_rejected() {
        let mut c = cam(4, 4, 40.0);
        c.up = Vec3::Z;
        assert!(matches!(generate_rays(&c), Err(Error::InvalidInput(_))));
        c.up = Vec3::Y;
        c.target = c.position;
        assert!(generate_rays(&c).is_err());
    }

    #[test]
    fn shading_cases() {
        let light = LightSample {
            direction: Vec3::Z,
            diffuse: [0.0; 3],
            ambient: [1.0; 3],
        };
        assert_eq!(shade([0.3, 0.6, 0.9], Vec3::X, &light), [0.3, 0.6, 0.9]);
        let grazing = LightSample {
            direction: Vec3::Z,
            diffuse: [1.0; 3],
            ambient: [0.0; 3],
        };
        assert_eq!(shade([1.0, 1.0, 1.0], Vec3::X, &grazing), [0.0; 3]);
        let lit = LightSample {
            direction: Vec3::Z,
            diffuse: [0.8; 3],
            ambient: [0.2; 3],
        };
        let n = Vec3::new(3f64.sqrt() / 2.0, 0.0, 0.5);
        let c = shade([1.0, 0.5, 0.2], n, &lit);
        for (got, want) in c.iter().zip([0.6, 0.3, 0.12]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_space_renders_background() {
        let field = DensityFn::new(|_| 0.0);
        let view = render_view(
            &field,
            &cam(8, 8, 40.0),
            LatentSource::Fixed(&LatentCode::vertex(1, 0)),
            &LightSample::ambient_only(),
            &RayMarchConfig::default(),
            0,
        )
        .unwrap();
        assert!(view.rgb.data.iter().all(|&v| v == 1.0));
        assert!(view.opacity.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ln2_segment_gives_half_alpha() {
        let field = DensityFn::new(|p: Vec3| if p.z < 2.0 { 2f64.ln() } else { 0.0 });
        // bins [1,2] and [2,3], midpoints 1.5 and 2.5: the first segment has
        // length 1 so τδ = ln 2, the second sample is empty
        let config = RayMarchConfig {
            n_samples: 2,
            near: 1.0,
            far: 3.0,
            stratified_jitter: false,
            background: [0.0; 3],
        };
        let ray = Ray {
            origin: Vec3::ZERO,
            dir: Vec3::Z,
        };
        let code = LatentCode::vertex(1, 0);
        let out = render_ray(&field, &ray, LatentSource::Fixed(&code), &LightSample::ambient_only(), &config, 0);
        assert!((out.opacity - 0.5).abs() < 1e-15);
        assert!((out.color[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn transmittance_monotone_and_energy_bounded() {
        let scene = AnalyticScene::new(vec![Solid {
            shape: Shape::Sphere {
                center: Vec3::ZERO,
                radius: 0.6,
            },
            density: 5.0,
            albedo: [0.9, 0.2, 0.4],
        }]);
        let view = render_view(
            &scene,
            &cam(16, 16, 40.0),
            LatentSource::Fixed(&LatentCode::vertex(1, 0)),
            &LightSample {
                direction: Vec3::new(0.0, 1.0, -1.0).normalized(),
                diffuse: [0.7; 3],
                ambient: [0.3; 3],
            },
            &RayMarchConfig::default(),
            0,
        )
        .unwrap();
        assert!(view.opacity.data.iter().all(|&o| (0.0..=1.0 + 1e-12).contains(&o)));
        assert!(view.rgb.data.iter().all(|&c| (0.0..=1.0 + 1e-12).contains(&c)));
        for (px, &o) in view.normal.data.chunks(3).zip(&view.opacity.data) {
            if o > 0.01 {
                let n = (px[0] * px[0] + px[1] * px[1] + px[2] * px[2]).sqrt();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn jitter_is_reproducible_per_seed() {
        let scene = AnalyticScene::new(vec![Solid::sphere(Vec3::ZERO, 0.5, 3.0, [0.5; 3])]);
        let config = RayMarchConfig {
            stratified_jitter: true,
            n_samples: 16,
            ..Default::default()
        };
        let code = LatentCode::vertex(1, 0);
        let r = |seed| {
            render_view(&scene, &cam(8, 8, 40.0), LatentSource::Fixed(&code), &LightSample::ambient_only(), &config, seed).unwrap()
        };
        assert_eq!(r(3), r(3));
        assert_ne!(r(3).rgb, r(4).rgb);
    }
}
