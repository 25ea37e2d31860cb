//! Analytic density fields: ground truth for renderer oracles and the
//! silhouette targets used by the toy critics.

use crate::field::{FieldSample, RadianceField};
use crate::math::{Aabb, Vec3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Cuboid { center: Vec3, half_extents: Vec3 },
    /// Infinite slab `min <= p[axis] <= max`.
    Slab { axis: usize, min: f64, max: f64 },
}

impl Shape {
    pub fn contains(&self, p: Vec3) -> bool {
        match *self {
            Shape::Sphere { center, radius } => (p - center).norm() <= radius,
            Shape::Cuboid {
                center,
                half_extents,
            } => {
                let d = p - center;
                d.x.abs() <= half_extents.x && d.y.abs() <= half_extents.y && d.z.abs() <= half_extents.z
            }
            Shape::Slab { axis, min, max } => (min..=max).contains(&p[axis]),
        }
    }

    pub fn bounds(&self) -> Option<Aabb> {
        match *self {
            Shape::Sphere { center, radius } => Some(Aabb::new(center - Vec3::splat(radius), center + Vec3::splat(radius))),
            Shape::Cuboid {
                center,
                half_extents,
            } => Some(Aabb::new(center - half_extents, center + half_extents)),
            Shape::Slab { .. } => None,
        }
    }
}

/// A shape filled with constant density and albedo.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solid {
    pub shape: Shape,
    pub density: f64,
    pub albedo: [f64; 3],
}

impl Solid {
    pub fn sphere(center: Vec3, radius: f64, density: f64, albedo: [f64; 3]) -> Self {
        Solid {
            shape: Shape::Sphere { center, radius },
            density,
            albedo,
        }
    }

    pub fn cuboid(center: Vec3, half_extents: Vec3, density: f64, albedo: [f64; 3]) -> Self {
        Solid {
            shape: Shape::Cuboid {
                center,
                half_extents,
            },
            density,
            albedo,
        }
    }
}

/// Union of solids. Overlaps add density and mix albedo by density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub solids: Vec<Solid>,
    /// Accepted latent dimension; the scene ignores the code itself.
    #[serde(default = "one")]
    pub latent_dim: usize,
}

fn one() -> usize {
    1
}

impl AnalyticScene {
    pub fn new(solids: Vec<Solid>) -> Self {
        AnalyticScene {
            solids,
            latent_dim: 1,
        }
    }

    pub fn with_latent_dim(mut self, n: usize) -> Self {
        self.latent_dim = n;
        self
    }

    fn eval(&self, p: Vec3) -> FieldSample {
        let mut density = 0.0;
        let mut albedo = [0.0; 3];
        for s in &self.solids {
            if s.shape.contains(p) {
                density += s.density;
                for c in 0..3 {
                    albedo[c] += s.density * s.albedo[c];
                }
            }
        }
        if density > 0.0 {
            for a in &mut albedo {
                *a /= density;
            }
        }
        FieldSample { density, albedo }
    }
}

impl RadianceField for AnalyticScene {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn bounds(&self) -> Option<Aabb> {
        let mut it = self.solids.iter().map(|s| s.shape.bounds());
        let first = it.next()??;
        it.try_fold(first, |acc, b| b.map(|b| Aabb::new(acc.min.min_elem(b.min), acc.max.max_elem(b.max))))
    }

    fn sample(&self, p: Vec3, _u: &[f64]) -> FieldSample {
        self.eval(p)
    }
}

/// Latent-conditioned analytic field: density `Σ uᵢ τᵢ(p)`, albedo mixed by
/// each scene's density contribution.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMixture {
    pub scenes: Vec<AnalyticScene>,
}

impl RadianceField for LatentMixture {
    fn latent_dim(&self) -> usize {
        self.scenes.len()
    }

    fn bounds(&self) -> Option<Aabb> {
        let mut it = self.scenes.iter().map(|s| s.bounds());
        let first = it.next()??;
        it.try_fold(first, |acc, b| b.map(|b| Aabb::new(acc.min.min_elem(b.min), acc.max.max_elem(b.max))))
    }

    fn sample(&self, p: Vec3, u: &[f64]) -> FieldSample {
        let mut density = 0.0;
        let mut albedo = [0.0; 3];
        for (scene, &w) in self.scenes.iter().zip(u) {
            if w == 0.0 {
                continue;
            }
            let s = scene.eval(p);
            density += w * s.density;
            for c in 0..3 {
                albedo[c] += w * s.density * s.albedo[c];
            }
        }
        if density > 0.0 {
            for a in &mut albedo {
                *a /= density;
            }
        }
        FieldSample { density, albedo }
    }
}

/// Field defined by a density closure with constant albedo.
pub struct DensityFn<F> {
    pub density: F,
    pub albedo: [f64; 3],
    pub latent_dim: usize,
    pub normal_step: f64,
}

impl<F: Fn(Vec3) -> f64 + Sync> DensityFn<F> {
    pub fn new(density: F) -> Self {
        DensityFn {
            density,
            albedo: [1.0; 3],
            latent_dim: 1,
            normal_step: 1e-3,
        }
    }
}

impl<F: Fn(Vec3) -> f64 + Sync> RadianceField for DensityFn<F> {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn sample(&self, p: Vec3, _u: &[f64]) -> FieldSample {
        FieldSample {
            density: (self.density)(p),
            albedo: self.albedo,
        }
    }

    fn normal_step(&self) -> f64 {
        self.normal_step
    }
}

/// The two-object toy pair: a sphere on the −x side and a cube on the +x side
/// whose silhouettes do not overlap in front views.
pub fn toy_pair() -> (AnalyticScene, AnalyticScene) {
    let sphere = AnalyticScene::new(vec![Solid::sphere(
        Vec3::new(-0.3, 0.0, 0.0),
        0.25,
        40.0,
        [0.85, 0.25, 0.2],
    )]);
    let cube = AnalyticScene::new(vec![Solid::cuboid(
        Vec3::new(0.3, 0.0, 0.0),
        Vec3::splat(0.2),
        40.0,
        [0.2, 0.35, 0.85],
    )]);
    (sphere, cube)
}

/// Centered sphere used by the photometric fitting checks.
pub fn centered_sphere() -> AnalyticScene {
    AnalyticScene::new(vec![Solid::sphere(Vec3::ZERO, 0.45, 40.0, [0.8, 0.45, 0.25])])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_interpolates_density() {
        let (a, b) = toy_pair();
        let m = LatentMixture { scenes: vec![a, b] };
        let p = Vec3::new(-0.3, 0.0, 0.0);
        assert_eq!(m.sample(p, &[1.0, 0.0]).density, 40.0);
        assert_eq!(m.sample(p, &[0.0, 1.0]).density, 0.0);
        assert_eq!(m.sample(p, &[0.5, 0.5]).density, 20.0);
    }

    #[test]
    fn scene_bounds_cover_solids() {
        let (a, _) = toy_pair();
        let b = a.bounds().unwrap();
        assert!(b.contains(Vec3::new(-0.3, 0.24, 0.0)));
        let slab = AnalyticScene::new(vec![Solid {
            shape: Shape::Slab { axis: 2, min: 0.0, max: 1.0 },
            density: 1.0,
            albedo: [1.0; 3],
        }]);
        assert!(slab.bounds().is_none());
    }
}
