//! Structural alignment: the symmetric DIFT distance over any dense feature
//! extractor, mask-filtered grid sampling, and the multi-view harness.

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::raster::Image;
use crate::render::{Camera, RenderedView};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Per-pixel boolean mask, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid("mask size does not match its dimensions"));
        }
        Ok(Mask { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        Mask { width, height, data }
    }

    /// `opacity > threshold` on a single-channel image.
    pub fn from_opacity(opacity: &Image, threshold: f64) -> Self {
        Mask {
            width: opacity.width,
            height: opacity.height,
            data: opacity.data.iter().map(|&o| o > threshold).collect(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count();
        let union = self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Dense features, `dim` values per pixel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn from_fn(width: usize, height: usize, dim: usize, f: impl Fn(usize, usize) -> Vec<f64>) -> Self {
        let mut data = Vec::with_capacity(width * height * dim);
        for r in 0..height {
            for c in 0..width {
                let v = f(r, c);
                assert_eq!(v.len(), dim);
                data.extend(v);
            }
        }
        FeatureMap { width, height, dim, data }
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * self.dim;
        &self.data[o..o + self.dim]
    }
}

pub trait FeatureExtractor: Sync {
    fn dim(&self) -> usize;
    fn extract(&self, image: &Image) -> FeatureMap;
}

/// Angular pixel-coordinate features `(cos ωx, sin ωx, cos ωy, sin ωy)` with
/// `ω = π / (2·max(W, H))`; cosine similarity then decreases with
/// coordinate distance along each axis. Ignores image content.
#[derive(Clone, Copy, Debug, Default)]
pub struct CoordinateFeatures;

impl CoordinateFeatures {
    pub fn feature(x: f64, y: f64, width: usize, height: usize) -> Vec<f64> {
        let w = std::f64::consts::PI / (2.0 * width.max(height) as f64);
        vec![(w * x).cos(), (w * x).sin(), (w * y).cos(), (w * y).sin()]
    }
}

impl FeatureExtractor for CoordinateFeatures {
    fn dim(&self) -> usize {
        4
    }

    fn extract(&self, image: &Image) -> FeatureMap {
        FeatureMap::from_fn(image.width, image.height, 4, |r, c| Self::feature(c as f64, r as f64, image.width, image.height))
    }
}

/// Pixel coordinates `(x, y) = (col, row)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet2D {
    pub points: Vec<(usize, usize)>,
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

impl PointSet2D {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Largest pairwise distance, searched over the convex hull.
    pub fn diameter(&self) -> f64 {
        let mut pts: Vec<(f64, f64)> = self.points.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        pts.dedup();
        if pts.len() < 2 {
            return 0.0;
        }
        let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
        for pass in 0..2 {
            let start = hull.len();
            let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
            for &p in iter {
                while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                    hull.pop();
                }
                hull.push(p);
            }
            hull.pop();
        }
        let mut best = 0.0f64;
        for i in 0..hull.len() {
            for j in i + 1..hull.len() {
                best = best.max(dist(hull[i], hull[j]));
            }
        }
        best
    }
}

/// Grid points `(k·stride, m·stride)` that fall inside the mask.
pub fn sample_points(mask: &Mask, stride: usize) -> Result<PointSet2D> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let mut points = Vec::new();
    for r in (0..mask.height).step_by(stride) {
        for c in (0..mask.width).step_by(stride) {
            if mask.get(r, c) {
                points.push((c, r));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::MetricUndefined("mask has no sample points".into()));
    }
    Ok(PointSet2D { points })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matches {
    /// Matched coordinate for every input point; `None` where the source
    /// feature has zero norm.
    pub mapped: Vec<Option<(usize, usize)>>,
    pub skipped: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine nearest neighbour in `b` for each point of `points`, searching
/// only pixels where `candidates` is set (every pixel when `None`). Ties go
/// to the smallest row-major index.
pub fn match_points(fa: &FeatureMap, fb: &FeatureMap, points: &PointSet2D, candidates: Option<&Mask>) -> Result<Matches> {
    if fa.dim != fb.dim {
        return Err(Error::invalid("feature maps have different dimensions"));
    }
    let cand: Vec<(usize, usize, f64)> = (0..fb.height)
        .flat_map(|r| (0..fb.width).map(move |c| (r, c)))
        .filter(|&(r, c)| candidates.is_none_or(|m| m.get(r, c)))
        .filter_map(|(r, c)| {
            let n = norm(fb.at(r, c));
            (n > 0.0).then_some((r, c, n))
        })
        .collect();
    let mut skipped = 0;
    let mapped = points
        .points
        .iter()
        .map(|&(x, y)| {
            let f = fa.at(y, x);
            let nf = norm(f);
            if nf == 0.0 || cand.is_empty() {
                skipped += 1;
                return None;
            }
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for &(r, c, nb) in &cand {
                let dot: f64 = f.iter().zip(fb.at(r, c)).map(|(a, b)| a * b).sum();
                let sim = dot / (nf * nb);
                if sim > best.0 {
                    best = (sim, r, c);
                }
            }
            Some((best.2, best.1))
        })
        .collect();
    Ok(Matches { mapped, skipped })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiftResult {
    pub distance: f64,
    pub skipped: usize,
}

fn side(fa: &FeatureMap, fb: &FeatureMap, pa: &PointSet2D, mb: &Mask) -> Result<(f64, usize)> {
    let sigma = pa.diameter();
    if sigma == 0.0 {
        return Err(Error::MetricUndefined("point set has zero diameter".into()));
    }
    let m = match_points(fa, fb, pa, Some(mb))?;
    let mut sum = 0.0;
    let mut count = 0;
    for (&(x, y), q) in pa.points.iter().zip(&m.mapped) {
        if let Some((qx, qy)) = *q {
            sum += dist((qx as f64, qy as f64), (x as f64, y as f64)) / sigma;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::MetricUndefined("every sample point was skipped".into()));
    }
    Ok((sum / count as f64, m.skipped))
}

/// Symmetric diameter-normalized displacement between feature-matched
/// points. Each direction is averaged over its own sample count;
/// correspondences are searched inside the other image's mask.
pub fn dift_distance_features(fa: &FeatureMap, ma: &Mask, fb: &FeatureMap, mb: &Mask, stride: usize) -> Result<DiftResult> {
    if (fa.width, fa.height) != (ma.width, ma.height) || (fb.width, fb.height) != (mb.width, mb.height) {
        return Err(Error::invalid("feature map and mask sizes differ"));
    }
    let pa = sample_points(ma, stride)?;
    let pb = sample_points(mb, stride)?;
    let (sa, ka) = side(fa, fb, &pa, mb)?;
    let (sb, kb) = side(fb, fa, &pb, ma)?;
    Ok(DiftResult {
        distance: 0.5 * (sa + sb),
        skipped: ka + kb,
    })
}

pub fn dift_distance(image_a: &Image, mask_a: &Mask, image_b: &Image, mask_b: &Mask, extractor: &dyn FeatureExtractor, stride: usize) -> Result<DiftResult> {
    dift_distance_features(&extractor.extract(image_a), mask_a, &extractor.extract(image_b), mask_b, stride)
}

/// Something that renders from a camera, e.g. a field at one latent code.
pub trait ViewSource: Sync {
    fn render(&self, camera: &Camera) -> Result<RenderedView>;
}

impl<F: Fn(&Camera) -> Result<RenderedView> + Sync> ViewSource for F {
    fn render(&self, camera: &Camera) -> Result<RenderedView> {
        self(camera)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiviewConfig {
    pub n_views: usize,
    pub elevation_deg: f64,
    pub radius: f64,
    pub center: Vec3,
    pub fov_deg: f64,
    pub resolution: usize,
    pub stride: usize,
    pub mask_threshold: f64,
}

impl Default for MultiviewConfig {
    fn default() -> Self {
        MultiviewConfig {
            n_views: 120,
            elevation_deg: 15.0,
            radius: 3.5,
            center: Vec3::ZERO,
            fov_deg: 40.0,
            resolution: 64,
            stride: 4,
            mask_threshold: 0.5,
        }
    }
}

impl MultiviewConfig {
    /// Evenly spaced azimuths on one elevation ring.
    pub fn cameras(&self) -> Vec<Camera> {
        (0..self.n_views)
            .map(|k| {
                let az = std::f64::consts::TAU * k as f64 / self.n_views as f64;
                Camera::orbit(self.center, self.radius, az, self.elevation_deg.to_radians(), self.fov_deg.to_radians(), self.resolution, self.resolution)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub prompt_a: String,
    pub prompt_b: String,
    /// Mean over the views that were not skipped.
    pub mean_distance: f64,
    pub per_view: Vec<Option<f64>>,
    pub skipped_views: usize,
}

impl AlignmentReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Fixed-width summary table of several reports.
pub fn summary_table(reports: &[AlignmentReport]) -> String {
    let mut s = format!("{:<24} {:<24} {:>10} {:>8}\n", "prompt_a", "prompt_b", "distance", "skipped");
    for r in reports {
        let _ = writeln!(s, "{:<24} {:<24} {:>10.4} {:>8}", r.prompt_a, r.prompt_b, r.mean_distance, r.skipped_views);
    }
    s
}

/// Renders both sources from every ring camera and averages the per-view
/// distance. Views where either mask yields no usable points are skipped.
pub fn multiview_alignment(
    a: &dyn ViewSource,
    b: &dyn ViewSource,
    config: &MultiviewConfig,
    extractor: &dyn FeatureExtractor,
    prompts: (&str, &str),
) -> Result<AlignmentReport> {
    let mut per_view = Vec::with_capacity(config.n_views);
    for camera in config.cameras() {
        let va = a.render(&camera)?;
        let vb = b.render(&camera)?;
        let ma = Mask::from_opacity(&va.opacity, config.mask_threshold);
        let mb = Mask::from_opacity(&vb.opacity, config.mask_threshold);
        match dift_distance(&va.rgb, &ma, &vb.rgb, &mb, extractor, config.stride) {
            Ok(r) => per_view.push(Some(r.distance)),
            Err(Error::MetricUndefined(_)) => per_view.push(None),
            Err(e) => return Err(e),
        }
    }
    let used: Vec<f64> = per_view.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::MetricUndefined("every view was skipped".into()));
    }
    Ok(AlignmentReport {
        prompt_a: prompts.0.to_string(),
        prompt_b: prompts.1.to_string(),
        mean_distance: used.iter().sum::<f64>() / used.len() as f64,
        skipped_views: per_view.len() - used.len(),
        per_view,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coord_map(w: usize, h: usize, shift: (f64, f64)) -> FeatureMap {
        FeatureMap::from_fn(w, h, 4, |r, c| CoordinateFeatures::feature(c as f64 - shift.0, r as f64 - shift.1, w, h))
    }

    #[test]
    fn sampling_cases() {
        let full = Mask::from_fn(5, 4, |_, _| true);
        assert_eq!(sample_points(&full, 1).unwrap().len(), 20);
        let empty = Mask::from_fn(5, 4, |_, _| false);
        assert!(matches!(sample_points(&empty, 1), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn diameter_of_square_corners() {
        let p = PointSet2D {
            points: vec![(0, 0), (3, 0), (0, 4), (3, 4), (1, 1), (2, 2)],
        };
        assert_eq!(p.diameter(), 5.0);
        let line = PointSet2D {
            points: vec![(0, 0), (1, 0), (2, 0)],
        };
        assert_eq!(line.diameter(), 2.0);
    }

    #[test]
    fn identity_and_shift() {
        let (w, h) = (16, 12);
        let f = coord_map(w, h, (0.0, 0.0));
        let mask = Mask::from_fn(w, h, |r, c| (2..6).contains(&r) && (2..6).contains(&c));
        let r = dift_distance_features(&f, &mask, &f, &mask, 1).unwrap();
        assert_eq!(r.distance, 0.0);
        let k = 3;
        let fb = coord_map(w, h, (k as f64, 0.0));
        let mb = Mask::from_fn(w, h, |r, c| (2..6).contains(&r) && (2 + k..6 + k).contains(&c));
        let sigma = sample_points(&mask, 1).unwrap().diameter();
        let r = dift_distance_features(&f, &mask, &fb, &mb, 1).unwrap();
        assert!((r.distance - k as f64 / sigma).abs() < 1e-12, "{} vs {}", r.distance, k as f64 / sigma);
    }

    #[test]
    fn zero_features_are_skipped() {
        let fa = FeatureMap::from_fn(2, 1, 2, |_, c| if c == 0 { vec![0.0, 0.0] } else { vec![1.0, 0.0] });
        let p = PointSet2D { points: vec![(0, 0), (1, 0)] };
        let m = match_points(&fa, &fa, &p, None).unwrap();
        assert_eq!(m.skipped, 1);
        assert_eq!(m.mapped, vec![None, Some((1, 0))]);
    }

    #[test]
    fn ties_go_to_first_index() {
        let fb = FeatureMap::from_fn(3, 2, 1, |_, _| vec![2.0]);
        let fa = FeatureMap::from_fn(1, 1, 1, |_, _| vec![1.0]);
        let m = match_points(&fa, &fb, &PointSet2D { points: vec![(0, 0)] }, None).unwrap();
        assert_eq!(m.mapped, vec![Some((0, 0))]);
    }

    #[test]
    fn iou_cases() {
        let a = Mask::from_fn(4, 4, |r, _| r < 2);
        let b = Mask::from_fn(4, 4, |r, _| r < 1);
        assert_eq!(a.iou(&b), 0.5);
        assert_eq!(a.iou(&a), 1.0);
    }
}
