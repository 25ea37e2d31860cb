//! Render requests shared by the command line and the service. Both go
//! through [`render`], so identical requests produce identical bytes.

use std::path::Path;

use alignfield_core::checkpoint::Checkpoint;
use alignfield_core::hybrid::{render_hybrid, Anchor, AnchorSet};
use alignfield_core::raster::{encode_depth_png, normal_to_display};
use alignfield_core::render::{render_view, LatentSource};
use alignfield_core::{Camera, LatentCode, LightSample, NeuralField, RadianceField, RayMarchConfig, RenderedView, Vec3};
use serde::{Deserialize, Serialize};

pub const MAX_RESOLUTION: usize = 1024;
pub const MAX_SAMPLES: usize = 1024;
pub const MULTIPART_BOUNDARY: &str = "alignfield-map";

/// A loaded checkpoint ready to render.
pub struct Model {
    pub field: NeuralField,
    pub prompts: Vec<String>,
    pub iteration: u64,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> alignfield_core::Result<Self> {
        Ok(Model {
            field: ckpt.to_field()?,
            prompts: ckpt.prompts.clone(),
            iteration: ckpt.iteration,
        })
    }

    pub fn load(path: &Path) -> alignfield_core::Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn latent_dim(&self) -> usize {
        self.field.config().latent_dim
    }

    pub fn info(&self) -> ModelInfo {
        let b = self.field.config().grid.bounds;
        ModelInfo {
            prompts: self.prompts.clone(),
            n: self.latent_dim(),
            bounds: Bounds {
                min: b.min.to_array(),
                max: b.max.to_array(),
            },
            iteration: self.iteration,
            limits: ImageLimits {
                max_resolution: MAX_RESOLUTION,
                max_samples: MAX_SAMPLES,
                maps: vec![MapKind::Rgb, MapKind::Normal, MapKind::Depth, MapKind::Opacity],
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageLimits {
    pub max_resolution: usize,
    pub max_samples: usize,
    pub maps: Vec<MapKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub prompts: Vec<String>,
    #[serde(rename = "N")]
    pub n: usize,
    pub bounds: Bounds,
    pub iteration: u64,
    pub limits: ImageLimits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Rgb,
    Normal,
    Depth,
    Opacity,
}

impl MapKind {
    pub fn name(self) -> &'static str {
        match self {
            MapKind::Rgb => "rgb",
            MapKind::Normal => "normal",
            MapKind::Depth => "depth",
            MapKind::Opacity => "opacity",
        }
    }
}

/// Orbit camera around the model bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    /// Distance from the bounds center; twice the bounds radius when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraSpec {
    fn default() -> Self {
        CameraSpec {
            azimuth_deg: 0.0,
            elevation_deg: 15.0,
            radius: None,
            fov_deg: 40.0,
            width: 64,
            height: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub pos: [f64; 3],
    pub code: Vec<f64>,
}

impl AnchorSpec {
    pub fn from_anchor(a: &Anchor) -> Self {
        AnchorSpec {
            pos: a.position.to_array(),
            code: a.code.as_slice().to_vec(),
        }
    }
}

/// Exactly one of `fixed`, `sweep_t` with `pair`, or `anchors`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<AnchorSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<f64>,
}

impl LatentSpec {
    pub fn fixed(u: Vec<f64>) -> Self {
        LatentSpec {
            fixed: Some(u),
            ..Default::default()
        }
    }

    pub fn sweep(t: f64, i: usize, j: usize) -> Self {
        LatentSpec {
            sweep_t: Some(t),
            pair: Some([i, j]),
            ..Default::default()
        }
    }

    pub fn anchors(anchors: &[Anchor], smoothing: f64) -> Self {
        LatentSpec {
            anchors: Some(anchors.iter().map(AnchorSpec::from_anchor).collect()),
            smoothing: Some(smoothing),
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    #[serde(default)]
    pub camera: CameraSpec,
    pub latent: LatentSpec,
    #[serde(default = "default_maps")]
    pub maps: Vec<MapKind>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_maps() -> Vec<MapKind> {
    vec![MapKind::Rgb]
}

fn default_samples() -> usize {
    64
}

/// A problem with one request field.
#[derive(Clone, Debug, PartialEq, Serialize, thiserror::Error)]
#[error("{field}: {message}")]
pub struct RequestError {
    pub field: String,
    pub message: String,
}

fn bad(field: impl Into<String>, message: impl Into<String>) -> RequestError {
    RequestError {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error(transparent)]
    Request(#[from] RequestError),
    #[error("render failed: {0}")]
    Render(#[from] alignfield_core::Error),
}

pub enum ResolvedLatent {
    Fixed(LatentCode),
    Anchors(AnchorSet),
}

pub fn resolve_latent(spec: &LatentSpec, n: usize) -> Result<ResolvedLatent, RequestError> {
    let forms = [spec.fixed.is_some(), spec.sweep_t.is_some() || spec.pair.is_some(), spec.anchors.is_some()];
    if forms.iter().filter(|&&f| f).count() != 1 {
        return Err(bad("latent", "give exactly one of `fixed`, `sweep_t` with `pair`, or `anchors`"));
    }
    if spec.smoothing.is_some() && spec.anchors.is_none() {
        return Err(bad("latent.smoothing", "only valid with `anchors`"));
    }
    if let Some(u) = &spec.fixed {
        if u.len() != n {
            return Err(bad("latent.fixed", format!("expected {n} components, found {}", u.len())));
        }
        let code = LatentCode::new(u.clone()).map_err(|e| bad("latent.fixed", e.to_string()))?;
        return Ok(ResolvedLatent::Fixed(code));
    }
    if let Some(anchors) = &spec.anchors {
        let parsed = anchors_from_specs(anchors, n, "latent.anchors")?;
        let smoothing = spec.smoothing.unwrap_or(0.0);
        let set = AnchorSet::new(parsed, smoothing).map_err(|e| bad("latent.anchors", e.to_string()))?;
        return Ok(ResolvedLatent::Anchors(set));
    }
    let t = spec.sweep_t.ok_or_else(|| bad("latent.sweep_t", "required with `pair`"))?;
    let [i, j] = spec.pair.ok_or_else(|| bad("latent.pair", "required with `sweep_t`"))?;
    if !(0.0..=1.0).contains(&t) {
        return Err(bad("latent.sweep_t", format!("must be in [0, 1], got {t}")));
    }
    if i >= n || j >= n || i == j {
        return Err(bad("latent.pair", format!("needs two distinct vertices below {n}")));
    }
    // u(t) = (1 − t)·e_i + t·e_j
    Ok(ResolvedLatent::Fixed(LatentCode::edge(n, i, j, 1.0 - t)))
}

/// Validates anchors against the model's latent dimension, naming the
/// offending entry.
pub fn anchors_from_specs(specs: &[AnchorSpec], n: usize, path: &str) -> Result<Vec<Anchor>, RequestError> {
    if specs.is_empty() {
        return Err(bad(path, "at least one anchor is required"));
    }
    specs
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let position = Vec3::from_array(a.pos);
            if !position.is_finite() {
                return Err(bad(format!("{path}[{k}].pos"), "must be finite"));
            }
            if a.code.len() != n {
                return Err(bad(format!("{path}[{k}].code"), format!("expected {n} components, found {}", a.code.len())));
            }
            let code = LatentCode::new(a.code.clone()).map_err(|e| bad(format!("{path}[{k}].code"), e.to_string()))?;
            Ok(Anchor { position, code })
        })
        .collect()
}

fn check_camera(c: &CameraSpec) -> Result<(), RequestError> {
    for (name, v) in [("width", c.width), ("height", c.height)] {
        if v == 0 || v > MAX_RESOLUTION {
            return Err(bad(format!("camera.{name}"), format!("must be in 1..={MAX_RESOLUTION}")));
        }
    }
    if !(c.fov_deg > 0.0 && c.fov_deg < 180.0) {
        return Err(bad("camera.fov_deg", "must be in (0, 180)"));
    }
    if !(c.elevation_deg.abs() < 90.0) {
        return Err(bad("camera.elevation_deg", "must be in (-90, 90)"));
    }
    if !c.azimuth_deg.is_finite() {
        return Err(bad("camera.azimuth_deg", "must be finite"));
    }
    if let Some(r) = c.radius {
        if !(r > 0.0 && r.is_finite()) {
            return Err(bad("camera.radius", "must be positive"));
        }
    }
    Ok(())
}

pub struct Rig {
    pub camera: Camera,
    pub ray_march: RayMarchConfig,
}

pub fn rig(field: &dyn RadianceField, spec: &CameraSpec, samples: usize) -> Result<Rig, RequestError> {
    check_camera(spec)?;
    if samples < 2 || samples > MAX_SAMPLES {
        return Err(bad("samples", format!("must be in 2..={MAX_SAMPLES}")));
    }
    let bounds = field.bounds().unwrap_or_else(|| alignfield_core::Aabb::cube(1.0));
    let radius = spec.radius.unwrap_or(2.0 * bounds.radius());
    let camera = Camera::orbit(
        bounds.center(),
        radius,
        spec.azimuth_deg.to_radians(),
        spec.elevation_deg.to_radians(),
        spec.fov_deg.to_radians(),
        spec.width,
        spec.height,
    );
    let ray_march = RayMarchConfig {
        n_samples: samples,
        near: 1e-3,
        far: radius + 2.0 * bounds.radius(),
        stratified_jitter: false,
        background: [1.0; 3],
    };
    Ok(Rig { camera, ray_march })
}

pub struct RenderedMap {
    pub kind: MapKind,
    pub png: Vec<u8>,
}

pub fn encode_map(view: &RenderedView, kind: MapKind, max_depth: f64) -> alignfield_core::Result<Vec<u8>> {
    match kind {
        MapKind::Rgb => view.rgb.encode_png(),
        MapKind::Normal => normal_to_display(&view.weighted_normals()).encode_png(),
        MapKind::Depth => encode_depth_png(&view.depth, max_depth),
        MapKind::Opacity => view.opacity.encode_png(),
    }
}

pub fn render_view_for(model: &Model, req: &RenderRequest) -> Result<(RenderedView, Rig), RenderError> {
    if req.maps.is_empty() {
        return Err(bad("maps", "request at least one map").into());
    }
    let rig = rig(&model.field, &req.camera, req.samples)?;
    let light = LightSample::ambient_only();
    let view = match resolve_latent(&req.latent, model.latent_dim())? {
        ResolvedLatent::Fixed(u) => render_view(&model.field, &rig.camera, LatentSource::Fixed(&u), &light, &rig.ray_march, 0)?,
        ResolvedLatent::Anchors(set) => render_hybrid(&model.field, &rig.camera, &set, &light, &rig.ray_march, 0)?,
    };
    Ok((view, rig))
}

/// PNG bytes for every requested map, in request order.
pub fn render(model: &Model, req: &RenderRequest) -> Result<Vec<RenderedMap>, RenderError> {
    let (view, rig) = render_view_for(model, req)?;
    let mut out = Vec::with_capacity(req.maps.len());
    for (k, &kind) in req.maps.iter().enumerate() {
        if req.maps[..k].contains(&kind) {
            return Err(bad(format!("maps[{k}]"), "duplicate map").into());
        }
        out.push(RenderedMap {
            kind,
            png: encode_map(&view, kind, rig.ray_march.far)?,
        });
    }
    Ok(out)
}

/// `multipart/mixed` body with one `image/png` part per map.
pub fn multipart_body(maps: &[RenderedMap]) -> Vec<u8> {
    let mut body = Vec::new();
    for m in maps {
        body.extend_from_slice(format!("--{MULTIPART_BOUNDARY}\r\n").as_bytes());
        body.extend_from_slice(b"Content-Type: image/png\r\n");
        body.extend_from_slice(
            format!("Content-Disposition: attachment; name=\"{0}\"; filename=\"{0}.png\"\r\n\r\n", m.kind.name()).as_bytes(),
        );
        body.extend_from_slice(&m.png);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{MULTIPART_BOUNDARY}--\r\n").as_bytes());
    body
}

/// Splits a body produced by [`multipart_body`] into `(name, bytes)` parts.
pub fn parse_multipart(body: &[u8]) -> Option<Vec<(String, Vec<u8>)>> {
    let delim = format!("--{MULTIPART_BOUNDARY}");
    let mut parts = Vec::new();
    let mut rest = body;
    loop {
        rest = rest.strip_prefix(delim.as_bytes())?;
        if rest.starts_with(b"--") {
            return Some(parts);
        }
        rest = rest.strip_prefix(b"\r\n")?;
        let head_end = find(rest, b"\r\n\r\n")?;
        let head = std::str::from_utf8(&rest[..head_end]).ok()?;
        let name = head.split("name=\"").nth(1)?.split('"').next()?.to_string();
        rest = &rest[head_end + 4..];
        let next = find(rest, format!("\r\n{delim}").as_bytes())?;
        parts.push((name, rest[..next].to_vec()));
        rest = &rest[next + 2..];
    }
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alignfield_core::field::{FieldConfig, HashGridConfig, MlpConfig};

    fn model() -> Model {
        let config = FieldConfig {
            grid: HashGridConfig {
                levels: 2,
                base_resolution: 4,
                per_level_scale: 2.0,
                features_per_level: 2,
                table_size_log2: 8,
                bounds: alignfield_core::Aabb::cube(0.5),
            },
            mlp: MlpConfig { hidden_layers: 1, width: 8 },
            latent_dim: 2,
        };
        Model {
            field: NeuralField::new(config, 3).unwrap(),
            prompts: vec!["a".into(), "b".into()],
            iteration: 0,
        }
    }

    fn request(latent: LatentSpec) -> RenderRequest {
        RenderRequest {
            camera: CameraSpec {
                width: 8,
                height: 6,
                ..Default::default()
            },
            latent,
            maps: vec![MapKind::Rgb],
            samples: 16,
        }
    }

    #[test]
    fn sweep_endpoints_are_vertices() {
        let m = model();
        let at = |t| render(&m, &request(LatentSpec::sweep(t, 0, 1))).unwrap().remove(0).png;
        let v0 = render(&m, &request(LatentSpec::fixed(vec![1.0, 0.0]))).unwrap().remove(0).png;
        let v1 = render(&m, &request(LatentSpec::fixed(vec![0.0, 1.0]))).unwrap().remove(0).png;
        assert_eq!(at(0.0), v0);
        assert_eq!(at(1.0), v1);
    }

    #[test]
    fn single_anchor_equals_fixed_code() {
        let m = model();
        let code = LatentCode::new(vec![0.25, 0.75]).unwrap();
        let a = Anchor {
            position: Vec3::new(0.1, 0.0, 0.0),
            code: code.clone(),
        };
        let hybrid = render(&m, &request(LatentSpec::anchors(&[a], 0.0))).unwrap().remove(0).png;
        let fixed = render(&m, &request(LatentSpec::fixed(vec![0.25, 0.75]))).unwrap().remove(0).png;
        assert_eq!(hybrid, fixed);
    }

    #[test]
    fn request_errors_name_fields() {
        let m = model();
        let cases = [
            (request(LatentSpec::fixed(vec![1.0])), "latent.fixed"),
            (request(LatentSpec::fixed(vec![0.7, 0.7])), "latent.fixed"),
            (request(LatentSpec::sweep(1.5, 0, 1)), "latent.sweep_t"),
            (request(LatentSpec::sweep(0.5, 0, 0)), "latent.pair"),
            (request(LatentSpec::default()), "latent"),
            (
                RenderRequest {
                    samples: 1,
                    ..request(LatentSpec::fixed(vec![1.0, 0.0]))
                },
                "samples",
            ),
        ];
        for (req, field) in cases {
            match render(&m, &req) {
                Err(RenderError::Request(e)) => assert_eq!(e.field, field, "{e}"),
                other => panic!("expected a request error for {field}, got {:?}", other.map(|v| v.len())),
            }
        }
    }

    #[test]
    fn multipart_round_trip() {
        let m = model();
        let mut req = request(LatentSpec::fixed(vec![1.0, 0.0]));
        req.maps = vec![MapKind::Rgb, MapKind::Depth, MapKind::Normal, MapKind::Opacity];
        let maps = render(&m, &req).unwrap();
        let parts = parse_multipart(&multipart_body(&maps)).unwrap();
        assert_eq!(parts.len(), 4);
        for (p, m) in parts.iter().zip(&maps) {
            assert_eq!(p.0, m.kind.name());
            assert_eq!(p.1, m.png);
        }
    }
}
