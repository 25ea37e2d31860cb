//! Session configuration file (TOML).
//!
//! Loading reports every problem at once: unknown keys, type errors and
//! semantic violations are each listed with their full dotted path.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldConfig, HashGridConfig, MlpConfig};
use crate::guidance::{ConditioningMode, EmbeddingSet};
use crate::remote::RemoteConfig;
use crate::train::{FitConfig, GenerationConfig, TransformConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSection {
    pub grid: HashGridConfig,
    pub mlp: MlpConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    /// Two analytic toy scenes crossfaded by the latent weights.
    #[default]
    Toy,
    /// One target image per vertex, blended by the latent weights.
    PointMass,
    Remote,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticSection {
    pub kind: CriticKind,
    /// Point-mass target images, one per prompt, relative to the config file.
    pub targets: Vec<PathBuf>,
    pub remote: RemoteConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    #[default]
    CenteredSphere,
    ToyA,
    ToyB,
    Checkpoint,
}

/// Where the input model for a transformation comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    pub kind: SourceKind,
    pub checkpoint: PathBuf,
    /// Vertex of the source checkpoint to render.
    pub vertex: usize,
    pub views: usize,
    pub resolution: usize,
}

impl Default for SourceSection {
    fn default() -> Self {
        SourceSection {
            kind: SourceKind::CenteredSphere,
            checkpoint: PathBuf::new(),
            vertex: 0,
            views: 30,
            resolution: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSection {
    pub photometric_weight: f64,
    pub source_vertex: usize,
    pub photometric_rays: usize,
    pub fit: FitConfig,
    pub source: SourceSection,
}

impl Default for TransformSection {
    fn default() -> Self {
        let t = TransformConfig::default();
        TransformSection {
            photometric_weight: t.photometric_weight,
            source_vertex: t.source_vertex,
            photometric_rays: t.photometric_rays,
            fit: t.fit,
            source: SourceSection::default(),
        }
    }
}

impl TransformSection {
    pub fn options(&self) -> TransformConfig {
        TransformConfig {
            photometric_weight: self.photometric_weight,
            source_vertex: self.source_vertex,
            photometric_rays: self.photometric_rays,
            fit: self.fit.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub prompts: Vec<String>,
    pub general_prompt: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub field: FieldSection,
    pub generation: GenerationConfig,
    pub transform: TransformSection,
    pub critic: CriticSection,
    /// Prompt embeddings; one-hot vectors when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<EmbeddingSet>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            prompts: vec!["object a".into(), "object b".into()],
            general_prompt: "an object".into(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            field: FieldSection::default(),
            generation: GenerationConfig::default(),
            transform: TransformSection::default(),
            critic: CriticSection::default(),
            embeddings: None,
        }
    }
}

/// Keys that the default serialization omits.
const OPTIONAL_KEYS: &[&str] = &[
    "embeddings",
    "embeddings.vertices",
    "embeddings.general",
    "transform.fit.psnr_target",
];

impl SessionConfig {
    pub fn latent_dim(&self) -> usize {
        self.prompts.len()
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            grid: self.field.grid.clone(),
            mlp: self.field.mlp.clone(),
            latent_dim: self.latent_dim(),
        }
    }

    /// Generation settings with the session seed applied.
    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            seed: self.seed,
            ..self.generation.clone()
        }
    }

    pub fn embeddings(&self) -> EmbeddingSet {
        self.embeddings
            .clone()
            .unwrap_or_else(|| EmbeddingSet::one_hot(self.latent_dim()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Parses and validates; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("malformed TOML: {}", e.message())))?;
        let mut problems = Vec::new();
        let schema = toml::Table::try_from(SessionConfig::default()).map_err(|e| Error::config(e.to_string()))?;
        unknown_keys(&table, &schema, "", &mut problems);
        if problems.is_empty() {
            type_errors(&table, &mut problems);
        }
        if !problems.is_empty() {
            return Err(Error::config(problems.join("\n")));
        }
        let mut config: SessionConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        config.resolve_paths(base_dir);
        let problems = config.violations();
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(Error::config(problems.join("\n")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.critic.targets.iter_mut().for_each(join);
        join(&mut self.transform.source.checkpoint);
        join(&mut self.output_dir);
    }

    /// Every semantic problem, each prefixed with its key path.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.latent_dim();
        if n == 0 {
            out.push("prompts: at least one prompt is required".into());
        }
        if let Err(e) = self.field.grid.validate() {
            out.push(format!("field.{}", strip(e)));
        }
        if !(1..=3).contains(&self.field.mlp.hidden_layers) {
            out.push("field.mlp.hidden_layers: must be 1, 2 or 3".into());
        }
        if self.field.mlp.width == 0 {
            out.push("field.mlp.width: must be positive".into());
        }
        self.generation_violations(&mut out);
        self.transform_violations(&mut out);
        self.critic_violations(&mut out);
        if let Some(emb) = &self.embeddings {
            if emb.len() != n {
                out.push(format!("embeddings.vertices: expected {n} embeddings, found {}", emb.len()));
            }
            let dim = emb.dim();
            let all = || emb.vertices.iter().chain(emb.general.as_ref());
            if all().any(|v| v.dim() != dim) {
                out.push("embeddings: all embeddings must share one dimension".into());
            }
            if all().flat_map(|v| &v.0).any(|x| !x.is_finite()) {
                out.push("embeddings: values must be finite".into());
            }
        }
        out
    }

    fn generation_violations(&self, out: &mut Vec<String>) {
        let g = &self.generation;
        if g.iterations == 0 {
            out.push("generation.iterations: must be positive".into());
        }
        if !(0.0..=1.0).contains(&g.edge_probability) {
            out.push("generation.edge_probability: must be in [0, 1]".into());
        }
        for (name, w) in [
            ("sds_weight", g.sds_weight),
            ("orientation_weight_start", g.orientation_weight_start),
            ("orientation_weight_end", g.orientation_weight_end),
            ("normal_smoothness_weight", g.normal_smoothness_weight),
            ("guidance_scale", g.guidance_scale),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                out.push(format!("generation.{name}: must be a finite non-negative number, got {w}"));
            }
        }
        if g.orientation_weight_end < g.orientation_weight_start {
            out.push("generation.orientation_weight_end: must not be below orientation_weight_start".into());
        }
        for (name, v) in [
            ("views_per_step", g.views_per_step),
            ("resolution_start", g.resolution_start),
            ("resolution_end", g.resolution_end),
        ] {
            if v == 0 {
                out.push(format!("generation.{name}: must be positive"));
            }
        }
        if let Err(e) = g.camera.validate() {
            out.push(format!("generation.{}", strip(e)));
        }
        if let Err(e) = g.ray_march.validate() {
            out.push(format!("generation.ray_march: {}", strip(e)));
        }
        if let Err(e) = g.schedule.validate() {
            out.push(format!("generation.schedule: {}", strip(e)));
        }
        adam_violations(&g.adam, "generation.adam", out);
    }

    fn transform_violations(&self, out: &mut Vec<String>) {
        let t = &self.transform;
        let o = t;
        if !(o.photometric_weight >= 0.0 && o.photometric_weight.is_finite()) {
            out.push(format!(
                "transform.photometric_weight: must be a finite non-negative number, got {}",
                o.photometric_weight
            ));
        }
        if o.source_vertex >= self.latent_dim().max(1) {
            out.push(format!("transform.source_vertex: must be below the prompt count {}", self.latent_dim()));
        }
        if o.photometric_rays == 0 {
            out.push("transform.photometric_rays: must be positive".into());
        }
        if o.fit.rays_per_step == 0 {
            out.push("transform.fit.rays_per_step: must be positive".into());
        }
        if let Err(e) = o.fit.ray_march.validate() {
            out.push(format!("transform.fit.ray_march: {}", strip(e)));
        }
        adam_violations(&o.fit.adam, "transform.fit.adam", out);
        if t.source.views == 0 || t.source.resolution == 0 {
            out.push("transform.source: views and resolution must be positive".into());
        }
        if t.source.kind == SourceKind::Checkpoint && !t.source.checkpoint.is_file() {
            out.push(format!(
                "transform.source.checkpoint: file not found: {}",
                t.source.checkpoint.display()
            ));
        }
    }

    fn critic_violations(&self, out: &mut Vec<String>) {
        let n = self.latent_dim();
        match self.critic.kind {
            CriticKind::Toy if n != 2 => {
                out.push(format!("critic.kind: the toy critic needs exactly 2 prompts, found {n}"));
            }
            CriticKind::PointMass => {
                if self.critic.targets.len() != n {
                    out.push(format!(
                        "critic.targets: expected one target per prompt ({n}), found {}",
                        self.critic.targets.len()
                    ));
                }
                for (i, p) in self.critic.targets.iter().enumerate() {
                    if !p.is_file() {
                        out.push(format!("critic.targets[{i}]: file not found: {}", p.display()));
                    }
                }
            }
            CriticKind::Remote => {
                let r = &self.critic.remote;
                if r.address.trim().is_empty() {
                    out.push("critic.remote.address: must not be empty".into());
                }
                if r.max_in_flight == 0 {
                    out.push("critic.remote.max_in_flight: must be positive".into());
                }
                if r.timeout_ms == 0 {
                    out.push("critic.remote.timeout_ms: must be positive".into());
                }
            }
            CriticKind::Toy => {}
        }
        if self.generation.conditioning_mode == ConditioningMode::GeneralPrompt && self.general_prompt.trim().is_empty() {
            out.push("general_prompt: required when conditioning_mode is general_prompt".into());
        }
    }
}

fn adam_violations(a: &crate::optim::AdamConfig, prefix: &str, out: &mut Vec<String>) {
    for (name, v) in [("lr_grid", a.lr_grid), ("lr_mlp", a.lr_mlp), ("epsilon", a.epsilon)] {
        if !(v > 0.0 && v.is_finite()) {
            out.push(format!("{prefix}.{name}: must be positive, got {v}"));
        }
    }
    for (name, v) in [("beta1", a.beta1), ("beta2", a.beta2)] {
        if !(0.0..1.0).contains(&v) {
            out.push(format!("{prefix}.{name}: must be in [0, 1), got {v}"));
        }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

fn unknown_keys(user: &toml::Table, schema: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match schema.get(key) {
            Some(toml::Value::Table(inner)) => {
                if let toml::Value::Table(u) = value {
                    unknown_keys(u, inner, &path, out);
                }
            }
            Some(_) => {}
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => out.push(format!("{path}: unknown key")),
        }
    }
}

fn section<T: DeserializeOwned>(table: &toml::Table, key: &str, out: &mut Vec<String>) {
    if let Some(v) = table.get(key) {
        if let Err(e) = v.clone().try_into::<T>() {
            out.push(format!("{key}: {}", e.message().trim()));
        }
    }
}

fn type_errors(table: &toml::Table, out: &mut Vec<String>) {
    section::<Vec<String>>(table, "prompts", out);
    section::<String>(table, "general_prompt", out);
    section::<u64>(table, "seed", out);
    section::<PathBuf>(table, "output_dir", out);
    section::<FieldSection>(table, "field", out);
    section::<GenerationConfig>(table, "generation", out);
    section::<TransformSection>(table, "transform", out);
    section::<CriticSection>(table, "critic", out);
    section::<EmbeddingSet>(table, "embeddings", out);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<SessionConfig> {
        SessionConfig::from_toml(text, Path::new("."))
    }

    fn messages(text: &str) -> String {
        match parse(text) {
            Err(Error::Config(m)) => m,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_default() {
        let c = parse("").unwrap();
        assert_eq!(c.generation, GenerationConfig::default());
        assert_eq!(c.latent_dim(), 2);
        assert_eq!(c.output_dir, Path::new("./out"));
    }

    #[test]
    fn round_trip_is_idempotent() {
        let mut c = SessionConfig::default();
        c.output_dir = PathBuf::from("/tmp/x");
        c.generation.sds_weight = 0.3;
        c.transform.fit.psnr_target = Some(25.0);
        c.embeddings = Some(EmbeddingSet::one_hot(2));
        let text = c.to_toml().unwrap();
        let back = parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn negative_weight_names_the_field() {
        let m = messages("[generation]\nnormal_smoothness_weight = -1.0\n");
        assert!(m.contains("generation.normal_smoothness_weight"), "{m}");
    }

    #[test]
    fn all_violations_are_listed() {
        let m = messages("[generation]\nsds_weight = -1.0\nedge_probability = 2.0\n[transform]\nphotometric_weight = -3.0\n");
        assert!(m.contains("generation.sds_weight"), "{m}");
        assert!(m.contains("generation.edge_probability"), "{m}");
        assert!(m.contains("transform.photometric_weight"), "{m}");
    }

    #[test]
    fn unknown_keys_are_reported_with_paths() {
        let m = messages("colour = 1\n[generation]\nsds_wieght = 1.0\n[generation.camera]\nfov = 3\n");
        assert!(m.contains("colour: unknown key"), "{m}");
        assert!(m.contains("generation.sds_wieght: unknown key"), "{m}");
        assert!(m.contains("generation.camera.fov: unknown key"), "{m}");
    }

    #[test]
    fn type_errors_name_the_section() {
        let m = messages("[generation]\niterations = \"many\"\n");
        assert!(m.starts_with("generation:"), "{m}");
    }

    #[test]
    fn missing_point_mass_targets_are_reported() {
        let m = messages("[critic]\nkind = \"point_mass\"\ntargets = [\"nope_a.png\", \"nope_b.png\"]\n");
        assert!(m.contains("critic.targets[0]: file not found"), "{m}");
        assert!(m.contains("critic.targets[1]: file not found"), "{m}");
    }

    #[test]
    fn toy_critic_needs_two_prompts() {
        let m = messages("prompts = [\"a\", \"b\", \"c\"]\n");
        assert!(m.contains("critic.kind"), "{m}");
    }

    #[test]
    fn optional_keys_are_accepted() {
        let c = parse("[transform.fit]\npsnr_target = 30.0\n[embeddings]\nvertices = [[1.0, 0.0], [0.0, 1.0]]\ngeneral = [0.5, 0.5]\n").unwrap();
        assert_eq!(c.transform.fit.psnr_target, Some(30.0));
        assert_eq!(c.embeddings().dim(), 2);
    }
}
