//! Latent-conditioned reflectance field: multiresolution hash encoding of
//! position, concatenated with the latent code, followed by a shallow MLP
//! producing density and albedo.
//!
//! Trainable state lives in one flat vector ([`FieldParams::values`]) whose
//! traversal order is fixed by [`ParamLayout`]: grid tables level by level
//! (row-major, `features_per_level` reals per row), then each dense layer as
//! a row-major `fan_out × fan_in` weight block followed by its bias.

use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus_sigmoid, Aabb, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Number of raw MLP outputs: density plus an albedo triple.
pub const RAW_OUTPUTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    pub base_resolution: usize,
    /// Growth factor between consecutive level resolutions.
    pub per_level_scale: f64,
    pub features_per_level: usize,
    pub table_size_log2: u32,
    pub bounds: Aabb,
}

impl Default for HashGridConfig {
    /// 16 levels from resolution 8 with 2 features per level (32 dims); the
    /// scale reaches a finest resolution of 2048.
    fn default() -> Self {
        HashGridConfig {
            levels: 16,
            base_resolution: 8,
            per_level_scale: 1.447_269_237_440_378_2,
            features_per_level: 2,
            table_size_log2: 15,
            bounds: Aabb::cube(1.0),
        }
    }
}

impl HashGridConfig {
    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.per_level_scale.powi(level as i32)).floor() as usize
    }

    pub fn table_size(&self) -> usize {
        1usize << self.table_size_log2
    }

    /// Edge length of the finest lattice cell along the shortest bounds axis.
    pub fn finest_cell_edge(&self) -> f64 {
        let e = self.bounds.extent();
        let shortest = e.x.min(e.y).min(e.z);
        shortest / self.level_resolution(self.levels - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.levels == 0 {
            problems.push("grid.levels must be >= 1");
        }
        if self.features_per_level == 0 {
            problems.push("grid.features_per_level must be >= 1");
        }
        if self.base_resolution < 2 {
            problems.push("grid.base_resolution must be >= 2");
        }
        if !(self.per_level_scale > 1.0) || !self.per_level_scale.is_finite() {
            problems.push("grid.per_level_scale must be > 1");
        }
        if self.table_size_log2 == 0 || self.table_size_log2 > 26 {
            problems.push("grid.table_size_log2 must be in 1..=26");
        }
        if !self.bounds.is_valid() {
            problems.push("grid.bounds must be a non-empty finite box");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    /// 1 for the full method; 2 and 3 are the deeper ablations.
    pub hidden_layers: usize,
    pub width: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_layers: 1,
            width: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    pub mlp: MlpConfig,
    /// Number of objects `N`, i.e. the latent code dimension.
    pub latent_dim: usize,
}

impl FieldConfig {
    pub fn new(latent_dim: usize) -> Self {
        FieldConfig {
            grid: HashGridConfig::default(),
            mlp: MlpConfig::default(),
            latent_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.grid.output_dim() + self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(1..=3).contains(&self.mlp.hidden_layers) {
            return Err(Error::config("mlp.hidden_layers must be 1, 2 or 3"));
        }
        if self.mlp.width == 0 {
            return Err(Error::config("mlp.width must be >= 1"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelLayout {
    pub offset: usize,
    pub rows: usize,
    pub resolution: usize,
    pub dense: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerLayout {
    pub weight_offset: usize,
    pub bias_offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Canonical parameter ordering, a pure function of [`FieldConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub levels: Vec<LevelLayout>,
    pub grid_len: usize,
    pub layers: Vec<LayerLayout>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(config: &FieldConfig) -> Self {
        let g = &config.grid;
        let table = g.table_size();
        let mut offset = 0;
        let levels = (0..g.levels)
            .map(|l| {
                let resolution = g.level_resolution(l);
                let dense_rows = (resolution + 1).pow(3);
                let dense = dense_rows <= table;
                let rows = if dense { dense_rows } else { table };
                let lv = LevelLayout {
                    offset,
                    rows,
                    resolution,
                    dense,
                };
                offset += rows * g.features_per_level;
                lv
            })
            .collect();
        let grid_len = offset;

        let mut dims = vec![config.input_dim()];
        dims.extend(std::iter::repeat(config.mlp.width).take(config.mlp.hidden_layers));
        dims.push(RAW_OUTPUTS);
        let layers = dims
            .windows(2)
            .map(|w| {
                let l = LayerLayout {
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                    fan_in: w[0],
                    fan_out: w[1],
                };
                offset += w[0] * w[1] + w[1];
                l
            })
            .collect();
        ParamLayout {
            levels,
            grid_len,
            layers,
            total: offset,
        }
    }

    pub fn grid_range(&self) -> std::ops::Range<usize> {
        0..self.grid_len
    }

    pub fn mlp_range(&self) -> std::ops::Range<usize> {
        self.grid_len..self.total
    }
}

/// All trainable state plus the fixed density offset.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams {
    pub values: Vec<f64>,
    /// Constant added to the raw density before softplus; not trained.
    pub density_bias: f64,
}

impl FieldParams {
    pub const DEFAULT_DENSITY_BIAS: f64 = 0.5;

    pub fn zeros(layout: &ParamLayout) -> Self {
        FieldParams {
            values: vec![0.0; layout.total],
            density_bias: 0.0,
        }
    }

    /// Grid tables uniform in ±1e-4, dense layers uniform in ±1/sqrt(fan_in),
    /// zero biases. Values are f32-representable so checkpoints round-trip.
    pub fn init(layout: &ParamLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.total];
        for v in &mut values[layout.grid_range()] {
            *v = rng.random_range(-1e-4..1e-4);
        }
        for layer in &layout.layers {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            for v in &mut values[layer.weight_offset..layer.bias_offset] {
                *v = rng.random_range(-bound..bound);
            }
        }
        let mut params = FieldParams {
            values,
            density_bias: Self::DEFAULT_DENSITY_BIAS,
        };
        params.round_to_storage();
        params
    }

    /// Rounds every value to the nearest f32, the checkpoint storage precision.
    pub fn round_to_storage(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
        self.density_bias = self.density_bias as f32 as f64;
    }

    pub fn is_finite(&self) -> bool {
        self.density_bias.is_finite() && self.values.iter().all(|v| v.is_finite())
    }
}

/// A point on the probability simplex selecting an object or a transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    pub const SUM_TOLERANCE: f64 = 1e-6;
    pub const NEG_TOLERANCE: f64 = 1e-9;

    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("latent code must have at least one component"));
        }
        if components.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("latent code has non-finite components"));
        }
        if let Some(c) = components.iter().find(|&&c| c < -Self::NEG_TOLERANCE) {
            return Err(Error::invalid(format!("latent component {c} is negative")));
        }
        let sum: f64 = components.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::invalid(format!("latent code sums to {sum}, expected 1")));
        }
        Ok(LatentCode(components))
    }

    pub fn vertex(dim: usize, index: usize) -> Self {
        assert!(index < dim, "vertex {index} out of range for dimension {dim}");
        let mut v = vec![0.0; dim];
        v[index] = 1.0;
        LatentCode(v)
    }

    /// `t·e_i + (1 − t)·e_j`.
    pub fn edge(dim: usize, i: usize, j: usize, t: f64) -> Self {
        assert!(i < dim && j < dim && i != j);
        assert!((0.0..=1.0).contains(&t));
        let mut v = vec![0.0; dim];
        v[i] = t;
        v[j] = 1.0 - t;
        LatentCode(v)
    }

    pub fn uniform(dim: usize) -> Self {
        LatentCode(vec![1.0 / dim as f64; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the one-hot component, if this is a vertex.
    pub fn vertex_index(&self) -> Option<usize> {
        let hot: Vec<usize> = (0..self.0.len()).filter(|&i| self.0[i] != 0.0).collect();
        match hot.as_slice() {
            [i] if self.0[*i] == 1.0 => Some(*i),
            _ => None,
        }
    }
}

impl TryFrom<Vec<f64>> for LatentCode {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        LatentCode::new(v)
    }
}

impl From<LatentCode> for Vec<f64> {
    fn from(c: LatentCode) -> Vec<f64> {
        c.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    /// Volumetric density (inverse length).
    pub density: f64,
    pub albedo: [f64; 3],
}

/// Anything that can be volume rendered: the neural field, or analytic
/// fixtures used in tests and as training targets.
pub trait RadianceField: Sync {
    fn latent_dim(&self) -> usize;

    /// Region outside of which the density is zero, if bounded.
    fn bounds(&self) -> Option<Aabb> {
        None
    }

    fn sample(&self, p: Vec3, u: &[f64]) -> FieldSample;

    fn density(&self, p: Vec3, u: &[f64]) -> f64 {
        self.sample(p, u).density
    }

    /// Finite-difference step for normals.
    fn normal_step(&self) -> f64 {
        1e-3
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalEstimate {
    pub normal: Vec3,
    pub degenerate: bool,
}

/// Central-difference estimate of `-∇τ / ‖∇τ‖`. A gradient below 1e-12 in
/// magnitude yields `+z` with the degeneracy flag set.
pub fn field_normal<F: RadianceField + ?Sized>(field: &F, p: Vec3, u: &[f64], h: f64) -> NormalEstimate {
    debug_assert!(h > 0.0);
    let mut g = [0.0; 3];
    for (k, gk) in g.iter_mut().enumerate() {
        let e = Vec3::axis(k) * h;
        *gk = (field.density(p + e, u) - field.density(p - e, u)) / (2.0 * h);
    }
    normal_from_gradient(Vec3::from_array(g))
}

pub(crate) fn normal_from_gradient(g: Vec3) -> NormalEstimate {
    let m = g.norm();
    if !(m >= 1e-12) {
        return NormalEstimate {
            normal: Vec3::Z,
            degenerate: true,
        };
    }
    NormalEstimate {
        normal: -g / m,
        degenerate: false,
    }
}

/// The trainable latent-conditioned field.
#[derive(Clone, Debug)]
pub struct NeuralField {
    config: FieldConfig,
    layout: ParamLayout,
    pub params: FieldParams,
}

impl NeuralField {
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let params = FieldParams::init(&layout, seed);
        Ok(NeuralField {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: FieldConfig, params: FieldParams) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.values.len() != layout.total {
            return Err(Error::config(format!(
                "parameter vector has {} values, layout expects {}",
                params.values.len(),
                layout.total
            )));
        }
        if !params.is_finite() {
            return Err(Error::invalid("field parameters contain non-finite values"));
        }
        Ok(NeuralField {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Zeroes the first-layer weights that read the latent code, so every
    /// `u` renders the same object.
    pub fn zero_latent_weights(&mut self) {
        let layer = self.layout.layers[0];
        let enc = self.config.grid.output_dim();
        for o in 0..layer.fan_out {
            let row = layer.weight_offset + o * layer.fan_in;
            self.params.values[row + enc..row + layer.fan_in].fill(0.0);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Hash-grid encoding of `p`; length `levels · features_per_level`.
    pub fn encode_position(&self, p: Vec3) -> Result<Vec<f64>> {
        if !p.is_finite() {
            return Err(Error::invalid(format!("non-finite position {p:?}")));
        }
        let mut tape = EvalTape::new(&self.config);
        self.encode_into(p, &mut tape);
        Ok(tape.acts[..self.config.grid.output_dim()].to_vec())
    }

    /// Checked evaluation: the latent code must match the configured `N`.
    pub fn eval_field(&self, p: Vec3, u: &LatentCode) -> Result<FieldSample> {
        if u.dim() != self.config.latent_dim {
            return Err(Error::config(format!(
                "latent code has {} components, field expects {}",
                u.dim(),
                self.config.latent_dim
            )));
        }
        if !p.is_finite() {
            return Err(Error::invalid(format!("non-finite position {p:?}")));
        }
        Ok(self.sample(p, u.as_slice()))
    }

    pub fn new_tape(&self) -> EvalTape {
        EvalTape::new(&self.config)
    }

    /// Normalized coordinates in [0, 1]³; points outside the box are clamped.
    fn unit_coords(&self, p: Vec3) -> [f64; 3] {
        let b = &self.config.grid.bounds;
        let e = b.extent();
        [
            ((p.x - b.min.x) / e.x).clamp(0.0, 1.0),
            ((p.y - b.min.y) / e.y).clamp(0.0, 1.0),
            ((p.z - b.min.z) / e.z).clamp(0.0, 1.0),
        ]
    }

    fn encode_into(&self, p: Vec3, tape: &mut EvalTape) {
        let x = self.unit_coords(p);
        let feats = self.config.grid.features_per_level;
        let values = &self.params.values;
        for (l, lv) in self.layout.levels.iter().enumerate() {
            let r = lv.resolution;
            let mut cell = [0u32; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let pos = x[a] * r as f64;
                let c = (pos.floor() as usize).min(r - 1);
                cell[a] = c as u32;
                frac[a] = pos - c as f64;
            }
            let out = &mut tape.acts[l * feats..(l + 1) * feats];
            out.fill(0.0);
            for corner in 0..8 {
                let mut w = 1.0;
                let mut v = [0u32; 3];
                for a in 0..3 {
                    let bit = (corner >> a) & 1;
                    v[a] = cell[a] + bit as u32;
                    w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                }
                let row = level_row(lv, v);
                let start = lv.offset + row * feats;
                tape.corners[l * 8 + corner] = start as u32;
                tape.weights[l * 8 + corner] = w;
                for f in 0..feats {
                    out[f] += w * values[start + f];
                }
            }
        }
    }

    /// Forward pass that records everything the backward pass needs.
    pub fn forward_taped(&self, p: Vec3, u: &[f64], tape: &mut EvalTape) -> FieldSample {
        debug_assert_eq!(u.len(), self.config.latent_dim);
        self.encode_into(p, tape);
        let enc_dim = self.config.grid.output_dim();
        tape.acts[enc_dim..enc_dim + u.len()].copy_from_slice(u);

        let values = &self.params.values;
        let hidden = self.layout.layers.len() - 1;
        let mut in_off = 0;
        for (li, layer) in self.layout.layers[..hidden].iter().enumerate() {
            let out_off = in_off + layer.fan_in;
            let pre_off = li * self.config.mlp.width;
            for o in 0..layer.fan_out {
                let z = dense_row(values, layer, o, &tape.acts[in_off..out_off]);
                let (act, slope) = softplus_sigmoid(z);
                tape.slope[pre_off + o] = slope;
                tape.acts[out_off + o] = act;
            }
            in_off = out_off;
        }
        let last = &self.layout.layers[hidden];
        for o in 0..RAW_OUTPUTS {
            tape.raw[o] = dense_row(values, last, o, &tape.acts[in_off..in_off + last.fan_in]);
        }
        let (density, d_slope) = softplus_sigmoid(tape.raw[0] + self.params.density_bias);
        let albedo = [sigmoid(tape.raw[1]), sigmoid(tape.raw[2]), sigmoid(tape.raw[3])];
        tape.out_slope = [d_slope, albedo[0] * (1.0 - albedo[0]), albedo[1] * (1.0 - albedo[1]), albedo[2] * (1.0 - albedo[2])];
        FieldSample { density, albedo }
    }

    /// Accumulates `∂L/∂θ` into `grads` given the output adjoints of a taped
    /// evaluation.
    pub fn backward(&self, tape: &EvalTape, d_density: f64, d_albedo: [f64; 3], grads: &mut [f64]) {
        let mut d_raw = [0.0; RAW_OUTPUTS];
        d_raw[0] = d_density * tape.out_slope[0];
        for k in 0..3 {
            d_raw[k + 1] = d_albedo[k] * tape.out_slope[k + 1];
        }
        if d_raw.iter().all(|&d| d == 0.0) {
            return;
        }
        let values = &self.params.values;
        let n_layers = self.layout.layers.len();
        let width = self.config.mlp.width;
        let mut in_offs = Vec::with_capacity(n_layers);
        let mut off = 0;
        for layer in &self.layout.layers {
            in_offs.push(off);
            off += layer.fan_in;
        }

        let mut d_out: Vec<f64> = d_raw.to_vec();
        for li in (0..n_layers).rev() {
            let layer = &self.layout.layers[li];
            let x = &tape.acts[in_offs[li]..in_offs[li] + layer.fan_in];
            if li + 1 < n_layers {
                for (o, d) in d_out.iter_mut().enumerate() {
                    *d *= tape.slope[li * width + o];
                }
            }
            let mut d_in = vec![0.0; layer.fan_in];
            for (o, &d) in d_out.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let w_row = layer.weight_offset + o * layer.fan_in;
                grads[layer.bias_offset + o] += d;
                let g_row = &mut grads[w_row..w_row + layer.fan_in];
                for i in 0..layer.fan_in {
                    g_row[i] += d * x[i];
                    d_in[i] += d * values[w_row + i];
                }
            }
            d_out = d_in;
        }

        let feats = self.config.grid.features_per_level;
        for l in 0..self.layout.levels.len() {
            let d_enc = &d_out[l * feats..(l + 1) * feats];
            for corner in 0..8 {
                let w = tape.weights[l * 8 + corner];
                if w == 0.0 {
                    continue;
                }
                let start = tape.corners[l * 8 + corner] as usize;
                for f in 0..feats {
                    grads[start + f] += w * d_enc[f];
                }
            }
        }
    }
}

#[inline]
fn dense_row(values: &[f64], layer: &LayerLayout, o: usize, x: &[f64]) -> f64 {
    let w = &values[layer.weight_offset + o * layer.fan_in..layer.weight_offset + (o + 1) * layer.fan_in];
    let mut z = values[layer.bias_offset + o];
    for (wi, xi) in w.iter().zip(x) {
        z += wi * xi;
    }
    z
}

#[inline]
fn level_row(lv: &LevelLayout, v: [u32; 3]) -> usize {
    if lv.dense {
        let n = lv.resolution + 1;
        v[0] as usize + n * (v[1] as usize + n * v[2] as usize)
    } else {
        let h = v[0].wrapping_mul(HASH_PRIMES[0])
            ^ v[1].wrapping_mul(HASH_PRIMES[1])
            ^ v[2].wrapping_mul(HASH_PRIMES[2]);
        h as usize & (lv.rows - 1)
    }
}

/// Per-evaluation record: trilinear corner rows and weights for every level,
/// layer activations, and raw outputs.
#[derive(Clone, Debug)]
pub struct EvalTape {
    corners: Vec<u32>,
    weights: Vec<f64>,
    /// Input vector followed by each hidden layer's post-activation.
    acts: Vec<f64>,
    /// Hidden-unit activation derivatives.
    slope: Vec<f64>,
    raw: [f64; RAW_OUTPUTS],
    out_slope: [f64; RAW_OUTPUTS],
}

impl EvalTape {
    pub fn new(config: &FieldConfig) -> Self {
        let levels = config.grid.levels;
        let hidden = config.mlp.hidden_layers * config.mlp.width;
        EvalTape {
            corners: vec![0; levels * 8],
            weights: vec![0.0; levels * 8],
            acts: vec![0.0; config.input_dim() + hidden],
            slope: vec![0.0; hidden],
            raw: [0.0; RAW_OUTPUTS],
            out_slope: [0.0; RAW_OUTPUTS],
        }
    }
}

impl RadianceField for NeuralField {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn bounds(&self) -> Option<Aabb> {
        Some(self.config.grid.bounds)
    }

    fn sample(&self, p: Vec3, u: &[f64]) -> FieldSample {
        TAPE.with(|cell| {
            let mut slot = cell.borrow_mut();
            let tape = match slot.as_mut() {
                Some(t) if t.acts.len() == self.config.input_dim() + self.config.mlp.hidden_layers * self.config.mlp.width
                    && t.corners.len() == self.config.grid.levels * 8 =>
                {
                    t
                }
                _ => slot.insert(EvalTape::new(&self.config)),
            };
            self.forward_taped(p, u, tape)
        })
    }

    /// Half the finest lattice cell edge.
    fn normal_step(&self) -> f64 {
        0.5 * self.config.grid.finest_cell_edge()
    }
}

thread_local! {
    static TAPE: std::cell::RefCell<Option<EvalTape>> = const { std::cell::RefCell::new(None) };
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(latent_dim: usize) -> FieldConfig {
        FieldConfig {
            grid: HashGridConfig {
                levels: 3,
                base_resolution: 2,
                per_level_scale: 2.0,
                features_per_level: 2,
                table_size_log2: 6,
                bounds: Aabb::cube(1.0),
            },
            mlp: MlpConfig {
                hidden_layers: 1,
                width: 8,
            },
            latent_dim,
        }
    }

    fn randomized(config: FieldConfig, seed: u64) -> NeuralField {
        let mut f = NeuralField::new(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for v in &mut f.params.values {
            *v = rng.random_range(-1.0..1.0);
        }
        f
    }

    #[test]
    fn default_grid_matches_reference_configuration() {
        let g = HashGridConfig::default();
        assert_eq!(g.output_dim(), 32);
        assert_eq!(g.level_resolution(0), 8);
        assert!((g.level_resolution(15) as i64 - 2048).abs() <= 1);
        assert_eq!(MlpConfig::default().hidden_layers, 1);
    }

    #[test]
    fn zero_tables_encode_to_zero() {
        let config = FieldConfig::new(2);
        let layout = ParamLayout::new(&config);
        let field = NeuralField::from_params(config, FieldParams::zeros(&layout)).unwrap();
        let enc = field.encode_position(Vec3::new(0.3, -0.2, 0.7)).unwrap();
        assert_eq!(enc.len(), 32);
        assert!(enc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lattice_vertex_reads_table_row_exactly() {
        let field = randomized(small_config(1), 3);
        // level 1 has resolution 4 on [-1, 1]: vertices every 0.5
        let p = Vec3::new(-0.5, 0.0, 0.5);
        let enc = field.encode_position(p).unwrap();
        let lv = field.layout().levels[1];
        let row = level_row(&lv, [1, 2, 3]);
        let start = lv.offset + row * 2;
        assert_eq!(&enc[2..4], &field.params.values[start..start + 2]);
    }

    #[test]
    fn cell_center_is_corner_average() {
        let field = randomized(small_config(1), 5);
        // level 0: resolution 2, cell [0,1]^3 in lattice units spans [-1,0]^3
        let p = Vec3::new(-0.5, -0.5, -0.5);
        let enc = field.encode_position(p).unwrap();
        let lv = field.layout().levels[0];
        let mut expect = [0.0; 2];
        for dz in 0..2u32 {
            for dy in 0..2u32 {
                for dx in 0..2u32 {
                    let start = lv.offset + level_row(&lv, [dx, dy, dz]) * 2;
                    for f in 0..2 {
                        expect[f] += field.params.values[start + f] / 8.0;
                    }
                }
            }
        }
        assert!((enc[0] - expect[0]).abs() < 1e-14);
        assert!((enc[1] - expect[1]).abs() < 1e-14);
    }

    #[test]
    fn zero_weights_give_activation_midpoints() {
        let config = FieldConfig::new(2);
        let layout = ParamLayout::new(&config);
        let field = NeuralField::from_params(config, FieldParams::zeros(&layout)).unwrap();
        let s = field
            .eval_field(Vec3::new(0.1, 0.2, 0.3), &LatentCode::vertex(2, 0))
            .unwrap();
        assert!((s.density - 2f64.ln()).abs() < 1e-15);
        assert_eq!(s.albedo, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn latent_dimension_mismatch_is_a_config_error() {
        let field = NeuralField::new(small_config(2), 0).unwrap();
        let err = field.eval_field(Vec3::ZERO, &LatentCode::vertex(3, 0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn non_finite_position_rejected() {
        let field = NeuralField::new(small_config(1), 0).unwrap();
        assert!(field.encode_position(Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn latent_code_validation() {
        assert!(LatentCode::new(vec![0.5, 0.5]).is_ok());
        assert!(LatentCode::new(vec![0.5, 0.6]).is_err());
        assert!(LatentCode::new(vec![1.1, -0.1]).is_err());
        assert!(LatentCode::new(vec![]).is_err());
        assert_eq!(LatentCode::vertex(3, 2).vertex_index(), Some(2));
        assert_eq!(LatentCode::edge(3, 0, 2, 0.3).vertex_index(), None);
    }

    #[test]
    fn param_count_is_function_of_config() {
        let c = small_config(2);
        let a = NeuralField::new(c.clone(), 1).unwrap();
        let b = NeuralField::new(c, 99).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        // 3 dense levels (3^3, 5^3, 9^3 > 64 -> hashed to 64 rows)
        let grid = (27 + 64 + 64) * 2;
        let mlp = (8 * 8 + 8) + (4 * 8 + 4);
        assert_eq!(a.param_count(), grid + mlp);
    }

    #[test]
    fn init_values_are_f32_representable() {
        let f = NeuralField::new(small_config(2), 7).unwrap();
        assert!(f.params.values.iter().all(|&v| v == v as f32 as f64));
        let grid = &f.params.values[f.layout().grid_range()];
        assert!(grid.iter().all(|v| v.abs() <= 1e-4));
    }

    #[test]
    fn backward_matches_finite_differences_on_single_eval() {
        let field = randomized(small_config(2), 11);
        let p = Vec3::new(0.13, -0.41, 0.27);
        let u = [0.3, 0.7];
        let (da, db) = (0.7, [0.2, -0.5, 0.9]);
        let objective = |f: &NeuralField| {
            let s = f.sample(p, &u);
            da * s.density + db[0] * s.albedo[0] + db[1] * s.albedo[1] + db[2] * s.albedo[2]
        };
        let mut tape = field.new_tape();
        field.forward_taped(p, &u, &mut tape);
        let mut grads = vec![0.0; field.param_count()];
        field.backward(&tape, da, db, &mut grads);
        let mut probe = field.clone();
        let h = 1e-6;
        for i in 0..field.param_count() {
            let orig = probe.params.values[i];
            probe.params.values[i] = orig + h;
            let up = objective(&probe);
            probe.params.values[i] = orig - h;
            let down = objective(&probe);
            probe.params.values[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-7 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grads[i]);
        }
    }
}
