//! Loss bookkeeping, gradient assembly over a render pass, Adam, and the
//! finite-difference verification harness.

use crate::diffrender::{backprop_view, Reduction, ViewAdjoint};
use crate::error::{Error, Result};
use crate::field::NeuralField;
use crate::render::{render_view, Camera, LatentSource, LightSample, RayMarchConfig, RenderedView};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Flat gradient aligned with [`crate::field::FieldParams::values`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        GradientVector(vec![0.0; len])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// Named loss terms and their weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn push(&mut self, name: impl Into<String>, weight: f64, value: f64) {
        self.terms.push(LossTerm {
            name: name.into(),
            weight,
            value,
        });
        self.total = self.terms.iter().map(|t| t.weight * t.value).sum();
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn merge(&mut self, other: LossBreakdown) {
        for t in other.terms {
            self.push(t.name, t.weight, t.value);
        }
    }
}

/// A scalar loss of a rendered view with its per-pixel adjoint.
pub trait ViewLoss {
    fn name(&self) -> &str;
    fn evaluate(&self, view: &RenderedView) -> (f64, ViewAdjoint);
}

/// A scalar loss defined directly on the parameter vector.
pub trait ParamLoss {
    fn name(&self) -> &str;
    fn evaluate(&self, params: &[f64]) -> (f64, Vec<f64>);
}

/// `½ Σ θᵢ²`.
pub struct HalfSquaredNorm;

impl ParamLoss for HalfSquaredNorm {
    fn name(&self) -> &str {
        "half_squared_norm"
    }

    fn evaluate(&self, params: &[f64]) -> (f64, Vec<f64>) {
        (0.5 * params.iter().map(|p| p * p).sum::<f64>(), params.to_vec())
    }
}

pub enum Term<'a> {
    View { weight: f64, loss: &'a dyn ViewLoss },
    Param { weight: f64, loss: &'a dyn ParamLoss },
}

/// Everything that determines one forward render.
#[derive(Clone, Copy)]
pub struct RenderPass<'a> {
    pub camera: &'a Camera,
    pub latent: LatentSource<'a>,
    pub light: &'a LightSample,
    pub config: &'a RayMarchConfig,
    pub seed: u64,
}

impl RenderPass<'_> {
    pub fn render(&self, field: &NeuralField) -> Result<RenderedView> {
        render_view(field, self.camera, self.latent, self.light, self.config, self.seed)
    }
}

pub struct StepGradients {
    pub losses: LossBreakdown,
    pub grads: GradientVector,
    pub view: Option<RenderedView>,
}

/// Evaluates every term and the exact reverse-mode gradient of the weighted
/// sum. View terms share one forward render and one backward sweep.
pub fn loss_and_grads(field: &NeuralField, pass: Option<RenderPass<'_>>, terms: &[Term<'_>], iteration: usize, reduction: Reduction) -> Result<StepGradients> {
    let needs_view = terms.iter().any(|t| matches!(t, Term::View { .. }));
    let view = match (needs_view, pass) {
        (true, Some(p)) => Some(p.render(field)?),
        (true, None) => return Err(Error::invalid("view loss terms need a render pass")),
        _ => None,
    };
    loss_and_grads_for(field, pass, view, terms, iteration, reduction)
}

/// As [`loss_and_grads`] with the forward render already done; `view` must
/// come from `pass`.
pub fn loss_and_grads_for(
    field: &NeuralField,
    pass: Option<RenderPass<'_>>,
    view: Option<RenderedView>,
    terms: &[Term<'_>],
    iteration: usize,
    reduction: Reduction,
) -> Result<StepGradients> {
    let mut losses = LossBreakdown::default();
    let mut grads = GradientVector::zeros(field.param_count());
    if terms.iter().any(|t| matches!(t, Term::View { .. })) && (view.is_none() || pass.is_none()) {
        return Err(Error::invalid("view loss terms need a render pass"));
    }
    let mut adjoint = view.as_ref().map(|v| ViewAdjoint::zeros(v.width(), v.height()));

    for term in terms {
        match term {
            Term::View { weight, loss } => {
                let v = view.as_ref().expect("rendered above");
                let (value, adj) = loss.evaluate(v);
                if !value.is_finite() || !adj.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        term: loss.name().to_string(),
                        iteration,
                    });
                }
                losses.push(loss.name(), *weight, value);
                adjoint.as_mut().expect("rendered above").add_scaled(&adj, *weight);
            }
            Term::Param { weight, loss } => {
                let (value, g) = loss.evaluate(&field.params.values);
                if !value.is_finite() || g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteLoss {
                        term: loss.name().to_string(),
                        iteration,
                    });
                }
                losses.push(loss.name(), *weight, value);
                for (a, b) in grads.0.iter_mut().zip(g) {
                    *a += weight * b;
                }
            }
        }
    }
    if let (Some(v), Some(adj), Some(p)) = (view.as_ref(), adjoint.as_ref(), pass) {
        backprop_view(field, p.camera, p.latent, p.light, p.config, p.seed, v, adj, &mut grads.0, reduction)?;
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "gradient".into(),
            iteration,
        });
    }
    Ok(StepGradients { losses, grads, view })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub start: usize,
    pub end: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr_grid: f64,
    pub lr_mlp: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_grid: 1e-2,
            lr_mlp: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub groups: Vec<ParamGroup>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            groups: vec![ParamGroup { start: 0, end: len, lr }],
            beta1,
            beta2,
            epsilon,
        }
    }

    /// Grid tables and MLP weights as separate learning-rate groups.
    pub fn for_field(field: &NeuralField, config: &AdamConfig) -> Self {
        let layout = field.layout();
        let mut s = AdamState::new(layout.total, config.lr_grid, config.beta1, config.beta2, config.epsilon);
        let g: Range<usize> = layout.grid_range();
        let m: Range<usize> = layout.mlp_range();
        s.groups = vec![
            ParamGroup {
                start: g.start,
                end: g.end,
                lr: config.lr_grid,
            },
            ParamGroup {
                start: m.start,
                end: m.end,
                lr: config.lr_mlp,
            },
        ];
        s
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::invalid(format!(
            "adam length mismatch: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    state.step_count += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step_count as i32);
    let c2 = 1.0 - b2.powi(state.step_count as i32);
    for group in &state.groups {
        for i in group.start..group.end {
            let g = grads[i];
            let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
            let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
            state.first_moment[i] = m;
            state.second_moment[i] = v;
            params[i] -= group.lr * (m / c1) / ((v / c2).sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdOptions {
    /// Candidate steps; each index reports its best agreeing step.
    pub steps: Vec<f64>,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            steps: vec![1e-3, 1e-4, 1e-5],
            floor: 1e-8,
        }
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central differences of `loss` on the sampled indices compared against
/// `analytic`.
pub fn finite_diff_check<L>(mut loss: L, params: &[f64], analytic: &[f64], indices: &[usize], options: &FdOptions) -> FdReport
where
    L: FnMut(&[f64]) -> f64,
{
    let mut work = params.to_vec();
    let mut entries = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut best: Option<FdEntry> = None;
        for &h in &options.steps {
            let orig = work[i];
            work[i] = orig + h;
            let up = loss(&work);
            work[i] = orig - h;
            let down = loss(&work);
            work[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let entry = FdEntry {
                index: i,
                analytic: analytic[i],
                numeric,
                rel_error: relative_error(analytic[i], numeric, options.floor),
                step: h,
            };
            if best.as_ref().is_none_or(|b| entry.rel_error < b.rel_error) {
                best = Some(entry);
            }
        }
        entries.extend(best);
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    FdReport { entries, max_rel_error }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::softplus;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.3, -1.2, 4.0];
        let before = p.clone();
        let mut s = AdamState::new(3, 1e-2, 0.9, 0.99, 1e-15);
        adam_step(&mut p, &[0.0; 3], &mut s).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let (lr, b1, b2, eps) = (1e-2, 0.9, 0.99, 1e-8);
        for g in [0.37, -2.5, 1e-3] {
            let mut p = vec![1.0];
            let mut s = AdamState::new(1, lr, b1, b2, eps);
            adam_step(&mut p, &[g], &mut s).unwrap();
            // m̂ = g, v̂ = g² after bias correction
            let m_hat = ((1.0 - b1) * g) / (1.0 - b1);
            let v_hat = ((1.0 - b2) * g * g) / (1.0 - b2);
            let expected = 1.0 - lr * m_hat / (v_hat.sqrt() + eps);
            assert!((p[0] - expected).abs() < 1e-15);
            assert!((p[0] - (1.0 - lr * g.signum())).abs() < 1e-6);
        }
    }

    #[test]
    fn two_constant_steps_follow_scalar_recurrence() {
        let (lr, b1, b2, eps, g) = (1e-3, 0.9, 0.99, 1e-15, 0.5);
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, lr, b1, b2, eps);
        let mut traj = vec![];
        for _ in 0..2 {
            adam_step(&mut p, &[g], &mut s).unwrap();
            traj.push(p[0]);
        }
        // independent recurrence
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for (t, &got) in traj.iter().enumerate() {
            let t = t as i32 + 1;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            assert!((got - x).abs() < 1e-15);
        }
        // constant gradient: both steps have magnitude lr
        assert!((traj[0].abs() - lr).abs() < 1e-12);
        assert!(((traj[1] - traj[0]).abs() - lr).abs() < 1e-12);
    }

    #[test]
    fn adam_is_permutation_equivariant() {
        let p0 = vec![0.1, -0.4, 2.0, 0.7];
        let g = vec![0.3, -0.1, 0.05, -2.0];
        let perm = [2, 0, 3, 1];
        let mut a = p0.clone();
        let mut sa = AdamState::new(4, 1e-2, 0.9, 0.99, 1e-15);
        let mut b: Vec<f64> = perm.iter().map(|&i| p0[i]).collect();
        let gb: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
        let mut sb = sa.clone();
        for _ in 0..3 {
            adam_step(&mut a, &g, &mut sa).unwrap();
            adam_step(&mut b, &gb, &mut sb).unwrap();
        }
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(a[i], b[k]);
        }
    }

    #[test]
    fn adam_length_mismatch_is_error() {
        let mut s = AdamState::new(2, 1e-2, 0.9, 0.99, 1e-15);
        assert!(adam_step(&mut [0.0; 2], &[0.0; 3], &mut s).is_err());
    }

    #[test]
    fn linear_loss_fd_is_exact() {
        let a = [0.5, -1.5, 2.0, 3.25];
        let theta = [0.1, 0.2, 0.3, 0.4];
        let report = finite_diff_check(
            |t| t.iter().zip(&a).map(|(x, y)| x * y).sum(),
            &theta,
            &a,
            &[0, 1, 2, 3],
            &FdOptions::default(),
        );
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn softplus_chain_error_is_second_order() {
        // L(θ) = softplus(softplus(θ) - 1)
        let f = |t: &[f64]| softplus(softplus(t[0]) - 1.0);
        let theta = [0.4];
        let s1 = crate::math::sigmoid(theta[0]);
        let exact = crate::math::sigmoid(softplus(theta[0]) - 1.0) * s1;
        let err = |h: f64| {
            let r = finite_diff_check(f, &theta, &[exact], &[0], &FdOptions { steps: vec![h], floor: 1e-12 });
            (r.entries[0].numeric - exact).abs()
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn breakdown_total_is_weighted_sum() {
        let mut b = LossBreakdown::default();
        b.push("sds", 1.0, 0.25);
        b.push("orientation", 100.0, 0.001);
        b.push("normal_smoothness", 10.0, 0.02);
        assert!((b.total - (0.25 + 0.1 + 0.2)).abs() < 1e-12);
    }
}
