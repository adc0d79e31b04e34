//! Sharpness-aware perturbation, conflict-filtered gradient fusion, and the
//! parameter update rule.
//!
//! A regularized step runs the pipeline:
//!
//! 1. `g  = ∇L(θ)`
//! 2. `ε  = ρ · g / ‖g‖₂` (skipped when ‖g‖ is numerically zero)
//! 3. `g' = ∇L(θ + ε)` with θ restored bit-exactly afterwards
//! 4. if `⟨g, g'⟩ < 0`: `g' ← g' − (⟨g, g'⟩ / (‖g‖² + δ)) · g`
//! 5. `g_f = (1 − α) g + α g'`
//! 6. `θ ← θ − lr(t) · update(g_f)`
//!
//! The projection in step 4 removes only the component of the perturbed
//! gradient that opposes the original descent direction, so the fused
//! gradient keeps `⟨g_f, g⟩ ≥ (1 − α)‖g‖²` up to the δ-sized residual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{dot, l2_norm};

/// Gradient, perturbation, and fused-direction vectors over a
/// [`ParamSet`]'s flat view.
pub type GradVec = Vec<f64>;

/// Norm below which a gradient counts as zero and the SAM perturbation is
/// skipped (the perturbation direction is undefined at g = 0).
pub const ZERO_GRAD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionScope {
    /// Inner products over the whole flattened parameter vector.
    Global,
    /// Conflict test and projection applied independently per named tensor.
    PerTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradRegConfig {
    /// Perturbation radius ρ.
    pub rho: f64,
    /// Mixing factor α between the original and reference gradients.
    pub alpha: f64,
    /// Stability constant δ in the projection denominator.
    pub delta: f64,
    pub scope: ProjectionScope,
}

impl Default for GradRegConfig {
    fn default() -> Self {
        GradRegConfig {
            rho: 0.1,
            alpha: 0.5,
            delta: 1e-12,
            scope: ProjectionScope::Global,
        }
    }
}

impl GradRegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!(
                "gradreg.rho must be > 0, got {}",
                self.rho
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "gradreg.alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.delta.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!(
                "gradreg.delta must be > 0, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateKind {
    Sgd,
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UpdateRule {
    pub kind: UpdateKind,
    pub base_lr: f64,
    pub momentum: f64,
    /// Total steps T of the cosine annealing schedule.
    pub total_steps: usize,
}

impl Default for UpdateRule {
    fn default() -> Self {
        UpdateRule {
            kind: UpdateKind::SgdMomentum,
            base_lr: 0.001,
            momentum: 0.9,
            total_steps: 1,
        }
    }
}

impl UpdateRule {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!(
                "rule.base_lr must be > 0, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "rule.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("rule.total_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// lr(t) = base · (1 + cos(π t / T)) / 2; monotone non-increasing on [0, T].
pub fn cosine_lr(t: usize, total: usize, base: f64) -> Result<f64> {
    if t > total {
        return Err(Error::Contract(format!(
            "cosine_lr: step {t} past schedule end {total}"
        )));
    }
    if total == 0 {
        return Err(Error::Contract("cosine_lr: zero-length schedule".into()));
    }
    let frac = t as f64 / total as f64;
    Ok(base * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

/// Update rule state: applies the fused gradient to θ.
#[derive(Debug, Clone)]
pub struct Updater {
    pub rule: UpdateRule,
    velocity: Option<Vec<f64>>,
}

impl Updater {
    pub fn new(rule: UpdateRule) -> Self {
        Updater {
            rule,
            velocity: None,
        }
    }

    /// θ ← θ − lr(t) · direction(grad); returns the lr used.
    pub fn apply(&mut self, params: &mut ParamSet, grad: &[f64], t: usize) -> Result<f64> {
        let lr = cosine_lr(t, self.rule.total_steps, self.rule.base_lr)?;
        match self.rule.kind {
            UpdateKind::Sgd => params.add_scaled(grad, -lr)?,
            UpdateKind::SgdMomentum => {
                let v = self.velocity.get_or_insert_with(|| vec![0.0; grad.len()]);
                if v.len() != grad.len() {
                    return Err(Error::Contract(
                        "momentum buffer length does not match gradient".into(),
                    ));
                }
                for (vi, gi) in v.iter_mut().zip(grad) {
                    *vi = self.rule.momentum * *vi + gi;
                }
                let v = self.velocity.as_ref().unwrap().clone();
                params.add_scaled(&v, -lr)?;
            }
        }
        Ok(lr)
    }
}

/// Loss and flat gradient returned by an objective evaluation, plus the
/// per-term breakdown surfaced in step reports.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub grad: GradVec,
    pub ce: f64,
    pub kl: f64,
}

impl LossEval {
    pub fn simple(loss: f64, grad: GradVec) -> Self {
        LossEval {
            loss,
            grad,
            ce: loss,
            kl: 0.0,
        }
    }
}

/// Evaluate the objective at the current θ and return `(loss, ∇L)` in flat
/// order; θ is left untouched. Non-finite results abort the step.
pub fn compute_gradient<F>(loss_fn: &mut F, params: &ParamSet) -> Result<LossEval>
where
    F: FnMut(&ParamSet) -> Result<LossEval>,
{
    let eval = loss_fn(params)?;
    if !eval.loss.is_finite() {
        return Err(Error::NonFinite {
            context: "loss value".into(),
        });
    }
    if eval.grad.len() != params.flat_len() {
        return Err(Error::Contract(format!(
            "gradient length {} != parameter count {}",
            eval.grad.len(),
            params.flat_len()
        )));
    }
    if eval.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "gradient vector".into(),
        });
    }
    Ok(eval)
}

/// ε = ρ · g / ‖g‖₂. Returns `None` when ‖g‖₂ ≤ [`ZERO_GRAD_FLOOR`], which
/// signals the caller to proceed with g' = g.
pub fn sam_perturbation(grad: &[f64], rho: f64) -> Result<Option<GradVec>> {
    if rho.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("rho must be > 0, got {rho}")));
    }
    let norm = l2_norm(grad);
    if norm <= ZERO_GRAD_FLOOR {
        return Ok(None);
    }
    let s = rho / norm;
    Ok(Some(grad.iter().map(|g| g * s).collect()))
}

/// Gradient at θ + ε; θ is displaced for the evaluation and restored
/// bit-exactly before returning, on both success and error paths.
pub fn perturbed_gradient<F>(
    loss_fn: &mut F,
    params: &mut ParamSet,
    epsilon: &[f64],
) -> Result<LossEval>
where
    F: FnMut(&ParamSet) -> Result<LossEval>,
{
    if epsilon.len() != params.flat_len() {
        return Err(Error::Contract(format!(
            "perturbation length {} != parameter count {}",
            epsilon.len(),
            params.flat_len()
        )));
    }
    let snapshot = params.flat();
    params.add_scaled(epsilon, 1.0)?;
    let result = compute_gradient(loss_fn, params);
    params.set_flat(&snapshot)?;
    result
}

fn project_slice(g: &[f64], g_prime: &mut [f64], delta: f64) -> bool {
    let d = dot(g, g_prime);
    if d >= 0.0 {
        return false;
    }
    let coeff = d / (dot(g, g) + delta);
    for (gp, gi) in g_prime.iter_mut().zip(g) {
        *gp -= coeff * gi;
    }
    true
}

/// Conflict filter: when ⟨g, g'⟩ < 0, project g' onto the subspace
/// orthogonal to g (up to the δ-regularized denominator). Non-conflicting
/// inputs are returned bit-unchanged. Returns `(g'_out, projected)`.
pub fn project_conflict(
    g: &[f64],
    g_prime: &[f64],
    delta: f64,
    scope: ProjectionScope,
    layout: &[std::ops::Range<usize>],
) -> Result<(GradVec, bool)> {
    if g.len() != g_prime.len() {
        return Err(Error::Contract(format!(
            "project_conflict: lengths {} vs {}",
            g.len(),
            g_prime.len()
        )));
    }
    let mut out = g_prime.to_vec();
    let projected = match scope {
        ProjectionScope::Global => project_slice(g, &mut out, delta),
        ProjectionScope::PerTensor => {
            if layout.is_empty() {
                return Err(Error::Contract(
                    "per-tensor projection requires a parameter layout".into(),
                ));
            }
            let mut any = false;
            for r in layout {
                any |= project_slice(&g[r.clone()], &mut out[r.clone()], delta);
            }
            any
        }
    };
    Ok((out, projected))
}

/// g_f = (1 − α) g + α g'. The endpoints return the inputs bit-exactly.
pub fn fuse_gradients(g: &[f64], g_prime: &[f64], alpha: f64) -> Result<GradVec> {
    if g.len() != g_prime.len() {
        return Err(Error::Contract(format!(
            "fuse_gradients: lengths {} vs {}",
            g.len(),
            g_prime.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    if alpha == 0.0 {
        return Ok(g.to_vec());
    }
    if alpha == 1.0 {
        return Ok(g_prime.to_vec());
    }
    Ok(g.iter()
        .zip(g_prime)
        .map(|(gi, gpi)| (1.0 - alpha) * gi + alpha * gpi)
        .collect())
}

/// Per-step record streamed to the JSONL step log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub perturbed_loss: Option<f64>,
    /// Sign of ⟨g, g'⟩ before projection: -1, 0, or 1.
    pub dot_sign: i8,
    pub dot: f64,
    pub projected: bool,
    pub grad_norm: f64,
    pub perturbed_grad_norm: f64,
    pub fused_grad_norm: f64,
    /// ⟨g_f, g⟩ — the descent-guarantee witness.
    pub fused_dot: f64,
    pub lr: f64,
    pub ce: f64,
    pub kl: f64,
    /// Set when ‖g‖ was below the zero floor and perturbation was skipped.
    pub perturbation_skipped: bool,
}

/// One full gradient-regularization step: two forward/backward passes, the
/// conflict filter, fusion, and the parameter update. On any numeric error
/// θ and the update-rule state are left unchanged.
pub fn regularized_step<F>(
    loss_fn: &mut F,
    params: &mut ParamSet,
    cfg: &GradRegConfig,
    updater: &mut Updater,
    t: usize,
) -> Result<StepReport>
where
    F: FnMut(&ParamSet) -> Result<LossEval>,
{
    cfg.validate()?;
    let base = compute_gradient(loss_fn, params)?;
    let layout: Vec<_> = params.layout().into_iter().map(|(_, r)| r).collect();

    let (g_prime, perturbed_loss, skipped) = match sam_perturbation(&base.grad, cfg.rho)? {
        Some(epsilon) => {
            let p = perturbed_gradient(loss_fn, params, &epsilon)?;
            (p.grad, Some(p.loss), false)
        }
        None => (base.grad.clone(), None, true),
    };

    let d = dot(&base.grad, &g_prime);
    let (g_proj, projected) =
        project_conflict(&base.grad, &g_prime, cfg.delta, cfg.scope, &layout)?;
    let fused = fuse_gradients(&base.grad, &g_proj, cfg.alpha)?;
    let fused_dot = dot(&fused, &base.grad);

    let lr = updater.apply(params, &fused, t)?;

    Ok(StepReport {
        step: t,
        loss: base.loss,
        perturbed_loss,
        dot_sign: if d > 0.0 {
            1
        } else if d < 0.0 {
            -1
        } else {
            0
        },
        dot: d,
        projected,
        grad_norm: l2_norm(&base.grad),
        perturbed_grad_norm: l2_norm(&g_prime),
        fused_grad_norm: l2_norm(&fused),
        fused_dot,
        lr,
        ce: base.ce,
        kl: base.kl,
        perturbation_skipped: skipped,
    })
}
