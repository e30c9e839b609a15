//! Base optimizers and perturbation steps.
//!
//! `sam_step` climbs to the worst nearby point before stepping: it perturbs
//! the parameters by `rho * g / |g|` along the batch gradient, re-evaluates
//! the gradient there, restores the parameters exactly, and applies the
//! base update with the perturbed-point gradient. `fam_step` is its
//! forgetting-aware mirror: the perturbation is `-rho * g_ood / |g_ood|`,
//! a descent step along a held-out out-of-distribution batch, after which
//! the in-distribution gradient is taken at the perturbed point. Either way
//! a step costs exactly two gradient evaluations.

use crate::data::{label_set, Example};
use crate::error::Error;
use crate::tensor::{GradVector, ParameterStore};
use crate::Result;

/// Base update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OptimKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimKind::Sgd),
            "adam" => Ok(OptimKind::Adam),
            other => Err(Error::InvalidConfig(format!(
                "unknown optimizer {other:?} (expected sgd|adam)"
            ))),
        }
    }
}

/// SGD or Adam over the flat trainable view. The moment buffers are laid
/// out against one specific flat view, so a fresh optimizer is built
/// whenever the trainable set changes (per training phase).
#[derive(Debug, Clone)]
pub struct BaseOptimizer {
    pub kind: OptimKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl BaseOptimizer {
    pub fn sgd(learning_rate: f64, dim: usize) -> Self {
        BaseOptimizer {
            kind: OptimKind::Sgd,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn adam(learning_rate: f64, dim: usize) -> Self {
        BaseOptimizer { kind: OptimKind::Adam, ..BaseOptimizer::sgd(learning_rate, dim) }
    }

    pub fn new(kind: OptimKind, learning_rate: f64, dim: usize) -> Self {
        match kind {
            OptimKind::Sgd => BaseOptimizer::sgd(learning_rate, dim),
            OptimKind::Adam => BaseOptimizer::adam(learning_rate, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update from an explicit gradient. Rejects non-finite gradients
    /// before touching any state.
    pub fn base_step(&mut self, store: &mut ParameterStore, grad: &GradVector) -> Result<()> {
        if grad.len() != self.dim() {
            return Err(Error::FlatLengthMismatch { got: grad.len(), expected: self.dim() });
        }
        if let Some(index) = grad.first_non_finite() {
            return Err(Error::NonFiniteGradient { index });
        }
        let mut theta = store.flat_view();
        if theta.len() != grad.len() {
            return Err(Error::FlatLengthMismatch { got: grad.len(), expected: theta.len() });
        }
        self.t += 1;
        match self.kind {
            OptimKind::Sgd => {
                for (x, g) in theta.iter_mut().zip(grad.values()) {
                    *x -= self.learning_rate * g;
                }
            }
            OptimKind::Adam => {
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for (i, (x, g)) in theta.iter_mut().zip(grad.values()).enumerate() {
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    *x -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            }
        }
        store.set_flat(&theta)
    }
}

/// Perturbation mode and radius.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SharpnessConfig {
    pub rho: f64,
    pub mode: SharpnessMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SharpnessMode {
    None,
    Sam,
    Fam,
}

impl SharpnessConfig {
    pub fn new(rho: f64, mode: SharpnessMode) -> Result<Self> {
        if !(rho >= 0.0) || !rho.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "perturbation radius must be finite and non-negative, got {rho}"
            )));
        }
        Ok(SharpnessConfig { rho, mode })
    }
}

/// A differentiable loss over a parameter store and a batch. The blanket
/// impl lets plain closures serve as losses in tests and small tools.
pub trait BatchLoss {
    fn loss_grad(
        &mut self,
        store: &ParameterStore,
        batch: &[Example],
    ) -> Result<(f64, GradVector)>;
}

impl<F> BatchLoss for F
where
    F: FnMut(&ParameterStore, &[Example]) -> Result<(f64, GradVector)>,
{
    fn loss_grad(
        &mut self,
        store: &ParameterStore,
        batch: &[Example],
    ) -> Result<(f64, GradVector)> {
        self(store, batch)
    }
}

/// What one perturbation step did.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// Loss of the first gradient evaluation (clean loss for `sam_step`,
    /// out-of-distribution loss for `fam_step`).
    pub first_loss: f64,
    /// Norm of the first gradient, the one defining the perturbation.
    pub first_grad_norm: f64,
    /// Loss at the perturbed point, whose gradient was applied. Equals
    /// `first_loss` when the perturbation was skipped.
    pub update_loss: f64,
    /// Euclidean norm of the realized parameter displacement, measured
    /// from the store, not from the requested radius.
    pub perturb_norm: f64,
    /// The gradient handed to the base optimizer.
    pub applied_grad: GradVector,
    /// Gradient evaluations consumed; 2 unless the zero-gradient fallback
    /// fired.
    pub backward_passes: u32,
    /// True when a zero-norm first gradient forced a plain step.
    pub fell_back_to_plain: bool,
}

/// Ascent direction with radius `rho`: `rho * g / |g|`.
pub fn ascent_perturbation(grad: &GradVector, rho: f64) -> Vec<f64> {
    let scale = rho / grad.l2_norm();
    grad.values().iter().map(|g| scale * g).collect()
}

/// Descent direction with radius `rho`: `-rho * g / |g|`. Exactly the
/// negation of [`ascent_perturbation`] on the same gradient.
pub fn descent_perturbation(grad: &GradVector, rho: f64) -> Vec<f64> {
    let scale = -rho / grad.l2_norm();
    grad.values().iter().map(|g| scale * g).collect()
}

/// Sharpness-aware step: perturb along the batch gradient, re-evaluate,
/// restore, then base-update with the perturbed-point gradient.
pub fn sam_step<L: BatchLoss + ?Sized>(
    store: &mut ParameterStore,
    loss_fn: &mut L,
    batch: &[Example],
    rho: f64,
    opt: &mut BaseOptimizer,
) -> Result<StepReport> {
    let (first_loss, g0) = loss_fn.loss_grad(store, batch)?;
    if let Some(index) = g0.first_non_finite() {
        return Err(Error::NonFiniteGradient { index });
    }
    if g0.l2_norm() == 0.0 {
        log::warn!("sam_step: zero-norm gradient, taking a plain step");
        opt.base_step(store, &g0)?;
        return Ok(StepReport {
            first_loss,
            first_grad_norm: 0.0,
            update_loss: first_loss,
            perturb_norm: 0.0,
            applied_grad: g0,
            backward_passes: 1,
            fell_back_to_plain: true,
        });
    }
    let direction = ascent_perturbation(&g0, rho);
    perturbed_update(store, loss_fn, batch, &direction, first_loss, &g0, opt)
}

/// Forgetting-aware step: perturb *against* the gradient of a label-disjoint
/// out-of-distribution batch, then base-update with the in-distribution
/// gradient taken at the perturbed point.
pub fn fam_step<L: BatchLoss + ?Sized>(
    store: &mut ParameterStore,
    loss_fn: &mut L,
    id_batch: &[Example],
    ood_batch: &[Example],
    rho: f64,
    opt: &mut BaseOptimizer,
) -> Result<StepReport> {
    let id_labels = label_set(id_batch);
    let ood_labels = label_set(ood_batch);
    let overlap = id_labels.iter().filter(|l| ood_labels.contains(l)).count();
    if overlap > 0 {
        return Err(Error::LabelOverlap { overlap });
    }
    let (first_loss, g_ood) = loss_fn.loss_grad(store, ood_batch)?;
    if let Some(index) = g_ood.first_non_finite() {
        return Err(Error::NonFiniteGradient { index });
    }
    if g_ood.l2_norm() == 0.0 {
        log::warn!("fam_step: zero-norm gradient on the held-out batch, taking a plain step");
        let (update_loss, g_id) = loss_fn.loss_grad(store, id_batch)?;
        if let Some(index) = g_id.first_non_finite() {
            return Err(Error::NonFiniteGradient { index });
        }
        let first_grad_norm = g_id.l2_norm();
        opt.base_step(store, &g_id)?;
        return Ok(StepReport {
            first_loss,
            first_grad_norm,
            update_loss,
            perturb_norm: 0.0,
            applied_grad: g_id,
            backward_passes: 2,
            fell_back_to_plain: true,
        });
    }
    let direction = descent_perturbation(&g_ood, rho);
    perturbed_update(store, loss_fn, id_batch, &direction, first_loss, &g_ood, opt)
}

fn perturbed_update<L: BatchLoss + ?Sized>(
    store: &mut ParameterStore,
    loss_fn: &mut L,
    update_batch: &[Example],
    direction: &[f64],
    first_loss: f64,
    first_grad: &GradVector,
    opt: &mut BaseOptimizer,
) -> Result<StepReport> {
    let saved = store.flat_view();
    store.add_flat(direction, 1.0)?;
    // Realized displacement, measured against the saved parameters.
    let perturb_norm = {
        let now = store.flat_view();
        now.iter()
            .zip(&saved)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let evaluated = loss_fn.loss_grad(store, update_batch);
    // Restore before error handling so failures leave the store intact.
    store.set_flat(&saved)?;
    let (update_loss, g1) = evaluated?;
    if let Some(index) = g1.first_non_finite() {
        return Err(Error::NonFiniteGradient { index });
    }
    opt.base_step(store, &g1)?;
    Ok(StepReport {
        first_loss,
        first_grad_norm: first_grad.l2_norm(),
        update_loss,
        perturb_norm,
        applied_grad: g1,
        backward_passes: 2,
        fell_back_to_plain: false,
    })
}
