//! Adam and the iterative per-pair registration driver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{evaluate, LossBreakdown, LossConfig};
use crate::svf::{gaussian_smooth, gaussian_smooth_scalar};
use crate::thickness::{
    extract_gwi, gm_from_wmgm, regional_thickness, thickness_map, GwiThresholds, ThicknessReport,
};
use crate::volume::{LabelVolume, ScalarVolume, VectorField};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

/// One bias-corrected Adam update. Weight decay is applied first as
/// `p *= 1 - lr * wd`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            what: "adam parameters vs gradients/moments",
            expected: params.len(),
            got: if grads.len() != params.len() {
                grads.len()
            } else {
                state.m.len()
            },
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adam gradients"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let decay = 1.0 - state.lr * state.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] * decay - state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Number of iterations spanned by the relative-change convergence test.
pub const CONVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterativeConfig {
    pub max_iters: usize,
    pub lr: f64,
    pub loss: LossConfig,
    /// Stop once the loss changes by less than this fraction over
    /// [`CONVERGENCE_WINDOW`] iterations.
    pub tolerance: f64,
    /// Gaussian width (voxels) applied to the velocity gradient before each
    /// update; 0 disables.
    pub smoothing_sigma: f64,
    /// Gaussian width (voxels) applied to both PV maps before registration.
    /// Linear interpolation of a raw partial-volume edge is not shift
    /// equivariant, which snaps subvoxel displacements towards the lattice;
    /// 0 disables.
    pub input_sigma: f64,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            lr: 0.05,
            loss: LossConfig::default(),
            tolerance: 1e-4,
            smoothing_sigma: 1.0,
            input_sigma: 1.5,
        }
    }
}

impl IterativeConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument("tolerance must be > 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        for (name, v) in [
            ("smoothing_sigma", self.smoothing_sigma),
            ("input_sigma", self.input_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// A velocity field with both integrated displacements.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub velocity: VectorField,
    /// Forward displacement, WM towards WM+GM.
    pub phi: VectorField,
    /// Reverse displacement; its length at the GWI is the thickness.
    pub phi_neg: VectorField,
    pub loss: LossBreakdown,
    pub iterations: usize,
    /// Total loss before each update (plus the final evaluation).
    pub loss_history: Vec<f64>,
}

impl RegistrationResult {
    pub fn thickness_report(
        &self,
        wm: &ScalarVolume,
        wmgm: &ScalarVolume,
        labels: &LabelVolume,
        thresholds: GwiThresholds,
    ) -> Result<ThicknessReport> {
        let gm = gm_from_wmgm(wm, wmgm)?;
        let mask = extract_gwi(wm, &gm, thresholds)?;
        let map = thickness_map(&self.phi_neg, &mask, &wm.meta)?;
        regional_thickness(&map, labels)
    }

    /// Mean thickness (mm) over the whole interface.
    pub fn mean_thickness(
        &self,
        wm: &ScalarVolume,
        wmgm: &ScalarVolume,
        thresholds: GwiThresholds,
    ) -> Result<f64> {
        let gm = gm_from_wmgm(wm, wmgm)?;
        let mask = extract_gwi(wm, &gm, thresholds)?;
        Ok(thickness_map(&self.phi_neg, &mask, &wm.meta)?.mean())
    }
}

/// Optimizes a velocity field for one WM / WM+GM pair with Adam, starting
/// from zero. Losses are those of the pre-smoothed pair.
pub fn register_iterative(
    wm: &ScalarVolume,
    wmgm: &ScalarVolume,
    cfg: &IterativeConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    wm.meta.check_same("wm vs wm+gm", &wmgm.meta)?;
    let meta = wm.meta;
    let wm = &gaussian_smooth_scalar(wm, cfg.input_sigma);
    let wmgm = &gaussian_smooth_scalar(wmgm, cfg.input_sigma);
    let mut params = vec![0.0; 3 * meta.len()];
    let mut adam = AdamState::new(params.len(), cfg.lr, 0.0);
    let mut history: Vec<f64> = Vec::new();

    for iteration in 0..cfg.max_iters {
        let z = VectorField::from_flat(meta, &params)?;
        let eval = evaluate(wm, wmgm, &z, &cfg.loss).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged {
                iteration,
                loss: f64::NAN,
            },
            other => other,
        })?;
        let total = eval.breakdown.total;
        if !total.is_finite() {
            return Err(Error::Diverged {
                iteration,
                loss: total,
            });
        }
        history.push(total);
        if total <= f64::EPSILON * f64::EPSILON || converged(&history, cfg.tolerance) {
            return Ok(RegistrationResult {
                velocity: z,
                phi: eval.phi,
                phi_neg: eval.phi_neg,
                loss: eval.breakdown,
                iterations: iteration,
                loss_history: history,
            });
        }
        let grad = gaussian_smooth(&eval.grad, cfg.smoothing_sigma).to_flat();
        adam_step(&mut params, &grad, &mut adam).map_err(|_| Error::Diverged {
            iteration,
            loss: total,
        })?;
    }

    let z = VectorField::from_flat(meta, &params)?;
    let eval = evaluate(wm, wmgm, &z, &cfg.loss)?;
    if !eval.breakdown.total.is_finite() {
        return Err(Error::Diverged {
            iteration: cfg.max_iters,
            loss: eval.breakdown.total,
        });
    }
    history.push(eval.breakdown.total);
    Ok(RegistrationResult {
        velocity: z,
        phi: eval.phi,
        phi_neg: eval.phi_neg,
        loss: eval.breakdown,
        iterations: cfg.max_iters,
        loss_history: history,
    })
}

fn converged(history: &[f64], tol: f64) -> bool {
    let n = history.len();
    if n <= CONVERGENCE_WINDOW {
        return false;
    }
    let (old, new) = (history[n - 1 - CONVERGENCE_WINDOW], history[n - 1]);
    (old - new).abs() <= tol * old.abs()
}
