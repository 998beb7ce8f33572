//! Dual-scale quantization of the MLP down-projection.
//!
//! The down-projection `W` (d_model × H) is approximated as `Q(W / c) ⊙ c`
//! where `c` is a per-column scale over the H hidden channels. The solver
//! alternates two steps:
//!
//! * Q-step: with `c` fixed, re-quantize `W / c` with the ordinary
//!   group-wise quantizer.
//! * c-step: with the dequantized codes `Q̃` fixed, every column has a
//!   closed-form least-squares optimum `c_j = ⟨W_j, Q̃_j⟩ / ⟨Q̃_j, Q̃_j⟩`.
//!
//! Because hidden channel `j` of the down-projection is produced by row `j`
//! of the up-projection, `c` can be folded into the up-projection's group
//! scales after the fact and inference stays a plain dequantize-matmul.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{col_dots, Matrix};
use crate::quant::{quantize, QuantConfig, QuantizedTensor};

/// Default number of alternating iterations.
pub const DEFAULT_DSQ_ITERS: usize = 15;
/// Iteration stops once the relative objective improvement falls below this.
pub const EARLY_STOP_REL: f64 = 1e-6;
/// Columns whose squared norm falls below this keep a unit scale.
pub const DENOM_GUARD: f64 = 1e-12;

/// Objectives around one alternating iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsqStep {
    /// ‖W − Q̃ ⊙ c‖² after the Q-step, with `c` from the previous iteration.
    pub after_q: f64,
    /// ‖W − Q̃ ⊙ c‖² after the closed-form column-scale update.
    pub after_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualScaleResult {
    pub q_down: QuantizedTensor,
    /// Per hidden-channel column scale `c` (length H).
    pub col_scale: Vec<f32>,
    /// Objective of the retained iterate after each iteration; entry 0 is
    /// the plain quantizer (`c = 1`). Non-increasing, so the last entry is
    /// the minimum.
    pub objective_trace: Vec<f64>,
    /// Raw objectives of every iteration, before best-iterate selection.
    pub steps: Vec<DsqStep>,
    pub iterations_run: usize,
}

impl DualScaleResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }

    /// Effective down-projection `Q̃ ⊙ c`.
    pub fn reconstruct(&self) -> Matrix {
        self.q_down
            .dequantize()
            .scale_cols(&self.col_scale)
            .expect("col_scale length matches q_down columns")
    }
}

/// Positive per-channel factors for the equivalent up/down rescaling.
#[derive(Clone, Debug, PartialEq)]
pub struct UpDownScaling {
    eta: Vec<f32>,
}

impl UpDownScaling {
    pub fn new(eta: Vec<f32>) -> Result<Self> {
        if eta.is_empty() {
            return Err(Error::EmptyInput("UpDownScaling"));
        }
        if let Some(v) = eta.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidScaling(format!(
                "entries must be positive and finite, got {v}"
            )));
        }
        Ok(Self { eta })
    }

    pub fn ones(len: usize) -> Self {
        Self {
            eta: vec![1.0; len],
        }
    }

    pub fn eta(&self) -> &[f32] {
        &self.eta
    }
}

/// Returns `(diag(η)·W_up, W_down·diag(η)⁻¹)`. The gate projection is
/// only shape-checked; it is unaffected by the transform.
pub fn apply_updown_scaling(
    w_up: &Matrix,
    w_gate: &Matrix,
    w_down: &Matrix,
    eta: &UpDownScaling,
) -> Result<(Matrix, Matrix)> {
    let h = eta.eta.len();
    if w_up.rows() != h || w_gate.shape() != w_up.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_updown_scaling (up/gate)",
            left: w_up.shape(),
            right: w_gate.shape(),
        });
    }
    if w_down.cols() != h || w_down.rows() != w_up.cols() {
        return Err(Error::ShapeMismatch {
            op: "apply_updown_scaling (down)",
            left: w_up.shape(),
            right: w_down.shape(),
        });
    }
    Ok((w_up.scale_rows(&eta.eta)?, w_down.div_cols(&eta.eta)?))
}

/// Static smoothing baseline: flattens per-column max-abs of the
/// down-projection. `η_j = colmax_j / mean(colmax)` over non-zero columns;
/// all-zero columns get `η_j = 1`.
pub fn static_smooth_eta(w_down: &Matrix) -> UpDownScaling {
    let h = w_down.cols();
    let mut colmax = vec![0.0f32; h];
    for r in 0..w_down.rows() {
        for (m, v) in colmax.iter_mut().zip(w_down.row(r)) {
            *m = m.max(v.abs());
        }
    }
    let nonzero: Vec<f64> = colmax.iter().filter(|&&m| m > 0.0).map(|&m| m as f64).collect();
    if nonzero.is_empty() {
        return UpDownScaling::ones(h);
    }
    let mean = nonzero.iter().sum::<f64>() / nonzero.len() as f64;
    UpDownScaling {
        eta: colmax
            .iter()
            .map(|&m| if m > 0.0 { (m as f64 / mean) as f32 } else { 1.0 })
            .collect(),
    }
}

/// Closed-form column-scale update for frozen dequantized codes `q_tilde`.
pub fn s_step(w: &Matrix, q_tilde: &Matrix) -> Result<Vec<f32>> {
    let num = col_dots(w, q_tilde)?;
    let den = col_dots(q_tilde, q_tilde)?;
    Ok(num
        .iter()
        .zip(&den)
        .map(|(&n, &d)| {
            if d.abs() < DENOM_GUARD {
                return 1.0;
            }
            let c = (n / d) as f32;
            if c.is_finite() && c.abs() as f64 >= DENOM_GUARD {
                c
            } else {
                1.0
            }
        })
        .collect())
}

/// ‖W − Q̃·diag(c)‖²_F accumulated in f64.
pub fn dual_scale_objective(w: &Matrix, q_tilde: &Matrix, col_scale: &[f32]) -> Result<f64> {
    if w.shape() != q_tilde.shape() {
        return Err(Error::ShapeMismatch {
            op: "dual_scale_objective",
            left: w.shape(),
            right: q_tilde.shape(),
        });
    }
    if col_scale.len() != w.cols() {
        return Err(Error::LengthMismatch {
            op: "dual_scale_objective",
            expected: w.cols(),
            actual: col_scale.len(),
        });
    }
    let mut total = 0.0f64;
    for r in 0..w.rows() {
        for ((&a, &q), &c) in w.row(r).iter().zip(q_tilde.row(r)).zip(col_scale) {
            let d = a as f64 - q as f64 * c as f64;
            total += d * d;
        }
    }
    Ok(total)
}

/// Alternating dual-scale quantization of a down-projection.
///
/// `iters == 0` returns the plain quantizer with unit column scales. The
/// best iterate seen (including the plain quantizer) is returned, so the
/// result never reconstructs worse than [`quantize`] on the same input.
pub fn dsq_quantize(w_down: &Matrix, cfg: &QuantConfig, iters: usize) -> Result<DualScaleResult> {
    let h = w_down.cols();
    let mut col_scale = vec![1.0f32; h];
    let mut q = quantize(w_down, cfg)?;
    let mut q_tilde = q.dequantize();
    let base = dual_scale_objective(w_down, &q_tilde, &col_scale)?;

    let mut best = (q.clone(), col_scale.clone(), base);
    let mut trace = vec![base];
    let mut steps = Vec::with_capacity(iters);
    let mut prev = base;

    for it in 0..iters {
        if it > 0 {
            q = quantize(&w_down.div_cols(&col_scale)?, cfg)?;
            q_tilde = q.dequantize();
        }
        let after_q = dual_scale_objective(w_down, &q_tilde, &col_scale)?;
        col_scale = s_step(w_down, &q_tilde)?;
        let after_s = dual_scale_objective(w_down, &q_tilde, &col_scale)?;
        steps.push(DsqStep { after_q, after_s });

        if after_s < best.2 {
            best = (q.clone(), col_scale.clone(), after_s);
        }
        trace.push(best.2);

        if prev <= 0.0 || (prev - after_s) / prev < EARLY_STOP_REL {
            break;
        }
        prev = after_s;
    }

    let (q_down, col_scale, _) = best;
    Ok(DualScaleResult {
        q_down,
        col_scale,
        iterations_run: steps.len(),
        objective_trace: trace,
        steps,
    })
}

/// Multiplies every group scale of row `i` by `col_scale[i]`. Codes and
/// zero-points are untouched.
pub fn fold_scale(q_up: &QuantizedTensor, col_scale: &[f32]) -> Result<QuantizedTensor> {
    if col_scale.len() != q_up.rows() {
        return Err(Error::LengthMismatch {
            op: "fold_scale",
            expected: q_up.rows(),
            actual: col_scale.len(),
        });
    }
    if col_scale.iter().any(|c| *c == 0.0 || !c.is_finite()) {
        return Err(Error::InvalidScaling("column scale entries must be finite and non-zero".into()));
    }
    let ng = q_up.n_groups();
    let mut out = q_up.clone();
    for (r, chunk) in out.scales_mut().chunks_exact_mut(ng).enumerate() {
        chunk.iter_mut().for_each(|s| *s *= col_scale[r]);
    }
    out.validate()?;
    Ok(out)
}
