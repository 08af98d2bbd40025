//! Non-linear weighted least squares state estimation with projection-based
//! error analytics: the two-step procedure with either classical empirical
//! weights or a time-varying weight matrix built from per-measurement
//! variance states.
//!
//! Step 1 solves WLS with screening weights (empirical magnitude-based for
//! the ideal/traditional modes, variance-state-based for the proposed mode)
//! and computes the composed measurement error statistic J_CME. Only when
//! J_CME crosses the χ²_{d,p} threshold does step 2 re-solve with
//! meter-precision weights and name the most suspicious measurement.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::GridModel;
use crate::measurement::{
    eval_h, jacobian_row, MeasurementDef, MeasurementPlan, MeasurementSample, StateIndexer,
};
use crate::stats::chi2_threshold;

/// Convergence tolerance on the state update, max|Δx|.
pub const WLS_TOL: f64 = 1e-8;
/// Gauss-Newton iteration cap.
pub const WLS_MAX_ITER: usize = 25;
/// K_ii at or above 1 − this margin marks a critical measurement.
pub const CRITICAL_MARGIN: f64 = 1e-9;
/// Floor on the empirical screening sigma, pu.
pub const EMPIRICAL_SIGMA_FLOOR: f64 = 1e-4;

/// Estimation flavor selecting the step-1 weighting policy. Ideal and
/// traditional share the empirical policy; they differ upstream in how
/// measurements are scheduled (synchronized vs staggered-stale).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeMode {
    Ideal,
    Traditional,
    Proposed,
}

impl SeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SeMode::Ideal => "ideal",
            SeMode::Traditional => "traditional",
            SeMode::Proposed => "proposed",
        }
    }

    pub fn parse(s: &str) -> Option<SeMode> {
        match s {
            "ideal" => Some(SeMode::Ideal),
            "traditional" => Some(SeMode::Traditional),
            "proposed" => Some(SeMode::Proposed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// Step 1, ideal/traditional: σ_i = max(|z_i|/100, floor).
    EmpiricalStep1,
    /// Step 1, proposed: meter variance plus accumulated staleness variance.
    TimevaryingStep1,
    /// Step 2: meter-precision sigmas.
    MeterPrecisionStep2,
}

/// Diagonal measurement covariance; W is the inverse of `variances`.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    pub variances: Vec<f64>,
    pub mode: WeightMode,
}

impl WeightMatrix {
    pub fn new(variances: Vec<f64>, mode: WeightMode) -> Result<Self> {
        if variances.is_empty() {
            return Err(Error::InvalidArgument("empty weight matrix".into()));
        }
        for (i, &v) in variances.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "weight matrix variance {i} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(WeightMatrix { variances, mode })
    }

    /// Screening weights from measured magnitudes: σ_i = max(|z_i|/100, floor).
    pub fn empirical(samples: &[MeasurementSample]) -> Result<Self> {
        let variances = samples
            .iter()
            .map(|s| {
                let sigma = (s.value.abs() / 100.0).max(EMPIRICAL_SIGMA_FLOOR);
                sigma * sigma
            })
            .collect();
        WeightMatrix::new(variances, WeightMode::EmpiricalStep1)
    }

    /// Time-varying weights from each sample's current variance state.
    pub fn timevarying(samples: &[MeasurementSample]) -> Result<Self> {
        let variances = samples.iter().map(|s| s.variance_state).collect();
        WeightMatrix::new(variances, WeightMode::TimevaryingStep1)
    }

    /// Meter-precision weights from the plan.
    pub fn meter_precision(plan: &MeasurementPlan) -> Result<Self> {
        let variances = plan
            .defs
            .iter()
            .map(|d| d.meter_sigma * d.meter_sigma)
            .collect();
        WeightMatrix::new(variances, WeightMode::MeterPrecisionStep2)
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.variances.iter().map(|v| v.sqrt()).collect()
    }
}

/// Measurement Jacobian stored by sparse rows of (column, value) pairs.
#[derive(Debug, Clone)]
pub struct SparseJacobian {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub n_cols: usize,
}

impl SparseJacobian {
    pub fn build(plan: &MeasurementPlan, model: &GridModel, vm: &[f64], va: &[f64]) -> Self {
        let idx = StateIndexer::new(model);
        let mut rows = Vec::with_capacity(plan.d());
        let mut row = Vec::new();
        for def in &plan.defs {
            jacobian_row(vm, va, def, model, &idx, &mut row);
            rows.push(row.clone());
        }
        SparseJacobian {
            rows,
            n_cols: idx.n_state(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.rows.len(), self.n_cols);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                h[(r, c)] = v;
            }
        }
        h
    }
}

/// Gain matrix G = HᵀWH from sparse rows and diagonal weights 1/variances.
fn gain_matrix(h: &SparseJacobian, variances: &[f64]) -> DMatrix<f64> {
    let n = h.n_cols;
    let mut gain: DMatrix<f64> = DMatrix::zeros(n, n);
    for (r, row) in h.rows.iter().enumerate() {
        let w = 1.0 / variances[r];
        for &(c1, v1) in row {
            let wv1 = w * v1;
            for &(c2, v2) in row {
                if c2 >= c1 {
                    gain[(c1, c2)] += wv1 * v2;
                }
            }
        }
    }
    for c1 in 0..n {
        for c2 in (c1 + 1)..n {
            gain[(c2, c1)] = gain[(c1, c2)];
        }
    }
    gain
}

fn check_inputs(
    plan: &MeasurementPlan,
    samples: &[MeasurementSample],
    weights: &WeightMatrix,
) -> Result<()> {
    if samples.len() != plan.d() {
        return Err(Error::InvalidArgument(format!(
            "{} samples for a plan of {} measurements",
            samples.len(),
            plan.d()
        )));
    }
    if weights.variances.len() != plan.d() {
        return Err(Error::InvalidArgument(format!(
            "{} weight entries for a plan of {} measurements",
            weights.variances.len(),
            plan.d()
        )));
    }
    if plan.d() < plan.n_state {
        return Err(Error::Observability(format!(
            "{} measurements cannot determine {} states",
            plan.d(),
            plan.n_state
        )));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.def_index != i {
            return Err(Error::InvalidArgument(format!(
                "sample {i} carries def_index {}; samples must be complete and ordered",
                s.def_index
            )));
        }
    }
    Ok(())
}

/// Converged WLS solution with the Jacobian and residuals rebuilt at x̂.
#[derive(Debug, Clone)]
pub struct WlsSolution {
    pub x_hat: DVector<f64>,
    pub residuals: DVector<f64>,
    pub h: SparseJacobian,
    pub iterations: usize,
}

/// Gauss-Newton WLS: iterate Δx = (HᵀWH)⁻¹HᵀW(z − h(x)) from `x0` until
/// max|Δx| ≤ 1e-8 (cap 25). Returns the estimate with residuals and H
/// evaluated at the converged state.
pub fn wls_solve(
    plan: &MeasurementPlan,
    samples: &[MeasurementSample],
    weights: &WeightMatrix,
    model: &GridModel,
    x0: &DVector<f64>,
) -> Result<WlsSolution> {
    check_inputs(plan, samples, weights)?;
    let idx = StateIndexer::new(model);
    if x0.len() != idx.n_state() {
        return Err(Error::InvalidArgument(format!(
            "x0 has dimension {}, state dimension is {}",
            x0.len(),
            idx.n_state()
        )));
    }

    let z: Vec<f64> = samples.iter().map(|s| s.value).collect();
    let mut x = x0.clone();
    let mut vm = vec![0.0; model.n()];
    let mut va = vec![0.0; model.n()];

    let residual_at = |vm: &[f64], va: &[f64]| -> DVector<f64> {
        DVector::from_iterator(
            plan.d(),
            plan.defs
                .iter()
                .zip(&z)
                .map(|(def, &zi)| zi - eval_h(vm, va, def, model)),
        )
    };

    let mut step_norm = f64::INFINITY;
    for iter in 1..=WLS_MAX_ITER {
        idx.unpack_into(&x, &mut vm, &mut va);
        let h = SparseJacobian::build(plan, model, &vm, &va);
        let r = residual_at(&vm, &va);

        let gain = gain_matrix(&h, &weights.variances);
        let mut rhs = DVector::zeros(idx.n_state());
        for (ri, row) in h.rows.iter().enumerate() {
            let wr = r[ri] / weights.variances[ri];
            for &(c, v) in row {
                rhs[c] += v * wr;
            }
        }
        let chol = Cholesky::new(gain).ok_or_else(|| {
            Error::Observability(format!(
                "gain matrix not positive definite at WLS iteration {iter}"
            ))
        })?;
        let dx = chol.solve(&rhs);
        x += &dx;
        step_norm = dx.amax();
        if step_norm <= WLS_TOL {
            idx.unpack_into(&x, &mut vm, &mut va);
            let h = SparseJacobian::build(plan, model, &vm, &va);
            let r = residual_at(&vm, &va);
            return Ok(WlsSolution {
                x_hat: x,
                residuals: r,
                h,
                iterations: iter,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: WLS_MAX_ITER,
        step_norm,
    })
}

/// Diagonal of the oblique projection K = H(HᵀWH)⁻¹HᵀW and the innovation
/// indices II_i = √(1−K_ii)/√K_ii.
#[derive(Debug, Clone)]
pub struct ProjectionIndices {
    pub k_diag: Vec<f64>,
    /// II_i; 0 for critical measurements, +∞ for K_ii = 0.
    pub ii: Vec<f64>,
    /// Critical-measurement flags (K_ii = 1 within margin).
    pub critical: Vec<bool>,
}

pub fn projection_and_indices(
    h: &SparseJacobian,
    weights: &WeightMatrix,
) -> Result<ProjectionIndices> {
    let gain = gain_matrix(h, &weights.variances);
    let ginv = Cholesky::new(gain)
        .ok_or_else(|| Error::Observability("gain matrix HᵀWH is singular".into()))?
        .inverse();
    let d = h.rows.len();
    let mut k_diag = Vec::with_capacity(d);
    let mut ii = Vec::with_capacity(d);
    let mut critical = Vec::with_capacity(d);
    for (r, row) in h.rows.iter().enumerate() {
        // K_ii = w_i · h_iᵀ G⁻¹ h_i.
        let mut quad = 0.0;
        for &(c1, v1) in row {
            for &(c2, v2) in row {
                quad += v1 * ginv[(c1, c2)] * v2;
            }
        }
        let k = (quad / weights.variances[r]).clamp(0.0, 1.0);
        k_diag.push(k);
        if k >= 1.0 - CRITICAL_MARGIN {
            ii.push(0.0);
            critical.push(true);
        } else if k == 0.0 {
            ii.push(f64::INFINITY);
            critical.push(false);
        } else {
            ii.push(((1.0 - k) / k).sqrt());
            critical.push(false);
        }
    }
    Ok(ProjectionIndices {
        k_diag,
        ii,
        critical,
    })
}

/// Full d×d projection matrix K = H(HᵀWH)⁻¹HᵀW (dense; for analysis and
/// verification, not the estimation hot path).
///
/// Computed scale-balanced: with S = W^{1/2}, K = S⁻¹(Q₁Q₁ᵀ)S where Q₁ is
/// the thin Q factor of S·H. Q₁Q₁ᵀ is an orthogonal projector obtained
/// backward-stably, so the projection identities survive weight spreads of
/// many orders of magnitude that would sink an explicit gain inverse.
pub fn projection_matrix(h: &SparseJacobian, weights: &WeightMatrix) -> Result<DMatrix<f64>> {
    let d = h.rows.len();
    let n = h.n_cols;
    let inv_sigmas: Vec<f64> = weights.variances.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut sh = h.to_dense();
    for r in 0..d {
        for c in 0..n {
            sh[(r, c)] *= inv_sigmas[r];
        }
    }
    let qr = sh.qr();
    let rfact = qr.r();
    for i in 0..n {
        if rfact[(i, i)].abs() < 1e-12 {
            return Err(Error::Observability(
                "weighted Jacobian is rank deficient".into(),
            ));
        }
    }
    let q = qr.q();
    let m = &q * q.transpose();
    let mut k = m;
    for i in 0..d {
        for j in 0..d {
            // S⁻¹ M S: row scale by σ_i, column scale by 1/σ_j.
            k[(i, j)] *= inv_sigmas[j] / inv_sigmas[i];
        }
    }
    Ok(k)
}

/// Composed measurement error analysis: CME_i = r_i·√(1 + 1/II_i²),
/// normalized by σ_i, summed into J_CME and tested against χ²_{d,p}.
#[derive(Debug, Clone)]
pub struct CmeAnalysis {
    pub cme: Vec<f64>,
    pub cme_n: Vec<f64>,
    pub j_cme: f64,
    pub threshold: f64,
    pub detected: bool,
    /// Count of critical measurements excluded from the sum.
    pub excluded_critical: usize,
}

pub fn cme_analysis(
    residuals: &[f64],
    proj: &ProjectionIndices,
    sigmas: &[f64],
    d: usize,
    p: f64,
) -> Result<CmeAnalysis> {
    if residuals.len() != proj.ii.len() || residuals.len() != sigmas.len() {
        return Err(Error::InvalidArgument(
            "cme_analysis inputs have mismatched lengths".into(),
        ));
    }
    let threshold = chi2_threshold(d, p)?;
    let mut cme = Vec::with_capacity(residuals.len());
    let mut cme_n = Vec::with_capacity(residuals.len());
    let mut j_cme = 0.0;
    let mut excluded = 0;
    for i in 0..residuals.len() {
        if proj.critical[i] {
            // II = 0 puts Eq-style CME at a pole; critical measurements have
            // identically zero residuals and carry no error information.
            cme.push(0.0);
            cme_n.push(0.0);
            excluded += 1;
            continue;
        }
        let ii = proj.ii[i];
        // 1 + 1/II² with II = +∞ collapsing to 1.
        let amp = if ii.is_infinite() {
            1.0
        } else {
            1.0 + 1.0 / (ii * ii)
        };
        let c = residuals[i] * amp.sqrt();
        let cn = c / sigmas[i];
        j_cme += cn * cn;
        cme.push(c);
        cme_n.push(cn);
    }
    Ok(CmeAnalysis {
        cme,
        cme_n,
        j_cme,
        threshold,
        detected: j_cme >= threshold,
        excluded_critical: excluded,
    })
}

/// Outcome of the two-step estimation at one SE instant. All vector fields
/// and the detection verdict describe step 1 (the screening pass that feeds
/// the operator metrics); `suspect_index` comes from the step-2 re-weighted
/// pass when detection fired.
#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub x_hat: DVector<f64>,
    pub residuals: Vec<f64>,
    pub k_diag: Vec<f64>,
    pub ii: Vec<f64>,
    pub critical: Vec<bool>,
    pub cme: Vec<f64>,
    pub cme_n: Vec<f64>,
    pub j_cme: f64,
    pub threshold: f64,
    pub detected: bool,
    pub step_reached: u8,
    pub suspect_index: Option<usize>,
    pub iterations: usize,
}

/// The two-step procedure: screen with mode-dependent weights, and only on a
/// χ² detection re-solve with meter-precision weights to identify the
/// largest normalized composed error.
pub fn two_step_estimate(
    plan: &MeasurementPlan,
    samples: &[MeasurementSample],
    mode: SeMode,
    w_time: Option<&WeightMatrix>,
    model: &GridModel,
    p: f64,
) -> Result<EstimationResult> {
    let w1 = match mode {
        SeMode::Ideal | SeMode::Traditional => {
            if w_time.is_some() {
                return Err(Error::InvalidArgument(format!(
                    "mode {} does not take a time-varying weight matrix",
                    mode.as_str()
                )));
            }
            WeightMatrix::empirical(samples)?
        }
        SeMode::Proposed => match w_time {
            Some(w) => {
                if w.mode != WeightMode::TimevaryingStep1 {
                    return Err(Error::InvalidArgument(
                        "proposed mode requires a timevarying_step1 weight matrix".into(),
                    ));
                }
                if w.variances.len() != plan.d() {
                    return Err(Error::InvalidArgument(format!(
                        "w_time has {} entries for a plan of {}",
                        w.variances.len(),
                        plan.d()
                    )));
                }
                w.clone()
            }
            None => WeightMatrix::timevarying(samples)?,
        },
    };

    let idx = StateIndexer::new(model);
    let x0 = idx.flat_x(model);
    let sol1 = wls_solve(plan, samples, &w1, model, &x0)?;
    let proj1 = projection_and_indices(&sol1.h, &w1)?;
    let sigmas1 = w1.sigmas();
    let r1: Vec<f64> = sol1.residuals.iter().copied().collect();
    let cme1 = cme_analysis(&r1, &proj1, &sigmas1, plan.d(), p)?;

    let mut iterations = sol1.iterations;
    let mut step_reached = 1;
    let mut suspect_index = None;
    if cme1.detected {
        step_reached = 2;
        let w2 = WeightMatrix::meter_precision(plan)?;
        // Step 2 refines from the step-1 estimate; the fixed point is the
        // same as from a flat start.
        let sol2 = wls_solve(plan, samples, &w2, model, &sol1.x_hat)?;
        let proj2 = projection_and_indices(&sol2.h, &w2)?;
        let sigmas2 = w2.sigmas();
        let r2: Vec<f64> = sol2.residuals.iter().copied().collect();
        let cme2 = cme_analysis(&r2, &proj2, &sigmas2, plan.d(), p)?;
        iterations += sol2.iterations;
        suspect_index = cme2
            .cme_n
            .iter()
            .enumerate()
            .filter(|(i, _)| !proj2.critical[*i])
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i);
    }

    Ok(EstimationResult {
        x_hat: sol1.x_hat,
        residuals: r1,
        k_diag: proj1.k_diag,
        ii: proj1.ii,
        critical: proj1.critical,
        cme: cme1.cme,
        cme_n: cme1.cme_n,
        j_cme: cme1.j_cme,
        threshold: cme1.threshold,
        detected: cme1.detected,
        step_reached,
        suspect_index,
        iterations,
    })
}

/// First-order Taylor remainder of one measurement function:
/// ε = [h(x_ref) + ∇h(x_ref)·(x_true − x_ref)] − h(x_true).
pub fn truncation_error(
    model: &GridModel,
    def: &MeasurementDef,
    x_ref: &DVector<f64>,
    x_true: &DVector<f64>,
) -> f64 {
    let idx = StateIndexer::new(model);
    let mut vm = vec![0.0; model.n()];
    let mut va = vec![0.0; model.n()];
    idx.unpack_into(x_ref, &mut vm, &mut va);
    let h_ref = eval_h(&vm, &va, def, model);
    let mut row = Vec::new();
    jacobian_row(&vm, &va, def, model, &idx, &mut row);
    let mut lin = h_ref;
    for &(c, v) in &row {
        lin += v * (x_true[c] - x_ref[c]);
    }
    idx.unpack_into(x_true, &mut vm, &mut va);
    lin - eval_h(&vm, &va, def, model)
}
