//! Covariate-adjusted survival curves, RMSTs and the closed-form variance of
//! their difference at a single analysis time.
//!
//! For arm `i` the adjusted curve averages the model-based conditional
//! survival over every enrolled subject of both arms,
//!
//! ```text
//! S_i(t) = (1/n) sum_g exp(-exp(beta^T Z_g) Lambda_0i(t)),
//! ```
//!
//! and the RMST is its exact area on `[0, tau]`. The variance of
//! `Delta = mu_1 - mu_0` is assembled from three martingale pieces (one
//! Breslow term per arm and one term for the estimated coefficients) plus the
//! spread of the conditional RMST differences over the covariate sample.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::spd_inverse;
use crate::stratified_cox::{self, linear_predictor, CoxError, CoxFit, CoxOptions};
use crate::trial_data::{Arm, Snapshot};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RmstError {
    #[error("insufficient events: arm {arm} has no events by t = {t_max}; analysis deferred")]
    InsufficientEvents { arm: Arm, t_max: f64 },
    #[error("survival grid does not match the fitted baseline for arm {0}")]
    GridMismatch(Arm),
    #[error("estimated variance of the RMST difference is not positive ({0})")]
    DegenerateVariance(f64),
    #[error(transparent)]
    Cox(#[from] CoxError),
}

/// Adjusted survival curve of one arm evaluated on its failure-time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedSurvival {
    pub arm: Arm,
    pub tau: f64,
    /// `0 = t_0 <= t_1 < ... < t_r < tau`, followed by `tau`.
    pub grid: Vec<f64>,
    /// Curve value at `grid[0..=r]`; `values[0] = 1`.
    pub values: Vec<f64>,
}

impl AdjustedSurvival {
    /// Number of failure times on the grid.
    pub fn failure_count(&self) -> usize {
        self.values.len() - 1
    }

    /// Right-continuous step value at `t` in `[0, tau]`.
    pub fn value_at(&self, t: f64) -> f64 {
        let k = self.grid[..self.values.len()].partition_point(|&s| s <= t);
        self.values[k.saturating_sub(1)]
    }
}

/// Area under a step survival curve on `[0, tau]`: `sum_k S(t_k) (t_{k+1} - t_k)`
/// for `k = 0..=r`, the `k = 0` rectangle included.
pub fn rmst(adj: &AdjustedSurvival) -> f64 {
    adj.values
        .iter()
        .zip(adj.grid.windows(2))
        .map(|(s, w)| s * (w[1] - w[0]))
        .sum()
}

/// Per-arm pieces of the variance estimator, indexed by failure time
/// `t_1..t_r` on the arm's grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmVarianceTerms {
    pub c1: Vec<f64>,
    pub c2: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub psi: Vec<f64>,
    /// `B_1i`
    pub b1: f64,
}

/// Variance components on the `sqrt(n)` scale; `Var(Delta) = v_eta2 / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub n: usize,
    pub b10: f64,
    pub b11: f64,
    pub b3: f64,
    /// Sample variance of the conditional RMST differences.
    pub var_cond: f64,
    pub v_xi2: f64,
    pub v_eta2: f64,
    pub arms: [ArmVarianceTerms; 2],
}

impl VarianceComponents {
    /// Estimated variance of the RMST difference itself.
    pub fn variance_of_delta(&self) -> f64 {
        self.v_eta2 / self.n as f64
    }
}

/// Everything computed at one analysis time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedRmstResult {
    pub u: f64,
    pub tau: f64,
    pub n0: usize,
    pub n1: usize,
    pub beta_hat: Vec<f64>,
    pub mu0_hat: f64,
    pub mu1_hat: f64,
    pub delta_hat: f64,
    pub components: VarianceComponents,
    /// `n / V_eta^2`, the inverse of the estimated variance of `delta_hat`.
    pub info_level: f64,
    pub se: f64,
    pub z: f64,
}

impl AdjustedRmstResult {
    pub fn report(&self) -> RmstReport {
        let n = self.components.n as f64;
        let mut components = BTreeMap::new();
        components.insert("B10".to_string(), self.components.b10 / n);
        components.insert("B11".to_string(), self.components.b11 / n);
        components.insert("B3".to_string(), self.components.b3 / n);
        components.insert("var_cond".to_string(), self.components.var_cond / n);
        RmstReport {
            method: "adjusted_rmst".into(),
            u: self.u,
            tau: self.tau,
            mu0: self.mu0_hat,
            mu1: self.mu1_hat,
            delta: self.delta_hat,
            se: self.se,
            z: self.z,
            info: self.info_level,
            components,
        }
    }
}

/// Serializable summary shared by the adjusted and Kaplan–Meier analyses.
/// Variance components are on the scale of `delta` itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmstReport {
    pub method: String,
    pub u: f64,
    pub tau: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub delta: f64,
    pub se: f64,
    pub z: f64,
    pub info: f64,
    pub components: BTreeMap<String, f64>,
}

// ---------------------------------------------------------------------------
// Per-arm pass over the covariate sample
// ---------------------------------------------------------------------------

struct ArmPass {
    survival: AdjustedSurvival,
    /// `Lambda_0i(t_k)`, k = 1..=r
    cumhaz: Vec<f64>,
    c1: Vec<f64>,
    c2: Vec<Vec<f64>>,
    /// `mu_i(tau | Z_g)` for every subject, snapshot order
    conditional_rmst: Vec<f64>,
}

fn grid_for(fit: &CoxFit, arm: Arm, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let base = fit.baseline(arm);
    let r = base.times.partition_point(|&t| t < tau);
    let mut grid = Vec::with_capacity(r + 2);
    grid.push(0.0);
    grid.extend_from_slice(&base.times[..r]);
    grid.push(tau);
    (grid, base.cumulative[..r].to_vec())
}

fn arm_pass(fit: &CoxFit, snap: &Snapshot, arm: Arm, risk: &[f64]) -> ArmPass {
    let tau = snap.tau();
    let p = snap.covariate_dim();
    let (grid, cumhaz) = grid_for(fit, arm, tau);
    let r = cumhaz.len();
    let widths: Vec<f64> = grid.windows(2).map(|w| w[1] - w[0]).collect();
    let n = snap.n() as f64;

    let mut surv = vec![0.0; r];
    let mut c1 = vec![0.0; r];
    let mut c2 = vec![vec![0.0; p]; r];
    let mut conditional_rmst = Vec::with_capacity(snap.n());
    for (s, &rg) in snap.subjects().iter().zip(risk) {
        let mut area = widths[0];
        for k in 0..r {
            let sk = (-rg * cumhaz[k]).exp();
            area += sk * widths[k + 1];
            surv[k] += sk;
            let a = sk * rg;
            c1[k] += a;
            for (acc, z) in c2[k].iter_mut().zip(&s.covariates) {
                *acc += a * z;
            }
        }
        conditional_rmst.push(area);
    }
    let mut values = Vec::with_capacity(r + 1);
    values.push(1.0);
    values.extend(surv.iter().map(|v| v / n));
    c1.iter_mut().for_each(|v| *v /= n);
    c2.iter_mut().flatten().for_each(|v| *v /= n);
    ArmPass {
        survival: AdjustedSurvival {
            arm,
            tau,
            grid,
            values,
        },
        cumhaz,
        c1,
        c2,
        conditional_rmst,
    }
}

fn risk_scores(fit: &CoxFit, snap: &Snapshot) -> Vec<f64> {
    snap.subjects()
        .iter()
        .map(|s| linear_predictor(&fit.beta_hat, &s.covariates).exp())
        .collect()
}

/// Adjusted survival curve for `arm`, averaged over all enrolled subjects.
pub fn adjusted_survival(fit: &CoxFit, snap: &Snapshot, arm: Arm) -> AdjustedSurvival {
    arm_pass(fit, snap, arm, &risk_scores(fit, snap)).survival
}

fn arm_terms(fit: &CoxFit, pass: &ArmPass, n: usize) -> ArmVarianceTerms {
    let arm = pass.survival.arm;
    let base = fit.baseline(arm);
    let r = pass.cumhaz.len();
    let p = fit.beta_hat.len();
    let n_i = base.arm_size as f64;
    let widths: Vec<f64> = pass.survival.grid.windows(2).map(|w| w[1] - w[0]).collect();

    // gamma_i and Q_i are cumulative sums over failure times
    let mut gamma = Vec::with_capacity(r);
    let mut q = Vec::with_capacity(r);
    let mut gamma_increments = Vec::with_capacity(r);
    let mut g_acc = 0.0;
    let mut q_acc = vec![0.0; p];
    for k in 0..r {
        let w = base.weight_sums[k];
        let d = base.events[k] as f64;
        let g = n_i * d / (w * w);
        gamma_increments.push(g);
        g_acc += g;
        gamma.push(g_acc);
        for (acc, s1) in q_acc.iter_mut().zip(&base.weighted_covariate_sums[k]) {
            *acc += d * s1 / (w * w);
        }
        q.push(q_acc.clone());
    }

    let mut psi = vec![0.0; p];
    for k in 0..r {
        let width = widths[k + 1];
        for j in 0..p {
            psi[j] += (pass.c1[k] * q[k][j] - pass.cumhaz[k] * pass.c2[k][j]) * width;
        }
    }

    // sum_j sum_k a_j a_k gamma(min(j, k)) = sum_m g_m (sum_{k >= m} a_k)^2
    let mut tail = 0.0;
    let mut b1 = 0.0;
    for k in (0..r).rev() {
        tail += pass.c1[k] * widths[k + 1];
        b1 += gamma_increments[k] * tail * tail;
    }
    b1 *= n as f64 / n_i;

    ArmVarianceTerms {
        c1: pass.c1.clone(),
        c2: pass.c2.clone(),
        gamma,
        q,
        psi,
        b1,
    }
}

fn assemble(
    fit: &CoxFit,
    snap: &Snapshot,
    passes: &[ArmPass; 2],
) -> Result<VarianceComponents, RmstError> {
    let n = snap.n();
    let nf = n as f64;
    let t0 = arm_terms(fit, &passes[0], n);
    let t1 = arm_terms(fit, &passes[1], n);
    let p = fit.beta_hat.len();
    let b3 = if p == 0 {
        0.0
    } else {
        let inv = spd_inverse(&fit.info).ok_or_else(|| CoxError::SingularInformation {
            eigenvalue: 0.0,
            direction: vec![0.0; p],
        })?;
        let d = nalgebra::DVector::from_iterator(p, t1.psi.iter().zip(&t0.psi).map(|(a, b)| a - b));
        nf * (d.transpose() * inv * &d)[(0, 0)]
    };
    let delta = rmst(&passes[1].survival) - rmst(&passes[0].survival);
    let var_cond = passes[1]
        .conditional_rmst
        .iter()
        .zip(&passes[0].conditional_rmst)
        .map(|(m1, m0)| (m1 - m0 - delta).powi(2))
        .sum::<f64>()
        / nf;
    let v_xi2 = t0.b1 + t1.b1 + b3;
    Ok(VarianceComponents {
        n,
        b10: t0.b1,
        b11: t1.b1,
        b3,
        var_cond,
        v_xi2,
        v_eta2: v_xi2 + var_cond,
        arms: [t0, t1],
    })
}

/// Variance components of the adjusted RMST difference.
pub fn variance(
    fit: &CoxFit,
    snap: &Snapshot,
    adj0: &AdjustedSurvival,
    adj1: &AdjustedSurvival,
) -> Result<VarianceComponents, RmstError> {
    let risk = risk_scores(fit, snap);
    let passes = [
        arm_pass(fit, snap, Arm::Control, &risk),
        arm_pass(fit, snap, Arm::Treatment, &risk),
    ];
    for (pass, adj) in passes.iter().zip([adj0, adj1]) {
        if pass.survival.grid != adj.grid || pass.survival.arm != adj.arm {
            return Err(RmstError::GridMismatch(adj.arm));
        }
    }
    assemble(fit, snap, &passes)
}

/// Full adjusted analysis at one calendar time: stratified fit, adjusted
/// curves, RMSTs, variance and Wald statistic.
pub fn analyze(snap: &Snapshot, opts: &CoxOptions) -> Result<AdjustedRmstResult, RmstError> {
    let t_max = snap.t_max();
    for arm in Arm::BOTH {
        if snap.events_in(arm, t_max) == 0 {
            return Err(RmstError::InsufficientEvents { arm, t_max });
        }
    }
    let fit = stratified_cox::fit(snap, opts)?;
    analyze_fit(&fit, snap)
}

/// Adjusted analysis from an existing fit.
pub fn analyze_fit(fit: &CoxFit, snap: &Snapshot) -> Result<AdjustedRmstResult, RmstError> {
    let risk = risk_scores(fit, snap);
    let passes = [
        arm_pass(fit, snap, Arm::Control, &risk),
        arm_pass(fit, snap, Arm::Treatment, &risk),
    ];
    let components = assemble(fit, snap, &passes)?;
    let mu0_hat = rmst(&passes[0].survival);
    let mu1_hat = rmst(&passes[1].survival);
    let delta_hat = mu1_hat - mu0_hat;
    let var = components.variance_of_delta();
    if !(var > 0.0 && var.is_finite()) {
        return Err(RmstError::DegenerateVariance(var));
    }
    let se = var.sqrt();
    Ok(AdjustedRmstResult {
        u: snap.u(),
        tau: snap.tau(),
        n0: snap.n_arm(Arm::Control),
        n1: snap.n_arm(Arm::Treatment),
        beta_hat: fit.beta_hat.clone(),
        mu0_hat,
        mu1_hat,
        delta_hat,
        info_level: 1.0 / var,
        se,
        z: delta_hat / se,
        components,
    })
}
