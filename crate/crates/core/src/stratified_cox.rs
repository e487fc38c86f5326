//! Treatment-stratified Cox proportional hazards model.
//!
//! Each arm keeps its own unspecified baseline hazard while the covariate
//! coefficients are shared. The partial likelihood uses only failures with
//! survival time `t <= t_max` (for interim analyses `t_max = min(u, tau)`);
//! tied failures share the risk-set denominator (Breslow).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trial_data::{Arm, Snapshot};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoxError {
    #[error("no events at or before t = {t_max}; partial likelihood is empty")]
    NoEvents { t_max: f64 },
    #[error(
        "singular information matrix (eigenvalue {eigenvalue:.3e}) along direction {direction:?}"
    )]
    SingularInformation {
        eigenvalue: f64,
        direction: Vec<f64>,
    },
    #[error("Newton-Raphson did not converge after {iterations} iterations (score max-norm {score_norm:.3e})")]
    NonConvergence { iterations: usize, score_norm: f64 },
    #[error("estimate diverges along direction {direction:?} (monotone partial likelihood)")]
    Divergence { direction: Vec<f64> },
    #[error("coefficient vector has length {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoxOptions {
    /// Convergence threshold on the max-norm of the score.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

/// At-risk weighted sums for one arm, normalized by the arm size `n_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSetSums {
    pub s0: f64,
    pub s1: DVector<f64>,
    pub s2: DMatrix<f64>,
}

impl RiskSetSums {
    /// `E_i = S1 / S0`, undefined for an empty risk set.
    pub fn mean(&self) -> Option<DVector<f64>> {
        (self.s0 > 0.0).then(|| &self.s1 / self.s0)
    }

    /// `V_i = S2 / S0 - E E^T`.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        let e = self.mean()?;
        Some(&self.s2 / self.s0 - &e * e.transpose())
    }
}

/// Weighted at-risk sums `S_0i, S_1i, S_2i` at survival time `t`.
pub fn risk_set_sums(snap: &Snapshot, beta: &[f64], arm: Arm, t: f64) -> RiskSetSums {
    let p = snap.covariate_dim();
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut n_i = 0usize;
    for s in snap.subjects().iter().filter(|s| s.arm == arm) {
        n_i += 1;
        if s.time < t {
            continue;
        }
        let z = DVector::from_column_slice(&s.covariates);
        let w = linear_predictor(beta, &s.covariates).exp();
        s0 += w;
        s1 += &z * w;
        s2 += &z * z.transpose() * w;
    }
    if n_i > 0 {
        let scale = 1.0 / n_i as f64;
        s0 *= scale;
        s1 *= scale;
        s2 *= scale;
    }
    RiskSetSums { s0, s1, s2 }
}

pub(crate) fn linear_predictor(beta: &[f64], z: &[f64]) -> f64 {
    beta.iter().zip(z).map(|(b, z)| b * z).sum()
}

/// Score vector, observed information and log partial likelihood at `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreInfo {
    pub score: DVector<f64>,
    pub info: DMatrix<f64>,
    pub loglik: f64,
}

/// Breslow estimate of one arm's baseline cumulative hazard.
///
/// Right-continuous step function with jumps at the distinct failure times.
/// The per-time risk-set totals are kept because the variance estimator
/// needs them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    pub arm: Arm,
    /// Arm size `n_i` in the snapshot.
    pub arm_size: usize,
    pub times: Vec<f64>,
    /// `d_ik`
    pub events: Vec<usize>,
    /// `y_ik`, subjects at risk just before each time.
    pub at_risk: Vec<usize>,
    /// `sum_j Y_ij exp(beta^T Z_ij)` (unnormalized).
    pub weight_sums: Vec<f64>,
    /// `sum_j Y_ij exp(beta^T Z_ij) Z_ij` (unnormalized), one p-vector per time.
    pub weighted_covariate_sums: Vec<Vec<f64>>,
    pub increments: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl BaselineHazard {
    fn empty(arm: Arm, arm_size: usize) -> Self {
        Self {
            arm,
            arm_size,
            times: Vec::new(),
            events: Vec::new(),
            at_risk: Vec::new(),
            weight_sums: Vec::new(),
            weighted_covariate_sums: Vec::new(),
            increments: Vec::new(),
            cumulative: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `Lambda_0i(t)`; zero before the first failure.
    pub fn value_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }
}

/// Fitted stratified model at one analysis time.
#[derive(Debug, Clone, PartialEq)]
pub struct CoxFit {
    pub beta_hat: Vec<f64>,
    pub info: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub t_max: f64,
    pub baselines: [BaselineHazard; 2],
}

impl CoxFit {
    pub fn baseline(&self, arm: Arm) -> &BaselineHazard {
        &self.baselines[arm.index()]
    }

    /// Inverse of the observed information, `Var(beta_hat)`.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        crate::numerics::spd_inverse(&self.info)
    }
}

// ---------------------------------------------------------------------------
// Risk-set layout
// ---------------------------------------------------------------------------

/// One stratum sorted by decreasing survival time, with tied times grouped.
struct Stratum {
    arm: Arm,
    size: usize,
    times: Vec<f64>,
    events: Vec<bool>,
    /// row-major `size x p`
    z: Vec<f64>,
    /// `[start, end)` ranges of equal times, in decreasing time order
    groups: Vec<(usize, usize)>,
}

struct Layout {
    p: usize,
    t_max: f64,
    strata: Vec<Stratum>,
}

impl Layout {
    fn new(snap: &Snapshot, t_max: f64) -> Self {
        let p = snap.covariate_dim();
        let strata = Arm::BOTH
            .iter()
            .map(|&arm| {
                let mut idx: Vec<&crate::trial_data::SnapshotSubject> =
                    snap.subjects().iter().filter(|s| s.arm == arm).collect();
                idx.sort_by(|a, b| b.time.total_cmp(&a.time));
                let times: Vec<f64> = idx.iter().map(|s| s.time).collect();
                let events = idx.iter().map(|s| s.event).collect();
                let z = idx
                    .iter()
                    .flat_map(|s| s.covariates.iter().copied())
                    .collect();
                let mut groups = Vec::new();
                let mut start = 0;
                while start < times.len() {
                    let mut end = start + 1;
                    while end < times.len() && times[end] == times[start] {
                        end += 1;
                    }
                    groups.push((start, end));
                    start = end;
                }
                Stratum {
                    arm,
                    size: times.len(),
                    times,
                    events,
                    z,
                    groups,
                }
            })
            .collect();
        Self { p, t_max, strata }
    }

    fn event_count(&self) -> usize {
        self.strata
            .iter()
            .map(|s| {
                s.times
                    .iter()
                    .zip(&s.events)
                    .filter(|(&t, &e)| e && t <= self.t_max)
                    .count()
            })
            .sum()
    }

    /// Loglik, score and (optionally) information at `beta`.
    fn evaluate(&self, beta: &[f64], want_info: bool) -> ScoreInfo {
        let p = self.p;
        let mut loglik = 0.0;
        let mut score = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        let mut s1 = vec![0.0; p];
        let mut s2 = vec![0.0; p * p];
        let mut ev_z = vec![0.0; p];
        for st in &self.strata {
            let mut s0 = 0.0;
            s1.iter_mut().for_each(|v| *v = 0.0);
            s2.iter_mut().for_each(|v| *v = 0.0);
            for &(a, b) in &st.groups {
                let mut d = 0usize;
                let mut lp_sum = 0.0;
                ev_z.iter_mut().for_each(|v| *v = 0.0);
                for j in a..b {
                    let z = &st.z[j * p..(j + 1) * p];
                    let lp = linear_predictor(beta, z);
                    let w = lp.exp();
                    s0 += w;
                    for r in 0..p {
                        s1[r] += w * z[r];
                        if want_info {
                            for c in 0..=r {
                                s2[r * p + c] += w * z[r] * z[c];
                            }
                        }
                    }
                    if st.events[j] {
                        d += 1;
                        lp_sum += lp;
                        for r in 0..p {
                            ev_z[r] += z[r];
                        }
                    }
                }
                if d == 0 || st.times[a] > self.t_max {
                    continue;
                }
                let df = d as f64;
                loglik += lp_sum - df * s0.ln();
                for r in 0..p {
                    let er = s1[r] / s0;
                    score[r] += ev_z[r] - df * er;
                    if want_info {
                        for c in 0..=r {
                            let v = df * (s2[r * p + c] / s0 - er * s1[c] / s0);
                            info[(r, c)] += v;
                            if c != r {
                                info[(c, r)] += v;
                            }
                        }
                    }
                }
            }
        }
        ScoreInfo {
            score,
            info,
            loglik,
        }
    }

    fn baseline(&self, beta: &[f64], arm: Arm) -> BaselineHazard {
        let p = self.p;
        let st = self
            .strata
            .iter()
            .find(|s| s.arm == arm)
            .expect("both strata present");
        let mut out = BaselineHazard::empty(arm, st.size);
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; p];
        let mut count = 0usize;
        for &(a, b) in &st.groups {
            let mut d = 0;
            for j in a..b {
                let z = &st.z[j * p..(j + 1) * p];
                let w = linear_predictor(beta, z).exp();
                s0 += w;
                for r in 0..p {
                    s1[r] += w * z[r];
                }
                count += 1;
                d += usize::from(st.events[j]);
            }
            if d > 0 && st.times[a] <= self.t_max {
                out.times.push(st.times[a]);
                out.events.push(d);
                out.at_risk.push(count);
                out.weight_sums.push(s0);
                out.weighted_covariate_sums.push(s1.clone());
                out.increments.push(d as f64 / s0);
            }
        }
        out.times.reverse();
        out.events.reverse();
        out.at_risk.reverse();
        out.weight_sums.reverse();
        out.weighted_covariate_sums.reverse();
        out.increments.reverse();
        let mut acc = 0.0;
        out.cumulative = out
            .increments
            .iter()
            .map(|&h| {
                acc += h;
                acc
            })
            .collect();
        out
    }
}

fn check_dim(snap: &Snapshot, beta: &[f64]) -> Result<(), CoxError> {
    if beta.len() != snap.covariate_dim() {
        return Err(CoxError::DimensionMismatch {
            expected: snap.covariate_dim(),
            found: beta.len(),
        });
    }
    Ok(())
}

/// Partial score `U(beta, u, t_max)`, information `I(beta, u, t_max)` and the
/// stratified log partial likelihood.
pub fn score_and_info(snap: &Snapshot, beta: &[f64], t_max: f64) -> Result<ScoreInfo, CoxError> {
    check_dim(snap, beta)?;
    Ok(Layout::new(snap, t_max).evaluate(beta, true))
}

/// Stratified log partial likelihood alone.
pub fn log_partial_likelihood(snap: &Snapshot, beta: &[f64], t_max: f64) -> Result<f64, CoxError> {
    check_dim(snap, beta)?;
    Ok(Layout::new(snap, t_max).evaluate(beta, false).loglik)
}

/// Breslow baseline cumulative hazard for one arm at fixed `beta`.
pub fn breslow(
    snap: &Snapshot,
    beta: &[f64],
    arm: Arm,
    t_max: f64,
) -> Result<BaselineHazard, CoxError> {
    check_dim(snap, beta)?;
    Ok(Layout::new(snap, t_max).baseline(beta, arm))
}

fn singular_direction(info: &DMatrix<f64>) -> Option<(f64, Vec<f64>)> {
    let p = info.nrows();
    if p == 0 {
        return None;
    }
    let eig = SymmetricEigen::new(info.clone());
    let (k, &min) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if min <= 1e-10 * max.max(1.0) {
        Some((min, eig.eigenvectors.column(k).iter().copied().collect()))
    } else {
        None
    }
}

fn max_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Maximum partial likelihood fit by safeguarded Newton–Raphson from zero,
/// using failures up to `min(u, tau)`.
pub fn fit(snap: &Snapshot, opts: &CoxOptions) -> Result<CoxFit, CoxError> {
    fit_to(snap, snap.t_max(), opts)
}

/// As [`fit`], with an explicit upper limit of survival time.
pub fn fit_to(snap: &Snapshot, t_max: f64, opts: &CoxOptions) -> Result<CoxFit, CoxError> {
    let layout = Layout::new(snap, t_max);
    if layout.event_count() == 0 {
        return Err(CoxError::NoEvents { t_max });
    }
    let p = layout.p;
    let mut beta = vec![0.0; p];
    let mut cur = layout.evaluate(&beta, true);
    let info_scale = cur.info.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut iterations = 0;
    let mut converged = max_norm(&cur.score) < opts.tol;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        if let Some((eigenvalue, direction)) = singular_direction(&cur.info) {
            return Err(CoxError::SingularInformation {
                eigenvalue,
                direction,
            });
        }
        let chol = nalgebra::linalg::Cholesky::new(cur.info.clone()).ok_or_else(|| {
            let (eigenvalue, direction) =
                singular_direction(&cur.info).unwrap_or((0.0, vec![0.0; p]));
            CoxError::SingularInformation {
                eigenvalue,
                direction,
            }
        })?;
        let step = chol.solve(&cur.score);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = beta
                .iter()
                .zip(step.iter())
                .map(|(b, s)| b + scale * s)
                .collect();
            let next = layout.evaluate(&trial, true);
            if next.loglik.is_finite()
                && next.loglik >= cur.loglik - 1e-12 * cur.loglik.abs().max(1.0)
            {
                accepted = Some((trial, next));
                break;
            }
            scale *= 0.5;
        }
        let Some((trial, next)) = accepted else {
            break;
        };
        let moved = trial
            .iter()
            .zip(&beta)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        beta = trial;
        cur = next;
        converged = max_norm(&cur.score) < opts.tol;
        // Numerical floor: the step is below round-off and the score is tiny
        // relative to the information scale.
        if !converged && moved < 1e-14 * (1.0 + beta.iter().fold(0.0f64, |m, b| m.max(b.abs()))) {
            let scale = cur.info.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            converged = max_norm(&cur.score) < 1e-10 * scale;
            break;
        }
    }
    if !converged {
        return Err(CoxError::NonConvergence {
            iterations,
            score_norm: max_norm(&cur.score),
        });
    }
    if let Some((eigenvalue, direction)) = singular_direction(&cur.info) {
        return Err(CoxError::SingularInformation {
            eigenvalue,
            direction,
        });
    }
    // A vanishing score can also mean the likelihood keeps rising towards an
    // asymptote; the information then collapses relative to its value at zero.
    if p > 0 {
        let eig = SymmetricEigen::new(cur.info.clone());
        let (k, &min) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty");
        if min < 1e-6 * info_scale {
            return Err(CoxError::Divergence {
                direction: eig.eigenvectors.column(k).iter().copied().collect(),
            });
        }
    }
    let baselines = [
        layout.baseline(&beta, Arm::Control),
        layout.baseline(&beta, Arm::Treatment),
    ];
    Ok(CoxFit {
        beta_hat: beta,
        info: cur.info,
        loglik: cur.loglik,
        iterations,
        converged,
        t_max,
        baselines,
    })
}
