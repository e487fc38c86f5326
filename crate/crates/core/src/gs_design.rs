//! Error-spending boundaries for group sequential monitoring.
//!
//! Standardized statistics observed at information times `t_1 < ... < t_K`
//! are treated in canonical form: `Z_k = S(t_k) / sqrt(t_k)` for a Brownian
//! motion `S` with drift `theta`, so `Corr(Z_j, Z_k) = sqrt(t_j / t_k)`.
//! Critical values are found stage by stage so that the probability of a
//! first crossing at stage `k` equals the alpha spent there. The sub-density
//! of the continuing paths is carried between stages on a composite
//! Gauss–Legendre grid.

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    brent, composite_gauss_legendre, norm_cdf, norm_pdf, norm_quantile, norm_sf, panels_for,
};

pub const DESIGN_SCHEMA: &str = "rmstgst.design/v1";
pub const MONITORING_SCHEMA: &str = "rmstgst.monitoring/v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("information fraction must be non-negative, got {0}")]
    NegativeFraction(f64),
    #[error("information fractions must be strictly increasing in (0, 1]: {0:?}")]
    InvalidFractions(Vec<f64>),
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("invalid spending parameter: {0}")]
    InvalidParameter(String),
    #[error("non-increasing analysis time: u = {u} after {last}")]
    NonIncreasingTime { u: f64, last: f64 },
    #[error("monitoring already stopped with rejection at u = {0}")]
    AlreadyRejected(f64),
    #[error("total information must be positive, got {0}")]
    InvalidMaxInformation(f64),
    #[error("unsupported schema tag `{found}` (expected `{expected}`)")]
    Schema {
        expected: &'static str,
        found: String,
    },
    #[error("boundary search failed at stage {stage}: {reason}")]
    Boundary { stage: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    /// Reject for large positive `Z` only.
    OneSided,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpendingKind {
    /// `alpha * min(1, IF^3)`
    CubicMin,
    /// `alpha * min(1, IF)^rho`
    PowerFamily { rho: f64 },
    /// `2 - 2 Phi(z_{1 - alpha/2} / sqrt(IF))`
    ObrienFlemingLike,
    /// `alpha * ln(1 + (e - 1) IF)`
    PocockLike,
}

/// Cumulative alpha as a function of the information fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpendingFunction {
    pub kind: SpendingKind,
    pub alpha: f64,
    pub sidedness: Sidedness,
}

impl SpendingFunction {
    pub fn new(kind: SpendingKind, alpha: f64, sidedness: Sidedness) -> Result<Self, DesignError> {
        let f = Self {
            kind,
            alpha,
            sidedness,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn cubic(alpha: f64) -> Self {
        Self {
            kind: SpendingKind::CubicMin,
            alpha,
            sidedness: Sidedness::TwoSided,
        }
    }

    pub fn validate(&self) -> Result<(), DesignError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(DesignError::InvalidAlpha(self.alpha));
        }
        if let SpendingKind::PowerFamily { rho } = self.kind {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(DesignError::InvalidParameter(format!(
                    "rho must be positive, got {rho}"
                )));
            }
        }
        Ok(())
    }

    /// Cumulative alpha spent by information fraction `fraction`.
    pub fn spend(&self, fraction: f64) -> Result<f64, DesignError> {
        if fraction.is_nan() || fraction < 0.0 {
            return Err(DesignError::NegativeFraction(fraction));
        }
        let t = fraction.min(1.0);
        if t >= 1.0 {
            return Ok(self.alpha);
        }
        if t == 0.0 {
            return Ok(0.0);
        }
        let a = self.alpha;
        Ok(match self.kind {
            SpendingKind::CubicMin => a * t.powi(3),
            SpendingKind::PowerFamily { rho } => a * t.powf(rho),
            SpendingKind::ObrienFlemingLike => {
                2.0 * norm_sf(norm_quantile(1.0 - a / 2.0) / t.sqrt())
            }
            SpendingKind::PocockLike => a * (1.0 + (std::f64::consts::E - 1.0) * t).ln(),
        })
    }
}

/// Grid resolution for the recursive integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    pub nodes: usize,
    /// Half-width of the integration range, in standard deviations.
    pub span_sd: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            nodes: 301,
            span_sd: 8.0,
        }
    }
}

/// Critical values for a sequence of analyses. `None` marks a stage with no
/// alpha to spend, where rejection is impossible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySchedule {
    pub info_fractions: Vec<f64>,
    pub cumulative_spend: Vec<f64>,
    pub critical_values: Vec<Option<f64>>,
}

impl BoundarySchedule {
    pub fn stage_spend(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cumulative_spend
            .iter()
            .map(|&c| {
                let d = c - prev;
                prev = c;
                d
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Recursive integration engine
// ---------------------------------------------------------------------------

struct Continuation {
    t: f64,
    nodes: Vec<f64>,
    /// quadrature weight times sub-density
    mass: Vec<f64>,
}

fn crossing_given(
    prev: &Continuation,
    t: f64,
    drift: f64,
    c: Option<f64>,
    sides: Sidedness,
) -> f64 {
    let Some(c) = c else { return 0.0 };
    let dt = t - prev.t;
    let sd = (dt / t).sqrt();
    let slope = (prev.t / t).sqrt();
    let shift = drift * dt / t.sqrt();
    prev.nodes
        .iter()
        .zip(&prev.mass)
        .map(|(&z, &m)| {
            let mean = slope * z + shift;
            let upper = norm_sf((c - mean) / sd);
            let lower = match sides {
                Sidedness::TwoSided => norm_cdf((-c - mean) / sd),
                Sidedness::OneSided => 0.0,
            };
            m * (upper + lower)
        })
        .sum()
}

fn first_crossing(t: f64, drift: f64, c: Option<f64>, sides: Sidedness) -> f64 {
    let Some(c) = c else { return 0.0 };
    let mean = drift * t.sqrt();
    norm_sf(c - mean)
        + match sides {
            Sidedness::TwoSided => norm_cdf(-c - mean),
            Sidedness::OneSided => 0.0,
        }
}

fn continuation_range(mean: f64, c: Option<f64>, sides: Sidedness, span: f64) -> (f64, f64) {
    let mut lo = mean - span;
    let mut hi = mean + span;
    if let Some(c) = c {
        hi = hi.min(c);
        if sides == Sidedness::TwoSided {
            lo = lo.max(-c);
        }
    }
    (lo, hi)
}

/// Sub-density of `Z_k` on the continuation region at stage `k`.
fn propagate(
    prev: Option<&Continuation>,
    t: f64,
    next_t: Option<f64>,
    drift: f64,
    c: Option<f64>,
    sides: Sidedness,
    quad: &QuadratureConfig,
) -> Continuation {
    let mean = drift * t.sqrt();
    let (lo, hi) = continuation_range(mean, c, sides, quad.span_sd);
    if hi <= lo {
        return Continuation {
            t,
            nodes: Vec::new(),
            mass: Vec::new(),
        };
    }
    let max_width = next_t.map_or(1.0, |nt| ((nt - t) / t).sqrt().min(1.0));
    let grid = composite_gauss_legendre(lo, hi, panels_for(lo, hi, quad.nodes, max_width));
    let density: Vec<f64> = match prev {
        None => grid.nodes.iter().map(|&y| norm_pdf(y - mean)).collect(),
        Some(p) => {
            let dt = t - p.t;
            let sd = (dt / t).sqrt();
            let slope = (p.t / t).sqrt();
            let shift = drift * dt / t.sqrt();
            grid.nodes
                .iter()
                .map(|&y| {
                    p.nodes
                        .iter()
                        .zip(&p.mass)
                        .map(|(&z, &m)| m * norm_pdf((y - slope * z - shift) / sd))
                        .sum::<f64>()
                        / sd
                })
                .collect()
        }
    };
    let mass = density
        .iter()
        .zip(&grid.weights)
        .map(|(d, w)| d * w)
        .collect();
    Continuation {
        t,
        nodes: grid.nodes,
        mass,
    }
}

fn check_times(times: &[f64]) -> Result<(), DesignError> {
    let ok = !times.is_empty()
        && times.iter().all(|t| t.is_finite() && *t > 0.0)
        && times.windows(2).all(|w| w[1] > w[0]);
    if ok {
        Ok(())
    } else {
        Err(DesignError::InvalidFractions(times.to_vec()))
    }
}

/// Probability of a first crossing at each stage for given critical values
/// and drift `theta` (in units of `sqrt(information)`).
pub fn crossing_probabilities(
    info_times: &[f64],
    critical: &[Option<f64>],
    drift: f64,
    sides: Sidedness,
    quad: &QuadratureConfig,
) -> Result<Vec<f64>, DesignError> {
    check_times(info_times)?;
    let mut out = Vec::with_capacity(info_times.len());
    let mut cont: Option<Continuation> = None;
    for (k, (&t, &c)) in info_times.iter().zip(critical).enumerate() {
        let p = match &cont {
            None => first_crossing(t, drift, c, sides),
            Some(prev) => crossing_given(prev, t, drift, c, sides),
        };
        out.push(p);
        let next_t = info_times.get(k + 1).copied();
        if next_t.is_some() {
            cont = Some(propagate(cont.as_ref(), t, next_t, drift, c, sides, quad));
        }
    }
    Ok(out)
}

/// Critical values hitting the given cumulative spend at each stage.
///
/// `info_times` are information fractions (they may exceed 1 at a late
/// stage); `cumulative_spend` must be nondecreasing.
pub fn solve_boundaries(
    info_times: &[f64],
    cumulative_spend: &[f64],
    sides: Sidedness,
    quad: &QuadratureConfig,
) -> Result<Vec<Option<f64>>, DesignError> {
    check_times(info_times)?;
    let mut out = Vec::with_capacity(info_times.len());
    let mut cont: Option<Continuation> = None;
    let mut spent = 0.0;
    for (k, (&t, &target)) in info_times.iter().zip(cumulative_spend).enumerate() {
        let increment = target - spent;
        let c = if increment <= 1e-15 {
            warn!(
                "stage {} has no alpha to spend; boundary set to +inf",
                k + 1
            );
            None
        } else {
            let f = |c: f64| {
                let p = match &cont {
                    None => first_crossing(t, 0.0, Some(c), sides),
                    Some(prev) => crossing_given(prev, t, 0.0, Some(c), sides),
                };
                p - increment
            };
            let c = match &cont {
                None => {
                    let tail = match sides {
                        Sidedness::TwoSided => increment / 2.0,
                        Sidedness::OneSided => increment,
                    };
                    -norm_quantile(tail)
                }
                Some(_) => {
                    let hi = 40.0;
                    if f(0.0) < 0.0 {
                        return Err(DesignError::Boundary {
                            stage: k + 1,
                            reason: format!("remaining mass below stage increment {increment}"),
                        });
                    }
                    brent(f, 0.0, hi, 1e-12, 0.0, 200).map_err(|e| DesignError::Boundary {
                        stage: k + 1,
                        reason: e.to_string(),
                    })?
                }
            };
            spent = target;
            Some(c)
        };
        out.push(c);
        let next_t = info_times.get(k + 1).copied();
        if next_t.is_some() {
            cont = Some(propagate(cont.as_ref(), t, next_t, 0.0, c, sides, quad));
        }
    }
    Ok(out)
}

/// Design-time boundaries at planned information fractions.
pub fn boundaries(
    f: &SpendingFunction,
    info_fractions: &[f64],
    quad: &QuadratureConfig,
) -> Result<BoundarySchedule, DesignError> {
    f.validate()?;
    if info_fractions.iter().any(|&t| t > 1.0) {
        return Err(DesignError::InvalidFractions(info_fractions.to_vec()));
    }
    check_times(info_fractions)?;
    let cumulative_spend = info_fractions
        .iter()
        .map(|&t| f.spend(t))
        .collect::<Result<Vec<_>, _>>()?;
    let critical_values = solve_boundaries(info_fractions, &cumulative_spend, f.sidedness, quad)?;
    Ok(BoundarySchedule {
        info_fractions: info_fractions.to_vec(),
        cumulative_spend,
        critical_values,
    })
}

/// Boundaries re-spent on observed information fractions. When `last_is_final`
/// the last stage spends whatever alpha remains.
pub fn observed_boundaries(
    f: &SpendingFunction,
    info_fractions: &[f64],
    last_is_final: bool,
    quad: &QuadratureConfig,
) -> Result<BoundarySchedule, DesignError> {
    f.validate()?;
    check_times(info_fractions)?;
    let k = info_fractions.len();
    let cumulative_spend = info_fractions
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if last_is_final && i + 1 == k {
                Ok(f.alpha)
            } else {
                f.spend(t)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let critical_values = solve_boundaries(info_fractions, &cumulative_spend, f.sidedness, quad)?;
    Ok(BoundarySchedule {
        info_fractions: info_fractions.to_vec(),
        cumulative_spend,
        critical_values,
    })
}

/// Probability of rejecting by the last stage when the canonical drift is
/// `theta` (for an effect `delta`, `theta = delta * sqrt(I_max)`).
pub fn sequential_power(
    f: &SpendingFunction,
    info_fractions: &[f64],
    theta: f64,
    quad: &QuadratureConfig,
) -> Result<f64, DesignError> {
    let sched = observed_boundaries(f, info_fractions, true, quad)?;
    let probs = crossing_probabilities(
        info_fractions,
        &sched.critical_values,
        theta,
        f.sidedness,
        quad,
    )?;
    Ok(probs.iter().sum())
}

pub fn rejects(z: f64, critical: Option<f64>, sides: Sidedness) -> bool {
    match (critical, sides) {
        (None, _) => false,
        (Some(c), Sidedness::TwoSided) => z.abs() >= c,
        (Some(c), Sidedness::OneSided) => z >= c,
    }
}

// ---------------------------------------------------------------------------
// Monitoring state
// ---------------------------------------------------------------------------

fn design_schema() -> String {
    DESIGN_SCHEMA.to_string()
}

fn monitoring_schema() -> String {
    MONITORING_SCHEMA.to_string()
}

/// Design configuration as exchanged in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    #[serde(default = "design_schema")]
    pub schema: String,
    pub alpha: f64,
    pub sidedness: Sidedness,
    pub spending: SpendingKind,
    #[serde(default)]
    pub planned_fractions: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_max: Option<f64>,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
}

impl DesignConfig {
    pub fn new(spending: SpendingFunction, planned_fractions: Vec<f64>) -> Self {
        Self {
            schema: design_schema(),
            alpha: spending.alpha,
            sidedness: spending.sidedness,
            spending: spending.kind,
            planned_fractions,
            i_max: None,
            quadrature: QuadratureConfig::default(),
        }
    }

    pub fn spending_function(&self) -> SpendingFunction {
        SpendingFunction {
            kind: self.spending,
            alpha: self.alpha,
            sidedness: self.sidedness,
        }
    }

    pub fn validate(&self) -> Result<(), DesignError> {
        if self.schema != DESIGN_SCHEMA {
            return Err(DesignError::Schema {
                expected: DESIGN_SCHEMA,
                found: self.schema.clone(),
            });
        }
        self.spending_function().validate()?;
        if !self.planned_fractions.is_empty() {
            check_times(&self.planned_fractions)?;
            if self.planned_fractions.iter().any(|&t| t > 1.0) {
                return Err(DesignError::InvalidFractions(
                    self.planned_fractions.clone(),
                ));
            }
        }
        if let Some(i) = self.i_max {
            if !(i > 0.0 && i.is_finite()) {
                return Err(DesignError::InvalidMaxInformation(i));
            }
        }
        Ok(())
    }

    /// Design-time preview at the planned fractions.
    pub fn planned_boundaries(&self) -> Result<BoundarySchedule, DesignError> {
        boundaries(
            &self.spending_function(),
            &self.planned_fractions,
            &self.quadrature,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Continue,
    Reject,
    /// Information did not increase; no test performed.
    Skipped,
}

/// Statistic and information observed at one analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageObservation {
    pub u: f64,
    pub info_level: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub u: f64,
    pub info_level: f64,
    pub info_fraction: f64,
    pub z: f64,
    pub critical_value: Option<f64>,
    pub cumulative_spend: f64,
    pub is_final: bool,
    pub decision: Decision,
}

/// Persistent record of a monitored trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitoringState {
    #[serde(default = "monitoring_schema")]
    pub schema: String,
    pub design: DesignConfig,
    pub i_max: f64,
    pub analyses: Vec<AnalysisRecord>,
}

impl MonitoringState {
    pub fn new(design: DesignConfig, i_max: f64) -> Result<Self, DesignError> {
        design.validate()?;
        if !(i_max > 0.0 && i_max.is_finite()) {
            return Err(DesignError::InvalidMaxInformation(i_max));
        }
        Ok(Self {
            schema: monitoring_schema(),
            design,
            i_max,
            analyses: Vec::new(),
        })
    }

    pub fn validate(&self) -> Result<(), DesignError> {
        if self.schema != MONITORING_SCHEMA {
            return Err(DesignError::Schema {
                expected: MONITORING_SCHEMA,
                found: self.schema.clone(),
            });
        }
        self.design.validate()
    }

    pub fn rejected(&self) -> bool {
        self.analyses.iter().any(|a| a.decision == Decision::Reject)
    }

    pub fn last_u(&self) -> Option<f64> {
        self.analyses.last().map(|a| a.u)
    }

    /// Adds one analysis, re-deriving the current critical value from the
    /// observed information fractions so far.
    pub fn update(
        &self,
        obs: StageObservation,
        is_final: bool,
    ) -> Result<MonitoringState, DesignError> {
        if let Some(r) = self
            .analyses
            .iter()
            .find(|a| a.decision == Decision::Reject)
        {
            return Err(DesignError::AlreadyRejected(r.u));
        }
        if let Some(last) = self.last_u() {
            if obs.u <= last {
                return Err(DesignError::NonIncreasingTime { u: obs.u, last });
            }
        }
        let fraction = obs.info_level / self.i_max;
        let tested: Vec<&AnalysisRecord> = self
            .analyses
            .iter()
            .filter(|a| a.decision != Decision::Skipped)
            .collect();
        let prev_fraction = tested.last().map_or(0.0, |a| a.info_fraction);
        let mut next = self.clone();
        if !(fraction > prev_fraction) || !fraction.is_finite() {
            warn!("information did not increase at u = {} (IF {fraction} <= {prev_fraction}); stage skipped", obs.u);
            next.analyses.push(AnalysisRecord {
                u: obs.u,
                info_level: obs.info_level,
                info_fraction: fraction,
                z: obs.z,
                critical_value: None,
                cumulative_spend: tested.last().map_or(0.0, |a| a.cumulative_spend),
                is_final,
                decision: Decision::Skipped,
            });
            return Ok(next);
        }
        let mut times: Vec<f64> = tested.iter().map(|a| a.info_fraction).collect();
        times.push(fraction);
        let f = self.design.spending_function();
        let sched = observed_boundaries(&f, &times, is_final, &self.design.quadrature)?;
        let k = times.len() - 1;
        let c = sched.critical_values[k];
        let decision = if rejects(obs.z, c, f.sidedness) {
            Decision::Reject
        } else {
            Decision::Continue
        };
        next.analyses.push(AnalysisRecord {
            u: obs.u,
            info_level: obs.info_level,
            info_fraction: fraction,
            z: obs.z,
            critical_value: c,
            cumulative_spend: sched.cumulative_spend[k],
            is_final,
            decision,
        });
        Ok(next)
    }
}

/// Sequential update with an adjusted-RMST analysis result.
pub fn update_monitoring(
    state: &MonitoringState,
    result: &crate::adjusted_rmst::AdjustedRmstResult,
    is_final: bool,
) -> Result<MonitoringState, DesignError> {
    state.update(
        StageObservation {
            u: result.u,
            info_level: result.info_level,
            z: result.z,
        },
        is_final,
    )
}

/// All-stages computation: boundaries from every tested stage at once,
/// stopping at the first rejection. The last observation is the final one.
pub fn monolithic_decisions(
    design: &DesignConfig,
    i_max: f64,
    observations: &[StageObservation],
) -> Result<Vec<AnalysisRecord>, DesignError> {
    let f = design.spending_function();
    let mut kept: Vec<usize> = Vec::new();
    let mut times: Vec<f64> = Vec::new();
    for (i, o) in observations.iter().enumerate() {
        let t = o.info_level / i_max;
        if t.is_finite() && t > times.last().copied().unwrap_or(0.0) {
            kept.push(i);
            times.push(t);
        }
    }
    let last_is_final = kept.last() == Some(&(observations.len() - 1));
    let sched = if times.is_empty() {
        None
    } else {
        Some(observed_boundaries(
            &f,
            &times,
            last_is_final,
            &design.quadrature,
        )?)
    };
    let mut out = Vec::new();
    let mut spent = 0.0;
    for (i, o) in observations.iter().enumerate() {
        let is_final = i + 1 == observations.len();
        let fraction = o.info_level / i_max;
        let rec = match (kept.iter().position(|&j| j == i), &sched) {
            (Some(k), Some(s)) => {
                spent = s.cumulative_spend[k];
                let c = s.critical_values[k];
                AnalysisRecord {
                    u: o.u,
                    info_level: o.info_level,
                    info_fraction: fraction,
                    z: o.z,
                    critical_value: c,
                    cumulative_spend: spent,
                    is_final,
                    decision: if rejects(o.z, c, f.sidedness) {
                        Decision::Reject
                    } else {
                        Decision::Continue
                    },
                }
            }
            _ => AnalysisRecord {
                u: o.u,
                info_level: o.info_level,
                info_fraction: fraction,
                z: o.z,
                critical_value: None,
                cumulative_spend: spent,
                is_final,
                decision: Decision::Skipped,
            },
        };
        let stop = rec.decision == Decision::Reject;
        out.push(rec);
        if stop {
            break;
        }
    }
    Ok(out)
}
