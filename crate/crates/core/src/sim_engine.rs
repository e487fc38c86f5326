//! Monte Carlo engine for Weibull trials with staggered entry.
//!
//! A subject with treatment indicator `Z_W` and covariates `Z` has survival
//! `exp(-gamma t^alpha)` with `alpha = alpha0 + alpha1 Z_W` and
//! `gamma = gamma0 exp(beta_W Z_W + beta^T Z)`. A nonzero `alpha1` makes the
//! treatment hazard ratio vary over time. The engine generates such trials,
//! calibrates the treatment effect and the information horizon, and
//! estimates operating characteristics of the adjusted RMST test and its two
//! comparators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjusted_rmst;
use crate::gs_design::{
    monolithic_decisions, sequential_power, Decision, DesignConfig, DesignError, QuadratureConfig,
    SpendingFunction, StageObservation,
};
use crate::km_rmst::km_rmst_test;
use crate::numerics::{brent, integrate_adaptive, NormalExpectation, RootError};
use crate::stratified_cox::{self, CoxOptions};
use crate::trial_data::{Arm, Dataset, Snapshot, SubjectRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("root finding failed: {0}")]
    Root(#[from] RootError),
    #[error("estimated information trajectory is not increasing near u = {u}; increase the replicate count")]
    NonMonotone { u: f64 },
    #[error("no replicate produced an analysis at u = {0}")]
    NoAnalyses(f64),
    #[error("target information fraction {0} not reached on the calibration grid")]
    FractionOutOfRange(f64),
    #[error(transparent)]
    Design(#[from] DesignError),
}

/// Annual censoring hazard giving 5% censoring per year.
pub fn five_percent_per_year() -> f64 {
    -(0.95f64.ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateSpec {
    /// No baseline covariates.
    None,
    /// Independent standard normal covariates.
    StandardNormal { dim: usize },
    /// `(B - q) / sqrt(q (1 - q))` for independent `B ~ Bernoulli(q)`.
    StandardizedBernoulli { probs: Vec<f64> },
}

impl CovariateSpec {
    pub fn dim(&self) -> usize {
        match self {
            CovariateSpec::None => 0,
            CovariateSpec::StandardNormal { dim } => *dim,
            CovariateSpec::StandardizedBernoulli { probs } => probs.len(),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            CovariateSpec::None => Vec::new(),
            CovariateSpec::StandardNormal { dim } => {
                (0..*dim).map(|_| rng.sample(StandardNormal)).collect()
            }
            CovariateSpec::StandardizedBernoulli { probs } => probs
                .iter()
                .map(|&q| {
                    let b = if rng.random::<f64>() < q { 1.0 } else { 0.0 };
                    (b - q) / (q * (1.0 - q)).sqrt()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Censoring {
    None,
    Exponential { rate: f64 },
}

fn default_fractions() -> Vec<f64> {
    vec![0.5, 0.75, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub alpha0: f64,
    pub alpha1: f64,
    pub gamma0: f64,
    pub beta_w: f64,
    /// Overall covariate influence; each coefficient is `phi / sqrt(p)`.
    pub phi: f64,
    pub covariates: CovariateSpec,
    pub n_per_arm: usize,
    pub tau: f64,
    /// Accrual period `A`; entry is uniform on `[0, A]`.
    pub accrual: f64,
    pub censoring: Censoring,
    #[serde(default = "default_fractions")]
    pub analysis_fractions: Vec<f64>,
}

impl SimScenario {
    /// Delayed-effect Weibull setting with 200 subjects per arm, `tau = 1`,
    /// two years of accrual and 5% censoring per year. `beta_w` starts at 0.
    pub fn delayed_effect(phi: f64, covariates: CovariateSpec) -> Self {
        Self {
            alpha0: 1.5,
            alpha1: -0.3,
            gamma0: -(0.4f64.ln()),
            beta_w: 0.0,
            phi,
            covariates,
            n_per_arm: 200,
            tau: 1.0,
            accrual: 2.0,
            censoring: Censoring::Exponential {
                rate: five_percent_per_year(),
            },
            analysis_fractions: default_fractions(),
        }
    }

    pub fn with_beta_w(&self, beta_w: f64) -> Self {
        Self {
            beta_w,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if !(self.alpha0 > 0.0) || !(self.alpha0 + self.alpha1 > 0.0) {
            return bad(format!(
                "Weibull shapes must be positive (alpha0 = {}, alpha1 = {})",
                self.alpha0, self.alpha1
            ));
        }
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return bad(format!("gamma0 must be positive, got {}", self.gamma0));
        }
        if !self.beta_w.is_finite() || !self.phi.is_finite() {
            return bad("beta_w and phi must be finite".into());
        }
        if self.n_per_arm == 0 {
            return bad("n_per_arm must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.accrual >= 0.0) {
            return bad(format!(
                "need tau > 0 and accrual >= 0 (tau = {}, accrual = {})",
                self.tau, self.accrual
            ));
        }
        if let CovariateSpec::StandardizedBernoulli { probs } = &self.covariates {
            if probs.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
                return bad(format!(
                    "Bernoulli probabilities must lie in (0, 1): {probs:?}"
                ));
            }
        }
        if let Censoring::Exponential { rate } = self.censoring {
            if !(rate > 0.0 && rate.is_finite()) {
                return bad(format!("censoring rate must be positive, got {rate}"));
            }
        }
        let f = &self.analysis_fractions;
        if f.is_empty()
            || f.iter().any(|&x| !(x > 0.0 && x <= 1.0))
            || f.windows(2).any(|w| w[1] <= w[0])
        {
            return bad(format!(
                "analysis fractions must increase within (0, 1]: {f:?}"
            ));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.covariates.dim()
    }

    /// Study length `L = tau + A`.
    pub fn study_length(&self) -> f64 {
        self.tau + self.accrual
    }

    pub fn beta(&self) -> Vec<f64> {
        let p = self.p();
        vec![self.phi / (p.max(1) as f64).sqrt(); p]
    }

    fn shape(&self, arm: Arm) -> f64 {
        self.alpha0 + self.alpha1 * arm.indicator()
    }

    fn rate(&self, arm: Arm, lp: f64) -> f64 {
        self.gamma0 * (self.beta_w * arm.indicator() + lp).exp()
    }

    /// Linear-predictor distribution as `(beta^T Z, probability)` pairs.
    fn linear_predictor_support(&self) -> Vec<(f64, f64)> {
        match &self.covariates {
            CovariateSpec::None => vec![(0.0, 1.0)],
            CovariateSpec::StandardNormal { dim: 0 } => vec![(0.0, 1.0)],
            // equal coefficients phi/sqrt(p): beta^T Z ~ N(0, phi^2)
            CovariateSpec::StandardNormal { .. } => NormalExpectation::new(64)
                .points()
                .iter()
                .map(|&(z, w)| (self.phi * z, w))
                .collect(),
            CovariateSpec::StandardizedBernoulli { probs } => {
                let b = self.phi / (probs.len() as f64).sqrt();
                let mut support = vec![(0.0, 1.0)];
                for &q in probs {
                    let s = (q * (1.0 - q)).sqrt();
                    let hi = b * (1.0 - q) / s;
                    let lo = -b * q / s;
                    support = support
                        .iter()
                        .flat_map(|&(lp, w)| [(lp + hi, w * q), (lp + lo, w * (1.0 - q))])
                        .collect();
                }
                support
            }
        }
    }

    fn censoring_survival(&self, t: f64) -> f64 {
        match self.censoring {
            Censoring::None => 1.0,
            Censoring::Exponential { rate } => (-rate * t).exp(),
        }
    }
}

// ---------------------------------------------------------------------------
// Data generation
// ---------------------------------------------------------------------------

/// Replicate-indexed generator: the master seed fixes the key and the
/// replicate index selects a disjoint ChaCha stream.
pub fn replicate_rng(master_seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replicate);
    rng
}

pub fn draw_subject<R: Rng + ?Sized>(
    scn: &SimScenario,
    arm: Arm,
    id: String,
    rng: &mut R,
) -> SubjectRecord {
    let covariates = scn.covariates.draw(rng);
    let lp: f64 = scn.beta().iter().zip(&covariates).map(|(b, z)| b * z).sum();
    let e1: f64 = rng.sample(Exp1);
    let t = weibull_inverse(e1, scn.shape(arm), scn.rate(arm, lp));
    let c = match scn.censoring {
        Censoring::None => f64::INFINITY,
        Censoring::Exponential { rate } => Exp::new(rate).expect("validated rate").sample(rng),
    };
    let entry_time = rng.random::<f64>() * scn.accrual;
    SubjectRecord {
        id,
        arm,
        entry_time,
        followup_time: t.min(c),
        event: t <= c,
        covariates,
    }
}

/// Event time with cumulative hazard `gamma t^alpha` equal to `e1`.
pub fn weibull_inverse(e1: f64, alpha: f64, gamma: f64) -> f64 {
    (e1 / gamma).powf(1.0 / alpha)
}

/// One trial with `n_per_arm` subjects per arm, locked at the study length.
pub fn generate_trial<R: Rng + ?Sized>(scn: &SimScenario, rng: &mut R) -> Dataset {
    let mut records = Vec::with_capacity(2 * scn.n_per_arm);
    for arm in Arm::BOTH {
        for i in 0..scn.n_per_arm {
            records.push(draw_subject(
                scn,
                arm,
                format!("{}{}", ["c", "t"][arm.index()], i + 1),
                rng,
            ));
        }
    }
    let ds = Dataset::new(records).expect("simulated records are valid");
    let lock = ds.lock_time().max(scn.study_length());
    ds.with_lock_time(lock).expect("lock not earlier than data")
}

// ---------------------------------------------------------------------------
// True quantities
// ---------------------------------------------------------------------------

/// Marginal survival of an arm, averaging over the covariate distribution.
pub fn marginal_survival(scn: &SimScenario, arm: Arm, t: f64) -> f64 {
    let a = scn.shape(arm);
    let ta = t.powf(a);
    scn.linear_predictor_support()
        .iter()
        .map(|&(lp, w)| w * (-scn.rate(arm, lp) * ta).exp())
        .sum()
}

/// `mu_i(tau) = integral_0^tau E_Z[S(t | Z)] dt`.
pub fn true_rmst(scn: &SimScenario, arm: Arm, tau: f64) -> f64 {
    let support = scn.linear_predictor_support();
    let a = scn.shape(arm);
    let rates: Vec<(f64, f64)> = support
        .iter()
        .map(|&(lp, w)| (scn.rate(arm, lp), w))
        .collect();
    let f = |t: f64| {
        let ta = t.powf(a);
        rates.iter().map(|&(g, w)| w * (-g * ta).exp()).sum::<f64>()
    };
    integrate_adaptive(f, 0.0, tau, 1e-11)
}

pub fn true_rmst_difference(scn: &SimScenario) -> f64 {
    true_rmst(scn, Arm::Treatment, scn.tau) - true_rmst(scn, Arm::Control, scn.tau)
}

/// Treatment effect `beta_W0` at which the two arms have equal RMST.
pub fn calibrate_null(scn: &SimScenario) -> Result<f64, SimError> {
    scn.validate()?;
    if scn.alpha1 == 0.0 {
        return Ok(0.0);
    }
    let g = |b: f64| true_rmst_difference(&scn.with_beta_w(b));
    Ok(brent(g, -5.0, 5.0, 1e-13, 1e-10, 200)?)
}

/// Treatment effect giving an RMST difference of `delta`.
pub fn solve_beta_for_gap(scn: &SimScenario, delta: f64) -> Result<f64, SimError> {
    let g = |b: f64| true_rmst_difference(&scn.with_beta_w(b)) - delta;
    Ok(brent(g, -5.0, 5.0, 1e-13, 1e-9, 200)?)
}

/// Time-averaged hazard ratio and the weighting used to compute it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageHazardRatio {
    pub value: f64,
    /// Expected proportion of subjects with an observed event on `[0, tau]`.
    pub total_weight: f64,
}

impl AverageHazardRatio {
    pub const WEIGHTING: &'static str =
        "HR(t) = (alpha0+alpha1)/alpha0 * exp(beta_W) * t^alpha1 averaged over [0, tau] \
        with weight proportional to the expected density of observed events, pooled over both arms \
        (equal allocation) and the covariate distribution, including censoring";
}

/// Event-weighted mean of the time-varying treatment hazard ratio.
pub fn average_hazard_ratio(scn: &SimScenario) -> AverageHazardRatio {
    let support = scn.linear_predictor_support();
    let density = |t: f64| -> f64 {
        let mut total = 0.0;
        for arm in Arm::BOTH {
            let a = scn.shape(arm);
            let ta = t.powf(a);
            let dta = a * t.powf(a - 1.0);
            for &(lp, w) in &support {
                let g = scn.rate(arm, lp);
                total += 0.5 * w * g * dta * (-g * ta).exp();
            }
        }
        total * scn.censoring_survival(t)
    };
    let hr =
        |t: f64| (scn.alpha0 + scn.alpha1) / scn.alpha0 * scn.beta_w.exp() * t.powf(scn.alpha1);
    let num = integrate_adaptive(|t| hr(t) * density(t), 0.0, scn.tau, 1e-12);
    let den = integrate_adaptive(density, 0.0, scn.tau, 1e-12);
    AverageHazardRatio {
        value: num / den,
        total_weight: den,
    }
}

/// One row of the survival and hazard-ratio curve table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub t: f64,
    pub survival_control: f64,
    pub survival_treatment: f64,
    pub hazard_ratio: f64,
}

/// Marginal survival curves and the hazard ratio on an even grid of `[0, t_end]`.
pub fn curve_table(scn: &SimScenario, t_end: f64, points: usize) -> Vec<CurveRow> {
    let points = points.max(2);
    (0..points)
        .map(|k| {
            let t = t_end * k as f64 / (points - 1) as f64;
            let hazard_ratio = if t > 0.0 {
                (scn.alpha0 + scn.alpha1) / scn.alpha0 * scn.beta_w.exp() * t.powf(scn.alpha1)
            } else if scn.alpha1 < 0.0 {
                f64::INFINITY
            } else if scn.alpha1 > 0.0 {
                0.0
            } else {
                scn.beta_w.exp()
            };
            CurveRow {
                t,
                survival_control: marginal_survival(scn, Arm::Control, t),
                survival_treatment: marginal_survival(scn, Arm::Treatment, t),
                hazard_ratio,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Per-replicate analyses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    AdjustedRmst,
    KmRmst,
    CoxHr,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::AdjustedRmst, Method::KmRmst, Method::CoxHr];

    pub fn name(self) -> &'static str {
        match self {
            Method::AdjustedRmst => "adjusted_rmst",
            Method::KmRmst => "km_rmst",
            Method::CoxHr => "cox_hr",
        }
    }
}

/// Estimate and Wald statistic from one method at one analysis. For the
/// Cox comparator `estimate` is `-beta_W`, so positive values favour
/// treatment for every method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStat {
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub info: f64,
}

/// Unstratified Cox model with the treatment indicator and all covariates,
/// restricted to follow-up `min(u, tau)`; Wald test of the treatment term.
pub fn cox_hr_test(snap: &Snapshot) -> Option<StageStat> {
    let pooled = snap.pooled_with_treatment();
    let fit = stratified_cox::fit(&pooled, &CoxOptions::default()).ok()?;
    let var = fit.covariance()?[(0, 0)];
    if !(var > 0.0 && var.is_finite()) {
        return None;
    }
    let se = var.sqrt();
    let estimate = -fit.beta_hat[0];
    Some(StageStat {
        estimate,
        se,
        z: estimate / se,
        info: 1.0 / var,
    })
}

pub fn analyze_method(snap: &Snapshot, method: Method) -> Option<StageStat> {
    match method {
        Method::AdjustedRmst => adjusted_rmst::analyze(snap, &CoxOptions::default())
            .ok()
            .map(|r| StageStat {
                estimate: r.delta_hat,
                se: r.se,
                z: r.z,
                info: r.info_level,
            }),
        Method::KmRmst => km_rmst_test(snap).ok().map(|r| StageStat {
            estimate: r.delta_hat,
            se: r.se,
            z: r.z,
            info: r.info_level,
        }),
        Method::CoxHr => cox_hr_test(snap),
    }
}

/// Per-stage statistics of one simulated trial; `None` marks a failed analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateTrace {
    pub replicate: u64,
    pub analysis_times: Vec<f64>,
    pub methods: Vec<Method>,
    /// `stats[m][k]` for method `methods[m]` at `analysis_times[k]`.
    pub stats: Vec<Vec<Option<StageStat>>>,
}

impl ReplicateTrace {
    pub fn method(&self, m: Method) -> Option<&[Option<StageStat>]> {
        self.methods
            .iter()
            .position(|&x| x == m)
            .map(|i| self.stats[i].as_slice())
    }
}

pub fn simulate_replicate(
    scn: &SimScenario,
    analysis_times: &[f64],
    methods: &[Method],
    master_seed: u64,
    replicate: u64,
) -> ReplicateTrace {
    let mut rng = replicate_rng(master_seed, replicate);
    let ds = generate_trial(scn, &mut rng);
    let snaps: Vec<Option<Snapshot>> = analysis_times
        .iter()
        .map(|&u| ds.snapshot(u, scn.tau).ok())
        .collect();
    let stats = methods
        .iter()
        .map(|&m| {
            snaps
                .iter()
                .map(|s| s.as_ref().and_then(|s| analyze_method(s, m)))
                .collect()
        })
        .collect();
    ReplicateTrace {
        replicate,
        analysis_times: analysis_times.to_vec(),
        methods: methods.to_vec(),
        stats,
    }
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Monte Carlo information trajectory and derived analysis calendar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationCalibration {
    pub reps: usize,
    pub master_seed: u64,
    /// Calendar grid, increasing, ending at the study length.
    pub grid: Vec<f64>,
    /// Mean adjusted-RMST information at each grid point.
    pub mean_info: Vec<f64>,
    /// Failed analyses at each grid point.
    pub failures: Vec<usize>,
    /// Mean information at the study length for each method.
    pub i_max: Vec<(Method, f64)>,
    pub fractions: Vec<f64>,
    pub analysis_times: Vec<f64>,
}

impl InformationCalibration {
    pub fn i_max_for(&self, m: Method) -> Option<f64> {
        self.i_max.iter().find(|(x, _)| *x == m).map(|&(_, v)| v)
    }
}

fn mean_information(
    scn: &SimScenario,
    u: f64,
    method: Method,
    reps: usize,
    master_seed: u64,
) -> (f64, usize) {
    let vals: Vec<Option<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(master_seed, r);
            let ds = generate_trial(scn, &mut rng);
            let snap = ds.snapshot(u, scn.tau).ok()?;
            analyze_method(&snap, method).map(|s| s.info)
        })
        .collect();
    let ok: Vec<f64> = vals.iter().flatten().copied().collect();
    let failures = reps - ok.len();
    if ok.is_empty() {
        return (f64::NAN, failures);
    }
    (ok.iter().sum::<f64>() / ok.len() as f64, failures)
}

/// Estimates `I_max` (mean information at `u = L`) for each method and the
/// calendar times at which the adjusted test is expected to reach the
/// scenario's information fractions. The trajectory is evaluated on a
/// 0.1-year grid walking back from `L`.
pub fn calibrate_information(
    scn: &SimScenario,
    methods: &[Method],
    reps: usize,
    master_seed: u64,
) -> Result<InformationCalibration, SimError> {
    scn.validate()?;
    let l = scn.study_length();
    let mut i_max = Vec::new();
    for &m in methods.iter().chain(std::iter::once(&Method::AdjustedRmst)) {
        if i_max.iter().any(|(x, _): &(Method, f64)| *x == m) {
            continue;
        }
        let (v, _) = mean_information(scn, l, m, reps, master_seed);
        if !v.is_finite() {
            return Err(SimError::NoAnalyses(l));
        }
        i_max.push((m, v));
    }
    let top = i_max
        .iter()
        .find(|(m, _)| *m == Method::AdjustedRmst)
        .unwrap()
        .1;
    let lowest = scn.analysis_fractions[0];
    let mut grid = vec![l];
    let mut mean_info = vec![top];
    let mut failures = vec![0];
    let step = 0.1;
    let mut k = 1;
    loop {
        let u = l - step * k as f64;
        if u <= 1e-9 {
            break;
        }
        let (v, f) = mean_information(scn, u, Method::AdjustedRmst, reps, master_seed);
        if !v.is_finite() {
            break;
        }
        grid.push(u);
        mean_info.push(v);
        failures.push(f);
        if v < lowest * top {
            break;
        }
        k += 1;
    }
    grid.reverse();
    mean_info.reverse();
    failures.reverse();
    // the trajectory is flat near L, where only late entrants still gain
    // follow-up; refuse only decreases beyond Monte Carlo noise
    let slack = 5e-3 * top;
    for w in 0..grid.len().saturating_sub(1) {
        if mean_info[w + 1] < mean_info[w] - slack {
            return Err(SimError::NonMonotone { u: grid[w + 1] });
        }
    }
    let analysis_times = scn
        .analysis_fractions
        .iter()
        .map(|&f| {
            invert_trajectory(&grid, &mean_info, f * top).ok_or(SimError::FractionOutOfRange(f))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(InformationCalibration {
        reps,
        master_seed,
        grid,
        mean_info,
        failures,
        i_max,
        fractions: scn.analysis_fractions.clone(),
        analysis_times,
    })
}

/// Linear interpolation of an increasing trajectory.
fn invert_trajectory(grid: &[f64], info: &[f64], target: f64) -> Option<f64> {
    let last = *info.last()?;
    if (target - last).abs() <= 1e-12 * last.abs() {
        return grid.last().copied();
    }
    let k = info.iter().position(|&v| v >= target)?;
    if k == 0 {
        return None;
    }
    let (u0, u1, i0, i1) = (grid[k - 1], grid[k], info[k - 1], info[k]);
    Some(u0 + (target - i0) / (i1 - i0) * (u1 - u0))
}

/// Outcome of the power calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCalibration {
    pub beta_w0: f64,
    pub beta_delta: f64,
    pub delta: f64,
    /// Canonical drift `delta * sqrt(I_max)` giving the target power.
    pub drift: f64,
    pub i_max: f64,
    /// Information calibration of the final alternative, for every method.
    pub information: InformationCalibration,
}

/// Drift `theta` at which the group sequential test has power `target`.
pub fn drift_for_power(
    design: &SpendingFunction,
    fractions: &[f64],
    target: f64,
) -> Result<f64, SimError> {
    let quad = QuadratureConfig::default();
    let mut err = None;
    let f = |theta: f64| match sequential_power(design, fractions, theta, &quad) {
        Ok(p) => p - target,
        Err(e) => {
            err = Some(e);
            f64::NAN
        }
    };
    let theta = brent(f, 0.0, 12.0, 1e-10, 1e-9, 200);
    if let Some(e) = err {
        return Err(e.into());
    }
    Ok(theta?)
}

/// Effect size `beta_delta` reaching `target` power.
///
/// The RMST gap is `delta = theta / sqrt(I_max)`, where `theta` is the drift
/// giving the target power for the group sequential design at the planned
/// fractions and `I_max` is the Monte Carlo information of the adjusted test
/// under the alternative. Because `I_max` depends on the effect, the
/// calibration alternates between the two `rounds` times.
pub fn calibrate_power(
    scn: &SimScenario,
    design: &SpendingFunction,
    target_power: f64,
    methods: &[Method],
    reps: usize,
    master_seed: u64,
    rounds: usize,
) -> Result<PowerCalibration, SimError> {
    let beta_w0 = calibrate_null(scn)?;
    let drift = drift_for_power(design, &scn.analysis_fractions, target_power)?;
    let mut current = scn.with_beta_w(beta_w0);
    let mut info = calibrate_information(&current, &[Method::AdjustedRmst], reps, master_seed)?;
    let mut delta = 0.0;
    let mut beta_delta = beta_w0;
    let rounds = rounds.max(1);
    for round in 0..rounds {
        let i_max = info.i_max_for(Method::AdjustedRmst).unwrap();
        delta = drift / i_max.sqrt();
        beta_delta = if delta == 0.0 {
            beta_w0
        } else {
            solve_beta_for_gap(scn, delta)?
        };
        current = scn.with_beta_w(beta_delta);
        let wanted = if round + 1 == rounds {
            methods
        } else {
            &[Method::AdjustedRmst][..]
        };
        info = calibrate_information(&current, wanted, reps, master_seed)?;
    }
    let i_max = info.i_max_for(Method::AdjustedRmst).unwrap();
    Ok(PowerCalibration {
        beta_w0,
        beta_delta,
        delta,
        drift,
        i_max,
        information: info,
    })
}

// ---------------------------------------------------------------------------
// Operating characteristics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCharacteristics {
    pub method: Method,
    pub i_max: f64,
    /// Cumulative rejection rate by stage.
    pub cumulative_rejection: Vec<f64>,
    pub mc_se: Vec<f64>,
    /// Stage analyses that could not be computed.
    pub failed_analyses: usize,
    /// Stages skipped because information did not increase.
    pub skipped_stages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingCharacteristics {
    pub reps: usize,
    pub master_seed: u64,
    pub analysis_times: Vec<f64>,
    pub methods: Vec<MethodCharacteristics>,
    #[serde(skip)]
    pub traces: Vec<ReplicateTrace>,
}

impl OperatingCharacteristics {
    pub fn method(&self, m: Method) -> Option<&MethodCharacteristics> {
        self.methods.iter().find(|x| x.method == m)
    }

    /// Tidy CSV: `method,stage,u,cumulative_rejection,mc_se`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,stage,u,cumulative_rejection,mc_se\n");
        for m in &self.methods {
            for (k, (r, se)) in m.cumulative_rejection.iter().zip(&m.mc_se).enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    m.method.name(),
                    k + 1,
                    self.analysis_times[k],
                    r,
                    se
                ));
            }
        }
        out
    }
}

/// First stage (0-based) at which a method's sequence of stage statistics
/// rejects, re-spending alpha on observed information fractions.
pub fn first_rejection(
    design: &DesignConfig,
    i_max: f64,
    analysis_times: &[f64],
    stats: &[Option<StageStat>],
) -> Result<(Option<usize>, usize), DesignError> {
    // failed analyses carry no information and are skipped like flat ones
    let obs: Vec<StageObservation> = analysis_times
        .iter()
        .zip(stats)
        .map(|(&u, s)| match s {
            Some(s) => StageObservation {
                u,
                info_level: s.info,
                z: s.z,
            },
            None => StageObservation {
                u,
                info_level: f64::NAN,
                z: 0.0,
            },
        })
        .collect();
    let records = monolithic_decisions(design, i_max, &obs)?;
    let skipped = records
        .iter()
        .filter(|r| r.decision == Decision::Skipped)
        .count();
    Ok((
        records.iter().position(|r| r.decision == Decision::Reject),
        skipped,
    ))
}

/// Simulates `reps` trials, analyses each at the calibrated calendar times
/// with every requested method and records the first rejection stage.
/// Results depend only on the inputs and `master_seed`.
pub fn run_study(
    scn: &SimScenario,
    design: &SpendingFunction,
    calibration: &InformationCalibration,
    methods: &[Method],
    reps: usize,
    master_seed: u64,
) -> Result<OperatingCharacteristics, SimError> {
    scn.validate()?;
    let times = calibration.analysis_times.clone();
    let config = DesignConfig::new(*design, calibration.fractions.clone());
    let traces: Vec<ReplicateTrace> = (0..reps as u64)
        .into_par_iter()
        .map(|r| simulate_replicate(scn, &times, methods, master_seed, r))
        .collect();
    let k = times.len();
    let mut out = Vec::new();
    for (mi, &m) in methods.iter().enumerate() {
        let i_max = calibration.i_max_for(m).ok_or_else(|| {
            SimError::InvalidScenario(format!("no I_max calibrated for {}", m.name()))
        })?;
        let outcomes: Vec<(Option<usize>, usize)> = traces
            .par_iter()
            .map(|tr| first_rejection(&config, i_max, &times, &tr.stats[mi]))
            .collect::<Result<_, _>>()?;
        let mut counts = vec![0usize; k];
        let mut skipped = 0;
        for (stage, s) in &outcomes {
            if let Some(st) = stage {
                counts[*st] += 1;
            }
            skipped += s;
        }
        let failed = traces
            .iter()
            .map(|t| t.stats[mi].iter().filter(|s| s.is_none()).count())
            .sum();
        let mut cum = 0usize;
        let mut rates = Vec::with_capacity(k);
        let mut ses = Vec::with_capacity(k);
        for c in counts {
            cum += c;
            let p = cum as f64 / reps as f64;
            rates.push(p);
            ses.push((p * (1.0 - p) / reps as f64).sqrt());
        }
        out.push(MethodCharacteristics {
            method: m,
            i_max,
            cumulative_rejection: rates,
            mc_se: ses,
            failed_analyses: failed,
            skipped_stages: skipped,
        });
    }
    Ok(OperatingCharacteristics {
        reps,
        master_seed,
        analysis_times: times,
        methods: out,
        traces,
    })
}
