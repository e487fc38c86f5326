//! Shared fixtures and independent oracles for the integration suites.
#![allow(dead_code)]

pub mod props;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rmstgst_core::adjusted_rmst;
use rmstgst_core::gs_design::Sidedness;
use rmstgst_core::sim_engine::{generate_trial, replicate_rng, CovariateSpec, SimScenario};
use rmstgst_core::stratified_cox::{self, CoxFit};
use rmstgst_core::trial_data::{Arm, Dataset, Snapshot, SnapshotSubject};

pub fn nph_scenario(phi: f64) -> SimScenario {
    SimScenario::delayed_effect(phi, CovariateSpec::StandardNormal { dim: 1 })
}

pub fn simulated(scn: &SimScenario, seed: u64) -> Dataset {
    generate_trial(scn, &mut replicate_rng(seed, 0))
}

pub fn subjects(rows: &[(usize, f64, bool, &[f64])]) -> Vec<SnapshotSubject> {
    rows.iter()
        .map(|&(a, t, e, z)| SnapshotSubject {
            arm: Arm::from_index(a).unwrap(),
            time: t,
            event: e,
            covariates: z.to_vec(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Cox oracles
// ---------------------------------------------------------------------------

/// Largest relative error of the analytic score against central differences
/// of the log partial likelihood.
pub fn score_fd_error(snap: &Snapshot, beta: &[f64], t_max: f64) -> f64 {
    let h = 1e-5;
    let si = stratified_cox::score_and_info(snap, beta, t_max).unwrap();
    let mut worst: f64 = 0.0;
    for j in 0..beta.len() {
        let mut up = beta.to_vec();
        let mut dn = beta.to_vec();
        up[j] += h;
        dn[j] -= h;
        let fd = (stratified_cox::log_partial_likelihood(snap, &up, t_max).unwrap()
            - stratified_cox::log_partial_likelihood(snap, &dn, t_max).unwrap())
            / (2.0 * h);
        worst = worst.max((fd - si.score[j]).abs() / si.score[j].abs().max(1.0));
    }
    worst
}

/// Largest relative error of the observed information against central
/// differences of the analytic score.
pub fn info_fd_error(snap: &Snapshot, beta: &[f64], t_max: f64) -> f64 {
    let h = 1e-5;
    let si = stratified_cox::score_and_info(snap, beta, t_max).unwrap();
    let scale = si.info.amax().max(1.0);
    let mut worst: f64 = 0.0;
    for k in 0..beta.len() {
        let mut up = beta.to_vec();
        let mut dn = beta.to_vec();
        up[k] += h;
        dn[k] -= h;
        let su = stratified_cox::score_and_info(snap, &up, t_max)
            .unwrap()
            .score;
        let sd = stratified_cox::score_and_info(snap, &dn, t_max)
            .unwrap()
            .score;
        for j in 0..beta.len() {
            let fd = -(su[j] - sd[j]) / (2.0 * h);
            worst = worst.max((fd - si.info[(j, k)]).abs() / scale);
        }
    }
    worst
}

/// Maximizer of the one-dimensional log partial likelihood by a coarse grid
/// over `[-8, 8]` followed by two refinements.
pub fn grid_argmax(snap: &Snapshot, t_max: f64) -> f64 {
    let ll = |b: f64| stratified_cox::log_partial_likelihood(snap, &[b], t_max).unwrap();
    let mut center = 0.0;
    let mut half: f64 = 8.0;
    for step in [1e-2f64, 1e-4, 1e-6] {
        let n = (2.0 * half / step).round() as i64;
        let mut best = (f64::NEG_INFINITY, center);
        for i in 0..=n {
            let b = center - half + i as f64 * step;
            let v = ll(b);
            if v > best.0 {
                best = (v, b);
            }
        }
        center = best.1;
        half = 2.0 * step;
    }
    center
}

// ---------------------------------------------------------------------------
// RMST oracle
// ---------------------------------------------------------------------------

/// Area under the adjusted curve computed from the definition: the curve is
/// evaluated directly from the Breslow baseline at the left end of every cell
/// of a dense grid that also contains each jump point.
pub fn dense_adjusted_rmst(fit: &CoxFit, snap: &Snapshot, arm: Arm, panels: usize) -> f64 {
    let tau = snap.tau();
    let base = fit.baseline(arm);
    let risks: Vec<f64> = snap
        .subjects()
        .iter()
        .map(|s| {
            s.covariates
                .iter()
                .zip(&fit.beta_hat)
                .map(|(z, b)| z * b)
                .sum::<f64>()
                .exp()
        })
        .collect();
    let surv = |t: f64| {
        let lam = base.value_at(t);
        risks.iter().map(|r| (-r * lam).exp()).sum::<f64>() / risks.len() as f64
    };
    let mut pts: Vec<f64> = (0..=panels)
        .map(|k| tau * k as f64 / panels as f64)
        .collect();
    pts.extend(base.times.iter().copied().filter(|&t| t < tau));
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts.windows(2).map(|w| surv(w[0]) * (w[1] - w[0])).sum()
}

pub fn adjusted_result(snap: &Snapshot) -> adjusted_rmst::AdjustedRmstResult {
    adjusted_rmst::analyze(snap, &Default::default()).unwrap()
}

// ---------------------------------------------------------------------------
// Boundary oracle
// ---------------------------------------------------------------------------

/// First-crossing frequencies of canonical standardized statistics by direct
/// simulation of the independent Brownian increments.
pub fn mc_crossing(
    times: &[f64],
    critical: &[Option<f64>],
    sides: Sidedness,
    draws: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = vec![0usize; times.len()];
    for _ in 0..draws {
        let mut s = 0.0;
        let mut prev = 0.0;
        for (k, (&t, c)) in times.iter().zip(critical).enumerate() {
            let w: f64 = rng.sample(StandardNormal);
            s += (t - prev).sqrt() * w;
            prev = t;
            let z = s / t.sqrt();
            let Some(c) = c else { continue };
            let crossed = match sides {
                Sidedness::TwoSided => z.abs() >= *c,
                Sidedness::OneSided => z >= *c,
            };
            if crossed {
                hits[k] += 1;
                break;
            }
        }
    }
    hits.into_iter().map(|h| h as f64 / draws as f64).collect()
}
