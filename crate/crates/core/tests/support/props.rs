//! Randomized property checks. Each runs a proptest runner with the given
//! number of cases and reports the first minimal failure as a string, so the
//! same checks serve the property suite and the acceptance summary.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use rmstgst_core::adjusted_rmst;
use rmstgst_core::gs_design::{
    boundaries, crossing_probabilities, monolithic_decisions, Decision, DesignConfig,
    MonitoringState, QuadratureConfig, Sidedness, SpendingFunction, SpendingKind, StageObservation,
};
use rmstgst_core::km_rmst::km_fit;
use rmstgst_core::sim_engine::{
    generate_trial, replicate_rng, simulate_replicate, CovariateSpec, Method, SimScenario,
};
use rmstgst_core::stratified_cox::{self, CoxOptions};
use rmstgst_core::trial_data::{Arm, Dataset, SubjectRecord};

type Check = fn(u32) -> Result<(), String>;

pub const ALL: &[(&str, Check)] = &[
    ("spending_monotone_and_clamped", spending_monotone),
    ("boundary_crossing_reproduces_spend", boundary_validity),
    (
        "monitoring_consistent_with_boundaries",
        monitoring_consistency,
    ),
    ("km_curve_ranges", km_ranges),
    ("adjusted_estimates_and_variance_ranges", adjusted_ranges),
    ("cox_score_vanishes_at_fit", cox_stationary),
    ("snapshot_idempotence", snapshot_idempotence),
    ("serialization_round_trips", serialization),
    ("seed_determinism", seed_determinism),
];

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn spending_kind() -> impl Strategy<Value = SpendingKind> {
    prop_oneof![
        Just(SpendingKind::CubicMin),
        (0.5f64..5.0).prop_map(|rho| SpendingKind::PowerFamily { rho }),
        Just(SpendingKind::ObrienFlemingLike),
        Just(SpendingKind::PocockLike),
    ]
}

fn sides() -> impl Strategy<Value = Sidedness> {
    prop_oneof![Just(Sidedness::TwoSided), Just(Sidedness::OneSided)]
}

/// Strictly increasing fractions in (0, 1] with gaps of at least 0.01.
fn fractions(max_stages: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, 1..=max_stages).prop_map(|mut v| {
        v.sort_by(f64::total_cmp);
        let mut out: Vec<f64> = Vec::new();
        for x in v {
            if out.last().is_none_or(|&l| x - l >= 0.01) {
                out.push(x);
            }
        }
        out
    })
}

pub fn spending_monotone(cases: u32) -> Result<(), String> {
    run(
        cases,
        (spending_kind(), 0.001f64..0.3, 0.0f64..1.5, 0.0f64..1.5),
        |(kind, alpha, a, b)| {
            let f = SpendingFunction {
                kind,
                alpha,
                sidedness: Sidedness::TwoSided,
            };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (sl, sh) = (f.spend(lo).unwrap(), f.spend(hi).unwrap());
            prop_assert!(sl <= sh + 1e-15);
            prop_assert!((0.0..=alpha).contains(&sl) && sh <= alpha);
            prop_assert_eq!(f.spend(0.0).unwrap(), 0.0);
            prop_assert_eq!(f.spend(1.0 + hi).unwrap(), alpha);
            prop_assert!(f.spend(-1e-3 - lo).is_err());
            Ok(())
        },
    )
}

pub fn boundary_validity(cases: u32) -> Result<(), String> {
    let quad = QuadratureConfig::default();
    run(
        cases,
        (spending_kind(), 0.005f64..0.2, sides(), fractions(4)),
        |(kind, alpha, sidedness, fr)| {
            let f = SpendingFunction {
                kind,
                alpha,
                sidedness,
            };
            let s = boundaries(&f, &fr, &quad).unwrap();
            for c in s.critical_values.iter().flatten() {
                prop_assert!(c.is_finite() && *c > 0.0);
            }
            prop_assert!(s.cumulative_spend.windows(2).all(|w| w[1] >= w[0]));
            let p = crossing_probabilities(&fr, &s.critical_values, 0.0, sidedness, &quad).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!(
                (total - f.spend(*fr.last().unwrap()).unwrap()).abs() < 1e-4,
                "{total} vs {:?}",
                s.cumulative_spend
            );
            Ok(())
        },
    )
}

pub fn monitoring_consistency(cases: u32) -> Result<(), String> {
    let strat = (
        spending_kind(),
        sides(),
        prop::collection::vec((0.05f64..0.5, -4.0f64..4.0), 1..5),
        50.0f64..500.0,
    );
    run(cases, strat, |(kind, sidedness, steps, i_max)| {
        let design = DesignConfig::new(
            SpendingFunction {
                kind,
                alpha: 0.05,
                sidedness,
            },
            vec![],
        );
        let mut info = 0.0;
        let obs: Vec<StageObservation> = steps
            .iter()
            .enumerate()
            .map(|(k, &(inc, z))| {
                info += inc * i_max;
                StageObservation {
                    u: k as f64 + 1.0,
                    info_level: info,
                    z,
                }
            })
            .collect();
        let mut st = MonitoringState::new(design.clone(), i_max).unwrap();
        for (k, o) in obs.iter().enumerate() {
            if st.rejected() {
                prop_assert!(st.update(*o, false).is_err());
                break;
            }
            st = st.update(*o, k + 1 == obs.len()).unwrap();
            let rec = st.analyses.last().unwrap();
            let crosses = match (rec.critical_value, sidedness) {
                (None, _) => false,
                (Some(c), Sidedness::TwoSided) => rec.z.abs() >= c,
                (Some(c), Sidedness::OneSided) => rec.z >= c,
            };
            prop_assert_eq!(crosses, rec.decision == Decision::Reject);
            if k == 0 && rec.z == 0.0 {
                prop_assert_eq!(rec.decision, Decision::Continue);
            }
        }
        // boundaries never look ahead, so an early stop agrees with the
        // all-stages computation as well
        let mono = monolithic_decisions(&design, i_max, &obs).unwrap();
        prop_assert_eq!(&mono, &st.analyses);
        Ok(())
    })
}

fn scenario_strategy() -> impl Strategy<Value = (SimScenario, u64)> {
    (
        10usize..60,
        -0.4f64..0.3,
        -0.5f64..0.5,
        0.0f64..1.0,
        0usize..3,
        any::<u64>(),
    )
        .prop_map(|(n, alpha1, beta_w, phi, cov, seed)| {
            let covariates = match cov {
                0 => CovariateSpec::None,
                1 => CovariateSpec::StandardNormal { dim: 2 },
                _ => CovariateSpec::StandardizedBernoulli {
                    probs: vec![0.3, 0.5],
                },
            };
            let mut scn = SimScenario::delayed_effect(phi, covariates);
            scn.n_per_arm = n;
            scn.alpha1 = alpha1;
            scn.beta_w = beta_w;
            (scn, seed)
        })
}

pub fn km_ranges(cases: u32) -> Result<(), String> {
    run(
        cases,
        (scenario_strategy(), 0.3f64..3.0),
        |((scn, seed), u)| {
            let ds = generate_trial(&scn, &mut replicate_rng(seed, 0));
            let Ok(snap) = ds.snapshot(u, scn.tau) else {
                return Ok(());
            };
            for arm in Arm::BOTH {
                if snap.n_arm(arm) == 0 {
                    continue;
                }
                let c = km_fit(&snap, arm);
                prop_assert!(c.survival.iter().all(|s| (0.0..=1.0).contains(s)));
                prop_assert!(c.survival.windows(2).all(|w| w[1] <= w[0]));
                let mu = c.rmst();
                prop_assert!(mu >= 0.0 && mu <= scn.tau + 1e-12);
                prop_assert!(c.rmst_variance() >= 0.0);
            }
            Ok(())
        },
    )
}

pub fn adjusted_ranges(cases: u32) -> Result<(), String> {
    run(
        cases,
        (scenario_strategy(), 0.5f64..3.0),
        |((scn, seed), u)| {
            let ds = generate_trial(&scn, &mut replicate_rng(seed, 0));
            let Ok(snap) = ds.snapshot(u, scn.tau) else {
                return Ok(());
            };
            let Ok(r) = adjusted_rmst::analyze(&snap, &CoxOptions::default()) else {
                return Ok(());
            };
            let c = &r.components;
            prop_assert!(c.v_eta2 >= c.v_xi2 - 1e-12 * c.v_xi2.abs());
            prop_assert!(c.b10 >= 0.0 && c.b11 >= 0.0 && c.b3 >= -1e-12 && c.var_cond >= 0.0);
            prop_assert!(r.info_level > 0.0 && r.se > 0.0);
            for mu in [r.mu0_hat, r.mu1_hat] {
                prop_assert!(mu > 0.0 && mu <= scn.tau + 1e-12);
            }
            let fit = stratified_cox::fit(&snap, &CoxOptions::default()).unwrap();
            for arm in Arm::BOTH {
                let s = adjusted_rmst::adjusted_survival(&fit, &snap, arm);
                prop_assert_eq!(s.values[0], 1.0);
                prop_assert!(s.values.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(s.values.windows(2).all(|w| w[1] <= w[0] + 1e-15));
            }
            Ok(())
        },
    )
}

pub fn cox_stationary(cases: u32) -> Result<(), String> {
    run(
        cases,
        (scenario_strategy(), 1.0f64..3.0),
        |((scn, seed), u)| {
            let ds = generate_trial(&scn, &mut replicate_rng(seed, 0));
            let snap = ds.snapshot(u, scn.tau).unwrap();
            let Ok(fit) = stratified_cox::fit(&snap, &CoxOptions::default()) else {
                return Ok(());
            };
            let si = stratified_cox::score_and_info(&snap, &fit.beta_hat, fit.t_max).unwrap();
            prop_assert!(si.score.amax() <= 1e-8, "score {}", si.score.amax());
            let sym = (&si.info - si.info.transpose()).amax();
            prop_assert!(sym <= 1e-9 * si.info.amax().max(1.0));
            for arm in Arm::BOTH {
                let b = fit.baseline(arm);
                prop_assert!(b.cumulative.windows(2).all(|w| w[1] >= w[0]));
            }
            Ok(())
        },
    )
}

/// Truncating the extract at an earlier lock and then taking a snapshot
/// gives the same snapshot as taking it from the full extract.
pub fn snapshot_idempotence(cases: u32) -> Result<(), String> {
    run(
        cases,
        (scenario_strategy(), 0.2f64..3.0, 0.0f64..1.0),
        |((scn, seed), u1, frac)| {
            let ds = generate_trial(&scn, &mut replicate_rng(seed, 0));
            let u = (u1 * frac).max(0.05);
            let truncated: Vec<SubjectRecord> = ds
                .records()
                .iter()
                .filter(|r| r.entry_time < u1)
                .map(|r| {
                    let window = u1 - r.entry_time;
                    SubjectRecord {
                        followup_time: r.followup_time.min(window),
                        event: r.event && r.followup_time <= window,
                        ..r.clone()
                    }
                })
                .collect();
            if truncated.is_empty() {
                return Ok(());
            }
            let small = Dataset::new(truncated).unwrap().with_lock_time(u1).unwrap();
            match (ds.snapshot(u, scn.tau), small.snapshot(u, scn.tau)) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
            }
            let full = ds.snapshot(u1, scn.tau);
            if let Ok(full) = full {
                prop_assert_eq!(&full.with_tau(scn.tau).unwrap(), &full);
                let s1 = full.standardized();
                let s2 = s1.standardized();
                for (a, b) in s1.subjects().iter().zip(s2.subjects()) {
                    for (x, y) in a.covariates.iter().zip(&b.covariates) {
                        prop_assert!((x - y).abs() < 1e-9);
                    }
                }
            }
            Ok(())
        },
    )
}

pub fn serialization(cases: u32) -> Result<(), String> {
    let strat = (
        spending_kind(),
        sides(),
        prop::collection::vec((0.05f64..0.4, -3.0f64..3.0), 1..4),
        scenario_strategy(),
    );
    run(cases, strat, |(kind, sidedness, steps, (scn, seed))| {
        let design = DesignConfig::new(
            SpendingFunction {
                kind,
                alpha: 0.025,
                sidedness,
            },
            vec![0.5, 1.0],
        );
        let text = serde_json::to_string(&design).unwrap();
        prop_assert_eq!(
            &serde_json::from_str::<DesignConfig>(&text).unwrap(),
            &design
        );
        let mut st = MonitoringState::new(design, 100.0).unwrap();
        let mut info = 0.0;
        for (k, (inc, z)) in steps.iter().enumerate() {
            if st.rejected() {
                break;
            }
            info += inc * 100.0;
            st = st
                .update(
                    StageObservation {
                        u: k as f64 + 0.5,
                        info_level: info,
                        z: *z,
                    },
                    false,
                )
                .unwrap();
        }
        let text = serde_json::to_string(&st).unwrap();
        prop_assert_eq!(
            &serde_json::from_str::<MonitoringState>(&text).unwrap(),
            &st
        );
        let text = serde_json::to_string(&scn).unwrap();
        prop_assert_eq!(&serde_json::from_str::<SimScenario>(&text).unwrap(), &scn);
        let ds = generate_trial(&scn, &mut replicate_rng(seed, 0));
        let text = serde_json::to_string(&ds.records()[0]).unwrap();
        prop_assert_eq!(
            &serde_json::from_str::<SubjectRecord>(&text).unwrap(),
            &ds.records()[0]
        );
        Ok(())
    })
}

pub fn seed_determinism(cases: u32) -> Result<(), String> {
    run(
        cases,
        (scenario_strategy(), 0u64..1000),
        |((scn, seed), rep)| {
            let times = [1.5, 3.0];
            let methods = [Method::KmRmst];
            let a = simulate_replicate(&scn, &times, &methods, seed, rep);
            let b = simulate_replicate(&scn, &times, &methods, seed, rep);
            prop_assert_eq!(&a, &b);
            let x = generate_trial(&scn, &mut replicate_rng(seed, rep));
            let y = generate_trial(&scn, &mut replicate_rng(seed, rep + 1));
            prop_assert_ne!(x.records()[0].followup_time, y.records()[0].followup_time);
            Ok(())
        },
    )
}
