//! File-to-estimate pipeline: CSV ingestion, snapshots and both RMST
//! analyses on simulated trials.

mod support;

use std::io::Write;

use rmstgst_core::adjusted_rmst;
use rmstgst_core::km_rmst::km_rmst_test;
use rmstgst_core::sim_engine::{generate_trial, replicate_rng, CovariateSpec, SimScenario};
use rmstgst_core::trial_data::{ingest_csv, Arm, CsvSchema, DataError, Dataset};
use support::*;

fn write_csv(ds: &Dataset, dir: &tempfile::TempDir) -> std::path::PathBuf {
    let path = dir.path().join("trial.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    let p = ds.covariate_dim();
    let covs: Vec<String> = (1..=p).map(|j| format!("z{j}")).collect();
    writeln!(
        f,
        "patient,group,entry_time,followup_time,event,{}",
        covs.join(",")
    )
    .unwrap();
    for r in ds.records() {
        let z: Vec<String> = r.covariates.iter().map(|v| format!("{v:?}")).collect();
        writeln!(
            f,
            "{},{},{:?},{:?},{},{}",
            r.id,
            r.arm,
            r.entry_time,
            r.followup_time,
            u8::from(r.event),
            z.join(",")
        )
        .unwrap();
    }
    path
}

fn schema(p: usize) -> CsvSchema {
    CsvSchema {
        id: "patient".into(),
        arm: "group".into(),
        ..CsvSchema::with_covariates((1..=p).map(|j| format!("z{j}")))
    }
}

#[test]
fn csv_round_trip_reproduces_the_analysis() {
    let scn = SimScenario::delayed_effect(1.5f64.ln(), CovariateSpec::StandardNormal { dim: 3 });
    let ds = generate_trial(&scn, &mut replicate_rng(12, 0));
    let dir = tempfile::tempdir().unwrap();
    let path = write_csv(&ds, &dir);

    let records = ingest_csv(&path, &schema(3)).unwrap();
    assert_eq!(records, ds.records());
    let loaded = Dataset::new(records)
        .unwrap()
        .with_lock_time(ds.lock_time())
        .unwrap();
    for u in [1.5, 2.25, 3.0] {
        let a = adjusted_rmst::analyze(&ds.snapshot(u, 1.0).unwrap(), &Default::default()).unwrap();
        let b =
            adjusted_rmst::analyze(&loaded.snapshot(u, 1.0).unwrap(), &Default::default()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn missing_and_invalid_cells_name_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(
        &path,
        "patient,group,entry_time,followup_time,event,z1\n\
         a,0,0.1,1.0,1,0.3\n\
         b,1,0.2,0.8,0,NA\n",
    )
    .unwrap();
    let err = ingest_csv(&path, &schema(1)).unwrap_err();
    assert!(
        matches!(err, DataError::MissingValue { row: 3, .. }),
        "{err}"
    );

    std::fs::write(
        &path,
        "patient,group,entry_time,followup_time,event,z1\n\
         a,2,0.1,1.0,1,0.3\n",
    )
    .unwrap();
    let err = ingest_csv(&path, &schema(1)).unwrap_err();
    assert_eq!(err.to_string(), "row 2: invalid arm `2` (expected 0 or 1)");

    let err = ingest_csv(dir.path().join("absent.csv"), &schema(1)).unwrap_err();
    assert!(matches!(err, DataError::Io(_)), "{err}");
}

#[test]
fn swapping_arms_negates_the_estimate() {
    let ds = simulated(&nph_scenario(2f64.ln()), 31);
    let swapped = Dataset::new(
        ds.records()
            .iter()
            .cloned()
            .map(|mut r| {
                r.arm = if r.arm == Arm::Control {
                    Arm::Treatment
                } else {
                    Arm::Control
                };
                r
            })
            .collect(),
    )
    .unwrap()
    .with_lock_time(ds.lock_time())
    .unwrap();
    for u in [1.5, 3.0] {
        let a = adjusted_result(&ds.snapshot(u, 1.0).unwrap());
        let b = adjusted_result(&swapped.snapshot(u, 1.0).unwrap());
        assert!((a.delta_hat + b.delta_hat).abs() < 1e-12);
        assert!((a.se - b.se).abs() < 1e-12 * a.se);
        let k = km_rmst_test(&ds.snapshot(u, 1.0).unwrap()).unwrap();
        let l = km_rmst_test(&swapped.snapshot(u, 1.0).unwrap()).unwrap();
        assert!((k.delta_hat + l.delta_hat).abs() < 1e-12);
    }
}

#[test]
fn without_covariates_adjusted_and_km_agree_closely() {
    let scn = SimScenario {
        n_per_arm: 2000,
        ..SimScenario::delayed_effect(2f64.ln(), CovariateSpec::None)
    };
    let ds = generate_trial(&scn, &mut replicate_rng(4, 0));
    let snap = ds.snapshot(3.0, 1.0).unwrap();
    let a = adjusted_result(&snap);
    let k = km_rmst_test(&snap).unwrap();
    // the Breslow curve is the product-integral's exponential counterpart
    assert!((a.mu0_hat - k.mu0).abs() < 2e-3, "{} {}", a.mu0_hat, k.mu0);
    assert!((a.mu1_hat - k.mu1).abs() < 2e-3, "{} {}", a.mu1_hat, k.mu1);
    assert!((a.se / k.se - 1.0).abs() < 0.02, "{} {}", a.se, k.se);
}

#[test]
fn information_grows_with_calendar_time() {
    let ds = simulated(&nph_scenario(1.5f64.ln()), 8);
    let info: Vec<f64> = [1.0, 1.5, 2.0, 2.5, 3.0]
        .iter()
        .map(|&u| adjusted_result(&ds.snapshot(u, 1.0).unwrap()).info_level)
        .collect();
    assert!(info.windows(2).all(|w| w[1] > w[0]), "{info:?}");
}
