//! Command implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rmstgst_core::adjusted_rmst::{analyze, AdjustedRmstResult, RmstReport};
use rmstgst_core::gs_design::{
    observed_boundaries, AnalysisRecord, BoundarySchedule, DesignConfig, MonitoringState,
    Sidedness, SpendingKind, StageObservation,
};
use rmstgst_core::km_rmst::km_rmst_test;
use rmstgst_core::sim_engine::{
    average_hazard_ratio, calibrate_information, calibrate_null, calibrate_power, curve_table,
    run_study, simulate_replicate, AverageHazardRatio, InformationCalibration, Method,
    PowerCalibration, SimScenario,
};
use rmstgst_core::stratified_cox::CoxOptions;
use rmstgst_core::trial_data::{Dataset, Snapshot};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::files::{
    load_dataset, read_config, read_state, resolve_schema, to_json, write_atomic, StateLock,
};
use crate::{Command, DataArgs, DesignArgs, SidesArg, SpendingArg, TargetArg};

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Design {
            design,
            fractions,
            i_max,
            out,
            json,
        } => cmd_design(&design, fractions, i_max, out.as_deref(), json),
        Command::Boundaries {
            design,
            fractions,
            is_final,
            json,
        } => cmd_boundaries(&design, &fractions, is_final, json),
        Command::Analyze {
            data,
            design,
            state,
            i_max,
            i_max_from_final,
            is_final,
            km,
            out,
        } => cmd_analyze(
            &data,
            &design,
            &state,
            i_max,
            i_max_from_final,
            is_final,
            km,
            out.as_deref(),
        ),
        Command::KmCompare { data, out } => cmd_km_compare(&data, out.as_deref()),
        Command::Calibrate {
            scenario,
            design,
            target,
            power,
            reps,
            seed,
            rounds,
            out,
            scenario_out,
        } => cmd_calibrate(
            &scenario,
            &design,
            target,
            power,
            reps,
            seed,
            rounds,
            out.as_deref(),
            scenario_out.as_deref(),
        ),
        Command::Simulate {
            scenario,
            design,
            reps,
            seed,
            calibration,
            calibration_reps,
            no_calibrate,
            methods,
            curve_points,
            out,
        } => cmd_simulate(&SimulateArgs {
            scenario: &scenario,
            design: &design,
            reps,
            seed,
            calibration: calibration.as_deref(),
            calibration_reps,
            no_calibrate,
            methods: &methods,
            curve_points,
            out: &out,
        }),
    }
}

// ---------------------------------------------------------------------------
// Design resolution
// ---------------------------------------------------------------------------

fn resolve_design(
    args: &DesignArgs,
    fractions: Option<Vec<f64>>,
) -> Result<DesignConfig, CliError> {
    let mut d: DesignConfig = match &args.design {
        Some(p) => read_config(p)?,
        None => DesignConfig::new(
            rmstgst_core::gs_design::SpendingFunction::cubic(0.05),
            vec![0.5, 0.75, 1.0],
        ),
    };
    if let Some(a) = args.alpha {
        d.alpha = a;
    }
    if let Some(s) = args.sides {
        d.sidedness = match s {
            SidesArg::One => Sidedness::OneSided,
            SidesArg::Two => Sidedness::TwoSided,
        };
    }
    if let Some(k) = args.spending {
        d.spending = match k {
            SpendingArg::Cubic => SpendingKind::CubicMin,
            SpendingArg::Power => SpendingKind::PowerFamily {
                rho: args
                    .rho
                    .ok_or_else(|| CliError::Config("--spending power needs --rho".into()))?,
            },
            SpendingArg::Obf => SpendingKind::ObrienFlemingLike,
            SpendingArg::Pocock => SpendingKind::PocockLike,
        };
    } else if let Some(rho) = args.rho {
        match &mut d.spending {
            SpendingKind::PowerFamily { rho: r } => *r = rho,
            _ => {
                return Err(CliError::Config(
                    "--rho applies only to the power spending family".into(),
                ))
            }
        }
    }
    if let Some(f) = fractions {
        d.planned_fractions = f;
    }
    d.validate()?;
    Ok(d)
}

fn fmt_crit(c: Option<f64>) -> String {
    c.map_or_else(|| "inf".to_string(), |c| format!("{c:.5}"))
}

fn schedule_table(s: &BoundarySchedule) -> String {
    let mut out = String::from("stage  info_fraction  cumulative_alpha  stage_alpha  critical_z\n");
    for (k, inc) in s.stage_spend().iter().enumerate() {
        let _ = writeln!(
            out,
            "{:>5}  {:>13.4}  {:>16.6}  {:>11.6}  {:>10}",
            k + 1,
            s.info_fractions[k],
            s.cumulative_spend[k],
            inc,
            fmt_crit(s.critical_values[k])
        );
    }
    out
}

fn cmd_design(
    args: &DesignArgs,
    fractions: Option<Vec<f64>>,
    i_max: Option<f64>,
    out: Option<&Path>,
    json: bool,
) -> Result<(), CliError> {
    let mut d = resolve_design(args, fractions)?;
    if i_max.is_some() {
        d.i_max = i_max;
        d.validate()?;
    }
    if d.planned_fractions.is_empty() {
        return Err(CliError::Config("no planned information fractions".into()));
    }
    let sched = d.planned_boundaries()?;
    if let Some(p) = out {
        write_atomic(p, to_json(&d).as_bytes())?;
    }
    if json {
        print!("{}", to_json(&sched));
    } else {
        print!("{}", schedule_table(&sched));
    }
    Ok(())
}

fn cmd_boundaries(
    args: &DesignArgs,
    fractions: &[f64],
    is_final: bool,
    json: bool,
) -> Result<(), CliError> {
    let d = resolve_design(args, None)?;
    let sched = observed_boundaries(&d.spending_function(), fractions, is_final, &d.quadrature)?;
    if json {
        print!("{}", to_json(&sched));
    } else {
        print!("{}", schedule_table(&sched));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Analyses
// ---------------------------------------------------------------------------

fn snapshots(data: &DataArgs) -> Result<Vec<Snapshot>, CliError> {
    if data.u.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Config(format!(
            "--u must be increasing, got {:?}",
            data.u
        )));
    }
    let schema = resolve_schema(&data.data, data.schema.as_deref(), &data.covariates)?;
    let ds: Dataset = load_dataset(&data.data, &schema, data.lock_time)?;
    data.u
        .iter()
        .map(|&u| {
            let s = ds.snapshot(u, data.tau)?;
            Ok(if data.standardize {
                s.standardized()
            } else {
                s
            })
        })
        .collect()
}

#[derive(Serialize)]
struct StageReport {
    adjusted: RmstReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    km: Option<RmstReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    monitoring: Option<AnalysisRecord>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    data: &DataArgs,
    design_args: &DesignArgs,
    state_path: &Path,
    i_max: Option<f64>,
    i_max_from_final: bool,
    is_final: bool,
    km: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let _lock = StateLock::acquire(state_path)?;
    let existing: Option<MonitoringState> = if state_path.exists() {
        let st: MonitoringState = read_state(state_path)?;
        st.validate().map_err(|e| CliError::State(e.to_string()))?;
        Some(st)
    } else {
        None
    };
    if let (Some(st), Some(&u)) = (&existing, data.u.first()) {
        if st.rejected() {
            return Err(CliError::State(format!(
                "monitoring already stopped with rejection; u = {u} not analysed"
            )));
        }
        if let Some(last) = st.last_u() {
            if u <= last {
                return Err(CliError::State(format!(
                    "non-increasing analysis time: u = {u} after {last}"
                )));
            }
        }
    }
    let snaps = snapshots(data)?;
    let opts = CoxOptions::default();
    let results: Vec<AdjustedRmstResult> = snaps
        .iter()
        .map(|s| analyze(s, &opts))
        .collect::<Result<_, _>>()?;
    let km_results = if km {
        Some(
            snaps
                .iter()
                .map(km_rmst_test)
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };

    let mut state = match existing {
        Some(st) => {
            if i_max.is_some_and(|v| v != st.i_max) || i_max_from_final {
                return Err(CliError::State(format!(
                    "state already fixes I_max = {}; it cannot be changed mid-trial",
                    st.i_max
                )));
            }
            st
        }
        None => {
            let design = resolve_design(design_args, None)?;
            let total = if i_max_from_final {
                results.last().map(|r| r.info_level).unwrap()
            } else {
                i_max.or(design.i_max).ok_or_else(|| {
                    CliError::Config(
                        "fresh state needs --i-max, an i_max in the design, or --i-max-from-final"
                            .into(),
                    )
                })?
            };
            MonitoringState::new(design, total)?
        }
    };

    let mut reports = Vec::new();
    let n = results.len();
    for (k, r) in results.iter().enumerate() {
        let obs = StageObservation {
            u: r.u,
            info_level: r.info_level,
            z: r.z,
        };
        let record = if state.rejected() {
            None
        } else {
            state = state.update(obs, is_final && k + 1 == n)?;
            state.analyses.last().cloned()
        };
        reports.push(StageReport {
            adjusted: r.report(),
            km: km_results.as_ref().map(|v| v[k].report()),
            monitoring: record,
        });
    }
    write_atomic(state_path, to_json(&state).as_bytes())?;
    if let Some(p) = out {
        write_atomic(p, to_json(&reports).as_bytes())?;
    }

    let mut table = String::from(
        "     u      n     delta        se         z        info      IF  critical  decision\n",
    );
    for rep in &reports {
        let a = &rep.adjusted;
        let n = results
            .iter()
            .find(|r| r.u == a.u)
            .map_or(0, |r| r.n0 + r.n1);
        let (frac, crit, dec) = match &rep.monitoring {
            Some(m) => (
                format!("{:.4}", m.info_fraction),
                fmt_crit(m.critical_value),
                format!("{:?}", m.decision).to_lowercase(),
            ),
            None => ("-".into(), "-".into(), "not tested (stopped)".into()),
        };
        let _ = writeln!(
            table,
            "{:>6.3} {:>6} {:>9.5} {:>9.5} {:>9.4} {:>11.2} {:>7} {:>9}  {}",
            a.u, n, a.delta, a.se, a.z, a.info, frac, crit, dec
        );
        if let Some(k) = &rep.km {
            let _ = writeln!(
                table,
                "{:>6} {:>6} {:>9.5} {:>9.5} {:>9.4} {:>11.2}  (Kaplan-Meier)",
                "", "", k.delta, k.se, k.z, k.info
            );
        }
    }
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct ComparisonRow {
    adjusted: RmstReport,
    km: RmstReport,
}

fn cmd_km_compare(data: &DataArgs, out: Option<&Path>) -> Result<(), CliError> {
    let snaps = snapshots(data)?;
    let opts = CoxOptions::default();
    let mut rows = Vec::new();
    for s in &snaps {
        rows.push(ComparisonRow {
            adjusted: analyze(s, &opts)?.report(),
            km: km_rmst_test(s)?.report(),
        });
    }
    let mut table =
        String::from("     u  method            mu0       mu1     delta        se         z\n");
    for r in &rows {
        for rep in [&r.adjusted, &r.km] {
            let _ = writeln!(
                table,
                "{:>6.3}  {:<14} {:>8.5}  {:>8.5} {:>9.5} {:>9.5} {:>9.4}",
                rep.u, rep.method, rep.mu0, rep.mu1, rep.delta, rep.se, rep.z
            );
        }
    }
    print!("{table}");
    if let Some(p) = out {
        write_atomic(p, to_json(&rows).as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// Output of `calibrate`, accepted by `simulate --calibration`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub scenario: SimScenario,
    pub beta_w0: f64,
    pub average_hazard_ratio_null: f64,
    pub average_hazard_ratio_weighting: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power: Option<PowerSummary>,
    pub information: InformationCalibration,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PowerSummary {
    pub target: f64,
    pub beta_delta: f64,
    pub delta: f64,
    pub drift: f64,
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>, CliError> {
    if names.is_empty() {
        return Ok(Method::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| {
            Method::ALL
                .into_iter()
                .find(|m| m.name() == n.as_str())
                .ok_or_else(|| {
                    CliError::Config(format!(
                        "unknown method `{n}` (expected adjusted_rmst, km_rmst or cox_hr)"
                    ))
                })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_calibrate(
    scenario: &Path,
    design_args: &DesignArgs,
    target: TargetArg,
    power: f64,
    reps: usize,
    seed: u64,
    rounds: usize,
    out: Option<&Path>,
    scenario_out: Option<&Path>,
) -> Result<(), CliError> {
    let scn: SimScenario = read_config(scenario)?;
    scn.validate()?;
    let beta_w0 = calibrate_null(&scn)?;
    let ahr: AverageHazardRatio = average_hazard_ratio(&scn.with_beta_w(beta_w0));
    let (calibrated, power_summary, information) = match target {
        TargetArg::Power => {
            let design = resolve_design(design_args, Some(scn.analysis_fractions.clone()))?;
            let pc: PowerCalibration = calibrate_power(
                &scn,
                &design.spending_function(),
                power,
                &Method::ALL,
                reps,
                seed,
                rounds,
            )?;
            let summary = PowerSummary {
                target: power,
                beta_delta: pc.beta_delta,
                delta: pc.delta,
                drift: pc.drift,
            };
            (
                scn.with_beta_w(pc.beta_delta),
                Some(summary),
                pc.information,
            )
        }
        TargetArg::Null => {
            let s = scn.with_beta_w(beta_w0);
            let info = calibrate_information(&s, &Method::ALL, reps, seed)?;
            (s, None, info)
        }
        TargetArg::AsIs => {
            let info = calibrate_information(&scn, &Method::ALL, reps, seed)?;
            (scn.clone(), None, info)
        }
    };
    println!("beta_W0 (equal RMST)      {beta_w0:.6}");
    println!("average hazard ratio      {:.4}", ahr.value);
    if let Some(p) = &power_summary {
        println!("beta_delta                {:.6}", p.beta_delta);
        println!("RMST difference delta     {:.6}", p.delta);
    }
    for (m, v) in &information.i_max {
        println!("I_max {:<19} {v:.3}", m.name());
    }
    println!("analysis times            {:?}", information.analysis_times);
    let report = CalibrationReport {
        scenario: calibrated.clone(),
        beta_w0,
        average_hazard_ratio_null: ahr.value,
        average_hazard_ratio_weighting: AverageHazardRatio::WEIGHTING.to_string(),
        power: power_summary,
        information,
    };
    if let Some(p) = out {
        write_atomic(p, to_json(&report).as_bytes())?;
    }
    if let Some(p) = scenario_out {
        write_atomic(p, to_json(&calibrated).as_bytes())?;
    }
    Ok(())
}

struct SimulateArgs<'a> {
    scenario: &'a Path,
    design: &'a DesignArgs,
    reps: usize,
    seed: u64,
    calibration: Option<&'a Path>,
    calibration_reps: usize,
    no_calibrate: bool,
    methods: &'a [String],
    curve_points: usize,
    out: &'a Path,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    reps: usize,
    calibration_source: String,
    scenario: &'a SimScenario,
    design: &'a DesignConfig,
    outputs: Vec<&'static str>,
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let scn: SimScenario = read_config(a.scenario)?;
    scn.validate()?;
    if a.reps == 0 {
        return Err(CliError::Config("--reps must be at least 1".into()));
    }
    let design = resolve_design(a.design, Some(scn.analysis_fractions.clone()))?;
    let methods = parse_methods(a.methods)?;
    let (calibration, source) = match a.calibration {
        Some(p) => {
            let rep: CalibrationFile = read_config(p)?;
            (rep.information, p.display().to_string())
        }
        None if a.no_calibrate => {
            return Err(CliError::Config(
                "calibration missing: pass --calibration or drop --no-calibrate".into(),
            ))
        }
        None => {
            let seed = a.seed.wrapping_add(1);
            let info = calibrate_information(&scn, &methods, a.calibration_reps, seed)?;
            (
                info,
                format!("automatic ({} replicates, seed {seed})", a.calibration_reps),
            )
        }
    };
    let oc = run_study(
        &scn,
        &design.spending_function(),
        &calibration,
        &methods,
        a.reps,
        a.seed,
    )?;

    fs::create_dir_all(a.out)?;
    let mut outputs = vec![
        "results.csv",
        "summary.txt",
        "calibration.json",
        "curves.csv",
        "manifest.json",
    ];
    write_atomic(&a.out.join("results.csv"), oc.to_csv().as_bytes())?;

    let mut summary = format!(
        "replicates {}  seed {}  analysis times {}\n\nmethod          stage  cumulative_rejection  mc_se    failed  skipped\n",
        oc.reps,
        oc.master_seed,
        oc.analysis_times.iter().map(|u| format!("{u:.3}")).collect::<Vec<_>>().join(", ")
    );
    for m in &oc.methods {
        for (k, (r, se)) in m.cumulative_rejection.iter().zip(&m.mc_se).enumerate() {
            let _ = writeln!(
                summary,
                "{:<15} {:>5}  {:>20.4}  {:.4}  {:>6}  {:>7}",
                m.method.name(),
                k + 1,
                r,
                se,
                if k == 0 {
                    m.failed_analyses.to_string()
                } else {
                    String::new()
                },
                if k == 0 {
                    m.skipped_stages.to_string()
                } else {
                    String::new()
                }
            );
        }
    }
    write_atomic(&a.out.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");

    let cal = CalibrationFile {
        information: calibration,
    };
    write_atomic(&a.out.join("calibration.json"), to_json(&cal).as_bytes())?;

    let mut curves = String::from("t,survival_control,survival_treatment,hazard_ratio\n");
    for row in curve_table(&scn, scn.study_length(), a.curve_points) {
        let _ = writeln!(
            curves,
            "{},{},{},{}",
            row.t, row.survival_control, row.survival_treatment, row.hazard_ratio
        );
    }
    write_atomic(&a.out.join("curves.csv"), curves.as_bytes())?;

    if a.reps == 1 {
        let trace = simulate_replicate(&scn, &oc.analysis_times, &methods, a.seed, 0);
        write_atomic(&a.out.join("trace.json"), to_json(&trace).as_bytes())?;
        outputs.push("trace.json");
    }
    let manifest = Manifest {
        tool: "rmstgst",
        version: env!("CARGO_PKG_VERSION"),
        command: "simulate",
        seed: a.seed,
        reps: a.reps,
        calibration_source: source,
        scenario: &scn,
        design: &design,
        outputs,
    };
    write_atomic(&a.out.join("manifest.json"), to_json(&manifest).as_bytes())?;
    Ok(())
}

/// The part of a calibration report that `simulate` needs.
#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    information: InformationCalibration,
}
