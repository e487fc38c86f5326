//! Covariate-adjusted restricted mean survival time (RMST) analysis for
//! group sequential trials with staggered entry.
//!
//! The crate is organised bottom-up:
//!
//! * [`trial_data`] ingests subject records and builds analysis snapshots.
//! * [`stratified_cox`] fits the arm-stratified Cox model.
//! * [`adjusted_rmst`] turns the fit into the adjusted RMST difference and
//!   its variance.
//! * [`km_rmst`] is the unadjusted Kaplan–Meier comparator.
//! * [`gs_design`] computes error-spending boundaries and tracks monitoring.
//! * [`sim_engine`] simulates trials and estimates operating characteristics.

// Negated comparisons are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjusted_rmst;
pub mod gs_design;
pub mod km_rmst;
pub mod numerics;
pub mod sim_engine;
pub mod stratified_cox;
pub mod trial_data;

use thiserror::Error;

pub use adjusted_rmst::{analyze, AdjustedRmstResult, RmstError, RmstReport};
pub use gs_design::{
    boundaries, BoundarySchedule, DesignConfig, DesignError, MonitoringState, Sidedness,
    SpendingFunction, SpendingKind,
};
pub use km_rmst::{km_rmst_test, KmRmstResult};
pub use sim_engine::{SimError, SimScenario};
pub use stratified_cox::{CoxError, CoxFit, CoxOptions};
pub use trial_data::{Arm, DataError, Dataset, Snapshot, SubjectRecord};

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Cox(#[from] CoxError),
    #[error(transparent)]
    Rmst(#[from] RmstError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Sim(#[from] SimError),
}
