//! Unadjusted comparator: per-arm Kaplan–Meier RMST and the two-sample
//! RMST-difference Wald test.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adjusted_rmst::{RmstError, RmstReport};
use crate::trial_data::{Arm, Snapshot};

/// Product-limit curve of one arm restricted to `[0, tau]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub arm: Arm,
    pub tau: f64,
    /// Distinct failure times `< tau`.
    pub times: Vec<f64>,
    /// Survival just after each failure time.
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    pub fn value_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }

    /// Exact area under the step curve on `[0, tau]`.
    pub fn rmst(&self) -> f64 {
        let mut area = 0.0;
        let mut prev_t = 0.0;
        let mut prev_s = 1.0;
        for (&t, &s) in self.times.iter().zip(&self.survival) {
            area += prev_s * (t - prev_t);
            prev_t = t;
            prev_s = s;
        }
        area + prev_s * (self.tau - prev_t)
    }

    /// Variance of the RMST: `sum_k A_k^2 d_k / (y_k (y_k - d_k))`, with
    /// `A_k` the area under the curve from `t_k` to `tau`. Terms with
    /// `y_k = d_k` are dropped.
    pub fn rmst_variance(&self) -> f64 {
        let r = self.times.len();
        let mut tail = vec![0.0; r];
        let mut acc = 0.0;
        for k in (0..r).rev() {
            let next = if k + 1 < r {
                self.times[k + 1]
            } else {
                self.tau
            };
            acc += self.survival[k] * (next - self.times[k]);
            tail[k] = acc;
        }
        (0..r)
            .filter(|&k| self.at_risk[k] > self.events[k])
            .map(|k| {
                let y = self.at_risk[k] as f64;
                let d = self.events[k] as f64;
                tail[k] * tail[k] * d / (y * (y - d))
            })
            .sum()
    }
}

/// Product-limit estimator from the snapshot's `(X(u), delta(u))` pairs.
pub fn km_fit(snap: &Snapshot, arm: Arm) -> KmCurve {
    let tau = snap.tau();
    let mut obs: Vec<(f64, bool)> = snap
        .subjects()
        .iter()
        .filter(|s| s.arm == arm)
        .map(|s| (s.time, s.event))
        .collect();
    obs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut curve = KmCurve {
        arm,
        tau,
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
    };
    let mut remaining = obs.len();
    let mut s = 1.0;
    let mut i = 0;
    while i < obs.len() {
        let t = obs[i].0;
        let mut j = i;
        let mut d = 0;
        while j < obs.len() && obs[j].0 == t {
            d += usize::from(obs[j].1);
            j += 1;
        }
        if t >= tau {
            break;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / remaining as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(remaining);
            curve.events.push(d);
        }
        remaining -= j - i;
        i = j;
    }
    curve
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmRmstResult {
    pub u: f64,
    pub tau: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub delta_hat: f64,
    pub var0: f64,
    pub var1: f64,
    pub se: f64,
    pub z: f64,
    pub info_level: f64,
}

impl KmRmstResult {
    pub fn report(&self) -> RmstReport {
        let mut components = BTreeMap::new();
        components.insert("var0".to_string(), self.var0);
        components.insert("var1".to_string(), self.var1);
        RmstReport {
            method: "km_rmst".into(),
            u: self.u,
            tau: self.tau,
            mu0: self.mu0,
            mu1: self.mu1,
            delta: self.delta_hat,
            se: self.se,
            z: self.z,
            info: self.info_level,
            components,
        }
    }
}

/// Kaplan–Meier RMST difference (treatment minus control) and its Wald test.
pub fn km_rmst_test(snap: &Snapshot) -> Result<KmRmstResult, RmstError> {
    let t_max = snap.t_max();
    for arm in Arm::BOTH {
        if snap.events_in(arm, t_max) == 0 {
            return Err(RmstError::InsufficientEvents { arm, t_max });
        }
    }
    let c0 = km_fit(snap, Arm::Control);
    let c1 = km_fit(snap, Arm::Treatment);
    let (mu0, mu1) = (c0.rmst(), c1.rmst());
    let (var0, var1) = (c0.rmst_variance(), c1.rmst_variance());
    let var = var0 + var1;
    if !(var > 0.0 && var.is_finite()) {
        return Err(RmstError::DegenerateVariance(var));
    }
    let se = var.sqrt();
    let delta_hat = mu1 - mu0;
    Ok(KmRmstResult {
        u: snap.u(),
        tau: snap.tau(),
        mu0,
        mu1,
        delta_hat,
        var0,
        var1,
        se,
        z: delta_hat / se,
        info_level: 1.0 / var,
    })
}
