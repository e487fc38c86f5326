//! Small numerical routines shared by the estimators, the boundary engine and
//! the simulation calibrators.

use std::num::NonZeroUsize;

use gauss_quad::{GaussHermite, GaussLegendre};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RootError {
    #[error("no sign change on [{lo}, {hi}] (f(lo) = {f_lo}, f(hi) = {f_hi})")]
    NoSignChange {
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },
    #[error("root finder did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("function returned a non-finite value at x = {0}")]
    NonFinite(f64),
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Standard normal upper tail, accurate far into the tail.
pub fn norm_sf(x: f64) -> f64 {
    std_normal().sf(x)
}

pub fn norm_pdf(x: f64) -> f64 {
    std_normal().pdf(x)
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Brent's method on a bracketing interval.
///
/// Stops when the bracket is narrower than `xtol` or `|f| <= ftol`.
pub fn brent<F>(
    mut f: F,
    lo: f64,
    hi: f64,
    xtol: f64,
    ftol: f64,
    max_iter: usize,
) -> Result<f64, RootError>
where
    F: FnMut(f64) -> f64,
{
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (f(a), f(b));
    if !fa.is_finite() {
        return Err(RootError::NonFinite(a));
    }
    if !fb.is_finite() {
        return Err(RootError::NonFinite(b));
    }
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(RootError::NoSignChange {
            lo,
            hi,
            f_lo: fa,
            f_hi: fb,
        });
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb.abs() <= ftol {
            return Ok(b);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b);
        if !fb.is_finite() {
            return Err(RootError::NonFinite(b));
        }
    }
    Err(RootError::NoConvergence(max_iter))
}

/// Nodes and weights of a quadrature rule on an interval.
#[derive(Debug, Clone, Default)]
pub struct QuadratureGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(*x))
            .sum()
    }
}

const PANEL_ORDER: usize = 8;

/// Composite Gauss–Legendre rule on `[lo, hi]` with `panels` equal panels of
/// eight nodes each.
pub fn composite_gauss_legendre(lo: f64, hi: f64, panels: usize) -> QuadratureGrid {
    if !(hi > lo) || panels == 0 {
        return QuadratureGrid::default();
    }
    let rule = GaussLegendre::new(NonZeroUsize::new(PANEL_ORDER).unwrap());
    let ref_pts: Vec<(f64, f64)> = rule.iter().map(|(x, w)| (*x, *w)).collect();
    let h = (hi - lo) / panels as f64;
    let mut grid = QuadratureGrid {
        nodes: Vec::with_capacity(panels * PANEL_ORDER),
        weights: Vec::with_capacity(panels * PANEL_ORDER),
    };
    for k in 0..panels {
        let a = lo + k as f64 * h;
        let mid = a + 0.5 * h;
        for &(x, w) in &ref_pts {
            grid.nodes.push(mid + 0.5 * h * x);
            grid.weights.push(0.5 * h * w);
        }
    }
    grid
}

/// Number of Gauss–Legendre panels so that roughly `total_nodes` nodes are
/// used and no panel is wider than `max_width`.
pub fn panels_for(lo: f64, hi: f64, total_nodes: usize, max_width: f64) -> usize {
    let by_count = total_nodes.div_ceil(PANEL_ORDER).max(1);
    let by_width = if max_width > 0.0 {
        ((hi - lo) / max_width).ceil() as usize
    } else {
        1
    };
    by_count.max(by_width)
}

/// Expectation of `f(Z)` for `Z ~ N(0, 1)` by Gauss–Hermite quadrature.
pub struct NormalExpectation {
    points: Vec<(f64, f64)>,
}

impl NormalExpectation {
    pub fn new(nodes: usize) -> Self {
        let rule = GaussHermite::new(NonZeroUsize::new(nodes.max(1)).unwrap());
        let scale = std::f64::consts::PI.sqrt();
        let points = rule
            .iter()
            .map(|(x, w)| (std::f64::consts::SQRT_2 * *x, *w / scale))
            .filter(|&(_, w)| w > 0.0)
            .collect();
        Self { points }
    }

    /// `(z, probability weight)` pairs; weights sum to one.
    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

/// Adaptive integral of a smooth function on a finite interval.
pub fn integrate_adaptive<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, abs_tol: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    quadrature::double_exponential::integrate(f, lo, hi, abs_tol).integral
}

/// Cholesky-based inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &nalgebra::DMatrix<f64>) -> Option<nalgebra::DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(m.clone());
    }
    nalgebra::linalg::Cholesky::new(m.clone()).map(|c| c.inverse())
}
