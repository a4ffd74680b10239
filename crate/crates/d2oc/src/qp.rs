//! The coverage quadratic program and its box-constrained solver.
//!
//! Substituting the barycenter identity into the local transport cost and
//! adding an input penalty `U' R U` gives
//!
//! `J(U) = (1/2) U' H U + f' U + const`
//!
//! with `H = 2 ((Omega Theta)' (Omega Theta) + R)` and
//! `f = 2 (Omega Theta)' Omega (Phi x - Qbar)`, minimized over the stacked
//! input box. `H` is symmetric positive definite whenever `R` is, so the
//! unconstrained minimizer is the Cholesky solve of `H U = -f` and the box
//! problem yields to projected Newton steps on the free variables. At the
//! solution the KKT conditions hold: free gradients vanish, gradients point
//! inward at active bounds.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::lti::StackedPredictor;
use crate::transport::BarycenterTrack;
use crate::{Error, Result};

/// Convergence threshold on the KKT residual.
pub const KKT_TOL: f64 = 1e-8;

/// Iteration cap for the box solver.
pub const BOX_QP_MAX_ITERS: usize = 500;

/// Allowed asymmetry `max |H - H'|` in a quadratic cost matrix.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Armijo sufficient-decrease constant.
pub const ARMIJO_C: f64 = 1e-4;

/// Armijo backtracking factor.
pub const ARMIJO_SHRINK: f64 = 0.5;

/// Box-constrained strictly convex quadratic program.
#[derive(Debug, Clone)]
pub struct QpProblem {
    h: DMatrix<f64>,
    f: DVector<f64>,
    const_term: f64,
    u_lo: DVector<f64>,
    u_hi: DVector<f64>,
}

impl QpProblem {
    /// Validates symmetry (within [`SYMMETRY_TOL`]), positive definiteness
    /// (by Cholesky), matching dimensions, and bound ordering.
    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        const_term: f64,
        u_lo: DVector<f64>,
        u_hi: DVector<f64>,
    ) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "cost matrix must be square, got {}x{}",
                h.nrows(),
                h.ncols()
            )));
        }
        if f.len() != n || u_lo.len() != n || u_hi.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "cost vector and bounds must have {n} entries, got {}, {}, {}",
                f.len(),
                u_lo.len(),
                u_hi.len()
            )));
        }
        if (&h - h.transpose()).amax() > SYMMETRY_TOL {
            return Err(Error::NotSpd("cost matrix is not symmetric".into()));
        }
        if Cholesky::new(h.clone()).is_none() {
            return Err(Error::NotSpd("cost matrix failed Cholesky".into()));
        }
        for i in 0..n {
            if !(u_lo[i] <= u_hi[i]) {
                return Err(Error::Config(format!(
                    "box bounds must satisfy lo <= hi, got [{}, {}] at entry {i}",
                    u_lo[i], u_hi[i]
                )));
            }
        }
        Ok(Self {
            h,
            f,
            const_term,
            u_lo,
            u_hi,
        })
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn f(&self) -> &DVector<f64> {
        &self.f
    }

    pub fn const_term(&self) -> f64 {
        self.const_term
    }

    pub fn u_lo(&self) -> &DVector<f64> {
        &self.u_lo
    }

    pub fn u_hi(&self) -> &DVector<f64> {
        &self.u_hi
    }

    /// Full objective `(1/2) u' H u + f' u + const`.
    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * (&self.h * u).dot(u) + self.f.dot(u) + self.const_term
    }

    /// Objective gradient `H u + f`.
    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.h * u + &self.f
    }

    /// Clamp a vector into the box.
    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].clamp(self.u_lo[i], self.u_hi[i]))
    }
}

/// Solution report of a box-constrained solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub u_opt: DVector<f64>,
    /// Full objective at `u_opt`, including the constant term.
    pub objective: f64,
    /// Largest KKT violation: free-gradient magnitude, or the wrong-sign
    /// part of the gradient at an active bound.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub active_lo: Vec<usize>,
    pub active_hi: Vec<usize>,
}

/// Assemble the coverage QP for a predictor, current state, barycenter
/// track, input penalty `R` (dimension `mH`, SPD), and per-step input bounds.
pub fn assemble_qp(
    pred: &StackedPredictor,
    x: &DVector<f64>,
    track: &BarycenterTrack,
    r_penalty: &DMatrix<f64>,
    u_min: &DVector<f64>,
    u_max: &DVector<f64>,
) -> Result<QpProblem> {
    let horizon = pred.horizon();
    let d = pred.output_dim();
    let m = pred.input_dim();
    if track.horizon() != horizon {
        return Err(Error::DimensionMismatch(format!(
            "barycenter track has {} steps but the predictor has {horizon}",
            track.horizon()
        )));
    }
    if track.dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "barycenter track is {}-dimensional but outputs are {d}-dimensional",
            track.dim()
        )));
    }
    if x.len() != pred.phi().ncols() {
        return Err(Error::DimensionMismatch(format!(
            "state has {} entries but the predictor expects {}",
            x.len(),
            pred.phi().ncols()
        )));
    }
    let mh = m * horizon;
    if r_penalty.nrows() != mh || r_penalty.ncols() != mh {
        return Err(Error::DimensionMismatch(format!(
            "input penalty is {}x{}, expected {mh}x{mh}",
            r_penalty.nrows(),
            r_penalty.ncols()
        )));
    }
    if (r_penalty - r_penalty.transpose()).amax() > SYMMETRY_TOL {
        return Err(Error::NotSpd("input penalty is not symmetric".into()));
    }
    if Cholesky::new(r_penalty.clone()).is_none() {
        return Err(Error::NotSpd("input penalty failed Cholesky".into()));
    }
    if u_min.len() != m || u_max.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "per-step bounds have {} and {} entries, expected {m}",
            u_min.len(),
            u_max.len()
        )));
    }

    // Row block h of Theta and of (Phi x - Qbar), scaled by omega_h.
    let mut scaled_theta = pred.theta().clone();
    let mut scaled_err = pred.phi() * x - track.stacked_qbar();
    for h in 0..horizon {
        let w = track.omega(h);
        scaled_theta.rows_mut(h * d, d).scale_mut(w);
        scaled_err.rows_mut(h * d, d).scale_mut(w);
    }

    let mut hmat = 2.0 * (scaled_theta.transpose() * &scaled_theta + r_penalty);
    // Exact symmetry despite floating-point accumulation order.
    hmat = (&hmat + hmat.transpose()) / 2.0;
    let fvec = 2.0 * scaled_theta.transpose() * &scaled_err;
    let const_term = scaled_err.norm_squared() + track.total_spread();

    let mut u_lo = DVector::zeros(mh);
    let mut u_hi = DVector::zeros(mh);
    for h in 0..horizon {
        u_lo.rows_mut(h * m, m).copy_from(u_min);
        u_hi.rows_mut(h * m, m).copy_from(u_max);
    }

    QpProblem::new(hmat, fvec, const_term, u_lo, u_hi)
}

/// Closed-form unconstrained minimizer `-H^{-1} f` via Cholesky.
pub fn unconstrained_optimum(qp: &QpProblem) -> Result<DVector<f64>> {
    let chol = Cholesky::new(qp.h.clone())
        .ok_or_else(|| Error::NotSpd("cost matrix failed Cholesky".into()))?;
    Ok(chol.solve(&(-&qp.f)))
}

/// Projected Newton with free-set Cholesky solves and Armijo backtracking.
///
/// Starts from the box projection of the unconstrained optimum, so an
/// interior optimum is returned immediately and unchanged. Hitting the
/// [`BOX_QP_MAX_ITERS`] cap returns [`Error::MaxIterations`] carrying the
/// best iterate.
pub fn solve_box_qp(qp: &QpProblem) -> Result<SolveReport> {
    let n = qp.dim();
    let mut u = qp.project(&unconstrained_optimum(qp)?);
    let mut iterations = 0;

    loop {
        let g = qp.gradient(&u);
        let kkt = kkt_residual(qp, &u, &g);
        if kkt < KKT_TOL {
            return Ok(report(qp, u, kkt, iterations));
        }
        if iterations >= BOX_QP_MAX_ITERS {
            return Err(Error::MaxIterations(Box::new(report(qp, u, kkt, iterations))));
        }
        iterations += 1;

        // Coordinates pinned at a bound with an inward-pointing gradient
        // stay fixed; the Newton step runs on the rest.
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let at_lo = is_at_bound(u[i], qp.u_lo[i]);
                let at_hi = is_at_bound(u[i], qp.u_hi[i]);
                !(at_lo && at_hi) && !(at_lo && g[i] > 0.0) && !(at_hi && g[i] < 0.0)
            })
            .collect();
        debug_assert!(!free.is_empty(), "KKT residual {kkt} with no free coordinates");

        let h_ff = DMatrix::from_fn(free.len(), free.len(), |a, b| qp.h[(free[a], free[b])]);
        let g_f = DVector::from_fn(free.len(), |a, _| g[free[a]]);
        let chol = Cholesky::new(h_ff)
            .ok_or_else(|| Error::NotSpd("free-set submatrix failed Cholesky".into()))?;
        let d_f = chol.solve(&(-g_f));
        let mut direction = DVector::zeros(n);
        for (a, &i) in free.iter().enumerate() {
            direction[i] = d_f[a];
        }

        // Backtrack on the projected arc until sufficient decrease.
        let j0 = qp.objective(&u);
        let mut t = 1.0;
        loop {
            let trial = qp.project(&(&u + &direction * t));
            let displacement = &trial - &u;
            if qp.objective(&trial) <= j0 + ARMIJO_C * g.dot(&displacement) {
                u = trial;
                break;
            }
            t *= ARMIJO_SHRINK;
            if t < 1e-16 {
                // No progress is possible in floating point.
                let kkt = kkt_residual(qp, &u, &qp.gradient(&u));
                return Ok(report(qp, u, kkt, iterations));
            }
        }
    }
}

pub(crate) fn is_at_bound(value: f64, bound: f64) -> bool {
    if !bound.is_finite() {
        return false;
    }
    (value - bound).abs() <= 1e-12 * bound.abs().max(1.0)
}

fn kkt_residual(qp: &QpProblem, u: &DVector<f64>, g: &DVector<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..u.len() {
        let at_lo = is_at_bound(u[i], qp.u_lo[i]);
        let at_hi = is_at_bound(u[i], qp.u_hi[i]);
        let violation = if at_lo && at_hi {
            0.0
        } else if at_lo {
            (-g[i]).max(0.0)
        } else if at_hi {
            g[i].max(0.0)
        } else {
            g[i].abs()
        };
        worst = worst.max(violation);
    }
    worst
}

fn report(qp: &QpProblem, u: DVector<f64>, kkt: f64, iterations: usize) -> SolveReport {
    let active_lo = (0..u.len())
        .filter(|&i| is_at_bound(u[i], qp.u_lo[i]))
        .collect();
    let active_hi = (0..u.len())
        .filter(|&i| is_at_bound(u[i], qp.u_hi[i]))
        .collect();
    SolveReport {
        objective: qp.objective(&u),
        kkt_residual: kkt,
        iterations,
        active_lo,
        active_hi,
        u_opt: u,
    }
}
