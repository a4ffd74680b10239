//! Connectivity preservation through reachable-set range penalties.
//!
//! A designated link between agents `i` and `j` must survive whatever input
//! the neighbor applies. The neighbor's `h`-step output uncertainty under
//! box-bounded inputs is a zonotope with generator
//! `G_j(h) = [C A^(h-1) B, ..., C A^(r-1) B]` (columns scaled by the input
//! half-widths); its radius `R_j(h)` shrinks the usable communication range.
//! The nominal distance `d_i(h) = ||C A^h x_i - yhat_j(k+h) + F_i(h) U_i||`
//! is then pushed below `gamma * r_comm - R_j(h)` by the smooth penalty
//! `phi(z) = (kappa / eta) log(1 + exp(eta z))`, a softplus that vanishes
//! when the link has slack and grows linearly (slope `kappa`) once it is
//! violated. Minimum-separation penalties reuse the same machinery with the
//! inequality reversed.

use nalgebra::{DMatrix, DVector};

use crate::lti::{relative_degree, AgentModel, AgentState, StackedPredictor};
use crate::qp::{QpProblem, SolveReport};
use crate::{Error, Result};

/// Stop threshold on the projected-gradient residual of the soft solver.
pub const SOFT_STOP_TOL: f64 = 1e-6;

/// Iteration cap for the soft solver.
pub const SOFT_MAX_ITERS: usize = 2000;

/// Guard added to distance denominators in penalty gradients.
pub const DISTANCE_EPS: f64 = 1e-9;

/// Above this value of `eta * z` the softplus switches to its linear
/// asymptote to avoid overflowing `exp`.
pub const SOFTPLUS_OVERFLOW: f64 = 30.0;

/// Default staleness limit for neighbor forecasts, in steps.
pub const MAX_AGE_DEFAULT: u64 = 50;

/// How a zonotope generator matrix is collapsed to a scalar radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RadiusBound {
    /// Largest column 2-norm. Matches the interval-hull radius used by the
    /// range threshold.
    #[default]
    MaxColumn,
    /// Sum of column 2-norms: a coarser upper bound on the zonotope radius.
    SumColumns,
}

/// Parameters of the range and collision penalties.
#[derive(Debug, Clone)]
pub struct PenaltySpec {
    /// Penalty slope of the range term. Zero disables it.
    pub kappa: f64,
    /// Sharpness of the range softplus.
    pub eta: f64,
    /// Hard communication radius.
    pub r_comm: f64,
    /// Safety fraction of `r_comm` the nominal distance is held to.
    pub gamma: f64,
    /// Minimum separation between agents.
    pub d_min: f64,
    /// Penalty slope of the collision term. Zero disables it.
    pub collision_kappa: f64,
    /// Sharpness of the collision softplus.
    pub collision_eta: f64,
}

impl PenaltySpec {
    pub fn new(
        kappa: f64,
        eta: f64,
        r_comm: f64,
        gamma: f64,
        d_min: f64,
        collision_kappa: f64,
        collision_eta: f64,
    ) -> Result<Self> {
        if kappa < 0.0 || collision_kappa < 0.0 {
            return Err(Error::Config("penalty slopes must be non-negative".into()));
        }
        if eta <= 0.0 || collision_eta <= 0.0 {
            return Err(Error::Config("penalty sharpness must be positive".into()));
        }
        if r_comm <= 0.0 {
            return Err(Error::Config("communication radius must be positive".into()));
        }
        if !(0.0 < gamma && gamma <= 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1]".into()));
        }
        if d_min < 0.0 {
            return Err(Error::Config("minimum separation must be non-negative".into()));
        }
        Ok(Self {
            kappa,
            eta,
            r_comm,
            gamma,
            d_min,
            collision_kappa,
            collision_eta,
        })
    }

    /// Usable range margin once a neighbor's reachable radius is deducted.
    pub fn threshold(&self, radius: f64) -> f64 {
        self.gamma * self.r_comm - radius
    }
}

/// Overflow-safe softplus penalty `(kappa / eta) log(1 + exp(eta z))`.
///
/// For `eta * z` beyond [`SOFTPLUS_OVERFLOW`] the linear asymptote
/// `kappa z + (kappa / eta) log(1 + exp(-eta z))` is used instead; the two
/// branches are equal in exact arithmetic.
pub fn penalty(z: f64, kappa: f64, eta: f64) -> f64 {
    let s = eta * z;
    if s > SOFTPLUS_OVERFLOW {
        kappa * z + (kappa / eta) * (-s).exp().ln_1p()
    } else {
        (kappa / eta) * s.exp().ln_1p()
    }
}

/// Penalty slope `kappa * sigmoid(eta z)`, strictly inside `(0, kappa)`.
pub fn penalty_derivative(z: f64, kappa: f64, eta: f64) -> f64 {
    let s = eta * z;
    if s >= 0.0 {
        kappa / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        kappa * e / (1.0 + e)
    }
}

/// Radius of the `h`-step input-reachable output set of a model with
/// relative degree `r`, under the model's box input bounds.
///
/// Zero for `h < r` (inputs cannot move the output yet). Otherwise the
/// generator columns `C A^p B` for `p = r-1 .. h-1`, scaled per input
/// channel by the bound half-widths, are collapsed per `bound`. Unbounded
/// channels that can reach the output give an infinite radius.
pub fn reachable_radius(model: &AgentModel, r: usize, h: usize, bound: RadiusBound) -> f64 {
    if h < r || r == 0 {
        return 0.0;
    }
    let half = model.input_half_widths();
    let mut radius = 0.0f64;
    let mut ca = model.c() * power(model.a(), r - 1);
    for _ in (r - 1)..h {
        let block = &ca * model.b();
        for c in 0..block.ncols() {
            let base = block.column(c).norm();
            let scaled = if half[c].is_finite() {
                base * half[c]
            } else if base > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            match bound {
                RadiusBound::MaxColumn => radius = radius.max(scaled),
                RadiusBound::SumColumns => radius += scaled,
            }
        }
        ca *= model.a();
    }
    radius
}

fn power(a: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..p {
        out *= a;
    }
    out
}

/// Zero-input forecast of a neighbor's outputs over the penalty horizon,
/// with reachable radii inflated by the information's age.
#[derive(Debug, Clone)]
pub struct NeighborForecast {
    /// Predicted outputs at steps `k_now + r .. k_now + r + H - 1`.
    pub yhat: Vec<DVector<f64>>,
    /// Reachable radii at the same steps, measured from the exchange time.
    pub radius: Vec<f64>,
    /// Steps since the state was exchanged.
    pub age: u64,
}

/// Propagate a neighbor's last exchanged state forward under zero input.
///
/// `r` and `horizon` fix the penalty steps `k_now + r .. k_now + r + H - 1`;
/// radii are evaluated at the steps elapsed since the exchange, so stale
/// information widens them. Information older than `max_age` is refused.
pub fn forecast_neighbor(
    model: &AgentModel,
    last: &AgentState,
    k_now: u64,
    r: usize,
    horizon: usize,
    max_age: u64,
    bound: RadiusBound,
) -> Result<NeighborForecast> {
    if last.x.len() != model.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "neighbor state has {} entries but its model has {} states",
            last.x.len(),
            model.state_dim()
        )));
    }
    if k_now < last.k {
        return Err(Error::Config(format!(
            "neighbor state is time-stamped {} but the clock reads {k_now}",
            last.k
        )));
    }
    let age = k_now - last.k;
    if age > max_age {
        return Err(Error::StaleBeyondHorizon { age, max_age });
    }
    // The neighbor's own relative degree gates its generator columns; a
    // model whose inputs never reach the output has radius 0 at any step.
    let r_neighbor = relative_degree(model, model.state_dim()).ok();

    let mut yhat = Vec::with_capacity(horizon);
    let mut radius = Vec::with_capacity(horizon);
    let mut x = last.x.clone();
    let mut steps_applied = 0u64;
    for h in r..(r + horizon) {
        let elapsed = age + h as u64;
        while steps_applied < elapsed {
            x = model.a() * &x;
            steps_applied += 1;
        }
        yhat.push(model.c() * &x);
        radius.push(match r_neighbor {
            Some(rn) => reachable_radius(model, rn, elapsed as usize, bound),
            None => 0.0,
        });
    }
    Ok(NeighborForecast { yhat, radius, age })
}

/// One per-step range penalty: keep `||f_aff + f_mat U||` at or below
/// `threshold`.
#[derive(Debug, Clone)]
pub struct RangeTerm {
    pub f_aff: DVector<f64>,
    pub f_mat: DMatrix<f64>,
    pub threshold: f64,
}

/// One per-step separation penalty: keep `||f_aff + f_mat U||` at or above
/// `d_min`.
#[derive(Debug, Clone)]
pub struct CollisionTerm {
    pub f_aff: DVector<f64>,
    pub f_mat: DMatrix<f64>,
    pub d_min: f64,
}

/// The coverage QP plus smooth range and separation penalties.
#[derive(Debug, Clone)]
pub struct SoftProblem {
    qp: QpProblem,
    range_terms: Vec<RangeTerm>,
    collision_terms: Vec<CollisionTerm>,
}

impl SoftProblem {
    pub fn new(
        qp: QpProblem,
        range_terms: Vec<RangeTerm>,
        collision_terms: Vec<CollisionTerm>,
    ) -> Result<Self> {
        let dim = qp.dim();
        for term in &range_terms {
            if term.f_mat.ncols() != dim || term.f_aff.len() != term.f_mat.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "range term is {}x{} with offset length {}, expected {} columns",
                    term.f_mat.nrows(),
                    term.f_mat.ncols(),
                    term.f_aff.len(),
                    dim
                )));
            }
        }
        for term in &collision_terms {
            if term.f_mat.ncols() != dim || term.f_aff.len() != term.f_mat.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "collision term is {}x{} with offset length {}, expected {} columns",
                    term.f_mat.nrows(),
                    term.f_mat.ncols(),
                    term.f_aff.len(),
                    dim
                )));
            }
        }
        Ok(Self {
            qp,
            range_terms,
            collision_terms,
        })
    }

    pub fn qp(&self) -> &QpProblem {
        &self.qp
    }

    pub fn range_terms(&self) -> &[RangeTerm] {
        &self.range_terms
    }

    pub fn collision_terms(&self) -> &[CollisionTerm] {
        &self.collision_terms
    }
}

/// Attach range penalties toward each designated neighbor and separation
/// penalties toward each near agent to an assembled coverage QP.
///
/// The predicted own output at step `h` is `phi_h x + theta_h U`, so each
/// term's affine part is `phi_h x - yhat_h` and its matrix part is the
/// predictor's `h`-th row block. Range thresholds with no slack left
/// (`gamma r_comm <= R_j`) are kept but logged.
pub fn build_soft_problem(
    qp: QpProblem,
    pred: &StackedPredictor,
    x: &DVector<f64>,
    designated: &[&NeighborForecast],
    near: &[&NeighborForecast],
    spec: &PenaltySpec,
) -> Result<SoftProblem> {
    let d = pred.output_dim();
    let horizon = pred.horizon();
    if x.len() != pred.phi().ncols() {
        return Err(Error::DimensionMismatch(format!(
            "state has {} entries but the predictor expects {}",
            x.len(),
            pred.phi().ncols()
        )));
    }

    let mut range_terms = Vec::new();
    let mut collision_terms = Vec::new();
    for (kind, forecasts) in [("designated", designated), ("near", near)] {
        for fc in forecasts {
            if fc.yhat.len() != horizon || fc.radius.len() != horizon {
                return Err(Error::DimensionMismatch(format!(
                    "{kind} forecast covers {} steps, expected {horizon}",
                    fc.yhat.len()
                )));
            }
            for yh in &fc.yhat {
                if yh.len() != d {
                    return Err(Error::DimensionMismatch(format!(
                        "{kind} forecast outputs have {} coordinates, expected {d}",
                        yh.len()
                    )));
                }
            }
        }
    }

    for fc in designated {
        for h in 0..horizon {
            let threshold = spec.threshold(fc.radius[h]);
            if threshold <= 0.0 {
                log::warn!(
                    "range threshold is non-positive at step {h}: reachable radius {} consumes gamma r_comm = {}",
                    fc.radius[h],
                    spec.gamma * spec.r_comm
                );
            }
            range_terms.push(RangeTerm {
                f_aff: pred.phi_row_block(h) * x - &fc.yhat[h],
                f_mat: pred.theta_row_block(h),
                threshold,
            });
        }
    }
    for fc in near {
        for h in 0..horizon {
            collision_terms.push(CollisionTerm {
                f_aff: pred.phi_row_block(h) * x - &fc.yhat[h],
                f_mat: pred.theta_row_block(h),
                d_min: spec.d_min,
            });
        }
    }

    SoftProblem::new(qp, range_terms, collision_terms)
}

/// Value and gradient of the penalized objective
/// `J(U) + sum phi(d - threshold) + sum phi(d_min - d)`.
pub fn soft_objective(
    u: &DVector<f64>,
    sp: &SoftProblem,
    spec: &PenaltySpec,
) -> Result<(f64, DVector<f64>)> {
    if u.len() != sp.qp.dim() {
        return Err(Error::DimensionMismatch(format!(
            "input has {} entries but the problem has {}",
            u.len(),
            sp.qp.dim()
        )));
    }
    let mut value = sp.qp.objective(u);
    let mut grad = sp.qp.gradient(u);
    for term in &sp.range_terms {
        let residual = &term.f_aff + &term.f_mat * u;
        let dist = residual.norm();
        value += penalty(dist - term.threshold, spec.kappa, spec.eta);
        let slope = penalty_derivative(dist - term.threshold, spec.kappa, spec.eta);
        grad += term.f_mat.transpose() * residual * (slope / dist.max(DISTANCE_EPS));
    }
    for term in &sp.collision_terms {
        let residual = &term.f_aff + &term.f_mat * u;
        let dist = residual.norm();
        value += penalty(term.d_min - dist, spec.collision_kappa, spec.collision_eta);
        let slope = penalty_derivative(term.d_min - dist, spec.collision_kappa, spec.collision_eta);
        grad -= term.f_mat.transpose() * residual * (slope / dist.max(DISTANCE_EPS));
    }
    Ok((value, grad))
}

/// Projected gradient with Barzilai-Borwein step sizes and Armijo
/// backtracking for the penalized box problem.
///
/// Stops when the fixed-step projected-gradient residual
/// `||u - Proj(u - grad)||_inf` falls below [`SOFT_STOP_TOL`]. Hitting the
/// [`SOFT_MAX_ITERS`] cap returns [`Error::MaxIterations`] carrying the best
/// iterate so callers can degrade gracefully.
pub fn solve_soft(sp: &SoftProblem, spec: &PenaltySpec, u0: &DVector<f64>) -> Result<SolveReport> {
    let qp = &sp.qp;
    let mut u = qp.project(u0);
    let (mut value, mut grad) = soft_objective(&u, sp, spec)?;

    // Curvature scale for the first step: quadratic part plus the softplus
    // curvature bound kappa * eta / 4 through each term's matrix.
    let mut curvature = qp.h().row_iter().map(|r| r.abs().sum()).fold(0.0, f64::max);
    for term in &sp.range_terms {
        curvature += 0.25 * spec.kappa * spec.eta * term.f_mat.norm_squared();
    }
    for term in &sp.collision_terms {
        curvature += 0.25 * spec.collision_kappa * spec.collision_eta * term.f_mat.norm_squared();
    }
    let mut t = 1.0 / curvature.max(1e-12);
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;

    for iterations in 0..=SOFT_MAX_ITERS {
        let residual = (&u - qp.project(&(&u - &grad))).amax();
        if residual < SOFT_STOP_TOL {
            return Ok(soft_report(sp, spec, u, iterations)?);
        }
        if iterations == SOFT_MAX_ITERS {
            return Err(Error::MaxIterations(Box::new(soft_report(
                sp, spec, u, iterations,
            )?)));
        }

        if let Some((pu, pg)) = &prev {
            let s = &u - pu;
            let y = &grad - pg;
            let sy = s.dot(&y);
            if sy > 1e-16 {
                t = (s.dot(&s) / sy).clamp(1e-12, 1e12);
            }
        }

        // Armijo backtracking on the projected arc.
        let mut step = t;
        let (next, next_value, next_grad) = loop {
            let trial = qp.project(&(&u - &grad * step));
            let displacement = &trial - &u;
            let (tv, tg) = soft_objective(&trial, sp, spec)?;
            if tv <= value + crate::qp::ARMIJO_C * grad.dot(&displacement) {
                break (trial, tv, tg);
            }
            step *= crate::qp::ARMIJO_SHRINK;
            if step < 1e-18 {
                // No float-representable progress remains.
                return Ok(soft_report(sp, spec, u, iterations)?);
            }
        };
        prev = Some((u, grad));
        u = next;
        value = next_value;
        grad = next_grad;
    }
    unreachable!("loop returns at the iteration cap");
}

fn soft_report(
    sp: &SoftProblem,
    spec: &PenaltySpec,
    u: DVector<f64>,
    iterations: usize,
) -> Result<SolveReport> {
    let qp = &sp.qp;
    let (value, grad) = soft_objective(&u, sp, spec)?;
    let mut kkt = 0.0f64;
    let mut active_lo = Vec::new();
    let mut active_hi = Vec::new();
    for i in 0..u.len() {
        let at_lo = crate::qp::is_at_bound(u[i], qp.u_lo()[i]);
        let at_hi = crate::qp::is_at_bound(u[i], qp.u_hi()[i]);
        if at_lo {
            active_lo.push(i);
        }
        if at_hi {
            active_hi.push(i);
        }
        let violation = if at_lo && at_hi {
            0.0
        } else if at_lo {
            (-grad[i]).max(0.0)
        } else if at_hi {
            grad[i].max(0.0)
        } else {
            grad[i].abs()
        };
        kkt = kkt.max(violation);
    }
    Ok(SolveReport {
        u_opt: u,
        objective: value,
        kkt_residual: kkt,
        iterations,
        active_lo,
        active_hi,
    })
}
