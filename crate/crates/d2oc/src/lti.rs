//! Discrete-time LTI agent models and stacked output predictors.
//!
//! An agent follows `x(k+1) = A x(k) + B u(k)`, `y(k) = C x(k)` with a box
//! input constraint `u_min <= u <= u_max`. The relative degree `r` is the
//! first step at which an input can move the output: the smallest `l >= 1`
//! with `C A^(l-1) B != 0`. Stacking the `H` outputs `y(k+r) .. y(k+r+H-1)`
//! over the inputs `u(k) .. u(k+H-1)` gives the affine predictor
//! `Y = Theta U + Phi x(k)` used by the coverage QP.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Entries of `C A^(l-1) B` below this magnitude count as zero when searching
/// for the relative degree.
pub const RELATIVE_DEGREE_TOL: f64 = 1e-10;

/// Eigenvalue moduli up to `1 + EIGENVALUE_MARGIN` count as marginally stable.
pub const EIGENVALUE_MARGIN: f64 = 1e-9;

/// Linear agent dynamics with box input bounds.
///
/// Construction validates shapes and bounds and computes controllability and
/// spectral-radius diagnostics. Models violating the controllability or
/// marginal-stability assumptions are accepted with a logged warning so that
/// user-supplied systems can still be simulated and inspected.
#[derive(Debug, Clone)]
pub struct AgentModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    u_min: DVector<f64>,
    u_max: DVector<f64>,
    controllable: bool,
    spectral_radius: f64,
}

impl AgentModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        u_min: DVector<f64>,
        u_max: DVector<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "B has {} rows but A is {}x{}",
                b.nrows(),
                n,
                n
            )));
        }
        if c.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "C has {} columns but A is {}x{}",
                c.ncols(),
                n,
                n
            )));
        }
        let m = b.ncols();
        if u_min.len() != m || u_max.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "bounds have lengths {} and {} but B has {} columns",
                u_min.len(),
                u_max.len(),
                m
            )));
        }
        for mat in [&a, &b, &c] {
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("model matrices must be finite".into()));
            }
        }
        for i in 0..m {
            if u_min[i].is_nan() || u_max[i].is_nan() {
                return Err(Error::Config("input bounds must not be NaN".into()));
            }
            if !(u_min[i] < u_max[i]) {
                return Err(Error::Config(format!(
                    "input bounds must satisfy u_min < u_max elementwise, got [{}, {}] at channel {}",
                    u_min[i], u_max[i], i
                )));
            }
        }

        let controllable = controllability_rank(&a, &b) == n;
        let spectral_radius = spectral_radius(&a);
        if !controllable {
            log::warn!(
                "model is not controllable (rank {} of {})",
                controllability_rank(&a, &b),
                n
            );
        }
        if spectral_radius > 1.0 + EIGENVALUE_MARGIN {
            log::warn!(
                "model is not marginally stable (spectral radius {:.6})",
                spectral_radius
            );
        }

        Ok(Self {
            a,
            b,
            c,
            u_min,
            u_max,
            controllable,
            spectral_radius,
        })
    }

    /// Model without input bounds (both bounds at infinity).
    pub fn unbounded(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let m = b.ncols();
        Self::new(
            a,
            b,
            c,
            DVector::from_element(m, f64::NEG_INFINITY),
            DVector::from_element(m, f64::INFINITY),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn u_min(&self) -> &DVector<f64> {
        &self.u_min
    }

    pub fn u_max(&self) -> &DVector<f64> {
        &self.u_max
    }

    /// Rank of `[B, AB, ..., A^(n-1)B]` equals the state dimension.
    pub fn is_controllable(&self) -> bool {
        self.controllable
    }

    /// Largest eigenvalue modulus of `A`.
    pub fn spectral_radius(&self) -> f64 {
        self.spectral_radius
    }

    /// Every eigenvalue modulus is at most `1 + EIGENVALUE_MARGIN`.
    pub fn is_marginally_stable(&self) -> bool {
        self.spectral_radius <= 1.0 + EIGENVALUE_MARGIN
    }

    /// Half-widths `(u_max - u_min) / 2` of the input box, used to scale
    /// reachable-set generators. Infinite for unbounded channels.
    pub fn input_half_widths(&self) -> DVector<f64> {
        (&self.u_max - &self.u_min) / 2.0
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_model()
    }

    pub fn from_json_path(path: &std::path::Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from_model(self))?)
    }
}

/// State of one agent at discrete time `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub x: DVector<f64>,
    pub k: u64,
}

impl AgentState {
    pub fn new(x: DVector<f64>, k: u64) -> Self {
        Self { x, k }
    }
}

/// Result of advancing a state one step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub state: AgentState,
    /// True when the requested input fell outside the box and was clamped.
    pub clamped: bool,
}

/// Smallest `l` in `1..=r_max` with `max |C A^(l-1) B| > RELATIVE_DEGREE_TOL`.
pub fn relative_degree(model: &AgentModel, r_max: usize) -> Result<usize> {
    let mut ca = model.c.clone();
    for l in 1..=r_max {
        if (&ca * &model.b).amax() > RELATIVE_DEGREE_TOL {
            return Ok(l);
        }
        ca *= &model.a;
    }
    Err(Error::NoRelativeDegree { r_max })
}

/// Advance one step under `u`, clamping it into the input box first.
pub fn step(model: &AgentModel, state: &AgentState, u: &DVector<f64>) -> Result<StepResult> {
    if state.x.len() != model.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "state has {} entries but the model has {} states",
            state.x.len(),
            model.state_dim()
        )));
    }
    if u.len() != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "input has {} entries but the model has {} inputs",
            u.len(),
            model.input_dim()
        )));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("input must be finite".into()));
    }

    let mut clamped = false;
    let mut u_applied = u.clone();
    for i in 0..u.len() {
        let v = u[i].clamp(model.u_min[i], model.u_max[i]);
        if v != u[i] {
            clamped = true;
            u_applied[i] = v;
        }
    }
    if clamped {
        log::warn!("input clamped into bounds at step {}", state.k);
    }

    let x = &model.a * &state.x + &model.b * &u_applied;
    Ok(StepResult {
        state: AgentState::new(x, state.k + 1),
        clamped,
    })
}

/// Current output `y = C x`.
pub fn output(model: &AgentModel, state: &AgentState) -> Result<DVector<f64>> {
    if state.x.len() != model.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "state has {} entries but the model has {} states",
            state.x.len(),
            model.state_dim()
        )));
    }
    Ok(&model.c * &state.x)
}

/// Affine map from stacked inputs to stacked future outputs.
///
/// `Y = Theta U + Phi x(k)` where `Y` stacks `y(k+r) .. y(k+r+H-1)` and `U`
/// stacks `u(k) .. u(k+H-1)`. `Theta` is block lower-triangular Toeplitz with
/// block `(a, b)` equal to `C A^(r-1+a-b) B`; row block `h` of `Phi` is
/// `C A^(r+h)`.
#[derive(Debug, Clone)]
pub struct StackedPredictor {
    theta: DMatrix<f64>,
    phi: DMatrix<f64>,
    horizon: usize,
    relative_degree: usize,
    output_dim: usize,
    input_dim: usize,
}

impl StackedPredictor {
    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn relative_degree(&self) -> usize {
        self.relative_degree
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Stacked outputs for a state and stacked input vector.
    pub fn predict(&self, x: &DVector<f64>, u_stacked: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.phi.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "state has {} entries but the predictor expects {}",
                x.len(),
                self.phi.ncols()
            )));
        }
        if u_stacked.len() != self.input_dim * self.horizon {
            return Err(Error::DimensionMismatch(format!(
                "stacked input has {} entries but the predictor expects {}",
                u_stacked.len(),
                self.input_dim * self.horizon
            )));
        }
        Ok(&self.theta * u_stacked + &self.phi * x)
    }

    /// Row block `h` of `Theta` (the sensitivity of `y(k+r+h)` to the stacked
    /// inputs), as a `d x mH` matrix.
    pub fn theta_row_block(&self, h: usize) -> DMatrix<f64> {
        self.theta
            .rows(h * self.output_dim, self.output_dim)
            .into_owned()
    }

    /// Row block `h` of `Phi`, as a `d x n` matrix.
    pub fn phi_row_block(&self, h: usize) -> DMatrix<f64> {
        self.phi
            .rows(h * self.output_dim, self.output_dim)
            .into_owned()
    }
}

/// Build the stacked predictor for horizon `H >= 1` given the model's
/// relative degree `r`.
pub fn build_predictor(model: &AgentModel, r: usize, horizon: usize) -> Result<StackedPredictor> {
    if horizon == 0 {
        return Err(Error::Config("predictor horizon must be at least 1".into()));
    }
    if r == 0 {
        return Err(Error::Config("relative degree must be at least 1".into()));
    }
    let n = model.state_dim();
    let m = model.input_dim();
    let d = model.output_dim();

    // Powers A^0 .. A^(r+H-1) by iterated multiplication.
    let mut powers = Vec::with_capacity(r + horizon);
    powers.push(DMatrix::identity(n, n));
    for _ in 1..(r + horizon) {
        let next = powers.last().unwrap() * &model.a;
        powers.push(next);
    }

    // Markov blocks M_l = C A^(l-1) B for l = r .. r+H-1.
    let markov: Vec<DMatrix<f64>> = (0..horizon)
        .map(|j| &model.c * &powers[r - 1 + j] * &model.b)
        .collect();

    let mut theta = DMatrix::zeros(d * horizon, m * horizon);
    for row in 0..horizon {
        for col in 0..=row {
            theta
                .view_mut((row * d, col * m), (d, m))
                .copy_from(&markov[row - col]);
        }
    }

    let mut phi = DMatrix::zeros(d * horizon, n);
    for row in 0..horizon {
        phi.view_mut((row * d, 0), (d, n))
            .copy_from(&(&model.c * &powers[r + row - 1] * &model.a));
    }

    Ok(StackedPredictor {
        theta,
        phi,
        horizon,
        relative_degree: r,
        output_dim: d,
        input_dim: m,
    })
}

/// Velocity-controlled point agent: `A = I`, `B = dt I`, `C = I`, inputs
/// bounded by `v_max`. Relative degree 1.
pub fn single_integrator(dim: usize, dt: f64, v_max: f64) -> AgentModel {
    AgentModel::new(
        DMatrix::identity(dim, dim),
        DMatrix::identity(dim, dim) * dt,
        DMatrix::identity(dim, dim),
        DVector::from_element(dim, -v_max),
        DVector::from_element(dim, v_max),
    )
    .expect("integrator model is well formed")
}

/// Acceleration-controlled point agent with per-axis state `[p, v]`,
/// `A = [[1, dt], [0, 1]]`, `B = [0, dt]`, position output. Relative degree 2.
pub fn double_integrator(dim: usize, dt: f64, a_max: f64) -> AgentModel {
    let n = 2 * dim;
    let mut a = DMatrix::identity(n, n);
    let mut b = DMatrix::zeros(n, dim);
    let mut c = DMatrix::zeros(dim, n);
    for axis in 0..dim {
        a[(2 * axis, 2 * axis + 1)] = dt;
        b[(2 * axis + 1, axis)] = dt;
        c[(axis, 2 * axis)] = 1.0;
    }
    AgentModel::new(
        a,
        b,
        c,
        DVector::from_element(dim, -a_max),
        DVector::from_element(dim, a_max),
    )
    .expect("integrator model is well formed")
}

fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for i in 0..n {
        ctrb.view_mut((0, i * m), (n, m)).copy_from(&block);
        block = a * &block;
    }
    // Scale-relative rank cutoff against the largest singular value.
    let svd = ctrb.svd(false, false);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|&&s| s > smax * 1e-10)
        .count()
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// On-disk model description: dense row-major matrices with explicit
/// dimensions. Bounds are optional; entries may be numbers or the strings
/// `"inf"` / `"-inf"`.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    n: usize,
    m: usize,
    d: usize,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    u_min: Option<Vec<BoundEntry>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    u_max: Option<Vec<BoundEntry>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum BoundEntry {
    Num(f64),
    Sym(String),
}

impl BoundEntry {
    fn value(&self) -> Result<f64> {
        match self {
            BoundEntry::Num(v) => Ok(*v),
            BoundEntry::Sym(s) => match s.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(Error::Config(format!(
                    "unknown bound symbol {other:?}, expected \"inf\" or \"-inf\""
                ))),
            },
        }
    }

    fn from_value(v: f64) -> Self {
        if v == f64::INFINITY {
            BoundEntry::Sym("inf".into())
        } else if v == f64::NEG_INFINITY {
            BoundEntry::Sym("-inf".into())
        } else {
            BoundEntry::Num(v)
        }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<AgentModel> {
        let a = matrix_from_rows("a", &self.a, self.n, self.n)?;
        let b = matrix_from_rows("b", &self.b, self.n, self.m)?;
        let c = matrix_from_rows("c", &self.c, self.d, self.n)?;
        let u_min = match self.u_min {
            Some(entries) => bounds_from_entries("u_min", &entries, self.m)?,
            None => DVector::from_element(self.m, f64::NEG_INFINITY),
        };
        let u_max = match self.u_max {
            Some(entries) => bounds_from_entries("u_max", &entries, self.m)?,
            None => DVector::from_element(self.m, f64::INFINITY),
        };
        AgentModel::new(a, b, c, u_min, u_max)
    }

    fn from_model(model: &AgentModel) -> Self {
        let rows = |mat: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..mat.nrows())
                .map(|i| (0..mat.ncols()).map(|j| mat[(i, j)]).collect())
                .collect()
        };
        Self {
            n: model.state_dim(),
            m: model.input_dim(),
            d: model.output_dim(),
            a: rows(&model.a),
            b: rows(&model.b),
            c: rows(&model.c),
            u_min: Some(model.u_min.iter().map(|&v| BoundEntry::from_value(v)).collect()),
            u_max: Some(model.u_max.iter().map(|&v| BoundEntry::from_value(v)).collect()),
        }
    }
}

fn matrix_from_rows(name: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(Error::Config(format!(
            "matrix {name:?} has {} rows, expected {nrows}",
            rows.len()
        )));
    }
    let mut mat = DMatrix::zeros(nrows, ncols);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::Config(format!(
                "matrix {name:?} row {i} has {} entries, expected {ncols}",
                row.len()
            )));
        }
        for (j, &v) in row.iter().enumerate() {
            mat[(i, j)] = v;
        }
    }
    Ok(mat)
}

fn bounds_from_entries(name: &str, entries: &[BoundEntry], m: usize) -> Result<DVector<f64>> {
    if entries.len() != m {
        return Err(Error::Config(format!(
            "{name} has {} entries, expected {m}",
            entries.len()
        )));
    }
    let mut v = DVector::zeros(m);
    for (i, e) in entries.iter().enumerate() {
        v[i] = e.value()?;
    }
    Ok(v)
}
