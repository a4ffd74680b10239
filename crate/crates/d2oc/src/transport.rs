//! Reference maps, residual-weight ledgers, local sample selection,
//! barycenters, and Wasserstein distances.
//!
//! The coverage target is a weighted point cloud. Each agent keeps a ledger
//! of residual (still uncovered) weight per sample; ledgers only ever
//! decrease. A control step works on a small local selection of samples,
//! whose weighted barycenter and spread are what the coverage QP consumes:
//! for one horizon step the identity
//!
//! `sum_j pi_j ||y - q_j||^2 = (sum_j pi_j) ||y - qbar||^2 + sum_j pi_j ||q_j - qbar||^2`
//!
//! collapses the sample sum into a single weighted target plus a constant.
//! Coverage quality is scored with a sliced Wasserstein distance; an exact
//! small-instance optimal-transport solver serves as its oracle.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::{Error, Result};

/// Residual weights at or below this floor count as exhausted during sample
/// selection.
pub const WEIGHT_FLOOR_DEFAULT: f64 = 1e-4;

/// Default number of samples in a local selection.
pub const SELECTION_SIZE_DEFAULT: usize = 10;

/// Default number of random projection directions for the sliced distance.
pub const SWD_PROJECTIONS_DEFAULT: usize = 100;

/// Maximum `M * N` for the exact transport solver.
pub const EXACT_OT_SIZE_LIMIT: usize = 400;

/// Allowed total-mass mismatch between transport marginals.
pub const MASS_TOL: f64 = 1e-9;

/// Weighted point cloud describing where coverage is demanded.
///
/// Weights are normalized to sum to 1 at construction.
#[derive(Debug, Clone)]
pub struct ReferenceMap {
    points: Vec<DVector<f64>>,
    weights: DVector<f64>,
    dim: usize,
}

impl ReferenceMap {
    /// Build from points and optional weights (uniform when omitted).
    pub fn new(points: Vec<DVector<f64>>, weights: Option<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyMap);
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::Config("map points must have at least one coordinate".into()));
        }
        for (j, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "map point {j} has {} coordinates, expected {dim}",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("map point {j} is not finite")));
            }
        }
        let raw = match weights {
            Some(w) => {
                if w.len() != points.len() {
                    return Err(Error::LengthMismatch {
                        expected: points.len(),
                        got: w.len(),
                    });
                }
                if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
                    return Err(Error::Config("map weights must be finite and non-negative".into()));
                }
                DVector::from_vec(w)
            }
            None => DVector::from_element(points.len(), 1.0),
        };
        let total = raw.sum();
        if total <= 0.0 {
            return Err(Error::Config("map weights must carry positive total mass".into()));
        }
        Ok(Self {
            points,
            weights: raw / total,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, j: usize) -> &DVector<f64> {
        &self.points[j]
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Load from JSON: `{"points": [[x, y], ...], "weights": [...]}` with
    /// weights optional.
    pub fn from_json_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct MapFile {
            points: Vec<Vec<f64>>,
            #[serde(default)]
            weights: Option<Vec<f64>>,
        }
        let file: MapFile = serde_json::from_str(text)?;
        let points = file.points.into_iter().map(DVector::from_vec).collect();
        Self::new(points, file.weights)
    }

    /// Load from CSV, one point per row. With a header, the coordinate
    /// columns are `x`, `y`, `z` and an optional `weight` column is honored;
    /// without one, every column is a coordinate.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or(Error::EmptyMap)?;
        let header: Option<Vec<String>> = if first
            .split(',')
            .all(|f| f.trim().parse::<f64>().is_ok())
        {
            None
        } else {
            Some(first.split(',').map(|f| f.trim().to_string()).collect())
        };

        let (coord_cols, weight_col): (Vec<usize>, Option<usize>) = match &header {
            Some(names) => {
                let mut coords = Vec::new();
                let mut weight = None;
                for (i, name) in names.iter().enumerate() {
                    match name.as_str() {
                        "x" | "y" | "z" => coords.push(i),
                        "weight" => weight = Some(i),
                        other => {
                            return Err(Error::Config(format!(
                                "unknown map column {other:?}, expected x, y, z, or weight"
                            )))
                        }
                    }
                }
                (coords, weight)
            }
            None => (Vec::new(), None),
        };

        let data_lines: Vec<&str> = if header.is_some() {
            lines.collect()
        } else {
            std::iter::once(first).chain(lines).collect()
        };

        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (row, line) in data_lines.iter().enumerate() {
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| {
                        Error::Config(format!("map row {row}: {f:?} is not a number"))
                    })
                })
                .collect::<Result<_>>()?;
            if header.is_some() {
                let coords: Vec<f64> = coord_cols
                    .iter()
                    .map(|&i| {
                        fields.get(i).copied().ok_or_else(|| {
                            Error::Config(format!("map row {row} is missing column {i}"))
                        })
                    })
                    .collect::<Result<_>>()?;
                points.push(DVector::from_vec(coords));
                if let Some(w) = weight_col {
                    weights.push(fields.get(w).copied().ok_or_else(|| {
                        Error::Config(format!("map row {row} is missing its weight"))
                    })?);
                }
            } else {
                points.push(DVector::from_vec(fields));
            }
        }
        let weights = if weights.is_empty() { None } else { Some(weights) };
        Self::new(points, weights)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_csv_str(&text),
        }
    }

    /// CSV with header, coordinates then the normalized weight.
    pub fn to_csv_string(&self) -> String {
        let names = ["x", "y", "z"];
        let mut out = String::new();
        for i in 0..self.dim {
            out.push_str(names.get(i).unwrap_or(&"x"));
            out.push(',');
        }
        out.push_str("weight\n");
        for (p, w) in self.points.iter().zip(self.weights.iter()) {
            for v in p.iter() {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{w}\n"));
        }
        out
    }
}

/// One agent's view of how much weight each map sample still demands.
///
/// Entries start at the map weights and only ever decrease: coverage scales
/// them down, merging takes elementwise minima.
#[derive(Debug, Clone)]
pub struct AgentWeightLedger {
    residual: DVector<f64>,
    initial: DVector<f64>,
}

impl AgentWeightLedger {
    pub fn new(map: &ReferenceMap) -> Self {
        Self {
            residual: map.weights().clone(),
            initial: map.weights().clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.residual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residual.len() == 0
    }

    pub fn residual(&self) -> &DVector<f64> {
        &self.residual
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.initial
    }

    pub fn total_mass(&self) -> f64 {
        self.residual.sum()
    }

    /// Scale entry `j` by a factor in `[0, 1]`.
    pub fn scale(&mut self, j: usize, factor: f64) {
        debug_assert!((0.0..=1.0).contains(&factor));
        self.residual[j] *= factor.clamp(0.0, 1.0);
    }

    /// Take the elementwise minimum with another residual vector.
    pub fn merge_min(&mut self, other: &DVector<f64>) -> Result<()> {
        if other.len() != self.residual.len() {
            return Err(Error::LengthMismatch {
                expected: self.residual.len(),
                got: other.len(),
            });
        }
        for j in 0..self.residual.len() {
            if other[j] < self.residual[j] {
                self.residual[j] = other[j];
            }
        }
        Ok(())
    }
}

/// Tuning knobs for local sample selection.
#[derive(Debug, Clone)]
pub struct SelectionParams {
    /// Number of samples to select.
    pub k: usize,
    /// Residuals at or below this floor are skipped.
    pub w_floor: f64,
    /// Distance scale of the proximity discount.
    pub lambda: f64,
}

impl SelectionParams {
    pub fn new(k: usize, w_floor: f64, lambda: f64) -> Self {
        Self { k, w_floor, lambda }
    }

    /// Defaults tied to a communication radius: the proximity scale is half
    /// the radius.
    pub fn for_comm_radius(r_comm: f64) -> Self {
        Self {
            k: SELECTION_SIZE_DEFAULT,
            w_floor: WEIGHT_FLOOR_DEFAULT,
            lambda: r_comm / 2.0,
        }
    }
}

/// Selected sample indices and weights for one horizon step.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionStep {
    pub indices: Vec<usize>,
    pub pi: Vec<f64>,
}

/// Per-horizon-step selections. All steps share the same selection; the type
/// keeps them separate so heterogeneous schedules stay representable.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSelection {
    steps: Vec<SelectionStep>,
}

impl LocalSelection {
    pub fn from_steps(steps: Vec<SelectionStep>) -> Self {
        Self { steps }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, h: usize) -> &SelectionStep {
        &self.steps[h]
    }

    pub fn steps(&self) -> &[SelectionStep] {
        &self.steps
    }
}

/// Pick up to `k` samples near `pos` that still demand coverage.
///
/// Samples with residual above the floor are ranked by
/// `residual_j * exp(-||pos - q_j|| / lambda)` and the top `k` keep weights
/// proportional to their residuals, normalized to sum to 1. When every
/// residual is at or below the floor, the `k` nearest samples are taken with
/// uniform weights. The same selection is replicated across all `horizon`
/// steps.
pub fn select_local_samples(
    pos: &DVector<f64>,
    ledger: &AgentWeightLedger,
    map: &ReferenceMap,
    params: &SelectionParams,
    horizon: usize,
) -> Result<LocalSelection> {
    if map.is_empty() {
        return Err(Error::EmptyMap);
    }
    if pos.len() != map.dim() {
        return Err(Error::DimensionMismatch(format!(
            "position has {} coordinates but the map has {}",
            pos.len(),
            map.dim()
        )));
    }
    if ledger.len() != map.len() {
        return Err(Error::LengthMismatch {
            expected: map.len(),
            got: ledger.len(),
        });
    }
    if horizon == 0 || params.k == 0 {
        return Err(Error::Config("selection horizon and size must be at least 1".into()));
    }

    let residual = ledger.residual();
    let mut scored: Vec<(usize, f64)> = (0..map.len())
        .filter(|&j| residual[j] > params.w_floor)
        .map(|j| {
            let dist = (pos - map.point(j)).norm();
            (j, residual[j] * (-dist / params.lambda).exp())
        })
        .collect();

    let step = if scored.is_empty() {
        // Everything is covered; fall back to the nearest samples so the QP
        // stays well posed.
        let mut by_dist: Vec<(usize, f64)> = (0..map.len())
            .map(|j| (j, (pos - map.point(j)).norm()))
            .collect();
        by_dist.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        by_dist.truncate(params.k);
        let k = by_dist.len();
        SelectionStep {
            indices: by_dist.into_iter().map(|(j, _)| j).collect(),
            pi: vec![1.0 / k as f64; k],
        }
    } else {
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(params.k);
        let indices: Vec<usize> = scored.iter().map(|&(j, _)| j).collect();
        let total: f64 = indices.iter().map(|&j| residual[j]).sum();
        if total <= 0.0 {
            return Err(Error::DegenerateWeights { step: 0 });
        }
        SelectionStep {
            pi: indices.iter().map(|&j| residual[j] / total).collect(),
            indices,
        }
    };

    Ok(LocalSelection {
        steps: vec![step; horizon],
    })
}

/// Weighted barycenter, total-weight root, and spread per horizon step.
///
/// `omega_h = sqrt(sum_j pi_j)` is the row scale the QP applies to step `h`;
/// `spread_h = sum_j pi_j ||q_j - qbar_h||^2` is the constant the barycenter
/// substitution leaves behind.
#[derive(Debug, Clone)]
pub struct BarycenterTrack {
    qbar: Vec<DVector<f64>>,
    omega: Vec<f64>,
    spread: Vec<f64>,
    dim: usize,
}

impl BarycenterTrack {
    pub fn horizon(&self) -> usize {
        self.qbar.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn qbar(&self, h: usize) -> &DVector<f64> {
        &self.qbar[h]
    }

    pub fn omega(&self, h: usize) -> f64 {
        self.omega[h]
    }

    pub fn spread(&self, h: usize) -> f64 {
        self.spread[h]
    }

    /// Barycenters stacked into one `d * H` vector.
    pub fn stacked_qbar(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim * self.qbar.len());
        for (h, q) in self.qbar.iter().enumerate() {
            out.rows_mut(h * self.dim, self.dim).copy_from(q);
        }
        out
    }

    pub fn total_spread(&self) -> f64 {
        self.spread.iter().sum()
    }
}

/// Barycenter, weight root, and spread of each selection step.
pub fn barycenter(selection: &LocalSelection, map: &ReferenceMap) -> Result<BarycenterTrack> {
    let dim = map.dim();
    let mut qbar = Vec::with_capacity(selection.horizon());
    let mut omega = Vec::with_capacity(selection.horizon());
    let mut spread = Vec::with_capacity(selection.horizon());
    for (h, step) in selection.steps().iter().enumerate() {
        if step.indices.len() != step.pi.len() {
            return Err(Error::LengthMismatch {
                expected: step.indices.len(),
                got: step.pi.len(),
            });
        }
        let total: f64 = step.pi.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateWeights { step: h });
        }
        let mut center = DVector::zeros(dim);
        for (&j, &pi) in step.indices.iter().zip(&step.pi) {
            if j >= map.len() {
                return Err(Error::Config(format!(
                    "selection step {h} references sample {j} outside the map"
                )));
            }
            center += map.point(j) * pi;
        }
        center /= total;
        let mut var = 0.0;
        for (&j, &pi) in step.indices.iter().zip(&step.pi) {
            var += pi * (map.point(j) - &center).norm_squared();
        }
        qbar.push(center);
        omega.push(total.sqrt());
        spread.push(var);
    }
    Ok(BarycenterTrack {
        qbar,
        omega,
        spread,
        dim,
    })
}

/// Direct evaluation of the local coverage cost
/// `sum_h sum_j pi_j ||y_h - q_j||^2` for stacked outputs `y`.
pub fn local_cost_direct(
    y_stacked: &DVector<f64>,
    selection: &LocalSelection,
    map: &ReferenceMap,
) -> Result<f64> {
    let d = map.dim();
    if y_stacked.len() != d * selection.horizon() {
        return Err(Error::DimensionMismatch(format!(
            "stacked outputs have {} entries, expected {}",
            y_stacked.len(),
            d * selection.horizon()
        )));
    }
    let mut cost = 0.0;
    for (h, step) in selection.steps().iter().enumerate() {
        let y = y_stacked.rows(h * d, d);
        for (&j, &pi) in step.indices.iter().zip(&step.pi) {
            cost += pi * (y - map.point(j)).norm_squared();
        }
    }
    Ok(cost)
}

/// Sliced 2-Wasserstein distance between two point sets with uniform masses.
///
/// Draws `n_projections` unit directions from a seeded generator, projects
/// both sets, and averages squared 1D distances obtained by quantile matching
/// at `max(M, N)` equally spaced quantiles (midpoint convention, linear
/// interpolation between order statistics). Deterministic for a fixed seed.
pub fn sliced_wasserstein(
    p: &[DVector<f64>],
    q: &[DVector<f64>],
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyMap);
    }
    if n_projections == 0 {
        return Err(Error::Config("need at least one projection direction".into()));
    }
    let dim = p[0].len();
    for v in p.iter().chain(q.iter()) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "point sets mix {} and {} coordinates",
                dim,
                v.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total_sq = 0.0;
    for _ in 0..n_projections {
        let dir: DVector<f64> = loop {
            let v = DVector::from_fn(dim, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
            let norm = v.norm();
            if norm > 1e-12 {
                break v / norm;
            }
        };
        let mut proj_p: Vec<f64> = p.iter().map(|pt| pt.dot(&dir)).collect();
        let mut proj_q: Vec<f64> = q.iter().map(|pt| pt.dot(&dir)).collect();
        proj_p.sort_by(|a, b| a.partial_cmp(b).unwrap());
        proj_q.sort_by(|a, b| a.partial_cmp(b).unwrap());
        total_sq += wasserstein2_1d_sq(&proj_p, &proj_q);
    }
    Ok((total_sq / n_projections as f64).sqrt())
}

/// Squared 1D 2-Wasserstein distance between sorted samples with uniform
/// masses, via quantile matching at `max(M, N)` midpoint quantiles.
fn wasserstein2_1d_sq(xs: &[f64], ys: &[f64]) -> f64 {
    let n_q = xs.len().max(ys.len());
    let mut total = 0.0;
    for i in 0..n_q {
        let t = (i as f64 + 0.5) / n_q as f64;
        let diff = quantile_midpoint(xs, t) - quantile_midpoint(ys, t);
        total += diff * diff;
    }
    total / n_q as f64
}

/// Empirical quantile with knots at `(j + 0.5) / n`, linear between order
/// statistics and flat beyond the extremes. Evaluating at the knots of an
/// equally sized grid returns the order statistics exactly, so equal-size
/// inputs reduce to sorted matching.
fn quantile_midpoint(sorted: &[f64], t: f64) -> f64 {
    let n = sorted.len();
    let pos = t * n as f64 - 0.5;
    if pos <= 0.0 {
        return sorted[0];
    }
    if pos >= (n - 1) as f64 {
        return sorted[n - 1];
    }
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Exact 2-Wasserstein distance between small weighted point sets, solved as
/// a transportation problem by successive shortest augmenting paths.
///
/// Marginals must carry equal total mass within [`MASS_TOL`] and the problem
/// size `M * N` must not exceed [`EXACT_OT_SIZE_LIMIT`]. Returns
/// `sqrt(sum_ij flow_ij ||p_i - q_j||^2)`; with probability masses this is
/// the 2-Wasserstein distance.
pub fn exact_wasserstein2_small(
    p: &[DVector<f64>],
    a: &[f64],
    q: &[DVector<f64>],
    b: &[f64],
) -> Result<f64> {
    let m = p.len();
    let n = q.len();
    if m == 0 || n == 0 {
        return Err(Error::EmptyMap);
    }
    if a.len() != m {
        return Err(Error::LengthMismatch { expected: m, got: a.len() });
    }
    if b.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: b.len() });
    }
    if m * n > EXACT_OT_SIZE_LIMIT {
        return Err(Error::ProblemTooLarge {
            size: m * n,
            limit: EXACT_OT_SIZE_LIMIT,
        });
    }
    if a.iter().chain(b.iter()).any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::Config("masses must be finite and non-negative".into()));
    }
    let total_a: f64 = a.iter().sum();
    let total_b: f64 = b.iter().sum();
    if (total_a - total_b).abs() > MASS_TOL {
        return Err(Error::InfeasibleMarginals {
            mismatch: (total_a - total_b).abs(),
        });
    }
    let dim = p[0].len();
    for v in p.iter().chain(q.iter()) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "point sets mix {} and {} coordinates",
                dim,
                v.len()
            )));
        }
    }

    let cost: Vec<Vec<f64>> = p
        .iter()
        .map(|pi| q.iter().map(|qj| (pi - qj).norm_squared()).collect())
        .collect();

    // Min-cost flow on the bipartite transportation graph. Node potentials
    // keep reduced costs non-negative so Dijkstra applies; every
    // augmentation exhausts a source or a sink, so at most M + N rounds run.
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = vec![vec![0.0f64; n]; m];
    let mut pot = vec![0.0f64; m + n];
    let remaining_floor = total_a.max(1.0) * 1e-15;

    loop {
        let remaining: f64 = supply.iter().sum();
        if remaining <= remaining_floor {
            break;
        }

        // Dijkstra over m + n nodes with reduced costs.
        const UNSET: usize = usize::MAX;
        let mut dist = vec![f64::INFINITY; m + n];
        let mut parent = vec![UNSET; m + n];
        let mut done = vec![false; m + n];
        for (i, &s) in supply.iter().enumerate() {
            if s > remaining_floor {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut node = UNSET;
            let mut best = f64::INFINITY;
            for (w, &dw) in dist.iter().enumerate() {
                if !done[w] && dw < best {
                    best = dw;
                    node = w;
                }
            }
            if node == UNSET {
                break;
            }
            done[node] = true;
            if node < m {
                let i = node;
                for j in 0..n {
                    let rc = cost[i][j] + pot[i] - pot[m + j];
                    let nd = dist[i] + rc.max(0.0);
                    if nd < dist[m + j] {
                        dist[m + j] = nd;
                        parent[m + j] = i;
                    }
                }
            } else {
                let j = node - m;
                for i in 0..m {
                    if flow[i][j] > 0.0 {
                        let rc = -cost[i][j] + pot[m + j] - pot[i];
                        let nd = dist[m + j] + rc.max(0.0);
                        if nd < dist[i] {
                            dist[i] = nd;
                            parent[i] = m + j;
                        }
                    }
                }
            }
        }

        // Cheapest sink that still demands mass.
        let mut sink = UNSET;
        let mut best = f64::INFINITY;
        for j in 0..n {
            if demand[j] > remaining_floor && dist[m + j] < best {
                best = dist[m + j];
                sink = m + j;
            }
        }
        if sink == UNSET {
            return Err(Error::InfeasibleMarginals { mismatch: remaining });
        }

        for w in 0..(m + n) {
            if dist[w].is_finite() {
                pot[w] += dist[w].min(dist[sink]);
            }
        }

        // Trace the augmenting path back to a source and push flow.
        let mut path = vec![sink];
        while parent[*path.last().unwrap()] != UNSET {
            path.push(parent[*path.last().unwrap()]);
        }
        path.reverse();
        let source = path[0];
        let mut delta = supply[source].min(demand[sink - m]);
        for pair in path.windows(2) {
            if pair[0] >= m {
                // Backward arc sink -> source: limited by existing flow.
                delta = delta.min(flow[pair[1]][pair[0] - m]);
            }
        }
        for pair in path.windows(2) {
            if pair[0] < m {
                flow[pair[0]][pair[1] - m] += delta;
            } else {
                flow[pair[1]][pair[0] - m] -= delta;
            }
        }
        supply[source] -= delta;
        demand[sink - m] -= delta;
    }

    let mut total_cost = 0.0;
    for i in 0..m {
        for j in 0..n {
            total_cost += flow[i][j] * cost[i][j];
        }
    }
    Ok(total_cost.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(coords: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(coords)
    }

    fn grid_map_1d(values: &[f64]) -> ReferenceMap {
        ReferenceMap::new(values.iter().map(|&v| pt(&[v])).collect(), None).unwrap()
    }

    #[test]
    fn map_normalizes_weights() {
        let map = ReferenceMap::new(
            vec![pt(&[0.0]), pt(&[1.0])],
            Some(vec![2.0, 6.0]),
        )
        .unwrap();
        assert_relative_eq!(map.weights()[0], 0.25);
        assert_relative_eq!(map.weights()[1], 0.75);
    }

    #[test]
    fn empty_map_is_rejected() {
        assert!(matches!(ReferenceMap::new(vec![], None), Err(Error::EmptyMap)));
    }

    #[test]
    fn map_csv_round_trips() {
        let map = ReferenceMap::new(
            vec![pt(&[0.0, 1.0]), pt(&[2.5, -3.0])],
            Some(vec![0.25, 0.75]),
        )
        .unwrap();
        let text = map.to_csv_string();
        let back = ReferenceMap::from_csv_str(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.dim(), 2);
        assert_relative_eq!(back.point(1)[0], 2.5);
        assert_relative_eq!(back.weights()[1], 0.75);
    }

    #[test]
    fn headerless_csv_treats_all_columns_as_coordinates() {
        let map = ReferenceMap::from_csv_str("0.0,1.0,2.0\n3.0,4.0,5.0\n").unwrap();
        assert_eq!(map.dim(), 3);
        assert_relative_eq!(map.weights()[0], 0.5);
    }

    #[test]
    fn selection_prefers_high_residual_nearby_samples() {
        let map = grid_map_1d(&[0.0, 1.0, 2.0, 50.0]);
        let ledger = AgentWeightLedger::new(&map);
        let params = SelectionParams::new(2, 1e-4, 5.0);
        let sel = select_local_samples(&pt(&[0.0]), &ledger, &map, &params, 3).unwrap();
        assert_eq!(sel.horizon(), 3);
        assert_eq!(sel.step(0).indices, vec![0, 1]);
        // pi proportional to residuals, which are uniform here.
        assert_relative_eq!(sel.step(0).pi[0], 0.5);
        // Same selection replicated across the horizon.
        assert_eq!(sel.step(0), sel.step(2));
    }

    #[test]
    fn selection_falls_back_to_nearest_when_everything_is_covered() {
        let map = grid_map_1d(&[0.0, 1.0, 2.0]);
        let mut ledger = AgentWeightLedger::new(&map);
        for j in 0..3 {
            ledger.scale(j, 0.0);
        }
        let params = SelectionParams::new(2, 1e-4, 5.0);
        let sel = select_local_samples(&pt(&[1.9]), &ledger, &map, &params, 1).unwrap();
        assert_eq!(sel.step(0).indices, vec![2, 1]);
        assert_relative_eq!(sel.step(0).pi[0], 0.5);
    }

    #[test]
    fn selection_skips_samples_at_the_floor() {
        let map = ReferenceMap::new(
            vec![pt(&[0.0]), pt(&[0.5])],
            Some(vec![0.5, 0.5]),
        )
        .unwrap();
        let mut ledger = AgentWeightLedger::new(&map);
        ledger.scale(0, 0.0);
        let params = SelectionParams::new(2, 1e-4, 5.0);
        let sel = select_local_samples(&pt(&[0.0]), &ledger, &map, &params, 1).unwrap();
        assert_eq!(sel.step(0).indices, vec![1]);
        assert_relative_eq!(sel.step(0).pi[0], 1.0);
    }

    #[test]
    fn ledger_merge_requires_matching_lengths() {
        let map = grid_map_1d(&[0.0, 1.0]);
        let mut ledger = AgentWeightLedger::new(&map);
        let err = ledger.merge_min(&DVector::from_vec(vec![0.1]));
        assert!(matches!(err, Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn barycenter_of_symmetric_pair_sits_in_the_middle() {
        let map = grid_map_1d(&[0.0, 2.0]);
        let sel = LocalSelection::from_steps(vec![SelectionStep {
            indices: vec![0, 1],
            pi: vec![0.5, 0.5],
        }]);
        let track = barycenter(&sel, &map).unwrap();
        assert_relative_eq!(track.qbar(0)[0], 1.0);
        assert_relative_eq!(track.omega(0), 1.0);
        assert_relative_eq!(track.spread(0), 0.5 * 1.0 + 0.5 * 1.0);
    }

    #[test]
    fn barycenter_rejects_zero_total_weight() {
        let map = grid_map_1d(&[0.0, 2.0]);
        let sel = LocalSelection::from_steps(vec![SelectionStep {
            indices: vec![0, 1],
            pi: vec![0.0, 0.0],
        }]);
        assert!(matches!(
            barycenter(&sel, &map),
            Err(Error::DegenerateWeights { step: 0 })
        ));
    }

    #[test]
    fn local_cost_direct_matches_hand_value() {
        // One step, samples 0 and 2 with unit weights, output 1:
        // 1 * (1-0)^2 + 1 * (1-2)^2 = 2.
        let map = grid_map_1d(&[0.0, 2.0]);
        let sel = LocalSelection::from_steps(vec![SelectionStep {
            indices: vec![0, 1],
            pi: vec![1.0, 1.0],
        }]);
        let cost = local_cost_direct(&pt(&[1.0]), &sel, &map).unwrap();
        assert_relative_eq!(cost, 2.0);
    }

    /// Barycenter identity: the direct sample sum equals the collapsed form
    /// for arbitrary weights and outputs.
    #[test]
    fn barycenter_identity_holds_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let dim = rng.random_range(1..=3);
            let n_samples = rng.random_range(2..=12);
            let horizon = rng.random_range(1..=4);
            let points: Vec<DVector<f64>> = (0..n_samples)
                .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0)))
                .collect();
            let map = ReferenceMap::new(points, None).unwrap();
            let steps: Vec<SelectionStep> = (0..horizon)
                .map(|_| {
                    let k = rng.random_range(1..=n_samples);
                    let mut indices: Vec<usize> = (0..n_samples).collect();
                    for i in (1..indices.len()).rev() {
                        indices.swap(i, rng.random_range(0..=i));
                    }
                    indices.truncate(k);
                    let pi: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..2.0)).collect();
                    SelectionStep { indices, pi }
                })
                .collect();
            let sel = LocalSelection::from_steps(steps);
            let track = barycenter(&sel, &map).unwrap();
            let y = DVector::from_fn(dim * horizon, |_, _| rng.random_range(-5.0..5.0));

            let direct = local_cost_direct(&y, &sel, &map).unwrap();
            let mut collapsed = 0.0;
            for h in 0..horizon {
                let yh = y.rows(h * dim, dim);
                collapsed += track.omega(h).powi(2) * (yh - track.qbar(h)).norm_squared()
                    + track.spread(h);
            }
            assert_relative_eq!(direct, collapsed, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn swd_of_identical_sets_is_zero() {
        let p = vec![pt(&[0.0, 1.0]), pt(&[2.0, 3.0]), pt(&[-1.0, 0.5])];
        let d = sliced_wasserstein(&p, &p, 16, 3).unwrap();
        assert!(d.abs() < 1e-12, "distance {d} should vanish");
    }

    #[test]
    fn swd_of_translated_singletons_is_the_translation() {
        // Projections of two singletons differ by dir . delta; averaging
        // |dir . delta|^2 over the seeded directions stays below ||delta||.
        let p = vec![pt(&[0.0])];
        let q = vec![pt(&[1.0])];
        let d = sliced_wasserstein(&p, &q, 8, 7).unwrap();
        assert_relative_eq!(d, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn swd_is_deterministic_for_a_fixed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<DVector<f64>> = (0..20)
            .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0)))
            .collect();
        let q: Vec<DVector<f64>> = (0..15)
            .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0)))
            .collect();
        let d1 = sliced_wasserstein(&p, &q, 32, 11).unwrap();
        let d2 = sliced_wasserstein(&p, &q, 32, 11).unwrap();
        assert_eq!(d1.to_bits(), d2.to_bits());
        let d3 = sliced_wasserstein(&p, &q, 32, 12).unwrap();
        assert_ne!(d1.to_bits(), d3.to_bits());
    }

    #[test]
    fn swd_rejects_mixed_dimensions() {
        let p = vec![pt(&[0.0, 1.0])];
        let q = vec![pt(&[0.0])];
        assert!(matches!(
            sliced_wasserstein(&p, &q, 4, 0),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn exact_ot_on_unit_point_pair() {
        let d = exact_wasserstein2_small(&[pt(&[0.0])], &[1.0], &[pt(&[1.0])], &[1.0]).unwrap();
        assert_relative_eq!(d, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_ot_splits_mass_between_two_targets() {
        // P = {0, 2} with masses (0.5, 0.5), Q = {1} with mass 1:
        // each unit of mass moves distance 1, so W2 = 1.
        let d = exact_wasserstein2_small(
            &[pt(&[0.0]), pt(&[2.0])],
            &[0.5, 0.5],
            &[pt(&[1.0])],
            &[1.0],
        )
        .unwrap();
        assert_relative_eq!(d, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_ot_rejects_unbalanced_masses() {
        let err = exact_wasserstein2_small(&[pt(&[0.0])], &[1.0], &[pt(&[1.0])], &[0.5]);
        assert!(matches!(err, Err(Error::InfeasibleMarginals { .. })));
    }

    #[test]
    fn exact_ot_rejects_oversized_problems() {
        let p: Vec<DVector<f64>> = (0..21).map(|i| pt(&[i as f64])).collect();
        let a = vec![1.0 / 21.0; 21];
        let err = exact_wasserstein2_small(&p, &a, &p, &a);
        assert!(matches!(err, Err(Error::ProblemTooLarge { .. })));
    }

    /// Exact 1D transport cost between arbitrary-mass atom lists, computed
    /// by merging the two quantile step functions. Independent of the
    /// min-cost-flow routine under test.
    fn quantile_merge_cost_1d(xs: &[f64], a: &[f64], ys: &[f64], b: &[f64]) -> f64 {
        let mut xi: Vec<usize> = (0..xs.len()).collect();
        xi.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
        let mut yi: Vec<usize> = (0..ys.len()).collect();
        yi.sort_by(|&i, &j| ys[i].partial_cmp(&ys[j]).unwrap());
        let mut cost = 0.0;
        let (mut i, mut j) = (0, 0);
        let mut a_rem = a[xi[0]];
        let mut b_rem = b[yi[0]];
        loop {
            let delta = a_rem.min(b_rem);
            if delta > 0.0 {
                let diff = xs[xi[i]] - ys[yi[j]];
                cost += delta * diff * diff;
            }
            a_rem -= delta;
            b_rem -= delta;
            if a_rem <= 1e-15 {
                i += 1;
                if i >= xi.len() {
                    break;
                }
                a_rem = a[xi[i]];
            }
            if b_rem <= 1e-15 {
                j += 1;
                if j >= yi.len() {
                    break;
                }
                b_rem = b[yi[j]];
            }
        }
        cost
    }

    #[test]
    fn exact_ot_matches_quantile_merge_in_1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let m = rng.random_range(1..=8);
            let n = rng.random_range(1..=8);
            let xs: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..10.0)).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mut a: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
            let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let sa: f64 = a.iter().sum();
            let sb: f64 = b.iter().sum();
            for v in &mut a {
                *v /= sa;
            }
            for v in &mut b {
                *v /= sb;
            }
            let pts_x: Vec<DVector<f64>> = xs.iter().map(|&v| pt(&[v])).collect();
            let pts_y: Vec<DVector<f64>> = ys.iter().map(|&v| pt(&[v])).collect();
            let got = exact_wasserstein2_small(&pts_x, &a, &pts_y, &b).unwrap();
            let expected = quantile_merge_cost_1d(&xs, &a, &ys, &b).sqrt();
            assert_relative_eq!(got, expected, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn swd_in_1d_matches_exact_ot_for_equal_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let n = rng.random_range(1..=15);
            let xs: Vec<DVector<f64>> = (0..n).map(|_| pt(&[rng.random_range(-5.0..5.0)])).collect();
            let ys: Vec<DVector<f64>> = (0..n).map(|_| pt(&[rng.random_range(-5.0..5.0)])).collect();
            let masses = vec![1.0 / n as f64; n];
            let swd = sliced_wasserstein(&xs, &ys, 1, 99).unwrap();
            let exact = exact_wasserstein2_small(&xs, &masses, &ys, &masses).unwrap();
            assert_relative_eq!(swd, exact, epsilon = 1e-10);
        }
    }
}
