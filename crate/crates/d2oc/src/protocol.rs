//! Decentralized coverage protocol.
//!
//! Each step every agent runs three stages on purely local information:
//! it selects nearby uncovered samples and solves for its input (plain box
//! QP, or the penalized problem when a designated link must be preserved),
//! it discounts the weights of samples it now covers, and it exchanges
//! residual-weight vectors with whoever is in range, merging by elementwise
//! minimum. The min-merge makes coverage claims spread monotonically: after
//! as many rounds as the network diameter, every agent holds the fleet-wide
//! minimum.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};

use crate::connectivity::{
    build_soft_problem, forecast_neighbor, solve_soft, NeighborForecast, PenaltySpec, RadiusBound,
};
use crate::lti::{self, AgentModel, AgentState, StackedPredictor};
use crate::qp::{assemble_qp, solve_box_qp, SolveReport};
use crate::transport::{
    barycenter, select_local_samples, AgentWeightLedger, ReferenceMap, SelectionParams,
};
use crate::{Error, Result};

/// Default coverage radius used when discounting sample weights.
pub const COVERAGE_RADIUS_DEFAULT: f64 = 2.0;

/// Default fraction of a covered sample's weight removed per visit.
pub const COVERAGE_DECAY_DEFAULT: f64 = 0.5;

/// Communication graph with one designated link per non-root agent.
///
/// Designated links form a spanning tree oriented toward agent 0; holding
/// each of them inside the communication radius keeps the graph connected.
#[derive(Debug, Clone)]
pub struct Topology {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    designated: Vec<Option<usize>>,
}

impl Topology {
    /// Path graph `0 - 1 - ... - n-1`; each agent's designated neighbor is
    /// its successor.
    pub fn chain(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("topology needs at least one agent".into()));
        }
        let edges = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
        let designated = (0..n)
            .map(|i| if i + 1 < n { Some(i + 1) } else { None })
            .collect();
        Self::assemble(n, edges, designated)
    }

    /// Tree given by a parent table (`parents[0]` must be `None`); each
    /// child's designated neighbor is its parent.
    pub fn tree(parents: &[Option<usize>]) -> Result<Self> {
        let n = parents.len();
        if n == 0 {
            return Err(Error::Config("topology needs at least one agent".into()));
        }
        if parents[0].is_some() {
            return Err(Error::Config("agent 0 must be the root".into()));
        }
        let mut edges = BTreeSet::new();
        for (child, parent) in parents.iter().enumerate().skip(1) {
            let parent = parent.ok_or_else(|| {
                Error::Config(format!("agent {child} has no parent"))
            })?;
            if parent >= n || parent == child {
                return Err(Error::Config(format!(
                    "agent {child} has invalid parent {parent}"
                )));
            }
            edges.insert((child.min(parent), child.max(parent)));
        }
        Self::assemble(n, edges, parents.to_vec())
    }

    /// Arbitrary connected graph; designated links follow a breadth-first
    /// spanning tree rooted at agent 0.
    pub fn custom(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("topology needs at least one agent".into()));
        }
        let mut set = BTreeSet::new();
        for &(i, j) in edges {
            if i >= n || j >= n || i == j {
                return Err(Error::Config(format!("edge ({i}, {j}) is out of range")));
            }
            set.insert((i.min(j), i.max(j)));
        }
        let adjacency = build_adjacency(n, &set);
        let parents = bfs_parents(&adjacency, 0);
        let mut designated = vec![None; n];
        for i in 1..n {
            designated[i] = Some(parents[i].ok_or_else(|| {
                Error::Config(format!("agent {i} is unreachable from agent 0"))
            })?);
        }
        Self::assemble(n, set, designated)
    }

    fn assemble(
        n: usize,
        edges: BTreeSet<(usize, usize)>,
        designated: Vec<Option<usize>>,
    ) -> Result<Self> {
        let adjacency = build_adjacency(n, &edges);
        let topology = Self {
            n,
            edges,
            adjacency,
            designated,
        };
        if !topology.is_connected() {
            return Err(Error::Config("topology is not connected".into()));
        }
        Ok(topology)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn contains_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    /// The neighbor agent `i` is responsible for staying connected to.
    pub fn designated(&self, i: usize) -> Option<usize> {
        self.designated[i]
    }

    /// All designated pairs, `(holder, neighbor)`.
    pub fn designated_pairs(&self) -> Vec<(usize, usize)> {
        self.designated
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.map(|j| (i, j)))
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        bfs_parents(&self.adjacency, 0)
            .iter()
            .enumerate()
            .all(|(i, p)| i == 0 || p.is_some())
    }

    /// Longest shortest path in hops; the number of exchange rounds needed
    /// for a min-merge to reach everyone.
    pub fn diameter(&self) -> usize {
        let mut widest = 0;
        for start in 0..self.n {
            let mut depth = vec![usize::MAX; self.n];
            depth[start] = 0;
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &w in &self.adjacency[v] {
                    if depth[w] == usize::MAX {
                        depth[w] = depth[v] + 1;
                        widest = widest.max(depth[w]);
                        queue.push_back(w);
                    }
                }
            }
        }
        widest
    }
}

fn build_adjacency(n: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<Vec<usize>> {
    let mut adjacency = vec![Vec::new(); n];
    for &(i, j) in edges {
        adjacency[i].push(j);
        adjacency[j].push(i);
    }
    adjacency
}

fn bfs_parents(adjacency: &[Vec<usize>], root: usize) -> Vec<Option<usize>> {
    let mut parents = vec![None; adjacency.len()];
    let mut seen = vec![false; adjacency.len()];
    seen[root] = true;
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        for &w in &adjacency[v] {
            if !seen[w] {
                seen[w] = true;
                parents[w] = Some(v);
                queue.push_back(w);
            }
        }
    }
    parents
}

/// Residual-weight broadcast captured at the start of an exchange round.
#[derive(Debug, Clone)]
pub struct WeightMessage {
    pub sender: usize,
    pub residuals: DVector<f64>,
    pub timestamp: u64,
}

/// Which pairs may exchange during a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinkMode {
    /// Any pair within the communication radius.
    #[default]
    RangeGated,
    /// Only topology edges, and still only when within the radius.
    TopologyOnly,
}

/// Discount ledger weights near a visited position.
///
/// Each sample's residual is scaled by
/// `1 - decay * exp(-||pos - q_j||^2 / (2 sigma^2))` with `sigma = r_cov / 2`,
/// so a sample under the agent loses a `decay` fraction of its weight and
/// samples beyond a couple of radii are untouched. Returns the mass removed.
pub fn adjust_weights(
    ledger: &mut AgentWeightLedger,
    pos: &DVector<f64>,
    map: &ReferenceMap,
    r_cov: f64,
    decay: f64,
) -> Result<f64> {
    if map.len() != ledger.len() {
        return Err(Error::LengthMismatch {
            expected: map.len(),
            got: ledger.len(),
        });
    }
    if pos.len() != map.dim() {
        return Err(Error::DimensionMismatch(format!(
            "position has {} coordinates but the map has {}",
            pos.len(),
            map.dim()
        )));
    }
    if r_cov <= 0.0 || !(0.0..=1.0).contains(&decay) {
        return Err(Error::Config(
            "coverage radius must be positive and decay must lie in [0, 1]".into(),
        ));
    }
    let sigma_sq = (r_cov / 2.0).powi(2);
    let before = ledger.total_mass();
    for (j, q) in map.points().iter().enumerate() {
        let dist_sq = (pos - q).norm_squared();
        let factor = 1.0 - decay * (-dist_sq / (2.0 * sigma_sq)).exp();
        ledger.scale(j, factor);
    }
    Ok(before - ledger.total_mass())
}

/// Merge a received residual vector into a ledger by elementwise minimum.
pub fn merge_weights(ledger: &mut AgentWeightLedger, message: &WeightMessage) -> Result<()> {
    ledger.merge_min(&message.residuals)
}

/// One synchronous exchange round over the realized links.
///
/// Every agent broadcasts a snapshot of its residuals first; merges happen
/// only afterwards, so information travels exactly one hop per round.
/// Returns the realized links as `(i, j, distance)` with `i < j`.
pub fn exchange_round(
    ledgers: &mut [AgentWeightLedger],
    positions: &[DVector<f64>],
    topology: &Topology,
    r_comm: f64,
    mode: LinkMode,
    timestamp: u64,
) -> Result<Vec<(usize, usize, f64)>> {
    let n = ledgers.len();
    if positions.len() != n || topology.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: positions.len().min(topology.len()),
        });
    }
    let messages: Vec<WeightMessage> = ledgers
        .iter()
        .enumerate()
        .map(|(sender, ledger)| WeightMessage {
            sender,
            residuals: ledger.residual().clone(),
            timestamp,
        })
        .collect();

    let mut links = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if mode == LinkMode::TopologyOnly && !topology.contains_edge(i, j) {
                continue;
            }
            let dist = (&positions[i] - &positions[j]).norm();
            if dist <= r_comm {
                links.push((i, j, dist));
            }
        }
    }
    for &(i, j, _) in &links {
        ledgers[i].merge_min(&messages[j].residuals)?;
        ledgers[j].merge_min(&messages[i].residuals)?;
    }
    Ok(links)
}

/// Everything a cycle needs to know about one other agent.
#[derive(Debug, Clone, Copy)]
pub struct NeighborInfo<'a> {
    pub model: &'a AgentModel,
    pub last: &'a AgentState,
}

/// Per-cycle parameters shared by the whole fleet.
#[derive(Debug, Clone)]
pub struct CycleConfig {
    pub selection: SelectionParams,
    pub penalty: PenaltySpec,
    /// When false every agent solves the plain box QP.
    pub connectivity_enabled: bool,
    /// Scale of the identity input-effort penalty added to the QP.
    pub input_penalty: f64,
    /// Radius of the coverage discount applied after moving.
    pub r_cov: f64,
    /// Fraction of weight removed from a sample directly under the agent.
    pub decay: f64,
    /// Oldest acceptable neighbor information, in steps.
    pub max_age: u64,
    pub radius_bound: RadiusBound,
}

/// One agent's model, state, predictor, and weight ledger.
#[derive(Debug, Clone)]
pub struct Agent {
    id: usize,
    model: AgentModel,
    state: AgentState,
    ledger: AgentWeightLedger,
    predictor: StackedPredictor,
    relative_degree: usize,
}

impl Agent {
    pub fn new(
        id: usize,
        model: AgentModel,
        x0: DVector<f64>,
        map: &ReferenceMap,
        horizon: usize,
    ) -> Result<Self> {
        let r = lti::relative_degree(&model, model.state_dim())?;
        let predictor = lti::build_predictor(&model, r, horizon)?;
        let ledger = AgentWeightLedger::new(map);
        let state = AgentState::new(x0, 0);
        lti::output(&model, &state)?;
        Ok(Self {
            id,
            model,
            state,
            ledger,
            predictor,
            relative_degree: r,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn model(&self) -> &AgentModel {
        &self.model
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn ledger(&self) -> &AgentWeightLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut AgentWeightLedger {
        &mut self.ledger
    }

    pub fn predictor(&self) -> &StackedPredictor {
        &self.predictor
    }

    pub fn relative_degree(&self) -> usize {
        self.relative_degree
    }

    pub fn position(&self) -> DVector<f64> {
        lti::output(&self.model, &self.state).expect("state dimension is checked on construction")
    }
}

/// What one select-and-control stage produced.
#[derive(Debug, Clone)]
pub struct CycleOutcome {
    /// Input applied this step (first block of the stacked solution).
    pub applied: DVector<f64>,
    /// Reference-weight mass the agent discounted after moving.
    pub coverage_delta: f64,
    /// Solver report for the stacked problem.
    pub report: SolveReport,
    /// Whether the applied input had to be clamped to the model bounds.
    pub clamped: bool,
}

/// Run one agent through selection, control, motion, and weight discount.
///
/// With connectivity enabled and a designated neighbor present the input
/// comes from the penalized solver, warm-started at the box-QP solution;
/// otherwise the box QP is used directly. Near agents contribute separation
/// penalties when their information is fresh enough; stale near information
/// is skipped with a warning, but a stale designated neighbor is an error
/// since the link guarantee would be silently lost. A solver that runs out
/// of iterations degrades to its best iterate with a warning rather than
/// halting the fleet.
pub fn agent_cycle(
    agent: &mut Agent,
    map: &ReferenceMap,
    designated: Option<NeighborInfo<'_>>,
    near: &[NeighborInfo<'_>],
    cfg: &CycleConfig,
) -> Result<CycleOutcome> {
    let pos = agent.position();
    let selection = select_local_samples(&pos, &agent.ledger, map, &cfg.selection, agent.predictor.horizon())?;
    let track = barycenter(&selection, map)?;

    let m = agent.model.input_dim();
    let horizon = agent.predictor.horizon();
    let effort = DMatrix::identity(m * horizon, m * horizon) * cfg.input_penalty;
    let qp = assemble_qp(
        &agent.predictor,
        &agent.state.x,
        &track,
        &effort,
        agent.model.u_min(),
        agent.model.u_max(),
    )?;

    let report = if cfg.connectivity_enabled && (designated.is_some() || !near.is_empty()) {
        let k_now = agent.state.k;
        let r = agent.relative_degree;
        let designated_fc = match designated {
            Some(info) => Some(forecast_neighbor(
                info.model,
                info.last,
                k_now,
                r,
                horizon,
                cfg.max_age,
                cfg.radius_bound,
            )?),
            None => None,
        };
        let mut near_fcs: Vec<NeighborForecast> = Vec::new();
        for info in near {
            match forecast_neighbor(
                info.model,
                info.last,
                k_now,
                r,
                horizon,
                cfg.max_age,
                cfg.radius_bound,
            ) {
                Ok(fc) => near_fcs.push(fc),
                Err(Error::StaleBeyondHorizon { age, max_age }) => {
                    log::warn!(
                        "agent {}: skipping a near agent whose state is {age} steps old (limit {max_age})",
                        agent.id
                    );
                }
                Err(e) => return Err(e),
            }
        }
        let designated_refs: Vec<&NeighborForecast> = designated_fc.iter().collect();
        let near_refs: Vec<&NeighborForecast> = near_fcs.iter().collect();
        let warm = accept_capped(solve_box_qp(&qp), agent.id, "box QP warm start")?;
        let soft = build_soft_problem(
            qp,
            &agent.predictor,
            &agent.state.x,
            &designated_refs,
            &near_refs,
            &cfg.penalty,
        )?;
        accept_capped(
            solve_soft(&soft, &cfg.penalty, &warm.u_opt),
            agent.id,
            "penalized solve",
        )?
    } else {
        accept_capped(solve_box_qp(&qp), agent.id, "box QP")?
    };

    let applied = DVector::from_fn(m, |i, _| report.u_opt[i]);
    let stepped = lti::step(&agent.model, &agent.state, &applied)?;
    agent.state = stepped.state;

    let new_pos = agent.position();
    let coverage_delta = adjust_weights(&mut agent.ledger, &new_pos, map, cfg.r_cov, cfg.decay)?;

    Ok(CycleOutcome {
        applied,
        coverage_delta,
        report,
        clamped: stepped.clamped,
    })
}

fn accept_capped(res: Result<SolveReport>, id: usize, what: &str) -> Result<SolveReport> {
    match res {
        Ok(report) => Ok(report),
        Err(Error::MaxIterations(best)) => {
            log::warn!(
                "agent {id}: {what} hit its iteration cap; using the best iterate (KKT residual {:.3e})",
                best.kkt_residual
            );
            Ok(*best)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::RadiusBound;
    use crate::lti::single_integrator;
    use crate::transport::{ReferenceMap, SelectionParams};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_map(points: Vec<Vec<f64>>) -> ReferenceMap {
        ReferenceMap::new(points.into_iter().map(DVector::from_vec).collect(), None).unwrap()
    }

    #[test]
    fn chain_designates_successors() {
        let t = Topology::chain(4).unwrap();
        assert_eq!(t.designated(0), Some(1));
        assert_eq!(t.designated(2), Some(3));
        assert_eq!(t.designated(3), None);
        assert!(t.contains_edge(1, 2));
        assert!(!t.contains_edge(0, 2));
        assert_eq!(t.diameter(), 3);
    }

    #[test]
    fn tree_designates_parents() {
        let t = Topology::tree(&[None, Some(0), Some(0), Some(1)]).unwrap();
        assert_eq!(t.designated(3), Some(1));
        assert_eq!(t.designated(1), Some(0));
        assert_eq!(t.designated(0), None);
        assert_eq!(t.diameter(), 3);
    }

    #[test]
    fn custom_topology_designates_bfs_parents() {
        let t = Topology::custom(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        assert_eq!(t.designated(1), Some(0));
        assert_eq!(t.designated(3), Some(0));
        assert_eq!(t.designated(2), Some(1));
        assert_eq!(t.diameter(), 2);
    }

    #[test]
    fn disconnected_topologies_are_rejected() {
        assert!(Topology::custom(4, &[(0, 1), (2, 3)]).is_err());
        assert!(Topology::custom(3, &[(0, 1)]).is_err());
    }

    #[test]
    fn min_merge_is_a_semilattice() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let map = uniform_map(vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        for _ in 0..1000 {
            let draw = |rng: &mut ChaCha8Rng| {
                DVector::from_fn(5, |_, _| -> f64 { rng.random_range(0.0..1.0) })
            };
            let (a, b, c) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));

            // Idempotent: merging a vector into itself changes nothing.
            let mut l = AgentWeightLedger::new(&map);
            l.merge_min(&a).unwrap();
            let aa = l.residual().clone();
            l.merge_min(&a).unwrap();
            assert_eq!(l.residual(), &aa);

            // Commutative.
            let mut ab = AgentWeightLedger::new(&map);
            ab.merge_min(&a).unwrap();
            ab.merge_min(&b).unwrap();
            let mut ba = AgentWeightLedger::new(&map);
            ba.merge_min(&b).unwrap();
            ba.merge_min(&a).unwrap();
            assert_eq!(ab.residual(), ba.residual());

            // Associative, checked on the raw vectors.
            let min2 = |x: &DVector<f64>, y: &DVector<f64>| {
                DVector::from_fn(x.len(), |i, _| x[i].min(y[i]))
            };
            assert_eq!(min2(&min2(&a, &b), &c), min2(&a, &min2(&b, &c)));
        }
    }

    #[test]
    fn exchange_moves_information_one_hop_per_round() {
        let map = uniform_map(vec![vec![0.0], vec![1.0], vec![2.0]]);
        let topology = Topology::chain(3).unwrap();
        let positions = vec![
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![2.0]),
        ];
        let mut ledgers = vec![
            AgentWeightLedger::new(&map),
            AgentWeightLedger::new(&map),
            AgentWeightLedger::new(&map),
        ];
        // Initial residuals are the normalized map weights.
        let base = ledgers[0].residual()[0];
        let low = 0.01 * base;
        for (i, ledger) in ledgers.iter_mut().enumerate() {
            let mut claim = DVector::from_element(3, base);
            claim[i] = low;
            ledger.merge_min(&claim).unwrap();
        }

        // Ends can reach each other only through the middle: radius 1.5
        // realizes exactly the chain links.
        let links =
            exchange_round(&mut ledgers, &positions, &topology, 1.5, LinkMode::RangeGated, 0)
                .unwrap();
        assert_eq!(links.len(), 2);
        // After one round the middle agent has everyone's claims, the ends
        // are still missing the far end's.
        assert_eq!(ledgers[1].residual(), &DVector::from_vec(vec![low, low, low]));
        assert_eq!(ledgers[0].residual(), &DVector::from_vec(vec![low, low, base]));
        assert_eq!(ledgers[2].residual(), &DVector::from_vec(vec![base, low, low]));

        exchange_round(&mut ledgers, &positions, &topology, 1.5, LinkMode::RangeGated, 1).unwrap();
        for ledger in &ledgers {
            assert_eq!(ledger.residual(), &DVector::from_vec(vec![low, low, low]));
        }
    }

    #[test]
    fn exchange_respects_range_and_mode() {
        let map = uniform_map(vec![vec![0.0]]);
        let topology = Topology::chain(2).unwrap();
        let positions = vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![5.0])];
        let mut ledgers = vec![AgentWeightLedger::new(&map), AgentWeightLedger::new(&map)];
        ledgers[1].merge_min(&DVector::from_vec(vec![0.0])).unwrap();

        let links =
            exchange_round(&mut ledgers, &positions, &topology, 4.0, LinkMode::RangeGated, 0)
                .unwrap();
        assert!(links.is_empty());
        assert_relative_eq!(ledgers[0].residual()[0], 1.0);

        // A non-edge pair stays silent in topology-only mode even in range.
        let square = Topology::custom(3, &[(0, 1), (1, 2)]).unwrap();
        let close = vec![
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![0.1]),
            DVector::from_vec(vec![0.2]),
        ];
        let mut three = vec![
            AgentWeightLedger::new(&map),
            AgentWeightLedger::new(&map),
            AgentWeightLedger::new(&map),
        ];
        let links =
            exchange_round(&mut three, &close, &square, 10.0, LinkMode::TopologyOnly, 0).unwrap();
        assert_eq!(links.iter().map(|&(i, j, _)| (i, j)).collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn diameter_many_rounds_reach_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let map = uniform_map((0..8).map(|j| vec![j as f64]).collect());
        for (topology, positions_len) in [
            (Topology::chain(6).unwrap(), 6),
            (Topology::tree(&[None, Some(0), Some(0), Some(1), Some(1), Some(2)]).unwrap(), 6),
        ] {
            let positions: Vec<DVector<f64>> =
                (0..positions_len).map(|_| DVector::zeros(1)).collect();
            let mut ledgers: Vec<AgentWeightLedger> =
                (0..positions_len).map(|_| AgentWeightLedger::new(&map)).collect();
            for ledger in ledgers.iter_mut() {
                let noise = DVector::from_fn(8, |_, _| -> f64 { rng.random_range(0.0..1.0) });
                ledger.merge_min(&noise).unwrap();
            }
            let global = DVector::from_fn(8, |j, _| {
                ledgers.iter().map(|l| l.residual()[j]).fold(f64::INFINITY, f64::min)
            });
            for round in 0..topology.diameter() {
                exchange_round(
                    &mut ledgers,
                    &positions,
                    &topology,
                    1.0,
                    LinkMode::TopologyOnly,
                    round as u64,
                )
                .unwrap();
            }
            for ledger in &ledgers {
                assert_eq!(ledger.residual(), &global);
            }
        }
    }

    #[test]
    fn adjust_weights_discounts_nearby_samples_only() {
        let map = uniform_map(vec![vec![0.0, 0.0], vec![50.0, 0.0]]);
        let mut ledger = AgentWeightLedger::new(&map);
        let pos = DVector::from_vec(vec![0.0, 0.0]);
        let delta = adjust_weights(&mut ledger, &pos, &map, 2.0, 0.5).unwrap();
        // The sample under the agent loses half its weight, the far one none.
        assert_relative_eq!(ledger.residual()[0], 0.25, max_relative = 1e-12);
        assert_relative_eq!(ledger.residual()[1], 0.5, max_relative = 1e-12);
        assert_relative_eq!(delta, 0.25, max_relative = 1e-12);

        // Repeated visits keep shrinking the residual monotonically.
        let mut last = ledger.residual()[0];
        for _ in 0..5 {
            adjust_weights(&mut ledger, &pos, &map, 2.0, 0.5).unwrap();
            assert!(ledger.residual()[0] < last);
            last = ledger.residual()[0];
        }
    }

    fn two_cluster_map(seed: u64) -> ReferenceMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::new();
        for center in [-20.0f64, 20.0] {
            for _ in 0..20 {
                points.push(vec![
                    center + rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]);
            }
        }
        uniform_map(points)
    }

    fn run_two_agent_chain(connectivity_enabled: bool) -> Vec<f64> {
        let map = two_cluster_map(41);
        let model = single_integrator(2, 0.25, 4.0);
        let r_comm = 15.0;
        let cfg = CycleConfig {
            selection: SelectionParams::for_comm_radius(r_comm),
            penalty: PenaltySpec::new(750.0, 0.25, r_comm, 0.8, 1.0, 0.0, 1.0).unwrap(),
            connectivity_enabled,
            input_penalty: 0.1,
            r_cov: 2.0,
            decay: 0.5,
            max_age: 50,
            radius_bound: RadiusBound::MaxColumn,
        };
        let mut agents = vec![
            Agent::new(0, model.clone(), DVector::from_vec(vec![-1.0, 0.0]), &map, 1).unwrap(),
            Agent::new(1, model.clone(), DVector::from_vec(vec![1.0, 0.0]), &map, 1).unwrap(),
        ];
        let topology = Topology::chain(2).unwrap();
        let mut distances = Vec::new();
        for step in 0..80u64 {
            // Fresh one-step-old information, as after a successful exchange.
            let snapshots: Vec<AgentState> = agents.iter().map(|a| a.state().clone()).collect();
            for i in 0..2 {
                let designated = topology.designated(i).map(|j| NeighborInfo {
                    model: &model,
                    last: &snapshots[j],
                });
                agent_cycle(&mut agents[i], &map, designated, &[], &cfg).unwrap();
            }
            let positions: Vec<DVector<f64>> = agents.iter().map(|a| a.position()).collect();
            distances.push((&positions[0] - &positions[1]).norm());
            let mut ledgers: Vec<AgentWeightLedger> =
                agents.iter().map(|a| a.ledger().clone()).collect();
            exchange_round(&mut ledgers, &positions, &topology, r_comm, LinkMode::RangeGated, step)
                .unwrap();
            for (agent, ledger) in agents.iter_mut().zip(ledgers) {
                *agent.ledger_mut() = ledger;
            }
        }
        distances
    }

    #[test]
    fn connectivity_penalty_keeps_the_designated_pair_in_range() {
        let unconstrained = run_two_agent_chain(false);
        let max_free = unconstrained.iter().cloned().fold(0.0, f64::max);
        assert!(
            max_free > 0.8 * 15.0,
            "clusters too close to exercise the penalty: max distance {max_free}"
        );

        let constrained = run_two_agent_chain(true);
        let max_held = constrained.iter().cloned().fold(0.0, f64::max);
        assert!(
            max_held < 15.0,
            "designated pair broke the communication radius: {max_held}"
        );
        assert!(
            max_held <= 0.8 * 15.0 + 0.5,
            "designated pair drifted past the threshold with slack: {max_held}"
        );
    }
}
