//! Simulation harness: configuration, fleet run loop, and exports.
//!
//! A run builds one model for the whole fleet, scatters the agents near the
//! origin, and repeats the three protocol stages until the fleet-minimum
//! residual mass drops below the completion threshold or the step budget is
//! spent. Everything is driven by one seed, so a run is reproducible down
//! to the last bit of its exported files.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::{PenaltySpec, RadiusBound, MAX_AGE_DEFAULT};
use crate::lti::{self, AgentModel, AgentState};
use crate::protocol::{
    agent_cycle, exchange_round, Agent, CycleConfig, LinkMode, NeighborInfo, Topology,
    COVERAGE_DECAY_DEFAULT, COVERAGE_RADIUS_DEFAULT,
};
use crate::transport::{
    sliced_wasserstein, ReferenceMap, SelectionParams, SELECTION_SIZE_DEFAULT,
    SWD_PROJECTIONS_DEFAULT, WEIGHT_FLOOR_DEFAULT,
};
use crate::{Error, Result};

/// Where the reference samples come from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MapSpec {
    /// Draw samples from a random Gaussian mixture whose component centers
    /// are scattered over the scene.
    GaussianMixture {
        n_samples: usize,
        components: usize,
        spread: f64,
    },
    /// Load samples from a CSV or JSON file.
    Path { path: String },
}

impl Default for MapSpec {
    fn default() -> Self {
        Self::GaussianMixture {
            n_samples: 100,
            components: 3,
            spread: 2.0,
        }
    }
}

/// Which dynamics every agent gets.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ModelSpec {
    /// `"single_integrator"`, `"double_integrator"`, or `"quadrotor"`.
    Builtin(String),
    /// Load a model description from a JSON file.
    File { path: String },
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::Builtin("single_integrator".into())
    }
}

/// Communication graph shape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum TopologySpec {
    /// `"chain"`.
    Named(String),
    /// Parent table; entry 0 must be null.
    Tree { tree: Vec<Option<usize>> },
    /// Explicit edge list.
    Edges { edges: Vec<(usize, usize)> },
}

impl Default for TopologySpec {
    fn default() -> Self {
        Self::Named("chain".into())
    }
}

/// Serialized name for the link-realization rule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinkModeSpec {
    #[default]
    RangeGated,
    TopologyOnly,
}

impl From<LinkModeSpec> for LinkMode {
    fn from(spec: LinkModeSpec) -> Self {
        match spec {
            LinkModeSpec::RangeGated => LinkMode::RangeGated,
            LinkModeSpec::TopologyOnly => LinkMode::TopologyOnly,
        }
    }
}

/// Full description of one run. Unset fields take the documented defaults,
/// so `{}` is a valid configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_agents: usize,
    /// Output-space dimension for the integrator models; the quadrotor is
    /// always three-dimensional.
    pub dimension: usize,
    pub dt: f64,
    pub horizon: usize,
    pub model: ModelSpec,
    pub map: MapSpec,
    /// Half-width of the square scene the mixture centers are scattered in.
    pub scene_half: f64,
    pub r_comm: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub eta: f64,
    pub d_min: f64,
    pub collision_kappa: f64,
    pub collision_eta: f64,
    /// Symmetric input bound magnitude: velocity for single integrators,
    /// acceleration or jerk-rate for the higher-order models.
    pub v_max: f64,
    pub seed: u64,
    pub max_steps: usize,
    /// Run is complete when the fleet-minimum residual mass falls below
    /// this fraction of the initial mass.
    pub completion_threshold: f64,
    pub topology: TopologySpec,
    /// When false the penalized solver is skipped entirely and every agent
    /// solves the plain box QP.
    pub connectivity_enabled: bool,
    pub selection_size: usize,
    pub weight_floor: f64,
    /// Proximity scale of the selection score; defaults to `r_comm / 2`.
    pub lambda: Option<f64>,
    pub r_cov: f64,
    pub decay: f64,
    pub input_penalty: f64,
    pub link_mode: LinkModeSpec,
    pub max_age: u64,
    pub swd_projections: usize,
    /// Radius of the ball around the origin the agents start in.
    pub jitter_radius: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_agents: 5,
            dimension: 2,
            dt: 0.1,
            horizon: 1,
            model: ModelSpec::default(),
            map: MapSpec::default(),
            scene_half: 10.0,
            r_comm: 15.0,
            gamma: 0.8,
            kappa: 750.0,
            eta: 0.25,
            d_min: 1.0,
            collision_kappa: 750.0,
            collision_eta: 0.25,
            v_max: 10.0,
            seed: 0,
            max_steps: 300,
            completion_threshold: 0.02,
            topology: TopologySpec::default(),
            connectivity_enabled: true,
            selection_size: SELECTION_SIZE_DEFAULT,
            weight_floor: WEIGHT_FLOOR_DEFAULT,
            lambda: None,
            r_cov: COVERAGE_RADIUS_DEFAULT,
            decay: COVERAGE_DECAY_DEFAULT,
            input_penalty: 0.1,
            link_mode: LinkModeSpec::default(),
            max_age: MAX_AGE_DEFAULT,
            swd_projections: SWD_PROJECTIONS_DEFAULT,
            jitter_radius: 1.0,
        }
    }
}

impl SimConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json_path(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::Config("n_agents must be at least 1".into()));
        }
        if self.dimension == 0 {
            return Err(Error::Config("dimension must be at least 1".into()));
        }
        if self.dt <= 0.0 || !self.dt.is_finite() {
            return Err(Error::Config("dt must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.completion_threshold) {
            return Err(Error::Config("completion_threshold must lie in [0, 1)".into()));
        }
        if self.v_max <= 0.0 {
            return Err(Error::Config("v_max must be positive".into()));
        }
        if self.selection_size == 0 {
            return Err(Error::Config("selection_size must be at least 1".into()));
        }
        if let Some(lambda) = self.lambda {
            if lambda <= 0.0 {
                return Err(Error::Config("lambda must be positive".into()));
            }
        }
        if self.jitter_radius < 0.0 {
            return Err(Error::Config("jitter_radius must be non-negative".into()));
        }
        if let MapSpec::GaussianMixture {
            n_samples,
            components,
            spread,
        } = &self.map
        {
            if *n_samples == 0 || *components == 0 || *n_samples < *components {
                return Err(Error::Config(
                    "the mixture needs at least one sample per component".into(),
                ));
            }
            if *spread <= 0.0 {
                return Err(Error::Config("mixture spread must be positive".into()));
            }
        }
        // The remaining penalty fields are validated where they are used.
        PenaltySpec::new(
            self.kappa,
            self.eta,
            self.r_comm,
            self.gamma,
            self.d_min,
            self.collision_kappa,
            self.collision_eta,
        )?;
        Ok(())
    }

    fn penalty_spec(&self) -> Result<PenaltySpec> {
        PenaltySpec::new(
            self.kappa,
            self.eta,
            self.r_comm,
            self.gamma,
            self.d_min,
            self.collision_kappa,
            self.collision_eta,
        )
    }

    fn selection_params(&self) -> SelectionParams {
        SelectionParams::new(
            self.selection_size,
            self.weight_floor,
            self.lambda.unwrap_or(self.r_comm / 2.0),
        )
    }

    fn topology(&self) -> Result<Topology> {
        match &self.topology {
            TopologySpec::Named(name) if name == "chain" => Topology::chain(self.n_agents),
            TopologySpec::Named(name) => {
                Err(Error::Config(format!("unknown topology \"{name}\"")))
            }
            TopologySpec::Tree { tree } => {
                if tree.len() != self.n_agents {
                    return Err(Error::Config(format!(
                        "parent table has {} entries for {} agents",
                        tree.len(),
                        self.n_agents
                    )));
                }
                Topology::tree(tree)
            }
            TopologySpec::Edges { edges } => Topology::custom(self.n_agents, edges),
        }
    }
}

/// Twelve-state position-output model with relative degree four.
///
/// Each axis is a length-four integrator chain (position, velocity, and two
/// thrust/attitude internals), discretized by a forward Euler step so the
/// chain structure survives exactly: `A = I + T N` with `N` the block
/// shift, `B = T [0; 0; 0; I]`, `C = [I 0 0 0]`. Inputs act on the deepest
/// internal state only, which is what pushes the relative degree to four
/// while the pair stays controllable.
pub fn quadrotor_model(dt: f64, input_bound: f64) -> Result<AgentModel> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::Config("dt must be positive".into()));
    }
    if input_bound <= 0.0 {
        return Err(Error::Config("input bound must be positive".into()));
    }
    let mut a = DMatrix::identity(12, 12);
    for block in 0..3 {
        for axis in 0..3 {
            a[(3 * block + axis, 3 * (block + 1) + axis)] = dt;
        }
    }
    let mut b = DMatrix::zeros(12, 3);
    for axis in 0..3 {
        b[(9 + axis, axis)] = dt;
    }
    let mut c = DMatrix::zeros(3, 12);
    for axis in 0..3 {
        c[(axis, axis)] = 1.0;
    }
    AgentModel::new(
        a,
        b,
        c,
        DVector::from_element(3, -input_bound),
        DVector::from_element(3, input_bound),
    )
}

/// Instantiate the fleet model a configuration asks for.
pub fn build_model(config: &SimConfig) -> Result<AgentModel> {
    match &config.model {
        ModelSpec::Builtin(name) => match name.as_str() {
            "single_integrator" => Ok(lti::single_integrator(
                config.dimension,
                config.dt,
                config.v_max,
            )),
            "double_integrator" => Ok(lti::double_integrator(
                config.dimension,
                config.dt,
                config.v_max,
            )),
            "quadrotor" => {
                if config.dimension != 3 {
                    return Err(Error::Config(
                        "the quadrotor model is three-dimensional; set dimension to 3".into(),
                    ));
                }
                quadrotor_model(config.dt, config.v_max)
            }
            other => Err(Error::Config(format!("unknown model \"{other}\""))),
        },
        ModelSpec::File { path } => {
            let model = AgentModel::from_json_path(Path::new(path))?;
            if model.output_dim() != config.dimension {
                return Err(Error::Config(format!(
                    "model outputs {} coordinates but the configuration says {}",
                    model.output_dim(),
                    config.dimension
                )));
            }
            Ok(model)
        }
    }
}

/// Initial state whose output sits at `pos`, with all internals at rest.
///
/// The builtin models get their exact layouts; file models fall back to the
/// least-squares preimage of `pos` under the output matrix.
fn initial_state(config: &SimConfig, model: &AgentModel, pos: &DVector<f64>) -> DVector<f64> {
    let n = model.state_dim();
    let d = pos.len();
    match &config.model {
        ModelSpec::Builtin(name) if name == "single_integrator" => pos.clone(),
        ModelSpec::Builtin(name) if name == "double_integrator" => {
            let mut x = DVector::zeros(n);
            for i in 0..d {
                x[2 * i] = pos[i];
            }
            x
        }
        ModelSpec::Builtin(name) if name == "quadrotor" => {
            let mut x = DVector::zeros(n);
            for i in 0..d {
                x[i] = pos[i];
            }
            x
        }
        _ => model
            .c()
            .clone()
            .svd(true, true)
            .solve(pos, 1e-12)
            .expect("SVD solve only fails without computed factors"),
    }
}

/// Draw the reference map a configuration asks for.
pub fn build_map(config: &SimConfig, rng: &mut ChaCha8Rng) -> Result<ReferenceMap> {
    match &config.map {
        MapSpec::GaussianMixture {
            n_samples,
            components,
            spread,
        } => {
            let d = config.dimension;
            let centers: Vec<DVector<f64>> = (0..*components)
                .map(|_| {
                    DVector::from_fn(d, |_, _| -> f64 {
                        rng.random_range(-config.scene_half..config.scene_half)
                    })
                })
                .collect();
            let normal = rand_distr::Normal::new(0.0, *spread)
                .map_err(|e| Error::Config(format!("mixture spread is invalid: {e}")))?;
            let points = (0..*n_samples)
                .map(|i| {
                    let center = &centers[i % components];
                    center + DVector::from_fn(d, |_, _| -> f64 { rng.sample(normal) })
                })
                .collect();
            ReferenceMap::new(points, None)
        }
        MapSpec::Path { path } => {
            let map = ReferenceMap::from_path(Path::new(path))?;
            if map.dim() != config.dimension {
                return Err(Error::Config(format!(
                    "map points have {} coordinates but the configuration says {}",
                    map.dim(),
                    config.dimension
                )));
            }
            Ok(map)
        }
    }
}

fn jitter_position(config: &SimConfig, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let d = config.dimension;
    if config.jitter_radius == 0.0 {
        return DVector::zeros(d);
    }
    loop {
        let p = DVector::from_fn(d, |_, _| -> f64 {
            rng.random_range(-config.jitter_radius..config.jitter_radius)
        });
        if p.norm() <= config.jitter_radius {
            return p;
        }
    }
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct RunRecord {
    /// Steps actually executed.
    pub steps: usize,
    /// Whether the completion threshold was reached within the budget.
    pub completed: bool,
    /// Output positions per step per agent, including the initial ones.
    pub positions: Vec<Vec<DVector<f64>>>,
    /// Realized exchange links per step.
    pub links: Vec<Vec<(usize, usize, f64)>>,
    /// Fleet-minimum residual mass after each step, including the start.
    pub residual_mass: Vec<f64>,
    /// Largest designated-pair distance after each step.
    pub max_designated_distance: Vec<f64>,
    /// Steps on which some input had to be clamped.
    pub clamp_events: usize,
    /// Sliced Wasserstein distance between every visited position and the
    /// reference samples.
    pub final_swd: f64,
}

impl RunRecord {
    /// Fraction of steps whose worst designated distance exceeded the
    /// penalty threshold `gamma * r_comm`.
    pub fn over_threshold_fraction(&self, gamma: f64, r_comm: f64) -> f64 {
        if self.max_designated_distance.is_empty() {
            return 0.0;
        }
        let over = self
            .max_designated_distance
            .iter()
            .filter(|&&d| d > gamma * r_comm)
            .count();
        over as f64 / self.max_designated_distance.len() as f64
    }

    pub fn max_designated_distance_overall(&self) -> f64 {
        self.max_designated_distance.iter().cloned().fold(0.0, f64::max)
    }

    fn visited_positions(&self) -> Vec<DVector<f64>> {
        self.positions.iter().flatten().cloned().collect()
    }
}

/// A built but not yet executed simulation.
pub struct Sim {
    config: SimConfig,
    map: ReferenceMap,
    model: AgentModel,
    topology: Topology,
    agents: Vec<Agent>,
}

impl Sim {
    /// Build the map, model, fleet, and topology for a configuration.
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let map = build_map(&config, &mut rng)?;
        let model = build_model(&config)?;
        let topology = config.topology()?;
        let mut agents = Vec::with_capacity(config.n_agents);
        for id in 0..config.n_agents {
            let pos = jitter_position(&config, &mut rng);
            let x0 = initial_state(&config, &model, &pos);
            agents.push(Agent::new(id, model.clone(), x0, &map, config.horizon)?);
        }
        Ok(Self {
            config,
            map,
            model,
            topology,
            agents,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn map(&self) -> &ReferenceMap {
        &self.map
    }

    /// Execute the run loop and evaluate the final transport distance.
    pub fn run(mut self) -> Result<(RunRecord, ReferenceMap)> {
        let config = self.config.clone();
        let n = config.n_agents;
        let cycle_cfg = CycleConfig {
            selection: config.selection_params(),
            penalty: config.penalty_spec()?,
            connectivity_enabled: config.connectivity_enabled,
            input_penalty: config.input_penalty,
            r_cov: config.r_cov,
            decay: config.decay,
            max_age: config.max_age,
            radius_bound: RadiusBound::MaxColumn,
        };

        // Deployment shares everyone's initial state; afterwards knowledge
        // refreshes only over realized links.
        let mut last_known: Vec<Vec<AgentState>> = (0..n)
            .map(|_| self.agents.iter().map(|a| a.state().clone()).collect())
            .collect();

        let initial_positions: Vec<DVector<f64>> =
            self.agents.iter().map(|a| a.position()).collect();
        let initial_mass = fleet_min_mass(&self.agents);
        let mut record = RunRecord {
            steps: 0,
            completed: false,
            positions: vec![initial_positions.clone()],
            links: Vec::new(),
            residual_mass: vec![initial_mass],
            max_designated_distance: vec![max_designated(&self.topology, &initial_positions)],
            clamp_events: 0,
            final_swd: 0.0,
        };

        for step in 0..config.max_steps {
            let mut clamped_this_step = false;
            for i in 0..n {
                let designated = self.topology.designated(i).map(|j| NeighborInfo {
                    model: &self.model,
                    last: &last_known[i][j],
                });
                let near_states: Vec<usize> = (0..n)
                    .filter(|&j| {
                        j != i
                            && Some(j) != self.topology.designated(i)
                            && near_enough(&self.model, &self.agents[i], &last_known[i][j], &config)
                    })
                    .collect();
                let near: Vec<NeighborInfo<'_>> = near_states
                    .iter()
                    .map(|&j| NeighborInfo {
                        model: &self.model,
                        last: &last_known[i][j],
                    })
                    .collect();
                let outcome = agent_cycle(&mut self.agents[i], &self.map, designated, &near, &cycle_cfg)?;
                clamped_this_step |= outcome.clamped;
            }
            if clamped_this_step {
                record.clamp_events += 1;
            }

            let positions: Vec<DVector<f64>> = self.agents.iter().map(|a| a.position()).collect();
            let mut ledgers: Vec<_> = self.agents.iter().map(|a| a.ledger().clone()).collect();
            let links = exchange_round(
                &mut ledgers,
                &positions,
                &self.topology,
                config.r_comm,
                config.link_mode.into(),
                step as u64,
            )?;
            for (agent, ledger) in self.agents.iter_mut().zip(ledgers) {
                *agent.ledger_mut() = ledger;
            }
            for &(i, j, _) in &links {
                last_known[i][j] = self.agents[j].state().clone();
                last_known[j][i] = self.agents[i].state().clone();
            }

            record.positions.push(positions.clone());
            record.links.push(links);
            record
                .max_designated_distance
                .push(max_designated(&self.topology, &positions));
            let mass = fleet_min_mass(&self.agents);
            record.residual_mass.push(mass);
            record.steps = step + 1;

            if mass <= config.completion_threshold * initial_mass {
                record.completed = true;
                break;
            }
        }

        record.final_swd = sliced_wasserstein(
            &record.visited_positions(),
            self.map.points(),
            config.swd_projections,
            config.seed,
        )?;
        Ok((record, self.map))
    }
}

/// Build and execute a run in one call.
pub fn run_sim(config: SimConfig) -> Result<(RunRecord, ReferenceMap)> {
    Sim::new(config)?.run()
}

fn fleet_min_mass(agents: &[Agent]) -> f64 {
    let len = agents[0].ledger().len();
    (0..len)
        .map(|j| {
            agents
                .iter()
                .map(|a| a.ledger().residual()[j])
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

fn max_designated(topology: &Topology, positions: &[DVector<f64>]) -> f64 {
    topology
        .designated_pairs()
        .iter()
        .map(|&(i, j)| (&positions[i] - &positions[j]).norm())
        .fold(0.0, f64::max)
}

fn near_enough(model: &AgentModel, agent: &Agent, last: &AgentState, config: &SimConfig) -> bool {
    if config.collision_kappa == 0.0 {
        return false;
    }
    let their_pos = model.c() * &last.x;
    (agent.position() - their_pos).norm() <= 2.0 * config.d_min
}

/// Coordinate column names for exports: `x, y, z` up to three dimensions,
/// `c0, c1, ...` beyond.
fn coordinate_names(d: usize) -> Vec<String> {
    if d <= 3 {
        ["x", "y", "z"].iter().take(d).map(|s| s.to_string()).collect()
    } else {
        (0..d).map(|i| format!("c{i}")).collect()
    }
}

/// Render the per-step positions as CSV (`step,agent,<coords>`).
pub fn trajectories_csv(record: &RunRecord) -> String {
    let d = record.positions[0][0].len();
    let mut out = String::from("step,agent");
    for name in coordinate_names(d) {
        out.push(',');
        out.push_str(&name);
    }
    out.push('\n');
    for (step, per_agent) in record.positions.iter().enumerate() {
        for (agent, pos) in per_agent.iter().enumerate() {
            write!(out, "{step},{agent}").unwrap();
            for c in pos.iter() {
                write!(out, ",{c}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

/// Render the realized links as CSV (`step,i,j,distance`).
pub fn links_csv(record: &RunRecord) -> String {
    let mut out = String::from("step,i,j,distance\n");
    for (step, links) in record.links.iter().enumerate() {
        for &(i, j, dist) in links {
            writeln!(out, "{step},{i},{j},{dist}").unwrap();
        }
    }
    out
}

/// Render per-agent trajectory blocks for gnuplot (`plot "..." index i`).
pub fn trajectories_dat(record: &RunRecord) -> String {
    let n = record.positions[0].len();
    let d = record.positions[0][0].len();
    let mut out = String::new();
    for agent in 0..n {
        if agent > 0 {
            out.push_str("\n\n");
        }
        writeln!(out, "# agent {agent}").unwrap();
        write!(out, "# step").unwrap();
        for name in coordinate_names(d) {
            write!(out, " {name}").unwrap();
        }
        out.push('\n');
        for (step, per_agent) in record.positions.iter().enumerate() {
            write!(out, "{step}").unwrap();
            for c in per_agent[agent].iter() {
                write!(out, " {c}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    config: &'a SimConfig,
    steps: usize,
    completed: bool,
    final_swd: f64,
    clamp_events: usize,
    max_designated_distance_overall: f64,
    over_threshold_fraction: f64,
    residual_mass: &'a [f64],
    max_designated_distance: &'a [f64],
}

/// Render the run summary as pretty-printed JSON.
pub fn metrics_json(config: &SimConfig, record: &RunRecord) -> Result<String> {
    let metrics = MetricsFile {
        config,
        steps: record.steps,
        completed: record.completed,
        final_swd: record.final_swd,
        clamp_events: record.clamp_events,
        max_designated_distance_overall: record.max_designated_distance_overall(),
        over_threshold_fraction: record.over_threshold_fraction(config.gamma, config.r_comm),
        residual_mass: &record.residual_mass,
        max_designated_distance: &record.max_designated_distance,
    };
    let mut text = serde_json::to_string_pretty(&metrics)?;
    text.push('\n');
    Ok(text)
}

/// Write `trajectories.csv`, `links.csv`, `metrics.json`, `map.csv`, and
/// `trajectories.dat` into `out_dir`, creating it if needed.
pub fn export_run(
    out_dir: &Path,
    config: &SimConfig,
    record: &RunRecord,
    map: &ReferenceMap,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("trajectories.csv"), trajectories_csv(record))?;
    std::fs::write(out_dir.join("links.csv"), links_csv(record))?;
    std::fs::write(out_dir.join("metrics.json"), metrics_json(config, record)?)?;
    std::fs::write(out_dir.join("map.csv"), map.to_csv_string())?;
    std::fs::write(out_dir.join("trajectories.dat"), trajectories_dat(record))?;
    Ok(())
}

/// Recompute the final transport distance from an exported trajectory file.
///
/// Positions parse back exactly (the exports use shortest round-trip float
/// formatting), so recomputing with the run's seed and projection count
/// reproduces the recorded value bit for bit.
pub fn swd_from_trajectories(
    traj_csv: &str,
    map: &ReferenceMap,
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    let mut lines = traj_csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("trajectory file is empty".into()))?;
    let columns = header.split(',').count();
    if columns < 3 || !header.starts_with("step,agent") {
        return Err(Error::Config(
            "trajectory file must start with a step,agent,<coords> header".into(),
        ));
    }
    let d = columns - 2;
    let mut positions = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns {
            return Err(Error::Config(format!(
                "trajectory row {} has {} fields, expected {columns}",
                idx + 2,
                fields.len()
            )));
        }
        let mut pos = DVector::zeros(d);
        for (c, field) in fields[2..].iter().enumerate() {
            pos[c] = field.parse::<f64>().map_err(|e| {
                Error::Config(format!("trajectory row {} is not numeric: {e}", idx + 2))
            })?;
        }
        positions.push(pos);
    }
    sliced_wasserstein(&positions, map.points(), n_projections, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_config() -> SimConfig {
        SimConfig {
            n_agents: 3,
            map: MapSpec::GaussianMixture {
                n_samples: 30,
                components: 2,
                spread: 1.5,
            },
            scene_half: 6.0,
            dt: 0.25,
            v_max: 4.0,
            max_steps: 12,
            seed: 5,
            swd_projections: 20,
            ..SimConfig::default()
        }
    }

    #[test]
    fn empty_json_gives_the_default_config() {
        let config = SimConfig::from_json_str("{}").unwrap();
        assert_eq!(config, SimConfig::default());
        assert_eq!(config.n_agents, 5);
        assert_eq!(config.selection_size, 10);
    }

    #[test]
    fn config_round_trips_through_json() {
        let config = small_config();
        let text = serde_json::to_string(&config).unwrap();
        let back = SimConfig::from_json_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        assert!(SimConfig::from_json_str("{\"n_agentz\": 3}").is_err());
    }

    #[test]
    fn mixture_map_is_deterministic_for_a_seed() {
        let config = small_config();
        let mut rng_a = ChaCha8Rng::seed_from_u64(config.seed);
        let mut rng_b = ChaCha8Rng::seed_from_u64(config.seed);
        let a = build_map(&config, &mut rng_a).unwrap();
        let b = build_map(&config, &mut rng_b).unwrap();
        assert_eq!(a.len(), b.len());
        for (p, q) in a.points().iter().zip(b.points()) {
            for (x, y) in p.iter().zip(q.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn quadrotor_has_relative_degree_four_and_is_controllable() {
        let model = quadrotor_model(0.1, 10.0).unwrap();
        assert_eq!(model.state_dim(), 12);
        assert_eq!(model.input_dim(), 3);
        assert_eq!(model.output_dim(), 3);
        assert_eq!(lti::relative_degree(&model, 12).unwrap(), 4);
        assert!(model.is_controllable());
        assert_relative_eq!(model.spectral_radius(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn quadrotor_first_markov_block_is_dt_fourth_identity() {
        let dt = 0.1;
        let model = quadrotor_model(dt, 10.0).unwrap();
        let a3 = model.a() * model.a() * model.a();
        let block = model.c() * a3 * model.b();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { dt.powi(4) } else { 0.0 };
                assert_relative_eq!(block[(i, j)], expected, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn run_records_are_consistent() {
        let config = small_config();
        let (record, _map) = run_sim(config.clone()).unwrap();
        assert!(record.steps > 0 && record.steps <= config.max_steps);
        assert_eq!(record.positions.len(), record.steps + 1);
        assert_eq!(record.residual_mass.len(), record.steps + 1);
        assert_eq!(record.links.len(), record.steps);
        for per_agent in &record.positions {
            assert_eq!(per_agent.len(), config.n_agents);
        }
        for window in record.residual_mass.windows(2) {
            assert!(
                window[1] <= window[0] + 1e-15,
                "fleet-minimum residual mass increased: {window:?}"
            );
        }
        assert!(record.final_swd.is_finite());
    }

    #[test]
    fn identical_seeds_give_identical_exports() {
        let config = small_config();
        let (rec_a, map_a) = run_sim(config.clone()).unwrap();
        let (rec_b, map_b) = run_sim(config.clone()).unwrap();
        assert_eq!(rec_a.final_swd.to_bits(), rec_b.final_swd.to_bits());
        assert_eq!(trajectories_csv(&rec_a), trajectories_csv(&rec_b));
        assert_eq!(links_csv(&rec_a), links_csv(&rec_b));
        assert_eq!(
            metrics_json(&config, &rec_a).unwrap(),
            metrics_json(&config, &rec_b).unwrap()
        );
        assert_eq!(map_a.to_csv_string(), map_b.to_csv_string());
    }

    #[test]
    fn recomputed_swd_matches_the_recorded_value_exactly() {
        let config = small_config();
        let (record, map) = run_sim(config.clone()).unwrap();
        let csv = trajectories_csv(&record);
        let again =
            swd_from_trajectories(&csv, &map, config.swd_projections, config.seed).unwrap();
        assert_eq!(record.final_swd.to_bits(), again.to_bits());
    }

    #[test]
    fn exports_land_on_disk_and_reparse() {
        let config = small_config();
        let dir = tempfile::tempdir().unwrap();
        let (record, map) = run_sim(config.clone()).unwrap();
        export_run(dir.path(), &config, &record, &map).unwrap();
        for name in [
            "trajectories.csv",
            "links.csv",
            "metrics.json",
            "map.csv",
            "trajectories.dat",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let metrics: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap())
                .unwrap();
        assert_eq!(metrics["steps"], serde_json::json!(record.steps));
        let traj = std::fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
        assert_eq!(
            traj.lines().count(),
            1 + (record.steps + 1) * config.n_agents
        );
        let reloaded = ReferenceMap::from_path(&dir.path().join("map.csv")).unwrap();
        assert_eq!(reloaded.len(), map.len());
    }

    #[test]
    fn a_fleet_parked_on_its_map_completes() {
        // Samples inside the jitter ball: the fleet covers them immediately.
        let config = SimConfig {
            n_agents: 2,
            map: MapSpec::GaussianMixture {
                n_samples: 10,
                components: 1,
                spread: 0.2,
            },
            scene_half: 0.3,
            completion_threshold: 0.1,
            decay: 0.9,
            r_cov: 4.0,
            max_steps: 50,
            seed: 9,
            swd_projections: 10,
            ..SimConfig::default()
        };
        let (record, _) = run_sim(config).unwrap();
        assert!(record.completed, "stalled at mass {:?}", record.residual_mass.last());
    }

    #[test]
    fn double_integrator_initial_positions_match_the_jitter() {
        let config = SimConfig {
            model: ModelSpec::Builtin("double_integrator".into()),
            ..small_config()
        };
        // Rebuild the same rng stream the sim uses: map first, then jitter.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        build_map(&config, &mut rng).unwrap();
        let expected: Vec<DVector<f64>> =
            (0..config.n_agents).map(|_| jitter_position(&config, &mut rng)).collect();
        let sim = Sim::new(config).unwrap();
        let (record, _) = sim.run().unwrap();
        for (pos, exp) in record.positions[0].iter().zip(&expected) {
            assert_relative_eq!(pos, exp, epsilon = 1e-15);
        }
    }
}
