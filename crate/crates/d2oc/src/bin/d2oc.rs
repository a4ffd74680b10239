//! Command-line front end: run simulations, recompute metrics from
//! exported files, and inspect models.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use d2oc::lti::{self, AgentModel};
use d2oc::sim::{self, SimConfig};
use d2oc::transport::ReferenceMap;
use d2oc::Error;

#[derive(Parser)]
#[command(
    name = "d2oc",
    version,
    about = "Density-driven multi-agent coverage with connectivity preservation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation described by a JSON configuration file.
    Run {
        /// Path to the configuration; `{}` selects every default.
        #[arg(long)]
        config: PathBuf,
        /// Solve the plain box QP everywhere, ignoring connectivity.
        #[arg(long)]
        no_connectivity: bool,
        /// Override the configuration's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory the exported files are written to.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Recompute the transport distance from exported run files.
    Metrics {
        /// trajectories.csv produced by a run.
        #[arg(long)]
        traj: PathBuf,
        /// Reference map, CSV or JSON.
        #[arg(long)]
        map: PathBuf,
        /// Projection seed; match the run's seed to reproduce its value.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of sliced projections.
        #[arg(long, default_value_t = 100)]
        projections: usize,
    },
    /// Print a model's dimensions, relative degree, and stability facts.
    CheckModel {
        /// Builtin name (single_integrator, double_integrator, quadrotor)
        /// or a path to a model JSON file.
        #[arg(long)]
        model: String,
        /// Step length for the builtin models.
        #[arg(long, default_value_t = 0.1)]
        dt: f64,
        /// Symmetric input bound for the builtin models.
        #[arg(long, default_value_t = 10.0)]
        bound: f64,
        /// Output dimension for the builtin integrators.
        #[arg(long, default_value_t = 2)]
        dimension: usize,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Json(_) | Error::Csv(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn run(cli: Cli) -> d2oc::Result<()> {
    match cli.command {
        Command::Run {
            config,
            no_connectivity,
            seed,
            out,
        } => {
            let mut config = SimConfig::from_json_path(&config)?;
            if no_connectivity {
                config.connectivity_enabled = false;
            }
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let (record, map) = sim::run_sim(config.clone())?;
            sim::export_run(&out, &config, &record, &map)?;
            println!(
                "steps: {} ({})",
                record.steps,
                if record.completed { "completed" } else { "budget spent" }
            );
            println!("final swd: {}", record.final_swd);
            println!(
                "max designated distance: {} (over gamma*r_comm on {:.2}% of steps)",
                record.max_designated_distance_overall(),
                100.0 * record.over_threshold_fraction(config.gamma, config.r_comm)
            );
            println!("clamped steps: {}", record.clamp_events);
            for name in [
                "trajectories.csv",
                "links.csv",
                "metrics.json",
                "map.csv",
                "trajectories.dat",
            ] {
                println!("wrote {}", out.join(name).display());
            }
            Ok(())
        }
        Command::Metrics {
            traj,
            map,
            seed,
            projections,
        } => {
            let text = std::fs::read_to_string(&traj)?;
            let map = ReferenceMap::from_path(&map)?;
            let swd = sim::swd_from_trajectories(&text, &map, projections, seed)?;
            println!("swd: {swd}");
            Ok(())
        }
        Command::CheckModel {
            model,
            dt,
            bound,
            dimension,
        } => {
            let model = load_model(&model, dt, bound, dimension)?;
            let r = lti::relative_degree(&model, model.state_dim());
            println!(
                "states: {}, inputs: {}, outputs: {}",
                model.state_dim(),
                model.input_dim(),
                model.output_dim()
            );
            match r {
                Ok(r) => println!("relative degree: {r}"),
                Err(_) => println!("relative degree: none (inputs never reach the output)"),
            }
            println!("controllable: {}", model.is_controllable());
            println!("spectral radius: {}", model.spectral_radius());
            Ok(())
        }
    }
}

fn load_model(name: &str, dt: f64, bound: f64, dimension: usize) -> d2oc::Result<AgentModel> {
    match name {
        "single_integrator" => Ok(lti::single_integrator(dimension, dt, bound)),
        "double_integrator" => Ok(lti::double_integrator(dimension, dt, bound)),
        "quadrotor" => sim::quadrotor_model(dt, bound),
        path => AgentModel::from_json_path(std::path::Path::new(path)),
    }
}
