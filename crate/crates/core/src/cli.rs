//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when the scenario file fails to load or
//! validate, 2 when the simulation or an output write fails at runtime.
//! Diagnostics go to stderr; results go to stdout. Set `TRANSACTIVE_LOG`
//! (e.g. `TRANSACTIVE_LOG=debug`) to see internal logging.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::agents;
use crate::engine;
use crate::oracle;
use crate::output;
use crate::scenario::{self, ScenarioFile};

#[derive(Parser)]
#[command(
    name = "transactive",
    version,
    about = "Round-synchronous simulator for distributed transactive power control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write per-iteration records as CSV.
    Run {
        scenario: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Directory to write SVG charts (generation, demand, price) into.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Simulate, then report each agent's gap to the directly solved dispatch.
    Verify { scenario: PathBuf },
    /// Build the communication tree and print its shape.
    Tree { scenario: PathBuf },
    /// Solve the welfare-optimal dispatch directly and print it.
    Oracle { scenario: PathBuf },
}

pub fn cli_main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter("TRANSACTIVE_LOG"))
        .format_timestamp(None)
        .try_init()
        .ok();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            out,
            plot,
        } => with_scenario(&scenario, |s| run(s, &out, plot.as_deref())),
        Command::Verify { scenario } => with_scenario(&scenario, verify),
        Command::Tree { scenario } => with_scenario(&scenario, tree),
        Command::Oracle { scenario } => with_scenario(&scenario, solve),
    }
}

fn with_scenario(path: &Path, body: impl FnOnce(&ScenarioFile) -> i32) -> i32 {
    match scenario::load_scenario(path) {
        Ok(s) => body(&s),
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn run(s: &ScenarioFile, out: &Path, plot: Option<&Path>) -> i32 {
    let (records, failure) = match engine::run_scenario(s) {
        Ok(output) => {
            report_run(&output);
            (output.records, None)
        }
        Err(failure) => {
            let err = format!("{} ({})", failure, failure.error);
            (failure.records, Some(err))
        }
    };
    if let Err(err) = output::write_csv(out, &records) {
        eprintln!("error: cannot write {}: {err}", out.display());
        return 2;
    }
    if let Some(dir) = plot {
        if let Err(err) = output::write_plots(dir, &records) {
            eprintln!("error: cannot write plots to {}: {err}", dir.display());
            return 2;
        }
    }
    match failure {
        Some(err) => {
            // The rows up to the failure are already on disk for inspection.
            eprintln!("error: {err}");
            2
        }
        None => 0,
    }
}

fn report_run(out: &engine::RunOutput) {
    println!(
        "{} iterations, {} message rounds",
        out.records.len(),
        out.message_rounds
    );
    match out.converged_at {
        Some(k) => println!("converged at iteration {k}"),
        None => println!("ran to the iteration limit without converging"),
    }
    for rebuild in &out.rebuilds {
        println!(
            "tree built at k={}: center {}, diameter {}, {} rounds",
            rebuild.at_iteration, rebuild.center, rebuild.tree_diameter, rebuild.rounds
        );
    }
    if let Some(last) = out.records.last() {
        println!(
            "final price {} with generation {} W against demand {} W",
            last.price, last.p_g, last.p_d
        );
    }
}

/// Price the dispatch question is asked at: the pinned price if the scenario
/// has one, otherwise the price the run itself settled on.
fn settled_price(s: &ScenarioFile, last: &engine::IterationRecord) -> f64 {
    s.fixed_price.unwrap_or(last.price)
}

fn verify(s: &ScenarioFile) -> i32 {
    let out = match engine::run_scenario(s) {
        Ok(out) => out,
        Err(failure) => {
            eprintln!("error: {} ({})", failure, failure.error);
            return 2;
        }
    };
    let Some(last) = out.records.last() else {
        eprintln!("error: scenario produced no iterations to verify");
        return 2;
    };
    let price = settled_price(s, last);
    let solution = match oracle::solve_welfare(&out.final_agents, price) {
        Ok(sol) => sol,
        Err(err) => {
            eprintln!("error: dispatch solve failed: {err}");
            return 2;
        }
    };
    println!(
        "{} iterations{}",
        out.records.len(),
        match out.converged_at {
            Some(k) => format!(", converged at {k}"),
            None => String::new(),
        }
    );
    println!("price: {price}");
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for (id, state) in &out.final_agents {
        let target = solution.powers[id];
        let abs = (state.power - target).abs();
        let rel = abs / target.abs().max(1.0);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
        println!(
            "agent {id} {}: power {:.3} W, optimum {:.3} W, gap {:.3} W ({:.4}%)",
            state.kind(),
            state.power,
            target,
            abs,
            rel * 100.0
        );
    }
    println!("max absolute gap: {max_abs:.6} W");
    println!("max relative gap: {:.6}%", max_rel * 100.0);
    let imbalance = last.imbalance();
    println!(
        "imbalance: {:.6} W ({:.6}% of demand)",
        imbalance,
        if last.p_d > 0.0 {
            imbalance.abs() / last.p_d * 100.0
        } else {
            0.0
        }
    );
    0
}

fn tree(s: &ScenarioFile) -> i32 {
    let topology = match s.topology() {
        Ok(t) => t,
        Err(err) => {
            eprintln!("error: {err}");
            return 1;
        }
    };
    let (overlay, rounds) = match engine::run_mdst_phase(&topology) {
        Ok(built) => built,
        Err(err) => {
            eprintln!("error: {err}");
            return 2;
        }
    };
    println!(
        "agents: {}, edges: {}",
        topology.node_count(),
        topology.edges().len()
    );
    println!("center: {}", overlay.root);
    println!("tree diameter: {}", overlay.tree_diameter);
    println!("build rounds: {rounds}");
    for id in overlay.nodes() {
        match overlay.parent.get(&id) {
            Some(parent) if *parent != id => println!("agent {id}: parent {parent}"),
            _ => println!("agent {id}: root"),
        }
    }
    0
}

fn solve(s: &ScenarioFile) -> i32 {
    let agents = s.initial_agents();
    let price = match s.fixed_price {
        Some(p) => p,
        None => match agents::system_price(&engine::direct_aggregate(&agents)) {
            Ok(p) if p > 0.0 => p,
            Ok(p) => {
                eprintln!("error: initial operating point prices at {p}; set fixed_price");
                return 2;
            }
            Err(err) => {
                eprintln!("error: cannot price initial operating point: {err}");
                return 2;
            }
        },
    };
    let solution = match oracle::solve_welfare(&agents, price) {
        Ok(sol) => sol,
        Err(err) => {
            eprintln!("error: dispatch solve failed: {err}");
            return 2;
        }
    };
    println!("price: {price}");
    println!("multiplier: {}", solution.multiplier);
    let (mut p_g, mut p_d) = (0.0f64, 0.0f64);
    for (id, state) in &agents {
        let power = solution.powers[id];
        match state.kind() {
            agents::AgentKind::Generator => p_g += power,
            agents::AgentKind::Consumer => p_d += power + state.base_load(),
        }
        println!("agent {id} {}: power {power} W", state.kind());
    }
    println!("total generation: {p_g} W");
    println!("total demand: {p_d} W");
    match oracle::social_welfare(&agents, &solution.powers, price) {
        Ok(welfare) => println!("welfare at optimum: {welfare}"),
        Err(err) => eprintln!("warning: welfare evaluation failed: {err}"),
    }
    0
}
