//! Delivery-benchmark sweeps. Each (cell, repetition) runs on the rayon pool
//! with its own seed and produces one CSV row.

use std::path::PathBuf;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use mdpauction::auction::{flat_wdp, solve_wdp, Allocation, AuctionError};
use mdpauction::benchgen::{gen_delivery, DeliveryParams};

use crate::{Failure, EXIT_FAILURE, EXIT_PARSE};

/// Bumped whenever a column is added, removed or reordered.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    MdpWdp,
    Flat,
}

#[derive(Args, Clone, Debug)]
pub struct BenchArgs {
    /// Constraint levels; each sets both the global and the local level.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub levels: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "4")]
    pub resources: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "3")]
    pub agents: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub per_action: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "5")]
    pub grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_enum, default_value = "mdp-wdp")]
    pub solvers: Vec<Solver>,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    /// Repetition `k` uses seed `seed + k`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Wall-time budget per row in seconds.
    #[arg(long)]
    pub budget_secs: Option<f64>,
    #[arg(long, env = "MDPAUCTION_THREADS")]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One sweep row. Field order is the CSV column order.
#[derive(Clone, Debug, Serialize)]
pub struct Row {
    pub schema_version: u32,
    pub solver: Solver,
    pub grid_n: usize,
    pub num_agents: usize,
    pub num_resources: usize,
    pub resources_per_action: usize,
    pub constraint_level: f64,
    pub rep: usize,
    pub seed: u64,
    pub wall_ms: f64,
    pub nodes: Option<usize>,
    pub lp_solves: Option<usize>,
    pub binary_vars: Option<usize>,
    pub welfare: Option<f64>,
    pub status: &'static str,
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    solver: Solver,
    grid_n: usize,
    num_agents: usize,
    num_resources: usize,
    resources_per_action: usize,
    level: f64,
    rep: usize,
}

impl BenchArgs {
    fn validate(&self) -> Result<(), Failure> {
        let empty = self.levels.is_empty()
            || self.resources.is_empty()
            || self.agents.is_empty()
            || self.per_action.is_empty()
            || self.grid.is_empty()
            || self.solvers.is_empty();
        if empty {
            return Err(Failure::new(EXIT_PARSE, "every sweep axis needs at least one value"));
        }
        if self.reps == 0 {
            return Err(Failure::new(EXIT_PARSE, "--reps must be at least 1"));
        }
        if self.budget_secs.is_some_and(|b| !(b > 0.0)) {
            return Err(Failure::new(EXIT_PARSE, "--budget-secs must be positive"));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &grid_n in &self.grid {
            for &num_agents in &self.agents {
                for &num_resources in &self.resources {
                    for &resources_per_action in &self.per_action {
                        for &level in &self.levels {
                            for &solver in &self.solvers {
                                for rep in 0..self.reps {
                                    out.push(Cell {
                                        solver,
                                        grid_n,
                                        num_agents,
                                        num_resources,
                                        resources_per_action,
                                        level,
                                        rep,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn status_of(e: &AuctionError) -> &'static str {
    match e {
        AuctionError::Infeasible => "infeasible",
        AuctionError::NodeLimit { .. } => "budget",
        AuctionError::Resource(mdpauction::resource::ResourceError::Blowup(_)) => "blowup",
        _ => "error",
    }
}

fn run_cell(cell: Cell, seed: u64, budget: Option<Duration>) -> Row {
    let mut row = Row {
        schema_version: SCHEMA_VERSION,
        solver: cell.solver,
        grid_n: cell.grid_n,
        num_agents: cell.num_agents,
        num_resources: cell.num_resources,
        resources_per_action: cell.resources_per_action,
        constraint_level: cell.level,
        rep: cell.rep,
        seed,
        wall_ms: 0.0,
        nodes: None,
        lp_solves: None,
        binary_vars: None,
        welfare: None,
        status: "invalid",
    };
    let params = DeliveryParams {
        grid_n: cell.grid_n,
        num_agents: cell.num_agents,
        num_resources: cell.num_resources,
        resources_per_action: cell.resources_per_action,
        c_glob: cell.level,
        c_loc: cell.level,
        seed,
    };
    let Ok(inst) = gen_delivery(&params) else {
        return row;
    };
    let solver = cell.solver;
    let (tx, rx) = mpsc::channel();
    let start = Instant::now();
    // A cell that overruns its budget is abandoned; its thread finishes in
    // the background and the answer is dropped.
    std::thread::spawn(move || {
        let r = match solver {
            Solver::MdpWdp => solve_wdp(&inst),
            Solver::Flat => flat_wdp(&inst),
        };
        let _ = tx.send(r);
    });
    let result: Option<Result<Allocation, AuctionError>> = match budget {
        Some(b) => rx.recv_timeout(b).ok(),
        None => rx.recv().ok(),
    };
    row.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    match result {
        None => row.status = "timeout",
        Some(Ok(a)) => {
            row.nodes = Some(a.stats.nodes_explored);
            row.lp_solves = Some(a.stats.lp_solves);
            row.binary_vars = Some(a.binary_vars);
            row.welfare = Some(a.welfare);
            row.status = "optimal";
        }
        Some(Err(e)) => row.status = status_of(&e),
    }
    row
}

pub fn run_sweep(args: &BenchArgs) -> Result<Vec<Row>, Failure> {
    args.validate()?;
    let budget = args.budget_secs.map(Duration::from_secs_f64);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Failure::new(EXIT_FAILURE, e))?;
    let cells = args.cells();
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|&c| run_cell(c, args.seed.wrapping_add(c.rep as u64), budget))
            .collect()
    }))
}

pub fn write_csv<W: std::io::Write>(rows: &[Row], w: W) -> Result<(), Failure> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(header()).map_err(|e| Failure::new(EXIT_FAILURE, e))?;
    }
    for r in rows {
        out.serialize(r).map_err(|e| Failure::new(EXIT_FAILURE, e))?;
    }
    out.flush().map_err(|e| Failure::new(EXIT_FAILURE, e))
}

pub fn header() -> [&'static str; 15] {
    [
        "schema_version",
        "solver",
        "grid_n",
        "num_agents",
        "num_resources",
        "resources_per_action",
        "constraint_level",
        "rep",
        "seed",
        "wall_ms",
        "nodes",
        "lp_solves",
        "binary_vars",
        "welfare",
        "status",
    ]
}

pub fn cmd_bench(args: &BenchArgs) -> Result<(), Failure> {
    let rows = run_sweep(args)?;
    match &args.out {
        Some(p) => {
            let f =
                std::fs::File::create(p).map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", p.display())))?;
            write_csv(&rows, f)
        }
        None => write_csv(&rows, std::io::stdout().lock()),
    }
}
