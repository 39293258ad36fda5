//! Command-line front end: solve single agents, run auctions, sweep the
//! delivery benchmark and write generated instances.

mod bench;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use mdpauction::auction::{
    flat_wdp_with, solve_wdp_with, vcg_with, Allocation, AuctionError, AuctionInstance, AuctionReport, WdpConfig,
};
use mdpauction::benchgen::{
    gen_delivery, gen_from_knapsack, gen_random_agent, gen_random_auction, DeliveryParams, KnapsackInstance,
    RandomParams,
};
use mdpauction::distributed::{parse_adversaries, solve_wdp_distributed, DistributedConfig, DistributedError};
use mdpauction::fixtures;
use mdpauction::mdp::{policy_from_occupation, solve_dual, Mdp, MdpError, OccupationMeasure};
use mdpauction::milp::{solve_milp, MilpConfig, MilpError, MilpStats, MilpStatus, DEFAULT_NODE_LIMIT};
use mdpauction::privacy::solve_wdp_encrypted;
use mdpauction::resource::{
    build_single_agent_milp_nonbinary, policy_resource_usage, solve_single_agent, ConstrainedMdp, ResourceError, XNorm,
    MAX_ENUMERATED_RESOURCES,
};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_INFEASIBLE: u8 = 2;
pub const EXIT_BUDGET: u8 = 3;
pub const EXIT_PARSE: u8 = 4;
pub const EXIT_BLOWUP: u8 = 5;

#[derive(Parser)]
#[command(name = "mdpauction", version, about = "Resource allocation among MDP-driven agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one agent, with or without its resource constraints.
    Solve(SolveArgs),
    /// Allocate resources among the agents of an auction instance.
    Auction(AuctionArgs),
    /// Sweep the delivery benchmark and write CSV.
    Bench(bench::BenchArgs),
    /// Write a generated or built-in instance as JSON.
    Gen(GenArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mdp,
    Constrained,
    ConstrainedNonbinary,
}

#[derive(Args)]
struct SolveArgs {
    input: PathBuf,
    #[arg(long, value_enum, default_value = "constrained")]
    mode: Mode,
    #[arg(long, default_value_t = DEFAULT_NODE_LIMIT)]
    node_limit: usize,
}

#[derive(Args)]
struct AuctionArgs {
    input: PathBuf,
    /// Enumerate bundles and solve the flat bundle auction.
    #[arg(long)]
    flat: bool,
    /// Solve the MDP-aware winner determination (default when nothing else is asked for).
    #[arg(long)]
    mdp_wdp: bool,
    /// Add VCG payments.
    #[arg(long)]
    vcg: bool,
    /// Solve relaxations on this many worker threads.
    #[arg(long, value_name = "N")]
    distributed: Option<usize>,
    /// Misbehaving workers, e.g. `inflate:1,timeout:3`.
    #[arg(long, default_value = "", requires = "distributed")]
    adversary: String,
    #[arg(long, default_value_t = 2000, requires = "distributed")]
    deadline_ms: u64,
    /// Write the full distributed audit log here.
    #[arg(long, requires = "distributed")]
    audit_log: Option<PathBuf>,
    /// Seal every bid with a seeded linear transform before solving.
    #[arg(long, value_name = "SEED")]
    encrypt_bids: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_NODE_LIMIT)]
    node_limit: usize,
}

#[derive(Args)]
struct GenArgs {
    #[command(subcommand)]
    kind: GenKind,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GenKind {
    /// Grid delivery auction.
    Delivery {
        #[arg(long, default_value_t = 5)]
        grid: usize,
        #[arg(long, default_value_t = 3)]
        agents: usize,
        #[arg(long, default_value_t = 4)]
        resources: usize,
        #[arg(long, default_value_t = 2)]
        per_action: usize,
        #[arg(long, default_value_t = 0.5)]
        c_glob: f64,
        #[arg(long, default_value_t = 0.5)]
        c_loc: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Random auction, or a single random agent with `--agent`.
    Random {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        agent: bool,
    },
    /// Single agent encoding a random knapsack.
    Knapsack {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        max_items: usize,
    },
    /// One of the built-in truck delivery instances.
    Fixture {
        #[arg(value_enum)]
        name: Fixture,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    DeliveryAgent,
    DeliveryAuction,
    NonbinaryAgent,
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Display) -> Failure {
        Failure {
            code,
            message: message.to_string(),
        }
    }
}

fn milp_code(e: &MilpError) -> u8 {
    match e {
        MilpError::NodeLimit { .. } => EXIT_BUDGET,
        _ => EXIT_FAILURE,
    }
}

impl From<ResourceError> for Failure {
    fn from(e: ResourceError) -> Failure {
        let code = match &e {
            ResourceError::Infeasible => EXIT_INFEASIBLE,
            ResourceError::Blowup(_) => EXIT_BLOWUP,
            ResourceError::InvalidInput(_) | ResourceError::NonBinary => EXIT_PARSE,
            ResourceError::Milp(m) => milp_code(m),
            _ => EXIT_FAILURE,
        };
        Failure::new(code, e)
    }
}

impl From<AuctionError> for Failure {
    fn from(e: AuctionError) -> Failure {
        let code = match &e {
            AuctionError::Infeasible => EXIT_INFEASIBLE,
            AuctionError::NodeLimit { .. } => EXIT_BUDGET,
            AuctionError::InvalidInput(_) => EXIT_PARSE,
            AuctionError::Resource(r) => Failure::from(r.clone()).code,
            AuctionError::Payment { source, .. } => Failure::from((**source).clone()).code,
            AuctionError::Milp(m) => milp_code(m),
            AuctionError::Mdp(_) => EXIT_FAILURE,
        };
        Failure::new(code, e)
    }
}

impl From<DistributedError> for Failure {
    fn from(e: DistributedError) -> Failure {
        match e {
            DistributedError::Auction(a) => a.into(),
            DistributedError::Milp(m) => Failure::new(milp_code(&m), m),
            other => Failure::new(EXIT_FAILURE, other),
        }
    }
}

impl From<MdpError> for Failure {
    fn from(e: MdpError) -> Failure {
        Failure::new(EXIT_FAILURE, e)
    }
}

fn read_json(path: &Path) -> Result<Value, Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::new(EXIT_PARSE, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::new(EXIT_PARSE, format!("{}: {e}", path.display())))
}

fn parse<T: serde::de::DeserializeOwned>(v: Value, what: &str) -> Result<T, Failure> {
    serde_json::from_value(v).map_err(|e| Failure::new(EXIT_PARSE, format!("not a valid {what}: {e}")))
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(EXIT_FAILURE, e))?;
    match out {
        Some(p) => {
            std::fs::write(p, text + "\n").map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", p.display())))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn milp_config(node_limit: usize) -> MilpConfig {
    MilpConfig {
        node_limit,
        ..MilpConfig::default()
    }
}

fn stats_json(stats: &MilpStats) -> Value {
    json!({ "nodes_explored": stats.nodes_explored, "lp_solves": stats.lp_solves })
}

fn cmd_solve(args: &SolveArgs) -> Result<(), Failure> {
    let raw = read_json(&args.input)?;
    let constrained = raw.get("rho").is_some();
    let config = milp_config(args.node_limit);
    let report = match args.mode {
        Mode::Mdp => {
            let (mdp, spec) = if constrained {
                let c: ConstrainedMdp = parse(raw, "constrained MDP")?;
                (c.mdp, Some(c.spec))
            } else {
                (parse::<Mdp>(raw, "MDP")?, None)
            };
            let sol = solve_dual(&mdp, &[])?;
            json!({
                "mode": "mdp",
                "objective": sol.value,
                "policy": sol.policy.actions(),
                "bundle": spec.map(|s| policy_resource_usage(&sol.occupation, &s)),
                "stats": Value::Null,
            })
        }
        Mode::Constrained => {
            let cmdp: ConstrainedMdp = parse(raw, "constrained MDP")?;
            let plan = solve_single_agent(&cmdp, XNorm::PerResource, &config)?;
            json!({
                "mode": "constrained",
                "objective": plan.value,
                "policy": plan.policy.actions(),
                "bundle": plan.usage,
                "stats": stats_json(&plan.milp.stats),
            })
        }
        Mode::ConstrainedNonbinary => {
            let cmdp: ConstrainedMdp = parse(raw, "constrained MDP")?;
            let nb = build_single_agent_milp_nonbinary(&cmdp)?;
            let sol = solve_milp(&nb.problem, &config).map_err(ResourceError::from)?;
            if sol.status == MilpStatus::Infeasible {
                return Err(ResourceError::Infeasible.into());
            }
            let (ns, na) = (cmdp.mdp.num_states(), cmdp.mdp.num_actions());
            let x = OccupationMeasure::from_flat(&sol.x[..ns * na], ns, na);
            json!({
                "mode": "constrained-nonbinary",
                "objective": sol.objective,
                "policy": policy_from_occupation(&x)?.actions(),
                "bundle": policy_resource_usage(&x, &cmdp.spec),
                "stats": stats_json(&sol.stats),
                "capacity_rows": { "unpruned": nb.unpruned_capacity_rows, "gated_actions": nb.gated_actions },
            })
        }
    };
    emit(&report, None)
}

fn allocation_json(alloc: &Allocation, payments: Option<&[f64]>) -> Value {
    let report = AuctionReport::new(
        alloc,
        payments
            .map(|p| mdpauction::auction::PaymentVector { payments: p.to_vec() })
            .as_ref(),
    );
    let mut v = serde_json::to_value(report).expect("report serializes");
    v["binary_vars"] = json!(alloc.binary_vars);
    v["stats"] = stats_json(&alloc.stats);
    v
}

fn cmd_auction(args: &AuctionArgs) -> Result<(), Failure> {
    let inst: AuctionInstance = parse(read_json(&args.input)?, "auction instance")?;
    let config = WdpConfig {
        milp: milp_config(args.node_limit),
        ..WdpConfig::default()
    };
    let run_mdp = args.mdp_wdp || (!args.flat && args.distributed.is_none());
    let mut out = serde_json::Map::new();

    let mut mdp_welfare = None;
    if run_mdp {
        let (alloc, payments) = if args.vcg && args.encrypt_bids.is_none() {
            let v = vcg_with(&inst, &config)?;
            (v.allocation, Some(v.payments.payments))
        } else {
            let alloc = match args.encrypt_bids {
                Some(seed) => solve_wdp_encrypted(&inst, seed, &config)?,
                None => solve_wdp_with(&inst, &config)?,
            };
            // Payments need the plain bids of every coalition.
            let payments = if args.vcg {
                Some(vcg_with(&inst, &config)?.payments.payments)
            } else {
                None
            };
            (alloc, payments)
        };
        mdp_welfare = Some(alloc.welfare);
        out.insert("mdp_wdp".into(), allocation_json(&alloc, payments.as_deref()));
    }

    if args.flat {
        if inst.num_resources() > MAX_ENUMERATED_RESOURCES {
            return Err(ResourceError::Blowup(inst.num_resources()).into());
        }
        let alloc = flat_wdp_with(&inst, &config.milp)?;
        if let Some(w) = mdp_welfare {
            let diff = w - alloc.welfare;
            eprintln!("welfare difference (mdp-wdp - flat): {diff:.3e}");
            out.insert("welfare_difference".into(), json!(diff));
        }
        out.insert("flat".into(), allocation_json(&alloc, None));
    }

    if let Some(n) = args.distributed {
        let workers = parse_adversaries(&args.adversary, n).map_err(|e| Failure::new(EXIT_PARSE, e))?;
        let dcfg = DistributedConfig {
            deadline: Duration::from_millis(args.deadline_ms),
            milp: config.milp.clone(),
            ..DistributedConfig::default()
        };
        let (alloc, log) = solve_wdp_distributed(&inst, &workers, &dcfg, args.encrypt_bids)?;
        if let Some(p) = &args.audit_log {
            emit(&log, Some(p))?;
        }
        let mut v = allocation_json(&alloc, None);
        v["audit"] = json!({
            "flagged": log.flagged,
            "tasks": log.tasks.len(),
            "verifications": log.verifications,
            "factorizations": log.factorizations,
            "local_solves": log.local_solves,
        });
        out.insert("distributed".into(), v);
    }
    emit(&Value::Object(out), None)
}

fn cmd_gen(args: &GenArgs) -> Result<(), Failure> {
    let out = args.out.as_deref();
    let gen_err = |e: mdpauction::benchgen::GenError| Failure::new(EXIT_PARSE, e);
    match &args.kind {
        &GenKind::Delivery {
            grid,
            agents,
            resources,
            per_action,
            c_glob,
            c_loc,
            seed,
        } => {
            let p = DeliveryParams {
                grid_n: grid,
                num_agents: agents,
                num_resources: resources,
                resources_per_action: per_action,
                c_glob,
                c_loc,
                seed,
            };
            emit(&gen_delivery(&p).map_err(gen_err)?, out)
        }
        &GenKind::Random { seed, agent } => {
            let p = RandomParams {
                seed,
                ..RandomParams::default()
            };
            if agent {
                emit(&gen_random_agent(&p).map_err(gen_err)?, out)
            } else {
                emit(&gen_random_auction(&p).map_err(gen_err)?, out)
            }
        }
        &GenKind::Knapsack { seed, max_items } => {
            let inst = KnapsackInstance::random(seed, max_items);
            let (cmdp, _) = gen_from_knapsack(&inst, 0.9).map_err(gen_err)?;
            emit(&cmdp, out)
        }
        GenKind::Fixture { name } => match name {
            Fixture::DeliveryAgent => emit(&fixtures::delivery_agent([1.0, 0.0, 0.0]), out),
            Fixture::DeliveryAuction => emit(&fixtures::delivery_auction(), out),
            Fixture::NonbinaryAgent => emit(&fixtures::nonbinary_delivery_agent(), out),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_PARSE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Auction(a) => cmd_auction(a),
        Command::Bench(a) => bench::cmd_bench(a),
        Command::Gen(a) => cmd_gen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
