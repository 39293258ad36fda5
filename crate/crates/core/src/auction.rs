//! Winner determination and VCG payments for agents bidding with MDPs.
//!
//! Two solvers: the combined MILP over occupation measures and one binary per
//! agent and resource, and the flat baseline that values every feasible bundle
//! separately and solves an assignment program over the bundles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{LpProblem, Sense};
use crate::mdp::{policy_from_occupation, MdpError, OccupationMeasure, Policy};
use crate::milp::{solve_milp, MilpConfig, MilpError, MilpProblem, MilpSolution, MilpStats, MilpStatus};
use crate::resource::{
    bundle_value, feasible_bundles, lexicographic_min_binaries, policy_resource_usage, AgentBlock, BlockLayout, Bundle,
    ConstrainedMdp, ResourceError, XNorm, ACTIVITY_TOL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuctionError {
    #[error("invalid auction: {0}")]
    InvalidInput(String),
    #[error("node limit reached")]
    NodeLimit { incumbent: Option<Box<Allocation>> },
    #[error("winner determination is infeasible")]
    Infeasible,
    #[error("while solving without agent {agent}: {source}")]
    Payment { agent: usize, source: Box<AuctionError> },
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Milp(MilpError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

impl From<MilpError> for AuctionError {
    fn from(e: MilpError) -> Self {
        match e {
            MilpError::NodeLimit { .. } => AuctionError::NodeLimit { incumbent: None },
            other => AuctionError::Milp(other),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AuctionRaw", into = "AuctionRaw")]
pub struct AuctionInstance {
    pub agents: Vec<ConstrainedMdp>,
    pub kappa: Vec<Vec<f64>>,
    pub rho_hat: Bundle,
    pub discount: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AuctionRaw {
    agents: Vec<ConstrainedMdp>,
    kappa: Vec<Vec<f64>>,
    rho_hat: Bundle,
    discount: f64,
}

impl TryFrom<AuctionRaw> for AuctionInstance {
    type Error = AuctionError;
    fn try_from(r: AuctionRaw) -> Result<Self, AuctionError> {
        AuctionInstance::new(r.agents, r.kappa, r.rho_hat, r.discount)
    }
}

impl From<AuctionInstance> for AuctionRaw {
    fn from(a: AuctionInstance) -> Self {
        AuctionRaw {
            agents: a.agents,
            kappa: a.kappa,
            rho_hat: a.rho_hat,
            discount: a.discount,
        }
    }
}

impl AuctionInstance {
    /// Validates shapes and installs the shared `kappa` in every agent.
    pub fn new(
        mut agents: Vec<ConstrainedMdp>,
        kappa: Vec<Vec<f64>>,
        rho_hat: Bundle,
        discount: f64,
    ) -> Result<AuctionInstance, AuctionError> {
        let bad = |m: String| Err(AuctionError::InvalidInput(m));
        if !(discount > 0.0 && discount < 1.0) {
            return bad(format!("discount {discount} outside (0,1)"));
        }
        let no = rho_hat.quantities.len();
        if kappa.len() != no {
            return bad(format!("kappa has {} rows for {no} resources", kappa.len()));
        }
        let nc = kappa.first().map_or(0, |r| r.len());
        if kappa
            .iter()
            .any(|r| r.len() != nc || r.iter().any(|v| !(v.is_finite() && *v >= 0.0)))
        {
            return bad("kappa must be rectangular, finite and nonnegative".into());
        }
        if let Some(first) = agents.first() {
            let (ns, na) = (first.mdp.num_states(), first.mdp.num_actions());
            for (m, a) in agents.iter().enumerate() {
                if a.mdp.num_states() != ns || a.mdp.num_actions() != na {
                    return bad(format!("agent {m} has different state or action counts"));
                }
                if a.spec.num_resources() != no || a.spec.num_capacities() != nc {
                    return bad(format!("agent {m} has different resource or capacity counts"));
                }
            }
        }
        for a in agents.iter_mut() {
            a.spec.kappa = kappa.clone();
        }
        Ok(AuctionInstance {
            agents,
            kappa,
            rho_hat,
            discount,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_resources(&self) -> usize {
        self.rho_hat.quantities.len()
    }

    pub fn supply(&self) -> Vec<f64> {
        self.rho_hat.quantities.iter().map(|&q| f64::from(q)).collect()
    }

    /// The same auction with agent `m` removed.
    pub fn without(&self, m: usize) -> AuctionInstance {
        let mut agents = self.agents.clone();
        agents.remove(m);
        AuctionInstance { agents, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentAllocation {
    pub bundle: Bundle,
    pub value: f64,
    pub policy: Policy,
    pub occupation: OccupationMeasure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub agents: Vec<AgentAllocation>,
    pub welfare: f64,
    pub binary_vars: usize,
    pub stats: MilpStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaymentVector {
    pub payments: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct WdpConfig {
    pub milp: MilpConfig,
    pub norm: XNorm,
    /// Re-solve so the δ matrix is the lexicographically smallest among
    /// welfare-optimal allocations. Costs one MILP per binary.
    pub lexicographic_tiebreak: bool,
}

/// Solution of the block MILP in the blocks' own coordinates.
#[derive(Clone, Debug)]
pub struct BlockAllocation {
    pub columns: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub delta: Vec<Vec<f64>>,
    pub welfare: f64,
    pub milp: MilpSolution,
}

pub fn agent_blocks(instance: &AuctionInstance, norm: XNorm) -> Result<Vec<AgentBlock>, AuctionError> {
    instance
        .agents
        .iter()
        .map(|a| AgentBlock::from_cmdp(a, norm).map_err(AuctionError::from))
        .collect()
}

pub fn build_wdp_milp(instance: &AuctionInstance) -> Result<MilpProblem, AuctionError> {
    let blocks = agent_blocks(instance, XNorm::PerResource)?;
    Ok(crate::resource::build_blocks_milp(&blocks, &instance.kappa, Some(&instance.supply()))?.0)
}

/// Splits a solution of the block MILP into per-agent columns and values.
pub fn decode_blocks(blocks: &[AgentBlock], layout: &BlockLayout, sol: MilpSolution) -> BlockAllocation {
    let mut columns = Vec::new();
    let mut values = Vec::new();
    let mut delta = Vec::new();
    for (m, b) in blocks.iter().enumerate() {
        let x = sol.x[layout.x_range(m, b)].to_vec();
        values.push(b.objective.iter().zip(&x).map(|(c, v)| c * v).sum());
        columns.push(x);
        delta.push((0..layout.num_resources).map(|o| sol.x[layout.delta(m, o)]).collect());
    }
    BlockAllocation {
        welfare: values.iter().sum(),
        columns,
        values,
        delta,
        milp: sol,
    }
}

/// Solves the combined winner-determination MILP over arbitrary agent blocks.
pub fn solve_blocks(
    blocks: &[AgentBlock],
    kappa: &[Vec<f64>],
    supply: &[f64],
    config: &WdpConfig,
) -> Result<BlockAllocation, AuctionError> {
    solve_blocks_keep(blocks, kappa, supply, config).map_err(|(e, _)| e)
}

/// Like [`solve_blocks`], but a node-limit failure also hands back the
/// incumbent in block coordinates.
pub fn solve_blocks_keep(
    blocks: &[AgentBlock],
    kappa: &[Vec<f64>],
    supply: &[f64],
    config: &WdpConfig,
) -> Result<BlockAllocation, (AuctionError, Option<BlockAllocation>)> {
    let (problem, layout) =
        crate::resource::build_blocks_milp(blocks, kappa, Some(supply)).map_err(|e| (e.into(), None))?;
    let sol = match solve_milp(&problem, &config.milp) {
        Ok(s) => s,
        Err(MilpError::NodeLimit { incumbent, .. }) => {
            let inc = incumbent.map(|s| decode_blocks(blocks, &layout, *s));
            return Err((AuctionError::NodeLimit { incumbent: None }, inc));
        }
        Err(e) => return Err((e.into(), None)),
    };
    if sol.status == MilpStatus::Infeasible {
        return Err((AuctionError::Infeasible, None));
    }
    let sol = if config.lexicographic_tiebreak {
        let order: Vec<usize> = problem.binary_vars.clone();
        let mut s =
            lexicographic_min_binaries(&problem, sol.objective, &order, &config.milp).map_err(|e| (e.into(), None))?;
        s.stats.nodes_explored += sol.stats.nodes_explored;
        s.stats.lp_solves += sol.stats.lp_solves;
        s
    } else {
        sol
    };
    Ok(decode_blocks(blocks, &layout, sol))
}

fn agent_allocation(agent: &ConstrainedMdp, x: &[f64], value: f64) -> Result<AgentAllocation, AuctionError> {
    let (ns, na) = (agent.mdp.num_states(), agent.mdp.num_actions());
    let occupation = OccupationMeasure::from_flat(x, ns, na);
    Ok(AgentAllocation {
        bundle: policy_resource_usage(&occupation, &agent.spec),
        value,
        policy: policy_from_occupation(&occupation)?,
        occupation,
    })
}

pub fn solve_wdp(instance: &AuctionInstance) -> Result<Allocation, AuctionError> {
    solve_wdp_with(instance, &WdpConfig::default())
}

pub fn solve_wdp_with(instance: &AuctionInstance, config: &WdpConfig) -> Result<Allocation, AuctionError> {
    if instance.agents.is_empty() {
        return Ok(Allocation {
            agents: vec![],
            welfare: 0.0,
            binary_vars: 0,
            stats: MilpStats::default(),
        });
    }
    let blocks = agent_blocks(instance, config.norm)?;
    match solve_blocks_keep(&blocks, &instance.kappa, &instance.supply(), config) {
        Ok(sol) => decode_allocation(instance, sol),
        Err((AuctionError::NodeLimit { .. }, inc)) => {
            let incumbent = match inc {
                Some(sol) => Some(Box::new(decode_allocation(instance, sol)?)),
                None => None,
            };
            Err(AuctionError::NodeLimit { incumbent })
        }
        Err((e, _)) => Err(e),
    }
}

/// Maps a block solution in original coordinates back to per-agent policies.
pub fn decode_allocation(instance: &AuctionInstance, sol: BlockAllocation) -> Result<Allocation, AuctionError> {
    let agents = instance
        .agents
        .iter()
        .zip(sol.columns.iter().zip(&sol.values))
        .map(|(a, (x, &v))| agent_allocation(a, x, v))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Allocation {
        agents,
        welfare: sol.welfare,
        binary_vars: instance.num_agents() * instance.num_resources(),
        stats: sol.milp.stats,
    })
}

/// Value of one agent's feasible bundles, the table the flat auction bids with.
#[derive(Clone, Debug)]
pub struct BundleBids {
    pub bundles: Vec<Bundle>,
    pub values: Vec<f64>,
    pub policies: Vec<Policy>,
    /// Value with no resources at all, the agent's outside option.
    pub baseline: f64,
}

pub fn bundle_bids(agent: &ConstrainedMdp, global: &Bundle) -> Result<BundleBids, AuctionError> {
    let bundles = feasible_bundles(&agent.spec, Some(global))?;
    let mut values = Vec::with_capacity(bundles.len());
    let mut policies = Vec::with_capacity(bundles.len());
    for b in &bundles {
        let (v, p) = bundle_value(agent, b)?;
        values.push(v);
        policies.push(p);
    }
    let empty = Bundle::empty(agent.spec.num_resources());
    let baseline = match bundles.iter().position(|b| *b == empty) {
        Some(i) => values[i],
        None => match bundle_value(agent, &empty) {
            Ok((v, _)) => v,
            Err(ResourceError::NoFeasibleAction(_)) => 0.0,
            Err(e) => return Err(e.into()),
        },
    };
    Ok(BundleBids {
        bundles,
        values,
        policies,
        baseline,
    })
}

/// Builds the assignment program over bundle bids normalized to `b − baseline`.
pub fn build_flat_milp(bids: &[BundleBids], supply: &[f64]) -> Result<MilpProblem, AuctionError> {
    let n: usize = bids.iter().map(|b| b.bundles.len()).sum();
    let mut objective = Vec::with_capacity(n);
    for b in bids {
        objective.extend(b.values.iter().map(|v| v - b.baseline));
    }
    let mut lp = LpProblem::new(Sense::Maximize, objective);
    let mut offset = 0;
    let mut offsets = Vec::new();
    for b in bids {
        let mut row = vec![0.0; n];
        row[offset..offset + b.bundles.len()].fill(1.0);
        lp.add_ineq(row, 1.0);
        offsets.push(offset);
        offset += b.bundles.len();
    }
    for (o, &cap) in supply.iter().enumerate() {
        let mut row = vec![0.0; n];
        for (b, &off) in bids.iter().zip(&offsets) {
            for (k, w) in b.bundles.iter().enumerate() {
                row[off + k] = f64::from(w.quantities[o]);
            }
        }
        lp.add_ineq(row, cap);
    }
    Ok(MilpProblem::new(lp, (0..n).collect())?)
}

pub fn flat_wdp(instance: &AuctionInstance) -> Result<Allocation, AuctionError> {
    flat_wdp_with(instance, &MilpConfig::default())
}

pub fn flat_wdp_with(instance: &AuctionInstance, config: &MilpConfig) -> Result<Allocation, AuctionError> {
    let bids = instance
        .agents
        .iter()
        .map(|a| bundle_bids(a, &instance.rho_hat))
        .collect::<Result<Vec<_>, _>>()?;
    let problem = build_flat_milp(&bids, &instance.supply())?;
    let sol = solve_milp(&problem, config)?;
    if sol.status == MilpStatus::Infeasible {
        return Err(AuctionError::Infeasible);
    }
    let mut agents = Vec::new();
    let mut offset = 0;
    for (agent, b) in instance.agents.iter().zip(&bids) {
        let chosen = (0..b.bundles.len()).find(|&k| sol.x[offset + k] > 0.5);
        offset += b.bundles.len();
        let empty = Bundle::empty(instance.num_resources());
        let (bundle, value, policy) = match chosen {
            Some(k) => (b.bundles[k].clone(), b.values[k], b.policies[k].clone()),
            None => match bundle_value(agent, &empty) {
                Ok((v, p)) => (empty, v, p),
                Err(_) => (
                    empty,
                    0.0,
                    Policy::deterministic(&vec![0; agent.mdp.num_states()], agent.mdp.num_actions()),
                ),
            },
        };
        let occupation = crate::mdp::occupation_from_policy(&agent.mdp, &policy)?;
        agents.push(AgentAllocation {
            bundle,
            value,
            policy,
            occupation,
        });
    }
    Ok(Allocation {
        welfare: agents.iter().map(|a| a.value).sum(),
        agents,
        binary_vars: problem.binary_vars.len(),
        stats: sol.stats,
    })
}

/// VCG outcome with each agent's utility gain over its outside option.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VcgOutcome {
    pub allocation: Allocation,
    pub payments: PaymentVector,
    /// `V*₋ₘ` per agent.
    pub welfare_without: Vec<f64>,
    /// Value each agent obtains with no resources.
    pub baseline: Vec<f64>,
}

impl VcgOutcome {
    /// `Uᵐ − U(∅)ᵐ − qᵐ`, nonnegative under truthful bidding.
    pub fn surplus(&self, m: usize) -> f64 {
        self.allocation.agents[m].value - self.baseline[m] - self.payments.payments[m]
    }
}

pub fn vcg_payments(instance: &AuctionInstance) -> Result<(Allocation, PaymentVector), AuctionError> {
    let out = vcg_with(instance, &WdpConfig::default())?;
    Ok((out.allocation, out.payments))
}

pub fn vcg_with(instance: &AuctionInstance, config: &WdpConfig) -> Result<VcgOutcome, AuctionError> {
    let nm = instance.num_agents();
    let (allocation, without) = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..nm)
            .map(|m| {
                let sub = instance.without(m);
                scope.spawn(move || {
                    solve_wdp_with(&sub, config)
                        .map(|a| a.welfare)
                        .map_err(|e| AuctionError::Payment {
                            agent: m,
                            source: Box::new(e),
                        })
                })
            })
            .collect();
        let full = solve_wdp_with(instance, config);
        let without: Vec<Result<f64, AuctionError>> = handles
            .into_iter()
            .map(|h| h.join().expect("payment solve panicked"))
            .collect();
        (full, without)
    });
    let allocation = allocation?;
    let without = without.into_iter().collect::<Result<Vec<_>, _>>()?;
    let payments = (0..nm)
        .map(|m| without[m] - (allocation.welfare - allocation.agents[m].value))
        .collect();
    let baseline = instance
        .agents
        .iter()
        .map(|a| match bundle_value(a, &Bundle::empty(instance.num_resources())) {
            Ok((v, _)) => Ok(v),
            Err(ResourceError::NoFeasibleAction(_)) => Ok(0.0),
            Err(e) => Err(AuctionError::from(e)),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VcgOutcome {
        allocation,
        payments: PaymentVector { payments },
        welfare_without: without,
        baseline,
    })
}

/// Whether agent `m`'s policy uses resource `o`, read from its occupation.
pub fn uses_resource(agent: &ConstrainedMdp, x: &OccupationMeasure, o: usize) -> bool {
    (0..agent.mdp.num_actions()).any(|a| agent.spec.rho[a][o] * x.action_mass(a) > ACTIVITY_TOL)
}

/// Serializable auction result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuctionReport {
    pub welfare: f64,
    pub agents: Vec<AgentReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgentReport {
    pub bundle: Bundle,
    pub value: f64,
    pub payment: Option<f64>,
    pub policy: Vec<usize>,
}

impl AuctionReport {
    pub fn new(allocation: &Allocation, payments: Option<&PaymentVector>) -> AuctionReport {
        AuctionReport {
            welfare: allocation.welfare,
            agents: allocation
                .agents
                .iter()
                .enumerate()
                .map(|(m, a)| AgentReport {
                    bundle: a.bundle.clone(),
                    value: a.value,
                    payment: payments.map(|p| p.payments[m]),
                    policy: a.policy.actions(),
                })
                .collect(),
        }
    }
}
