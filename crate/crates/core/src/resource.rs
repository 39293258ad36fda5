//! Resources, capacities and the constrained-MDP MILP builders.
//!
//! The binary builder lays out variables as `[x (|S||A|, state-major) | δ (|O|)]`
//! per agent, and rows as flow equalities, then capacity rows, then (for
//! several agents) global supply rows, then synchronization rows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{LpProblem, Sense};
use crate::mdp::{self, build_dual_lp, policy_from_occupation, Mdp, MdpError, OccupationMeasure, Policy};
use crate::milp::{solve_milp, MilpConfig, MilpError, MilpProblem, MilpSolution, MilpStatus};

/// Occupation mass below which an action counts as unused.
pub const ACTIVITY_TOL: f64 = 1e-9;
/// Largest resource count the bundle enumerator accepts.
pub const MAX_ENUMERATED_RESOURCES: usize = 25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResourceError {
    #[error("invalid resource model: {0}")]
    InvalidInput(String),
    #[error("requirements are not binary; use the non-binary builder")]
    NonBinary,
    #[error("{0} resources is too many to enumerate bundles (limit {MAX_ENUMERATED_RESOURCES})")]
    Blowup(usize),
    #[error("no action is available in state {0} with this bundle")]
    NoFeasibleAction(usize),
    #[error("no capacity-feasible policy exists")]
    Infeasible,
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Milp(#[from] MilpError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ResourceError> {
    Err(ResourceError::InvalidInput(msg.into()))
}

/// `rho[a][o]` units of resource `o` needed by action `a`; `kappa[o][c]`
/// capacity cost of one unit of `o`; `kappa_hat[c]` capacity bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceSpec {
    pub resources: Vec<String>,
    pub capacities: Vec<String>,
    pub rho: Vec<Vec<f64>>,
    pub kappa: Vec<Vec<f64>>,
    pub kappa_hat: Vec<f64>,
}

impl ResourceSpec {
    pub fn num_resources(&self) -> usize {
        self.resources.len()
    }

    pub fn num_capacities(&self) -> usize {
        self.capacities.len()
    }

    pub fn validate(&self, num_actions: usize) -> Result<(), ResourceError> {
        let (no, nc) = (self.resources.len(), self.capacities.len());
        if self.rho.len() != num_actions || self.rho.iter().any(|r| r.len() != no) {
            return invalid(format!("rho must be {num_actions}x{no}"));
        }
        if self.kappa.len() != no || self.kappa.iter().any(|r| r.len() != nc) {
            return invalid(format!("kappa must be {no}x{nc}"));
        }
        if self.kappa_hat.len() != nc {
            return invalid(format!("kappa_hat must have {nc} entries"));
        }
        let all = self.rho.iter().flatten().chain(self.kappa.iter().flatten());
        if all.clone().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return invalid("rho and kappa must be finite and nonnegative");
        }
        if self.kappa_hat.iter().any(|v| !v.is_finite()) {
            return invalid("kappa_hat must be finite");
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.rho.iter().flatten().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Actions that need no resource at all.
    pub fn is_free_action(&self, a: usize) -> bool {
        self.rho[a].iter().all(|&v| v == 0.0)
    }

    /// Capacity used by `bundle` per capacity index.
    pub fn capacity_use(&self, bundle: &Bundle) -> Vec<f64> {
        (0..self.num_capacities())
            .map(|c| {
                bundle
                    .quantities
                    .iter()
                    .enumerate()
                    .map(|(o, &q)| self.kappa[o][c] * f64::from(q))
                    .sum()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Bundle {
    pub quantities: Vec<u32>,
}

impl Bundle {
    pub fn empty(n: usize) -> Bundle {
        Bundle { quantities: vec![0; n] }
    }

    pub fn from_slice(q: &[u32]) -> Bundle {
        Bundle { quantities: q.to_vec() }
    }

    pub fn le(&self, other: &Bundle) -> bool {
        self.quantities.iter().zip(&other.quantities).all(|(a, b)| a <= b)
    }

    pub fn total(&self) -> u32 {
        self.quantities.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConstrainedMdpRaw", into = "ConstrainedMdpRaw")]
pub struct ConstrainedMdp {
    pub mdp: Mdp,
    pub spec: ResourceSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ConstrainedMdpRaw {
    #[serde(flatten)]
    mdp: serde_json::Value,
    resources: Vec<String>,
    capacities: Vec<String>,
    rho: Vec<Vec<f64>>,
    #[serde(default)]
    kappa: Vec<Vec<f64>>,
    kappa_hat: Vec<f64>,
}

impl TryFrom<ConstrainedMdpRaw> for ConstrainedMdp {
    type Error = ResourceError;
    fn try_from(r: ConstrainedMdpRaw) -> Result<Self, ResourceError> {
        let mdp: Mdp = serde_json::from_value(r.mdp).map_err(|e| ResourceError::InvalidInput(e.to_string()))?;
        let no = r.resources.len();
        let nc = r.capacities.len();
        // An agent inside an auction may omit kappa and inherit the shared one.
        let kappa = if r.kappa.is_empty() && no > 0 {
            vec![vec![0.0; nc]; no]
        } else {
            r.kappa
        };
        ConstrainedMdp::new(
            mdp,
            ResourceSpec {
                resources: r.resources,
                capacities: r.capacities,
                rho: r.rho,
                kappa,
                kappa_hat: r.kappa_hat,
            },
        )
    }
}

impl From<ConstrainedMdp> for ConstrainedMdpRaw {
    fn from(c: ConstrainedMdp) -> Self {
        ConstrainedMdpRaw {
            mdp: serde_json::to_value(&c.mdp).expect("mdp serializes"),
            resources: c.spec.resources,
            capacities: c.spec.capacities,
            rho: c.spec.rho,
            kappa: c.spec.kappa,
            kappa_hat: c.spec.kappa_hat,
        }
    }
}

impl ConstrainedMdp {
    pub fn new(mdp: Mdp, spec: ResourceSpec) -> Result<ConstrainedMdp, ResourceError> {
        spec.validate(mdp.num_actions())?;
        Ok(ConstrainedMdp { mdp, spec })
    }

    /// Same agent restricted to the actions whose needs fit inside `bundle`.
    /// Returns the restricted agent and the kept action indices.
    pub fn restrict(&self, bundle: &Bundle) -> Result<(ConstrainedMdp, Vec<usize>), ResourceError> {
        let mdp = &self.mdp;
        let keep: Vec<usize> = (0..mdp.num_actions())
            .filter(|&a| {
                self.spec.rho[a]
                    .iter()
                    .zip(&bundle.quantities)
                    .all(|(&need, &have)| need <= f64::from(have))
            })
            .collect();
        if keep.is_empty() {
            return Err(ResourceError::NoFeasibleAction(0));
        }
        let ns = mdp.num_states();
        let transition = (0..ns)
            .map(|s| keep.iter().map(|&a| mdp.transition(s, a).to_vec()).collect())
            .collect();
        let reward = (0..ns)
            .map(|s| keep.iter().map(|&a| mdp.reward(s, a)).collect())
            .collect();
        let sub = Mdp::new(transition, reward, mdp.discount(), mdp.initial().to_vec())?;
        let mut spec = self.spec.clone();
        spec.rho = keep.iter().map(|&a| self.spec.rho[a].clone()).collect();
        Ok((ConstrainedMdp { mdp: sub, spec }, keep))
    }
}

/// Bundle of resources used by an occupation measure.
///
/// For binary requirements this is `H(Σ_a ρ(a,o) Σ_s x(s,a))`. For general
/// requirements it is the largest need among active actions.
pub fn policy_resource_usage(x: &OccupationMeasure, spec: &ResourceSpec) -> Bundle {
    let na = spec.rho.len();
    let mut q = vec![0u32; spec.num_resources()];
    for a in 0..na {
        let mass = x.action_mass(a);
        for (o, qo) in q.iter_mut().enumerate() {
            let need = spec.rho[a][o];
            if need > 0.0 && need * mass > ACTIVITY_TOL {
                *qo = (*qo).max(need.ceil() as u32);
            }
        }
    }
    Bundle { quantities: q }
}

pub fn check_capacity(bundle: &Bundle, spec: &ResourceSpec) -> bool {
    spec.capacity_use(bundle)
        .iter()
        .zip(&spec.kappa_hat)
        .all(|(u, h)| *u <= h + 1e-9)
}

/// Capacity-feasible 0/1 bundles within `global_bound`, lexicographic order.
pub fn feasible_bundles(spec: &ResourceSpec, global_bound: Option<&Bundle>) -> Result<Vec<Bundle>, ResourceError> {
    let no = spec.num_resources();
    if no > MAX_ENUMERATED_RESOURCES {
        return Err(ResourceError::Blowup(no));
    }
    let mut out = Vec::new();
    for code in 0u64..(1u64 << no) {
        let q: Vec<u32> = (0..no).map(|o| ((code >> (no - 1 - o)) & 1) as u32).collect();
        let b = Bundle { quantities: q };
        if let Some(g) = global_bound {
            if !b.le(g) {
                continue;
            }
        }
        if check_capacity(&b, spec) {
            out.push(b);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum XNorm {
    /// `X(o) = (1−γ)⁻¹ Σ_a ρ(a,o)`.
    #[default]
    PerResource,
    /// One `X = (1−γ)⁻¹ max_o Σ_a ρ(a,o)` for every resource.
    Global,
}

/// One agent's share of a binary-requirement MILP: the dual-LP flow system in
/// some coordinates, its resource needs and the normalizers used to couple
/// occupation to δ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentBlock {
    pub num_states: usize,
    pub num_actions: usize,
    pub objective: Vec<f64>,
    pub flow: Vec<Vec<f64>>,
    pub flow_rhs: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
    pub kappa_hat: Vec<f64>,
    pub norm: Vec<f64>,
}

impl AgentBlock {
    pub fn from_cmdp(cmdp: &ConstrainedMdp, norm: XNorm) -> Result<AgentBlock, ResourceError> {
        if !cmdp.spec.is_binary() {
            return Err(ResourceError::NonBinary);
        }
        let mdp = &cmdp.mdp;
        let lp = build_dual_lp(mdp, &[]);
        let mass = 1.0 / (1.0 - mdp.discount());
        Ok(AgentBlock {
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
            objective: lp.objective,
            flow: lp.eq_matrix,
            flow_rhs: lp.eq_rhs,
            norm: normalizers(&cmdp.spec.rho, mass, norm),
            rho: cmdp.spec.rho.clone(),
            kappa_hat: cmdp.spec.kappa_hat.clone(),
        })
    }

    pub fn num_columns(&self) -> usize {
        self.num_states * self.num_actions
    }
}

/// Synchronization normalizers `X(o)` for a block whose occupation variables
/// sum to `mass`.
pub fn normalizers(rho: &[Vec<f64>], mass: f64, norm: XNorm) -> Vec<f64> {
    let no = rho.first().map_or(0, |r| r.len());
    let per: Vec<f64> = (0..no).map(|o| mass * rho.iter().map(|r| r[o]).sum::<f64>()).collect();
    match norm {
        XNorm::PerResource => per,
        XNorm::Global => {
            let g = per.iter().fold(0.0f64, |a, v| a.max(*v));
            vec![g; no]
        }
    }
}

/// Index map for a MILP built by [`build_blocks_milp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub x_offsets: Vec<usize>,
    pub delta_offset: usize,
    pub num_resources: usize,
}

impl BlockLayout {
    pub fn x_range(&self, m: usize, block: &AgentBlock) -> std::ops::Range<usize> {
        self.x_offsets[m]..self.x_offsets[m] + block.num_columns()
    }

    pub fn delta(&self, m: usize, o: usize) -> usize {
        self.delta_offset + m * self.num_resources + o
    }
}

/// Builds the MILP coupling several agent blocks through shared capacity
/// costs `kappa[o][c]` and, when given, global supply bounds.
pub fn build_blocks_milp(
    blocks: &[AgentBlock],
    kappa: &[Vec<f64>],
    supply: Option<&[f64]>,
) -> Result<(MilpProblem, BlockLayout), ResourceError> {
    let no = kappa.len();
    let nc = kappa.first().map_or(0, |r| r.len());
    let mut x_offsets = Vec::with_capacity(blocks.len());
    let mut n = 0;
    for b in blocks {
        if b.rho.first().map_or(0, |r| r.len()) != no || b.kappa_hat.len() != nc || b.norm.len() != no {
            return invalid("agent block dimensions disagree with the shared resource model");
        }
        x_offsets.push(n);
        n += b.num_columns();
    }
    let delta_offset = n;
    let nm = blocks.len();
    n += nm * no;
    let layout = BlockLayout {
        x_offsets,
        delta_offset,
        num_resources: no,
    };

    let mut objective = vec![0.0; n];
    for (m, b) in blocks.iter().enumerate() {
        objective[layout.x_range(m, b)].copy_from_slice(&b.objective);
    }
    let mut lp = LpProblem::new(Sense::Maximize, objective);

    for (m, b) in blocks.iter().enumerate() {
        for (row, &rhs) in b.flow.iter().zip(&b.flow_rhs) {
            let mut full = vec![0.0; n];
            full[layout.x_range(m, b)].copy_from_slice(row);
            lp.add_eq(full, rhs);
        }
    }
    for (m, b) in blocks.iter().enumerate() {
        for c in 0..nc {
            let mut row = vec![0.0; n];
            for o in 0..no {
                row[layout.delta(m, o)] = kappa[o][c];
            }
            lp.add_ineq(row, b.kappa_hat[c]);
        }
    }
    if let Some(supply) = supply {
        for o in 0..no {
            let mut row = vec![0.0; n];
            for m in 0..nm {
                row[layout.delta(m, o)] = 1.0;
            }
            lp.add_ineq(row, supply[o]);
        }
    }
    for (m, b) in blocks.iter().enumerate() {
        for o in 0..no {
            let mut row = vec![0.0; n];
            if b.norm[o] > 0.0 {
                for s in 0..b.num_states {
                    for a in 0..b.num_actions {
                        let need = b.rho[a][o];
                        if need != 0.0 {
                            let j = s * b.num_actions + a;
                            row[layout.x_offsets[m] + j] = need / b.norm[o];
                        }
                    }
                }
            }
            row[layout.delta(m, o)] = -1.0;
            lp.add_ineq(row, 0.0);
        }
    }
    let binaries = (delta_offset..n).collect();
    Ok((MilpProblem::new(lp, binaries)?, layout))
}

/// Single-agent capacity-constrained MILP with binary requirements.
pub fn build_single_agent_milp(cmdp: &ConstrainedMdp, norm: XNorm) -> Result<MilpProblem, ResourceError> {
    let block = AgentBlock::from_cmdp(cmdp, norm)?;
    Ok(build_blocks_milp(&[block], &cmdp.spec.kappa, None)?.0)
}

/// MILP for general requirements with one binary per resource-using action.
#[derive(Clone, Debug)]
pub struct NonBinaryMilp {
    pub problem: MilpProblem,
    /// Actions owning a binary, in variable order after the occupation block.
    pub gated_actions: Vec<usize>,
    /// Capacity rows before pruning, `|C| |A_Δ|^{|O|}` over the gated actions.
    pub unpruned_capacity_rows: f64,
}

pub fn build_single_agent_milp_nonbinary(cmdp: &ConstrainedMdp) -> Result<NonBinaryMilp, ResourceError> {
    let mdp = &cmdp.mdp;
    let spec = &cmdp.spec;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let (no, nc) = (spec.num_resources(), spec.num_capacities());
    let gated: Vec<usize> = (0..na).filter(|&a| !spec.is_free_action(a)).collect();
    let nx = ns * na;
    let n = nx + gated.len();
    let pos = |a: usize| nx + gated.iter().position(|&g| g == a).expect("gated action");

    let dual = build_dual_lp(mdp, &[]);
    let mut objective = dual.objective.clone();
    objective.resize(n, 0.0);
    let mut lp = LpProblem::new(Sense::Maximize, objective);
    for (row, &rhs) in dual.eq_matrix.iter().zip(&dual.eq_rhs) {
        let mut full = row.clone();
        full.resize(n, 0.0);
        lp.add_eq(full, rhs);
    }

    let choices: Vec<Vec<usize>> = (0..no)
        .map(|o| (0..na).filter(|&a| spec.rho[a][o] > 0.0).collect())
        .filter(|c: &Vec<usize>| !c.is_empty())
        .collect();
    let used: Vec<usize> = (0..no).filter(|&o| (0..na).any(|a| spec.rho[a][o] > 0.0)).collect();
    let combos: f64 = choices.iter().map(|c| c.len() as f64).product();
    if combos * nc as f64 > 1e6 {
        return Err(ResourceError::Blowup(no));
    }
    for c in 0..nc {
        let mut idx = vec![0usize; choices.len()];
        loop {
            let mut row = vec![0.0; n];
            for (k, &o) in used.iter().enumerate() {
                let a = choices[k][idx[k]];
                row[pos(a)] += spec.kappa[o][c] * spec.rho[a][o];
            }
            lp.add_ineq(row, spec.kappa_hat[c]);
            let mut k = 0;
            while k < idx.len() {
                idx[k] += 1;
                if idx[k] < choices[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == idx.len() {
                break;
            }
        }
    }
    let big_x = 1.0 / (1.0 - mdp.discount());
    for &a in &gated {
        let mut row = vec![0.0; n];
        for s in 0..ns {
            row[s * na + a] = 1.0 / big_x;
        }
        row[pos(a)] = -1.0;
        lp.add_ineq(row, 0.0);
    }
    let binaries = (nx..n).collect();
    Ok(NonBinaryMilp {
        problem: MilpProblem::new(lp, binaries)?,
        unpruned_capacity_rows: nc as f64 * (gated.len() as f64).powi(no as i32),
        gated_actions: gated,
    })
}

/// Solved single-agent problem.
#[derive(Clone, Debug)]
pub struct AgentPlan {
    pub value: f64,
    pub occupation: OccupationMeasure,
    pub policy: Policy,
    pub delta: Vec<f64>,
    pub usage: Bundle,
    pub milp: MilpSolution,
}

pub fn solve_single_agent(cmdp: &ConstrainedMdp, norm: XNorm, config: &MilpConfig) -> Result<AgentPlan, ResourceError> {
    let problem = build_single_agent_milp(cmdp, norm)?;
    let sol = solve_milp(&problem, config)?;
    if sol.status == MilpStatus::Infeasible {
        return Err(ResourceError::Infeasible);
    }
    let (ns, na) = (cmdp.mdp.num_states(), cmdp.mdp.num_actions());
    let occupation = OccupationMeasure::from_flat(&sol.x[..ns * na], ns, na);
    let policy = policy_from_occupation(&occupation)?;
    Ok(AgentPlan {
        value: sol.objective,
        usage: policy_resource_usage(&occupation, &cmdp.spec),
        delta: sol.x[ns * na..].to_vec(),
        occupation,
        policy,
        milp: sol,
    })
}

/// Optimal value and policy when only the actions fitting in `bundle` may be
/// used. Capacity-violating bundles are valued by the best capacity-feasible
/// policy inside them.
pub fn bundle_value(cmdp: &ConstrainedMdp, bundle: &Bundle) -> Result<(f64, Policy), ResourceError> {
    if bundle.quantities.len() != cmdp.spec.num_resources() {
        return invalid("bundle length does not match the resource set");
    }
    let (sub, keep) = cmdp.restrict(bundle)?;
    let (value, sub_policy) = if check_capacity(bundle, &cmdp.spec) {
        let d = mdp::solve_dual(&sub.mdp, &[])?;
        (d.value, d.policy)
    } else {
        let plan = solve_single_agent(&sub, XNorm::PerResource, &MilpConfig::default())?;
        (plan.value, plan.policy)
    };
    let na = cmdp.mdp.num_actions();
    let probs = sub_policy
        .probs
        .iter()
        .map(|row| {
            let mut full = vec![0.0; na];
            for (k, &a) in keep.iter().enumerate() {
                full[a] = row[k];
            }
            full
        })
        .collect();
    Ok((value, Policy { probs }))
}

/// Re-solves `problem` keeping the objective within tolerance of `optimum`
/// while fixing `order` binaries to zero one at a time where possible. The
/// result is the lexicographically smallest optimal assignment of `order`.
pub fn lexicographic_min_binaries(
    problem: &MilpProblem,
    optimum: f64,
    order: &[usize],
    config: &MilpConfig,
) -> Result<MilpSolution, ResourceError> {
    let mut p = problem.clone();
    let sign = if p.base.sense == Sense::Maximize { -1.0 } else { 1.0 };
    let slack = 1e-7 * (1.0 + optimum.abs());
    let row: Vec<f64> = p.base.objective.iter().map(|c| sign * c).collect();
    p.base.add_ineq(row, sign * optimum + slack);
    let mut best = solve_milp(&p, config)?;
    if best.status == MilpStatus::Infeasible {
        return Err(ResourceError::Infeasible);
    }
    for &k in order {
        if best.x[k] < 0.5 {
            p.base.bounds[k] = Some((0.0, 0.0));
            continue;
        }
        let mut trial = p.clone();
        trial.base.bounds[k] = Some((0.0, 0.0));
        let s = solve_milp(&trial, config)?;
        if s.status == MilpStatus::Optimal {
            p = trial;
            best = s;
        } else {
            p.base.bounds[k] = Some((1.0, 1.0));
        }
    }
    Ok(best)
}
