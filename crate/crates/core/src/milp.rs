//! Branch-and-bound over binary variables on top of LP relaxations.
//!
//! Nodes are explored best-bound first (ties by creation order). The branching
//! variable is the most fractional binary, lowest index on ties. Relaxations
//! are either solved internally, restarting each child from its parent's
//! basis, or handed in batches to a caller-supplied [`RelaxationEvaluator`].

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{solve_lp, solve_lp_warm, LpError, LpProblem, LpSolution, LpStatus, Sense, WarmStart};

const SNAPSHOT_BUDGET: usize = 512 << 20;
const INTEGRALITY_TOL: f64 = 1e-6;
pub const PRUNE_TOL: f64 = 1e-9;
pub const DEFAULT_NODE_LIMIT: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MilpError {
    #[error("invalid milp: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("node limit of {limit} exceeded")]
    NodeLimit {
        limit: usize,
        incumbent: Option<Box<MilpSolution>>,
    },
    #[error("lp relaxation is unbounded")]
    Unbounded,
    #[error("relaxation evaluator failed: {0}")]
    Evaluator(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilpProblem {
    pub base: LpProblem,
    pub binary_vars: Vec<usize>,
}

impl MilpProblem {
    /// Sets `[0, 1]` bounds on every binary index and validates the result.
    pub fn new(mut base: LpProblem, mut binary_vars: Vec<usize>) -> Result<MilpProblem, MilpError> {
        binary_vars.sort_unstable();
        binary_vars.dedup();
        for &k in &binary_vars {
            if k >= base.num_vars() {
                return Err(MilpError::InvalidInput(format!("binary index {k} out of range")));
            }
            base.nonneg[k] = true;
            base.bounds[k] = Some((0.0, 1.0));
        }
        let p = MilpProblem { base, binary_vars };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), MilpError> {
        self.base.validate()?;
        // A binary may arrive already fixed to 0 or 1.
        let unit = |v: f64| v == 0.0 || v == 1.0;
        for &k in &self.binary_vars {
            if k >= self.base.num_vars() {
                return Err(MilpError::InvalidInput(format!("binary index {k} out of range")));
            }
            let (lo, hi) = (self.base.lower(k), self.base.upper(k));
            if !(unit(lo) && unit(hi) && lo <= hi) {
                return Err(MilpError::InvalidInput(format!(
                    "binary variable {k} must have bounds within [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BnbNode {
    /// Sorted by variable index; no index appears twice.
    pub fixings: Vec<(usize, u8)>,
    pub parent_bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MilpStatus {
    Optimal,
    Infeasible,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MilpStats {
    pub nodes_explored: usize,
    pub lp_solves: usize,
    /// Largest amount by which a child's relaxation exceeded its parent's.
    pub max_bound_increase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilpSolution {
    pub status: MilpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub stats: MilpStats,
}

#[derive(Clone, Debug)]
pub struct MilpConfig {
    pub node_limit: usize,
    /// Restart child relaxations from the parent basis (internal solver only).
    pub warm_start: bool,
    /// Round fractional binaries of each relaxation and keep the point if it is feasible.
    pub rounding_heuristic: bool,
    /// Nodes handed to the evaluator at once.
    pub batch_size: usize,
}

impl Default for MilpConfig {
    fn default() -> Self {
        MilpConfig {
            node_limit: DEFAULT_NODE_LIMIT,
            warm_start: true,
            rounding_heuristic: true,
            batch_size: 1,
        }
    }
}

/// Solves LP relaxations for branch-and-bound. Results must come back in the
/// order of the input batch.
pub trait RelaxationEvaluator {
    fn evaluate(&mut self, batch: &[LpProblem]) -> Vec<Result<LpSolution, LpError>>;
}

impl<F: FnMut(&LpProblem) -> Result<LpSolution, LpError>> RelaxationEvaluator for F {
    fn evaluate(&mut self, batch: &[LpProblem]) -> Vec<Result<LpSolution, LpError>> {
        batch.iter().map(|lp| self(lp)).collect()
    }
}

/// Cold `solve_lp` on every relaxation, spread over scoped threads.
pub struct ThreadedEvaluator {
    pub threads: usize,
}

impl RelaxationEvaluator for ThreadedEvaluator {
    fn evaluate(&mut self, batch: &[LpProblem]) -> Vec<Result<LpSolution, LpError>> {
        let threads = self.threads.max(1);
        if threads == 1 || batch.len() < 2 {
            return batch.iter().map(solve_lp).collect();
        }
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(solve_lp).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("relaxation thread panicked"))
                .collect()
        })
    }
}

/// LP relaxation of `node`: fixings become equal lower and upper bounds.
pub fn relaxation(problem: &MilpProblem, fixings: &[(usize, u8)]) -> LpProblem {
    let mut lp = problem.base.clone();
    for &(k, v) in fixings {
        let v = f64::from(v);
        lp.bounds[k] = Some((v, v));
    }
    lp
}

/// Most fractional binary in `x`, lowest index on ties.
pub fn branch_variable(problem: &MilpProblem, x: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &k in &problem.binary_vars {
        let f = x[k] - x[k].floor();
        if f.min(1.0 - f) <= INTEGRALITY_TOL {
            continue;
        }
        let dist = (0.5 - f).abs();
        if best.is_none_or(|(_, d)| dist < d) {
            best = Some((k, dist));
        }
    }
    best.map(|(k, _)| k)
}

#[derive(Clone, Debug)]
pub struct Expansion {
    pub lp: LpProblem,
    pub solution: LpSolution,
    pub branch: Option<usize>,
}

/// Builds and solves a node's relaxation and picks its branching variable.
pub fn expand_node(problem: &MilpProblem, node: &BnbNode) -> Result<Expansion, MilpError> {
    let mut seen = std::collections::BTreeSet::new();
    if node.fixings.iter().any(|&(k, v)| !seen.insert(k) || v > 1) {
        return Err(MilpError::InvalidInput("inconsistent fixings".into()));
    }
    let lp = relaxation(problem, &node.fixings);
    let solution = solve_lp(&lp)?;
    let branch = match solution.status {
        LpStatus::Optimal => branch_variable(problem, &solution.primal),
        _ => None,
    };
    Ok(Expansion { lp, solution, branch })
}

struct Node {
    id: u64,
    fixings: Vec<(usize, u8)>,
    bound: f64,
    warm: Option<Arc<WarmStart>>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound.total_cmp(&other.bound).then_with(|| other.id.cmp(&self.id))
    }
}

struct Search<'a> {
    problem: &'a MilpProblem,
    config: &'a MilpConfig,
    sign: f64,
    incumbent: Option<(Vec<f64>, f64)>,
    stats: MilpStats,
    next_id: u64,
}

impl<'a> Search<'a> {
    fn incumbent_score(&self) -> f64 {
        self.incumbent.as_ref().map_or(f64::NEG_INFINITY, |(_, s)| *s)
    }

    fn offer(&mut self, x: Vec<f64>) {
        let score = self.sign * self.problem.base.evaluate(&x);
        if score > self.incumbent_score() {
            self.incumbent = Some((x, score));
        }
    }

    fn rounded(&self, x: &[f64], up: bool) -> Vec<f64> {
        let mut r = x.to_vec();
        for &k in &self.problem.binary_vars {
            r[k] = if up && r[k] > INTEGRALITY_TOL {
                1.0
            } else {
                r[k].round()
            };
        }
        r
    }

    fn try_rounding(&mut self, x: &[f64]) {
        let base = &self.problem.base;
        let scale = 1.0
            + base
                .eq_rhs
                .iter()
                .chain(&base.ineq_rhs)
                .fold(0.0f64, |a, v| a.max(v.abs()));
        for up in [true, false] {
            let cand = self.rounded(x, up);
            if base.max_violation(&cand) <= crate::lp::FEAS_TOL * scale {
                self.offer(cand);
            }
        }
    }

    fn current(&self, status: MilpStatus) -> MilpSolution {
        match &self.incumbent {
            Some((x, _)) => MilpSolution {
                status,
                objective: self.problem.base.evaluate(x),
                x: x.clone(),
                stats: self.stats.clone(),
            },
            None => MilpSolution {
                status: MilpStatus::Infeasible,
                x: Vec::new(),
                objective: f64::NAN,
                stats: self.stats.clone(),
            },
        }
    }

    fn handle(
        &mut self,
        node: &Node,
        sol: LpSolution,
        warm: Option<WarmStart>,
        frontier: &mut BinaryHeap<Node>,
    ) -> Result<(), MilpError> {
        self.stats.nodes_explored += 1;
        self.stats.lp_solves += 1;
        if self.stats.nodes_explored > self.config.node_limit {
            return Err(MilpError::NodeLimit {
                limit: self.config.node_limit,
                incumbent: self
                    .incumbent
                    .is_some()
                    .then(|| Box::new(self.current(MilpStatus::Optimal))),
            });
        }
        match sol.status {
            LpStatus::Infeasible => return Ok(()),
            LpStatus::Unbounded => return Err(MilpError::Unbounded),
            LpStatus::Optimal => {}
        }
        let score = self.sign * sol.objective;
        if node.bound.is_finite() {
            self.stats.max_bound_increase = self.stats.max_bound_increase.max(score - node.bound);
        }
        if score <= self.incumbent_score() + PRUNE_TOL {
            return Ok(());
        }
        let Some(k) = branch_variable(self.problem, &sol.primal) else {
            let x = self.rounded(&sol.primal, false);
            self.offer(x);
            return Ok(());
        };
        if self.config.rounding_heuristic {
            self.try_rounding(&sol.primal);
            if score <= self.incumbent_score() + PRUNE_TOL {
                return Ok(());
            }
        }
        let warm = warm.map(|w| {
            // Retained tableaus are dropped once the frontier would hold too many.
            if (frontier.len() + 2) * w.snapshot_bytes() > SNAPSHOT_BUDGET {
                Arc::new(w.basis_only())
            } else {
                Arc::new(w)
            }
        });
        for v in [0u8, 1u8] {
            let mut fixings = node.fixings.clone();
            let pos = fixings.partition_point(|&(i, _)| i < k);
            fixings.insert(pos, (k, v));
            frontier.push(Node {
                id: self.next_id,
                fixings,
                bound: score,
                warm: warm.clone(),
            });
            self.next_id += 1;
        }
        Ok(())
    }
}

/// Solves with the internal simplex.
pub fn solve_milp(problem: &MilpProblem, config: &MilpConfig) -> Result<MilpSolution, MilpError> {
    run(problem, config, None)
}

/// Solves with every relaxation evaluated by `evaluator`.
pub fn solve_milp_with(
    problem: &MilpProblem,
    config: &MilpConfig,
    evaluator: &mut dyn RelaxationEvaluator,
) -> Result<MilpSolution, MilpError> {
    run(problem, config, Some(evaluator))
}

fn run(
    problem: &MilpProblem,
    config: &MilpConfig,
    mut evaluator: Option<&mut dyn RelaxationEvaluator>,
) -> Result<MilpSolution, MilpError> {
    problem.validate()?;
    let mut search = Search {
        problem,
        config,
        sign: if problem.base.sense == Sense::Maximize {
            1.0
        } else {
            -1.0
        },
        incumbent: None,
        stats: MilpStats::default(),
        next_id: 1,
    };
    let mut frontier = BinaryHeap::new();
    frontier.push(Node {
        id: 0,
        fixings: Vec::new(),
        bound: f64::INFINITY,
        warm: None,
    });
    let batch_size = config.batch_size.max(1);
    while !frontier.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            let Some(node) = frontier.pop() else { break };
            if node.bound <= search.incumbent_score() + PRUNE_TOL {
                continue;
            }
            batch.push(node);
        }
        if batch.is_empty() {
            break;
        }
        match evaluator.as_deref_mut() {
            Some(ev) => {
                let lps: Vec<LpProblem> = batch.iter().map(|n| relaxation(problem, &n.fixings)).collect();
                let results = ev.evaluate(&lps);
                if results.len() != batch.len() {
                    return Err(MilpError::Evaluator(
                        "evaluator returned the wrong number of results".into(),
                    ));
                }
                for (node, res) in batch.iter().zip(results) {
                    search.handle(node, res?, None, &mut frontier)?;
                }
            }
            None => {
                for node in &batch {
                    let lp = relaxation(problem, &node.fixings);
                    let (sol, ws) = if config.warm_start {
                        solve_lp_warm(&lp, node.warm.as_deref())?
                    } else {
                        (solve_lp(&lp)?, None)
                    };
                    search.handle(node, sol, ws, &mut frontier)?;
                }
            }
        }
    }
    Ok(search.current(MilpStatus::Optimal))
}
