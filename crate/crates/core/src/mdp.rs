//! Finite discounted MDPs, their primal and dual LPs, and conversions between
//! policies, value functions and occupation measures.
//!
//! Occupation-measure vectors are flattened state-major: `x[s * |A| + a]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{solve_lp, LpError, LpProblem, LpStatus, Sense};

/// Tolerance for stochasticity checks at construction time.
pub const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("invalid mdp: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("lp for the mdp was {0:?}")]
    Unsolvable(LpStatus),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MdpRaw {
    num_states: usize,
    num_actions: usize,
    discount: f64,
    initial: Vec<f64>,
    reward: Vec<Vec<f64>>,
    transition: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpRaw", into = "MdpRaw")]
pub struct Mdp {
    num_states: usize,
    num_actions: usize,
    discount: f64,
    initial: Vec<f64>,
    reward: Vec<Vec<f64>>,
    transition: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<MdpRaw> for Mdp {
    type Error = MdpError;
    fn try_from(r: MdpRaw) -> Result<Self, MdpError> {
        Mdp::new(r.transition, r.reward, r.discount, r.initial).and_then(|m| {
            if m.num_states != r.num_states || m.num_actions != r.num_actions {
                Err(MdpError::InvalidInput(format!(
                    "declared {}x{} but arrays are {}x{}",
                    r.num_states, r.num_actions, m.num_states, m.num_actions
                )))
            } else {
                Ok(m)
            }
        })
    }
}

impl From<Mdp> for MdpRaw {
    fn from(m: Mdp) -> MdpRaw {
        MdpRaw {
            num_states: m.num_states,
            num_actions: m.num_actions,
            discount: m.discount,
            initial: m.initial,
            reward: m.reward,
            transition: m.transition,
        }
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, MdpError> {
    Err(MdpError::InvalidInput(msg.into()))
}

impl Mdp {
    /// `transition[s][a][σ] = p(σ | s, a)`, `reward[s][a]`.
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        discount: f64,
        initial: Vec<f64>,
    ) -> Result<Mdp, MdpError> {
        let ns = transition.len();
        if ns == 0 {
            return invalid("no states");
        }
        let na = transition[0].len();
        if na == 0 {
            return invalid("no actions");
        }
        if !(0.0..1.0).contains(&discount) {
            return invalid(format!("discount {discount} outside [0, 1)"));
        }
        if reward.len() != ns || initial.len() != ns {
            return invalid("reward/initial length does not match the number of states");
        }
        for s in 0..ns {
            if transition[s].len() != na || reward[s].len() != na {
                return invalid(format!("state {s} has a ragged action dimension"));
            }
            for a in 0..na {
                let row = &transition[s][a];
                if row.len() != ns {
                    return invalid(format!("p(.|{s},{a}) has {} entries", row.len()));
                }
                if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return invalid(format!("p(.|{s},{a}) has an entry outside [0,1]"));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > PROB_TOL {
                    return invalid(format!("p(.|{s},{a}) sums to {total}"));
                }
                if !reward[s][a].is_finite() {
                    return invalid(format!("reward r({s},{a}) is not finite"));
                }
            }
        }
        if initial.iter().any(|&v| !(v >= 0.0)) || (initial.iter().sum::<f64>() - 1.0).abs() > PROB_TOL {
            return invalid("initial distribution is not a probability vector");
        }
        Ok(Mdp {
            num_states: ns,
            num_actions: na,
            discount,
            initial,
            reward,
            transition,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s][a]
    }

    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.reward
    }

    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[s][a]
    }

    pub fn with_initial(&self, initial: Vec<f64>) -> Result<Mdp, MdpError> {
        Mdp::new(self.transition.clone(), self.reward.clone(), self.discount, initial)
    }

    pub fn with_rewards(&self, reward: Vec<Vec<f64>>) -> Result<Mdp, MdpError> {
        Mdp::new(self.transition.clone(), reward, self.discount, self.initial.clone())
    }

    pub(crate) fn index(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    /// Column of the flow-conservation matrix for `x(s,a)`: `e_s − γ p(·|s,a)`.
    pub fn flow_column(&self, s: usize, a: usize) -> Vec<f64> {
        let mut col: Vec<f64> = self.transition[s][a].iter().map(|p| -self.discount * p).collect();
        col[s] += 1.0;
        col
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub probs: Vec<Vec<f64>>,
}

impl Policy {
    pub fn deterministic(actions: &[usize], num_actions: usize) -> Policy {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; num_actions];
                row[a] = 1.0;
                row
            })
            .collect();
        Policy { probs }
    }

    pub fn is_deterministic(&self) -> bool {
        self.probs
            .iter()
            .all(|row| row.iter().filter(|&&p| p != 0.0).count() == 1)
    }

    /// Most likely action per state, lowest index on ties.
    pub fn actions(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|row| {
                let mut best = 0;
                for (a, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect()
    }

    fn check(&self, mdp: &Mdp) -> Result<(), MdpError> {
        if self.probs.len() != mdp.num_states || self.probs.iter().any(|r| r.len() != mdp.num_actions) {
            return invalid("policy shape does not match the mdp");
        }
        for (s, row) in self.probs.iter().enumerate() {
            if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-7 {
                return invalid(format!("policy row {s} is not a distribution"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupationMeasure {
    pub x: Vec<Vec<f64>>,
}

impl OccupationMeasure {
    pub fn from_flat(flat: &[f64], num_states: usize, num_actions: usize) -> OccupationMeasure {
        OccupationMeasure {
            x: (0..num_states)
                .map(|s| flat[s * num_actions..(s + 1) * num_actions].to_vec())
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.x.iter().flatten().copied().collect()
    }

    pub fn total(&self) -> f64 {
        self.x.iter().flatten().sum()
    }

    /// Mass of action `a` summed over states.
    pub fn action_mass(&self, a: usize) -> f64 {
        self.x.iter().map(|row| row[a]).sum()
    }

    /// Largest per-state violation of flow conservation.
    pub fn flow_residual(&self, mdp: &Mdp) -> f64 {
        let ns = mdp.num_states;
        let mut out: Vec<f64> = mdp.initial.iter().map(|v| -v).collect();
        for s in 0..ns {
            for a in 0..mdp.num_actions {
                let xsa = self.x[s][a];
                if xsa == 0.0 {
                    continue;
                }
                out[s] += xsa;
                for (sigma, &p) in mdp.transition[s][a].iter().enumerate() {
                    out[sigma] -= mdp.discount * p * xsa;
                }
            }
        }
        out.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn value(&self, mdp: &Mdp) -> f64 {
        let mut total = 0.0;
        for s in 0..mdp.num_states {
            for a in 0..mdp.num_actions {
                total += mdp.reward[s][a] * self.x[s][a];
            }
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub v: Vec<f64>,
}

/// Linear expected-cost constraint `Σ η(s,a) x(s,a) ≤ η̂` on the dual LP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostConstraint {
    pub cost: Vec<Vec<f64>>,
    pub bound: f64,
}

pub fn evaluate_policy(mdp: &Mdp, policy: &Policy) -> Result<ValueFunction, MdpError> {
    policy.check(mdp)?;
    let ns = mdp.num_states;
    let mut m = DMatrix::<f64>::identity(ns, ns);
    let mut r = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        for (a, &pi) in policy.probs[s].iter().enumerate() {
            if pi == 0.0 {
                continue;
            }
            r[s] += pi * mdp.reward[s][a];
            for (sigma, &p) in mdp.transition[s][a].iter().enumerate() {
                m[(s, sigma)] -= mdp.discount * pi * p;
            }
        }
    }
    let v = m
        .lu()
        .solve(&r)
        .ok_or_else(|| MdpError::InvalidInput("singular policy system".into()))?;
    Ok(ValueFunction {
        v: v.iter().copied().collect(),
    })
}

pub fn policy_value(mdp: &Mdp, policy: &Policy) -> Result<f64, MdpError> {
    let v = evaluate_policy(mdp, policy)?;
    Ok(mdp.initial.iter().zip(&v.v).map(|(a, b)| a * b).sum())
}

fn q_value(mdp: &Mdp, v: &[f64], s: usize, a: usize) -> f64 {
    let future: f64 = mdp.transition[s][a].iter().zip(v).map(|(p, x)| p * x).sum();
    mdp.reward[s][a] + mdp.discount * future
}

fn bellman(mdp: &Mdp, v: &[f64]) -> Vec<f64> {
    (0..mdp.num_states)
        .map(|s| {
            (0..mdp.num_actions)
                .map(|a| q_value(mdp, v, s, a))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Iterates the Bellman operator until the sup-norm residual is at most `tol`.
pub fn value_iteration(mdp: &Mdp, tol: f64) -> Result<ValueFunction, MdpError> {
    if !(tol > 0.0) {
        return invalid("tolerance must be positive");
    }
    let mut v = vec![0.0; mdp.num_states];
    loop {
        let next = bellman(mdp, &v);
        let residual = next.iter().zip(&v).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        v = next;
        if residual <= tol {
            return Ok(ValueFunction { v });
        }
    }
}

/// Sup-norm Bellman residual `‖Tv − v‖∞`.
pub fn bellman_residual(mdp: &Mdp, v: &ValueFunction) -> f64 {
    bellman(mdp, &v.v)
        .iter()
        .zip(&v.v)
        .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

/// Deterministic greedy policy; ties go to the lowest action index.
pub fn greedy_policy(mdp: &Mdp, v: &ValueFunction) -> Policy {
    let actions: Vec<usize> = (0..mdp.num_states)
        .map(|s| {
            let mut best = 0;
            let mut best_q = q_value(mdp, &v.v, s, 0);
            for a in 1..mdp.num_actions {
                let q = q_value(mdp, &v.v, s, a);
                if q > best_q + 1e-12 * (1.0 + best_q.abs()) {
                    best = a;
                    best_q = q;
                }
            }
            best
        })
        .collect();
    Policy::deterministic(&actions, mdp.num_actions)
}

/// `min αᵀv` subject to `v(s) ≥ r(s,a) + γ Σ_σ p(σ|s,a) v(σ)`, `v` free.
pub fn build_primal_lp(mdp: &Mdp) -> LpProblem {
    let ns = mdp.num_states;
    let mut lp = LpProblem::new(Sense::Minimize, mdp.initial.clone());
    lp.nonneg = vec![false; ns];
    for s in 0..ns {
        for a in 0..mdp.num_actions {
            let mut row: Vec<f64> = mdp.transition[s][a].iter().map(|p| mdp.discount * p).collect();
            row[s] -= 1.0;
            lp.add_ineq(row, -mdp.reward[s][a]);
        }
    }
    lp
}

/// `max Σ r x` subject to flow conservation, one row per state, plus one row
/// per cost constraint.
pub fn build_dual_lp(mdp: &Mdp, costs: &[CostConstraint]) -> LpProblem {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let objective = mdp.reward.iter().flatten().copied().collect();
    let mut lp = LpProblem::new(Sense::Maximize, objective);
    let mut rows = vec![vec![0.0; ns * na]; ns];
    for s in 0..ns {
        for a in 0..na {
            let j = mdp.index(s, a);
            for (sigma, v) in mdp.flow_column(s, a).into_iter().enumerate() {
                rows[sigma][j] = v;
            }
        }
    }
    for (sigma, row) in rows.into_iter().enumerate() {
        lp.add_eq(row, mdp.initial[sigma]);
    }
    for c in costs {
        lp.add_ineq(c.cost.iter().flatten().copied().collect(), c.bound);
    }
    lp
}

/// Normalizes each state's occupation into action probabilities. States with
/// total mass ≤ 1e-12 get the lowest-index action.
pub fn policy_from_occupation(x: &OccupationMeasure) -> Result<Policy, MdpError> {
    let mut probs = Vec::with_capacity(x.x.len());
    for (s, row) in x.x.iter().enumerate() {
        if row.iter().any(|&v| v < 0.0) {
            return invalid(format!("negative occupation in state {s}"));
        }
        let total: f64 = row.iter().sum();
        if total > 1e-12 {
            probs.push(row.iter().map(|v| v / total).collect());
        } else {
            let mut r = vec![0.0; row.len()];
            r[0] = 1.0;
            probs.push(r);
        }
    }
    Ok(Policy { probs })
}

/// Occupation measure induced by running `policy` from the initial distribution.
pub fn occupation_from_policy(mdp: &Mdp, policy: &Policy) -> Result<OccupationMeasure, MdpError> {
    policy.check(mdp)?;
    let ns = mdp.num_states;
    // (I − γ P_πᵀ) μ = α gives state visitation μ.
    let mut m = DMatrix::<f64>::identity(ns, ns);
    for s in 0..ns {
        for (a, &pi) in policy.probs[s].iter().enumerate() {
            for (sigma, &p) in mdp.transition[s][a].iter().enumerate() {
                m[(sigma, s)] -= mdp.discount * pi * p;
            }
        }
    }
    let mu = m
        .lu()
        .solve(&DVector::from_column_slice(&mdp.initial))
        .ok_or_else(|| MdpError::InvalidInput("singular visitation system".into()))?;
    let x = (0..ns)
        .map(|s| policy.probs[s].iter().map(|pi| (pi * mu[s]).max(0.0)).collect())
        .collect();
    Ok(OccupationMeasure { x })
}

/// Optimal solution of the dual LP.
#[derive(Clone, Debug)]
pub struct DualSolution {
    pub value: f64,
    pub occupation: OccupationMeasure,
    pub policy: Policy,
}

pub fn solve_dual(mdp: &Mdp, costs: &[CostConstraint]) -> Result<DualSolution, MdpError> {
    let lp = build_dual_lp(mdp, costs);
    let sol = solve_lp(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(MdpError::Unsolvable(sol.status));
    }
    let occupation = OccupationMeasure::from_flat(&sol.primal, mdp.num_states, mdp.num_actions);
    let policy = policy_from_occupation(&occupation)?;
    Ok(DualSolution {
        value: sol.objective,
        occupation,
        policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_state(rewards: &[f64], gamma: f64) -> Mdp {
        let na = rewards.len();
        Mdp::new(vec![vec![vec![1.0]; na]], vec![rewards.to_vec()], gamma, vec![1.0]).unwrap()
    }

    #[test]
    fn geometric_series() {
        let mdp = one_state(&[1.0], 0.9);
        let v = evaluate_policy(&mdp, &Policy::deterministic(&[0], 1)).unwrap();
        assert!((v.v[0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn value_iteration_picks_best_reward() {
        let mdp = one_state(&[1.0, 2.0], 0.5);
        let v = value_iteration(&mdp, 1e-10).unwrap();
        assert!((v.v[0] - 4.0).abs() < 1e-8);
        assert_eq!(greedy_policy(&mdp, &v).actions(), vec![1]);
    }

    #[test]
    fn greedy_ties_go_to_lowest_index() {
        let mdp = one_state(&[3.0, 1.0, 3.0], 0.5);
        let v = value_iteration(&mdp, 1e-10).unwrap();
        assert_eq!(greedy_policy(&mdp, &v).actions(), vec![0]);
    }

    #[test]
    fn lp_dimensions() {
        let mdp = Mdp::new(
            vec![vec![vec![1.0, 0.0, 0.0]; 5]; 3],
            vec![vec![0.0; 5]; 3],
            0.9,
            vec![1.0, 0.0, 0.0],
        )
        .unwrap();
        let p = build_primal_lp(&mdp);
        assert_eq!((p.num_vars(), p.ineq_matrix.len()), (3, 15));
        let d = build_dual_lp(&mdp, &[]);
        assert_eq!((d.num_vars(), d.eq_matrix.len()), (15, 3));
    }

    #[test]
    fn rejects_non_stochastic() {
        let r = Mdp::new(
            vec![vec![vec![0.5, 0.4]], vec![vec![0.0, 1.0]]],
            vec![vec![0.0]; 2],
            0.9,
            vec![1.0, 0.0],
        );
        assert!(matches!(r, Err(MdpError::InvalidInput(_))));
    }

    #[test]
    fn unreachable_state_gets_action_zero() {
        let x = OccupationMeasure {
            x: vec![vec![0.0, 10.0], vec![0.0, 0.0]],
        };
        let p = policy_from_occupation(&x).unwrap();
        assert_eq!(p.actions(), vec![1, 0]);
        assert!(p.is_deterministic());
    }

    #[test]
    fn json_roundtrip_validates() {
        let mdp = one_state(&[1.0, 2.0], 0.5);
        let text = serde_json::to_string(&mdp).unwrap();
        let back: Mdp = serde_json::from_str(&text).unwrap();
        assert_eq!(back, mdp);
        let bad = text.replace("0.5", "1.5");
        assert!(serde_json::from_str::<Mdp>(&bad).is_err());
    }
}
