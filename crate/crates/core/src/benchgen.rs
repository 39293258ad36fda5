//! Instance generators: the gridworld delivery domain, the utility-to-MDP
//! construction, the knapsack chain with a dynamic-programming oracle, and
//! small random auctions for cross-checking solvers.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::{AuctionError, AuctionInstance};
use crate::mdp::{Mdp, MdpError};
use crate::resource::{Bundle, ConstrainedMdp, ResourceError, ResourceSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("invalid generator input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Auction(#[from] AuctionError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, GenError> {
    Err(GenError::InvalidInput(msg.into()))
}

pub const DELIVERY_DISCOUNT: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeliveryParams {
    pub grid_n: usize,
    pub num_agents: usize,
    pub num_resources: usize,
    pub c_glob: f64,
    pub c_loc: f64,
    pub resources_per_action: usize,
    pub seed: u64,
}

impl Default for DeliveryParams {
    fn default() -> Self {
        DeliveryParams {
            grid_n: 5,
            num_agents: 3,
            num_resources: 4,
            c_glob: 0.5,
            c_loc: 0.5,
            resources_per_action: 2,
            seed: 0,
        }
    }
}

impl DeliveryParams {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.grid_n == 0 || self.num_agents == 0 || self.num_resources == 0 || self.resources_per_action == 0 {
            return invalid("grid size, agent, resource and per-action counts must be positive");
        }
        if self.resources_per_action > self.num_resources {
            return invalid("an action cannot need more resource types than exist");
        }
        if !(0.0..=1.0).contains(&self.c_glob) || !(0.0..=1.0).contains(&self.c_loc) {
            return invalid("constraint levels must lie in [0,1]");
        }
        Ok(())
    }
}

/// Probability that delivery task `i` (1-based) is accepted at a location.
pub fn task_probability(i: usize, num_resources: usize) -> f64 {
    if num_resources == 1 {
        return 0.5;
    }
    0.1 + 0.4 * (num_resources - i) as f64 / (num_resources - 1) as f64
}

/// Movement reward of agent `m` (1-based).
pub fn movement_penalty(m: usize, num_agents: usize) -> f64 {
    if num_agents == 1 {
        return -1.0;
    }
    -1.0 - 9.0 * (m - 1) as f64 / (num_agents - 1) as f64
}

/// Reward for completing task `i` (1-based).
pub fn delivery_reward(i: usize, num_resources: usize) -> f64 {
    100.0 * i as f64 / num_resources as f64
}

pub fn num_locations(grid_n: usize) -> usize {
    grid_n * grid_n / 5
}

/// Multiagent delivery auction. Each agent drives on its own copy of the grid
/// with its own delivery sites; requirements and sizes are shared.
pub fn gen_delivery(params: &DeliveryParams) -> Result<AuctionInstance, GenError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = params.grid_n;
    let ns = n * n;
    let no = params.num_resources;
    let na = 4 + no;

    let mut rho = vec![vec![0.0; no]; na];
    for task in 0..no {
        for o in sample(&mut rng, no, params.resources_per_action).into_iter() {
            rho[4 + task][o] = 1.0;
        }
    }
    let kappa: Vec<Vec<f64>> = (1..=no).map(|i| vec![i as f64]).collect();
    let capacity = params.c_loc * (no * (no + 1)) as f64 / 2.0;
    let units = (params.c_glob * params.num_agents as f64).floor() as u32;

    let resources: Vec<String> = (1..=no).map(|i| format!("r{i}")).collect();
    let mut agents = Vec::with_capacity(params.num_agents);
    for m in 1..=params.num_agents {
        let penalty = movement_penalty(m, params.num_agents);
        let sites = sample(&mut rng, ns, num_locations(n)).into_vec();
        // accepts[cell][task] = Some(relocation target)
        let mut accepts: Vec<Vec<Option<usize>>> = vec![vec![None; no]; ns];
        for &cell in &sites {
            for task in 0..no {
                if rng.gen_bool(task_probability(task + 1, no)) {
                    accepts[cell][task] = Some(rng.gen_range(0..ns));
                }
            }
        }
        let mut transition = vec![vec![vec![0.0; ns]; na]; ns];
        let mut reward = vec![vec![0.0; na]; ns];
        for s in 0..ns {
            let (r, c) = (s / n, s % n);
            let moves = [
                (r > 0).then(|| s - n),
                (r + 1 < n).then(|| s + n),
                (c > 0).then(|| s - 1),
                (c + 1 < n).then(|| s + 1),
            ];
            for (a, target) in moves.iter().enumerate() {
                reward[s][a] = penalty;
                match target {
                    Some(t) => {
                        transition[s][a][*t] = 0.8;
                        transition[s][a][s] = 0.2;
                    }
                    None => transition[s][a][s] = 1.0,
                }
            }
            for task in 0..no {
                let a = 4 + task;
                match accepts[s][task] {
                    Some(t) => {
                        transition[s][a][t] = 1.0;
                        reward[s][a] = delivery_reward(task + 1, no);
                    }
                    None => transition[s][a][s] = 1.0,
                }
            }
        }
        let initial = vec![1.0 / ns as f64; ns];
        let mdp = Mdp::new(transition, reward, DELIVERY_DISCOUNT, initial)?;
        let spec = ResourceSpec {
            resources: resources.clone(),
            capacities: vec!["size".into()],
            rho: rho.clone(),
            kappa: kappa.clone(),
            kappa_hat: vec![capacity],
        };
        agents.push(ConstrainedMdp::new(mdp, spec)?);
    }
    Ok(AuctionInstance::new(
        agents,
        kappa,
        Bundle {
            quantities: vec![units; no],
        },
        DELIVERY_DISCOUNT,
    )?)
}

/// Index of bundle `z ∈ [0,m]ⁿ` with the first resource most significant.
pub fn bundle_index(z: &[u32], m: u32) -> usize {
    z.iter().fold(0usize, |acc, &v| acc * (m as usize + 1) + v as usize)
}

pub fn all_bundles(m: u32, n: usize) -> Vec<Vec<u32>> {
    let total = (m as usize + 1).pow(n as u32);
    (0..total)
        .map(|mut k| {
            let mut z = vec![0u32; n];
            for slot in z.iter_mut().rev() {
                *slot = (k % (m as usize + 1)) as u32;
                k /= m as usize + 1;
            }
            z
        })
        .collect()
}

/// Agent whose value for each bundle `z ∈ [0,m]ⁿ` is `f(z)`.
///
/// One state per bundle plus a sink (the last state). Action 0 cashes in
/// `f(z) γ^{-Σz}` and moves to the sink; action `1 + i m + (j−1)` raises
/// resource `i` from `j−1` to `j` units and needs `j` units of it. Where an
/// increment does not apply it behaves like action 0.
pub fn gen_from_utility(f: &[f64], m: u32, n: usize, gamma: f64) -> Result<ConstrainedMdp, GenError> {
    if m == 0 || n == 0 {
        return invalid("need at least one resource and one unit");
    }
    let bundles = all_bundles(m, n);
    if bundles.len() > 10_000 {
        return invalid("bundle space exceeds 10^4 states");
    }
    if f.len() != bundles.len() {
        return invalid(format!("f has {} entries for {} bundles", f.len(), bundles.len()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return invalid("discount must lie in (0,1)");
    }
    for z in &bundles {
        for i in 0..n {
            if z[i] < m {
                let mut up = z.clone();
                up[i] += 1;
                if f[bundle_index(&up, m)] < f[bundle_index(z, m)] {
                    return invalid("utility must be non-decreasing");
                }
            }
        }
    }
    let ns = bundles.len() + 1;
    let sink = ns - 1;
    let na = 1 + m as usize * n;
    let mut transition = vec![vec![vec![0.0; ns]; na]; ns];
    let mut reward = vec![vec![0.0; na]; ns];
    for (s, z) in bundles.iter().enumerate() {
        let cash = f[s] * gamma.powi(-(z.iter().sum::<u32>() as i32));
        for a in 0..na {
            let step = (a > 0).then(|| ((a - 1) / m as usize, (a - 1) % m as usize + 1));
            match step {
                Some((i, j)) if z[i] as usize == j - 1 => {
                    let mut up = z.clone();
                    up[i] = j as u32;
                    transition[s][a][bundle_index(&up, m)] = 1.0;
                }
                _ => {
                    transition[s][a][sink] = 1.0;
                    reward[s][a] = cash;
                }
            }
        }
    }
    for a in 0..na {
        transition[sink][a][sink] = 1.0;
    }
    let mut initial = vec![0.0; ns];
    initial[0] = 1.0;
    let mut rho = vec![vec![0.0; n]; na];
    for a in 1..na {
        let (i, j) = ((a - 1) / m as usize, (a - 1) % m as usize + 1);
        rho[a][i] = j as f64;
    }
    let spec = ResourceSpec {
        resources: (1..=n).map(|i| format!("o{i}")).collect(),
        capacities: vec![],
        rho,
        kappa: vec![vec![]; n],
        kappa_hat: vec![],
    };
    Ok(ConstrainedMdp::new(
        Mdp::new(transition, reward, gamma, initial)?,
        spec,
    )?)
}

/// Random non-decreasing utility over `[0,m]ⁿ`, built from nonnegative increments.
pub fn random_monotone_utility(m: u32, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundles = all_bundles(m, n);
    let mut f = vec![0.0; bundles.len()];
    // Bundles come in an order where every predecessor precedes its successors.
    for (k, z) in bundles.iter().enumerate() {
        let mut base: f64 = 0.0;
        for i in 0..n {
            if z[i] > 0 {
                let mut down = z.clone();
                down[i] -= 1;
                base = base.max(f[bundle_index(&down, m)]);
            }
        }
        f[k] = base
            + if rng.gen_bool(0.3) {
                0.0
            } else {
                rng.gen_range(0.0..10.0)
            };
    }
    f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnapsackInstance {
    /// `(cost, value)` per item.
    pub items: Vec<(u32, f64)>,
    pub capacity: u32,
}

impl KnapsackInstance {
    pub fn random(seed: u64, max_items: usize) -> KnapsackInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(1..=max_items);
        let items: Vec<(u32, f64)> = (0..k)
            .map(|_| (rng.gen_range(1..=20), f64::from(rng.gen_range(1..=30u32))))
            .collect();
        let total: u32 = items.iter().map(|i| i.0).sum();
        KnapsackInstance {
            capacity: rng.gen_range(0..=total),
            items,
        }
    }
}

/// Exact knapsack optimum by dynamic programming over capacities.
pub fn knapsack_dp(inst: &KnapsackInstance) -> f64 {
    let cap = inst.capacity as usize;
    let mut best = vec![0.0f64; cap + 1];
    for &(c, v) in &inst.items {
        let c = c as usize;
        if c > cap {
            continue;
        }
        for w in (c..=cap).rev() {
            best[w] = best[w].max(best[w - c] + v);
        }
    }
    best[cap]
}

/// Chain agent where taking item `i` means running action `i` in state `i`.
/// Off-chain actions behave like the null action.
pub fn gen_from_knapsack(inst: &KnapsackInstance, gamma: f64) -> Result<(ConstrainedMdp, f64), GenError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return invalid("discount must lie in (0,1)");
    }
    if inst.items.iter().any(|&(c, v)| c == 0 || !(v > 0.0)) {
        return invalid("item costs and values must be positive");
    }
    let m = inst.items.len();
    let ns = m + 1;
    let na = m + 1;
    let mut transition = vec![vec![vec![0.0; ns]; na]; ns];
    let mut reward = vec![vec![0.0; na]; ns];
    for s in 0..m {
        for a in 0..na {
            transition[s][a][s + 1] = 1.0;
        }
        reward[s][s + 1] = inst.items[s].1 * gamma.powi(-(s as i32));
    }
    for a in 0..na {
        transition[m][a][m] = 1.0;
    }
    let mut initial = vec![0.0; ns];
    initial[0] = 1.0;
    let mut rho = vec![vec![0.0; m]; na];
    for i in 0..m {
        rho[i + 1][i] = 1.0;
    }
    let spec = ResourceSpec {
        resources: (1..=m).map(|i| format!("item{i}")).collect(),
        capacities: vec!["weight".into()],
        rho,
        kappa: inst.items.iter().map(|&(c, _)| vec![f64::from(c)]).collect(),
        kappa_hat: vec![f64::from(inst.capacity)],
    };
    let agent = ConstrainedMdp::new(Mdp::new(transition, reward, gamma, initial)?, spec)?;
    Ok((agent, knapsack_dp(inst)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomParams {
    pub max_agents: usize,
    pub max_resources: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub seed: u64,
}

impl Default for RandomParams {
    fn default() -> Self {
        RandomParams {
            max_agents: 3,
            max_resources: 6,
            max_states: 8,
            max_actions: 5,
            seed: 0,
        }
    }
}

fn random_mdp(rng: &mut ChaCha8Rng, ns: usize, na: usize, gamma: f64) -> Result<Mdp, GenError> {
    let mut transition = vec![vec![vec![0.0; ns]; na]; ns];
    let mut reward = vec![vec![0.0; na]; ns];
    for s in 0..ns {
        transition[s][0][s] = 1.0;
        for a in 1..na {
            let k = rng.gen_range(1..=ns.min(3));
            let targets = sample(rng, ns, k).into_vec();
            let weights: Vec<f64> = targets.iter().map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for (t, w) in targets.iter().zip(weights) {
                transition[s][a][*t] += w / total;
            }
            reward[s][a] = rng.gen_range(0.0..10.0);
        }
    }
    let mut initial: Vec<f64> = (0..ns).map(|_| rng.gen_range(0.0..1.0)).collect();
    let total: f64 = initial.iter().sum();
    initial.iter_mut().for_each(|v| *v /= total);
    Ok(Mdp::new(transition, reward, gamma, initial)?)
}

fn random_rho(rng: &mut ChaCha8Rng, na: usize, no: usize) -> Vec<Vec<f64>> {
    let mut rho = vec![vec![0.0; no]; na];
    for row in rho.iter_mut().skip(1) {
        for v in row.iter_mut() {
            if rng.gen_bool(0.35) {
                *v = 1.0;
            }
        }
        if row.iter().all(|v| *v == 0.0) {
            row[rng.gen_range(0..no)] = 1.0;
        }
    }
    rho
}

/// Single agent with a free no-op (action 0) and binary requirements elsewhere.
pub fn gen_random_agent(params: &RandomParams) -> Result<ConstrainedMdp, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let ns = rng.gen_range(2..=params.max_states.max(2));
    let na = rng.gen_range(2..=params.max_actions.max(2));
    let no = rng.gen_range(1..=params.max_resources.max(1));
    let gamma = rng.gen_range(0.7..0.95);
    let mdp = random_mdp(&mut rng, ns, na, gamma)?;
    let kappa: Vec<Vec<f64>> = (0..no).map(|_| vec![f64::from(rng.gen_range(1..=4u32))]).collect();
    let total: f64 = kappa.iter().map(|r| r[0]).sum();
    let spec = ResourceSpec {
        resources: (1..=no).map(|i| format!("o{i}")).collect(),
        capacities: vec!["budget".into()],
        rho: random_rho(&mut rng, na, no),
        kappa,
        kappa_hat: vec![(total * rng.gen_range(0.2..0.9)).floor()],
    };
    Ok(ConstrainedMdp::new(mdp, spec)?)
}

/// Small auction with shared state and action counts across agents.
pub fn gen_random_auction(params: &RandomParams) -> Result<AuctionInstance, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let nm = rng.gen_range(1..=params.max_agents.max(1));
    let ns = rng.gen_range(2..=params.max_states.max(2));
    let na = rng.gen_range(2..=params.max_actions.max(2));
    let no = rng.gen_range(1..=params.max_resources.max(1));
    let gamma = rng.gen_range(0.7..0.95);
    let kappa: Vec<Vec<f64>> = (0..no).map(|_| vec![f64::from(rng.gen_range(1..=4u32))]).collect();
    let total: f64 = kappa.iter().map(|r| r[0]).sum();
    let mut agents = Vec::with_capacity(nm);
    for _ in 0..nm {
        let mdp = random_mdp(&mut rng, ns, na, gamma)?;
        let spec = ResourceSpec {
            resources: (1..=no).map(|i| format!("o{i}")).collect(),
            capacities: vec!["budget".into()],
            rho: random_rho(&mut rng, na, no),
            kappa: kappa.clone(),
            kappa_hat: vec![(total * rng.gen_range(0.3..1.0)).floor()],
        };
        agents.push(ConstrainedMdp::new(mdp, spec)?);
    }
    let rho_hat = Bundle {
        quantities: (0..no)
            .map(|_| {
                if rng.gen_bool(0.15) {
                    0
                } else {
                    rng.gen_range(1..=nm as u32)
                }
            })
            .collect(),
    };
    Ok(AuctionInstance::new(agents, kappa, rho_hat, gamma)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delivery_parameters() {
        assert_eq!(num_locations(5), 5);
        assert_eq!(movement_penalty(1, 10), -1.0);
        assert_eq!(movement_penalty(10, 10), -10.0);
        assert_eq!(delivery_reward(4, 4), 100.0);
        assert_eq!(task_probability(1, 5), 0.5);
        assert!((task_probability(5, 5) - 0.1).abs() < 1e-15);
        assert_eq!(task_probability(1, 1), 0.5);
        assert_eq!(movement_penalty(1, 1), -1.0);
    }

    #[test]
    fn delivery_shape() {
        let inst = gen_delivery(&DeliveryParams::default()).unwrap();
        assert_eq!(inst.num_agents(), 3);
        let a = &inst.agents[0];
        assert_eq!(a.mdp.num_states(), 25);
        assert_eq!(a.mdp.num_actions(), 8);
        assert_eq!(a.spec.kappa_hat, vec![5.0]);
        assert_eq!(inst.rho_hat.quantities, vec![1; 4]);
        for a in 4..8 {
            assert_eq!(inst.agents[0].spec.rho[a].iter().sum::<f64>(), 2.0);
        }
    }

    #[test]
    fn knapsack_oracle() {
        let inst = KnapsackInstance {
            items: vec![(2, 3.0), (3, 4.0)],
            capacity: 4,
        };
        assert_eq!(knapsack_dp(&inst), 4.0);
    }

    #[test]
    fn bundle_order_is_lexicographic() {
        let b = all_bundles(1, 2);
        assert_eq!(b, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        for (k, z) in all_bundles(2, 3).iter().enumerate() {
            assert_eq!(bundle_index(z, 2), k);
        }
    }
}
