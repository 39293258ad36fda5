//! Small hand-built instances: the three-state truck delivery agent, the
//! two-agent auction over trucks, forklifts and mechanics, and the two-state
//! sales MDPs used to illustrate bid encryption.
//!
//! The delivery diagram is reconstructed from the worked numbers it has to
//! reproduce. States: 0 working, 1 aging, 2 broken. Actions: 0 noop,
//! 1 furniture, 2 appliances, 3 service, 4 repair.

use crate::auction::AuctionInstance;
use crate::mdp::Mdp;
use crate::resource::{Bundle, ConstrainedMdp, ResourceSpec};

pub const DELIVERY_DISCOUNT: f64 = 0.9;
pub const TRUCK: usize = 0;
pub const FORKLIFT: usize = 1;
pub const MECHANIC: usize = 2;

fn stay(s: usize) -> Vec<f64> {
    let mut p = vec![0.0; 3];
    p[s] = 1.0;
    p
}

/// Delivery MDP with the given appliance reward and initial distribution.
pub fn delivery_mdp(appliance_reward: f64, initial: [f64; 3]) -> Mdp {
    let go = stay;
    let transition = vec![
        vec![stay(0), stay(0), go(1), stay(0), stay(0)],
        vec![stay(1), stay(1), vec![0.0, 0.9, 0.1], go(0), stay(1)],
        vec![stay(2), stay(2), stay(2), stay(2), go(0)],
    ];
    let reward = vec![
        vec![0.0, 5.0, appliance_reward, 0.0, 0.0],
        vec![0.0, 5.0, appliance_reward, 9.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 1.0],
    ];
    Mdp::new(transition, reward, DELIVERY_DISCOUNT, initial.to_vec()).expect("delivery fixture is valid")
}

/// Truck for every non-noop action, forklift for appliances, mechanic for repair.
pub fn delivery_spec(kappa_hat: f64) -> ResourceSpec {
    ResourceSpec {
        resources: vec!["truck".into(), "forklift".into(), "mechanic".into()],
        capacities: vec!["money".into()],
        rho: vec![
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 1.0],
        ],
        kappa: vec![vec![2.0], vec![3.0], vec![4.0]],
        kappa_hat: vec![kappa_hat],
    }
}

/// The single delivery agent with budget 8.
pub fn delivery_agent(initial: [f64; 3]) -> ConstrainedMdp {
    ConstrainedMdp::new(delivery_mdp(10.0, initial), delivery_spec(8.0)).expect("valid")
}

/// Second bidder: appliances pay 12 and the budget is 9.
pub fn second_delivery_agent() -> ConstrainedMdp {
    ConstrainedMdp::new(delivery_mdp(12.0, [1.0, 0.0, 0.0]), delivery_spec(9.0)).expect("valid")
}

/// Two trucks, one forklift, one mechanic shared by the two delivery agents.
pub fn delivery_auction() -> AuctionInstance {
    AuctionInstance::new(
        vec![delivery_agent([1.0, 0.0, 0.0]), second_delivery_agent()],
        vec![vec![2.0], vec![3.0], vec![4.0]],
        Bundle::from_slice(&[2, 1, 1]),
        DELIVERY_DISCOUNT,
    )
    .expect("valid")
}

/// Delivery agent whose requirements are not 0/1: appliances need two trucks.
pub fn nonbinary_delivery_agent() -> ConstrainedMdp {
    let mut spec = delivery_spec(8.0);
    spec.rho[2][TRUCK] = 2.0;
    ConstrainedMdp::new(delivery_mdp(10.0, [1.0, 0.0, 0.0]), spec).expect("valid")
}

pub const SALES_DISCOUNT: f64 = 0.8;
pub const CAMOUFLAGE_DISCOUNT: f64 = 0.9;

/// Two-state sales MDP. `p11` is the probability that the second strategy
/// keeps the market in the favorable state; printed to three digits as 0.986.
pub fn sales_mdp(p11: f64) -> Mdp {
    Mdp::new(
        vec![
            vec![vec![1.0, 0.0], vec![p11, 1.0 - p11]],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        ],
        vec![vec![1.0, 19.622], vec![0.063, 0.084]],
        SALES_DISCOUNT,
        vec![1.0, 0.0],
    )
    .expect("valid")
}

/// The MDP an observer could read off the encrypted sales constraint matrix.
pub fn camouflage_mdp() -> Mdp {
    Mdp::new(
        vec![
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        ],
        vec![vec![1.0, 2.0], vec![3.0, 4.0]],
        CAMOUFLAGE_DISCOUNT,
        vec![0.5, 0.5],
    )
    .expect("valid")
}

/// Printed flow matrix of the sales MDP, state rows and state-major columns.
pub fn sales_flow_printed() -> Vec<Vec<f64>> {
    vec![vec![0.2, 0.212, -0.4, -0.4], vec![0.0, -0.012, 0.6, 0.6]]
}

/// Printed dual transform diagonal.
pub fn sales_d_printed() -> Vec<f64> {
    vec![1.0, 0.102, 47.619, 47.619]
}

/// Printed primal transform.
pub fn sales_f_printed() -> Vec<Vec<f64>> {
    vec![vec![2.0, 0.0], vec![-0.084, 0.126]]
}

/// Printed encrypted flow matrix.
pub fn sales_encrypted_printed() -> Vec<Vec<f64>> {
    vec![vec![0.1, 1.0, 0.0, 0.0], vec![0.0, -0.9, 0.1, 0.1]]
}
