#![allow(dead_code)]

use mdpauction::mdp::Mdp;
use proptest::prelude::*;

/// Random MDP with normalized random transitions and an interior initial distribution.
pub fn arb_mdp(max_states: usize, max_actions: usize) -> impl Strategy<Value = Mdp> {
    (1..=max_states, 1..=max_actions, 0.5f64..0.95).prop_flat_map(|(ns, na, gamma)| {
        let trans = prop::collection::vec(prop::collection::vec(prop::collection::vec(0.0f64..1.0, ns), na), ns);
        let rew = prop::collection::vec(prop::collection::vec(-10.0f64..10.0, na), ns);
        let init = prop::collection::vec(0.05f64..1.0, ns);
        (trans, rew, init).prop_map(move |(t, r, a)| build(t, r, gamma, a))
    })
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s <= 1e-9 {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= s);
    }
    v
}

pub fn build(t: Vec<Vec<Vec<f64>>>, r: Vec<Vec<f64>>, gamma: f64, a: Vec<f64>) -> Mdp {
    let t = t
        .into_iter()
        .map(|row| row.into_iter().map(normalize).collect())
        .collect();
    Mdp::new(t, r, gamma, normalize(a)).expect("generated MDP is valid")
}

/// Solves a dense square system by Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            if f != 0.0 {
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    x
}

/// Values of a deterministic policy, `(I − γ P_π) v = r_π`.
pub fn deterministic_values(mdp: &Mdp, actions: &[usize]) -> Vec<f64> {
    let ns = mdp.num_states();
    let g = mdp.discount();
    let a: Vec<Vec<f64>> = (0..ns)
        .map(|s| {
            let p = mdp.transition(s, actions[s]);
            (0..ns).map(|t| if s == t { 1.0 } else { 0.0 } - g * p[t]).collect()
        })
        .collect();
    let b = (0..ns).map(|s| mdp.reward(s, actions[s])).collect();
    solve_dense(a, b)
}

/// Best α-weighted value over every deterministic policy whose actions pass `allowed`.
pub fn brute_force_value(mdp: &Mdp, allowed: &dyn Fn(usize) -> bool) -> Option<f64> {
    let ns = mdp.num_states();
    let acts: Vec<usize> = (0..mdp.num_actions()).filter(|&a| allowed(a)).collect();
    if acts.is_empty() {
        return None;
    }
    let mut best = f64::NEG_INFINITY;
    let mut idx = vec![0usize; ns];
    loop {
        let pol: Vec<usize> = idx.iter().map(|&i| acts[i]).collect();
        let v = deterministic_values(mdp, &pol);
        let val: f64 = mdp.initial().iter().zip(&v).map(|(a, v)| a * v).sum();
        best = best.max(val);
        let mut k = 0;
        loop {
            if k == ns {
                return Some(best);
            }
            idx[k] += 1;
            if idx[k] < acts.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}
