mod common;

use common::{arb_mdp, solve_dense};
use mdpauction::lp::{solve_lp, verify_solution, LpProblem, LpSolution, LpStatus, Sense, Verdict, Verifier, FEAS_TOL};
use mdpauction::mdp::{build_dual_lp, value_iteration};
use proptest::prelude::*;
use proptest::strategy::ValueTree;

fn label(v: &Verdict) -> &'static str {
    match v {
        Verdict::Accepted => "accepted",
        Verdict::Rejected(r) => r.label(),
    }
}

#[test]
fn single_bounded_variable() {
    let mut lp = LpProblem::new(Sense::Maximize, vec![1.0]);
    lp.add_ineq(vec![1.0], 1.0);
    let s = solve_lp(&lp).unwrap();
    assert_eq!(s.status, LpStatus::Optimal);
    assert!((s.objective - 1.0).abs() < 1e-12);
    assert!((s.primal[0] - 1.0).abs() < 1e-12);
}

#[test]
fn equality_system() {
    let mut lp = LpProblem::new(Sense::Maximize, vec![1.0, -1.0]);
    lp.add_eq(vec![1.0, 1.0], 1.0);
    let s = solve_lp(&lp).unwrap();
    assert!((s.objective - 1.0).abs() < 1e-12);
    assert!((s.primal[0] - 1.0).abs() < 1e-12 && s.primal[1].abs() < 1e-12);
}

#[test]
fn infeasible_and_unbounded_are_distinct() {
    let mut inf = LpProblem::new(Sense::Maximize, vec![1.0]);
    inf.add_ineq(vec![1.0], -1.0);
    let s = solve_lp(&inf).unwrap();
    assert_eq!(s.status, LpStatus::Infeasible);
    assert!(verify_solution(&inf, &s).is_accepted(), "farkas ray should certify");

    let mut unb = LpProblem::new(Sense::Maximize, vec![1.0, 1.0]);
    unb.add_ineq(vec![1.0, -1.0], 1.0);
    assert_eq!(solve_lp(&unb).unwrap().status, LpStatus::Unbounded);
}

#[test]
fn free_and_boxed_variables() {
    let mut lp = LpProblem::new(Sense::Minimize, vec![1.0, -2.0]);
    lp.nonneg[0] = false;
    lp.bounds[0] = Some((-3.0, f64::INFINITY));
    lp.bounds[1] = Some((0.0, 2.5));
    let s = solve_lp(&lp).unwrap();
    assert!((s.objective - (-3.0 - 5.0)).abs() < 1e-12);
    assert!(verify_solution(&lp, &s).is_accepted());
}

#[test]
fn malformed_input_rejected() {
    let mut lp = LpProblem::new(Sense::Maximize, vec![1.0, f64::NAN]);
    lp.add_ineq(vec![1.0, 1.0], 1.0);
    assert!(solve_lp(&lp).is_err());
    let mut lp = LpProblem::new(Sense::Maximize, vec![1.0, 1.0]);
    lp.add_ineq(vec![1.0], 1.0);
    assert!(solve_lp(&lp).is_err());
}

#[test]
fn beale_cycling_fixture() {
    // Textbook example on which Dantzig pricing with naive ties cycles.
    let mut lp = LpProblem::new(Sense::Minimize, vec![-0.75, 20.0, -0.5, 6.0]);
    lp.add_ineq(vec![0.25, -8.0, -1.0, 9.0], 0.0);
    lp.add_ineq(vec![0.5, -12.0, -0.5, 3.0], 0.0);
    lp.add_ineq(vec![0.0, 0.0, 1.0, 0.0], 1.0);
    let s = solve_lp(&lp).unwrap();
    assert_eq!(s.status, LpStatus::Optimal);
    assert!((s.objective + 1.25).abs() < 1e-9);
    assert!(verify_solution(&lp, &s).is_accepted());
}

#[test]
fn kuhn_cycling_fixture() {
    let mut lp = LpProblem::new(Sense::Minimize, vec![-2.0, -3.0, 1.0, 12.0]);
    lp.add_ineq(vec![-2.0, -9.0, 1.0, 9.0], 0.0);
    lp.add_ineq(vec![1.0 / 3.0, 1.0, -1.0 / 3.0, -2.0], 0.0);
    lp.add_ineq(vec![2.0, 3.0, -1.0, -12.0], 2.0);
    let s = solve_lp(&lp).unwrap();
    assert_eq!(s.status, LpStatus::Optimal);
    assert!((s.objective - vertex_oracle(&lp).unwrap()).abs() < 1e-9);
}

#[test]
fn heavily_degenerate_assignment() {
    // 5x5 assignment polytope: every vertex is highly degenerate.
    let n = 5;
    let cost: Vec<f64> = (0..n * n).map(|k| ((k * 7) % 11) as f64).collect();
    let mut lp = LpProblem::new(Sense::Minimize, cost.clone());
    for i in 0..n {
        let mut row = vec![0.0; n * n];
        let mut col = vec![0.0; n * n];
        for j in 0..n {
            row[i * n + j] = 1.0;
            col[j * n + i] = 1.0;
        }
        lp.add_eq(row, 1.0);
        lp.add_eq(col, 1.0);
    }
    let s = solve_lp(&lp).unwrap();
    let mut best = f64::INFINITY;
    permute(&mut (0..n).collect::<Vec<_>>(), 0, &mut |p| {
        best = best.min((0..n).map(|i| cost[i * n + p[i]]).sum());
    });
    assert!((s.objective - best).abs() < 1e-9);
    assert!(verify_solution(&lp, &s).is_accepted());
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

#[test]
fn dual_lp_matches_value_iteration_on_random_mdps() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let strat = arb_mdp(5, 3).prop_filter("five states", |m| m.num_states() == 5);
    for _ in 0..20 {
        let mdp = strat.new_tree(&mut runner).unwrap().current();
        let s = solve_lp(&build_dual_lp(&mdp, &[])).unwrap();
        let vi = value_iteration(&mdp, 1e-10).unwrap();
        let want: f64 = mdp.initial().iter().zip(&vi.v).map(|(a, v)| a * v).sum();
        assert!((s.objective - want).abs() < 1e-5);
    }
}

#[test]
fn verifier_constructed_violations() {
    let mut lp = LpProblem::new(Sense::Maximize, vec![2.0, 3.0]);
    lp.add_ineq(vec![1.0, 1.0], 4.0);
    lp.add_ineq(vec![1.0, 3.0], 6.0);
    let s = solve_lp(&lp).unwrap();
    assert!(verify_solution(&lp, &s).is_accepted());

    let mut over = s.clone();
    over.objective += 1.0;
    assert_eq!(label(&verify_solution(&lp, &over)), "gap");

    let mut neg = s.clone();
    neg.primal[1] = -1e-3;
    assert_eq!(label(&verify_solution(&lp, &neg)), "primal-infeasible");

    let mut short = s.clone();
    short.dual.pop();
    assert_eq!(label(&verify_solution(&lp, &short)), "malformed");

    let mut nan = s.clone();
    nan.primal[0] = f64::NAN;
    assert_eq!(label(&verify_solution(&lp, &nan)), "malformed");

    let mut flipped = s.clone();
    flipped.dual.iter_mut().for_each(|y| *y = -*y);
    assert!(!verify_solution(&lp, &flipped).is_accepted());
}

#[test]
fn verifier_counts_factorizations() {
    let mut lp = LpProblem::new(Sense::Maximize, vec![1.0, 1.0]);
    lp.add_ineq(vec![1.0, 2.0], 4.0);
    lp.add_ineq(vec![3.0, 1.0], 6.0);
    let s = solve_lp(&lp).unwrap();
    let mut v = Verifier::default();
    for _ in 0..3 {
        assert!(v.verify(&lp, &s).is_accepted());
    }
    let mut bad = s.clone();
    bad.primal.push(0.0);
    assert!(!v.verify(&lp, &bad).is_accepted());
    assert_eq!(v.verified, 4);
    assert_eq!(v.factorizations, 3);
}

#[test]
fn solution_json_round_trip() {
    let mut lp = LpProblem::new(Sense::Maximize, vec![1.0, 2.0]);
    lp.add_ineq(vec![1.0, 1.0], 3.0);
    let s = solve_lp(&lp).unwrap();
    let back: LpSolution = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
    assert_eq!(back, s);
    let lp2: LpProblem = serde_json::from_str(&serde_json::to_string(&lp).unwrap()).unwrap();
    assert_eq!(lp2, lp);
}

/// Maximum over every vertex of `{G x ≤ h, x ≥ 0}`, found by solving each
/// choice of `n` tight constraints. Returns the minimum for minimization.
fn vertex_oracle(lp: &LpProblem) -> Option<f64> {
    let n = lp.num_vars();
    let mut rows: Vec<(Vec<f64>, f64)> = lp
        .ineq_matrix
        .iter()
        .cloned()
        .zip(lp.ineq_rhs.iter().copied())
        .collect();
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = -1.0;
        rows.push((e, 0.0));
    }
    let sign = if lp.sense == Sense::Maximize { 1.0 } else { -1.0 };
    let mut best: Option<f64> = None;
    let mut pick = vec![0usize; n];
    fn rec(k: usize, start: usize, pick: &mut Vec<usize>, rows: &[(Vec<f64>, f64)], visit: &mut dyn FnMut(&[usize])) {
        if k == pick.len() {
            visit(pick);
            return;
        }
        for i in start..rows.len() {
            pick[k] = i;
            rec(k + 1, i + 1, pick, rows, visit);
        }
    }
    rec(0, 0, &mut pick, &rows, &mut |sel| {
        let a: Vec<Vec<f64>> = sel.iter().map(|&i| rows[i].0.clone()).collect();
        if det(a.clone()).abs() < 1e-9 {
            return;
        }
        let x = solve_dense(a, sel.iter().map(|&i| rows[i].1).collect());
        if rows
            .iter()
            .all(|(r, h)| r.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() <= h + 1e-9)
        {
            let v = sign * lp.evaluate(&x);
            best = Some(best.map_or(v, |b: f64| b.max(v)));
        }
    });
    best.map(|b| sign * b)
}

fn det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut d = 1.0;
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        if a[p][k] == 0.0 {
            return 0.0;
        }
        if p != k {
            a.swap(k, p);
            d = -d;
        }
        d *= a[k][k];
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    d
}

/// Bounded LPs with the origin feasible: random rows plus a total-mass cap.
fn arb_lp() -> impl Strategy<Value = LpProblem> {
    (2usize..=4, 1usize..=4, any::<bool>()).prop_flat_map(|(n, k, max)| {
        let c = prop::collection::vec(-5i32..=5, n);
        let g = prop::collection::vec(prop::collection::vec(-5i32..=5, n), k);
        let h = prop::collection::vec(0i32..=10, k);
        (c, g, h).prop_map(move |(c, g, h)| {
            let sense = if max { Sense::Maximize } else { Sense::Minimize };
            let mut lp = LpProblem::new(sense, c.iter().map(|&v| v as f64).collect());
            for (row, rhs) in g.iter().zip(&h) {
                lp.add_ineq(row.iter().map(|&v| v as f64).collect(), *rhs as f64);
            }
            lp.add_ineq(vec![1.0; n], 10.0);
            lp
        })
    })
}

/// Augmented column `j` of `[A; G | 0; I]`.
fn augmented_column(lp: &LpProblem, j: usize) -> Vec<f64> {
    let n = lp.num_vars();
    let me = lp.eq_matrix.len();
    let mut col: Vec<f64> = lp
        .eq_matrix
        .iter()
        .chain(&lp.ineq_matrix)
        .map(|r| if j < n { r[j] } else { 0.0 })
        .collect();
    if j >= n {
        col[me + j - n] = 1.0;
    }
    col
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matches_vertex_enumeration(lp in arb_lp()) {
        let s = solve_lp(&lp).unwrap();
        prop_assert_eq!(s.status, LpStatus::Optimal);
        let want = vertex_oracle(&lp).unwrap();
        prop_assert!((s.objective - want).abs() < 1e-9 * (1.0 + want.abs()));
    }

    #[test]
    fn own_output_accepted(lp in arb_lp()) {
        let s = solve_lp(&lp).unwrap();
        prop_assert!(lp.max_violation(&s.primal) <= FEAS_TOL);
        prop_assert!(verify_solution(&lp, &s).is_accepted());
    }

    #[test]
    fn basis_reproduces_primal(lp in arb_lp()) {
        let s = solve_lp(&lp).unwrap();
        let n = lp.num_vars();
        prop_assert_eq!(s.basis.len(), lp.num_rows());
        let cols: Vec<Vec<f64>> = s.basis.iter().map(|&j| augmented_column(&lp, j)).collect();
        let m = cols.len();
        let b: Vec<Vec<f64>> = (0..m).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        let rhs: Vec<f64> = lp.eq_rhs.iter().chain(&lp.ineq_rhs).copied().collect();
        let xb = solve_dense(b, rhs);
        for (k, &j) in s.basis.iter().enumerate() {
            if j < n {
                prop_assert!((xb[k] - s.primal[j]).abs() < 1e-9);
            }
        }
        for j in 0..n {
            if !s.basis.contains(&j) {
                prop_assert!(s.primal[j].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equality_rows_with_known_point(
        n in 2usize..=5,
        seed in prop::collection::vec(0.0f64..3.0, 5),
        a in prop::collection::vec(prop::collection::vec(-3i32..=3, 5), 1..3),
        c in prop::collection::vec(-4i32..=4, 5),
    ) {
        let x0 = &seed[..n];
        let mut lp = LpProblem::new(Sense::Maximize, c[..n].iter().map(|&v| v as f64).collect());
        for row in &a {
            let row: Vec<f64> = row[..n].iter().map(|&v| v as f64).collect();
            let rhs = row.iter().zip(x0).map(|(a, b)| a * b).sum();
            lp.add_eq(row, rhs);
        }
        for j in 0..n {
            lp.bounds[j] = Some((0.0, 3.0));
        }
        let s = solve_lp(&lp).unwrap();
        prop_assert_eq!(s.status, LpStatus::Optimal);
        prop_assert!(s.objective >= lp.evaluate(x0) - 1e-9);
        prop_assert!(verify_solution(&lp, &s).is_accepted());
    }

    #[test]
    fn perturbation_rejected(lp in arb_lp(), j in 0usize..4, up in any::<bool>()) {
        let s = solve_lp(&lp).unwrap();
        let j = j % lp.num_vars();
        let mut bad = s.clone();
        bad.primal[j] += if up { 1e-3 } else { -1e-3 };
        bad.objective = lp.evaluate(&bad.primal);
        let infeasible = lp.max_violation(&bad.primal) > 1e-6 * (1.0 + 10.0);
        let shifts_gap = lp.objective[j].abs() * 1e-3 > 1e-6 * (1.0 + bad.objective.abs());
        if infeasible || shifts_gap {
            prop_assert!(!verify_solution(&lp, &bad).is_accepted());
        }
    }
}
