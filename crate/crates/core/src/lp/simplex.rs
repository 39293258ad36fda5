//! Dense tableau simplex with bounded variables.
//!
//! Columns are `[structural | slacks | artificials]`. Every row owns one
//! artificial; they drive phase 1 and stay fixed at zero afterwards. The
//! tableau is kept as `B⁻¹ [A | I | Σ]` and updated in place; pivots skip zero
//! entries so block-structured problems stay cheap. The final basis is always
//! refactorized and the answer recomputed from the factorization.

use std::sync::Arc;

use super::{LpError, LpProblem, LpSolution, LpStatus, Sense};

const PIVOT_TOL: f64 = 1e-9;
const DROP_TOL: f64 = 1e-14;
const STALL_LIMIT: usize = 50;
const REFINE_ROUNDS: usize = 4;

/// Dense row-major inverse by Gauss-Jordan with partial pivoting. Zero
/// multipliers and zero pivot-row entries are skipped, which keeps the
/// near block-diagonal bases of stacked MDPs cheap.
struct Inverse {
    m: usize,
    a: Vec<f64>,
}

impl Inverse {
    fn of(m: usize, mut b: Vec<f64>) -> Option<Inverse> {
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        let scale = b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if scale == 0.0 && m > 0 {
            return None;
        }
        let mut nz_b: Vec<usize> = Vec::with_capacity(m);
        let mut nz_i: Vec<usize> = Vec::with_capacity(m);
        for k in 0..m {
            let p = (k..m).max_by(|&x, &y| b[x * m + k].abs().total_cmp(&b[y * m + k].abs()))?;
            if b[p * m + k].abs() <= 1e-13 * scale {
                return None;
            }
            if p != k {
                for c in 0..m {
                    b.swap(p * m + c, k * m + c);
                    inv.swap(p * m + c, k * m + c);
                }
            }
            let piv = b[k * m + k];
            nz_b.clear();
            nz_i.clear();
            for c in 0..m {
                if b[k * m + c] != 0.0 {
                    b[k * m + c] /= piv;
                    nz_b.push(c);
                }
                if inv[k * m + c] != 0.0 {
                    inv[k * m + c] /= piv;
                    nz_i.push(c);
                }
            }
            for r in 0..m {
                if r == k {
                    continue;
                }
                let f = b[r * m + k];
                if f == 0.0 {
                    continue;
                }
                for &c in &nz_b {
                    b[r * m + c] -= f * b[k * m + c];
                }
                for &c in &nz_i {
                    inv[r * m + c] -= f * inv[k * m + c];
                }
                b[r * m + k] = 0.0;
            }
        }
        Some(Inverse { m, a: inv })
    }

    fn at(&self, r: usize, i: usize) -> f64 {
        self.a[r * self.m + i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Basic,
    Lower,
    Upper,
    Zero,
}

/// Basis snapshot from a previous solve.
///
/// Only valid for a problem with the same rows, columns and costs; bounds may
/// differ. Used by branch-and-bound to restart children from the parent.
#[derive(Clone, Debug)]
pub struct WarmStart {
    basis: Vec<usize>,
    state: Vec<State>,
    tableau: Option<Arc<Tableau>>,
}

impl WarmStart {
    /// Memory held by the retained tableau, if any.
    pub fn snapshot_bytes(&self) -> usize {
        self.tableau
            .as_ref()
            .map_or(0, |t| t.t.len() * std::mem::size_of::<f64>())
    }

    /// Keeps only the basis; restarts then refactorize from scratch.
    pub fn basis_only(&self) -> WarmStart {
        WarmStart {
            basis: self.basis.clone(),
            state: self.state.clone(),
            tableau: None,
        }
    }
}

// Pivots applied to a retained tableau before it is rebuilt from a fresh factorization.
const REBUILD_AFTER: usize = 400;

#[derive(Clone, Debug)]
struct Tableau {
    m: usize,
    n: usize,
    n_slack: usize,
    ncols: usize,
    cols: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
    t: Vec<f64>,
    beta: Vec<f64>,
    basis: Vec<usize>,
    state: Vec<State>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    cost: Vec<f64>,
    phase2_cost: Vec<f64>,
    d: Vec<f64>,
    pivots: usize,
    since_rebuild: usize,
    limit: usize,
    phase2: bool,
    phase2_pivots: usize,
    phase2_limit: Option<usize>,
    opt_tol: f64,
    feas_tol: f64,
}

impl Tableau {
    fn shell(p: &LpProblem) -> Tableau {
        let n = p.num_vars();
        let m_eq = p.eq_matrix.len();
        let n_slack = p.ineq_matrix.len();
        let m = m_eq + n_slack;
        let ncols = n + n_slack + m;
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ncols];
        for (i, row) in p.eq_matrix.iter().chain(&p.ineq_matrix).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    cols[j].push((i, v));
                }
            }
        }
        for k in 0..n_slack {
            cols[n + k].push((m_eq + k, 1.0));
        }
        for i in 0..m {
            cols[n + n_slack + i].push((i, 1.0));
        }
        let mut lo = vec![0.0; ncols];
        let mut hi = vec![f64::INFINITY; ncols];
        for j in 0..n {
            lo[j] = p.lower(j);
            hi[j] = p.upper(j);
        }
        let flip = if p.sense == Sense::Maximize { -1.0 } else { 1.0 };
        let mut phase2_cost = vec![0.0; ncols];
        for j in 0..n {
            phase2_cost[j] = flip * p.objective[j];
        }
        let cscale = p.objective.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let rscale = p.eq_rhs.iter().chain(&p.ineq_rhs).fold(1.0f64, |a, v| a.max(v.abs()));
        Tableau {
            m,
            n,
            n_slack,
            ncols,
            cols,
            rhs: p.eq_rhs.iter().chain(&p.ineq_rhs).copied().collect(),
            t: vec![0.0; m * ncols],
            beta: vec![0.0; m],
            basis: vec![0; m],
            state: vec![State::Lower; ncols],
            lo,
            hi,
            cost: vec![0.0; ncols],
            phase2_cost,
            d: vec![0.0; ncols],
            pivots: 0,
            since_rebuild: 0,
            limit: 50_000 + 50 * (m + ncols),
            phase2: false,
            phase2_pivots: 0,
            phase2_limit: None,
            opt_tol: 1e-9 * cscale,
            feas_tol: 1e-9 * rscale,
        }
    }

    fn art(&self, i: usize) -> usize {
        self.n + self.n_slack + i
    }

    fn nb_value(&self, j: usize) -> f64 {
        match self.state[j] {
            State::Lower => self.lo[j],
            State::Upper => self.hi[j],
            State::Zero | State::Basic => 0.0,
        }
    }

    fn resting_state(&self, j: usize) -> State {
        if self.lo[j].is_finite() {
            State::Lower
        } else if self.hi[j].is_finite() {
            State::Upper
        } else {
            State::Zero
        }
    }

    fn cold(p: &LpProblem) -> Tableau {
        let mut tb = Tableau::shell(p);
        let (n, m, n_slack) = (tb.n, tb.m, tb.n_slack);
        let m_eq = m - n_slack;
        for j in 0..n {
            tb.state[j] = tb.resting_state(j);
        }
        let mut resid = tb.rhs.clone();
        for j in 0..n {
            let v = tb.nb_value(j);
            if v != 0.0 {
                for &(i, a) in &tb.cols[j] {
                    resid[i] -= a * v;
                }
            }
        }
        let mut diag = vec![1.0; m];
        for i in 0..m {
            let a = tb.art(i);
            tb.lo[a] = 0.0;
            let r = resid[i];
            if i >= m_eq && r >= 0.0 {
                let s = n + (i - m_eq);
                tb.basis[i] = s;
                tb.state[s] = State::Basic;
                tb.beta[i] = r;
                tb.hi[a] = 0.0;
                tb.state[a] = State::Lower;
            } else {
                let sigma = if r >= 0.0 { 1.0 } else { -1.0 };
                tb.cols[a] = vec![(i, sigma)];
                diag[i] = sigma;
                tb.basis[i] = a;
                tb.state[a] = State::Basic;
                tb.beta[i] = r.abs();
                tb.hi[a] = f64::INFINITY;
            }
        }
        let nc = tb.ncols;
        for j in 0..nc {
            for &(i, v) in &tb.cols[j] {
                tb.t[i * nc + j] = v / diag[i];
            }
        }
        tb
    }

    fn compute_reduced_costs(&mut self) {
        let nc = self.ncols;
        self.d.copy_from_slice(&self.cost);
        for i in 0..self.m {
            let cb = self.cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.t[i * nc..(i + 1) * nc];
                for (dj, &tij) in self.d.iter_mut().zip(row) {
                    *dj -= cb * tij;
                }
            }
        }
        for i in 0..self.m {
            self.d[self.basis[i]] = 0.0;
        }
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let nc = self.ncols;
        let p = self.t[r * nc + q];
        let mut nz: Vec<(usize, f64)> = Vec::new();
        {
            let row = &mut self.t[r * nc..(r + 1) * nc];
            for (j, v) in row.iter_mut().enumerate() {
                if *v != 0.0 {
                    *v /= p;
                    if v.abs() < DROP_TOL {
                        *v = 0.0;
                    } else {
                        nz.push((j, *v));
                    }
                }
            }
            row[q] = 1.0;
        }
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.t[i * nc + q];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.t[i * nc..(i + 1) * nc];
            for &(j, v) in &nz {
                row[j] -= f * v;
            }
            row[q] = 0.0;
        }
        let f = self.d[q];
        if f != 0.0 {
            for &(j, v) in &nz {
                self.d[j] -= f * v;
            }
        }
        self.d[q] = 0.0;
        self.pivots += 1;
        self.since_rebuild += 1;
        if self.phase2 {
            self.phase2_pivots += 1;
        }
    }

    fn check_limit(&self) -> Result<(), LpError> {
        if self.pivots >= self.limit {
            Err(LpError::IterationLimit(self.limit))
        } else {
            Ok(())
        }
    }

    /// Primal simplex from a primal feasible basis. Returns false when unbounded.
    fn primal(&mut self) -> Result<bool, LpError> {
        let nc = self.ncols;
        let mut stall = 0usize;
        let mut bland = false;
        loop {
            self.check_limit()?;
            if let Some(limit) = self.phase2_limit {
                if self.phase2 && self.phase2_pivots >= limit {
                    return Ok(true);
                }
            }
            let mut entering: Option<(usize, f64)> = None;
            let mut best = 0.0;
            for j in 0..nc {
                let st = self.state[j];
                if st == State::Basic || self.lo[j] == self.hi[j] {
                    continue;
                }
                let dj = self.d[j];
                let dir = match st {
                    State::Lower if dj < -self.opt_tol => 1.0,
                    State::Upper if dj > self.opt_tol => -1.0,
                    State::Zero if dj.abs() > self.opt_tol => -dj.signum(),
                    _ => continue,
                };
                if bland {
                    entering = Some((j, dir));
                    break;
                }
                if dj.abs() > best {
                    best = dj.abs();
                    entering = Some((j, dir));
                }
            }
            let Some((q, dir)) = entering else {
                return Ok(true);
            };

            // Harris two-pass ratio test; exact minimum ratio under Bland.
            let rate = |tb: &Tableau, i: usize| -dir * tb.t[i * nc + q];
            let mut theta_max = f64::INFINITY;
            if !bland {
                for i in 0..self.m {
                    let rt = rate(self, i);
                    let b = self.basis[i];
                    if rt < -PIVOT_TOL && self.lo[b].is_finite() {
                        theta_max = theta_max.min((self.beta[i] - self.lo[b] + self.feas_tol) / -rt);
                    } else if rt > PIVOT_TOL && self.hi[b].is_finite() {
                        theta_max = theta_max.min((self.hi[b] - self.beta[i] + self.feas_tol) / rt);
                    }
                }
            }
            let mut leave: Option<(usize, f64)> = None;
            let mut leave_key = (f64::INFINITY, 0.0f64, usize::MAX);
            for i in 0..self.m {
                let rt = rate(self, i);
                let b = self.basis[i];
                let ratio = if rt < -PIVOT_TOL && self.lo[b].is_finite() {
                    (self.beta[i] - self.lo[b]) / -rt
                } else if rt > PIVOT_TOL && self.hi[b].is_finite() {
                    (self.hi[b] - self.beta[i]) / rt
                } else {
                    continue;
                };
                let ratio = ratio.max(0.0);
                if bland {
                    let key = (ratio, 0.0, b);
                    if ratio < leave_key.0 || (ratio == leave_key.0 && b < leave_key.2) {
                        leave_key = key;
                        leave = Some((i, ratio));
                    }
                } else if ratio <= theta_max && rt.abs() > leave_key.1 {
                    leave_key = (ratio, rt.abs(), b);
                    leave = Some((i, ratio));
                }
            }
            let flip = self.hi[q] - self.lo[q];
            let theta = match leave {
                Some((_, th)) => th,
                None => f64::INFINITY,
            };
            if !flip.is_finite() && !theta.is_finite() {
                return Ok(false);
            }
            if flip <= theta {
                for i in 0..self.m {
                    let rt = rate(self, i);
                    self.beta[i] += rt * flip;
                }
                self.state[q] = if self.state[q] == State::Lower {
                    State::Upper
                } else {
                    State::Lower
                };
                self.pivots += 1;
                stall = 0;
                bland = false;
                continue;
            }
            let (r, _) = leave.unwrap();
            if theta <= 1e-12 {
                stall += 1;
                if stall > STALL_LIMIT {
                    bland = true;
                }
            } else {
                stall = 0;
                bland = false;
            }
            for i in 0..self.m {
                let rt = rate(self, i);
                self.beta[i] += rt * theta;
            }
            let out = self.basis[r];
            self.state[out] = if rate(self, r) < 0.0 {
                State::Lower
            } else {
                State::Upper
            };
            let entering_value = self.nb_value(q) + dir * theta;
            self.beta[r] = entering_value;
            self.basis[r] = q;
            self.state[q] = State::Basic;
            self.pivot(r, q);
        }
    }

    fn primal_violation(&self, i: usize) -> f64 {
        let b = self.basis[i];
        (self.lo[b] - self.beta[i]).max(self.beta[i] - self.hi[b]).max(0.0)
    }

    fn max_primal_violation(&self) -> f64 {
        (0..self.m).map(|i| self.primal_violation(i)).fold(0.0, f64::max)
    }

    fn dual_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..self.ncols {
            if self.lo[j] == self.hi[j] {
                continue;
            }
            let dj = self.d[j];
            let v = match self.state[j] {
                State::Basic => 0.0,
                State::Lower => -dj,
                State::Upper => dj,
                State::Zero => dj.abs(),
            };
            worst = worst.max(v);
        }
        worst
    }

    /// Dual simplex from a dual feasible basis. Returns `Err(row)` wrapped in
    /// `Ok(Some(row))` when row `row` proves primal infeasibility.
    fn dual(&mut self) -> Result<Option<usize>, LpError> {
        let nc = self.ncols;
        let mut stall = 0usize;
        loop {
            self.check_limit()?;
            let bland = stall > STALL_LIMIT;
            let mut r = None;
            let mut worst = self.feas_tol;
            for i in 0..self.m {
                let v = self.primal_violation(i);
                if bland {
                    if v > self.feas_tol && r.is_none_or(|k: usize| self.basis[i] < self.basis[k]) {
                        r = Some(i);
                    }
                } else if v > worst {
                    worst = v;
                    r = Some(i);
                }
            }
            let Some(r) = r else {
                return Ok(None);
            };
            let b = self.basis[r];
            let below = self.beta[r] < self.lo[b];
            let target = if below { self.lo[b] } else { self.hi[b] };
            let mut enter: Option<usize> = None;
            let mut best = (f64::INFINITY, 0.0f64);
            for j in 0..nc {
                let st = self.state[j];
                if st == State::Basic || self.lo[j] == self.hi[j] {
                    continue;
                }
                let a = self.t[r * nc + j];
                if a.abs() <= PIVOT_TOL {
                    continue;
                }
                let ok = match st {
                    State::Lower => (a < 0.0) == below,
                    State::Upper => (a > 0.0) == below,
                    State::Zero => true,
                    State::Basic => false,
                };
                if !ok {
                    continue;
                }
                let ratio = self.d[j].abs() / a.abs();
                let better = if bland {
                    ratio < best.0
                } else {
                    ratio < best.0 - 1e-12 || (ratio <= best.0 + 1e-12 && a.abs() > best.1)
                };
                if better {
                    best = (ratio, a.abs());
                    enter = Some(j);
                }
            }
            let Some(q) = enter else {
                return Ok(Some(r));
            };
            if best.0 <= 1e-12 {
                stall += 1;
            } else {
                stall = 0;
            }
            let aq = self.t[r * nc + q];
            let delta = (self.beta[r] - target) / aq;
            for i in 0..self.m {
                let a = self.t[i * nc + q];
                if a != 0.0 {
                    self.beta[i] -= a * delta;
                }
            }
            self.state[b] = if below { State::Lower } else { State::Upper };
            self.beta[r] = self.nb_value(q) + delta;
            self.basis[r] = q;
            self.state[q] = State::Basic;
            self.pivot(r, q);
        }
    }

    fn basis_inverse(&self) -> Result<Inverse, LpError> {
        let m = self.m;
        let mut bm = vec![0.0; m * m];
        for (r, &j) in self.basis.iter().enumerate() {
            for &(i, v) in &self.cols[j] {
                bm[i * m + r] = v;
            }
        }
        Inverse::of(m, bm).ok_or_else(|| LpError::NumericalFailure("singular basis matrix".into()))
    }

    /// Recomputes basic values, duals and reduced costs from a fresh
    /// factorization. With `rebuild` the tableau itself is recomputed too.
    fn refactor(&mut self, rebuild: bool) -> Result<Vec<f64>, LpError> {
        let m = self.m;
        let nc = self.ncols;
        let binv = self.basis_inverse()?;
        let mut rhs = self.rhs.clone();
        for j in 0..nc {
            if self.state[j] == State::Basic {
                continue;
            }
            let v = self.nb_value(j);
            if v != 0.0 {
                for &(i, a) in &self.cols[j] {
                    rhs[i] -= a * v;
                }
            }
        }
        for r in 0..m {
            self.beta[r] = (0..m).map(|i| binv.at(r, i) * rhs[i]).sum();
        }
        let mut y = vec![0.0; m];
        for (r, &j) in self.basis.iter().enumerate() {
            let cb = self.cost[j];
            if cb != 0.0 {
                for i in 0..m {
                    y[i] += cb * binv.at(r, i);
                }
            }
        }
        for j in 0..nc {
            self.d[j] = self.cost[j] - self.cols[j].iter().map(|&(i, a)| y[i] * a).sum::<f64>();
        }
        for &j in &self.basis {
            self.d[j] = 0.0;
        }
        if rebuild {
            self.since_rebuild = 0;
            // Row r of the tableau is sum_i binv[r,i] * (row i of [A | I | Σ]).
            let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
            for j in 0..nc {
                for &(i, a) in &self.cols[j] {
                    rows[i].push((j, a));
                }
            }
            self.t.iter_mut().for_each(|v| *v = 0.0);
            for r in 0..m {
                let out = &mut self.t[r * nc..(r + 1) * nc];
                for (i, row) in rows.iter().enumerate() {
                    let b = binv.at(r, i);
                    if b.abs() <= DROP_TOL {
                        continue;
                    }
                    for &(j, a) in row {
                        out[j] += b * a;
                    }
                }
            }
            for (r, &j) in self.basis.iter().enumerate() {
                for i in 0..m {
                    self.t[i * nc + j] = if i == r { 1.0 } else { 0.0 };
                }
            }
        }
        Ok(y)
    }

    fn phase1_objective(&self) -> f64 {
        (0..self.m)
            .filter(|&i| self.basis[i] >= self.n + self.n_slack)
            .map(|i| self.beta[i])
            .sum()
    }

    /// Swaps basic artificials for real columns where the row allows it.
    fn drive_out_artificials(&mut self) {
        let nc = self.ncols;
        let first_art = self.n + self.n_slack;
        for r in 0..self.m {
            if self.basis[r] < first_art {
                continue;
            }
            let mut best = (1e-7, None);
            for j in 0..first_art {
                if self.state[j] == State::Basic {
                    continue;
                }
                let a = self.t[r * nc + j].abs();
                if a > best.0 {
                    best = (a, Some(j));
                }
            }
            if let Some(q) = best.1 {
                let out = self.basis[r];
                self.state[out] = State::Lower;
                self.beta[r] = self.nb_value(q);
                self.basis[r] = q;
                self.state[q] = State::Basic;
                self.pivot(r, q);
            }
        }
    }

    fn start_phase2(&mut self) {
        for i in 0..self.m {
            let a = self.art(i);
            self.lo[a] = 0.0;
            self.hi[a] = 0.0;
            if self.state[a] != State::Basic {
                self.state[a] = State::Lower;
            }
        }
        self.cost = self.phase2_cost.clone();
        self.phase2 = true;
    }

    /// Farkas ray from row `r` of `B⁻¹` after the dual simplex found no entering column.
    fn farkas_from_row(&self, r: usize) -> Result<Vec<f64>, LpError> {
        let binv = self.basis_inverse()?;
        let b = self.basis[r];
        let sign = if self.beta[r] < self.lo[b] { 1.0 } else { -1.0 };
        Ok((0..self.m).map(|i| sign * binv.at(r, i)).collect())
    }

    /// Final accuracy loop: refactorize, and if the refreshed point is off,
    /// rebuild the tableau and keep pivoting.
    fn polish(&mut self) -> Result<(Vec<f64>, bool), LpError> {
        for _ in 0..REFINE_ROUNDS {
            let y = self.refactor(false)?;
            let pv = self.max_primal_violation();
            let dv = self.dual_violation();
            if pv <= 10.0 * self.feas_tol && dv <= 10.0 * self.opt_tol {
                return Ok((y, true));
            }
            self.refactor(true)?;
            if pv > self.feas_tol {
                if self.dual_violation() <= self.opt_tol {
                    if self.dual()?.is_some() {
                        return Ok((y, false));
                    }
                } else {
                    return Err(LpError::NumericalFailure(format!(
                        "basis lost primal feasibility ({pv:.3e}) and dual feasibility ({dv:.3e})"
                    )));
                }
            }
            if !self.primal()? {
                return Err(LpError::NumericalFailure(
                    "unbounded direction after refactorization".into(),
                ));
            }
        }
        Err(LpError::NumericalFailure(
            "residuals above tolerance after refactorization".into(),
        ))
    }

    fn values(&self) -> Vec<f64> {
        let mut x: Vec<f64> = (0..self.ncols).map(|j| self.nb_value(j)).collect();
        for (r, &j) in self.basis.iter().enumerate() {
            x[j] = self.beta[r];
        }
        x
    }

    fn solution(&self, p: &LpProblem, status: LpStatus, dual: Vec<f64>) -> LpSolution {
        let all = self.values();
        let mut primal = all[..self.n].to_vec();
        for (j, v) in primal.iter_mut().enumerate() {
            // Snap values that sit within rounding of a bound.
            let (lo, hi) = (self.lo[j], self.hi[j]);
            if (*v - lo).abs() < 1e-12 {
                *v = lo;
            } else if (*v - hi).abs() < 1e-12 {
                *v = hi;
            }
        }
        let mut basis: Vec<usize> = self.basis.clone();
        basis.sort_unstable();
        LpSolution {
            status,
            objective: p.evaluate(&primal),
            primal,
            dual,
            basis,
            iterations: self.pivots,
        }
    }

    fn into_warm_start(self) -> WarmStart {
        WarmStart {
            basis: self.basis.clone(),
            state: self.state.clone(),
            tableau: Some(Arc::new(self)),
        }
    }
}

fn natural_duals(p: &LpProblem, y_min: Vec<f64>) -> Vec<f64> {
    match p.sense {
        Sense::Minimize => y_min,
        Sense::Maximize => y_min.into_iter().map(|v| -v).collect(),
    }
}

fn normalize(mut u: Vec<f64>) -> Vec<f64> {
    let s = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if s > 0.0 {
        u.iter_mut().for_each(|v| *v /= s);
    }
    u
}

fn empty_solution(p: &LpProblem, status: LpStatus) -> LpSolution {
    LpSolution {
        status,
        primal: vec![0.0; p.num_vars()],
        dual: vec![0.0; p.num_rows()],
        objective: 0.0,
        basis: Vec::new(),
        iterations: 0,
    }
}

fn run_cold(p: &LpProblem, phase2_limit: Option<usize>) -> Result<(LpSolution, Tableau), LpError> {
    let mut tb = Tableau::cold(p);
    tb.phase2_limit = phase2_limit;
    for i in 0..tb.m {
        let a = tb.art(i);
        tb.cost[a] = 1.0;
    }
    tb.compute_reduced_costs();
    tb.primal()?;
    let y1 = tb.refactor(false)?;
    let infeasibility = tb.phase1_objective();
    if infeasibility > 1e2 * tb.feas_tol {
        let ray = normalize(y1.into_iter().map(|v| -v).collect());
        let sol = tb.solution(p, LpStatus::Infeasible, ray);
        return Ok((sol, tb));
    }
    tb.start_phase2();
    tb.drive_out_artificials();
    tb.compute_reduced_costs();
    if !tb.primal()? {
        let sol = tb.solution(p, LpStatus::Unbounded, vec![0.0; tb.m]);
        return Ok((sol, tb));
    }
    if phase2_limit.is_some() {
        let y = tb.refactor(false)?;
        let sol = tb.solution(p, LpStatus::Optimal, natural_duals(p, y));
        return Ok((sol, tb));
    }
    finish(p, tb)
}

fn finish(p: &LpProblem, mut tb: Tableau) -> Result<(LpSolution, Tableau), LpError> {
    let (y, feasible) = tb.polish()?;
    if !feasible {
        let r = (0..tb.m)
            .max_by(|&a, &b| tb.primal_violation(a).total_cmp(&tb.primal_violation(b)))
            .unwrap_or(0);
        let ray = normalize(tb.farkas_from_row(r)?);
        let sol = tb.solution(p, LpStatus::Infeasible, ray);
        return Ok((sol, tb));
    }
    let sol = tb.solution(p, LpStatus::Optimal, natural_duals(p, y));
    Ok((sol, tb))
}

/// Solves `p` with a cold two-phase simplex.
///
/// Dantzig pricing with a Harris ratio test; after 50 consecutive degenerate
/// pivots pricing switches to Bland's rule until progress resumes.
pub fn solve_lp(p: &LpProblem) -> Result<LpSolution, LpError> {
    p.validate()?;
    if p.num_rows() == 0 {
        return solve_box(p);
    }
    Ok(run_cold(p, None)?.0)
}

/// Like `solve_lp`, optionally restarting from a previous basis, and returns
/// the final basis for later reuse.
pub fn solve_lp_warm(p: &LpProblem, warm: Option<&WarmStart>) -> Result<(LpSolution, Option<WarmStart>), LpError> {
    p.validate()?;
    if p.num_rows() == 0 {
        return Ok((solve_box(p)?, None));
    }
    if let Some(ws) = warm {
        if let Some(result) = try_warm(p, ws)? {
            return Ok(result);
        }
    }
    let (sol, tb) = run_cold(p, None)?;
    let ws = (sol.status == LpStatus::Optimal).then(|| tb.into_warm_start());
    Ok((sol, ws))
}

fn try_warm(p: &LpProblem, ws: &WarmStart) -> Result<Option<(LpSolution, Option<WarmStart>)>, LpError> {
    // A warm start that stalls is abandoned in favour of a cold solve.
    match warm_attempt(p, ws) {
        Err(LpError::IterationLimit(_)) => Ok(None),
        other => other,
    }
}

fn warm_attempt(p: &LpProblem, ws: &WarmStart) -> Result<Option<(LpSolution, Option<WarmStart>)>, LpError> {
    if let Some(snap) = &ws.tableau {
        if let Some(tb) = from_snapshot(p, snap) {
            return warm_solve(p, tb);
        }
    }
    let mut tb = Tableau::shell(p);
    tb.limit = 1000 + 5 * (tb.m + tb.ncols);
    if ws.state.len() != tb.ncols || ws.basis.len() != tb.m {
        return Ok(None);
    }
    for i in 0..tb.m {
        let a = tb.art(i);
        tb.hi[a] = 0.0;
    }
    tb.basis = ws.basis.clone();
    for j in 0..tb.ncols {
        tb.state[j] = match ws.state[j] {
            State::Basic => State::Basic,
            State::Upper if tb.hi[j].is_finite() => State::Upper,
            State::Lower if tb.lo[j].is_finite() => State::Lower,
            _ => tb.resting_state(j),
        };
    }
    tb.cost = tb.phase2_cost.clone();
    tb.phase2 = true;
    if tb.refactor(true).is_err() {
        return Ok(None);
    }
    warm_solve(p, tb)
}

/// Reuses a parent's final tableau for a problem that differs only in bounds.
fn from_snapshot(p: &LpProblem, snap: &Tableau) -> Option<Tableau> {
    let m = p.eq_matrix.len() + p.ineq_matrix.len();
    if snap.n != p.num_vars() || snap.m != m || snap.n_slack != p.ineq_matrix.len() {
        return None;
    }
    let mut tb = snap.clone();
    tb.pivots = 0;
    tb.phase2_pivots = 0;
    tb.limit = 1000 + 5 * (tb.m + tb.ncols);
    let nc = tb.ncols;
    for j in 0..tb.n {
        let (lo, hi) = (p.lower(j), p.upper(j));
        if lo == tb.lo[j] && hi == tb.hi[j] {
            continue;
        }
        let old = tb.nb_value(j);
        tb.lo[j] = lo;
        tb.hi[j] = hi;
        if tb.state[j] == State::Basic {
            continue;
        }
        tb.state[j] = match tb.state[j] {
            State::Upper if hi.is_finite() => State::Upper,
            State::Lower if lo.is_finite() => State::Lower,
            _ => tb.resting_state(j),
        };
        let shift = tb.nb_value(j) - old;
        if shift != 0.0 {
            for i in 0..tb.m {
                let a = tb.t[i * nc + j];
                if a != 0.0 {
                    tb.beta[i] -= a * shift;
                }
            }
        }
    }
    if tb.since_rebuild > REBUILD_AFTER && tb.refactor(true).is_err() {
        return None;
    }
    Some(tb)
}

fn warm_solve(p: &LpProblem, mut tb: Tableau) -> Result<Option<(LpSolution, Option<WarmStart>)>, LpError> {
    if tb.max_primal_violation() > tb.feas_tol {
        if tb.dual_violation() > tb.opt_tol {
            return Ok(None);
        }
        if let Some(r) = tb.dual()? {
            let ray = normalize(tb.farkas_from_row(r)?);
            let sol = tb.solution(p, LpStatus::Infeasible, ray);
            return Ok(Some((sol, None)));
        }
    }
    if !tb.primal()? {
        let sol = tb.solution(p, LpStatus::Unbounded, vec![0.0; tb.m]);
        return Ok(Some((sol, None)));
    }
    let (sol, tb) = finish(p, tb)?;
    let ws = (sol.status == LpStatus::Optimal).then(|| tb.into_warm_start());
    Ok(Some((sol, ws)))
}

/// Runs phase 2 for at most `pivots` pivots and reports the vertex reached,
/// together with the number of phase 2 pivots an unrestricted run needs.
pub(crate) fn solve_lp_truncated(p: &LpProblem, pivots: usize) -> Result<(LpSolution, usize), LpError> {
    p.validate()?;
    let (_, full) = run_cold(p, None)?;
    let (sol, _) = run_cold(p, Some(pivots))?;
    Ok((sol, full.phase2_pivots))
}

fn solve_box(p: &LpProblem) -> Result<LpSolution, LpError> {
    let flip = if p.sense == Sense::Maximize { -1.0 } else { 1.0 };
    let mut x = vec![0.0; p.num_vars()];
    for j in 0..p.num_vars() {
        let c = flip * p.objective[j];
        let (lo, hi) = (p.lower(j), p.upper(j));
        x[j] = if c > 0.0 {
            lo
        } else if c < 0.0 {
            hi
        } else if lo.is_finite() {
            lo
        } else if hi.is_finite() {
            hi
        } else {
            0.0
        };
        if !x[j].is_finite() {
            return Ok(empty_solution(p, LpStatus::Unbounded));
        }
    }
    Ok(LpSolution {
        status: LpStatus::Optimal,
        objective: p.evaluate(&x),
        primal: x,
        dual: Vec::new(),
        basis: Vec::new(),
        iterations: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::Sense;

    fn approx(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-8
    }

    #[test]
    fn textbook_max() {
        // max 3x + 5y, x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18
        let mut lp = LpProblem::new(Sense::Maximize, vec![3.0, 5.0]);
        lp.add_ineq(vec![1.0, 0.0], 4.0);
        lp.add_ineq(vec![0.0, 2.0], 12.0);
        lp.add_ineq(vec![3.0, 2.0], 18.0);
        let s = solve_lp(&lp).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!(approx(s.objective, 36.0));
        assert!(approx(s.primal[0], 2.0) && approx(s.primal[1], 6.0));
        assert!(approx(s.dual[0], 0.0) && approx(s.dual[1], 1.5) && approx(s.dual[2], 1.0));
    }

    #[test]
    fn equality_and_free_variable() {
        // min x + y with x − y = 1, x free, y ≥ 0 → x = 1, y = 0
        let mut lp = LpProblem::new(Sense::Minimize, vec![1.0, 1.0]);
        lp.nonneg[0] = false;
        lp.add_eq(vec![1.0, -1.0], 1.0);
        let s = solve_lp(&lp).unwrap();
        assert!(approx(s.objective, 1.0));
        assert!(approx(s.primal[0], 1.0));
    }

    #[test]
    fn infeasible_and_unbounded() {
        let mut lp = LpProblem::new(Sense::Maximize, vec![1.0]);
        lp.add_ineq(vec![1.0], -1.0);
        assert_eq!(solve_lp(&lp).unwrap().status, LpStatus::Infeasible);

        let mut lp = LpProblem::new(Sense::Maximize, vec![1.0, 0.0]);
        lp.add_ineq(vec![-1.0, 1.0], 1.0);
        assert_eq!(solve_lp(&lp).unwrap().status, LpStatus::Unbounded);
    }

    #[test]
    fn upper_bounds_handled_without_rows() {
        let mut lp = LpProblem::new(Sense::Maximize, vec![1.0, 2.0]);
        lp.bounds = vec![Some((0.0, 3.0)), Some((1.0, 2.0))];
        lp.add_ineq(vec![1.0, 1.0], 4.0);
        let s = solve_lp(&lp).unwrap();
        assert!(approx(s.objective, 6.0));
    }

    #[test]
    fn warm_start_after_bound_change() {
        let mut lp = LpProblem::new(Sense::Maximize, vec![5.0, 4.0, 3.0]);
        lp.add_ineq(vec![2.0, 3.0, 1.0], 5.0);
        lp.add_ineq(vec![4.0, 1.0, 2.0], 11.0);
        lp.add_ineq(vec![3.0, 4.0, 2.0], 8.0);
        lp.bounds = vec![Some((0.0, 1.0)); 3];
        let (s, ws) = solve_lp_warm(&lp, None).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        let mut child = lp.clone();
        child.bounds[0] = Some((0.0, 0.0));
        let (warm, _) = solve_lp_warm(&child, ws.as_ref()).unwrap();
        let cold = solve_lp(&child).unwrap();
        assert!(approx(warm.objective, cold.objective));
    }

    #[test]
    fn degenerate_cycling_example_terminates() {
        // Beale's example cycles under naive Dantzig pricing.
        let mut lp = LpProblem::new(Sense::Minimize, vec![-0.75, 150.0, -0.02, 6.0]);
        lp.add_ineq(vec![0.25, -60.0, -0.04, 9.0], 0.0);
        lp.add_ineq(vec![0.5, -90.0, -0.02, 3.0], 0.0);
        lp.add_ineq(vec![0.0, 0.0, 1.0, 0.0], 1.0);
        let s = solve_lp(&lp).unwrap();
        assert!(approx(s.objective, -0.05));
    }
}
