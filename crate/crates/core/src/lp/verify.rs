//! Checks a claimed LP solution against its certificate without re-solving.
//!
//! An optimal claim carries primal and dual values. Primal feasibility, the
//! reported objective, dual feasibility, complementary slackness and the
//! duality gap are checked in that order. A basis is read off the claimed point
//! and factorized once; when the point is a nondegenerate vertex the dual it
//! implies must match the claimed one. An infeasibility claim carries a Farkas
//! ray, checked directly.

use serde::{Deserialize, Serialize};

use super::{dot, LpProblem, LpSolution, LpStatus, Sense};

const TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RejectReason {
    Malformed(String),
    PrimalInfeasible { violation: f64 },
    DualInfeasible { detail: String },
    ComplementarySlackness { index: usize, product: f64 },
    Gap { claimed: f64, certified: f64 },
    InvalidCertificate(String),
}

impl RejectReason {
    pub fn label(&self) -> &'static str {
        match self {
            RejectReason::Malformed(_) => "malformed",
            RejectReason::PrimalInfeasible { .. } => "primal-infeasible",
            RejectReason::DualInfeasible { .. } => "dual-infeasible",
            RejectReason::ComplementarySlackness { .. } => "complementary-slackness",
            RejectReason::Gap { .. } => "gap",
            RejectReason::InvalidCertificate(_) => "invalid-certificate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Accepted,
    Rejected(RejectReason),
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted)
    }
}

/// Stateful verifier that counts basis factorizations.
#[derive(Debug, Default)]
pub struct Verifier {
    pub factorizations: usize,
    pub verified: usize,
}

/// One-shot verification.
pub fn verify_solution(lp: &LpProblem, claimed: &LpSolution) -> Verdict {
    Verifier::default().verify(lp, claimed)
}

fn reject(r: RejectReason) -> Verdict {
    Verdict::Rejected(r)
}

struct Augmented<'a> {
    lp: &'a LpProblem,
    n: usize,
    m_eq: usize,
    m: usize,
}

impl<'a> Augmented<'a> {
    fn new(lp: &'a LpProblem) -> Self {
        Augmented {
            lp,
            n: lp.num_vars(),
            m_eq: lp.eq_matrix.len(),
            m: lp.num_rows(),
        }
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        if j < self.n {
            if i < self.m_eq {
                self.lp.eq_matrix[i][j]
            } else {
                self.lp.ineq_matrix[i - self.m_eq][j]
            }
        } else if i >= self.m_eq && j - self.n == i - self.m_eq {
            1.0
        } else {
            0.0
        }
    }

    fn ncols(&self) -> usize {
        self.n + self.m - self.m_eq
    }

    fn rhs(&self, i: usize) -> f64 {
        if i < self.m_eq {
            self.lp.eq_rhs[i]
        } else {
            self.lp.ineq_rhs[i - self.m_eq]
        }
    }

    fn bounds(&self, j: usize) -> (f64, f64) {
        if j < self.n {
            (self.lp.lower(j), self.lp.upper(j))
        } else {
            (0.0, f64::INFINITY)
        }
    }

    fn cost(&self, j: usize) -> f64 {
        if j < self.n {
            self.lp.objective[j]
        } else {
            0.0
        }
    }

    /// `aⱼᵀ u` for every augmented column.
    fn transpose_times(&self, u: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.ncols()];
        for (i, &ui) in u.iter().enumerate() {
            if ui == 0.0 {
                continue;
            }
            let row = if i < self.m_eq {
                &self.lp.eq_matrix[i]
            } else {
                &self.lp.ineq_matrix[i - self.m_eq]
            };
            for (gj, &a) in g.iter_mut().zip(row) {
                *gj += a * ui;
            }
            if i >= self.m_eq {
                g[self.n + i - self.m_eq] += ui;
            }
        }
        g
    }
}

impl Verifier {
    pub fn verify(&mut self, lp: &LpProblem, claimed: &LpSolution) -> Verdict {
        self.verified += 1;
        if let Err(e) = lp.validate() {
            return reject(RejectReason::Malformed(e.to_string()));
        }
        match claimed.status {
            LpStatus::Optimal => self.verify_optimal(lp, claimed),
            LpStatus::Infeasible => verify_farkas(lp, &claimed.dual),
            LpStatus::Unbounded => reject(RejectReason::Malformed("unbounded claims carry no certificate".into())),
        }
    }

    fn verify_optimal(&mut self, lp: &LpProblem, claimed: &LpSolution) -> Verdict {
        let aug = Augmented::new(lp);
        let (n, m) = (aug.n, aug.m);
        let x = &claimed.primal;
        let y = &claimed.dual;
        if x.len() != n || y.len() != m {
            return reject(RejectReason::Malformed(format!(
                "expected {n} primal and {m} dual values, got {} and {}",
                x.len(),
                y.len()
            )));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) || !claimed.objective.is_finite() {
            return reject(RejectReason::Malformed("non-finite value".into()));
        }

        let mut slack = vec![0.0; aug.ncols() - n];
        for (k, s) in slack.iter_mut().enumerate() {
            *s = lp.ineq_rhs[k] - dot(&lp.ineq_matrix[k], x);
        }
        let xv = |j: usize| if j < n { x[j] } else { slack[j - n] };
        let flip = if lp.sense == Sense::Maximize { 1.0 } else { -1.0 };
        let g = aug.transpose_times(y);
        let d: Vec<f64> = (0..aug.ncols()).map(|j| flip * (aug.cost(j) - g[j])).collect();
        let cscale = 1.0 + lp.objective.iter().fold(0.0f64, |a, v| a.max(v.abs()));

        self.factorizations += 1;
        let basis = BasisFactor::select(&aug, &xv, &d, cscale);

        let rscale = 1.0 + (0..m).fold(0.0f64, |a, i| a.max(aug.rhs(i).abs()));
        let violation = lp.max_violation(x);
        if violation > TOL * rscale {
            return reject(RejectReason::PrimalInfeasible { violation });
        }
        let value = lp.evaluate(x);
        let scale = 1.0 + value.abs();
        if (claimed.objective - value).abs() > TOL * scale {
            return reject(RejectReason::Gap {
                claimed: claimed.objective,
                certified: value,
            });
        }

        // Maximization form: d ≤ 0 is lower-active, d ≥ 0 upper-active.
        let mut dual_value = (0..m).map(|i| aug.rhs(i) * y[i]).sum::<f64>();
        for (j, &dj) in d.iter().enumerate() {
            let (lo, hi) = aug.bounds(j);
            if (dj > TOL * cscale && !hi.is_finite()) || (dj < -TOL * cscale && !lo.is_finite()) {
                return reject(RejectReason::DualInfeasible {
                    detail: format!("reduced cost {dj} of column {j} has the wrong sign"),
                });
            }
            if dj > 0.0 && hi.is_finite() {
                dual_value += flip * dj * hi;
            } else if dj < 0.0 && lo.is_finite() {
                dual_value += flip * dj * lo;
            }
        }
        for (j, &dj) in d.iter().enumerate() {
            let (lo, hi) = aug.bounds(j);
            let product = if dj < 0.0 && lo.is_finite() {
                (xv(j) - lo) * dj
            } else if dj > 0.0 && hi.is_finite() {
                (hi - xv(j)) * dj
            } else {
                0.0
            };
            if product.abs() > TOL * scale {
                return reject(RejectReason::ComplementarySlackness { index: j, product });
            }
        }
        if (value - dual_value).abs() > TOL * scale {
            return reject(RejectReason::Gap {
                claimed: value,
                certified: dual_value,
            });
        }

        // A nondegenerate vertex fixes its basis, and with it the dual.
        if basis.determined_by_primal {
            if let Some(y_basis) = basis.duals(&aug) {
                let yscale = 1.0 + y_basis.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if let Some(i) = (0..m).find(|&i| (y[i] - y_basis[i]).abs() > TOL * yscale) {
                    return reject(RejectReason::DualInfeasible {
                        detail: format!("claimed dual {i} is {} but the basis implies {}", y[i], y_basis[i]),
                    });
                }
            }
        }
        Verdict::Accepted
    }
}

/// Greedy column selection with a modified Gram–Schmidt QR of the chosen
/// columns. Columns strictly between their bounds go first, then columns with
/// zero reduced cost under the claimed duals, then slacks, then the rest.
struct BasisFactor {
    columns: Vec<usize>,
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    determined_by_primal: bool,
}

impl BasisFactor {
    fn select(aug: &Augmented, xv: &dyn Fn(usize) -> f64, d: &[f64], cscale: f64) -> BasisFactor {
        let m = aug.m;
        let nc = aug.ncols();
        let off_bound = |j: usize| {
            let (lo, hi) = aug.bounds(j);
            let v = xv(j);
            let near = |b: f64| b.is_finite() && (v - b).abs() <= 1e-9 * (1.0 + b.abs());
            !(near(lo) || near(hi))
        };
        let mut order: Vec<usize> = (0..nc).filter(|&j| off_bound(j)).collect();
        let tier1 = order.len();
        order.extend((0..nc).filter(|&j| !off_bound(j) && d[j].abs() <= 1e-9 * cscale));
        order.extend((aug.n..nc).filter(|&j| !off_bound(j) && d[j].abs() > 1e-9 * cscale));
        order.extend((0..aug.n).filter(|&j| !off_bound(j) && d[j].abs() > 1e-9 * cscale));

        let mut f = BasisFactor {
            columns: Vec::with_capacity(m),
            q: Vec::with_capacity(m),
            r: Vec::with_capacity(m),
            determined_by_primal: false,
        };
        let mut from_tier1 = 0;
        for (pos, &j) in order.iter().enumerate() {
            if f.columns.len() == m {
                break;
            }
            let a: Vec<f64> = (0..m).map(|i| aug.entry(i, j)).collect();
            let norm_a = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm_a == 0.0 {
                continue;
            }
            let mut v = a.clone();
            let mut coef = vec![0.0; f.q.len() + 1];
            for _ in 0..2 {
                for (k, qk) in f.q.iter().enumerate() {
                    let c = dot(qk, &v);
                    coef[k] += c;
                    v.iter_mut().zip(qk).for_each(|(vi, qi)| *vi -= c * qi);
                }
            }
            let norm_v = v.iter().map(|t| t * t).sum::<f64>().sqrt();
            if norm_v <= 1e-8 * norm_a {
                continue;
            }
            coef[f.q.len()] = norm_v;
            v.iter_mut().for_each(|t| *t /= norm_v);
            f.q.push(v);
            f.r.push(coef);
            f.columns.push(j);
            if pos < tier1 {
                from_tier1 += 1;
            }
        }
        f.determined_by_primal = f.columns.len() == m && from_tier1 == m;
        f
    }

    /// Solves `Bᵀ y = c_B` through `B = QR`.
    fn duals(&self, aug: &Augmented) -> Option<Vec<f64>> {
        let m = aug.m;
        if self.columns.len() != m {
            return None;
        }
        let mut w = vec![0.0; m];
        for k in 0..m {
            let s: f64 = (0..k).map(|i| self.r[k][i] * w[i]).sum();
            w[k] = (aug.cost(self.columns[k]) - s) / self.r[k][k];
        }
        let mut y = vec![0.0; m];
        for (k, qk) in self.q.iter().enumerate() {
            y.iter_mut().zip(qk).for_each(|(yi, qi)| *yi += w[k] * qi);
        }
        y.iter().all(|v| v.is_finite()).then_some(y)
    }
}

fn verify_farkas(lp: &LpProblem, u: &[f64]) -> Verdict {
    let aug = Augmented::new(lp);
    if u.len() != aug.m || u.iter().any(|v| !v.is_finite()) {
        return reject(RejectReason::Malformed("farkas ray has the wrong length".into()));
    }
    let g = aug.transpose_times(u);
    let mut min_box = 0.0;
    for (j, &gj) in g.iter().enumerate() {
        if gj.abs() <= 1e-12 {
            continue;
        }
        let (lo, hi) = aug.bounds(j);
        let bound = if gj > 0.0 { lo } else { hi };
        if !bound.is_finite() {
            return reject(RejectReason::InvalidCertificate(format!(
                "ray unbounded along column {j}"
            )));
        }
        min_box += gj * bound;
    }
    let urhs: f64 = (0..aug.m).map(|i| u[i] * aug.rhs(i)).sum();
    if min_box - urhs > 1e-9 {
        Verdict::Accepted
    } else {
        reject(RejectReason::InvalidCertificate(format!(
            "ray separates by {:.3e}, not positive",
            min_box - urhs
        )))
    }
}
