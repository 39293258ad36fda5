//! Linear bid encryption for occupation-measure LPs.
//!
//! An agent with flow constraints `A x = α` picks a positive diagonal `D` and
//! an invertible `F` and submits `max r′ᵀy  s.t.  A′y = b′, y ≥ 0` with
//! `A′ = F⁻ᵀ A D⁻¹`, `r′ = D⁻¹ r`, `b′ = F⁻ᵀ α`. Solutions map back through
//! `x = D⁻¹ y`, so the support of the policy, and with it the resource usage,
//! survives encryption.
//!
//! Column sums of `A′` are `wᵀA_j / D_j` where `w = F⁻¹ 1`. Picking `w` first
//! and deriving `D_j = wᵀA_j / (1 − γ′)` makes every column sum `1 − γ′`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::{decode_allocation, solve_blocks, AuctionError, AuctionInstance, BlockAllocation, WdpConfig};
use crate::lp::{LpProblem, Sense};
use crate::mdp::{build_dual_lp, OccupationMeasure};
use crate::resource::{normalizers, AgentBlock, ConstrainedMdp, XNorm};

/// Largest accepted condition number of `F`.
pub const MAX_F_CONDITION: f64 = 100.0;
/// Largest accepted condition estimate of the encrypted constraint matrix.
pub const MAX_LP_CONDITION: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("invalid transform input: {0}")]
    InvalidInput(String),
    #[error("degenerate lp: {0}")]
    Degenerate(String),
    #[error("encrypted lp is too ill-conditioned ({0:e})")]
    IllConditioned(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub d: Vec<f64>,
    pub f: Vec<Vec<f64>>,
}

impl Transform {
    pub fn identity(states: usize, columns: usize) -> Transform {
        Transform {
            d: vec![1.0; columns],
            f: (0..states)
                .map(|i| (0..states).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), PrivacyError> {
        if self.d.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(PrivacyError::InvalidInput("D must be positive".into()));
        }
        let n = self.f.len();
        if self.f.iter().any(|r| r.len() != n) {
            return Err(PrivacyError::InvalidInput("F must be square".into()));
        }
        if to_matrix(&self.f).determinant().abs() <= 1e-12 {
            return Err(PrivacyError::InvalidInput("F is singular".into()));
        }
        Ok(())
    }

    /// `F⁻ᵀ`.
    fn f_inv_t(&self) -> Result<DMatrix<f64>, PrivacyError> {
        to_matrix(&self.f)
            .transpose()
            .try_inverse()
            .ok_or_else(|| PrivacyError::InvalidInput("F is singular".into()))
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// `F⁻ᵀ A D⁻¹`.
pub fn transform_matrix(a: &[Vec<f64>], t: &Transform) -> Result<Vec<Vec<f64>>, PrivacyError> {
    t.validate()?;
    let a = to_matrix(a);
    if a.nrows() != t.f.len() || a.ncols() != t.d.len() {
        return Err(PrivacyError::InvalidInput(
            "transform dimensions do not match the lp".into(),
        ));
    }
    let mut out = t.f_inv_t()? * a;
    for (j, &dj) in t.d.iter().enumerate() {
        out.column_mut(j).iter_mut().for_each(|v| *v /= dj);
    }
    Ok(from_matrix(&out))
}

/// Encrypted LP: maximize `objective · y` s.t. `matrix y = rhs`, `y ≥ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformedLp {
    pub objective: Vec<f64>,
    pub matrix: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

impl TransformedLp {
    pub fn to_lp(&self) -> LpProblem {
        let mut lp = LpProblem::new(Sense::Maximize, self.objective.clone());
        for (row, &b) in self.matrix.iter().zip(&self.rhs) {
            lp.add_eq(row.clone(), b);
        }
        lp
    }

    /// Common column sum, if every column sums to the same value within `tol`.
    pub fn column_sum(&self, tol: f64) -> Option<f64> {
        column_sum(&self.matrix, tol)
    }
}

fn column_sum(m: &[Vec<f64>], tol: f64) -> Option<f64> {
    let n = m.first()?.len();
    let sums: Vec<f64> = (0..n).map(|j| m.iter().map(|r| r[j]).sum()).collect();
    let first = *sums.first()?;
    sums.iter().all(|s| (s - first).abs() <= tol).then_some(first)
}

fn check_dual_shape(lp: &LpProblem) -> Result<(), PrivacyError> {
    let ok = lp.sense == Sense::Maximize
        && lp.ineq_matrix.is_empty()
        && lp.nonneg.iter().all(|&b| b)
        && lp.bounds.iter().all(|b| b.is_none());
    if ok {
        Ok(())
    } else {
        Err(PrivacyError::InvalidInput(
            "expected maximize with equalities and nonnegative variables only".into(),
        ))
    }
}

pub fn apply_transform(lp: &LpProblem, t: &Transform) -> Result<TransformedLp, PrivacyError> {
    check_dual_shape(lp)?;
    let matrix = transform_matrix(&lp.eq_matrix, t)?;
    let rhs = (t.f_inv_t()? * DVector::from_column_slice(&lp.eq_rhs))
        .iter()
        .copied()
        .collect();
    let objective = lp.objective.iter().zip(&t.d).map(|(r, d)| r / d).collect();
    Ok(TransformedLp { objective, matrix, rhs })
}

/// `x = D⁻¹ y`, reshaped to states by actions.
pub fn invert_solution(y: &[f64], t: &Transform) -> OccupationMeasure {
    let ns = t.f.len().max(1);
    let x: Vec<f64> = y.iter().zip(&t.d).map(|(v, d)| v / d).collect();
    OccupationMeasure::from_flat(&x, ns, x.len() / ns)
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.iter().fold(0.0f64, |a, v| a.max(*v));
    let min = sv.iter().fold(f64::INFINITY, |a, v| a.min(*v));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Seeded transform whose encrypted columns all sum to `1 − target_discount`.
pub fn random_transform(lp: &LpProblem, seed: u64, target_discount: f64) -> Result<Transform, PrivacyError> {
    check_dual_shape(lp)?;
    if !(target_discount > 0.0 && target_discount < 1.0) {
        return Err(PrivacyError::InvalidInput("target discount must lie in (0,1)".into()));
    }
    let a = &lp.eq_matrix;
    let ns = a.len();
    let ncols = lp.num_vars();
    if ns == 0 || ncols == 0 {
        return Err(PrivacyError::Degenerate("empty constraint matrix".into()));
    }
    if let Some(j) = (0..ncols).find(|&j| a.iter().all(|r| r[j] == 0.0)) {
        return Err(PrivacyError::Degenerate(format!("column {j} is zero")));
    }
    let sum = column_sum(a, 1e-6).ok_or_else(|| PrivacyError::Degenerate("column sums differ".into()))?;
    let gamma = 1.0 - sum;
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(PrivacyError::Degenerate(format!("column sum {sum} is not 1 − γ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Keep max w / min w below 1/√γ so every wᵀA_j stays positive.
    let spread = 0.5 * (1.0 / gamma).ln();
    let w: Vec<f64> = (0..ns).map(|_| rng.gen_range(0.0..=spread).exp()).collect();
    let raw: Vec<f64> = (0..ncols)
        .map(|j| (0..ns).map(|i| w[i] * a[i][j]).sum::<f64>() / (1.0 - target_discount))
        .collect();
    if raw.iter().any(|v| *v <= 0.0) {
        return Err(PrivacyError::Degenerate("a column has no positive weighting".into()));
    }
    // A common factor on w scales D; pull D toward [0.1, 10] in log space.
    let lo = raw.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    let hi = raw.iter().fold(0.0f64, |m, v| m.max(*v));
    let (a_lo, a_hi) = ((0.1f64 / lo).ln(), (10.0f64 / hi).ln());
    let log_scale = if a_lo <= a_hi {
        rng.gen_range(a_lo..=a_hi)
    } else {
        0.5 * (a_lo + a_hi)
    };
    let scale = log_scale.exp();
    let w: Vec<f64> = w.iter().map(|v| v * scale).collect();
    let d: Vec<f64> = raw.iter().map(|v| v * scale).collect();

    // F w = 1 for F = R + (1 − R w) wᵀ / (wᵀ w).
    let wv = DVector::from_column_slice(&w);
    let ww = wv.dot(&wv);
    let ones = DVector::from_element(ns, 1.0);
    for _ in 0..1000 {
        let r = DMatrix::from_fn(ns, ns, |i, j| {
            let noise: f64 = rng.gen_range(-1.0..1.0);
            if i == j {
                1.0 + noise.abs()
            } else {
                0.5 * noise
            }
        });
        let f = &r + (&ones - &r * &wv) * wv.transpose() / ww;
        if condition(&f) <= MAX_F_CONDITION {
            let t = Transform { d, f: from_matrix(&f) };
            let encrypted = to_matrix(&transform_matrix(a, &t)?);
            let c = condition(&(&encrypted * encrypted.transpose())).sqrt();
            if c > MAX_LP_CONDITION {
                return Err(PrivacyError::IllConditioned(c));
            }
            return Ok(t);
        }
    }
    Err(PrivacyError::Degenerate("no well-conditioned F found".into()))
}

/// What an agent submits: the encrypted LP plus its public resource data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncryptedBid {
    pub lp: TransformedLp,
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    pub rho: Vec<Vec<f64>>,
    pub kappa_hat: Vec<f64>,
}

impl EncryptedBid {
    /// Encrypts an agent's occupation LP with a seeded transform.
    pub fn seal(
        agent: &ConstrainedMdp,
        seed: u64,
        target_discount: f64,
    ) -> Result<(EncryptedBid, Transform), PrivacyError> {
        let lp = build_dual_lp(&agent.mdp, &[]);
        let t = random_transform(&lp, seed, target_discount)?;
        let bid = EncryptedBid {
            lp: apply_transform(&lp, &t)?,
            num_states: agent.mdp.num_states(),
            num_actions: agent.mdp.num_actions(),
            discount: target_discount,
            rho: agent.spec.rho.clone(),
            kappa_hat: agent.spec.kappa_hat.clone(),
        };
        Ok((bid, t))
    }

    /// Total encrypted occupation mass: summing the rows gives `(1 − γ′) 1ᵀy = 1ᵀb′`.
    pub fn mass(&self) -> f64 {
        self.lp.rhs.iter().sum::<f64>() / (1.0 - self.discount)
    }

    pub fn block(&self, norm: XNorm) -> AgentBlock {
        AgentBlock {
            num_states: self.num_states,
            num_actions: self.num_actions,
            objective: self.lp.objective.clone(),
            flow: self.lp.matrix.clone(),
            flow_rhs: self.lp.rhs.clone(),
            rho: self.rho.clone(),
            kappa_hat: self.kappa_hat.clone(),
            norm: normalizers(&self.rho, self.mass(), norm),
        }
    }
}

/// Seals every agent's bid, agent `m` with `seed + m` and its own discount.
pub fn seal_bids(instance: &AuctionInstance, seed: u64) -> Result<Vec<(EncryptedBid, Transform)>, AuctionError> {
    instance
        .agents
        .iter()
        .enumerate()
        .map(|(m, agent)| {
            EncryptedBid::seal(agent, seed.wrapping_add(m as u64), agent.mdp.discount())
                .map_err(|e| AuctionError::InvalidInput(e.to_string()))
        })
        .collect()
}

/// Each agent decrypts its own columns of a solution over sealed bids.
pub fn unseal_allocation(sealed: &[(EncryptedBid, Transform)], sol: BlockAllocation) -> BlockAllocation {
    let columns = sol
        .columns
        .iter()
        .zip(sealed)
        .map(|(y, (_, t))| invert_solution(y, t).flat())
        .collect();
    BlockAllocation { columns, ..sol }
}

/// Winner determination on encrypted bids. Agent `m` seals with `seed + m`
/// and decrypts its own share of the solution.
pub fn solve_wdp_encrypted(
    instance: &AuctionInstance,
    seed: u64,
    config: &WdpConfig,
) -> Result<crate::auction::Allocation, AuctionError> {
    let sealed = seal_bids(instance, seed)?;
    let blocks: Vec<AgentBlock> = sealed.iter().map(|(b, _)| b.block(config.norm)).collect();
    let sol = solve_blocks(&blocks, &instance.kappa, &instance.supply(), config)?;
    decode_allocation(instance, unseal_allocation(&sealed, sol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn identity_is_bit_exact() {
        let lp = build_dual_lp(&fixtures::delivery_mdp(10.0, [1.0, 0.0, 0.0]), &[]);
        let t = Transform::identity(3, 15);
        let e = apply_transform(&lp, &t).unwrap();
        assert_eq!(e.to_lp(), lp);
    }

    #[test]
    fn columns_sum_to_target() {
        let lp = build_dual_lp(&fixtures::delivery_mdp(10.0, [1.0, 0.0, 0.0]), &[]);
        for gp in [0.5, 0.9] {
            let t = random_transform(&lp, 3, gp).unwrap();
            let e = apply_transform(&lp, &t).unwrap();
            let s = e.column_sum(1e-6).unwrap();
            assert!((s - (1.0 - gp)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_column_is_degenerate() {
        let mut lp = LpProblem::new(Sense::Maximize, vec![1.0, 0.0]);
        lp.add_eq(vec![0.1, 0.0], 1.0);
        assert!(matches!(
            random_transform(&lp, 0, 0.9),
            Err(PrivacyError::Degenerate(_))
        ));
    }
}
