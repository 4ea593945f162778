//! Smallest steering coalitions and the steering map.
//!
//! Given an orthonormal basis `B` of `Null_τ` with `k` columns, any `k`
//! linearly independent rows of `B` mark agents whose opinions can be fixed
//! arbitrarily; the remaining agents form a coalition that can translate the
//! initial vector into `x*·1 + Null_τ`, which reaches consensus on `x*`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::Chain;
use crate::error::{Error, Result};
use crate::linalg::{condition_number, least_squares};
use crate::rank::{rank, NullSpaceBasis, RankReport};
use crate::transition::phi;

/// Minimum residual norm for a basis row to count as independent of the rows
/// already chosen.
pub const PIVOT_TOL: f64 = 1e-8;

/// Condition number beyond which steering is refused.
pub const MAX_CONDITION: f64 = 1e12;

/// A coalition that can steer the network to any consensus value.
///
/// Agent indices are 0-based in memory and 1-based in JSON.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Coalition {
    #[serde(serialize_with = "crate::json::ser_one_based")]
    pub members: Vec<usize>,
    /// Agents outside the coalition; their basis rows are independent.
    #[serde(serialize_with = "crate::json::ser_one_based")]
    pub complement_rows: Vec<usize>,
    pub tau: f64,
    /// Spectral condition number of the basis restricted to `complement_rows`.
    pub condition_number: f64,
    #[serde(skip)]
    pub basis: NullSpaceBasis,
}

impl Coalition {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn n(&self) -> usize {
        self.basis.basis.nrows()
    }
}

/// Rows `0..N` of `basis`, scanned in ascending order, kept whenever their
/// component orthogonal to the rows kept so far exceeds [`PIVOT_TOL`].
pub fn independent_rows(basis: &DMatrix<f64>) -> Vec<usize> {
    let k = basis.ncols();
    let mut kept: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut rows = Vec::with_capacity(k);
    for i in 0..basis.nrows() {
        if kept.len() == k {
            break;
        }
        let mut r: DVector<f64> = basis.row(i).transpose();
        // two passes of Gram-Schmidt for stability
        for _ in 0..2 {
            for q in &kept {
                let c = q.dot(&r);
                r -= q * c;
            }
        }
        let norm = r.norm();
        if norm > PIVOT_TOL {
            kept.push(r / norm);
            rows.push(i);
        }
    }
    rows
}

/// Builds the coalition from an already computed rank report.
pub fn coalition_from_report(report: &RankReport) -> Result<Coalition> {
    if !report.converged {
        return Err(Error::NotConverged(format!(
            "null-space estimate at tau = {} did not stabilize over horizons {:?}",
            report.basis.tau, report.horizons
        )));
    }
    let b = &report.basis.basis;
    let n = b.nrows();
    let complement = independent_rows(b);
    if complement.len() != b.ncols() {
        return Err(Error::NotConverged(format!(
            "basis has only {} independent rows for {} columns",
            complement.len(),
            b.ncols()
        )));
    }
    let members: Vec<usize> = (0..n).filter(|i| !complement.contains(i)).collect();
    let sub = b.select_rows(&complement);
    Ok(Coalition {
        members,
        complement_rows: complement,
        tau: report.basis.tau,
        condition_number: condition_number(&sub),
        basis: report.basis.clone(),
    })
}

/// A smallest coalition at `τ`. Its size is `N − dim Null_τ`, which is the
/// rank in continuous time.
///
/// ```
/// use egc::chain::{Chain, TimeMode};
/// use egc::coalition::smallest_egc;
/// use nalgebra::DMatrix;
///
/// let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0 / 3.0, -1.0, 2.0 / 3.0, 0.0, 0.0, 0.0]);
/// let chain = Chain::constant(TimeMode::Continuous, a).unwrap();
/// assert_eq!(smallest_egc(&chain, 0.0).unwrap().members, vec![0, 2]);
/// ```
pub fn smallest_egc(chain: &Chain, tau: f64) -> Result<Coalition> {
    coalition_from_report(&rank(chain, tau, None)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SteeringPlan {
    pub target: f64,
    pub tau: f64,
    #[serde(serialize_with = "crate::json::ser_one_based")]
    pub coalition: Vec<usize>,
    #[serde(serialize_with = "crate::json::ser_one_based_map")]
    pub coalition_opinions: BTreeMap<usize, f64>,
    #[serde(serialize_with = "crate::json::ser_one_based_map")]
    pub fixed_opinions: BTreeMap<usize, f64>,
    /// Assembled initial vector.
    #[serde(serialize_with = "crate::json::ser_vector")]
    pub initial: DVector<f64>,
    /// `‖(I − BBᵀ)(x − x*·1)‖_∞ / max(1, ‖x − x*·1‖_∞)`: distance of the
    /// translated initial vector from the null space, relative to its size.
    pub residual: f64,
    pub verified_horizon: f64,
    /// `Φ(verified_horizon, τ)·x`.
    #[serde(serialize_with = "crate::json::ser_vector")]
    pub predicted_limit: DVector<f64>,
    pub max_deviation: f64,
    pub condition_number: f64,
}

/// Coalition opinions that drive the network to consensus on `target` when
/// the other agents start from `fixed`.
///
/// `verify_horizon` defaults to the horizon at which the basis was verified.
pub fn steer(
    chain: &Chain,
    coalition: &Coalition,
    target: f64,
    fixed: &BTreeMap<usize, f64>,
    verify_horizon: Option<f64>,
) -> Result<SteeringPlan> {
    let expected: Vec<usize> = coalition.complement_rows.clone();
    let got: Vec<usize> = fixed.keys().copied().collect();
    if got != expected {
        let missing: Vec<usize> = expected.iter().filter(|i| !fixed.contains_key(i)).map(|i| i + 1).collect();
        let extra: Vec<usize> = got.iter().filter(|i| !expected.contains(i)).map(|i| i + 1).collect();
        return Err(Error::FixedOpinionMismatch(format!("missing {:?}, unexpected {:?}", missing, extra)));
    }
    if coalition.condition_number > MAX_CONDITION {
        return Err(Error::IllConditioned(coalition.condition_number));
    }
    let b = &coalition.basis.basis;
    let n = b.nrows();
    let sub = b.select_rows(&coalition.complement_rows);
    let rhs = DVector::from_iterator(expected.len(), expected.iter().map(|i| fixed[i] - target));
    let alpha = if expected.is_empty() {
        DVector::zeros(0)
    } else {
        sub.lu()
            .solve(&rhs)
            .ok_or(Error::IllConditioned(f64::INFINITY))?
    };
    let mut x = DVector::from_element(n, target);
    for (&i, &v) in fixed {
        x[i] = v;
    }
    let mut coalition_opinions = BTreeMap::new();
    for &i in &coalition.members {
        let v = target + b.row(i).transpose().dot(&alpha);
        x[i] = v;
        coalition_opinions.insert(i, v);
    }
    let shifted = x.add_scalar(-target);
    let residual = if b.ncols() == 0 {
        shifted.amax()
    } else {
        (&shifted - b * (b.transpose() * &shifted)).amax() / shifted.amax().max(1.0)
    };
    let horizon = verify_horizon.unwrap_or(coalition.basis.horizon_used).max(coalition.tau);
    let predicted = phi(chain, horizon, coalition.tau)?.matrix * &x;
    let max_deviation = predicted.add_scalar(-target).amax();
    Ok(SteeringPlan {
        target,
        tau: coalition.tau,
        coalition: coalition.members.clone(),
        coalition_opinions,
        fixed_opinions: fixed.clone(),
        initial: x,
        residual,
        verified_horizon: horizon,
        predicted_limit: predicted,
        max_deviation,
        condition_number: coalition.condition_number,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub trials: usize,
    pub target: f64,
    pub horizon: f64,
    pub tol: f64,
    pub seed: u64,
}

/// Monte-Carlo falsification of "`candidate` is a steering coalition".
///
/// Each trial draws fixed opinions in `[-10, 10]` for the agents outside
/// `candidate`, solves for the candidate's opinions by least squares through
/// the null-space basis and simulates to `horizon`. A `true` result means no
/// trial failed; it is not a proof.
pub fn verify_egc(chain: &Chain, candidate: &[usize], tau: f64, cfg: &VerifyConfig) -> Result<bool> {
    if cfg.trials == 0 {
        return Err(Error::InvalidArgument("verify_egc needs at least one trial".into()));
    }
    let n = chain.n();
    if let Some(&bad) = candidate.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!("agent {} out of range", bad + 1)));
    }
    let report = rank(chain, tau, None)?;
    let b = report.basis.basis.clone();
    let outside: Vec<usize> = (0..n).filter(|i| !candidate.contains(i)).collect();
    let sub = b.select_rows(&outside);
    let transition = phi(chain, cfg.horizon.max(tau), tau)?.matrix;
    let ok = (0..cfg.trials).into_par_iter().all(|trial| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(trial as u64);
        let mut x = DVector::from_element(n, cfg.target);
        for &i in &outside {
            x[i] = rng.random_range(-10.0..=10.0);
        }
        let rhs = DVector::from_iterator(outside.len(), outside.iter().map(|&i| x[i] - cfg.target));
        let (alpha, res) = least_squares(&sub, &rhs);
        if res > cfg.tol {
            return false;
        }
        for &i in candidate {
            x[i] = cfg.target + b.row(i).transpose().dot(&alpha);
        }
        let end = &transition * &x;
        end.add_scalar(-cfg.target).amax() < cfg.tol
    });
    Ok(ok)
}
