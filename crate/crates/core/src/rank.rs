//! Null space, nullity and rank of a chain.
//!
//! `Null_τ` is the set of initial vectors `v` with `Φ(t, τ) v → 0`. Time-
//! invariant and periodic-tail chains get exact answers from the spectrum of
//! `Â` or of the monodromy matrix; everything else is read off singular values
//! of `Φ(T, τ)` at a doubling sequence of horizons.

use nalgebra::{Complex, DMatrix};
use serde::Serialize;

use crate::chain::{Chain, Tail, TimeMode};
use crate::error::{Error, Result};
use crate::linalg::{self, invariant_subspace, max_abs, subspace_gap, svd};
use crate::transition::{default_schedule, monodromy, phi};

/// Default singular-value threshold for the numerical method.
pub const DEFAULT_TOL: f64 = 1e-6;

/// Relative tolerance used by the exact methods.
pub const EXACT_TOL: f64 = 1e-10;

/// Principal-angle bound (sine) for declaring the numerical basis converged.
pub const ANGLE_TOL: f64 = 1e-6;

/// Eigenvalues with modulus below `1 - STABLE_MARGIN` are stable.
pub const STABLE_MARGIN: f64 = 1e-10;

/// Eigenvalues with modulus above `1 - UNIT_MARGIN` are on the unit circle.
pub const UNIT_MARGIN: f64 = 1e-11;

/// Upper bound on horizon doublings while verifying an exact basis.
const MAX_VERIFY_DOUBLINGS: u32 = 40;

/// Upper bound on the τ scan that locates discrete stabilization.
const MAX_STABILIZATION_SCAN: f64 = 256.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    ExactTi,
    ExactPeriodic,
    NumericalHorizon,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NullSpaceBasis {
    pub tau: f64,
    /// `N × k` matrix with orthonormal columns spanning `Null_τ`.
    #[serde(serialize_with = "crate::json::ser_matrix")]
    pub basis: DMatrix<f64>,
    pub method: RankMethod,
    pub tolerance: f64,
    /// Horizon `T` at which `‖Φ(T, τ) B‖_max` was checked.
    pub horizon_used: f64,
    /// `‖Φ(T, τ) B‖_max` at `horizon_used`.
    pub residual: f64,
}

impl NullSpaceBasis {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Bound that `residual` must respect: ten times the tolerance.
    pub fn verification_tolerance(&self) -> f64 {
        10.0 * self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankReport {
    pub rank: usize,
    /// `Nullity(A)`. In discrete mode this is the limit over `τ`.
    pub nullity: usize,
    /// `dim Null_τ` at the requested `τ`; equals `nullity` in continuous mode.
    pub local_nullity: usize,
    pub method: RankMethod,
    pub tolerance: f64,
    pub converged: bool,
    /// Singular values of `Φ(T, τ)` at the final horizon (numerical method).
    pub singular_values: Vec<f64>,
    pub horizons: Vec<f64>,
    /// Discrete mode: first `τ` at which `dim Null_τ` was seen to equal the
    /// limiting nullity. Observed, not proven.
    pub stabilization_tau: Option<f64>,
    pub basis: NullSpaceBasis,
}

/// Null space read from SVDs of `Φ(T, τ)` along a horizon schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NumericalNullSpace {
    pub basis: NullSpaceBasis,
    pub singular_values: Vec<f64>,
    /// Number of sub-threshold singular values at each horizon.
    pub counts: Vec<usize>,
    /// Sine of the largest principal angle between the last two bases.
    pub final_gap: f64,
    pub converged: bool,
}

/// Null directions are right singular vectors of `Φ(T, τ)` with singular
/// value below `tol`. The result is converged when the last two horizons
/// agree on the count and the subspaces are within [`ANGLE_TOL`].
pub fn nullspace_numerical(chain: &Chain, tau: f64, tol: f64, schedule: &[f64]) -> Result<NumericalNullSpace> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::InvalidArgument(format!("tolerance must lie in (0, 1), got {}", tol)));
    }
    if schedule.len() < 2 {
        return Err(Error::ScheduleTooShort { needed: 2, got: schedule.len() });
    }
    if schedule.iter().any(|&t| t < tau) || schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("horizons must be increasing and not before tau".into()));
    }
    use rayon::prelude::*;
    let per_horizon = schedule
        .par_iter()
        .map(|&t| {
            let p = phi(chain, t, tau)?.matrix;
            let d = svd(&p);
            let k = d.singular_values.iter().filter(|&&s| s < tol).count();
            let n = p.ncols();
            let basis = d.v.columns(n - k, k).into_owned();
            Ok((d.singular_values, basis, p))
        })
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<usize> = per_horizon.iter().map(|(_, b, _)| b.ncols()).collect();
    let (prev, last) = (&per_horizon[per_horizon.len() - 2], &per_horizon[per_horizon.len() - 1]);
    let final_gap = subspace_gap(&prev.1, &last.1);
    let converged = prev.1.ncols() == last.1.ncols() && final_gap < ANGLE_TOL;
    let horizon = *schedule.last().expect("non-empty");
    let residual = max_abs(&(&last.2 * &last.1));
    Ok(NumericalNullSpace {
        basis: NullSpaceBasis {
            tau,
            basis: last.1.clone(),
            method: RankMethod::NumericalHorizon,
            tolerance: tol,
            horizon_used: horizon,
            residual,
        },
        singular_values: last.0.clone(),
        counts,
        final_gap,
        converged,
    })
}

/// Exact rank of a time-invariant chain.
///
/// Continuous: `Rank = nullity(Â)`, with `Null_τ` the invariant subspace of
/// the eigenvalues of `Â` with negative real part. Discrete: the nullity is
/// the number of eigenvalues strictly inside the unit disk.
pub fn rank_exact_ti(chain: &Chain) -> Result<RankReport> {
    let a = chain.time_invariant().ok_or(Error::NotTimeInvariant)?;
    let n = chain.n();
    match chain.mode() {
        TimeMode::Continuous => {
            let sv = svd(&a).singular_values;
            let top = sv.first().copied().unwrap_or(0.0);
            let rank = sv.iter().filter(|&&s| s <= EXACT_TOL * top || top == 0.0).count();
            let nullity = n - rank;
            let basis = stable_generator_subspace(&a, nullity)?;
            let verified = verify(chain, 0.0, &basis, EXACT_TOL)?;
            Ok(RankReport {
                rank,
                nullity,
                local_nullity: nullity,
                method: RankMethod::ExactTi,
                tolerance: EXACT_TOL,
                converged: true,
                singular_values: Vec::new(),
                horizons: Vec::new(),
                stabilization_tau: None,
                basis: NullSpaceBasis {
                    tau: 0.0,
                    basis,
                    method: RankMethod::ExactTi,
                    tolerance: EXACT_TOL,
                    horizon_used: verified.0,
                    residual: verified.1,
                },
            })
        }
        TimeMode::Discrete => {
            let mut report = exact_from_monodromy(chain, &a, 0.0, next_boundary(chain, 0.0))?;
            report.method = RankMethod::ExactTi;
            report.basis.method = RankMethod::ExactTi;
            Ok(report)
        }
    }
}

/// The `k` eigen-directions of `a` with the most negative real parts.
fn stable_generator_subspace(a: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if k == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    let mut re: Vec<f64> = linalg::eigenvalues(a)?.iter().map(|l| l.re).collect();
    re.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    let cut = if k >= n { f64::INFINITY } else { 0.5 * (re[k - 1] + re[k]) };
    Ok(invariant_subspace(a, |l: Complex<f64>| l.re < cut)?.0)
}

/// Exact rank of a chain with a periodic tail.
///
/// With `M` the monodromy matrix and `W` its stable invariant subspace,
/// `Null_τ` is the preimage of `W` under the transition from `τ` to the next
/// tail-cycle boundary.
pub fn rank_exact_periodic(chain: &Chain, tau: f64) -> Result<RankReport> {
    let m = monodromy(chain)?;
    let boundary = next_boundary(chain, tau);
    exact_from_monodromy(chain, &m, tau, boundary)
}

/// First tail-cycle boundary at or after `t`.
fn next_boundary(chain: &Chain, t: f64) -> f64 {
    let pe = chain.prefix_end();
    if t <= pe {
        return pe;
    }
    match chain.period() {
        Some(l) => pe + ((t - pe) / l).ceil() * l,
        None => t,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Modulus {
    Stable,
    Unit,
}

fn classify(l: Complex<f64>) -> Result<Modulus> {
    let r = l.norm();
    if r < 1.0 - STABLE_MARGIN {
        Ok(Modulus::Stable)
    } else if (l - Complex::new(1.0, 0.0)).norm() <= STABLE_MARGIN || r >= 1.0 - UNIT_MARGIN {
        Ok(Modulus::Unit)
    } else {
        Err(Error::MarginalSpectrum { modulus: r })
    }
}

fn stable_subspace(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    for l in linalg::eigenvalues(m)? {
        classify(l)?;
    }
    Ok(invariant_subspace(m, |l| matches!(classify(l), Ok(Modulus::Stable)))?.0)
}

/// Shared exact path: `m` is the one-period transition starting at `boundary`.
fn exact_from_monodromy(chain: &Chain, m: &DMatrix<f64>, tau: f64, boundary: f64) -> Result<RankReport> {
    let n = chain.n();
    let w = stable_subspace(m)?;
    let nullity = w.ncols();
    let local = preimage(chain, &w, tau, boundary)?;
    let local_nullity = local.ncols();
    let stabilization_tau = match chain.mode() {
        TimeMode::Discrete => Some(stabilization(tau, chain.prefix_end(), nullity, |t| {
            preimage(chain, &w, t, next_boundary(chain, t)).map(|p| p.ncols())
        })?),
        TimeMode::Continuous => None,
    };
    let verified = verify(chain, tau, &local, EXACT_TOL)?;
    Ok(RankReport {
        rank: n - nullity,
        nullity,
        local_nullity,
        method: RankMethod::ExactPeriodic,
        tolerance: EXACT_TOL,
        converged: true,
        singular_values: Vec::new(),
        horizons: Vec::new(),
        stabilization_tau,
        basis: NullSpaceBasis {
            tau,
            basis: local,
            method: RankMethod::ExactPeriodic,
            tolerance: EXACT_TOL,
            horizon_used: verified.0,
            residual: verified.1,
        },
    })
}

/// `{v : Φ(boundary, τ) v ∈ span(w)}` as an orthonormal basis.
fn preimage(chain: &Chain, w: &DMatrix<f64>, tau: f64, boundary: f64) -> Result<DMatrix<f64>> {
    let n = chain.n();
    let g = phi(chain, boundary, tau)?.matrix;
    let projector = DMatrix::identity(n, n) - w * w.transpose();
    let d = svd(&(projector * &g));
    let k = match chain.mode() {
        // G is invertible, so the preimage has exactly dim W directions.
        TimeMode::Continuous => w.ncols(),
        TimeMode::Discrete => d.singular_values.iter().filter(|&&s| s < EXACT_TOL).count(),
    };
    Ok(d.v.columns(n - k, k).into_owned())
}

/// First integer `τ' ≥ τ` (binary search up to the tail start, capped) at
/// which `dim Null_τ'` reaches `target`.
fn stabilization(tau: f64, tail_start: f64, target: usize, dim_at: impl Fn(f64) -> Result<usize>) -> Result<f64> {
    let mut lo = tau.ceil();
    let mut hi = tail_start.max(lo).min(lo + MAX_STABILIZATION_SCAN);
    if dim_at(lo)? <= target {
        return Ok(lo);
    }
    if dim_at(hi)? > target {
        return Ok(hi);
    }
    while hi - lo > 1.0 {
        let mid = ((lo + hi) / 2.0).floor();
        if dim_at(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Doubles a horizon until `‖Φ(T, τ) B‖_max < 10·tol`; returns `(T, residual)`
/// at the last horizon tried.
fn verify(chain: &Chain, tau: f64, basis: &DMatrix<f64>, tol: f64) -> Result<(f64, f64)> {
    let first = default_schedule(chain, tau)[0];
    let span = first - tau;
    let mut horizon = first;
    let mut residual = f64::INFINITY;
    for j in 0..=MAX_VERIFY_DOUBLINGS {
        horizon = tau + span * 2f64.powi(j as i32);
        if basis.ncols() == 0 {
            return Ok((horizon, 0.0));
        }
        let p = phi(chain, horizon, tau)?.matrix;
        residual = max_abs(&(p * basis));
        if residual < 10.0 * tol {
            break;
        }
    }
    Ok((horizon, residual))
}

/// Rank of any chain: exact for time-invariant and periodic-tail chains,
/// numerical with tolerance `tol` otherwise.
///
/// ```
/// use egc::chain::{Chain, TimeMode};
/// use egc::rank::rank;
/// use nalgebra::DMatrix;
///
/// let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0 / 3.0, -1.0, 2.0 / 3.0, 0.0, 0.0, 0.0]);
/// let chain = Chain::constant(TimeMode::Continuous, a).unwrap();
/// let report = rank(&chain, 0.0, None).unwrap();
/// assert_eq!((report.rank, report.nullity), (2, 1));
/// ```
pub fn rank(chain: &Chain, tau: f64, tol: Option<f64>) -> Result<RankReport> {
    chain.check_time(tau)?;
    let continuous = chain.mode() == TimeMode::Continuous;
    if chain.time_invariant().is_some() && (continuous || tau == 0.0) {
        let mut r = rank_exact_ti(chain)?;
        r.basis.tau = tau;
        return Ok(r);
    }
    if matches!(chain.tail(), Tail::Periodic(_)) {
        return rank_exact_periodic(chain, tau);
    }
    rank_numerical(chain, tau, tol.unwrap_or(DEFAULT_TOL))
}

/// Numerical rank along the default schedule.
pub fn rank_numerical(chain: &Chain, tau: f64, tol: f64) -> Result<RankReport> {
    let schedule = default_schedule(chain, tau);
    let local = nullspace_numerical(chain, tau, tol, &schedule)?;
    let n = chain.n();
    let (nullity, converged, stabilization_tau) = match chain.mode() {
        TimeMode::Continuous => (local.basis.dim(), local.converged, None),
        TimeMode::Discrete => {
            let tail_start = chain.prefix_end().ceil();
            let late = tau.max(tail_start);
            let limit = if late == tau {
                local.clone()
            } else {
                nullspace_numerical(chain, late, tol, &default_schedule(chain, late))?
            };
            let target = limit.basis.dim();
            let stab = stabilization(tau, tail_start, target, |t| {
                nullspace_numerical(chain, t, tol, &default_schedule(chain, t)).map(|r| r.basis.dim())
            })?;
            (target, local.converged && limit.converged, Some(stab))
        }
    };
    Ok(RankReport {
        rank: n - nullity,
        nullity,
        local_nullity: local.basis.dim(),
        method: RankMethod::NumericalHorizon,
        tolerance: tol,
        converged,
        singular_values: local.singular_values.clone(),
        horizons: schedule,
        stabilization_tau,
        basis: local.basis,
    })
}

/// Dimension of the set of initial vectors that reach consensus:
/// `rank [B | 1]`, which equals `Nullity + 1`.
pub fn consensus_set_dimension(chain: &Chain, tau: f64) -> Result<usize> {
    let report = rank(chain, tau, None)?;
    let b = &report.basis.basis;
    let n = chain.n();
    let mut aug = DMatrix::zeros(n, b.ncols() + 1);
    aug.view_mut((0, 0), (n, b.ncols())).copy_from(b);
    aug.column_mut(b.ncols()).fill(1.0);
    Ok(linalg::numerical_rank(&aug, 1e-8))
}
