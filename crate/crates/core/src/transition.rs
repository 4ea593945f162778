//! State transition matrices `Φ(t, τ)` and opinion trajectories.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::{Chain, Segment, Tail, TimeMode};
use crate::error::{Error, Result};
use crate::linalg::{intensity_exp, stochastic_power};

/// Row-sum drift above which a computed `Φ` is renormalized (and logged).
pub const DRIFT_TOL: f64 = 1e-10;

/// Number of horizon doublings in [`default_schedule`].
pub const DEFAULT_DOUBLINGS: u32 = 7;

/// Tail periods covered by the first horizon of [`default_schedule`].
pub const DEFAULT_PERIODS: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransitionMatrix {
    #[serde(serialize_with = "crate::json::ser_matrix")]
    pub matrix: DMatrix<f64>,
    pub t: f64,
    pub tau: f64,
    pub mode: TimeMode,
}

/// Transition over one constant piece.
pub(crate) fn piece_transition(mode: TimeMode, seg: &Segment) -> DMatrix<f64> {
    match mode {
        TimeMode::Continuous => intensity_exp(&seg.matrix, seg.duration),
        TimeMode::Discrete => stochastic_power(&seg.matrix, seg.duration.round() as u64),
    }
}

/// Product of the transitions of `pieces`, earliest piece rightmost.
fn product(mode: TimeMode, n: usize, pieces: &[Segment]) -> DMatrix<f64> {
    pieces
        .iter()
        .fold(DMatrix::identity(n, n), |acc, seg| piece_transition(mode, seg) * acc)
}

/// Transition over one full period of the tail block.
pub fn monodromy(chain: &Chain) -> Result<DMatrix<f64>> {
    match chain.tail() {
        Tail::Zero => Err(Error::NotPeriodic),
        Tail::Periodic(block) => Ok(product(chain.mode(), chain.n(), block)),
    }
}

/// `Φ(t, τ)`, the map carrying opinions at `τ` to opinions at `t`.
///
/// Whole tail periods are collapsed into a power of the monodromy matrix, so
/// very large `t` costs only a logarithmic number of products.
///
/// ```
/// use egc::chain::{Chain, TimeMode};
/// use egc::transition::phi;
/// use nalgebra::DMatrix;
///
/// let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0 / 3.0, -1.0, 2.0 / 3.0, 0.0, 0.0, 0.0]);
/// let chain = Chain::constant(TimeMode::Continuous, a).unwrap();
/// let p = phi(&chain, 100.0, 0.0).unwrap();
/// assert!((p.matrix[(1, 2)] - 2.0 / 3.0).abs() < 1e-12);
/// ```
pub fn phi(chain: &Chain, t: f64, tau: f64) -> Result<TransitionMatrix> {
    chain.check_time(tau)?;
    chain.check_time(t)?;
    if t < tau {
        return Err(Error::TimeOrder { t, tau });
    }
    let mode = chain.mode();
    let n = chain.n();
    let pe = chain.prefix_end();
    let mut m = product(mode, n, &chain.pieces(tau, t.min(pe)));
    if t > pe {
        if let Tail::Periodic(block) = chain.tail() {
            let period = chain.period().expect("periodic tail");
            let start = tau.max(pe);
            let cycles_before = ((start - pe) / period).floor();
            let cycle_origin = pe + cycles_before * period;
            let first_end = (cycle_origin + period).min(t);
            m = product(mode, n, &chain.pieces(start, first_end)) * m;
            if t > first_end {
                let whole = ((t - first_end) / period).floor();
                if whole >= 1.0 {
                    let mono = product(mode, n, block);
                    m = stochastic_power(&mono, whole as u64) * m;
                }
                let rest_start = first_end + whole * period;
                if t > rest_start {
                    // re-anchor the last partial period at the beginning of a cycle
                    let offset = pe + ((rest_start - pe) / period).round() * period;
                    let len = (t - rest_start).min(period);
                    m = product(mode, n, &chain.pieces(offset, offset + len)) * m;
                }
            }
        }
    }
    repair_drift(&mut m, t, tau);
    Ok(TransitionMatrix { matrix: m, t, tau, mode })
}

fn repair_drift(m: &mut DMatrix<f64>, t: f64, tau: f64) {
    let drift = m
        .row_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    if drift > DRIFT_TOL {
        log::warn!("renormalizing Φ({}, {}): row-sum drift {:e}", t, tau, drift);
        for mut row in m.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
    }
}

/// Sampled opinions `x(t) = Φ(t, t0) x0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    /// CSV with header `t,x1,...,xN` and 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.states.first().map_or(0, |s| s.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{}", i)));
        w.write_record(&header).map_err(csv_error)?;
        for (t, x) in self.times.iter().zip(&self.states) {
            let mut rec = vec![crate::json::format_f64(*t)];
            rec.extend(x.iter().map(|v| crate::json::format_f64(*v)));
            w.write_record(&rec).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Opinions at each sample time, starting from `x0` at `t0`.
pub fn simulate(chain: &Chain, x0: &DVector<f64>, t0: f64, sample_times: &[f64]) -> Result<Trajectory> {
    if x0.len() != chain.n() {
        return Err(Error::DimensionMismatch { expected: chain.n(), found: x0.len() });
    }
    match sample_times.first() {
        Some(&first) if first == t0 => {}
        _ => {
            return Err(Error::InvalidArgument("the first sample time must equal t0".into()));
        }
    }
    if sample_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("sample times must be increasing".into()));
    }
    let states = sample_times
        .par_iter()
        .map(|&t| phi(chain, t, t0).map(|p| p.matrix * x0))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { times: sample_times.to_vec(), states })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LimitEstimate {
    #[serde(serialize_with = "crate::json::ser_matrix")]
    pub matrix: DMatrix<f64>,
    pub horizons: Vec<f64>,
    /// Max-norm change between consecutive horizons.
    pub deltas: Vec<f64>,
}

/// `Φ(T, τ)` at the last horizon plus the change between consecutive
/// horizons. Judging convergence is left to the caller.
pub fn limit_phi(chain: &Chain, tau: f64, schedule: &[f64]) -> Result<LimitEstimate> {
    if schedule.is_empty() {
        return Err(Error::ScheduleTooShort { needed: 1, got: 0 });
    }
    if schedule.iter().any(|&t| t < tau) || schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("horizons must be increasing and not before tau".into()));
    }
    let mats = schedule
        .par_iter()
        .map(|&t| phi(chain, t, tau).map(|p| p.matrix))
        .collect::<Result<Vec<_>>>()?;
    let deltas = mats
        .windows(2)
        .map(|w| crate::linalg::max_abs(&(&w[1] - &w[0])))
        .collect();
    Ok(LimitEstimate {
        matrix: mats.last().expect("non-empty").clone(),
        horizons: schedule.to_vec(),
        deltas,
    })
}

/// Doubling horizons `τ + span·2^j`, `j = 0..=7`, where `span` covers the
/// rest of the prefix plus eight tail periods (one time unit for a zero tail).
pub fn default_schedule(chain: &Chain, tau: f64) -> Vec<f64> {
    let rest = (chain.prefix_end() - tau).max(0.0);
    let span = rest + chain.period().map_or(1.0, |l| DEFAULT_PERIODS * l);
    (0..=DEFAULT_DOUBLINGS)
        .map(|j| {
            let t = tau + span * 2f64.powi(j as i32);
            match chain.mode() {
                TimeMode::Discrete => t.ceil(),
                TimeMode::Continuous => t,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn follower() -> Chain {
        Chain::constant(
            TimeMode::Continuous,
            DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0 / 3.0, -1.0, 2.0 / 3.0, 0.0, 0.0, 0.0]),
        )
        .unwrap()
    }

    fn piecewise() -> Chain {
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.7, 0.3, 0.2, -0.2, 0.0, 0.5, 0.5, -1.0]);
        let b = DMatrix::from_row_slice(3, 3, &[-0.1, 0.0, 0.1, 1.5, -2.0, 0.5, 0.0, 0.3, -0.3]);
        let c = DMatrix::from_row_slice(3, 3, &[-2.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.4, 0.0, -0.4]);
        Chain::new(
            TimeMode::Continuous,
            3,
            vec![Segment::new(0.8, a.clone()), Segment::new(1.7, b.clone())],
            Tail::Periodic(vec![Segment::new(0.6, c), Segment::new(0.9, a), Segment::new(0.25, b)]),
        )
        .unwrap()
    }

    #[test]
    fn identity_at_equal_times() {
        let c = piecewise();
        for &t in &[0.0, 0.8, 3.3, 40.0] {
            assert_eq!(phi(&c, t, t).unwrap().matrix, DMatrix::identity(3, 3));
        }
    }

    #[test]
    fn follower_limit_matches_closed_form() {
        let p = phi(&follower(), 100.0, 0.0).unwrap().matrix;
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 1.0 / 3.0, 0.0, 2.0 / 3.0, 0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(p, expected, epsilon = 1e-12);
        // exact at finite time: Φ22 = e^{-t}
        let p1 = phi(&follower(), 1.0, 0.0).unwrap().matrix;
        let e = (-1.0f64).exp();
        assert_abs_diff_eq!(p1[(1, 1)], e, epsilon = 1e-15);
        assert_abs_diff_eq!(p1[(1, 0)], (1.0 - e) / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn semigroup_across_prefix_and_tail() {
        let c = piecewise();
        let lhs = phi(&c, 7.0, 1.0).unwrap().matrix;
        let rhs = phi(&c, 7.0, 3.0).unwrap().matrix * phi(&c, 3.0, 1.0).unwrap().matrix;
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn tail_powering_matches_direct_product() {
        let c = piecewise();
        let fast = phi(&c, 61.3, 0.4).unwrap().matrix;
        let direct = product(TimeMode::Continuous, 3, &c.pieces(0.4, 61.3));
        assert_abs_diff_eq!(fast, direct, epsilon = 1e-12);

        let d = Chain::new(
            TimeMode::Discrete,
            2,
            vec![Segment::new(2.0, DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 1.0]))],
            Tail::Periodic(vec![
                Segment::new(3.0, DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.25, 0.75])),
                Segment::new(1.0, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])),
            ]),
        )
        .unwrap();
        let fast = phi(&d, 43.0, 1.0).unwrap().matrix;
        let mut slow = DMatrix::identity(2, 2);
        for s in 1..43 {
            slow = d.evaluate_at(s as f64).unwrap() * slow;
        }
        assert_abs_diff_eq!(fast, slow, epsilon = 1e-13);
    }

    #[test]
    fn rows_stay_stochastic() {
        let c = piecewise();
        for &(t, tau) in &[(5.0, 0.0), (1e6, 2.0), (1e9, 0.0)] {
            let p = phi(&c, t, tau).unwrap().matrix;
            for r in p.row_iter() {
                assert!((r.sum() - 1.0).abs() < 1e-10);
                assert!(r.iter().all(|&x| x > -1e-10));
            }
        }
    }

    #[test]
    fn time_errors() {
        let c = follower();
        assert!(matches!(phi(&c, 1.0, 2.0), Err(Error::TimeOrder { .. })));
        assert!(matches!(phi(&c, 1.0, -2.0), Err(Error::NegativeTime(_))));
    }

    #[test]
    fn follower_trajectory_limit() {
        let x0 = DVector::from_vec(vec![4.0, -1.0, 10.0]);
        let tr = simulate(&follower(), &x0, 0.0, &[0.0, 1.0, 50.0]).unwrap();
        assert_eq!(tr.states[0], x0);
        let last = &tr.states[2];
        assert_abs_diff_eq!(last[1], (4.0 + 20.0) / 3.0, epsilon = 1e-12);
        assert_eq!(last[0], 4.0);
    }

    #[test]
    fn csv_has_header_and_full_precision() {
        let x0 = DVector::from_vec(vec![1.0 / 3.0, 1.0, 2.0]);
        let tr = simulate(&follower(), &x0, 0.0, &[0.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x1,x2,x3");
        assert!(lines.next().unwrap().contains("3.3333333333333331e-1"));
    }

    #[test]
    fn zero_tail_limit_deltas_vanish() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.5, -0.5]);
        let c = Chain::new(TimeMode::Continuous, 2, vec![Segment::new(2.0, a)], Tail::Zero).unwrap();
        let est = limit_phi(&c, 0.0, &[2.0, 4.0, 8.0]).unwrap();
        assert_eq!(est.deltas, vec![0.0, 0.0]);
    }

    #[test]
    fn periodic_deltas_decay_at_subdominant_rate() {
        // Positive two-step block; deltas between horizons 2k and 2k+2 shrink by |λ2|.
        let a = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.2, 0.8]);
        let b = DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.1, 0.9]);
        let c = Chain::new(
            TimeMode::Discrete,
            2,
            vec![],
            Tail::Periodic(vec![Segment::new(1.0, a.clone()), Segment::new(1.0, b.clone())]),
        )
        .unwrap();
        let horizons: Vec<f64> = (1..=8).map(|k| 2.0 * k as f64).collect();
        let est = limit_phi(&c, 0.0, &horizons).unwrap();
        let m = &b * &a;
        // 2x2 stochastic: second eigenvalue = trace - 1
        let lambda2 = (m.trace() - 1.0).abs();
        for w in est.deltas.windows(2) {
            assert_abs_diff_eq!(w[1] / w[0], lambda2, epsilon = 1e-9);
        }
    }

    #[test]
    fn huge_horizon_returns() {
        let p = phi(&piecewise(), 1.3e19, 0.4).unwrap().matrix;
        assert!(p.row_iter().all(|r| (r.sum() - 1.0).abs() < 1e-9));
    }
}
