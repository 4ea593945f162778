//! Polytopes spanned by the rows of `Φ(t, τ)`, ergodicity classes and the
//! uniform column-sum test.
//!
//! The rows of `Φ(t, τ)` are probability vectors. Their convex hulls shrink
//! as `t` grows, and the number of vertices of the limiting polytope equals
//! the rank of the chain.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::{Chain, Tail, TimeMode};
use crate::error::{Error, Result};
use crate::hull::distance_to_hull;
use crate::transition::{csv_error, phi};

/// Default tolerance for the vertex test and duplicate merging.
pub const DEFAULT_TOL_VERTEX: f64 = 1e-6;

/// Default single-linkage threshold for ergodicity classes.
pub const DEFAULT_TOL_CLUSTER: f64 = 1e-6;

/// Tolerance for the nesting check between consecutive polytopes.
pub const NESTING_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolytopeSnapshot {
    pub t: f64,
    pub tau: f64,
    /// Row `i` is point `i`: row `i` of `Φ(t, τ)`.
    #[serde(serialize_with = "crate::json::ser_matrix")]
    pub points: DMatrix<f64>,
    /// 0-based indices of vertex points (lowest index of each merged group).
    #[serde(serialize_with = "crate::json::ser_one_based")]
    pub vertex_indices: Vec<usize>,
    pub vertex_count: usize,
    /// Per point: whether it is a vertex.
    pub vertex_flags: Vec<bool>,
    pub tol_vertex: f64,
}

fn rows(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.row_iter().map(|r| r.transpose()).collect()
}

/// Lowest-index member of each row cluster at `tol` (single linkage, max norm).
fn representatives(m: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    cluster_rows(m, tol).iter().map(|c| c[0]).collect()
}

/// Vertices of `conv(rows of m)`.
fn vertices_of(m: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let points = rows(m);
    let reps = representatives(m, tol);
    reps.iter()
        .copied()
        .filter(|&i| {
            let others: Vec<DVector<f64>> = reps.iter().filter(|&&j| j != i).map(|&j| points[j].clone()).collect();
            distance_to_hull(&points[i], &others) > tol
        })
        .collect()
}

/// The polytope `C_{t,τ}` and its vertices.
pub fn polytope_snapshot(chain: &Chain, t: f64, tau: f64, tol_vertex: f64) -> Result<PolytopeSnapshot> {
    let m = phi(chain, t, tau)?.matrix;
    Ok(snapshot_from(m, t, tau, tol_vertex))
}

fn snapshot_from(m: DMatrix<f64>, t: f64, tau: f64, tol: f64) -> PolytopeSnapshot {
    let vertex_indices = vertices_of(&m, tol);
    let vertex_flags = (0..m.nrows()).map(|i| vertex_indices.contains(&i)).collect();
    PolytopeSnapshot {
        t,
        tau,
        vertex_count: vertex_indices.len(),
        vertex_indices,
        vertex_flags,
        points: m,
        tol_vertex: tol,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub t: f64,
    pub vertex_count: usize,
    /// `NESTING_TOL` minus the largest distance from a point of this
    /// polytope to the previous one; negative values are violations.
    pub min_nesting_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NestingViolation {
    pub t_prev: f64,
    pub t: f64,
    pub point: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VertexTrace {
    pub tau: f64,
    pub entries: Vec<TraceEntry>,
    pub violations: Vec<NestingViolation>,
    #[serde(skip)]
    pub snapshots: Vec<PolytopeSnapshot>,
}

impl VertexTrace {
    pub fn final_count(&self) -> Option<usize> {
        self.entries.last().map(|e| e.vertex_count)
    }

    /// Whether the count is identical at the last two horizons.
    pub fn stabilized(&self) -> bool {
        let n = self.entries.len();
        n >= 2 && self.entries[n - 1].vertex_count == self.entries[n - 2].vertex_count
    }

    /// CSV with header `t,vertex_count,min_nesting_margin`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "vertex_count", "min_nesting_margin"]).map_err(csv_error)?;
        for e in &self.entries {
            w.write_record([
                crate::json::format_f64(e.t),
                e.vertex_count.to_string(),
                crate::json::format_f64(e.min_nesting_margin),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Vertex counts along a horizon schedule, checking that each polytope lies
/// inside the previous one.
pub fn vertex_count_trace(chain: &Chain, tau: f64, schedule: &[f64], tol_vertex: f64) -> Result<VertexTrace> {
    if schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("horizons must be increasing".into()));
    }
    let snapshots = schedule
        .par_iter()
        .map(|&t| polytope_snapshot(chain, t, tau, tol_vertex))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::new();
    let mut violations = Vec::new();
    for (k, snap) in snapshots.iter().enumerate() {
        let mut margin = NESTING_TOL;
        if k > 0 {
            let prev = &snapshots[k - 1];
            let hull = rows(&prev.points);
            for (i, p) in rows(&snap.points).iter().enumerate() {
                let d = distance_to_hull(p, &hull);
                margin = margin.min(NESTING_TOL - d);
                if d > NESTING_TOL {
                    violations.push(NestingViolation { t_prev: prev.t, t: snap.t, point: i, distance: d });
                }
            }
        }
        entries.push(TraceEntry { t: snap.t, vertex_count: snap.vertex_count, min_nesting_margin: margin });
    }
    Ok(VertexTrace { tau, entries, violations, snapshots })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErgodicityClassing {
    /// Partition of the agents (0-based in memory, 1-based in JSON), each
    /// class sorted, classes ordered by their smallest member.
    #[serde(serialize_with = "ser_classes")]
    pub classes: Vec<Vec<usize>>,
    pub converged: bool,
    pub horizon_used: f64,
    pub tol_cluster: f64,
}

fn ser_classes<S: serde::Serializer>(c: &[Vec<usize>], s: S) -> std::result::Result<S::Ok, S::Error> {
    let shifted: Vec<Vec<usize>> = c.iter().map(|k| k.iter().map(|i| i + 1).collect()).collect();
    shifted.serialize(s)
}

/// Single-linkage clusters of the rows of `m` under the max norm.
pub fn cluster_rows(m: &DMatrix<f64>, tol: f64) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (m.row(i) - m.row(j)).amax();
            if d < tol {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut classes: Vec<Vec<usize>> = Vec::new();
    let mut root_of: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        match root_of[r] {
            Some(k) => classes[k].push(i),
            None => {
                root_of[r] = Some(classes.len());
                classes.push(vec![i]);
            }
        }
    }
    classes
}

/// Agents whose rows of `Φ(t, τ)` coincide in the limit.
pub fn ergodicity_classes(chain: &Chain, tau: f64, schedule: &[f64], tol_cluster: f64) -> Result<ErgodicityClassing> {
    if schedule.is_empty() {
        return Err(Error::ScheduleTooShort { needed: 1, got: 0 });
    }
    let parts = schedule
        .par_iter()
        .map(|&t| phi(chain, t, tau).map(|p| cluster_rows(&p.matrix, tol_cluster)))
        .collect::<Result<Vec<_>>>()?;
    let k = parts.len();
    let converged = k >= 2 && parts[k - 1] == parts[k - 2];
    Ok(ErgodicityClassing {
        classes: parts[k - 1].clone(),
        converged,
        horizon_used: schedule[k - 1],
        tol_cluster,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PStarVerdict {
    InClass,
    NotInClass,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PStarCheck {
    pub verdict: PStarVerdict,
    pub min_column_sum: f64,
    /// Smallest diagonal entry over the one-segment transitions of the tail.
    pub min_tail_diagonal: f64,
    /// Minimum column sum at each probed horizon fraction (1/8, 1/4, 1/2, 1).
    pub min_by_horizon: Vec<f64>,
}

/// Three-valued test for uniformly bounded-below column sums of `Φ(t, τ)`.
///
/// For each `τ` in the grid, `t` runs over `τ + horizon·{1/8, 1/4, 1/2, 1}`.
pub fn class_pstar_check(chain: &Chain, tau_grid: &[f64], horizon: f64, threshold: f64) -> Result<PStarCheck> {
    let fractions = [0.125, 0.25, 0.5, 1.0];
    let mut by_horizon = vec![f64::INFINITY; fractions.len()];
    for &tau in tau_grid {
        for (k, f) in fractions.iter().enumerate() {
            let mut t = tau + horizon * f;
            if chain.mode() == TimeMode::Discrete {
                t = t.ceil();
            }
            let p = phi(chain, t, tau)?.matrix;
            let min_col = p.row_sum().iter().copied().fold(f64::INFINITY, f64::min);
            by_horizon[k] = by_horizon[k].min(min_col);
        }
    }
    let min_column_sum = by_horizon.iter().copied().fold(f64::INFINITY, f64::min);
    let min_tail_diagonal = match chain.tail() {
        Tail::Zero => 1.0,
        Tail::Periodic(block) => block
            .iter()
            .map(|seg| crate::transition::piece_transition(chain.mode(), &crate::chain::Segment::new(
                if chain.mode() == TimeMode::Discrete { 1.0 } else { seg.duration },
                seg.matrix.clone(),
            )))
            .map(|m| m.diagonal().min())
            .fold(f64::INFINITY, f64::min),
    };
    let decreasing = by_horizon.windows(2).all(|w| w[1] <= w[0]) && by_horizon[by_horizon.len() - 1] < by_horizon[0];
    let verdict = if min_column_sum > threshold && min_tail_diagonal > 0.0 {
        PStarVerdict::InClass
    } else if min_column_sum < threshold / 10.0 && decreasing {
        PStarVerdict::NotInClass
    } else {
        PStarVerdict::Inconclusive
    };
    Ok(PStarCheck { verdict, min_column_sum, min_tail_diagonal, min_by_horizon: by_horizon })
}
