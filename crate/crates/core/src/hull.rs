//! Euclidean distance from a point to a convex hull (Wolfe's minimum-norm
//! point algorithm).

use nalgebra::{DMatrix, DVector};

use crate::linalg::least_squares;

const MAX_ITER: usize = 500;

/// Minimum-norm point of `conv(points)`.
pub(crate) fn min_norm_point(points: &[DVector<f64>]) -> DVector<f64> {
    assert!(!points.is_empty(), "convex hull of no points");
    let dim = points[0].len();
    let radius = points.iter().map(|p| p.norm()).fold(0.0, f64::max).max(1e-300);

    let start = (0..points.len())
        .min_by(|&a, &b| points[a].norm_squared().total_cmp(&points[b].norm_squared()))
        .expect("non-empty");
    let mut active = vec![start];
    let mut weights = vec![1.0];
    let mut x = points[start].clone();

    for _ in 0..MAX_ITER {
        let (j, best) = (0..points.len())
            .map(|i| (i, x.dot(&points[i])))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty");
        // `‖x‖ − (x·p_j)/‖x‖` bounds the distance error from above.
        let norm = x.norm();
        if norm <= 1e-15 * radius || x.norm_squared() - best <= 1e-12 * radius * norm || active.contains(&j) {
            break;
        }
        active.push(j);
        weights.push(0.0);

        loop {
            let mu = affine_min_norm(points, &active, dim);
            if mu.iter().all(|&m| m > 1e-15) {
                weights = mu;
                break;
            }
            // Step from `weights` towards `mu` until a weight hits zero.
            let mut theta = 1.0f64;
            for (w, m) in weights.iter().zip(&mu) {
                if *m <= 1e-15 && w - m > 0.0 {
                    theta = theta.min(w / (w - m));
                }
            }
            for (w, m) in weights.iter_mut().zip(&mu) {
                *w = (1.0 - theta) * *w + theta * m;
            }
            let mut k = 0;
            while k < active.len() {
                if weights[k] <= 1e-15 {
                    active.remove(k);
                    weights.remove(k);
                } else {
                    k += 1;
                }
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            if active.len() <= 1 {
                break;
            }
        }
        let next = combine(points, &active, &weights, dim);
        // Stop once a step fails to shrink the norm.
        if next.norm_squared() >= x.norm_squared() {
            break;
        }
        x = next;
    }
    x
}

fn combine(points: &[DVector<f64>], active: &[usize], weights: &[f64], dim: usize) -> DVector<f64> {
    let mut x = DVector::zeros(dim);
    for (&i, &w) in active.iter().zip(weights) {
        x += &points[i] * w;
    }
    x
}

/// Weights of the minimum-norm point of the affine hull of the active points,
/// from a least-squares solve in the coordinates `q_i − q_0`.
fn affine_min_norm(points: &[DVector<f64>], active: &[usize], dim: usize) -> Vec<f64> {
    let k = active.len();
    let q0 = &points[active[0]];
    let mut d = DMatrix::zeros(dim, k - 1);
    for (c, &i) in active[1..].iter().enumerate() {
        d.set_column(c, &(&points[i] - q0));
    }
    let (coef, _) = least_squares(&d, &(-q0));
    let mut mu = Vec::with_capacity(k);
    mu.push(1.0 - coef.sum());
    mu.extend(coef.iter().copied());
    mu
}

/// Euclidean distance from `p` to the convex hull of `others`.
pub(crate) fn distance_to_hull(p: &DVector<f64>, others: &[DVector<f64>]) -> f64 {
    if others.is_empty() {
        return f64::INFINITY;
    }
    let shifted: Vec<DVector<f64>> = others.iter().map(|q| q - p).collect();
    min_norm_point(&shifted).norm()
}
