//! Dense linear-algebra kernels shared by the analysis modules.
//!
//! Everything here works on small dense `nalgebra` matrices (a few dozen
//! agents at most). The matrix exponential is a Padé(13) scaling-and-squaring
//! implementation; invariant subspaces come from a reordered complex Schur
//! form so that defective spectra are handled without eigenvectors.

use nalgebra::{Complex, DMatrix, DVector};
use crate::error::{Error, Result};

/// Padé(13,13) numerator coefficients for `exp`.
const PADE13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

/// Largest 1-norm for which Padé(13) alone meets double-precision backward error.
const THETA13: f64 = 5.371_920_351_148_152;

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

fn scaling_exponent(norm: f64) -> u32 {
    if norm <= THETA13 {
        0
    } else {
        (norm / THETA13).log2().ceil().max(0.0) as u32
    }
}

fn pade13(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let b = &PADE13;
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;

    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];

    let p = &v + &u;
    let q = &v - &u;
    // q is well conditioned for ||a||_1 <= THETA13
    q.lu().solve(&p).expect("Padé denominator is nonsingular")
}

/// Matrix exponential by scaling and squaring with a diagonal Padé(13)
/// approximant.
///
/// ```
/// use egc::linalg::expm;
/// use nalgebra::DMatrix;
///
/// let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
/// let r = expm(&(a * std::f64::consts::FRAC_PI_2));
/// assert!((r[(0, 1)] - 1.0).abs() < 1e-14);
/// assert!(r[(0, 0)].abs() < 1e-14);
/// ```
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm requires a square matrix");
    if a.nrows() == 0 {
        return a.clone();
    }
    let s = scaling_exponent(norm1(a));
    let scaled = a / 2f64.powi(s as i32);
    let mut r = pade13(&scaled);
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// `exp(a * duration)` for an intensity matrix `a` (zero row sums,
/// non-negative off-diagonal entries).
///
/// The exact result is row-stochastic, so each squaring step re-imposes unit
/// row sums. Without that correction the row-sum error of the Padé stage
/// doubles on every squaring, which is visible for durations around `1e9`.
pub fn intensity_exp(a: &DMatrix<f64>, duration: f64) -> DMatrix<f64> {
    let scaled = a * duration;
    let s = scaling_exponent(norm1(&scaled));
    let mut r = pade13(&(scaled / 2f64.powi(s as i32)));
    // Entry (i, j) of the exact result is positive iff j is reachable from i
    // along positive off-diagonal rates, and zero otherwise. Imposing that
    // pattern keeps roundoff out of the structural zeros, where squaring
    // would otherwise amplify it by 2^s.
    let reach = reachability(a);
    for i in 0..r.nrows() {
        for j in 0..r.ncols() {
            if !reach[i * r.ncols() + j] || r[(i, j)] < 0.0 {
                r[(i, j)] = 0.0;
            }
        }
    }
    normalize_rows(&mut r);
    for _ in 0..s {
        r = &r * &r;
        normalize_rows(&mut r);
    }
    r
}

/// Reflexive-transitive closure of the positive off-diagonal pattern,
/// row-major.
fn reachability(a: &DMatrix<f64>) -> Vec<bool> {
    let n = a.nrows();
    let mut reach = vec![false; n * n];
    for i in 0..n {
        reach[i * n + i] = true;
        for j in 0..n {
            if i != j && a[(i, j)] > 0.0 {
                reach[i * n + j] = true;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i * n + k] {
                for j in 0..n {
                    if reach[k * n + j] {
                        reach[i * n + j] = true;
                    }
                }
            }
        }
    }
    reach
}

fn normalize_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let sum: f64 = row.iter().sum();
        if sum != 0.0 && sum.is_finite() {
            row /= sum;
        }
    }
}

/// `m^k` by binary powering.
pub fn matrix_power(m: &DMatrix<f64>, mut k: u64) -> DMatrix<f64> {
    let n = m.nrows();
    let mut result = DMatrix::<f64>::identity(n, n);
    let mut base = m.clone();
    while k > 0 {
        if k & 1 == 1 {
            result = &base * &result;
        }
        k >>= 1;
        if k > 0 {
            base = &base * &base;
        }
    }
    result
}

/// `m^k` for a row-stochastic `m`. Row sums are reset to one after every
/// product.
pub fn stochastic_power(m: &DMatrix<f64>, mut k: u64) -> DMatrix<f64> {
    let n = m.nrows();
    let mut result = DMatrix::<f64>::identity(n, n);
    let mut base = m.clone();
    while k > 0 {
        if k & 1 == 1 {
            result = &base * &result;
            normalize_rows(&mut result);
        }
        k >>= 1;
        if k > 0 {
            base = &base * &base;
            normalize_rows(&mut base);
        }
    }
    result
}

/// Singular value decomposition with singular values in descending order and
/// right singular vectors stored as the columns of `v`.
pub(crate) struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

pub(crate) fn svd(m: &DMatrix<f64>) -> Svd {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Svd {
            u: DMatrix::zeros(r, 0),
            singular_values: Vec::new(),
            v: DMatrix::zeros(c, 0),
        };
    }
    if r < c {
        // m = V' Σ U'ᵀ from the tall transpose; the right basis is completed to c columns.
        let t = svd(&m.transpose());
        let mut singular_values = t.singular_values;
        singular_values.resize(c, 0.0);
        return Svd { u: t.v, singular_values, v: complete_basis(&t.u) };
    }
    let scale = m.amax();
    let d = m.clone().svd(true, true);
    let (u, v_t) = (d.u.expect("u requested"), d.v_t.expect("v requested"));
    let error = (&u * DMatrix::from_diagonal(&d.singular_values) * &v_t - m).amax();
    if error <= SVD_RECONSTRUCTION_TOL * scale.max(f64::MIN_POSITIVE) {
        sorted(u, d.singular_values.iter().copied().collect(), v_t.transpose())
    } else {
        log::debug!("SVD reconstruction error {:e}; using Jacobi", error);
        jacobi_svd(m)
    }
}

/// Largest accepted `‖U Σ Vᵀ − m‖_max / ‖m‖_max` from the library SVD.
const SVD_RECONSTRUCTION_TOL: f64 = 1e-12;

fn sorted(u: DMatrix<f64>, values: Vec<f64>, v: DMatrix<f64>) -> Svd {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    Svd {
        u: u.select_columns(&order),
        singular_values: order.iter().map(|&i| values[i]).collect(),
        v: v.select_columns(&order),
    }
}

/// One-sided Jacobi SVD of a tall or square matrix.
fn jacobi_svd(m: &DMatrix<f64>) -> Svd {
    let c = m.ncols();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(c, c);
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..c {
            for q in p + 1..c {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for mat in [&mut a, &mut v] {
                    for i in 0..mat.nrows() {
                        let x = mat[(i, p)];
                        let y = mat[(i, q)];
                        mat[(i, p)] = cs * x - sn * y;
                        mat[(i, q)] = sn * x + cs * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let values: Vec<f64> = (0..c).map(|j| a.column(j).norm()).collect();
    let top = values.iter().copied().fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&x, &y| values[y].total_cmp(&values[x]));
    let kept: Vec<usize> = order.iter().copied().filter(|&j| values[j] > f64::EPSILON * top * c as f64).collect();
    let columns: Vec<DVector<f64>> = kept.iter().map(|&j| a.column(j) / values[j]).collect();
    let u = if columns.is_empty() { DMatrix::zeros(m.nrows(), 0) } else { DMatrix::from_columns(&columns) };
    let u = complete_basis(&u).columns(0, c).into_owned();
    Svd {
        u,
        singular_values: order.iter().map(|&j| if kept.contains(&j) { values[j] } else { 0.0 }).collect(),
        v: v.select_columns(&order),
    }
}

const JACOBI_SWEEPS: usize = 60;

/// Extends orthonormal columns to an orthonormal basis of the whole space,
/// each time adding the coordinate vector with the largest residual.
fn complete_basis(q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    let mut cols: Vec<DVector<f64>> = q.column_iter().map(|c| c.into_owned()).collect();
    while cols.len() < n {
        let residual = |i: usize| {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            for _ in 0..2 {
                for c in &cols {
                    let proj = c.dot(&e);
                    e -= c * proj;
                }
            }
            e
        };
        let best = (0..n)
            .map(residual)
            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
            .expect("n > 0");
        let norm = best.norm();
        cols.push(best / norm);
    }
    DMatrix::from_columns(&cols)
}

/// Number of singular values above `tol * max(1, sigma_max)`.
pub(crate) fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let s = svd(m).singular_values;
    let scale = s.first().copied().unwrap_or(0.0).max(1.0);
    s.iter().filter(|&&x| x > tol * scale).count()
}

/// Orthonormal basis of the `k`-dimensional column span of `m` (top `k` left
/// singular vectors).
pub(crate) fn leading_span(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let d = svd(m);
    d.u.columns(0, k.min(d.u.ncols())).into_owned()
}

/// Sine of the largest principal angle between two subspaces given by
/// orthonormal column bases. Returns 1 when the dimensions differ.
pub(crate) fn subspace_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() != b.ncols() {
        return 1.0;
    }
    if a.ncols() == 0 {
        return 0.0;
    }
    let residual = b - a * (a.transpose() * b);
    svd(&residual).singular_values.first().copied().unwrap_or(0.0).min(1.0)
}

/// Real orthonormal basis of the invariant subspace of `m` belonging to the
/// eigenvalues accepted by `select`, together with all eigenvalues.
///
/// The selection must be closed under complex conjugation (predicates on
/// modulus or real part are).
pub(crate) fn invariant_subspace(
    m: &DMatrix<f64>,
    select: impl Fn(Complex<f64>) -> bool,
) -> Result<(DMatrix<f64>, Vec<Complex<f64>>)> {
    let n = m.nrows();
    let (mut q, mut t) = complex_schur(m)?;
    let eigenvalues: Vec<Complex<f64>> = (0..n).map(|i| t[(i, i)]).collect();
    let wanted = eigenvalues.iter().filter(|&&l| select(l)).count();

    // Bubble selected eigenvalues to the leading block, one adjacent swap at a time.
    let mut placed = 0;
    for i in 0..n {
        if !select(t[(i, i)]) {
            continue;
        }
        let mut k = i;
        while k > placed {
            swap_adjacent(&mut t, &mut q, k - 1);
            k -= 1;
        }
        placed += 1;
    }
    debug_assert_eq!(placed, wanted);

    if wanted == 0 {
        return Ok((DMatrix::zeros(n, 0), eigenvalues));
    }
    if wanted == n {
        return Ok((DMatrix::identity(n, n), eigenvalues));
    }
    let lead = q.columns(0, wanted);
    let mut stacked = DMatrix::zeros(n, 2 * wanted);
    for j in 0..wanted {
        for i in 0..n {
            stacked[(i, j)] = lead[(i, j)].re;
            stacked[(i, wanted + j)] = lead[(i, j)].im;
        }
    }
    Ok((leading_span(&stacked, wanted), eigenvalues))
}

/// Eigenvalues of a real square matrix.
pub(crate) fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    let (_, t) = complex_schur(m)?;
    Ok((0..m.nrows()).map(|i| t[(i, i)]).collect())
}

/// Iterations allowed per eigenvalue before the QR sweep gives up.
const SCHUR_ITERS_PER_EIGENVALUE: usize = 60;

/// Complex Schur form `m = Q T Qᴴ`: Householder reduction to Hessenberg form,
/// then single-shift QR with Wilkinson shifts and exceptional shifts every
/// ten stalled sweeps.
fn complex_schur(m: &DMatrix<f64>) -> Result<(DMatrix<Complex<f64>>, DMatrix<Complex<f64>>)> {
    let n = m.nrows();
    let zero = Complex::new(0.0, 0.0);
    let mut h = m.map(|x| Complex::new(x, 0.0));
    let mut q = DMatrix::<Complex<f64>>::identity(n, n);
    hessenberg(&mut h, &mut q);

    let scale = h.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut hi = n;
    let mut stalled = 0;
    let mut budget = SCHUR_ITERS_PER_EIGENVALUE * n.max(1);
    while hi > 1 {
        let top = hi - 1;
        // Lowest row of the unreduced block ending at `top`.
        let mut lo = top;
        while lo > 0 {
            let sub = h[(lo, lo - 1)].norm();
            let mut diag = h[(lo, lo)].norm() + h[(lo - 1, lo - 1)].norm();
            if diag == 0.0 {
                diag = scale;
            }
            if sub <= f64::EPSILON * diag {
                h[(lo, lo - 1)] = zero;
                break;
            }
            lo -= 1;
        }
        if lo == top {
            hi -= 1;
            stalled = 0;
            continue;
        }
        if budget == 0 {
            return Err(Error::NotConverged(format!("Schur iteration stalled on a {}x{} matrix", n, n)));
        }
        budget -= 1;
        stalled += 1;

        let mu = if stalled % 10 == 0 {
            h[(top, top)] + Complex::new(0.75 * h[(top, top - 1)].re.abs(), 0.0)
        } else {
            wilkinson_shift(h[(top - 1, top - 1)], h[(top - 1, top)], h[(top, top - 1)], h[(top, top)])
        };

        let mut x = h[(lo, lo)] - mu;
        let mut y = h[(lo + 1, lo)];
        for k in lo..top {
            let (c, s) = givens(x, y);
            let first = if k > lo { k - 1 } else { lo };
            for j in first..n {
                let p = h[(k, j)];
                let r = h[(k + 1, j)];
                h[(k, j)] = p * c + s * r;
                h[(k + 1, j)] = -s.conj() * p + r * c;
            }
            let last = (k + 2).min(top);
            for i in 0..=last {
                let p = h[(i, k)];
                let r = h[(i, k + 1)];
                h[(i, k)] = p * c + r * s.conj();
                h[(i, k + 1)] = -p * s + r * c;
            }
            for i in 0..n {
                let p = q[(i, k)];
                let r = q[(i, k + 1)];
                q[(i, k)] = p * c + r * s.conj();
                q[(i, k + 1)] = -p * s + r * c;
            }
            if k + 1 < top {
                x = h[(k + 1, k)];
                y = h[(k + 2, k)];
            }
        }
    }
    for j in 0..n {
        for i in (j + 1)..n {
            h[(i, j)] = zero;
        }
    }
    Ok((q, h))
}

/// Householder reduction `h <- Pᴴ h P` to upper Hessenberg form, with `P`
/// accumulated into `q`.
fn hessenberg(h: &mut DMatrix<Complex<f64>>, q: &mut DMatrix<Complex<f64>>) {
    let n = h.nrows();
    for k in 0..n.saturating_sub(2) {
        let mut v: Vec<Complex<f64>> = (k + 1..n).map(|i| h[(i, k)]).collect();
        let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let phase = if v[0].norm() == 0.0 { Complex::new(1.0, 0.0) } else { v[0] / v[0].norm() };
        v[0] += phase * norm;
        let vn = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for z in v.iter_mut() {
            *z /= vn;
        }
        // rows: h <- (I - 2vvᴴ) h
        for j in 0..n {
            let dot: Complex<f64> = (0..v.len()).map(|i| v[i].conj() * h[(k + 1 + i, j)]).sum();
            for i in 0..v.len() {
                h[(k + 1 + i, j)] -= v[i] * dot * 2.0;
            }
        }
        // columns: h <- h (I - 2vvᴴ), q likewise
        for mat in [&mut *h, &mut *q] {
            for i in 0..n {
                let dot: Complex<f64> = (0..v.len()).map(|j| mat[(i, k + 1 + j)] * v[j]).sum();
                for j in 0..v.len() {
                    mat[(i, k + 1 + j)] -= dot * v[j].conj() * 2.0;
                }
            }
        }
        for i in (k + 2)..n {
            h[(i, k)] = Complex::new(0.0, 0.0);
        }
    }
}

/// Eigenvalue of `[[a, b], [c, d]]` closer to `d`.
fn wilkinson_shift(a: Complex<f64>, b: Complex<f64>, c: Complex<f64>, d: Complex<f64>) -> Complex<f64> {
    let half = (a - d) * 0.5;
    let root = (half * half + b * c).sqrt();
    let l1 = d + half + root;
    let l2 = d + half - root;
    if (l1 - d).norm() <= (l2 - d).norm() {
        l1
    } else {
        l2
    }
}

/// `(c, s)` with real `c` such that `[[c, s], [−s̄, c]]·[x, y]ᵀ = [r, 0]ᵀ`.
fn givens(x: Complex<f64>, y: Complex<f64>) -> (f64, Complex<f64>) {
    let ny = y.norm();
    if ny == 0.0 {
        return (1.0, Complex::new(0.0, 0.0));
    }
    let nx = x.norm();
    if nx == 0.0 {
        return (0.0, y.conj() / ny);
    }
    let norm = nx.hypot(ny);
    let phase = x / nx;
    (nx / norm, phase * y.conj() / norm)
}

/// Swap diagonal entries `k` and `k + 1` of the upper-triangular `t` with a
/// unitary similarity, accumulating the rotation into `q`.
fn swap_adjacent(t: &mut DMatrix<Complex<f64>>, q: &mut DMatrix<Complex<f64>>, k: usize) {
    let a = t[(k, k)];
    let c = t[(k + 1, k + 1)];
    let b = t[(k, k + 1)];
    // Eigenvector of the 2x2 block for eigenvalue c.
    let x1 = b;
    let x2 = c - a;
    let norm = (x1.norm_sqr() + x2.norm_sqr()).sqrt();
    if norm == 0.0 {
        // Equal eigenvalues with no coupling: the swap is a plain permutation.
        t.swap_columns(k, k + 1);
        t.swap_rows(k, k + 1);
        q.swap_columns(k, k + 1);
        return;
    }
    let g11 = x1 / norm;
    let g21 = x2 / norm;
    let g12 = -g21.conj();
    let g22 = g11.conj();

    // t <- t * G on columns k, k+1
    for i in 0..t.nrows() {
        let p = t[(i, k)];
        let r = t[(i, k + 1)];
        t[(i, k)] = p * g11 + r * g21;
        t[(i, k + 1)] = p * g12 + r * g22;
    }
    // t <- G^H * t on rows k, k+1
    for j in 0..t.ncols() {
        let p = t[(k, j)];
        let r = t[(k + 1, j)];
        t[(k, j)] = g11.conj() * p + g21.conj() * r;
        t[(k + 1, j)] = g12.conj() * p + g22.conj() * r;
    }
    t[(k + 1, k)] = Complex::new(0.0, 0.0);
    for i in 0..q.nrows() {
        let p = q[(i, k)];
        let r = q[(i, k + 1)];
        q[(i, k)] = p * g11 + r * g21;
        q[(i, k + 1)] = p * g12 + r * g22;
    }
}

/// Condition number in the spectral norm (infinite when singular).
pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let s = svd(m).singular_values;
    let hi = s.first().copied().unwrap_or(0.0);
    let lo = s.last().copied().unwrap_or(0.0);
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Least-squares solution of `m x = rhs` via the pseudo-inverse, together with
/// the Euclidean residual norm.
pub(crate) fn least_squares(m: &DMatrix<f64>, rhs: &DVector<f64>) -> (DVector<f64>, f64) {
    let cols = m.ncols();
    if cols == 0 {
        return (DVector::zeros(0), rhs.norm());
    }
    let d = svd(m);
    let top = d.singular_values.first().copied().unwrap_or(0.0);
    let mut x = DVector::zeros(cols);
    for (k, &s) in d.singular_values.iter().enumerate() {
        if s > 1e-13 * top.max(1e-300) && k < d.u.ncols() {
            let coef = d.u.column(k).dot(rhs) / s;
            x += d.v.column(k) * coef;
        }
    }
    let residual = (m * &x - rhs).norm();
    (x, residual)
}

pub(crate) fn is_permutation(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.nrows();
    let mut col_hit = vec![false; n];
    for i in 0..n {
        let mut ones = 0;
        for j in 0..n {
            let x = m[(i, j)];
            if (x - 1.0).abs() <= tol {
                if col_hit[j] {
                    return false;
                }
                col_hit[j] = true;
                ones += 1;
            } else if x.abs() > tol {
                return false;
            }
        }
        if ones != 1 {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Truncated Taylor series, valid for small norms only.
    fn taylor_exp(a: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
        let n = a.nrows();
        let mut sum = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for k in 1..terms {
            term = &term * a / k as f64;
            sum += &term;
        }
        sum
    }

    #[test]
    fn expm_matches_taylor_for_small_norm() {
        let a = DMatrix::from_row_slice(3, 3, &[-0.3, 0.2, 0.1, 0.05, -0.25, 0.2, 0.0, 0.4, -0.4]);
        let exact = taylor_exp(&a, 40);
        assert_abs_diff_eq!(expm(&a), exact, epsilon = 1e-15);
    }

    #[test]
    fn expm_of_symmetric_matches_eigendecomposition() {
        let a = DMatrix::from_row_slice(3, 3, &[-4.0, 2.5, 1.5, 2.5, -3.0, 0.5, 1.5, 0.5, -2.0]) * 3.0;
        let eig = a.clone().symmetric_eigen();
        let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::exp));
        let oracle = &eig.eigenvectors * d * eig.eigenvectors.transpose();
        let got = expm(&a);
        assert!((got - &oracle).abs().max() < 1e-13 * oracle.abs().max().max(1.0));
    }

    #[test]
    fn defective_matrix_exponential() {
        // Jordan block: exp([[l,1],[0,l]] t) = e^{lt} [[1,t],[0,1]]
        let a = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 0.0, -2.0]);
        let got = expm(&(&a * 3.0));
        let e = (-6.0f64).exp();
        assert_abs_diff_eq!(got[(0, 0)], e, epsilon = 1e-16);
        assert_abs_diff_eq!(got[(0, 1)], 3.0 * e, epsilon = 1e-16);
        assert_abs_diff_eq!(got[(1, 0)], 0.0, epsilon = 1e-16);
    }

    #[test]
    fn intensity_exp_stays_stochastic_for_huge_durations() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0 / 3.0, -1.0, 2.0 / 3.0, 0.0, 0.0, 0.0]);
        let p = intensity_exp(&a, 1e9);
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 1.0 / 3.0, 0.0, 2.0 / 3.0, 0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(p, expected, epsilon = 1e-14);
    }

    fn check_svd(m: &DMatrix<f64>) {
        let d = svd(m);
        let (r, c) = m.shape();
        let k = r.min(c);
        assert!(d.singular_values.windows(2).all(|w| w[0] >= w[1]));
        let sigma = DMatrix::from_fn(d.u.ncols(), k, |i, j| if i == j { d.singular_values[i] } else { 0.0 });
        let recon = &d.u * sigma * d.v.columns(0, k).transpose();
        assert!((recon - m).amax() < 1e-13 * m.amax().max(1.0));
        assert!((d.v.transpose() * &d.v - DMatrix::identity(d.v.ncols(), d.v.ncols())).amax() < 1e-13);
        assert!((d.u.transpose() * &d.u - DMatrix::identity(d.u.ncols(), d.u.ncols())).amax() < 1e-13);
    }

    #[test]
    fn svd_of_wide_matrix_with_repeated_values() {
        // orthonormal rows of a complex invariant subspace, split into real and imaginary parts
        let c = crate::fixtures::random_ti_continuous(610);
        let a = c.time_invariant().unwrap().clone();
        let (basis, _) = invariant_subspace(&a, |l| l.re < -0.1).unwrap();
        assert_eq!(basis.ncols(), 7);
        let ab = &a * &basis;
        assert!((&ab - &basis * (basis.transpose() * &ab)).amax() < 1e-12);
        let wide = DMatrix::from_fn(3, 7, |i, j| ((i * 7 + j) as f64).sin());
        check_svd(&wide);
        assert_eq!(svd(&wide).v.ncols(), 7);
    }

    #[test]
    fn jacobi_svd_reconstructs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for (r, c) in [(5, 5), (7, 3), (6, 6)] {
            let mut m = DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() - 0.5);
            m.row_mut(0).fill(0.0);
            let d = jacobi_svd(&m);
            let sigma = DMatrix::from_diagonal(&DVector::from_vec(d.singular_values.clone()));
            assert!((&d.u * sigma * d.v.transpose() - &m).amax() < 1e-13);
            check_svd(&m);
        }
        // rank deficient
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 0.0]);
        let d = jacobi_svd(&m);
        assert!(d.singular_values[1] < 1e-14);
        assert!((d.u.transpose() * &d.u - DMatrix::identity(3, 3)).amax() < 1e-13);
    }

    #[test]
    fn stochastic_power_keeps_the_limit_at_huge_exponents() {
        let m = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.3, 0.7]);
        // stationary distribution (3/4, 1/4)
        let p = stochastic_power(&m, 1 << 50);
        for i in 0..2 {
            assert_abs_diff_eq!(p[(i, 0)], 0.75, epsilon = 1e-13);
            assert_abs_diff_eq!(p[(i, 1)], 0.25, epsilon = 1e-13);
        }
        assert_abs_diff_eq!(stochastic_power(&m, 13), matrix_power(&m, 13), epsilon = 1e-15);
    }

    #[test]
    fn matrix_power_agrees_with_repeated_product() {
        let m = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.3, 0.7]);
        let mut slow = DMatrix::identity(2, 2);
        for _ in 0..13 {
            slow = &m * slow;
        }
        assert_abs_diff_eq!(matrix_power(&m, 13), slow, epsilon = 1e-15);
        assert_eq!(matrix_power(&m, 0), DMatrix::identity(2, 2));
    }

    #[test]
    fn invariant_subspace_of_defective_matrix() {
        // Stable Jordan block on e1,e2 plus an unstable direction coupled in.
        let m = DMatrix::from_row_slice(3, 3, &[0.5, 1.0, 0.3, 0.0, 0.5, 0.7, 0.0, 0.0, 1.0]);
        let (basis, eig) = invariant_subspace(&m, |l| l.norm() < 0.9).unwrap();
        assert_eq!(eig.len(), 3);
        assert_eq!(basis.ncols(), 2);
        // span{e1, e2}
        for j in 0..2 {
            assert!(basis[(2, j)].abs() < 1e-12);
        }
        // invariance: m * basis stays in span(basis)
        let image = &m * &basis;
        let residual = &image - &basis * (basis.transpose() * &image);
        assert!(residual.abs().max() < 1e-12);
    }

    #[test]
    fn invariant_subspace_handles_complex_pairs() {
        // Rotation-scaling block (complex pair of modulus 0.5) and a unit eigenvalue.
        let m = DMatrix::from_row_slice(3, 3, &[0.0, -0.5, 0.2, 0.5, 0.0, 0.1, 0.0, 0.0, 1.0]);
        let (basis, _) = invariant_subspace(&m, |l| l.norm() < 0.9).unwrap();
        assert_eq!(basis.ncols(), 2);
        let image = &m * &basis;
        let residual = &image - &basis * (basis.transpose() * &image);
        assert!(residual.abs().max() < 1e-12);
        let gram = basis.transpose() * &basis;
        assert_abs_diff_eq!(gram, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    fn check_schur(m: &DMatrix<f64>) {
        let n = m.nrows();
        let (q, t) = complex_schur(m).unwrap();
        let mc = m.map(|x| Complex::new(x, 0.0));
        let back = &q * &t * q.adjoint();
        assert!((back - &mc).iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-12 * (1.0 + max_abs(m)));
        let eye = DMatrix::<Complex<f64>>::identity(n, n);
        assert!((q.adjoint() * &q - eye).iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-13);
        for j in 0..n {
            for i in (j + 1)..n {
                assert_eq!(t[(i, j)], Complex::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn schur_handles_structured_stochastic_matrix() {
        // Two unit eigenvalues from decoupled blocks; stalls unshifted QR.
        let m = DMatrix::from_row_slice(6, 6, &[
            0.5, 0.0, 0.0, 0.0, 0.0, 0.5,
            0.0, 0.34375, 0.328125, 0.0, 0.328125, 0.0,
            0.0, 0.328125, 0.34375, 0.0, 0.328125, 0.0,
            0.484375, 0.0, 0.0, 0.015625, 0.0, 0.5,
            0.0, 0.328125, 0.328125, 0.0, 0.34375, 0.0,
            0.5, 0.0, 0.0, 0.0, 0.0, 0.5,
        ]);
        check_schur(&m);
        let unit = eigenvalues(&m).unwrap().iter().filter(|l| (*l - Complex::new(1.0, 0.0)).norm() < 1e-12).count();
        assert_eq!(unit, 2);
    }

    #[test]
    fn schur_reconstructs_random_matrices() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for n in 1..=9 {
            for _ in 0..20 {
                let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
                check_schur(&m);
            }
        }
        // permutation: all eigenvalues on the unit circle
        let p = DMatrix::from_fn(5, 5, |i, j| if j == (i + 1) % 5 { 1.0 } else { 0.0 });
        check_schur(&p);
        assert!(eigenvalues(&p).unwrap().iter().all(|l| (l.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn subspace_gap_detects_rotation() {
        let a = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let theta: f64 = 1e-3;
        let b = DMatrix::from_column_slice(3, 1, &[theta.cos(), theta.sin(), 0.0]);
        assert!((subspace_gap(&a, &b) - theta.sin()).abs() < 1e-12);
        assert_eq!(subspace_gap(&a, &a), 0.0);
    }

    #[test]
    fn permutation_detection() {
        let p = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(is_permutation(&p, 1e-12));
        let q = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        assert!(!is_permutation(&q, 1e-12));
    }
}
