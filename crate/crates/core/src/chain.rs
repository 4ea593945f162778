//! Piecewise-constant time-varying chains.
//!
//! A chain is a finite prefix of segments laid end to end from `t = 0`,
//! followed by a tail that repeats forever. Continuous chains carry intensity
//! matrices (zero row sums, non-negative off-diagonal entries); discrete
//! chains carry row-stochastic matrices and integer step counts.

use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for segment matrices.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Number of unit windows used by [`Chain::perturb_summable`].
pub const PERTURBATION_WINDOWS: usize = 32;

/// Largest denominator tried when looking for a common period in [`Chain::add`].
const MAX_PERIOD_RATIO: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    Continuous,
    Discrete,
}

impl TimeMode {
    /// The matrix that leaves opinions unchanged: zero in continuous time,
    /// identity in discrete time.
    pub fn neutral_matrix(self, n: usize) -> DMatrix<f64> {
        match self {
            TimeMode::Continuous => DMatrix::zeros(n, n),
            TimeMode::Discrete => DMatrix::identity(n, n),
        }
    }
}

impl fmt::Display for TimeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeMode::Continuous => f.write_str("continuous"),
            TimeMode::Discrete => f.write_str("discrete"),
        }
    }
}

/// A matrix held constant for `duration` time units (or steps).
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub duration: f64,
    pub matrix: DMatrix<f64>,
}

impl Segment {
    pub fn new(duration: f64, matrix: DMatrix<f64>) -> Self {
        Segment { duration, matrix }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Tail {
    /// The neutral matrix forever after the prefix.
    Zero,
    /// The block repeated forever after the prefix.
    Periodic(Vec<Segment>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    mode: TimeMode,
    n: usize,
    prefix: Vec<Segment>,
    tail: Tail,
}

/// Where a segment lives inside a chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "part", content = "index", rename_all = "lowercase")]
pub enum SegmentRef {
    Prefix(usize),
    Tail(usize),
}

impl fmt::Display for SegmentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentRef::Prefix(i) => write!(f, "prefix segment {}", i),
            SegmentRef::Tail(i) => write!(f, "tail segment {}", i),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    RowSum { row: usize, sum: f64, expected: f64 },
    NegativeEntry { row: usize, col: usize, value: f64 },
}

/// One broken invariant. Row and column indices are 0-based here; the CLI
/// prints them 1-based.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub segment: SegmentRef,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::RowSum { row, sum, expected } => write!(
                f,
                "{}: row {} sums to {:e} (expected {})",
                self.segment,
                row + 1,
                sum,
                expected
            ),
            ViolationKind::NegativeEntry { row, col, value } => write!(
                f,
                "{}: entry ({}, {}) is negative ({:e})",
                self.segment,
                row + 1,
                col + 1,
                value
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl Chain {
    /// Builds a chain after checking structure: square `n x n` matrices,
    /// finite entries, positive durations (integers in discrete mode) and a
    /// non-empty periodic block. Stochasticity is checked by [`Chain::validate`].
    pub fn new(mode: TimeMode, n: usize, prefix: Vec<Segment>, tail: Tail) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("chain needs at least one agent".into()));
        }
        let check = |seg: &Segment| -> Result<()> {
            let (r, c) = seg.matrix.shape();
            if r != n {
                return Err(Error::DimensionMismatch { expected: n, found: r });
            }
            if c != n {
                return Err(Error::DimensionMismatch { expected: n, found: c });
            }
            if seg.matrix.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument("matrix entries must be finite".into()));
            }
            if !(seg.duration.is_finite() && seg.duration > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "segment duration must be positive, got {}",
                    seg.duration
                )));
            }
            if mode == TimeMode::Discrete && seg.duration.fract() != 0.0 {
                return Err(Error::NonIntegerTime(seg.duration));
            }
            Ok(())
        };
        prefix.iter().try_for_each(check)?;
        if let Tail::Periodic(block) = &tail {
            if block.is_empty() {
                return Err(Error::InvalidArgument("periodic tail block is empty".into()));
            }
            block.iter().try_for_each(check)?;
        }
        Ok(Chain { mode, n, prefix, tail })
    }

    /// The chain that never changes opinions.
    pub fn neutral(mode: TimeMode, n: usize) -> Result<Self> {
        Chain::new(mode, n, Vec::new(), Tail::Zero)
    }

    /// The time-invariant chain `A(t) = matrix`.
    pub fn constant(mode: TimeMode, matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        Chain::new(mode, n, Vec::new(), Tail::Periodic(vec![Segment::new(1.0, matrix)]))
    }

    pub fn mode(&self) -> TimeMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn prefix(&self) -> &[Segment] {
        &self.prefix
    }

    pub fn tail(&self) -> &Tail {
        &self.tail
    }

    /// Time at which the tail starts.
    pub fn prefix_end(&self) -> f64 {
        self.prefix.iter().map(|s| s.duration).sum()
    }

    /// Length of one tail period, `None` for a zero tail.
    pub fn period(&self) -> Option<f64> {
        match &self.tail {
            Tail::Zero => None,
            Tail::Periodic(block) => Some(block.iter().map(|s| s.duration).sum()),
        }
    }

    /// Every matrix of the chain together with its location.
    pub fn segments(&self) -> impl Iterator<Item = (SegmentRef, &Segment)> {
        let tail: &[Segment] = match &self.tail {
            Tail::Zero => &[],
            Tail::Periodic(block) => block,
        };
        self.prefix
            .iter()
            .enumerate()
            .map(|(i, s)| (SegmentRef::Prefix(i), s))
            .chain(tail.iter().enumerate().map(|(i, s)| (SegmentRef::Tail(i), s)))
    }

    /// The single matrix `Â` with `A(t) = Â` for all `t`, if there is one.
    ///
    /// A zero-tail chain is time-invariant only when its prefix is neutral too.
    pub fn time_invariant(&self) -> Option<DMatrix<f64>> {
        let target = match &self.tail {
            Tail::Zero => self.mode.neutral_matrix(self.n),
            Tail::Periodic(block) => block[0].matrix.clone(),
        };
        self.segments()
            .all(|(_, s)| s.matrix == target)
            .then_some(target)
    }

    /// Checks the mode invariants of every segment.
    ///
    /// ```
    /// use egc::chain::{Chain, TimeMode};
    /// use nalgebra::DMatrix;
    ///
    /// let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, 0.1]);
    /// let chain = Chain::constant(TimeMode::Continuous, a).unwrap();
    /// let report = chain.validate();
    /// assert_eq!(report.violations.len(), 1);
    /// ```
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let expected = match self.mode {
            TimeMode::Continuous => 0.0,
            TimeMode::Discrete => 1.0,
        };
        for (loc, seg) in self.segments() {
            for i in 0..self.n {
                let sum: f64 = seg.matrix.row(i).iter().sum();
                if (sum - expected).abs() > ROW_SUM_TOL {
                    violations.push(Violation {
                        segment: loc,
                        kind: ViolationKind::RowSum { row: i, sum, expected },
                    });
                }
                for j in 0..self.n {
                    let v = seg.matrix[(i, j)];
                    let checked = self.mode == TimeMode::Discrete || i != j;
                    if checked && v < 0.0 {
                        violations.push(Violation {
                            segment: loc,
                            kind: ViolationKind::NegativeEntry { row: i, col: j, value: v },
                        });
                    }
                }
            }
        }
        ValidationReport { violations }
    }

    pub(crate) fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0) {
            return Err(Error::NegativeTime(t));
        }
        if self.mode == TimeMode::Discrete && t.fract() != 0.0 {
            return Err(Error::NonIntegerTime(t));
        }
        Ok(())
    }

    /// The matrix active at time `t` (right-continuous at boundaries).
    pub fn evaluate_at(&self, t: f64) -> Result<DMatrix<f64>> {
        self.check_time(t)?;
        let mut start = 0.0;
        for seg in &self.prefix {
            if t < start + seg.duration {
                return Ok(seg.matrix.clone());
            }
            start += seg.duration;
        }
        match &self.tail {
            Tail::Zero => Ok(self.mode.neutral_matrix(self.n)),
            Tail::Periodic(block) => {
                let period: f64 = block.iter().map(|s| s.duration).sum();
                let phase = (t - start).rem_euclid(period);
                let mut acc = 0.0;
                for seg in block {
                    if phase < acc + seg.duration {
                        return Ok(seg.matrix.clone());
                    }
                    acc += seg.duration;
                }
                Ok(block[block.len() - 1].matrix.clone())
            }
        }
    }

    /// Constant pieces covering `[from, to)`, in time order. The tail is
    /// unrolled, so callers should keep the window a few periods long.
    pub fn pieces(&self, from: f64, to: f64) -> Vec<Segment> {
        let mut out: Vec<Segment> = Vec::new();
        if to <= from {
            return out;
        }
        let mut push = |lo: f64, hi: f64, m: &DMatrix<f64>| {
            let a = lo.max(from);
            let b = hi.min(to);
            if b > a {
                match out.last_mut() {
                    Some(last) if last.matrix == *m => last.duration += b - a,
                    _ => out.push(Segment::new(b - a, m.clone())),
                }
            }
        };
        let mut start = 0.0;
        for seg in &self.prefix {
            if start >= to {
                return out;
            }
            push(start, start + seg.duration, &seg.matrix);
            start += seg.duration;
        }
        match &self.tail {
            Tail::Zero => push(start, to, &self.mode.neutral_matrix(self.n)),
            Tail::Periodic(block) => {
                let period: f64 = block.iter().map(|s| s.duration).sum();
                let skip = ((from - start) / period).floor().max(0.0);
                let mut cycle_start = start + skip * period;
                while cycle_start < to {
                    let mut s = cycle_start;
                    for seg in block {
                        push(s, s + seg.duration, &seg.matrix);
                        s += seg.duration;
                    }
                    if s <= cycle_start {
                        // time too large to resolve one period
                        break;
                    }
                    cycle_start = s;
                }
            }
        }
        out
    }

    fn require_continuous(&self) -> Result<()> {
        match self.mode {
            TimeMode::Continuous => Ok(()),
            found => Err(Error::WrongMode { expected: TimeMode::Continuous, found }),
        }
    }

    /// Multiplies every intensity matrix by `alpha > 0`.
    pub fn scale(&self, alpha: f64) -> Result<Chain> {
        self.require_continuous()?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale factor must be positive, got {}", alpha)));
        }
        let scale_all = |segs: &[Segment]| -> Vec<Segment> {
            segs.iter()
                .map(|s| Segment::new(s.duration, &s.matrix * alpha))
                .collect()
        };
        let tail = match &self.tail {
            Tail::Zero => Tail::Zero,
            Tail::Periodic(block) => Tail::Periodic(scale_all(block)),
        };
        Chain::new(self.mode, self.n, scale_all(&self.prefix), tail)
    }

    /// Pointwise sum `A(t) + B(t)` of two continuous chains.
    pub fn add(&self, other: &Chain) -> Result<Chain> {
        if self.mode != other.mode {
            return Err(Error::MixedModes);
        }
        self.require_continuous()?;
        if self.n != other.n {
            return Err(Error::DimensionMismatch { expected: self.n, found: other.n });
        }
        let start = self.prefix_end().max(other.prefix_end());
        let period = match (self.period(), other.period()) {
            (None, None) => None,
            (Some(p), None) | (None, Some(p)) => Some(p),
            (Some(p), Some(q)) => Some(common_period(p, q)?),
        };
        let prefix = sum_pieces(&self.pieces(0.0, start), &other.pieces(0.0, start));
        let tail = match period {
            None => Tail::Zero,
            Some(l) => {
                let end = start + l;
                let mut block = sum_pieces(&self.pieces(start, end), &other.pieces(start, end));
                fix_total(&mut block, l);
                Tail::Periodic(block)
            }
        };
        Chain::new(self.mode, self.n, prefix, tail)
    }

    /// An l1-approximation of `self`: the first [`PERTURBATION_WINDOWS`]
    /// unit windows receive perturbations whose max norm starts at
    /// `magnitude` and halves from one window to the next. The tail is kept.
    ///
    /// Continuous chains get a random intensity matrix added; discrete chains
    /// are blended with a random stochastic matrix using weight
    /// `min(1, magnitude * 2^-k)`.
    pub fn perturb_summable(&self, seed: u64, magnitude: f64) -> Result<Chain> {
        if !(magnitude >= 0.0 && magnitude.is_finite()) {
            return Err(Error::InvalidArgument(format!("magnitude must be non-negative, got {}", magnitude)));
        }
        if magnitude == 0.0 {
            return Ok(self.clone());
        }
        let windows = PERTURBATION_WINDOWS as f64;
        let pe = self.prefix_end();
        // Extend to a tail-aligned time so the remaining tail keeps its phase.
        let extended = match self.period() {
            None => pe.max(windows),
            Some(l) => {
                let cycles = ((windows - pe) / l).ceil().max(0.0);
                pe + cycles * l
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prefix = Vec::new();
        for k in 0..PERTURBATION_WINDOWS {
            let lo = k as f64;
            let weight = magnitude * 0.5f64.powi(k as i32);
            for piece in self.pieces(lo, lo + 1.0) {
                let m = match self.mode {
                    TimeMode::Continuous => &piece.matrix + random_intensity(&mut rng, self.n, weight),
                    TimeMode::Discrete => {
                        let w = weight.min(1.0);
                        &piece.matrix * (1.0 - w) + random_stochastic(&mut rng, self.n) * w
                    }
                };
                prefix.push(Segment::new(piece.duration, m));
            }
        }
        prefix.extend(self.pieces(windows, extended));
        Chain::new(self.mode, self.n, prefix, self.tail.clone())
    }

    /// `∫ ‖A(t) − B(t)‖_max dt` (or the sum over steps). Infinite when the
    /// tails disagree anywhere.
    pub fn l1_distance(&self, other: &Chain) -> Result<f64> {
        if self.mode != other.mode {
            return Err(Error::MixedModes);
        }
        if self.n != other.n {
            return Err(Error::DimensionMismatch { expected: self.n, found: other.n });
        }
        let start = self.prefix_end().max(other.prefix_end());
        let finite = diff_mass(&self.pieces(0.0, start), &other.pieces(0.0, start));
        let window = match (self.period(), other.period()) {
            (None, None) => return Ok(finite),
            (Some(p), None) | (None, Some(p)) => p,
            (Some(p), Some(q)) => common_period(p, q)?,
        };
        let tail = diff_mass(&self.pieces(start, start + window), &other.pieces(start, start + window));
        Ok(if tail > 0.0 { f64::INFINITY } else { finite })
    }

    /// Parses a chain document. Entries in `[-1e-12, 0)` that must be
    /// non-negative are clamped to zero.
    pub fn from_json_str(text: &str) -> Result<Chain> {
        let doc: ChainDoc = serde_json::from_str(text)?;
        Chain::from_doc(doc)
    }

    pub fn to_json_string(&self) -> String {
        crate::json::to_string_pretty(&self.to_doc())
    }

    pub fn from_doc(doc: ChainDoc) -> Result<Chain> {
        let mode = doc.mode;
        let n = doc.n;
        let convert = |s: SegmentDoc| -> Result<Segment> {
            let duration = s
                .duration
                .as_f64()
                .ok_or_else(|| Error::InvalidArgument("duration is not a number".into()))?;
            let mut matrix = matrix_from_rows(&s.matrix, n)?;
            for i in 0..n {
                for j in 0..n {
                    let v = matrix[(i, j)];
                    let must_be_nonneg = mode == TimeMode::Discrete || i != j;
                    if must_be_nonneg && (-ROW_SUM_TOL..0.0).contains(&v) {
                        matrix[(i, j)] = 0.0;
                    }
                }
            }
            Ok(Segment::new(duration, matrix))
        };
        let prefix = doc.prefix.into_iter().map(convert).collect::<Result<Vec<_>>>()?;
        let tail = match doc.tail {
            TailDoc::Zero => Tail::Zero,
            TailDoc::Periodic { block } => {
                Tail::Periodic(block.into_iter().map(convert).collect::<Result<Vec<_>>>()?)
            }
        };
        Chain::new(mode, n, prefix, tail)
    }

    pub fn to_doc(&self) -> ChainDoc {
        let convert = |s: &Segment| SegmentDoc {
            duration: match self.mode {
                TimeMode::Discrete => serde_json::Number::from(s.duration as u64),
                TimeMode::Continuous => serde_json::Number::from_f64(s.duration).expect("finite duration"),
            },
            matrix: matrix_to_rows(&s.matrix),
        };
        ChainDoc {
            mode: self.mode,
            n: self.n,
            prefix: self.prefix.iter().map(convert).collect(),
            tail: match &self.tail {
                Tail::Zero => TailDoc::Zero,
                Tail::Periodic(block) => TailDoc::Periodic { block: block.iter().map(convert).collect() },
            },
        }
    }
}

/// On-disk chain layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainDoc {
    pub mode: TimeMode,
    pub n: usize,
    pub prefix: Vec<SegmentDoc>,
    pub tail: TailDoc,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentDoc {
    pub duration: serde_json::Number,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TailDoc {
    Zero,
    Periodic { block: Vec<SegmentDoc> },
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: rows.len() });
    }
    let mut m = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: row.len() });
        }
        for (j, &v) in row.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Least common period of `p` and `q`, accepting ratios `a/b` with
/// `b <= 1000` up to a relative error of `1e-9`.
fn common_period(p: f64, q: f64) -> Result<f64> {
    let ratio = p / q;
    for b in 1..=MAX_PERIOD_RATIO {
        let a = (ratio * b as f64).round();
        if a >= 1.0 && ((a / b as f64) - ratio).abs() <= 1e-9 * ratio {
            // p * b == q * a up to rounding; the lcm is p * b / gcd(a, b).
            let g = gcd(a as u64, b);
            return Ok(p * (b / g) as f64);
        }
    }
    Err(Error::IncommensurablePeriods(p, q))
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let r = a % b;
        a = b;
        b = r;
    }
    a
}

/// Overlays two piece lists covering the same window and adds their matrices.
fn sum_pieces(a: &[Segment], b: &[Segment]) -> Vec<Segment> {
    overlay(a, b)
        .into_iter()
        .map(|(d, x, y)| Segment::new(d, x + y))
        .fold(Vec::new(), |mut acc: Vec<Segment>, seg| {
            match acc.last_mut() {
                Some(last) if last.matrix == seg.matrix => last.duration += seg.duration,
                _ => acc.push(seg),
            }
            acc
        })
}

fn diff_mass(a: &[Segment], b: &[Segment]) -> f64 {
    overlay(a, b)
        .into_iter()
        .map(|(d, x, y)| d * crate::linalg::max_abs(&(x - y)))
        .sum()
}

/// Common refinement of two piece lists. Boundaries closer than `1e-12`
/// relative are treated as equal.
fn overlay<'a>(a: &'a [Segment], b: &'a [Segment]) -> Vec<(f64, &'a DMatrix<f64>, &'a DMatrix<f64>)> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (
        a.first().map_or(0.0, |s| s.duration),
        b.first().map_or(0.0, |s| s.duration),
    );
    while i < a.len() && j < b.len() {
        let step = ra.min(rb);
        let eps = 1e-12 * step.max(1.0);
        if step > eps {
            out.push((step, &a[i].matrix, &b[j].matrix));
        }
        ra -= step;
        rb -= step;
        if ra <= eps {
            i += 1;
            ra = a.get(i).map_or(0.0, |s| s.duration);
        }
        if rb <= eps {
            j += 1;
            rb = b.get(j).map_or(0.0, |s| s.duration);
        }
    }
    out
}

/// Absorbs floating-point drift so the block length is exactly `total`.
fn fix_total(block: &mut [Segment], total: f64) {
    let sum: f64 = block.iter().map(|s| s.duration).sum();
    if let Some(last) = block.last_mut() {
        last.duration += total - sum;
    }
}

fn random_intensity(rng: &mut ChaCha8Rng, n: usize, max_abs: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    if n < 2 {
        return m;
    }
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            if i != j {
                let v: f64 = rng.random::<f64>() + 1e-3;
                m[(i, j)] = v;
                sum += v;
            }
        }
        m[(i, i)] = -sum;
    }
    let top = crate::linalg::max_abs(&m);
    m * (max_abs / top)
}

fn random_stochastic(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            let v: f64 = rng.random::<f64>() + 1e-3;
            m[(i, j)] = v;
            sum += v;
        }
        for j in 0..n {
            m[(i, j)] /= sum;
        }
    }
    m
}
