//! Example chains: the three-agent worked examples and seeded random suites.

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chain::{Chain, Segment, Tail, TimeMode};

/// Default number of dyadic blocks kept in the prefixes of
/// [`dyadic_a`] and [`dyadic_b`].
pub const DEFAULT_K_MAX: u32 = 5;

fn m3(rows: [[f64; 3]; 3]) -> DMatrix<f64> {
    DMatrix::from_fn(3, 3, |i, j| rows[i][j])
}

/// Constant intensity `[[0,0,0],[1/3,−1,2/3],[0,0,0]]`: agent 2 drifts to a
/// weighted average of the two fixed agents 1 and 3.
pub fn follower() -> Chain {
    Chain::constant(TimeMode::Continuous, m3([[0.0, 0.0, 0.0], [1.0 / 3.0, -1.0, 2.0 / 3.0], [0.0, 0.0, 0.0]]))
        .expect("valid intensity matrix")
}

/// Contiguous prefix from sorted, disjoint `[start, end)` pieces, filling gaps
/// with zero intensity.
fn dyadic_chain(n: usize, pieces: Vec<(f64, f64, DMatrix<f64>)>) -> Chain {
    let mut prefix = Vec::new();
    let mut at = 0.0;
    for (lo, hi, m) in pieces {
        if hi <= lo {
            continue;
        }
        if lo > at {
            prefix.push(Segment::new(lo - at, DMatrix::zeros(n, n)));
        }
        prefix.push(Segment::new(hi - lo, m));
        at = hi;
    }
    Chain::new(TimeMode::Continuous, n, prefix, Tail::Zero).expect("valid dyadic chain")
}

/// Chain A: agent 1 listens to 2 on `[4^k − 1, 4^k)` and agent 2 listens to 3
/// on `[4^k, 2·4^k − 1)`, for `k = 0..=k_max`; zero elsewhere.
pub fn dyadic_a(k_max: u32) -> Chain {
    let a1 = m3([[-1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
    let a2 = m3([[0.0, 0.0, 0.0], [0.0, -1.0, 1.0], [0.0, 0.0, 0.0]]);
    let mut pieces = Vec::new();
    for k in 0..=k_max {
        let p = 2f64.powi(2 * k as i32);
        pieces.push((p - 1.0, p, a1.clone()));
        pieces.push((p, 2.0 * p - 1.0, a2.clone()));
    }
    dyadic_chain(3, pieces)
}

/// Chain B: agent 3 listens to 2 on `[2·4^k − 1, 2·4^k)` and agent 2 listens
/// to 1 on `[2·4^k, 4^(k+1) − 1)`, for `k = 0..=k_max`; zero elsewhere.
pub fn dyadic_b(k_max: u32) -> Chain {
    let b1 = m3([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, -1.0]]);
    let b2 = m3([[0.0, 0.0, 0.0], [1.0, -1.0, 0.0], [0.0, 0.0, 0.0]]);
    let mut pieces = Vec::new();
    for k in 0..=k_max {
        let p = 2f64.powi(2 * k as i32 + 1);
        pieces.push((p - 1.0, p, b1.clone()));
        pieces.push((p, 2.0 * p - 1.0, b2.clone()));
    }
    dyadic_chain(3, pieces)
}

/// `A + B`.
pub fn dyadic_sum(k_max: u32) -> Chain {
    dyadic_a(k_max).add(&dyadic_b(k_max)).expect("same mode and size")
}

/// A chain together with the start time it is analysed from.
#[derive(Clone, Debug)]
pub struct SuiteChain {
    pub label: String,
    pub chain: Chain,
    pub tau: f64,
}

/// `listens[i]`: agents `j ≠ i` with `a_ij ≠ 0`.
type Structure = Vec<Vec<usize>>;

/// Agents split into up to three groups. Each group is strongly connected
/// (a cycle plus random chords) and a later group may listen to an earlier
/// one, so the number of closed groups varies.
fn grouped_structure(rng: &mut ChaCha8Rng, n: usize) -> Structure {
    let groups = rng.random_range(1..=n.min(3));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); groups];
    for (k, &i) in order.iter().enumerate() {
        members[if k < groups { k } else { rng.random_range(0..groups) }].push(i);
    }
    let mut listens: Structure = vec![Vec::new(); n];
    for g in &members {
        if g.len() > 1 {
            for k in 0..g.len() {
                listens[g[k]].push(g[(k + 1) % g.len()]);
            }
        }
        for &i in g {
            for &j in g {
                if i != j && !listens[i].contains(&j) && rng.random_bool(0.3) {
                    listens[i].push(j);
                }
            }
        }
    }
    for hi in 1..groups {
        for lo in 0..hi {
            if rng.random_bool(0.4) {
                let i = *members[hi].choose(rng).expect("non-empty group");
                let j = *members[lo].choose(rng).expect("non-empty group");
                listens[i].push(j);
            }
        }
    }
    listens.iter_mut().for_each(|l| l.sort_unstable());
    listens
}

fn thin(rng: &mut ChaCha8Rng, s: &Structure, keep: f64) -> Structure {
    s.iter().map(|l| l.iter().copied().filter(|_| rng.random_bool(keep)).collect()).collect()
}

/// Intensity matrix with weights in `[0.5, 2]·scale` on the given edges.
fn laplacian(rng: &mut ChaCha8Rng, s: &Structure, scale: f64) -> DMatrix<f64> {
    let n = s.len();
    let mut a = DMatrix::zeros(n, n);
    for (i, l) in s.iter().enumerate() {
        for &j in l {
            let w = rng.random_range(0.5..=2.0) * scale;
            a[(i, j)] = w;
            a[(i, i)] -= w;
        }
    }
    a
}

/// `(1 − laziness)·I + laziness·S` with `S` row-normalized random weights on
/// the given edges.
fn lazy_stochastic(rng: &mut ChaCha8Rng, s: &Structure, laziness: f64) -> DMatrix<f64> {
    let n = s.len();
    let mut a = DMatrix::identity(n, n) * (1.0 - laziness);
    for (i, l) in s.iter().enumerate() {
        if l.is_empty() {
            a[(i, i)] = 1.0;
            continue;
        }
        let ws: Vec<f64> = l.iter().map(|_| rng.random_range(0.5..=2.0)).collect();
        let total: f64 = ws.iter().sum();
        for (&j, w) in l.iter().zip(ws) {
            a[(i, j)] += laziness * w / total;
        }
    }
    a
}

fn random_n(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(3..=8)
}

/// Time-invariant continuous chain on a grouped structure.
pub fn random_ti_continuous(seed: u64) -> Chain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = random_n(&mut rng);
    let s = grouped_structure(&mut rng, n);
    Chain::constant(TimeMode::Continuous, laplacian(&mut rng, &s, 1.0)).expect("valid")
}

/// Time-invariant lazy stochastic chain on a grouped structure.
pub fn random_ti_discrete(seed: u64) -> Chain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = random_n(&mut rng);
    let s = grouped_structure(&mut rng, n);
    Chain::constant(TimeMode::Discrete, lazy_stochastic(&mut rng, &s, 0.5)).expect("valid")
}

/// Periodic tail of two or three segments, each a random thinning of one
/// grouped structure, after a one-segment prefix.
pub fn random_periodic(seed: u64, mode: TimeMode) -> Chain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = random_n(&mut rng);
    let s = grouped_structure(&mut rng, n);
    let count = rng.random_range(2..=3);
    let make = |rng: &mut ChaCha8Rng| -> Segment {
        let t = thin(rng, &s, 0.7);
        match mode {
            TimeMode::Continuous => Segment::new([0.5, 1.0, 1.5][rng.random_range(0..3)], laplacian(rng, &t, 1.0)),
            TimeMode::Discrete => Segment::new(rng.random_range(1..=3) as f64, lazy_stochastic(rng, &t, 0.5)),
        }
    };
    let block: Vec<Segment> = (0..count).map(|_| make(&mut rng)).collect();
    let prefix = vec![make(&mut rng)];
    Chain::new(mode, n, prefix, Tail::Periodic(block)).expect("valid")
}

/// A short mild prefix followed by a zero tail (no further interaction).
pub fn random_zero_tail(seed: u64, mode: TimeMode) -> Chain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = random_n(&mut rng);
    let segments = rng.random_range(2..=4);
    let prefix = (0..segments)
        .map(|_| {
            let s = grouped_structure(&mut rng, n);
            match mode {
                TimeMode::Continuous => Segment::new(rng.random_range(0.2..=0.6), laplacian(&mut rng, &s, 0.5)),
                TimeMode::Discrete => Segment::new(rng.random_range(1..=2) as f64, lazy_stochastic(&mut rng, &s, 0.3)),
            }
        })
        .collect();
    Chain::new(mode, n, prefix, Tail::Zero).expect("valid")
}

/// Mixed suite of 24 chains: time-invariant, periodic and zero-tail, in both
/// time modes, with `N` between 3 and 8.
pub fn property_suite(seed: u64) -> Vec<SuiteChain> {
    let mut out = Vec::new();
    let mut push = |label: String, chain: Chain| out.push(SuiteChain { label, chain, tau: 0.0 });
    for k in 0..5 {
        push(format!("ti-continuous-{}", k), random_ti_continuous(seed * 1000 + k));
        push(format!("ti-discrete-{}", k), random_ti_discrete(seed * 1000 + 100 + k));
    }
    for k in 0..4 {
        push(format!("periodic-continuous-{}", k), random_periodic(seed * 1000 + 200 + k, TimeMode::Continuous));
        push(format!("periodic-discrete-{}", k), random_periodic(seed * 1000 + 300 + k, TimeMode::Discrete));
    }
    for k in 0..3 {
        push(format!("zero-tail-continuous-{}", k), random_zero_tail(seed * 1000 + 400 + k, TimeMode::Continuous));
        push(format!("zero-tail-discrete-{}", k), random_zero_tail(seed * 1000 + 500 + k, TimeMode::Discrete));
    }
    out
}

/// Time-invariant intensity matrix on an unstructured random digraph
/// (each ordered pair present with probability 0.25).
pub fn random_ti_digraph(seed: u64) -> Chain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = random_n(&mut rng);
    let s: Structure = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && rng.random_bool(0.25)).collect())
        .collect();
    Chain::constant(TimeMode::Continuous, laplacian(&mut rng, &s, 1.0)).expect("valid")
}

/// Discrete chain whose tail cycles through random permutation matrices,
/// after a diagonally dominant prefix.
pub fn random_permutation_tail(seed: u64) -> Chain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = random_n(&mut rng);
    let s = grouped_structure(&mut rng, n);
    let prefix = vec![Segment::new(2.0, lazy_stochastic(&mut rng, &s, 0.3))];
    let block = (0..rng.random_range(1..=3))
        .map(|_| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            Segment::new(rng.random_range(1..=2) as f64, DMatrix::from_fn(n, n, |i, j| f64::from(perm[i] == j)))
        })
        .collect();
    Chain::new(TimeMode::Discrete, n, prefix, Tail::Periodic(block)).expect("valid")
}

/// Discrete chain with an entrywise positive stochastic tail.
pub fn random_positive_tail(seed: u64) -> Chain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = random_n(&mut rng);
    let s = grouped_structure(&mut rng, n);
    let prefix = vec![Segment::new(1.0, lazy_stochastic(&mut rng, &s, 0.5))];
    let mut positive = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.1..=1.0));
    for mut row in positive.row_iter_mut() {
        let total = row.sum();
        row /= total;
    }
    Chain::new(TimeMode::Discrete, n, prefix, Tail::Periodic(vec![Segment::new(1.0, positive)])).expect("valid")
}

/// Block-diagonal periodic discrete chain with positive diagonal. Each block
/// is strongly connected in every segment, so the number of blocks is the
/// number of infinite-flow components.
pub fn pstar_chain(seed: u64, blocks: usize) -> Chain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = (0..blocks).map(|_| rng.random_range(2..=3)).collect();
    let n: usize = sizes.iter().sum();
    let mut listens: Structure = vec![Vec::new(); n];
    let mut at = 0;
    for &size in &sizes {
        for k in 0..size {
            listens[at + k].push(at + (k + 1) % size);
            if size > 2 && rng.random_bool(0.5) {
                listens[at + k].push(at + (k + 2) % size);
            }
        }
        at += size;
    }
    let block = (0..2)
        .map(|_| Segment::new(rng.random_range(1..=2) as f64, lazy_stochastic(&mut rng, &listens, 0.5)))
        .collect();
    Chain::new(TimeMode::Discrete, n, Vec::new(), Tail::Periodic(block)).expect("valid")
}

/// The five class-P* chains with infinite-flow component counts 1, 2, 3, 2, 3.
pub fn pstar_suite() -> Vec<(Chain, usize)> {
    [1, 2, 3, 2, 3].iter().enumerate().map(|(k, &h)| (pstar_chain(7000 + k as u64, h), h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dyadic_pieces_are_placed_on_dyadic_intervals() {
        let a = dyadic_a(2);
        assert_eq!(a.prefix_end(), 31.0);
        assert_eq!(a.evaluate_at(3.5).unwrap(), m3([[-1.0, 1.0, 0.0], [0.0; 3], [0.0; 3]]));
        assert_eq!(a.evaluate_at(5.0).unwrap()[(1, 2)], 1.0);
        assert_eq!(a.evaluate_at(10.0).unwrap(), DMatrix::zeros(3, 3));
        let b = dyadic_b(2);
        assert_eq!(b.prefix_end(), 63.0);
        assert_eq!(b.evaluate_at(1.5).unwrap()[(2, 1)], 1.0);
        assert_eq!(b.evaluate_at(2.5).unwrap()[(1, 0)], 1.0);
        // A vanishes on [1, 2), so the sum there is B's matrix
        let s = dyadic_sum(2);
        assert_eq!(s.evaluate_at(1.5).unwrap(), b.evaluate_at(1.5).unwrap());
    }

    #[test]
    fn suites_are_valid_and_reproducible() {
        let suite = property_suite(1);
        assert_eq!(suite.len(), 24);
        for s in &suite {
            assert!(s.chain.validate().is_valid(), "{}", s.label);
            assert!((3..=8).contains(&s.chain.n()));
        }
        assert_eq!(property_suite(1)[7].chain, suite[7].chain);
        for (c, h) in pstar_suite() {
            assert!(c.validate().is_valid());
            assert!(c.n() >= 2 * h);
        }
        assert!(random_permutation_tail(3).validate().is_valid());
        assert!(random_positive_tail(3).validate().is_valid());
        assert!(random_ti_digraph(3).validate().is_valid());
    }
}
