//! Interaction graphs, smallest s-roots and the rank bounds they give.
//!
//! Divergence of `∫ a_ij(t) dt` is decided structurally: an entry that is
//! nonzero somewhere in a periodic tail block integrates to infinity, and
//! everything in the finite prefix integrates to a finite value.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::Serialize;

use crate::chain::{Chain, Tail, TimeMode};
use crate::error::{Error, Result};
use crate::geometry::{ergodicity_classes, DEFAULT_TOL_CLUSTER};
use crate::linalg::is_permutation;
use crate::rank::rank;
use crate::transition::default_schedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    /// Edge `i → j` when the total influence of `i` on `j` diverges.
    UnboundedDirected,
    /// Edge `{i, j}` when `∫ (a_ij + a_ji) dt` diverges.
    InfiniteFlowUndirected,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InteractionGraph {
    pub kind: GraphKind,
    pub n: usize,
    /// 0-based pairs; undirected edges are stored as `(min, max)`.
    pub edges: BTreeSet<(usize, usize)>,
}

/// Off-diagonal entries `(i, j)` that are nonzero somewhere in the tail block.
fn divergent_entries(chain: &Chain) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    if let Tail::Periodic(block) = chain.tail() {
        for seg in block {
            for i in 0..chain.n() {
                for j in 0..chain.n() {
                    if i != j && seg.matrix[(i, j)] != 0.0 {
                        out.insert((i, j));
                    }
                }
            }
        }
    }
    out
}

/// `H1`: edge `i → j` iff `∫ a_ji dt = ∞`.
///
/// ```
/// use egc::chain::{Chain, TimeMode};
/// use egc::graph::unbounded_interactions_graph;
/// use nalgebra::DMatrix;
///
/// let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0 / 3.0, -1.0, 2.0 / 3.0, 0.0, 0.0, 0.0]);
/// let h1 = unbounded_interactions_graph(&Chain::constant(TimeMode::Continuous, a).unwrap());
/// assert_eq!(h1.edges.into_iter().collect::<Vec<_>>(), vec![(0, 1), (2, 1)]);
/// ```
pub fn unbounded_interactions_graph(chain: &Chain) -> InteractionGraph {
    let edges = divergent_entries(chain).into_iter().map(|(j, i)| (i, j)).collect();
    InteractionGraph { kind: GraphKind::UnboundedDirected, n: chain.n(), edges }
}

/// `H2`: edge `{i, j}` iff `∫ (a_ij + a_ji) dt = ∞`.
pub fn infinite_flow_graph(chain: &Chain) -> InteractionGraph {
    let edges = divergent_entries(chain)
        .into_iter()
        .map(|(i, j)| (i.min(j), i.max(j)))
        .collect();
    InteractionGraph { kind: GraphKind::InfiniteFlowUndirected, n: chain.n(), edges }
}

impl InteractionGraph {
    /// Connected components (weak components for `H1`), each sorted,
    /// ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for &(a, b) in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra.max(rb)] = ra.min(rb);
        }
        let mut comps: Vec<Vec<usize>> = Vec::new();
        let mut slot = vec![usize::MAX; self.n];
        for i in 0..self.n {
            let r = find(&mut parent, i);
            if slot[r] == usize::MAX {
                slot[r] = comps.len();
                comps.push(Vec::new());
            }
            comps[slot[r]].push(i);
        }
        comps
    }

    /// Graphviz rendering with 1-based node labels, colored by component.
    pub fn to_dot(&self) -> String {
        const PALETTE: [&str; 8] = [
            "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
        ];
        let (header, arrow) = match self.kind {
            GraphKind::UnboundedDirected => ("digraph H1", "->"),
            GraphKind::InfiniteFlowUndirected => ("graph H2", "--"),
        };
        let mut out = format!("{} {{\n", header);
        for (k, comp) in self.components().iter().enumerate() {
            for &i in comp {
                let _ = writeln!(
                    out,
                    "  {} [label=\"{}\", style=filled, fillcolor=\"{}\", component={}];",
                    i + 1,
                    i + 1,
                    PALETTE[k % PALETTE.len()],
                    k + 1
                );
            }
        }
        for &(a, b) in &self.edges {
            let _ = writeln!(out, "  {} {} {};", a + 1, arrow, b + 1);
        }
        out.push_str("}\n");
        out
    }

    /// Every node reachable from `roots` along directed edges.
    pub fn reachable_from(&self, roots: &[usize]) -> BTreeSet<usize> {
        let mut seen: BTreeSet<usize> = roots.iter().copied().collect();
        let mut stack: Vec<usize> = roots.to_vec();
        while let Some(u) = stack.pop() {
            for &(a, b) in self.edges.range((u, 0)..=(u, usize::MAX)) {
                debug_assert_eq!(a, u);
                if seen.insert(b) {
                    stack.push(b);
                }
            }
        }
        seen
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SRoot {
    pub size: usize,
    /// Lowest-index node of each source component (0-based).
    #[serde(serialize_with = "crate::json::ser_one_based")]
    pub witness: Vec<usize>,
}

/// Smallest node set from which every node of `H1` is reachable: one node
/// from each strongly connected component with no incoming edges.
pub fn smallest_sroot(graph: &InteractionGraph) -> Result<SRoot> {
    if graph.kind != GraphKind::UnboundedDirected {
        return Err(Error::InvalidArgument("s-roots are defined on the directed graph H1".into()));
    }
    let mut g: DiGraph<usize, ()> = DiGraph::new();
    let nodes: Vec<NodeIndex> = (0..graph.n).map(|i| g.add_node(i)).collect();
    for &(a, b) in &graph.edges {
        g.add_edge(nodes[a], nodes[b], ());
    }
    let sccs = tarjan_scc(&g);
    let mut comp_of = vec![0; graph.n];
    for (k, scc) in sccs.iter().enumerate() {
        for &v in scc {
            comp_of[g[v]] = k;
        }
    }
    let mut has_incoming = vec![false; sccs.len()];
    for &(a, b) in &graph.edges {
        if comp_of[a] != comp_of[b] {
            has_incoming[comp_of[b]] = true;
        }
    }
    let mut witness: Vec<usize> = sccs
        .iter()
        .enumerate()
        .filter(|(k, _)| !has_incoming[*k])
        .map(|(_, scc)| scc.iter().map(|&v| g[v]).min().expect("non-empty component"))
        .collect();
    witness.sort_unstable();
    Ok(SRoot { size: witness.len(), witness })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundsReport {
    pub lower_sroot: usize,
    /// `h2`: number of connected components of `H2`.
    pub lower_components_h2: usize,
    /// `N − h'_2`, where `h'_2` counts `H2` components with at least two nodes.
    pub upper_n_minus_h2prime: usize,
    /// `None` (written as `"unknown"`) when the clustering did not settle.
    #[serde(serialize_with = "ser_unknown")]
    pub upper_ergodicity_classes: Option<usize>,
    pub rank: usize,
    pub rank_converged: bool,
    pub rank_tolerance: f64,
    pub tol_cluster: f64,
    pub all_consistent: bool,
    /// τ at which ergodicity classes were computed.
    pub classes_tau: f64,
}

fn ser_unknown<S: serde::Serializer>(v: &Option<usize>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(k) => s.serialize_u64(*k as u64),
        None => s.serialize_str("unknown"),
    }
}

impl BoundsReport {
    /// Checks `h2 ≤ s-root ≤ rank ≤ min(N − h'_2, #classes)`.
    pub fn sandwich_holds(&self) -> bool {
        let upper = self
            .upper_ergodicity_classes
            .map_or(self.upper_n_minus_h2prime, |c| c.min(self.upper_n_minus_h2prime));
        self.lower_components_h2 <= self.lower_sroot && self.lower_sroot <= self.rank && self.rank <= upper
    }
}

/// All structural bounds on the rank, next to the rank itself.
///
/// In discrete time the ergodicity classes are computed from the start of
/// the tail (or `τ` if later), where the local null space has stabilized.
pub fn bounds_report(chain: &Chain, tau: f64, tol: Option<f64>) -> Result<BoundsReport> {
    let report = rank(chain, tau, tol)?;
    let h1 = unbounded_interactions_graph(chain);
    let h2 = infinite_flow_graph(chain);
    let sroot = smallest_sroot(&h1)?;
    let comps = h2.components();
    let h2prime = comps.iter().filter(|c| c.len() >= 2).count();
    let classes_tau = match chain.mode() {
        TimeMode::Continuous => tau,
        TimeMode::Discrete => tau.max(chain.prefix_end().ceil()),
    };
    let classing = ergodicity_classes(chain, classes_tau, &default_schedule(chain, classes_tau), DEFAULT_TOL_CLUSTER)?;
    let mut out = BoundsReport {
        lower_sroot: sroot.size,
        lower_components_h2: comps.len(),
        upper_n_minus_h2prime: chain.n() - h2prime,
        upper_ergodicity_classes: classing.converged.then_some(classing.classes.len()),
        rank: report.rank,
        rank_converged: report.converged,
        rank_tolerance: report.tolerance,
        tol_cluster: DEFAULT_TOL_CLUSTER,
        all_consistent: false,
        classes_tau,
    };
    out.all_consistent = out.sandwich_holds();
    Ok(out)
}

/// Whether the chain is an l1-approximation of a chain that never mixes
/// opinions: a zero (or identically zero) continuous tail, or a discrete
/// tail made only of permutation matrices.
pub fn full_rank_test(chain: &Chain) -> bool {
    match (chain.mode(), chain.tail()) {
        (_, Tail::Zero) => true,
        (TimeMode::Continuous, Tail::Periodic(block)) => block.iter().all(|s| s.matrix.iter().all(|&x| x == 0.0)),
        (TimeMode::Discrete, Tail::Periodic(block)) => block.iter().all(|s| is_permutation(&s.matrix, 1e-12)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::Segment;
    use nalgebra::DMatrix;

    fn follower() -> Chain {
        Chain::constant(
            TimeMode::Continuous,
            DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0 / 3.0, -1.0, 2.0 / 3.0, 0.0, 0.0, 0.0]),
        )
        .unwrap()
    }

    /// Smallest subset from which everything is reachable, by enumeration.
    fn brute_force_sroot(g: &InteractionGraph) -> usize {
        (0u32..(1 << g.n))
            .filter(|mask| {
                let roots: Vec<usize> = (0..g.n).filter(|i| mask & (1 << i) != 0).collect();
                g.reachable_from(&roots).len() == g.n
            })
            .map(|mask| mask.count_ones() as usize)
            .min()
            .expect("the full set is an s-root")
    }

    #[test]
    fn follower_graphs_and_sroot() {
        let h1 = unbounded_interactions_graph(&follower());
        let r = smallest_sroot(&h1).unwrap();
        assert_eq!((r.size, r.witness.clone()), (2, vec![0, 2]));
        let h2 = infinite_flow_graph(&follower());
        assert_eq!(h2.edges.iter().copied().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
        assert_eq!(h2.components().len(), 1);
        assert!(smallest_sroot(&h2).is_err());
    }

    #[test]
    fn zero_tail_is_edgeless() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        let c = Chain::new(TimeMode::Continuous, 2, vec![Segment::new(3.0, a)], Tail::Zero).unwrap();
        assert!(unbounded_interactions_graph(&c).edges.is_empty());
        assert_eq!(infinite_flow_graph(&c).components().len(), 2);
    }

    #[test]
    fn sub_segment_entry_creates_edge() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 0.5, 0.0, 0.0]);
        let c = Chain::new(
            TimeMode::Continuous,
            2,
            vec![],
            Tail::Periodic(vec![Segment::new(1.0, DMatrix::zeros(2, 2)), Segment::new(1.0, a)]),
        )
        .unwrap();
        let h1 = unbounded_interactions_graph(&c);
        assert_eq!(h1.edges.iter().copied().collect::<Vec<_>>(), vec![(1, 0)]);
    }

    #[test]
    fn star_sroot_matches_brute_force() {
        for k in 1..=4 {
            let edges = (1..=k).map(|leaf| (0, leaf)).collect();
            let g = InteractionGraph { kind: GraphKind::UnboundedDirected, n: k + 1, edges };
            let r = smallest_sroot(&g).unwrap();
            assert_eq!(r.size, 1);
            assert_eq!(r.witness, vec![0]);
            assert_eq!(brute_force_sroot(&g), 1);
        }
    }

    #[test]
    fn sroot_matches_brute_force_on_random_digraphs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.random_range(1..=7);
            let edges = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|&(i, j)| i != j)
                .filter(|_| rng.random::<f64>() < 0.2)
                .collect::<Vec<_>>();
            let g = InteractionGraph { kind: GraphKind::UnboundedDirected, n, edges: edges.into_iter().collect() };
            let r = smallest_sroot(&g).unwrap();
            assert_eq!(r.size, brute_force_sroot(&g));
            assert_eq!(g.reachable_from(&r.witness).len(), n);
        }
    }

    #[test]
    fn follower_bounds() {
        let b = bounds_report(&follower(), 0.0, None).unwrap();
        assert_eq!(b.rank, 2);
        assert_eq!(b.lower_sroot, 2);
        assert_eq!(b.lower_components_h2, 1);
        assert_eq!(b.upper_n_minus_h2prime, 2);
        assert_eq!(b.upper_ergodicity_classes, Some(3));
        assert!(b.all_consistent);
    }

    #[test]
    fn neutral_bounds() {
        let z = Chain::neutral(TimeMode::Continuous, 3).unwrap();
        let b = bounds_report(&z, 0.0, None).unwrap();
        assert_eq!((b.lower_components_h2, b.rank, b.upper_n_minus_h2prime), (3, 3, 3));
        assert!(b.all_consistent);
    }

    #[test]
    fn full_rank_characterizations() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        let zt = Chain::new(TimeMode::Continuous, 2, vec![Segment::new(4.0, a)], Tail::Zero).unwrap();
        assert!(full_rank_test(&zt));
        let cyc = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let c = Chain::constant(TimeMode::Discrete, cyc).unwrap();
        assert!(full_rank_test(&c));
        assert_eq!(rank(&c, 0.0, None).unwrap().rank, 3);
        let pos = Chain::constant(TimeMode::Discrete, DMatrix::from_element(3, 3, 1.0 / 3.0)).unwrap();
        assert!(!full_rank_test(&pos));
        assert_eq!(rank(&pos, 0.0, None).unwrap().rank, 1);
    }

    #[test]
    fn dot_output_lists_edges() {
        let dot = unbounded_interactions_graph(&follower()).to_dot();
        assert!(dot.starts_with("digraph H1 {"));
        assert!(dot.contains("1 -> 2;"));
        assert!(dot.contains("3 -> 2;"));
        let dot = infinite_flow_graph(&follower()).to_dot();
        assert!(dot.contains("2 -- 3;"));
    }
}
