use egc::chain::{Chain, Segment, Tail, TimeMode};
use egc::coalition::{verify_egc, VerifyConfig};
use egc::decomposition::{
    absolute_probability_sequence, jet_flow, jet_lower_bound, reversed_chain, sonin_decomposition, Jet, SoninConfig,
};
use egc::fixtures;
use egc::geometry::vertex_count_trace;
use egc::graph::{bounds_report, full_rank_test, infinite_flow_graph};
use egc::rank::{rank, rank_exact_periodic, RankMethod};
use egc::transition::limit_phi;
use nalgebra::DMatrix;

fn m(n: usize, rows: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, rows)
}

fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

#[test]
fn dyadic_chain_a_pieces() {
    let a = fixtures::dyadic_a(5);
    let at = a.evaluate_at(3.5).unwrap();
    assert_eq!(at, m(3, &[-1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
}

#[test]
fn dyadic_sum_on_second_interval_is_b() {
    let sum = fixtures::dyadic_sum(5);
    let b = m(3, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0]);
    for t in [1.0, 1.5, 1.999] {
        assert_eq!(sum.evaluate_at(t).unwrap(), b);
    }
}

#[test]
fn dyadic_chain_a_limit_rows() {
    let a = fixtures::dyadic_a(5);
    let est = limit_phi(&a, 0.0, &[15.0, 63.0, 255.0, 1023.0]).unwrap();
    assert_eq!(est.deltas.len(), 3);
    assert!(est.deltas.windows(2).all(|w| w[1] < w[0]), "deltas {:?}", est.deltas);
    // Every row heads for e3, slowly: the distance shrinks along the schedule.
    let e3 = DMatrix::from_fn(3, 3, |_, j| if j == 2 { 1.0 } else { 0.0 });
    let dist: Vec<f64> = [15.0, 63.0, 255.0, 1023.0]
        .iter()
        .map(|&t| max_diff(&limit_phi(&a, 0.0, &[t]).unwrap().matrix, &e3))
        .collect();
    assert!(dist.windows(2).all(|w| w[1] < w[0]), "distances {:?}", dist);
    assert!(dist[3] < 0.1, "distances {:?}", dist);
}

#[test]
fn scaling_keeps_rank() {
    let zero = Chain::neutral(TimeMode::Continuous, 3).unwrap();
    assert_eq!(zero.scale(5.0).unwrap(), zero);
    for seed in 0..4 {
        let c = fixtures::random_periodic(seed, TimeMode::Continuous);
        let r = rank(&c, 0.0, None).unwrap().rank;
        for alpha in [0.5, 3.0] {
            assert_eq!(rank(&c.scale(alpha).unwrap(), 0.0, None).unwrap().rank, r);
        }
    }
}

#[test]
fn zero_magnitude_perturbation_is_identity() {
    let c = fixtures::random_periodic(3, TimeMode::Discrete);
    assert_eq!(c.perturb_summable(9, 0.0).unwrap(), c);
}

#[test]
fn periodic_route_on_single_segment_tail() {
    let follower = fixtures::follower();
    let rep = rank_exact_periodic(&follower, 0.0).unwrap();
    assert_eq!(rep.method, RankMethod::ExactPeriodic);
    assert_eq!(rep.rank, 2);
}

#[test]
fn permutation_and_positive_tails() {
    let cyc = m(3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let c = Chain::constant(TimeMode::Discrete, cyc).unwrap();
    assert!(full_rank_test(&c));
    assert_eq!(rank(&c, 0.0, None).unwrap().rank, 3);

    let ds = m(3, &[0.5, 0.25, 0.25, 0.25, 0.5, 0.25, 0.25, 0.25, 0.5]);
    let c = Chain::constant(TimeMode::Discrete, ds).unwrap();
    assert!(!full_rank_test(&c));
    assert_eq!(rank(&c, 0.0, None).unwrap().rank, 1);

    for seed in 0..3 {
        let c = fixtures::random_permutation_tail(seed);
        assert_eq!(rank(&c, 0.0, None).unwrap().rank, c.n());
    }
}

#[test]
fn verify_rejects_non_coalitions() {
    let follower = fixtures::follower();
    let cfg = VerifyConfig { trials: 8, target: 1.0, horizon: 100.0, tol: 1e-5, seed: 11 };
    assert!(verify_egc(&follower, &[0, 2], 0.0, &cfg).unwrap());
    assert!(!verify_egc(&follower, &[1], 0.0, &cfg).unwrap());
    assert!(verify_egc(&follower, &[0, 1, 2], 0.0, &cfg).unwrap());
}

#[test]
fn disjoint_blocks_give_two_flow_components() {
    let a = m(
        4,
        &[-1.0, 1.0, 0.0, 0.0, 2.0, -2.0, 0.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, 3.0, -3.0],
    );
    let c = Chain::constant(TimeMode::Continuous, a).unwrap();
    let comps = infinite_flow_graph(&c).components();
    assert_eq!(comps, vec![vec![0, 1], vec![2, 3]]);
    let b = bounds_report(&c, 0.0, None).unwrap();
    assert_eq!(b.lower_components_h2, 2);
    assert_eq!(b.rank, 2);
}

#[test]
fn singular_first_step_lowers_early_vertex_count() {
    let collapse = m(3, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let c = Chain::new(
        TimeMode::Discrete,
        3,
        vec![Segment::new(1.0, collapse)],
        Tail::Periodic(vec![Segment::new(1.0, DMatrix::identity(3, 3))]),
    )
    .unwrap();
    let at0 = vertex_count_trace(&c, 0.0, &[4.0, 8.0], 1e-6).unwrap().final_count().unwrap();
    let at1 = vertex_count_trace(&c, 1.0, &[4.0, 8.0], 1e-6).unwrap().final_count().unwrap();
    assert_eq!((at0, at1), (2, 3));
    let r0 = rank(&c, 0.0, None).unwrap();
    let r1 = rank(&c, 1.0, None).unwrap();
    assert_eq!(at0, 3 - r0.local_nullity);
    assert_eq!(at1, 3 - r1.local_nullity);
}

#[test]
fn copy_step_concentrates_backward_mass() {
    let copy = m(2, &[1.0, 0.0, 1.0, 0.0]);
    let c = Chain::new(
        TimeMode::Discrete,
        2,
        vec![Segment::new(1.0, copy)],
        Tail::Periodic(vec![Segment::new(1.0, DMatrix::identity(2, 2))]),
    )
    .unwrap();
    let aps = absolute_probability_sequence(&c, 1).unwrap();
    assert_eq!(aps.pis[1].as_slice(), &[0.5, 0.5]);
    assert!((aps.pis[0][0] - 1.0).abs() < 1e-15 && aps.pis[0][1].abs() < 1e-15);
}

#[test]
fn doubly_stochastic_reverses_to_transpose() {
    let ds = m(3, &[0.2, 0.3, 0.5, 0.5, 0.2, 0.3, 0.3, 0.5, 0.2]);
    let c = Chain::constant(TimeMode::Discrete, ds.clone()).unwrap();
    let aps = absolute_probability_sequence(&c, 6).unwrap();
    for p in reversed_chain(&aps, &c).unwrap() {
        assert!(max_diff(&p, &ds.transpose()) < 1e-12);
    }
}

#[test]
fn self_flow_is_internal_mass_flow() {
    let a = m(2, &[0.9, 0.1, 0.2, 0.8]);
    let c = Chain::constant(TimeMode::Discrete, a.clone()).unwrap();
    let horizon = 20;
    let aps = absolute_probability_sequence(&c, horizon).unwrap();
    let j = Jet::constant(vec![0], 0, horizon);
    let self_flow = jet_flow(&j, &j, &aps, &c).unwrap();
    // r_11(t) = π_1(t+1) a_11, counted once per direction
    let expect: f64 = (0..horizon).map(|t| 2.0 * aps.pis[t + 1][0] * a[(0, 0)]).sum();
    assert!((self_flow - expect).abs() < 1e-12, "{} vs {}", self_flow, expect);
}

#[test]
fn jet_lower_bound_cases() {
    let horizon = 200;
    // decoupled: identity on agent 3, ergodic block on {1,2}
    let a = m(3, &[0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 1.0]);
    let c = Chain::constant(TimeMode::Discrete, a).unwrap();
    let h2: Vec<Jet> = infinite_flow_graph(&c)
        .components()
        .into_iter()
        .map(|comp| Jet::constant(comp, 0, horizon))
        .collect();
    assert_eq!(h2.len(), 2);
    assert_eq!(jet_lower_bound(&c, &h2).unwrap(), 2);

    let leaky = m(2, &[0.5, 0.5, 0.5, 0.5]);
    let c = Chain::constant(TimeMode::Discrete, leaky).unwrap();
    assert_eq!(jet_lower_bound(&c, &[Jet::constant(vec![0], 0, horizon)]).unwrap(), 0);

    let (c, h) = fixtures::pstar_suite().into_iter().nth(1).unwrap();
    let dec = sonin_decomposition(&c, &SoninConfig::default()).unwrap();
    assert!(dec.converged);
    let r = rank(&c, 0.0, None).unwrap().rank;
    assert_eq!(dec.jet_count(), h);
    assert_eq!(jet_lower_bound(&c, &dec.jets).unwrap(), r);
}
