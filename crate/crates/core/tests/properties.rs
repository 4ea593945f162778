use std::collections::BTreeMap;

use egc::chain::{Chain, Tail, TimeMode};
use egc::coalition::{smallest_egc, steer};
use egc::decomposition::{absolute_probability_sequence, reversed_chain, sonin_decomposition, SoninConfig};
use egc::fixtures;
use egc::geometry::{ergodicity_classes, vertex_count_trace};
use egc::graph::{infinite_flow_graph, smallest_sroot, unbounded_interactions_graph};
use egc::rank::{nullspace_numerical, rank, rank_numerical};
use egc::transition::{default_schedule, phi};
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Any kind of generated chain, chosen by `kind`.
fn generated(kind: u8, seed: u64) -> Chain {
    match kind % 8 {
        0 => fixtures::random_ti_continuous(seed),
        1 => fixtures::random_ti_discrete(seed),
        2 => fixtures::random_periodic(seed, TimeMode::Continuous),
        3 => fixtures::random_periodic(seed, TimeMode::Discrete),
        4 => fixtures::random_zero_tail(seed, TimeMode::Continuous),
        5 => fixtures::random_zero_tail(seed, TimeMode::Discrete),
        6 => fixtures::random_ti_digraph(seed),
        _ => fixtures::random_permutation_tail(seed),
    }
}

fn chain_strategy() -> impl Strategy<Value = Chain> {
    (any::<u8>(), any::<u64>()).prop_map(|(k, s)| generated(k, s))
}

/// Time-invariant or periodic chains.
fn tailed_strategy() -> impl Strategy<Value = Chain> {
    (0u8..4, any::<u64>()).prop_map(|(k, s)| generated(k, s))
}

fn discrete_strategy() -> impl Strategy<Value = Chain> {
    (prop_oneof![Just(1u8), Just(3), Just(5)], any::<u64>()).prop_map(|(k, s)| generated(k, s))
}

fn snap(chain: &Chain, t: f64) -> f64 {
    match chain.mode() {
        TimeMode::Discrete => t.floor(),
        TimeMode::Continuous => t,
    }
}

fn same_bits(a: &Chain, b: &Chain) -> bool {
    let bits = |c: &Chain| -> Vec<u64> {
        let mut v: Vec<u64> = c.prefix().iter().flat_map(|s| s.matrix.iter().map(|x| x.to_bits())).collect();
        if let Tail::Periodic(block) = c.tail() {
            v.extend(block.iter().flat_map(|s| s.matrix.iter().map(|x| x.to_bits())));
        }
        v
    };
    bits(a) == bits(b) && a == b
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn json_round_trip_is_bit_exact(c in chain_strategy(), seed in any::<u64>()) {
        let back = Chain::from_json_str(&c.to_json_string()).unwrap();
        prop_assert!(same_bits(&c, &back));
        let p = c.perturb_summable(seed, 0.1).unwrap();
        prop_assert!(same_bits(&p, &Chain::from_json_str(&p.to_json_string()).unwrap()));
    }

    #[test]
    fn evaluate_at_is_constant_on_segments(c in chain_strategy(), frac in 0.0f64..1.0) {
        let mut start = 0.0;
        for seg in c.prefix() {
            let t = snap(&c, start + frac * seg.duration);
            prop_assert_eq!(&c.evaluate_at(t).unwrap(), &seg.matrix);
            start += seg.duration;
        }
        if let Tail::Periodic(block) = c.tail() {
            let period = c.period().unwrap();
            for cycle in [0.0, 3.0] {
                let mut at = start + cycle * period;
                for seg in block {
                    let t = snap(&c, at + frac * seg.duration);
                    prop_assert_eq!(&c.evaluate_at(t).unwrap(), &seg.matrix);
                    at += seg.duration;
                }
            }
        }
    }

    #[test]
    fn operations_preserve_validity(k in any::<u8>(), s1 in any::<u64>(), s2 in any::<u64>(), alpha in 0.01f64..5.0) {
        let a = generated(k, s1);
        let b = generated(k, s2);
        prop_assert!(a.perturb_summable(s2, 0.1).unwrap().validate().is_valid());
        if a.mode() == TimeMode::Continuous {
            prop_assert!(a.scale(alpha).unwrap().validate().is_valid());
            if a.n() == b.n() {
                prop_assert!(a.add(&b).unwrap().validate().is_valid());
            }
        }
    }

    #[test]
    fn transitions_are_stochastic_semigroups(c in chain_strategy(), a in 0.0f64..20.0, b in 0.0f64..20.0, d in 0.0f64..20.0) {
        let mut ts = [snap(&c, a), snap(&c, a + b), snap(&c, a + b + d)];
        ts.sort_by(f64::total_cmp);
        let [tau, s, t] = ts;
        let p_ts = phi(&c, t, s).unwrap().matrix;
        let p_st = phi(&c, s, tau).unwrap().matrix;
        let p_tt = phi(&c, t, tau).unwrap().matrix;
        prop_assert!((&p_ts * &p_st - &p_tt).amax() < 1e-10);
        for row in p_tt.row_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-10);
        }
        prop_assert!(p_tt.min() >= -1e-10);
        if c.mode() == TimeMode::Continuous {
            // Liouville: det Φ(t, τ) = exp(∫ tr A)
            let trace: f64 = c.pieces(tau, t).iter().map(|seg| seg.duration * seg.matrix.trace()).sum();
            let expected = trace.exp();
            if expected > 1e-6 {
                let det = p_tt.determinant();
                prop_assert!(det > 0.0 && (det - expected).abs() < 1e-8 * (1.0 + expected), "det {} vs {}", det, expected);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn null_basis_decays_and_counts_add_up(c in chain_strategy()) {
        let r = rank(&c, 0.0, None).unwrap();
        prop_assert_eq!(r.rank + r.nullity, c.n());
        let b = &r.basis;
        if b.dim() > 0 {
            let p = phi(&c, b.horizon_used, 0.0).unwrap().matrix;
            prop_assert!((p * &b.basis).amax() < b.verification_tolerance());
        }
    }

    #[test]
    fn exact_and_numerical_ranks_agree(c in tailed_strategy()) {
        let exact = rank(&c, 0.0, None).unwrap();
        // Horizons run past the point where the exact null basis has decayed,
        // so slowly mixing chains are resolved as well.
        let late = match c.mode() {
            TimeMode::Discrete => c.prefix_end().ceil(),
            TimeMode::Continuous => 0.0,
        };
        let mut schedule = default_schedule(&c, late);
        while *schedule.last().unwrap() < exact.basis.horizon_used + late {
            let next = 2.0 * schedule.last().unwrap() - late;
            schedule.push(next);
        }
        let next = 2.0 * schedule.last().unwrap() - late;
        schedule.push(next);
        let numerical = nullspace_numerical(&c, late, 1e-6, &schedule).unwrap();
        prop_assert_eq!(exact.nullity, numerical.basis.dim());
        if exact.basis.horizon_used <= *default_schedule(&c, 0.0).last().unwrap() {
            prop_assert_eq!(exact.rank, rank_numerical(&c, 0.0, 1e-6).unwrap().rank);
        }
    }

    #[test]
    fn continuous_rank_does_not_depend_on_start(k in prop_oneof![Just(0u8), Just(2), Just(4), Just(6)], seed in any::<u64>()) {
        let c = generated(k, seed);
        let r0 = rank(&c, 0.0, None).unwrap().rank;
        for tau in [1.5, 7.0] {
            prop_assert_eq!(rank(&c, tau, None).unwrap().rank, r0);
        }
    }

    #[test]
    fn discrete_local_nullity_settles(c in discrete_strategy()) {
        let end = c.prefix_end() as usize + 2;
        let locals: Vec<usize> = (0..=end).map(|t| rank(&c, t as f64, None).unwrap().local_nullity).collect();
        prop_assert!(locals.windows(2).all(|w| w[1] <= w[0]), "{:?}", locals);
        let r = rank(&c, 0.0, None).unwrap();
        prop_assert_eq!(*locals.last().unwrap(), r.nullity);
    }

    #[test]
    fn smallest_coalition_has_rank_size(c in tailed_strategy()) {
        let egc = smallest_egc(&c, 0.0).unwrap();
        let r = rank(&c, 0.0, None).unwrap();
        // discrete coalitions follow the local null space, which a singular prefix can enlarge,
        // so they are never larger than the rank
        prop_assert_eq!(egc.size(), c.n() - r.local_nullity);
        prop_assert!(egc.size() <= r.rank);
        if c.mode() == TimeMode::Continuous {
            prop_assert_eq!(egc.size(), r.rank);
        }
    }

    #[test]
    fn steering_reaches_target_and_translates(c in tailed_strategy(), target in -10.0f64..10.0, shift in -5.0f64..5.0, vals in proptest::collection::vec(-10.0f64..10.0, 8)) {
        let egc = smallest_egc(&c, 0.0).unwrap();
        let fixed: BTreeMap<usize, f64> = egc.complement_rows.iter().zip(&vals).map(|(&i, &v)| (i, v)).collect();
        let plan = steer(&c, &egc, target, &fixed, None).unwrap();
        prop_assert!(plan.residual < 10.0 * egc.basis.tolerance, "residual {} cond {} scale {}", plan.residual, plan.condition_number, plan.initial.amax());
        prop_assert!(plan.max_deviation < 1e-5);
        let moved: BTreeMap<usize, f64> = fixed.iter().map(|(&i, &v)| (i, v + shift)).collect();
        let plan2 = steer(&c, &egc, target + shift, &moved, None).unwrap();
        for (i, v) in &plan.coalition_opinions {
            prop_assert!((plan2.coalition_opinions[i] - v - shift).abs() < 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn coalition_is_independent_of_thread_count(c in tailed_strategy()) {
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| smallest_egc(&c, 0.0).unwrap())
        };
        let a = run(1);
        let b = run(4);
        prop_assert_eq!(&a.members, &b.members);
        prop_assert_eq!(a.basis.basis, b.basis.basis);
    }

    #[test]
    fn graphs_are_consistent(c in chain_strategy()) {
        let h1 = unbounded_interactions_graph(&c);
        let h2 = infinite_flow_graph(&c);
        let sym: std::collections::BTreeSet<(usize, usize)> =
            h1.edges.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
        prop_assert_eq!(&h2.edges, &sym);
        let root = smallest_sroot(&h1).unwrap();
        prop_assert_eq!(h1.reachable_from(&root.witness).len(), c.n());
        if c.time_invariant().is_some() && c.mode() == TimeMode::Continuous {
            prop_assert_eq!(root.size, rank(&c, 0.0, None).unwrap().rank);
        }
    }

    #[test]
    fn polytopes_nest_and_stay_independent(c in tailed_strategy()) {
        let schedule = default_schedule(&c, 0.0);
        let trace = vertex_count_trace(&c, 0.0, &schedule, 1e-6).unwrap();
        prop_assert!(trace.violations.is_empty(), "{:?}", trace.violations);
        let classes = ergodicity_classes(&c, 0.0, &schedule, 1e-6).unwrap();
        let last = trace.snapshots.last().unwrap();
        prop_assert!(last.vertex_count <= classes.classes.len());
        let verts: DMatrix<f64> = last.points.select_rows(&last.vertex_indices);
        let sv = verts.svd(false, false).singular_values;
        let independent = sv.iter().filter(|&&s| s > 1e-8 * sv.max().max(1.0)).count();
        prop_assert_eq!(independent, last.vertex_count);
        if c.mode() == TimeMode::Continuous {
            let later = vertex_count_trace(&c, 2.0, &default_schedule(&c, 2.0), 1e-6).unwrap();
            prop_assert_eq!(later.final_count(), trace.final_count());
        }
    }

    #[test]
    fn backward_sequences_and_reversed_chains(c in discrete_strategy()) {
        let aps = absolute_probability_sequence(&c, 60).unwrap();
        for t in 0..aps.horizon {
            let a = c.evaluate_at(t as f64).unwrap();
            prop_assert!((a.transpose() * &aps.pis[t + 1] - &aps.pis[t]).amax() < 1e-10);
            prop_assert!((aps.pis[t].sum() - 1.0).abs() < 1e-10);
        }
        for p in reversed_chain(&aps, &c).unwrap() {
            for row in p.row_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-10);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn jets_partition_the_agents(c in discrete_strategy()) {
        let d = sonin_decomposition(&c, &SoninConfig { horizon: Some(c.prefix_end() as usize + 400), ..Default::default() }).unwrap();
        prop_assert!(d.is_partition(c.n()));
    }
}

#[test]
fn pstar_chains_have_rank_h2_and_no_vanishing_jet() {
    for (c, h) in fixtures::pstar_suite() {
        assert_eq!(rank(&c, 0.0, None).unwrap().rank, h);
        let d = sonin_decomposition(&c, &SoninConfig::default()).unwrap();
        assert!(d.min_pi > 0.0);
        assert!(d.j0.sets.iter().all(|s| s.is_empty()));
    }
}
