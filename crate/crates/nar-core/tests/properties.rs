//! Property tests for the structural invariants.

use proptest::prelude::*;
use proptest::strategy::ValueTree;

use nar_core::graph::{ArchGraph, NodeRecord, Permutation};
use nar_core::numeric::tape::Tape;
use nar_core::objectives;
use nar_core::tokenizer::encode_scalar;

/// Strategy: a DAG over up to 7 nodes with random forward edges, relabeled
/// by a random permutation so the stored order is arbitrary.
fn arb_dag() -> impl Strategy<Value = ArchGraph> {
    (2usize..=7)
        .prop_flat_map(|n| {
            let edges = proptest::collection::vec(proptest::bool::ANY, n * (n - 1) / 2);
            let ops = proptest::collection::vec(0usize..4, n);
            let perm = Just(()).prop_perturb(move |_, mut rng| {
                let mut p: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                    p.swap(i, j);
                }
                p
            });
            (Just(n), edges, ops, perm)
        })
        .prop_map(|(n, mask, ops, perm)| {
            let nodes = ops.into_iter().map(NodeRecord::op).collect();
            let mut edges = Vec::new();
            let mut k = 0;
            for dst in 1..n {
                for src in 0..dst {
                    if mask[k] {
                        edges.push((src, dst));
                    }
                    k += 1;
                }
            }
            let g = ArchGraph::new(nodes, edges, None).expect("forward edges are acyclic");
            g.relabel(&Permutation::new(perm).unwrap())
                .expect("relabel keeps validity")
        })
}

fn arb_perm(n: usize) -> impl Strategy<Value = Permutation> {
    Just(()).prop_perturb(move |_, mut rng| {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            p.swap(i, j);
        }
        Permutation::new(p).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn toposort_visits_every_node(g in arb_dag()) {
        let order = g.topological_sort().unwrap();
        prop_assert_eq!(order.len(), g.n_nodes());
        let mut rank = vec![0; g.n_nodes()];
        for (r, &v) in order.iter().enumerate() {
            rank[v] = r;
        }
        for &(a, b) in g.edges() {
            prop_assert!(rank[a] < rank[b]);
        }
    }

    #[test]
    fn relabel_composition_and_inverse(g in arb_dag()) {
        let n = g.n_nodes();
        let runner = &mut proptest::test_runner::TestRunner::deterministic();
        let p = arb_perm(n).new_tree(runner).unwrap().current();
        let q = arb_perm(n).new_tree(runner).unwrap().current();
        let composed = g.relabel(&p.compose(&q).unwrap()).unwrap();
        let stepwise = g.relabel(&q).unwrap().relabel(&p).unwrap();
        prop_assert_eq!(&composed, &stepwise);
        prop_assert_eq!(&g.relabel(&p).unwrap().relabel(&p.inverse()).unwrap(), &g);
        // node multiset and edge count preserved
        prop_assert_eq!(composed.n_nodes(), g.n_nodes());
        prop_assert_eq!(composed.edges().len(), g.edges().len());
    }

    #[test]
    fn flow_consistent_relabel_ascends(g in arb_dag()) {
        for p in nar_core::augment::enumerate_flow_consistent(&g, 16) {
            prop_assert!(g.is_flow_consistent_order(&p).unwrap());
            let r = g.relabel(&p).unwrap();
            prop_assert!(r.edges().iter().all(|&(a, b)| a < b));
        }
    }

    #[test]
    fn encode_scalar_stays_bounded(p in -64.0f64..64.0, l in 2usize..16) {
        let v = encode_scalar(p, l).unwrap();
        prop_assert_eq!(v.len(), 2 * l);
        prop_assert!(v.iter().all(|x| x.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn sr_loss_translation_invariant(
        values in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 2..12),
        offset in -5.0f64..5.0,
    ) {
        let (pred, target): (Vec<f64>, Vec<f64>) = values.into_iter().unzip();
        let shuffle: Vec<usize> = (0..pred.len()).rev().collect();
        let eval = |p: &[f64], t: &[f64]| {
            let mut tape: Tape<'_, f64> = Tape::inference();
            let pv = tape.leaf_owned(p.len(), 1, p.to_vec(), false).unwrap();
            let tv = tape.leaf_owned(t.len(), 1, t.to_vec(), false).unwrap();
            let l = objectives::sr_loss(&mut tape, pv, tv, &shuffle).unwrap();
            tape.scalar_value(l).unwrap()
        };
        let base = eval(&pred, &target);
        let shifted: Vec<f64> = pred.iter().map(|v| v + offset).collect();
        prop_assert!((eval(&shifted, &target) - base).abs() < 1e-9);
        let t_shifted: Vec<f64> = target.iter().map(|v| v + offset).collect();
        prop_assert!((eval(&shifted, &t_shifted) - base).abs() < 1e-9);
    }

    #[test]
    fn kendall_tau_monotone_invariant(
        values in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..10),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = values.into_iter().unzip();
        if let Ok(tau) = objectives::kendall_tau(&a, &b) {
            // strictly monotone transforms of either side keep tau
            let a2: Vec<f64> = a.iter().map(|v| v * 3.0 + 1.0).collect();
            let b2: Vec<f64> = b.iter().map(|v| v.exp()).collect();
            prop_assert!((objectives::kendall_tau(&a2, &b).unwrap() - tau).abs() < 1e-12);
            prop_assert!((objectives::kendall_tau(&a, &b2).unwrap() - tau).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_augmentations_valid(g in arb_dag(), k in 0usize..6, seed in 0u64..1000) {
        for mode in [nar_core::augment::AugMode::Flow, nar_core::augment::AugMode::Isomorphic] {
            let samples = nar_core::augment::sample_augmented(&g, k, mode, seed).unwrap();
            prop_assert!(samples.len() <= k);
            let original = g.canonical_hash();
            for s in &samples {
                prop_assert!(s.topological_sort().is_ok());
                prop_assert_ne!(s.canonical_hash(), original.clone());
            }
        }
    }
}
