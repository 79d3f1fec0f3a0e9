mod common;

use std::collections::{BTreeSet, HashMap};

use bunforge::clustering::UserId;
use bunforge::components::{component_stats, scc, scc_labels, wcc};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn edges_strategy(max_n: u32) -> impl Strategy<Value = (u32, Vec<(u32, u32)>)> {
    (1..=max_n).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..(n as usize * 3))))
}

#[test]
fn all_four_node_digraphs_match_the_oracle() {
    let pairs: Vec<(u32, u32)> = (0..4).flat_map(|s| (0..4).filter(move |&t| t != s).map(move |t| (s, t))).collect();
    for mask in 0u32..(1 << pairs.len()) {
        let edges: Vec<(u32, u32)> = (0..pairs.len()).filter(|i| mask >> i & 1 == 1).map(|i| pairs[i]).collect();
        let g = common::snapshot(4, &edges);
        assert_eq!(common::as_set(wcc(&g)), common::wcc_oracle(4, &edges), "mask {mask}");
        assert_eq!(common::as_set(scc(&g)), common::scc_oracle(4, &edges), "mask {mask}");
    }
}

#[test]
fn random_digraphs_match_the_oracle() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..300 {
        let n = rng.gen_range(1..=50);
        let p = rng.gen_range(0.0..0.1);
        let edges = common::random_edges(&mut rng, n, p);
        let g = common::snapshot(n, &edges);
        assert_eq!(common::as_set(wcc(&g)), common::wcc_oracle(n as usize, &edges));
        assert_eq!(common::as_set(scc(&g)), common::scc_oracle(n as usize, &edges));
    }
}

proptest! {
    #[test]
    fn structural_invariants((n, edges) in edges_strategy(30)) {
        let g = common::snapshot(n, &edges);
        let w = wcc(&g);
        let s = scc(&g);
        let stats = component_stats(&g).unwrap();
        prop_assert!(stats.lwcc_size >= stats.second_wcc_size);
        prop_assert!(stats.lscc_size >= stats.second_scc_size);
        prop_assert!(stats.n_wcc <= stats.n_scc);
        prop_assert_eq!(w.iter().map(Vec::len).sum::<usize>(), g.n_nodes());
        prop_assert_eq!(s.iter().map(Vec::len).sum::<usize>(), g.n_nodes());
        prop_assert!((0.0..=1.0).contains(&stats.lwcc_relative()));
        prop_assert!((0.0..=1.0).contains(&stats.lscc_relative()));

        // Every SCC lies inside exactly one WCC.
        let wcc_of: HashMap<UserId, usize> =
            w.iter().enumerate().flat_map(|(i, c)| c.iter().map(move |u| (*u, i))).collect();
        for c in &s {
            let owners: BTreeSet<usize> = c.iter().map(|u| wcc_of[u]).collect();
            prop_assert_eq!(owners.len(), 1);
        }

        // Contracting SCCs leaves a DAG: Tarjan labels every condensed edge
        // from a later-finished component to an earlier one.
        let (labels, _) = scc_labels(&g);
        for (a, b) in g.dense_edges() {
            let (la, lb) = (labels[a as usize], labels[b as usize]);
            prop_assert!(la >= lb);
        }
    }
}

#[test]
fn worked_components() {
    let g = common::snapshot(6, &[(0, 1), (1, 0), (0, 5)]).without_isolated();
    let s = component_stats(&g).unwrap();
    assert_eq!((s.n_wcc, s.lwcc_size, s.second_wcc_size), (1, 3, 0));
    assert_eq!((s.n_scc, s.lscc_size, s.second_scc_size), (2, 2, 1));
}
