mod common;

use std::collections::BTreeSet;

use bunforge::clustering::{read_merge_log_csv, write_merge_log_csv, ClusterState};
use bunforge::ingest::{generate_synthetic, Amount, PatternMix, TxIo, TxRecord};
use proptest::prelude::*;

fn tx_strategy() -> impl Strategy<Value = TxRecord> {
    let io = (0u8..16, 1u64..6).prop_map(|(a, v)| TxIo::new(format!("x{a}"), Amount::from_sat(v)));
    (prop::collection::vec(io.clone(), 0..4), prop::collection::vec(io, 1..5))
        .prop_map(|(inputs, outputs)| TxRecord { txid: "t".into(), height: 0, week: 0, inputs, outputs })
}

fn apply_all(txs: &[TxRecord]) -> ClusterState {
    let mut s = ClusterState::new();
    for t in txs {
        s.apply_transaction(t);
    }
    s
}

fn partition(s: &ClusterState) -> BTreeSet<BTreeSet<String>> {
    s.snapshot_partition().into_values().map(|v| v.into_iter().collect()).collect()
}

proptest! {
    #[test]
    fn partition_matches_constraint_closure(txs in prop::collection::vec(tx_strategy(), 0..40)) {
        let s = apply_all(&txs);
        let p = partition(&s);
        prop_assert_eq!(&p, &common::constraint_closure(&txs));
        // Every seen address sits in exactly one user.
        let total: usize = p.iter().map(BTreeSet::len).sum();
        prop_assert_eq!(total, s.n_addresses());
    }

    #[test]
    fn permuting_a_week_keeps_the_partition(
        txs in prop::collection::vec(tx_strategy(), 0..30),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = txs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(partition(&apply_all(&txs)), partition(&apply_all(&shuffled)));
    }

    #[test]
    fn merge_log_replays_the_state(txs in prop::collection::vec(tx_strategy(), 0..40)) {
        let s = apply_all(&txs);
        let again = apply_all(&txs);
        prop_assert_eq!(s.merge_log(), again.merge_log());
        let mut csv = Vec::new();
        write_merge_log_csv(&mut csv, s.merge_log()).unwrap();
        let log = read_merge_log_csv(&csv[..]).unwrap();
        let replayed = ClusterState::replay(s.addresses_from(0).iter().cloned(), &log);
        prop_assert_eq!(replayed.canonical_map(), s.canonical_map());
    }

    #[test]
    fn canonical_id_is_the_smallest_member(txs in prop::collection::vec(tx_strategy(), 0..40)) {
        let s = apply_all(&txs);
        for (user, members) in s.snapshot_partition() {
            let min = members.iter().map(|a| s.index_of(a).unwrap()).min().unwrap();
            prop_assert_eq!(user.0, min);
            for a in &members {
                // find is idempotent: resolving the canonical index gives itself.
                prop_assert_eq!(s.find_user(a).unwrap(), user);
                prop_assert_eq!(s.user_of_index(user.0), user);
            }
        }
    }
}

#[test]
fn synthetic_stream_matches_brute_force_closure() {
    let txs: Vec<TxRecord> = generate_synthetic(5, 1000, PatternMix::default()).map(Result::unwrap).collect();
    assert_eq!(partition(&apply_all(&txs)), common::constraint_closure(&txs));
}

#[test]
fn worked_partition() {
    let s = apply_all(&common::worked_example());
    let expected: BTreeSet<BTreeSet<String>> = [vec!["A", "C", "D", "G"], vec!["B", "E"], vec!["F"]]
        .into_iter()
        .map(|g| g.into_iter().map(String::from).collect())
        .collect();
    assert_eq!(partition(&s), expected);
    assert_eq!(s.n_users(), 3);
    assert!(ClusterState::new().snapshot_partition().is_empty());
}
