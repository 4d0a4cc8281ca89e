use ntp_core::shardmap::{balanced_sizes, build_reshard_plan, build_shard_map, naive_contiguous_sync_volumes, ReshardDirection};
use proptest::prelude::*;

fn triple() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=64).prop_flat_map(|n1| (1..=n1).prop_flat_map(move |n2| (n1..=4096usize).prop_map(move |k| (k, n1, n2))))
}

fn counts(ranks: &[usize], n: usize) -> Vec<usize> {
    let mut c = vec![0; n];
    for &r in ranks {
        c[r] += 1;
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn map_invariants((k, n1, n2) in triple()) {
        let m = build_shard_map(k, n1, n2).unwrap();
        prop_assert_eq!(m.comp_rank().len(), k);
        prop_assert_eq!(m.sync_rank().len(), k);
        prop_assert!(m.comp_rank().iter().all(|&r| r < n1));
        prop_assert!(m.sync_rank().iter().all(|&r| r < n2));

        let comp = counts(m.comp_rank(), n1);
        prop_assert!(comp.iter().all(|&c| c == k / n1 || c == k.div_ceil(n1)), "comp counts {:?}", comp);

        // contiguous and nondecreasing means every sync shard is one range
        prop_assert!(m.sync_rank().windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
        prop_assert_eq!(counts(m.sync_rank(), n2), balanced_sizes(k, n2));

        // each sync rank keeps a prefix of its shard
        for (i, cols) in m.sync_columns().iter().enumerate() {
            let kept = cols.iter().take_while(|&&j| m.comp_rank()[j] == i).count();
            prop_assert!(cols[kept..].iter().all(|&j| m.comp_rank()[j] >= n2));
        }

        if n1 > n2 {
            let received = &comp[n2..];
            let (lo, hi) = (received.iter().min().unwrap(), received.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "offload receive counts {:?}", received);
        } else {
            prop_assert!(m.is_identity());
        }
    }

    #[test]
    fn plans_are_mutual_inverses((k, n1, n2) in triple()) {
        let m = build_shard_map(k, n1, n2).unwrap();
        let pre = build_reshard_plan(&m, ReshardDirection::PreSync);
        let post = build_reshard_plan(&m, ReshardDirection::PostSync);
        let staged = pre.apply(m.comp_rank()).unwrap();
        prop_assert_eq!(&staged[..], m.sync_rank());
        prop_assert_eq!(&post.apply(&staged).unwrap()[..], m.comp_rank());
        prop_assert_eq!(pre.stats(n1).total_moved, k - m.retained());
        for t in pre.transfers.iter().chain(&post.transfers) {
            prop_assert!(t.cols.windows(2).all(|w| w[0] < w[1]));
        }
    }
}

#[test]
fn reduced_by_two_of_thirty_two() {
    let m = build_shard_map(12000, 32, 30).unwrap();
    assert!(counts(m.comp_rank(), 32).iter().all(|&c| c == 375));
    assert!(m.sync_columns().iter().all(|c| c.len() == 400));

    let pre = build_reshard_plan(&m, ReshardDirection::PreSync).stats(32);
    let post = build_reshard_plan(&m, ReshardDirection::PostSync).stats(32);
    assert_eq!(pre.total_moved, 750);
    assert_eq!(post.total_moved, 750);
    // sync ranks hand 25 columns each back to two offload ranks of 375
    assert!(post.sent_per_rank[..30].iter().all(|&s| s == 25));
    assert_eq!(&post.received_per_rank[30..], &[375, 375]);
    assert_eq!((post.max_sent, post.max_received), (25, 375));

    let naive = naive_contiguous_sync_volumes(12000, 32, 30).unwrap();
    assert_eq!(naive[0].iter().map(|o| (o.healthy_shard, o.columns)).collect::<Vec<_>>(), [(0, 375), (1, 25)]);
}

#[test]
fn brute_force_small_balance() {
    // every (k, n1, n2) up to 24 columns against directly counted shard sizes
    for k in 1..=24 {
        for n1 in 1..=k.min(8) {
            for n2 in 1..=n1 {
                let m = build_shard_map(k, n1, n2).unwrap();
                let mut seen = vec![0; k];
                for cols in m.comp_columns() {
                    for j in cols {
                        seen[j] += 1;
                    }
                }
                assert!(seen.iter().all(|&s| s == 1), "k={k} n1={n1} n2={n2}");
            }
        }
    }
}
