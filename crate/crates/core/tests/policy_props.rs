use ntp_core::failure::{Cluster, FailureModelConfig};
use ntp_core::policy::{pack_failed_domains, MinibatchMode, ParallelConfig, Planner, Policy, ReducedTpTable};
use ntp_core::simulator::{run, SimConfig, ThroughputReport};
use proptest::prelude::*;

fn cfg(pp: usize, dp: usize) -> ParallelConfig {
    ParallelConfig { tp: 32, pp, dp, domain_size: 32, local_batch: 8, seq_len: 16384 }
}

fn planner(c: ParallelConfig, policy: Policy, mode: MinibatchMode, spares: usize) -> Planner {
    Planner::new(c, ReducedTpTable::published(), policy, mode, spares).unwrap()
}

/// Slot healthy counts, mostly full, some partial or dead.
fn counts(n: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(prop_oneof![6 => Just(32usize), 2 => 28usize..32, 1 => 0usize..28], n)
}

/// Every way to split `slots` into groups of `pp`; calls `f` with each.
fn partitions(slots: &mut Vec<usize>, pp: usize, acc: &mut Vec<Vec<usize>>, f: &mut impl FnMut(&[Vec<usize>])) {
    if slots.is_empty() {
        f(acc);
        return;
    }
    let first = slots.remove(0);
    let rest = slots.clone();
    let mut choose = |chosen: &[usize]| {
        let mut remaining: Vec<usize> = rest.iter().copied().filter(|s| !chosen.contains(s)).collect();
        let mut group = vec![first];
        group.extend_from_slice(chosen);
        acc.push(group);
        partitions(&mut remaining, pp, acc, f);
        acc.pop();
    };
    combinations(&rest, pp - 1, &mut Vec::new(), 0, &mut choose);
    slots.insert(0, first);
}

fn combinations(items: &[usize], k: usize, cur: &mut Vec<usize>, start: usize, f: &mut impl FnMut(&[usize])) {
    if cur.len() == k {
        f(cur);
        return;
    }
    for i in start..items.len() {
        cur.push(items[i]);
        combinations(items, k, cur, i + 1, f);
        cur.pop();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn packing_is_optimal_against_brute_force(pp in 1usize..=4, groups in 1usize..=3, seed_counts in prop::collection::vec(prop_oneof![Just(32usize), 28usize..32], 12)) {
        let n = pp * groups;
        let c = &seed_counts[..n];
        let packing = pack_failed_domains(c, 32, 28, pp, 0);
        prop_assert!(packing.unused.is_empty() && packing.dead.is_empty());
        let affected = |g: &[Vec<usize>]| g.iter().filter(|g| g.iter().any(|&s| c[s] < 32)).count();
        let min_sum = |g: &[Vec<usize>]| g.iter().map(|g| g.iter().map(|&s| c[s]).min().unwrap()).sum::<usize>();
        let (mut best_affected, mut best_min_sum) = (usize::MAX, 0);
        partitions(&mut (0..n).collect(), pp, &mut Vec::new(), &mut |g| {
            best_affected = best_affected.min(affected(g));
            best_min_sum = best_min_sum.max(min_sum(g));
        });
        prop_assert_eq!(affected(&packing.groups), best_affected);
        prop_assert_eq!(packing.affected_replicas(c, 32), best_affected);
        prop_assert_eq!(min_sum(&packing.groups), best_min_sum);
    }

    #[test]
    fn policies_dominate_pointwise(c in counts(48), pp in 1usize..=4) {
        let dp = 48 / pp - 1;
        let t: Vec<f64> = Policy::ALL.iter().map(|&p| planner(cfg(pp, dp), p, MinibatchMode::Variable, 0).plan(&c).unwrap().throughput_frac).collect();
        prop_assert!(t[1] >= t[0] - 1e-12, "ntp {} < dp-drop {}", t[1], t[0]);
        prop_assert!(t[2] >= t[1] - 1e-12, "ntp-pw {} < ntp {}", t[2], t[1]);
        prop_assert!(t.iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
    }

    #[test]
    fn losing_a_gpu_never_helps(c in counts(32), slot in 0usize..32, pp in 1usize..=4, fixed in any::<bool>()) {
        prop_assume!(c[slot] > 0);
        let mode = if fixed { MinibatchMode::Fixed } else { MinibatchMode::Variable };
        let dp = 32 / pp - 2;
        let mut worse = c.clone();
        worse[slot] -= 1;
        for p in Policy::ALL {
            let pl = planner(cfg(pp, dp), p, mode, 2);
            let (before, after) = (pl.plan(&c).unwrap(), pl.plan(&worse).unwrap());
            prop_assert!(after.throughput_frac <= before.throughput_frac + 1e-12, "{p}: {} -> {}", before.throughput_frac, after.throughput_frac);
        }
    }

    #[test]
    fn spares_never_hurt_a_fixed_minibatch(c in counts(32), pp in 1usize..=4, spares in 0usize..6) {
        let dp = 32 / pp;
        for p in Policy::ALL {
            let pl = planner(cfg(pp, dp), p, MinibatchMode::Fixed, spares);
            let (a, b) = (pl.plan(&c).unwrap(), pl.with_spares(spares + 1).plan(&c).unwrap());
            prop_assert!(!(a.paused == false && b.paused));
            prop_assert!(b.throughput_frac >= a.throughput_frac - 1e-12);
            prop_assert!(b.spares_used <= spares + 1);
        }
    }

    #[test]
    fn placement_accounting(c in counts(32), pp in 1usize..=4) {
        let dp = 32 / pp;
        for p in Policy::ALL {
            let pl = planner(cfg(pp, dp), p, MinibatchMode::Variable, 0).plan(&c).unwrap();
            let reclaim: usize = pl.replicas.iter().flat_map(|r| r.slots.iter().zip(&r.stage_tp)).map(|(&s, &t)| c[s] - t).sum();
            prop_assert_eq!(pl.reclaimable_gpus, reclaim);
            prop_assert!(pl.replicas.len() <= dp);
            prop_assert!(pl.fleet_power >= 1.0);
            let mut used: Vec<usize> = pl.replicas.iter().flat_map(|r| r.slots.clone()).collect();
            let n = used.len();
            used.sort_unstable();
            used.dedup();
            prop_assert_eq!(used.len(), n, "slot used twice");
            for r in &pl.replicas {
                for (&s, &t) in r.slots.iter().zip(&r.stage_tp) {
                    prop_assert!(t <= c[s]);
                }
            }
            if p == Policy::DpDrop {
                prop_assert_eq!(pl.reclaimable_gpus, 0);
                prop_assert!(pl.replicas.iter().all(|r| !r.reduced));
            }
        }
    }
}

fn throughput_at(report: &ThroughputReport, t: f64) -> f64 {
    report.rows.iter().rev().find(|r| r.t_days <= t).map_or(1.0, |r| r.throughput_frac)
}

#[test]
fn dominance_holds_at_every_instant_of_a_trace() {
    for (seed, fixed) in [(1u64, false), (2, true), (3, false)] {
        let base = SimConfig {
            cluster: Cluster::new(4096, 32).unwrap(),
            parallel: cfg(4, 30),
            failure: FailureModelConfig { rate_multiplier: 6.0, ..Default::default() },
            mode: if fixed { MinibatchMode::Fixed } else { MinibatchMode::Variable },
            spare_domains: 2,
            duration_days: 15.0,
            seed,
            ..Default::default()
        };
        let reports: Vec<ThroughputReport> = Policy::ALL.iter().map(|&p| run(&SimConfig { policy: p, ..base.clone() }).unwrap()).collect();
        let mut times: Vec<f64> = reports.iter().flat_map(|r| r.rows.iter().map(|x| x.t_days)).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        assert!(times.len() > 10);
        for t in times {
            let v: Vec<f64> = reports.iter().map(|r| throughput_at(r, t)).collect();
            assert!(v[1] >= v[0] - 1e-12 && v[2] >= v[1] - 1e-12, "seed {seed} t={t}: {v:?}");
        }
    }
}
