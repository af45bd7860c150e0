use std::cmp::Ordering;

use proptest::prelude::*;
use splaynet::analysis::RankTracker;
use splaynet::buffer::compare;
use splaynet::rotation::{apply, classify};
use splaynet::simulator::{run, SimConfig, Termination};
use splaynet::workload::{generate, WorkloadKind, WorkloadSpec};
use splaynet::{BufferEntry, NodeId, RotationKind, Tree};

fn entry() -> impl Strategy<Value = BufferEntry> {
    let chain = Just((1u32..=8).collect::<Vec<_>>()).prop_shuffle();
    (0u64..3, 0u64..3, 0u32..3, chain, 0usize..3)
        .prop_map(|(sr, r, a, chain, len)| {
            let mut e = BufferEntry::new(sr, r, a, NodeId(chain[0]), NodeId(chain[1]), NodeId(9));
            if len >= 1 {
                e.level3 = Some(NodeId(chain[2]));
            }
            if len >= 2 {
                e.lock_top = Some(NodeId(chain[3]));
            }
            e
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn priority_is_a_total_order(owner in 1u32..=8, a in entry(), b in entry(), c in entry()) {
        let o = NodeId(owner);
        prop_assert_eq!(compare(o, &a, &b), compare(o, &b, &a).reverse());
        if compare(o, &a, &b) == Ordering::Equal {
            prop_assert_eq!(a.key(), b.key());
        }
        if compare(o, &a, &b).is_le() && compare(o, &b, &c).is_le() {
            prop_assert!(compare(o, &a, &c).is_le());
        }
    }
}

fn size(t: &Tree, x: Option<NodeId>) -> usize {
    match x {
        None => 0,
        Some(x) => {
            let n = t.get(x).unwrap();
            1 + size(t, n.left) + size(t, n.right)
        }
    }
}

fn potential(t: &Tree) -> f64 {
    t.ids().map(|x| (size(t, Some(x)) as f64).log2()).sum()
}

fn in_order(t: &Tree, x: Option<NodeId>, out: &mut Vec<NodeId>) {
    if let Some(x) = x {
        let n = t.get(x).unwrap();
        in_order(t, n.left, out);
        out.push(x);
        in_order(t, n.right, out);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_rotations_keep_the_tree_valid(n in 2usize..120, picks in proptest::collection::vec((any::<u32>(), any::<bool>()), 1..60)) {
        let mut t = Tree::balanced(n).unwrap();
        let mut ranks = RankTracker::new(&t);
        let ids: Vec<NodeId> = (1..=n as u32).map(NodeId).collect();
        for (pick, single) in picks {
            let u = ids[pick as usize % n];
            let Some(_) = t.parent(u) else { continue };
            let kind = if single { RotationKind::Zig } else { classify(&t, u, t.root()).unwrap() };
            let depth = t.depth(u).unwrap();
            let r_before = (size(&t, Some(u)) as f64).log2();
            let phi_before = potential(&t);
            let effect = apply(&mut t, u, kind).unwrap();
            prop_assert!(t.check_invariants().is_ok());
            let mut order = Vec::new();
            in_order(&t, Some(t.root()), &mut order);
            prop_assert_eq!(&order, &ids);
            prop_assert_eq!(t.depth(u).unwrap(), depth - kind.lift());
            let delta = potential(&t) - phi_before;
            let r_after = (size(&t, Some(u)) as f64).log2();
            let bound = 3.0 * (r_after - r_before) - if kind.is_double() { 2.0 } else { 0.0 };
            prop_assert!(delta <= bound + 1e-9, "delta {} bound {}", delta, bound);
            let tracked = ranks.apply(&t, &effect);
            prop_assert!((tracked.delta - delta).abs() < 1e-9);
            prop_assert!((ranks.total() - potential(&t)).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn small_runs_complete_within_bounds(n in 2usize..80, frac in 1usize..5, seed in any::<u64>(), zipf in any::<bool>()) {
        let m = (n * frac / 8).max(1);
        let kind = if zipf { WorkloadKind::Zipf { alpha: 1.2 } } else { WorkloadKind::Uniform };
        let c = SimConfig::new(n, WorkloadSpec::new(kind, m), seed);
        let r = run(&c).unwrap();
        prop_assert_eq!(&r.termination, &Termination::Completed);
        prop_assert!(r.max_buffer_len <= 15);
        prop_assert!(r.final_tree.check_invariants().is_ok());
        prop_assert_eq!(r.splays.len(), m);
        prop_assert!(r.splays.iter().all(|s| s.completed_at.is_some()));
        let dollars: u64 = r.rotations.iter().map(|x| x.cost).sum();
        prop_assert_eq!(dollars, r.splays.iter().map(|s| s.dollars).sum::<u64>());
    }

    #[test]
    fn runs_are_deterministic(n in 2usize..60, seed in any::<u64>()) {
        let mut c = SimConfig::new(n, WorkloadSpec::uniform(n / 3 + 1), seed);
        c.log_level = splaynet::simulator::LogLevel::Events;
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        prop_assert_eq!(a.log.to_lines(), b.log.to_lines());
        prop_assert_eq!(a.final_tree.link_table(), b.final_tree.link_table());
    }

    #[test]
    fn workloads_stay_in_range(n in 2usize..300, m in 1usize..200, seed in any::<u64>()) {
        prop_assert!(generate(&WorkloadSpec::uniform(0), n, seed).is_err());
        for kind in [WorkloadKind::Uniform, WorkloadKind::Zipf { alpha: 1.6 }] {
            let rs = generate(&WorkloadSpec::new(kind.clone(), m), n, seed).unwrap();
            prop_assert_eq!(rs.requests.len(), m);
            for q in &rs.requests {
                prop_assert!(q.src != q.dst);
                prop_assert!((1..=n as u32).contains(&q.src.0) && (1..=n as u32).contains(&q.dst.0));
            }
            prop_assert_eq!(&rs, &generate(&WorkloadSpec::new(kind, m), n, seed).unwrap());
        }
    }
}
