use splaynet::simulator::{SimConfig, SimOptions, Simulator, Termination};
use splaynet::workload::{Request, WorkloadSpec};
use splaynet::{NodeId, RotationKind, Tree};

/// Round lengths and kinds of every rotation of a single splay.
fn rounds(n: usize, s: u32, d: u32) -> Vec<(RotationKind, u64)> {
    let req = Request {
        src: NodeId(s),
        dst: NodeId(d),
        arrival: 0,
    };
    let mut sim = Simulator::new(Tree::balanced(n).unwrap(), vec![vec![req]], SimOptions::new(10_000)).unwrap();
    assert_eq!(sim.run_to_end(), Termination::Completed);
    let r = sim.into_result(SimConfig::new(n, WorkloadSpec::uniform(1), 0));
    assert_eq!(r.rotations.len(), r.round_lengths.len());
    r.rotations.iter().map(|x| x.kind).zip(r.round_lengths).collect()
}

#[test]
fn lone_zig_zig_spans_nine_slots() {
    // 1 climbs over 2 and 4; 8 above them is locked for its child link.
    let r = rounds(15, 1, 12);
    assert_eq!(r[0], (RotationKind::ZigZig, 9));
}

#[test]
fn lone_zig_zag_releases_one_slot_earlier() {
    // 5 climbs over 6 and 4 under 8. Afterwards both are children of 5, so
    // the release reaches them in one hop instead of being forwarded.
    let r = rounds(15, 5, 12);
    assert_eq!(r[0], (RotationKind::ZigZag, 8));
}

#[test]
fn lone_zig_is_shorter() {
    // 1 replaces its parent 2, the LCA of (1, 3); 4 is locked above.
    let r = rounds(15, 1, 3);
    assert_eq!(r[0].0, RotationKind::Zig);
    assert!(r[0].1 < 9, "zig took {}", r[0].1);
    // Zig at the root: no node above the chain.
    let r = rounds(3, 1, 3);
    assert_eq!(r[0].0, RotationKind::Zig);
    assert!(r[0].1 < 9);
}
