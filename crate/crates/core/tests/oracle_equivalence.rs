use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splaynet::oracle::{parallel_reference_splay, sequential_splay, OracleStep};
use splaynet::simulator::{SimOptions, Simulator, Termination};
use splaynet::workload::Request;
use splaynet::{NodeId, Tree};

fn single(t: &Tree, s: u32, d: u32) -> Simulator {
    let mut o = SimOptions::new(100_000);
    o.lockstep = true;
    let req = Request {
        src: NodeId(s),
        dst: NodeId(d),
        arrival: 0,
    };
    let mut sim = Simulator::new(t.clone(), vec![vec![req]], o).unwrap();
    assert_eq!(sim.run_to_end(), Termination::Completed);
    sim
}

fn assert_equivalent(t: &Tree, s: u32, d: u32) {
    let sim = single(t, s, d);
    let (expected, trace) = parallel_reference_splay(t, NodeId(s), NodeId(d)).unwrap();
    assert_eq!(sim.tree().link_table(), expected.link_table(), "topology for ({s},{d})");
    let dollars: u64 = sim.rotations().iter().map(|r| r.cost).sum();
    assert_eq!(dollars, trace.dollars, "cost for ({s},{d})");
    let mut got: Vec<(NodeId, &str)> = sim.rotations().iter().map(|r| (r.requester, r.kind.as_str())).collect();
    let mut want: Vec<(NodeId, &str)> = trace.steps.iter().map(|x| (x.node, x.kind.as_str())).collect();
    got.sort();
    want.sort();
    assert_eq!(got, want, "rotation multiset for ({s},{d})");
}

#[test]
fn m1_matches_reference_on_small_trees() {
    for n in [2usize, 3, 7, 15] {
        let t = Tree::balanced(n).unwrap();
        for s in 1..=n as u32 {
            for d in 1..=n as u32 {
                if s != d {
                    assert_equivalent(&t, s, d);
                }
            }
        }
    }
}

#[test]
fn m1_matches_reference_on_sampled_pairs_at_511() {
    let t = Tree::balanced(511).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..40 {
        let s = rng.random_range(1..=511u32);
        let d = rng.random_range(1..=511u32);
        if s != d {
            assert_equivalent(&t, s, d);
        }
    }
}

#[test]
fn sequential_reference_on_seven() {
    let t = Tree::balanced(7).unwrap();
    let (after, trace) = sequential_splay(&t, NodeId(1), NodeId(3)).unwrap();
    assert_eq!(after.lca(NodeId(1), NodeId(3)).unwrap(), NodeId(1));
    assert_eq!(after.distance(NodeId(1), NodeId(3)).unwrap(), 1);
    assert_eq!(trace.steps.first(), Some(&OracleStep {
        node: NodeId(1),
        kind: splaynet::RotationKind::Zig
    }));
    assert_eq!(trace.dollars, 2);
}

#[test]
fn sequential_and_parallel_agree_on_objective_not_trace() {
    let t = Tree::balanced(31).unwrap();
    let mut differ = 0;
    for (s, d) in [(1u32, 31u32), (3, 20), (17, 2), (8, 24)] {
        let (a, ta) = sequential_splay(&t, NodeId(s), NodeId(d)).unwrap();
        let (b, tb) = parallel_reference_splay(&t, NodeId(s), NodeId(d)).unwrap();
        assert_eq!(a.distance(NodeId(s), NodeId(d)).unwrap(), 1);
        assert_eq!(b.distance(NodeId(s), NodeId(d)).unwrap(), 1);
        if ta.steps != tb.steps {
            differ += 1;
        }
    }
    assert!(differ > 0);
}
