//! Non-concurrent SplayNet references.
//!
//! `sequential_splay` is the classic double splay: the source climbs to the
//! lowest common ancestor, then the destination climbs until it is a child of
//! the source. `parallel_reference_splay` serializes the two endpoints rotating
//! toward each other with no other traffic, and is what the concurrent
//! protocol must reproduce when it carries a single splay.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::RankTracker;
use crate::rotation::{self, RotationError, RotationKind};
use crate::topology::{NodeId, TopologyError, Tree};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("splay endpoints must differ, got {0} twice")]
    SameEndpoint(NodeId),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Rotation(#[from] RotationError),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleStep {
    pub node: NodeId,
    pub kind: RotationKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub steps: Vec<OracleStep>,
    pub dollars: u64,
    /// Change in total rank over the splay.
    pub potential_delta: f64,
}

impl Trace {
    pub fn rotations(&self) -> usize {
        self.steps.len()
    }

    /// Rotation counts by requester and kind, sorted.
    pub fn multiset(&self) -> Vec<(NodeId, RotationKind, usize)> {
        let mut v: Vec<(NodeId, &'static str, RotationKind)> =
            self.steps.iter().map(|s| (s.node, s.kind.as_str(), s.kind)).collect();
        v.sort_by_key(|&(n, k, _)| (n, k));
        let mut out: Vec<(NodeId, RotationKind, usize)> = Vec::new();
        for (n, _, k) in v {
            match out.last_mut() {
                Some(last) if last.0 == n && last.1 == k => last.2 += 1,
                _ => out.push((n, k, 1)),
            }
        }
        out
    }
}

/// Next rotation `x` performs toward `peer`, or `None` once `x` is the lowest
/// common ancestor or a child of `peer`.
pub fn step_kind(t: &Tree, x: NodeId, peer: NodeId) -> Result<Option<RotationKind>, OracleError> {
    if x == peer {
        return Err(OracleError::SameEndpoint(x));
    }
    let l = t.lca(x, peer)?;
    let Some(v) = t.parent(x) else {
        return Ok(None);
    };
    if x == l || v == peer {
        return Ok(None);
    }
    if v == l {
        return Ok(Some(RotationKind::Zig));
    }
    match t.parent(v) {
        None => Ok(Some(RotationKind::Zig)),
        Some(w) if w == peer => Ok(Some(RotationKind::Zig)),
        Some(_) => Ok(Some(rotation::classify(t, x, l)?)),
    }
}

/// A tree with sequential splay operations and cost counters.
#[derive(Clone, Debug)]
pub struct SequentialSplayNet {
    pub tree: Tree,
    pub rotations: u64,
    pub dollars: u64,
    ranks: RankTracker,
}

impl SequentialSplayNet {
    pub fn new(tree: Tree) -> Self {
        let ranks = RankTracker::new(&tree);
        SequentialSplayNet {
            tree,
            rotations: 0,
            dollars: 0,
            ranks,
        }
    }

    pub fn potential(&self) -> f64 {
        self.ranks.total()
    }

    fn rotate(&mut self, x: NodeId, kind: RotationKind, trace: &mut Trace) -> Result<(), OracleError> {
        let effect = rotation::apply(&mut self.tree, x, kind)?;
        trace.potential_delta += self.ranks.apply(&self.tree, &effect).delta;
        trace.dollars += kind.cost();
        trace.steps.push(OracleStep { node: x, kind });
        self.rotations += 1;
        self.dollars += kind.cost();
        Ok(())
    }

    fn check(&self, s: NodeId, d: NodeId) -> Result<(), OracleError> {
        if s == d {
            return Err(OracleError::SameEndpoint(s));
        }
        self.tree.node(s)?;
        self.tree.node(d)?;
        Ok(())
    }

    /// `s` climbs to the LCA, then `d` climbs until its parent is `s`.
    pub fn sequential_splay(&mut self, s: NodeId, d: NodeId) -> Result<Trace, OracleError> {
        self.check(s, d)?;
        let mut trace = Trace::default();
        while let Some(kind) = step_kind(&self.tree, s, d)? {
            self.rotate(s, kind, &mut trace)?;
        }
        while self.tree.distance(s, d)? > 1 {
            let kind = step_kind(&self.tree, d, s)?.expect("destination below the source");
            self.rotate(d, kind, &mut trace)?;
        }
        Ok(trace)
    }

    /// Both endpoints climb in logical rounds. Within a round the shallower
    /// endpoint rotates first (ties by ascending id); the other endpoint then
    /// re-decides against the updated tree. An endpoint at the LCA waits.
    pub fn parallel_reference_splay(&mut self, s: NodeId, d: NodeId) -> Result<Trace, OracleError> {
        self.check(s, d)?;
        let mut trace = Trace::default();
        while self.tree.distance(s, d)? > 1 {
            let mut order = [(self.tree.depth(s)?, s, d), (self.tree.depth(d)?, d, s)];
            order.sort();
            let mut moved = false;
            for (_, x, peer) in order {
                if let Some(kind) = step_kind(&self.tree, x, peer)? {
                    self.rotate(x, kind, &mut trace)?;
                    moved = true;
                }
            }
            assert!(moved, "no endpoint can rotate at distance > 1");
        }
        Ok(trace)
    }
}

/// Sequential double splay on a copy of `t`.
pub fn sequential_splay(t: &Tree, s: NodeId, d: NodeId) -> Result<(Tree, Trace), OracleError> {
    let mut net = SequentialSplayNet::new(t.clone());
    let trace = net.sequential_splay(s, d)?;
    Ok((net.tree, trace))
}

/// Parallel reference splay on a copy of `t`.
pub fn parallel_reference_splay(t: &Tree, s: NodeId, d: NodeId) -> Result<(Tree, Trace), OracleError> {
    let mut net = SequentialSplayNet::new(t.clone());
    let trace = net.parallel_reference_splay(s, d)?;
    Ok((net.tree, trace))
}
