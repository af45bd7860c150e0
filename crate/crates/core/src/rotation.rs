//! Atomic local tree transformations: zig, zig-zig and zig-zag.
//!
//! Each rotation moves `u` up past its parent `v` (zig) or past both `v` and
//! its grandparent `w` (zig-zig / zig-zag). The mirror case is picked by
//! comparing ids, the same way a node decides it locally.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{NodeId, Side, TopologyError, Tree};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RotationKind {
    Zig,
    ZigZig,
    ZigZag,
}

impl RotationKind {
    /// Cyber-dollars charged for the rotation.
    pub fn cost(self) -> u64 {
        match self {
            RotationKind::Zig => 1,
            RotationKind::ZigZig | RotationKind::ZigZag => 2,
        }
    }

    /// Levels `u` climbs.
    pub fn lift(self) -> usize {
        match self {
            RotationKind::Zig => 1,
            _ => 2,
        }
    }

    pub fn is_double(self) -> bool {
        !matches!(self, RotationKind::Zig)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RotationKind::Zig => "zig",
            RotationKind::ZigZig => "zig-zig",
            RotationKind::ZigZag => "zig-zag",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RotationError {
    #[error("cannot rotate root {0}")]
    CannotRotateRoot(NodeId),
    #[error("node {0} is its own splay target")]
    SelfTarget(NodeId),
    #[error("kind mismatch: {kind:?} not applicable at node {node}")]
    KindMismatch { node: NodeId, kind: RotationKind },
    #[error("structural inconsistency at node {node}: {detail}")]
    Inconsistent { node: NodeId, detail: String },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Parent/child links of one node.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Links {
    pub parent: Option<NodeId>,
    pub left: Option<NodeId>,
    pub right: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkDiff {
    pub node: NodeId,
    pub before: Links,
    pub after: Links,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationEffect {
    pub kind: RotationKind,
    pub moved_up: NodeId,
    /// Every node whose links changed.
    pub displaced: Vec<LinkDiff>,
    pub carried_children: BTreeSet<NodeId>,
    pub abandoned_children: BTreeSet<NodeId>,
    /// `u`, `v` and (for double rotations) `w`.
    pub participants: BTreeSet<NodeId>,
    pub locked_set: BTreeSet<NodeId>,
}

fn links_of(t: &Tree, id: NodeId) -> Links {
    let n = t.get(id).expect("known node");
    Links {
        parent: n.parent,
        left: n.left,
        right: n.right,
    }
}

/// Rotation type for moving `u` toward `stop_at` (the current LCA).
pub fn classify(t: &Tree, u: NodeId, stop_at: NodeId) -> Result<RotationKind, RotationError> {
    if u == stop_at {
        return Err(RotationError::SelfTarget(u));
    }
    let v = t.node(u)?.parent.ok_or(RotationError::CannotRotateRoot(u))?;
    if v == stop_at || t.parent(v).is_none() {
        return Ok(RotationKind::Zig);
    }
    if t.side_of(u) == t.side_of(v) {
        Ok(RotationKind::ZigZig)
    } else {
        Ok(RotationKind::ZigZag)
    }
}

/// Structural kind check: can `kind` be applied at `u` as the tree stands?
fn applicable(t: &Tree, u: NodeId, kind: RotationKind) -> Result<(), RotationError> {
    let v = t.node(u)?.parent.ok_or(RotationError::CannotRotateRoot(u))?;
    match kind {
        RotationKind::Zig => Ok(()),
        RotationKind::ZigZig | RotationKind::ZigZag => {
            if t.parent(v).is_none() {
                return Err(RotationError::KindMismatch { node: u, kind });
            }
            let same = t.side_of(u) == t.side_of(v);
            if same != (kind == RotationKind::ZigZig) {
                return Err(RotationError::KindMismatch { node: u, kind });
            }
            Ok(())
        }
    }
}

/// Nodes that must be locked while `u` performs `kind`.
pub fn locked_set(t: &Tree, u: NodeId, kind: RotationKind) -> Result<BTreeSet<NodeId>, RotationError> {
    applicable(t, u, kind)?;
    let v = t.parent(u).expect("checked");
    let mut set = BTreeSet::from([u, v]);
    let w = t.parent(v);
    if let Some(w) = w {
        set.insert(w);
        if kind.is_double() {
            if let Some(z) = t.parent(w) {
                set.insert(z);
            }
        }
    }
    Ok(set)
}

fn set_left(t: &mut Tree, parent: NodeId, child: Option<NodeId>) {
    t.slot_mut(parent).left = child;
    if let Some(c) = child {
        t.slot_mut(c).parent = Some(parent);
    }
}

fn set_right(t: &mut Tree, parent: NodeId, child: Option<NodeId>) {
    t.slot_mut(parent).right = child;
    if let Some(c) = child {
        t.slot_mut(c).parent = Some(parent);
    }
}

/// Replace `old` by `new` under `old`'s parent (or as the root).
fn hand_off(t: &mut Tree, old: NodeId, new: NodeId) {
    match t.parent(old) {
        Some(p) => {
            if old > p {
                t.slot_mut(p).right = Some(new);
            } else {
                t.slot_mut(p).left = Some(new);
            }
            t.slot_mut(new).parent = Some(p);
        }
        None => {
            t.slot_mut(new).parent = None;
            t.set_root(new);
        }
    }
}

/// Apply one rotation of `u`, mutating `t`.
pub fn apply(t: &mut Tree, u: NodeId, kind: RotationKind) -> Result<RotationEffect, RotationError> {
    let locked = locked_set(t, u, kind)?;
    let un = t.node(u)?;
    let v = un.parent.expect("checked by locked_set");
    let vn = t.node(v)?;
    let w = vn.parent;
    let top = match kind {
        RotationKind::Zig => w,
        _ => w.and_then(|w| t.parent(w)),
    };

    let mut candidates: Vec<NodeId> = vec![u, v];
    candidates.extend(w);
    candidates.extend(top);
    for id in [u, v] {
        let n = t.get(id).expect("known");
        candidates.extend(n.left);
        candidates.extend(n.right);
    }
    if let Some(w) = w {
        let n = t.get(w).expect("known");
        candidates.extend(n.left);
        candidates.extend(n.right);
    }
    candidates.sort();
    candidates.dedup();
    let before: Vec<Links> = candidates.iter().map(|&c| links_of(t, c)).collect();
    let children_before: BTreeSet<NodeId> = [un.left, un.right].into_iter().flatten().collect();

    let participants = match kind {
        RotationKind::Zig => {
            zig(t, u, v);
            BTreeSet::from([u, v])
        }
        RotationKind::ZigZig => {
            let w = w.expect("checked");
            zig_zig(t, u, v, w);
            BTreeSet::from([u, v, w])
        }
        RotationKind::ZigZag => {
            let w = w.expect("checked");
            zig_zag(t, u, v, w);
            BTreeSet::from([u, v, w])
        }
    };

    let displaced: Vec<LinkDiff> = candidates
        .iter()
        .zip(before)
        .filter_map(|(&c, b)| {
            let a = links_of(t, c);
            (a != b).then_some(LinkDiff {
                node: c,
                before: b,
                after: a,
            })
        })
        .collect();
    let un = t.node(u)?;
    let children_after: BTreeSet<NodeId> = [un.left, un.right].into_iter().flatten().collect();
    let carried = children_before.intersection(&children_after).copied().collect();
    let abandoned = children_before.difference(&children_after).copied().collect();

    let parent_ok = match t.parent(u) {
        Some(p) => t.get(p).is_some_and(|pn| pn.left == Some(u) || pn.right == Some(u)),
        None => t.root() == u,
    };
    if !parent_ok {
        return Err(RotationError::Inconsistent {
            node: u,
            detail: "parent hand-off left a dangling link".into(),
        });
    }

    Ok(RotationEffect {
        kind,
        moved_up: u,
        displaced,
        carried_children: carried,
        abandoned_children: abandoned,
        participants,
        locked_set: locked,
    })
}

fn zig(t: &mut Tree, u: NodeId, v: NodeId) {
    hand_off(t, v, u);
    if u > v {
        let inner = t.get(u).expect("u").left;
        set_right(t, v, inner);
        set_left(t, u, Some(v));
    } else {
        let inner = t.get(u).expect("u").right;
        set_left(t, v, inner);
        set_right(t, u, Some(v));
    }
    t.refresh_interval(v);
    t.refresh_interval(u);
}

fn zig_zig(t: &mut Tree, u: NodeId, v: NodeId, w: NodeId) {
    hand_off(t, w, u);
    if u > w {
        let v_inner = t.get(v).expect("v").left;
        set_right(t, w, v_inner);
        set_left(t, v, Some(w));
        let u_inner = t.get(u).expect("u").left;
        set_right(t, v, u_inner);
        set_left(t, u, Some(v));
    } else {
        let v_inner = t.get(v).expect("v").right;
        set_left(t, w, v_inner);
        set_right(t, v, Some(w));
        let u_inner = t.get(u).expect("u").right;
        set_left(t, v, u_inner);
        set_right(t, u, Some(v));
    }
    t.refresh_interval(w);
    t.refresh_interval(v);
    t.refresh_interval(u);
}

fn zig_zag(t: &mut Tree, u: NodeId, v: NodeId, w: NodeId) {
    hand_off(t, w, u);
    let (ul, ur) = {
        let n = t.get(u).expect("u");
        (n.left, n.right)
    };
    if u > w {
        // w.r = v, v.l = u
        set_right(t, w, ul);
        set_left(t, v, ur);
        set_right(t, u, Some(v));
        set_left(t, u, Some(w));
    } else {
        // w.l = v, v.r = u
        set_left(t, w, ur);
        set_right(t, v, ul);
        set_right(t, u, Some(w));
        set_left(t, u, Some(v));
    }
    t.refresh_interval(w);
    t.refresh_interval(v);
    t.refresh_interval(u);
}

/// Nodes whose links changed without participating in the rotation; they
/// learn about it through link-change notifications.
pub fn notify_targets(effect: &RotationEffect) -> BTreeSet<NodeId> {
    effect
        .displaced
        .iter()
        .map(|d| d.node)
        .filter(|n| !effect.participants.contains(n))
        .collect()
}

/// Side of `child` under `parent` given explicit links; used by protocol code
/// working on local copies.
pub fn side_in(links: &Links, child: NodeId) -> Option<Side> {
    if links.left == Some(child) {
        Some(Side::Left)
    } else if links.right == Some(child) {
        Some(Side::Right)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::TreeNode;

    fn n(x: u32) -> NodeId {
        NodeId(x)
    }

    fn two_node() -> Tree {
        let nodes = vec![
            TreeNode {
                id: n(1),
                parent: Some(n(2)),
                left: None,
                right: None,
                interval_lo: n(1),
                interval_hi: n(1),
            },
            TreeNode {
                id: n(2),
                parent: None,
                left: Some(n(1)),
                right: None,
                interval_lo: n(1),
                interval_hi: n(2),
            },
        ];
        let t = Tree::from_nodes_unchecked(nodes, n(2));
        t.check_invariants().unwrap();
        t
    }

    #[test]
    fn classify_examples() {
        let t = Tree::balanced(7).unwrap();
        assert_eq!(classify(&t, n(2), n(4)).unwrap(), RotationKind::Zig);
        assert_eq!(classify(&t, n(1), n(4)).unwrap(), RotationKind::ZigZig);
        assert_eq!(classify(&t, n(3), n(4)).unwrap(), RotationKind::ZigZag);
        assert_eq!(classify(&t, n(1), n(2)).unwrap(), RotationKind::Zig);
        assert_eq!(classify(&t, n(4), n(1)), Err(RotationError::CannotRotateRoot(n(4))));
        assert_eq!(classify(&t, n(1), n(1)), Err(RotationError::SelfTarget(n(1))));
    }

    #[test]
    fn zig_on_two_nodes() {
        let mut t = two_node();
        let eff = apply(&mut t, n(1), RotationKind::Zig).unwrap();
        assert_eq!(t.root(), n(1));
        assert_eq!(t.node(n(1)).unwrap().right, Some(n(2)));
        t.check_invariants().unwrap();
        assert!(notify_targets(&eff).is_empty());
        assert_eq!(eff.locked_set, BTreeSet::from([n(1), n(2)]));
    }

    #[test]
    fn zig_zig_on_seven() {
        let mut t = Tree::balanced(7).unwrap();
        let eff = apply(&mut t, n(1), RotationKind::ZigZig).unwrap();
        t.check_invariants().unwrap();
        assert_eq!(t.root(), n(1));
        assert_eq!(t.node(n(1)).unwrap().right, Some(n(2)));
        assert_eq!(t.node(n(2)).unwrap().right, Some(n(4)));
        assert_eq!(t.node(n(4)).unwrap().left, Some(n(3)));
        assert_eq!(t.node(n(4)).unwrap().right, Some(n(6)));
        assert_eq!(eff.locked_set, BTreeSet::from([n(1), n(2), n(4)]));
        // t3 = node 3 moves from 2 to 4.
        assert_eq!(notify_targets(&eff), BTreeSet::from([n(3)]));
    }

    #[test]
    fn zig_zag_on_seven() {
        let mut t = Tree::balanced(15).unwrap();
        // In the 15-node tree: 8 root, 4 left, 6 right of 4; 5,7 under 6.
        let eff = apply(&mut t, n(6), RotationKind::ZigZag).unwrap();
        t.check_invariants().unwrap();
        assert_eq!(t.root(), n(6));
        let six = t.node(n(6)).unwrap();
        assert_eq!((six.left, six.right), (Some(n(4)), Some(n(8))));
        assert_eq!(t.node(n(4)).unwrap().right, Some(n(5)));
        assert_eq!(t.node(n(8)).unwrap().left, Some(n(7)));
        assert_eq!(eff.kind, RotationKind::ZigZag);
        assert!(eff.abandoned_children.contains(&n(5)));
        assert!(eff.abandoned_children.contains(&n(7)));
    }

    #[test]
    fn zig_zag_seven_node_example() {
        let mut t = Tree::balanced(7).unwrap();
        apply(&mut t, n(3), RotationKind::ZigZag).unwrap();
        t.check_invariants().unwrap();
        let three = t.node(n(3)).unwrap();
        assert_eq!(t.root(), n(3));
        assert_eq!((three.left, three.right), (Some(n(2)), Some(n(4))));
        assert_eq!(t.node(n(2)).unwrap().right, None);
        assert_eq!(t.node(n(4)).unwrap().left, None);
    }

    #[test]
    fn kind_mismatch() {
        let mut t = Tree::balanced(7).unwrap();
        assert!(matches!(
            apply(&mut t, n(1), RotationKind::ZigZag),
            Err(RotationError::KindMismatch { .. })
        ));
        assert!(matches!(
            apply(&mut t, n(2), RotationKind::ZigZig),
            Err(RotationError::KindMismatch { .. })
        ));
        assert!(matches!(
            apply(&mut t, n(4), RotationKind::Zig),
            Err(RotationError::CannotRotateRoot(_))
        ));
    }

    #[test]
    fn locked_sets() {
        let t = Tree::balanced(15).unwrap();
        // zig of a child of the root: {v, u}
        assert_eq!(locked_set(&t, n(4), RotationKind::Zig).unwrap(), BTreeSet::from([n(4), n(8)]));
        // zig below w: {w, v, u}
        assert_eq!(
            locked_set(&t, n(2), RotationKind::Zig).unwrap(),
            BTreeSet::from([n(2), n(4), n(8)])
        );
        // zig-zig with z: {z, w, v, u}
        let t = Tree::balanced(31).unwrap();
        // 16 root, 8, 4, 2 down the left spine.
        assert_eq!(
            locked_set(&t, n(2), RotationKind::ZigZig).unwrap(),
            BTreeSet::from([n(2), n(4), n(8), n(16)])
        );
    }

    #[test]
    fn zig_below_grandparent_notifies_inner_child() {
        let mut t = Tree::balanced(15).unwrap();
        // u=2 under v=4 under w=8: zig moves 3 (u.r) to 4.
        let eff = apply(&mut t, n(2), RotationKind::Zig).unwrap();
        t.check_invariants().unwrap();
        let targets = notify_targets(&eff);
        assert!(targets.contains(&n(3)));
        assert!(targets.contains(&n(8)));
        assert!(eff.carried_children.contains(&n(1)));
        assert!(eff.abandoned_children.contains(&n(3)));
    }
}
