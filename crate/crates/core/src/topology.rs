//! The global tree model of a SplayNet.
//!
//! Node identifiers double as binary-search keys, so every node can route
//! locally: a target lies below `u` exactly when it falls inside `u`'s
//! subtree interval `[interval_lo, interval_hi]`.

use rustc_hash::FxHashMap as HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier (and BST key) of a network node.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("empty tree")]
    EmptyTree,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("ids must be sorted and distinct (offending id {0})")]
    UnsortedIds(NodeId),
    #[error("node count {expected} does not match id list length {actual}")]
    CountMismatch { expected: usize, actual: usize },
}

/// Which child slot of its parent a node occupies.
#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn flip(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub left: Option<NodeId>,
    pub right: Option<NodeId>,
    /// Smallest id in this node's subtree.
    pub interval_lo: NodeId,
    /// Largest id in this node's subtree.
    pub interval_hi: NodeId,
}

impl TreeNode {
    fn leaf(id: NodeId) -> Self {
        TreeNode {
            id,
            parent: None,
            left: None,
            right: None,
            interval_lo: id,
            interval_hi: id,
        }
    }

    pub fn child(&self, side: Side) -> Option<NodeId> {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
        }
    }

    pub fn contains(&self, target: NodeId) -> bool {
        self.interval_lo <= target && target <= self.interval_hi
    }
}

/// What kind of structural rule a tree violates.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    RootHasParent,
    MultipleRoots,
    LinkAsymmetry,
    Unreachable,
    BstOrder,
    Interval,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub node: NodeId,
    pub other: Option<NodeId>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            ViolationKind::RootHasParent => "root has parent",
            ViolationKind::MultipleRoots => "multiple roots",
            ViolationKind::LinkAsymmetry => "link asymmetry",
            ViolationKind::Unreachable => "unreachable or cyclic",
            ViolationKind::BstOrder => "BST order",
            ViolationKind::Interval => "interval",
        };
        write!(f, "{name} at node {}", self.node)?;
        if let Some(o) = self.other {
            write!(f, " (related node {o})")?;
        }
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

/// A SplayNet topology: a binary search tree over node ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tree {
    nodes: Vec<TreeNode>,
    index: HashMap<NodeId, usize>,
    root: NodeId,
}

impl Tree {
    /// Height-balanced BST over `ids` (median split). `n` must equal `ids.len()`.
    pub fn build_balanced(n: usize, ids: &[NodeId]) -> Result<Tree, TopologyError> {
        if ids.is_empty() {
            return Err(TopologyError::EmptyTree);
        }
        if n != ids.len() {
            return Err(TopologyError::CountMismatch {
                expected: n,
                actual: ids.len(),
            });
        }
        for w in ids.windows(2) {
            if w[0] >= w[1] {
                return Err(TopologyError::UnsortedIds(w[1]));
            }
        }
        let nodes: Vec<TreeNode> = ids.iter().map(|&id| TreeNode::leaf(id)).collect();
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut tree = Tree {
            nodes,
            index,
            root: ids[0],
        };
        let root = tree.link_range(ids, None);
        tree.root = root.expect("non-empty");
        Ok(tree)
    }

    /// Balanced tree over ids `1..=n`.
    pub fn balanced(n: usize) -> Result<Tree, TopologyError> {
        let ids: Vec<NodeId> = (1..=n as u32).map(NodeId).collect();
        Tree::build_balanced(n, &ids)
    }

    fn link_range(&mut self, ids: &[NodeId], parent: Option<NodeId>) -> Option<NodeId> {
        if ids.is_empty() {
            return None;
        }
        let mid = ids.len() / 2;
        let id = ids[mid];
        let left = self.link_range(&ids[..mid], Some(id));
        let right = self.link_range(&ids[mid + 1..], Some(id));
        let node = self.slot_mut(id);
        node.parent = parent;
        node.left = left;
        node.right = right;
        node.interval_lo = ids[0];
        node.interval_hi = ids[ids.len() - 1];
        Some(id)
    }

    /// Assemble a tree from raw nodes without validation. Intended for tests
    /// and fault injection; call [`Tree::check_invariants`] afterwards.
    pub fn from_nodes_unchecked(nodes: Vec<TreeNode>, root: NodeId) -> Tree {
        let index = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        Tree { nodes, index, root }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub(crate) fn set_root(&mut self, id: NodeId) {
        self.root = id;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    /// Node ids in storage order (ascending for trees built by this module).
    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.id)
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn get(&self, id: NodeId) -> Option<&TreeNode> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn node(&self, id: NodeId) -> Result<&TreeNode, TopologyError> {
        self.get(id).ok_or(TopologyError::UnknownNode(id))
    }

    pub(crate) fn slot_mut(&mut self, id: NodeId) -> &mut TreeNode {
        let i = self.index[&id];
        &mut self.nodes[i]
    }

    /// Mutable access for tests that corrupt a tree on purpose.
    pub fn node_mut_unchecked(&mut self, id: NodeId) -> Option<&mut TreeNode> {
        let i = *self.index.get(&id)?;
        Some(&mut self.nodes[i])
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.get(id).and_then(|n| n.parent)
    }

    /// Side of `id` under its parent, or `None` for the root.
    pub fn side_of(&self, id: NodeId) -> Option<Side> {
        let p = self.parent(id)?;
        let pn = self.get(p)?;
        if pn.left == Some(id) {
            Some(Side::Left)
        } else if pn.right == Some(id) {
            Some(Side::Right)
        } else {
            None
        }
    }

    pub fn depth(&self, id: NodeId) -> Result<usize, TopologyError> {
        let mut cur = self.node(id)?;
        let mut d = 0;
        while let Some(p) = cur.parent {
            d += 1;
            cur = self.node(p)?;
            if d > self.nodes.len() {
                break;
            }
        }
        Ok(d)
    }

    /// Lowest common ancestor; a node is its own ancestor.
    pub fn lca(&self, a: NodeId, b: NodeId) -> Result<NodeId, TopologyError> {
        let mut da = self.depth(a)?;
        let mut db = self.depth(b)?;
        let (mut x, mut y) = (a, b);
        while da > db {
            x = self.parent(x).expect("depth > 0 implies parent");
            da -= 1;
        }
        while db > da {
            y = self.parent(y).expect("depth > 0 implies parent");
            db -= 1;
        }
        while x != y {
            x = self.parent(x).expect("distinct nodes below a common root");
            y = self.parent(y).expect("distinct nodes below a common root");
        }
        Ok(x)
    }

    /// Hop distance along tree links.
    pub fn distance(&self, a: NodeId, b: NodeId) -> Result<usize, TopologyError> {
        let l = self.lca(a, b)?;
        Ok(self.depth(a)? + self.depth(b)? - 2 * self.depth(l)?)
    }

    /// Whether `target` lies in the subtree of `u`, decided from `u`'s interval only.
    pub fn is_in_subtree(&self, u: NodeId, target: NodeId) -> Result<bool, TopologyError> {
        if !self.contains(target) {
            return Err(TopologyError::UnknownNode(target));
        }
        Ok(self.node(u)?.contains(target))
    }

    pub fn in_order(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = Vec::new();
        let mut cur = Some(self.root);
        while cur.is_some() || !stack.is_empty() {
            while let Some(c) = cur {
                stack.push(c);
                cur = self.get(c).and_then(|n| n.left);
                if stack.len() > self.nodes.len() {
                    return out;
                }
            }
            let c = stack.pop().expect("non-empty");
            out.push(c);
            if out.len() > self.nodes.len() {
                return out;
            }
            cur = self.get(c).and_then(|n| n.right);
        }
        out
    }

    /// Post-order list of node ids (children before parents).
    pub fn post_order(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(self.root, false)];
        while let Some((id, expanded)) = stack.pop() {
            if expanded {
                out.push(id);
                continue;
            }
            stack.push((id, true));
            if let Some(n) = self.get(id) {
                if let Some(r) = n.right {
                    stack.push((r, false));
                }
                if let Some(l) = n.left {
                    stack.push((l, false));
                }
            }
            if out.len() + stack.len() > 2 * self.nodes.len() + 2 {
                break;
            }
        }
        out
    }

    /// Recompute `interval_lo`/`interval_hi` of `id` from its children.
    pub(crate) fn refresh_interval(&mut self, id: NodeId) {
        let (left, right) = {
            let n = self.slot_mut(id);
            (n.left, n.right)
        };
        let lo = left.map_or(id, |l| self.get(l).expect("child").interval_lo);
        let hi = right.map_or(id, |r| self.get(r).expect("child").interval_hi);
        let n = self.slot_mut(id);
        n.interval_lo = lo;
        n.interval_hi = hi;
    }

    /// Full structural check: single root, symmetric links, connectivity,
    /// BST order and interval correctness (recomputed from scratch).
    pub fn check_invariants(&self) -> Result<(), Violation> {
        let violation = |kind, node, other, detail: String| Violation {
            kind,
            node,
            other,
            detail,
        };
        let root = self.get(self.root).ok_or_else(|| {
            violation(
                ViolationKind::Unreachable,
                self.root,
                None,
                "root id not present".into(),
            )
        })?;
        if let Some(p) = root.parent {
            return Err(violation(ViolationKind::RootHasParent, self.root, Some(p), String::new()));
        }
        for n in &self.nodes {
            if n.id != self.root && n.parent.is_none() {
                return Err(violation(ViolationKind::MultipleRoots, n.id, Some(self.root), String::new()));
            }
            for (side, child) in [(Side::Left, n.left), (Side::Right, n.right)] {
                let Some(c) = child else { continue };
                let Some(cn) = self.get(c) else {
                    return Err(violation(
                        ViolationKind::LinkAsymmetry,
                        n.id,
                        Some(c),
                        "child id not present".into(),
                    ));
                };
                if cn.parent != Some(n.id) {
                    return Err(violation(
                        ViolationKind::LinkAsymmetry,
                        n.id,
                        Some(c),
                        format!("{side:?} child does not point back"),
                    ));
                }
            }
            if let Some(p) = n.parent {
                let Some(pn) = self.get(p) else {
                    return Err(violation(
                        ViolationKind::LinkAsymmetry,
                        n.id,
                        Some(p),
                        "parent id not present".into(),
                    ));
                };
                if pn.left != Some(n.id) && pn.right != Some(n.id) {
                    return Err(violation(
                        ViolationKind::LinkAsymmetry,
                        n.id,
                        Some(p),
                        "parent does not list node as child".into(),
                    ));
                }
            }
        }
        // Reachability; with symmetric links and one root this also rules out cycles.
        let order = self.post_order();
        if order.len() != self.nodes.len() {
            let seen: std::collections::HashSet<NodeId> = order.iter().copied().collect();
            let missing = self
                .nodes
                .iter()
                .map(|n| n.id)
                .find(|id| !seen.contains(id))
                .unwrap_or(self.root);
            return Err(violation(
                ViolationKind::Unreachable,
                missing,
                None,
                format!("{} of {} nodes reachable from root", order.len(), self.nodes.len()),
            ));
        }
        let mut bounds: HashMap<NodeId, (NodeId, NodeId)> = HashMap::with_capacity_and_hasher(order.len(), Default::default());
        for &id in &order {
            let n = self.get(id).expect("reachable");
            let mut lo = id;
            let mut hi = id;
            if let Some(l) = n.left {
                let (llo, lhi) = bounds[&l];
                if lhi >= id {
                    return Err(violation(
                        ViolationKind::BstOrder,
                        id,
                        Some(l),
                        format!("left subtree max {lhi} not below {id}"),
                    ));
                }
                lo = llo;
            }
            if let Some(r) = n.right {
                let (rlo, rhi) = bounds[&r];
                if rlo <= id {
                    return Err(violation(
                        ViolationKind::BstOrder,
                        id,
                        Some(r),
                        format!("right subtree min {rlo} not above {id}"),
                    ));
                }
                hi = rhi;
            }
            if n.interval_lo != lo || n.interval_hi != hi {
                return Err(violation(
                    ViolationKind::Interval,
                    id,
                    None,
                    format!(
                        "stored [{}, {}] but subtree spans [{lo}, {hi}]",
                        n.interval_lo, n.interval_hi
                    ),
                ));
            }
            bounds.insert(id, (lo, hi));
        }
        Ok(())
    }

    /// Number of nodes in each node's subtree.
    pub fn subtree_sizes(&self) -> HashMap<NodeId, usize> {
        let mut sizes = HashMap::with_capacity_and_hasher(self.nodes.len(), Default::default());
        for id in self.post_order() {
            let n = self.get(id).expect("reachable");
            let s = 1
                + n.left.map_or(0, |l| sizes[&l])
                + n.right.map_or(0, |r| sizes[&r]);
            sizes.insert(id, s);
        }
        sizes
    }

    /// Canonical link table `(id, parent, left, right)` sorted by id, used to
    /// compare topologies.
    pub fn link_table(&self) -> Vec<(NodeId, Option<NodeId>, Option<NodeId>, Option<NodeId>)> {
        let mut v: Vec<_> = self
            .nodes
            .iter()
            .map(|n| (n.id, n.parent, n.left, n.right))
            .collect();
        v.sort_by_key(|e| e.0);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<NodeId> {
        v.iter().map(|&x| NodeId(x)).collect()
    }

    fn n(x: u32) -> NodeId {
        NodeId(x)
    }

    #[test]
    fn single_node() {
        let t = Tree::build_balanced(1, &ids(&[5])).unwrap();
        assert_eq!(t.root(), n(5));
        let node = t.node(n(5)).unwrap();
        assert_eq!((node.interval_lo, node.interval_hi), (n(5), n(5)));
        assert!(t.check_invariants().is_ok());
    }

    #[test]
    fn three_nodes() {
        let t = Tree::balanced(3).unwrap();
        assert_eq!(t.root(), n(2));
        assert_eq!(t.node(n(2)).unwrap().left, Some(n(1)));
        assert_eq!(t.node(n(2)).unwrap().right, Some(n(3)));
    }

    #[test]
    fn seven_nodes_shape() {
        let t = Tree::balanced(7).unwrap();
        assert_eq!(t.root(), n(4));
        let r = t.node(n(4)).unwrap();
        assert_eq!((r.left, r.right), (Some(n(2)), Some(n(6))));
        for leaf in [1, 3, 5, 7] {
            let l = t.node(n(leaf)).unwrap();
            assert_eq!((l.left, l.right), (None, None));
        }
        assert!(t.check_invariants().is_ok());
    }

    #[test]
    fn build_errors() {
        assert_eq!(Tree::build_balanced(0, &[]), Err(TopologyError::EmptyTree));
        assert!(matches!(
            Tree::build_balanced(2, &ids(&[3, 1])),
            Err(TopologyError::UnsortedIds(_))
        ));
        assert!(matches!(
            Tree::build_balanced(2, &ids(&[1, 1])),
            Err(TopologyError::UnsortedIds(_))
        ));
        assert!(matches!(
            Tree::build_balanced(3, &ids(&[1, 2])),
            Err(TopologyError::CountMismatch { .. })
        ));
    }

    #[test]
    fn lca_and_distance_examples() {
        let t = Tree::balanced(7).unwrap();
        assert_eq!(t.lca(n(1), n(3)).unwrap(), n(2));
        assert_eq!(t.lca(n(3), n(5)).unwrap(), n(4));
        assert_eq!(t.lca(n(6), n(6)).unwrap(), n(6));
        assert_eq!(t.lca(n(2), n(3)).unwrap(), n(2));
        assert_eq!(t.distance(n(1), n(3)).unwrap(), 2);
        assert_eq!(t.distance(n(1), n(7)).unwrap(), 4);
        assert_eq!(t.distance(n(5), n(5)).unwrap(), 0);
        assert_eq!(t.lca(n(1), n(99)), Err(TopologyError::UnknownNode(n(99))));
        assert!(t.distance(n(42), n(1)).is_err());
    }

    #[test]
    fn subtree_predicate() {
        let t = Tree::balanced(7).unwrap();
        for x in 1..=7 {
            assert!(t.is_in_subtree(t.root(), n(x)).unwrap());
            assert!(t.is_in_subtree(n(x), n(x)).unwrap());
        }
        assert!(!t.is_in_subtree(n(2), n(5)).unwrap());
        assert!(t.is_in_subtree(n(2), n(99)).is_err());
    }

    #[test]
    fn detects_bst_violation() {
        let mut t = Tree::balanced(3).unwrap();
        // Swap the keys' positions by relinking: 3 as left child of 2, 1 as right.
        {
            let r = t.node_mut_unchecked(n(2)).unwrap();
            r.left = Some(n(3));
            r.right = Some(n(1));
        }
        let v = t.check_invariants().unwrap_err();
        assert_eq!(v.kind, ViolationKind::BstOrder);
        assert!(v.to_string().starts_with("BST order"));
    }

    #[test]
    fn detects_interval_and_link_violations() {
        let mut t = Tree::balanced(7).unwrap();
        t.node_mut_unchecked(n(6)).unwrap().interval_hi = n(6);
        assert_eq!(t.check_invariants().unwrap_err().kind, ViolationKind::Interval);

        let mut t = Tree::balanced(7).unwrap();
        t.node_mut_unchecked(n(1)).unwrap().parent = Some(n(4));
        assert_eq!(t.check_invariants().unwrap_err().kind, ViolationKind::LinkAsymmetry);

        let mut t = Tree::balanced(7).unwrap();
        t.node_mut_unchecked(n(6)).unwrap().parent = None;
        t.node_mut_unchecked(n(4)).unwrap().right = None;
        assert_eq!(t.check_invariants().unwrap_err().kind, ViolationKind::MultipleRoots);
    }

    #[test]
    fn orders() {
        let t = Tree::balanced(7).unwrap();
        assert_eq!(t.in_order(), ids(&[1, 2, 3, 4, 5, 6, 7]));
        let post = t.post_order();
        assert_eq!(post.last(), Some(&n(4)));
        let sizes = t.subtree_sizes();
        assert_eq!(sizes[&n(4)], 7);
        assert_eq!(sizes[&n(2)], 3);
        assert_eq!(sizes[&n(7)], 1);
    }
}
