//! Per-node rotation-request buffers ordered by the priority routine.
//!
//! A node can take part in rotations requested by itself, its two children,
//! four grandchildren and eight great-grandchildren, so a buffer never holds
//! more than [`CAPACITY`] live entries.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::NodeId;

pub const CAPACITY: usize = 15;

/// Hierarchy rank given to entries whose chain no longer includes the owner.
pub const STALE_RANK: u8 = 4;

/// Identity of one rotation request attempt.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntryKey {
    pub level1: NodeId,
    pub super_round: u64,
    pub round: u64,
    pub attempt: u32,
}

impl std::fmt::Display for EntryKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "b({})@R{}t{}a{}",
            self.level1, self.super_round, self.round, self.attempt
        )
    }
}

/// A pending rotation request as stored in a buffer.
///
/// The chain of nodes involved is `level1` (requester `u`), `level2` (its
/// parent `v`), `level3` (the grandparent `w`, double rotations only) and
/// `lock_top`, the node above the participants that is only locked for its
/// child-link update. Copies held lower in the chain may not know the upper
/// fields yet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub super_round: u64,
    pub round: u64,
    pub attempt: u32,
    pub level1: NodeId,
    pub level2: NodeId,
    pub level3: Option<NodeId>,
    pub lock_top: Option<NodeId>,
    pub splay_peer: NodeId,
    /// Set once the chain is known to end without a lock-only top
    /// (the top participant is the root).
    pub top_is_participant: bool,
}

impl BufferEntry {
    pub fn new(
        super_round: u64,
        round: u64,
        attempt: u32,
        requester: NodeId,
        parent: NodeId,
        splay_peer: NodeId,
    ) -> Self {
        BufferEntry {
            super_round,
            round,
            attempt,
            level1: requester,
            level2: parent,
            level3: None,
            lock_top: None,
            splay_peer,
            top_is_participant: false,
        }
    }

    pub fn key(&self) -> EntryKey {
        EntryKey {
            level1: self.level1,
            super_round: self.super_round,
            round: self.round,
            attempt: self.attempt,
        }
    }

    /// Known chain from requester upward.
    pub fn chain(&self) -> impl Iterator<Item = NodeId> + '_ {
        [Some(self.level1), Some(self.level2), self.level3, self.lock_top]
            .into_iter()
            .flatten()
    }

    pub fn mentions(&self, id: NodeId) -> bool {
        self.chain().any(|c| c == id)
    }

    /// Position of `owner` in the chain: 0 for the requester itself, 1 for a
    /// child's request, 2 for a grandchild's, 3 for a great-grandchild's.
    pub fn hierarchy(&self, owner: NodeId) -> Option<u8> {
        self.chain().position(|c| c == owner).map(|p| p as u8)
    }

    /// Node directly above `owner` in the chain.
    pub fn above(&self, owner: NodeId) -> Option<NodeId> {
        let chain: Vec<NodeId> = self.chain().collect();
        let p = chain.iter().position(|&c| c == owner)?;
        chain.get(p + 1).copied()
    }

    /// Node directly below `owner` in the chain.
    pub fn below(&self, owner: NodeId) -> Option<NodeId> {
        let chain: Vec<NodeId> = self.chain().collect();
        let p = chain.iter().position(|&c| c == owner)?;
        p.checked_sub(1).map(|q| chain[q])
    }

    /// Top-most node of the chain as currently known.
    pub fn top(&self) -> NodeId {
        self.lock_top.or(self.level3).unwrap_or(self.level2)
    }

    /// Fill in chain fields learned upstream, keeping what is already known.
    pub fn merge_from(&mut self, other: &BufferEntry) {
        if self.level3.is_none() {
            self.level3 = other.level3;
        }
        if self.lock_top.is_none() {
            self.lock_top = other.lock_top;
        }
        self.top_is_participant |= other.top_is_participant;
    }
}

/// The priority routine as seen from `owner`: super-round, then round, then
/// hierarchy (self, children, grandchildren, great-grandchildren), then
/// ascending requester id.
pub fn compare(owner: NodeId, a: &BufferEntry, b: &BufferEntry) -> Ordering {
    let rank = |e: &BufferEntry| e.hierarchy(owner).unwrap_or(STALE_RANK);
    a.super_round
        .cmp(&b.super_round)
        .then(a.round.cmp(&b.round))
        .then(rank(a).cmp(&rank(b)))
        .then(a.level1.cmp(&b.level1))
        .then(a.attempt.cmp(&b.attempt))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BufferError {
    #[error("buffer of node {owner} overflows capacity {CAPACITY} inserting {key}")]
    Overflow { owner: NodeId, key: EntryKey },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buffer {
    owner: NodeId,
    entries: Vec<BufferEntry>,
}

impl Buffer {
    pub fn new(owner: NodeId) -> Self {
        Buffer {
            owner,
            entries: Vec::new(),
        }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn head(&self) -> Option<&BufferEntry> {
        self.entries.first()
    }

    pub fn get(&self, key: &EntryKey) -> Option<&BufferEntry> {
        self.entries.iter().find(|e| e.key() == *key)
    }

    pub fn contains(&self, key: &EntryKey) -> bool {
        self.get(key).is_some()
    }

    /// Insert in priority position. Returns `Ok(false)` when the entry is
    /// already present; chain fields it carries are merged into the stored copy.
    pub fn insert(&mut self, e: BufferEntry) -> Result<bool, BufferError> {
        let key = e.key();
        if let Some(existing) = self.entries.iter_mut().find(|x| x.key() == key) {
            existing.merge_from(&e);
            self.resort();
            return Ok(false);
        }
        if self.entries.len() >= CAPACITY {
            return Err(BufferError::Overflow {
                owner: self.owner,
                key,
            });
        }
        let owner = self.owner;
        let pos = self
            .entries
            .partition_point(|x| compare(owner, x, &e) == Ordering::Less);
        self.entries.insert(pos, e);
        Ok(true)
    }

    /// Update chain fields of a stored entry.
    pub fn update(&mut self, key: &EntryKey, f: impl FnOnce(&mut BufferEntry)) -> bool {
        let Some(e) = self.entries.iter_mut().find(|x| x.key() == *key) else {
            return false;
        };
        f(e);
        self.resort();
        true
    }

    /// Drop every attempt of the rotation `(level1, round, super_round)`.
    pub fn remove_completed(&mut self, level1: NodeId, round: u64, super_round: u64) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| {
            !(e.level1 == level1 && e.round == round && e.super_round == super_round)
        });
        before - self.entries.len()
    }

    pub fn remove_key(&mut self, key: &EntryKey) -> Option<BufferEntry> {
        let p = self.entries.iter().position(|e| e.key() == *key)?;
        Some(self.entries.remove(p))
    }

    /// Remove and return entries matching `pred`.
    pub fn drain_where(&mut self, mut pred: impl FnMut(&BufferEntry) -> bool) -> Vec<BufferEntry> {
        let mut out = Vec::new();
        let mut kept = Vec::with_capacity(self.entries.len());
        for e in self.entries.drain(..) {
            if pred(&e) {
                out.push(e);
            } else {
                kept.push(e);
            }
        }
        self.entries = kept;
        out
    }

    /// Apply a link change: entries that mention the neighbour that went away
    /// are dropped, and entries forwarded by the new neighbour are merged in.
    pub fn reconcile_on_link_change(
        &mut self,
        old_neighbor: Option<NodeId>,
        new_neighbor: Option<NodeId>,
        imported: &[BufferEntry],
    ) -> Result<Vec<BufferEntry>, BufferError> {
        let removed = match old_neighbor {
            Some(old) if Some(old) != new_neighbor => self.drain_where(|e| e.mentions(old)),
            _ => Vec::new(),
        };
        for e in imported {
            self.insert(e.clone())?;
        }
        Ok(removed)
    }

    fn resort(&mut self) {
        let owner = self.owner;
        self.entries.sort_by(|a, b| compare(owner, a, b));
    }

    /// Test-only fault injection: overwrite the stored order verbatim.
    #[doc(hidden)]
    pub fn force_entries(&mut self, entries: Vec<BufferEntry>) {
        self.entries = entries;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(x: u32) -> NodeId {
        NodeId(x)
    }

    fn entry(round: u64, requester: u32, parent: u32) -> BufferEntry {
        BufferEntry::new(0, round, 0, n(requester), n(parent), n(99))
    }

    #[test]
    fn round_precedes_hierarchy() {
        // owner 10; child 5 asks in round 2, owner itself in round 3
        let a = entry(2, 5, 10);
        let b = entry(3, 10, 20);
        assert_eq!(compare(n(10), &a, &b), Ordering::Less);
    }

    #[test]
    fn self_before_child() {
        let own = entry(1, 10, 20);
        let child = entry(1, 5, 10);
        assert_eq!(compare(n(10), &own, &child), Ordering::Less);
    }

    #[test]
    fn ascending_id_within_level() {
        let a = entry(1, 3, 10);
        let b = entry(1, 9, 10);
        assert_eq!(compare(n(10), &a, &b), Ordering::Less);
        assert_eq!(compare(n(10), &b, &a), Ordering::Greater);
    }

    #[test]
    fn super_round_first() {
        let mut a = entry(7, 5, 10);
        a.super_round = 0;
        let mut b = entry(0, 10, 20);
        b.super_round = 1;
        assert_eq!(compare(n(10), &a, &b), Ordering::Less);
    }

    #[test]
    fn insert_orders_and_heads() {
        let mut buf = Buffer::new(n(10));
        assert!(buf.head().is_none());
        assert!(buf.insert(entry(2, 5, 10)).unwrap());
        assert!(buf.insert(entry(2, 10, 20)).unwrap());
        assert_eq!(buf.head().unwrap().level1, n(10));

        let mut buf = Buffer::new(n(10));
        buf.insert(entry(2, 10, 20)).unwrap();
        buf.insert(entry(1, 5, 10)).unwrap();
        assert_eq!(buf.head().unwrap().level1, n(5));
    }

    #[test]
    fn duplicate_insert_is_idempotent_and_merges() {
        let mut buf = Buffer::new(n(10));
        let e = entry(1, 5, 7);
        buf.insert(e.clone()).unwrap();
        let mut richer = e.clone();
        richer.level3 = Some(n(10));
        assert!(!buf.insert(richer).unwrap());
        assert_eq!(buf.len(), 1);
        assert_eq!(buf.head().unwrap().level3, Some(n(10)));
    }

    #[test]
    fn capacity_is_fifteen() {
        let mut buf = Buffer::new(n(1000));
        for i in 0..CAPACITY as u32 {
            buf.insert(entry(0, i + 1, 1000)).unwrap();
        }
        assert_eq!(buf.len(), 15);
        let err = buf.insert(entry(0, 500, 1000)).unwrap_err();
        assert!(matches!(err, BufferError::Overflow { .. }));
        // duplicates never overflow
        assert!(!buf.insert(entry(0, 1, 1000)).unwrap());
    }

    #[test]
    fn remove_completed_cases() {
        let mut buf = Buffer::new(n(10));
        buf.insert(entry(1, 10, 20)).unwrap();
        assert_eq!(buf.remove_completed(n(10), 1, 0), 1);
        assert!(buf.is_empty());

        buf.insert(entry(1, 10, 20)).unwrap();
        buf.insert(entry(1, 5, 10)).unwrap();
        buf.remove_completed(n(10), 1, 0);
        assert_eq!(buf.head().unwrap().level1, n(5));

        let before = buf.clone();
        assert_eq!(buf.remove_completed(n(42), 1, 0), 0);
        assert_eq!(buf, before);
    }

    #[test]
    fn reconcile_cases() {
        let mut buf = Buffer::new(n(10));
        buf.insert(entry(1, 5, 10)).unwrap();
        let before = buf.clone();
        buf.reconcile_on_link_change(None, None, &[]).unwrap();
        assert_eq!(buf, before);

        // old child 5 had two entries (its own and its child 3's); the new
        // child 12 brings one.
        let mut buf = Buffer::new(n(10));
        buf.insert(entry(1, 5, 10)).unwrap();
        let mut grand = entry(1, 3, 5);
        grand.level3 = Some(n(10));
        buf.insert(grand).unwrap();
        buf.insert(entry(1, 10, 20)).unwrap();
        let removed = buf
            .reconcile_on_link_change(Some(n(5)), Some(n(12)), &[entry(1, 12, 10)])
            .unwrap();
        assert_eq!(removed.len(), 2);
        assert_eq!(buf.len(), 2);

        // a new parent with a pending self-request
        let mut buf = Buffer::new(n(10));
        let parent_req = entry(0, 30, 40);
        buf.reconcile_on_link_change(Some(n(20)), Some(n(30)), &[parent_req.clone()])
            .unwrap();
        assert!(buf.contains(&parent_req.key()));
    }

    #[test]
    fn chain_navigation() {
        let mut e = entry(0, 1, 2);
        e.level3 = Some(n(4));
        e.lock_top = Some(n(8));
        assert_eq!(e.hierarchy(n(8)), Some(3));
        assert_eq!(e.above(n(2)), Some(n(4)));
        assert_eq!(e.below(n(2)), Some(n(1)));
        assert_eq!(e.below(n(1)), None);
        assert_eq!(e.top(), n(8));
        assert_eq!(e.hierarchy(n(77)), None);
    }
}
