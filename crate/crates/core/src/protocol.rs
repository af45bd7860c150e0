//! Per-node state machine of the distributed splay and rotation routines.
//!
//! Every node only reads its own [`NodeState`] and talks to tree neighbours.
//! A rotation request travels up the chain `u -> v (-> w)`, locks are granted
//! top-down, the requester commits once the ack reaches it, and releases flow
//! back to the nodes still holding locks. A node whose local links stop
//! matching a buffered chain purges it and sends `Cancel` along the intact
//! side, so the requester retries with a fresh attempt.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{Buffer, BufferEntry, BufferError, EntryKey};
use crate::topology::{NodeId, TreeNode};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relationship {
    Parent,
    Left,
    Right,
}

impl Relationship {
    pub fn as_str(self) -> &'static str {
        match self {
            Relationship::Parent => "parent",
            Relationship::Left => "left",
            Relationship::Right => "right",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    SplayRequest {
        src: NodeId,
        dst: NodeId,
        super_round: u64,
    },
    BetaRequest {
        entry: BufferEntry,
    },
    LockRequest {
        entry: BufferEntry,
    },
    LockAck {
        entry: BufferEntry,
    },
    BetaAck {
        entry: BufferEntry,
    },
    /// Withdraw an entry whose chain broke.
    Cancel {
        entry: BufferEntry,
    },
    /// Sent straight to a requester whose rotation an outranking endpoint
    /// refused; the requester withdraws and holds until woken.
    Shield {
        entry: BufferEntry,
    },
    /// The shielding endpoint moved or finished.
    Wake,
    LinkChange {
        relationship: Relationship,
        neighbor: NodeId,
    },
    /// Buffer contents sent to a new neighbour; `completed` releases the
    /// receiver's lock for a committed rotation.
    BufferChange {
        entries: Vec<BufferEntry>,
        completed: Option<EntryKey>,
    },
    SplayComplete {
        src: NodeId,
        dst: NodeId,
        super_round: u64,
    },
}

impl Payload {
    pub fn name(&self) -> &'static str {
        match self {
            Payload::SplayRequest { .. } => "splay_request",
            Payload::BetaRequest { .. } => "beta_request",
            Payload::LockRequest { .. } => "lock_request",
            Payload::LockAck { .. } => "lock_ack",
            Payload::BetaAck { .. } => "beta_ack",
            Payload::Cancel { .. } => "cancel",
            Payload::Shield { .. } => "shield",
            Payload::Wake => "wake",
            Payload::LinkChange { .. } => "link_change",
            Payload::BufferChange { .. } => "buffer_change",
            Payload::SplayComplete { .. } => "splay_complete",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub from: NodeId,
    pub to: NodeId,
    pub payload: Payload,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Source,
    Destination,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSplay {
    pub src: NodeId,
    pub dst: NodeId,
    pub super_round: u64,
    pub role: Role,
    pub waiting_as_lca: bool,
    /// Global round in which this endpoint learned about the splay
    /// (only meaningful in lockstep mode).
    pub armed_round: u64,
}

impl ActiveSplay {
    pub fn peer(&self) -> NodeId {
        match self.role {
            Role::Source => self.dst,
            Role::Destination => self.src,
        }
    }
}

/// Lifetime record of one splay request as tracked by the engine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplayDescriptor {
    pub src: NodeId,
    pub dst: NodeId,
    /// Index of the batch (super-round) the request belongs to.
    pub batch: usize,
    pub super_round: u64,
    pub arrival: u64,
    pub issued_at: Option<u64>,
    pub completed_at: Option<u64>,
    pub rotations_src: u64,
    pub rotations_dst: u64,
    /// Cyber-dollars spent by both endpoints.
    pub dollars: u64,
    pub initial_distance: usize,
    /// Largest distance between the endpoints observed while live.
    pub max_distance: usize,
}

impl SplayDescriptor {
    pub fn new(src: NodeId, dst: NodeId, batch: usize, arrival: u64) -> Self {
        SplayDescriptor {
            src,
            dst,
            batch,
            super_round: 0,
            arrival,
            issued_at: None,
            completed_at: None,
            rotations_src: 0,
            rotations_dst: 0,
            dollars: 0,
            initial_distance: 0,
            max_distance: 0,
        }
    }

    pub fn rotations(&self) -> u64 {
        self.rotations_src + self.rotations_dst
    }

    pub fn is_complete(&self) -> bool {
        self.completed_at.is_some()
    }
}

/// Progress of one buffered entry at one node.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryPhase {
    /// Waiting for the lock ack from above.
    Waiting,
    /// This node tops the chain and may grant once the entry is buffer head.
    TopReady,
    /// Ack from above received; grant when unlocked.
    Acked,
    /// This node is locked for the entry.
    Granted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    SplayIssue,
    SplayForward,
    SplayArrive,
    Request,
    Forward,
    LockRequest,
    Grant,
    Commit,
    Free,
    Cancel,
    Regenerate,
    Drop,
    LinkChange,
    BufferChange,
    Wait,
    Resume,
    SplayComplete,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::SplayIssue => "splay_issue",
            EventKind::SplayForward => "splay_forward",
            EventKind::SplayArrive => "splay_arrive",
            EventKind::Request => "request",
            EventKind::Forward => "forward",
            EventKind::LockRequest => "lock_request",
            EventKind::Grant => "grant",
            EventKind::Commit => "commit",
            EventKind::Free => "free",
            EventKind::Cancel => "cancel",
            EventKind::Regenerate => "regenerate",
            EventKind::Drop => "drop",
            EventKind::LinkChange => "link_change",
            EventKind::BufferChange => "buffer_change",
            EventKind::Wait => "wait",
            EventKind::Resume => "resume",
            EventKind::SplayComplete => "splay_complete",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub node: NodeId,
    pub kind: EventKind,
    pub detail: String,
}

/// Everything a node emits during one slot.
#[derive(Clone, Debug, Default)]
pub struct Outbox {
    pub messages: Vec<Message>,
    /// Entries whose requester holds every lock and asks the engine to commit.
    pub commits: Vec<BufferEntry>,
    /// Splays `(src, super_round)` whose objective this node observed.
    pub completed: Vec<(NodeId, u64)>,
    pub events: Vec<Event>,
    /// Drop event records instead of formatting them.
    pub quiet: bool,
}

impl Outbox {
    pub fn quiet() -> Self {
        Outbox {
            quiet: true,
            ..Default::default()
        }
    }

    pub fn send(&mut self, from: NodeId, to: NodeId, payload: Payload) {
        self.messages.push(Message { from, to, payload });
    }

    pub fn log(&mut self, node: NodeId, kind: EventKind, detail: std::fmt::Arguments<'_>) {
        if !self.quiet {
            self.events.push(Event {
                node,
                kind,
                detail: detail.to_string(),
            });
        }
    }
}

/// Slot-level context handed to every node.
#[derive(Copy, Clone, Debug, Default)]
pub struct Ctx {
    pub now: u64,
    /// Current global round when rounds are run in lockstep.
    pub lockstep_round: Option<u64>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("splay target equals the source {0}")]
    SelfSplay(NodeId),
    #[error("node {0} already serves a splay")]
    Busy(NodeId),
    #[error("root {0} asked to rotate while not the lowest common ancestor")]
    RootRequest(NodeId),
    #[error(transparent)]
    Buffer(#[from] BufferError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeState {
    pub id: NodeId,
    pub links: TreeNode,
    pub locked_by: Option<EntryKey>,
    pub buffer: Buffer,
    pub phases: BTreeMap<EntryKey, EntryPhase>,
    pub active_splay: Option<ActiveSplay>,
    /// Rotations completed within the current splay.
    pub round: u64,
    /// Local splay counter, used as the super-round of splays this node sources.
    pub super_round: u64,
    /// Request serial; makes every attempt key unique.
    pub serial: u32,
    pub pending_rotation: Option<BufferEntry>,
    /// Slot at which the current round's first request was generated.
    pub round_started_at: Option<u64>,
    pub tombstones: BTreeSet<EntryKey>,
    pub finished: BTreeSet<(NodeId, u64)>,
    /// Global round of this node's last committed rotation (lockstep mode).
    pub rotated_in_round: Option<u64>,
    pub max_buffer: usize,
    /// Endpoint that refused this node's last request.
    pub held_by: Option<NodeId>,
    /// Requesters this node refused since it last moved.
    pub shielded: BTreeSet<NodeId>,
}

impl NodeState {
    pub fn new(links: &TreeNode) -> Self {
        NodeState {
            id: links.id,
            links: links.clone(),
            locked_by: None,
            buffer: Buffer::new(links.id),
            phases: BTreeMap::new(),
            active_splay: None,
            round: 0,
            super_round: 0,
            serial: 0,
            pending_rotation: None,
            round_started_at: None,
            tombstones: BTreeSet::new(),
            finished: BTreeSet::new(),
            rotated_in_round: None,
            max_buffer: 0,
            held_by: None,
            shielded: BTreeSet::new(),
        }
    }

    pub fn is_locked(&self) -> bool {
        self.locked_by.is_some()
    }

    pub fn phase(&self, key: &EntryKey) -> Option<EntryPhase> {
        self.phases.get(key).copied()
    }

    fn is_child(&self, x: NodeId) -> bool {
        self.links.left == Some(x) || self.links.right == Some(x)
    }

    fn is_neighbor(&self, x: NodeId) -> bool {
        self.links.parent == Some(x) || self.is_child(x)
    }

    /// Whether this node, as an endpoint of a splay that outranks the
    /// requester's, refuses to be rotated over by it.
    pub fn shields_against(&self, e: &BufferEntry) -> bool {
        self.active_splay.as_ref().is_some_and(|a| {
            let own = (a.super_round, a.src.min(a.dst));
            let theirs = (e.super_round, e.level1.min(e.splay_peer));
            e.splay_peer != self.id && own < theirs
        })
    }

    /// Next hop toward `target` using the local interval.
    pub fn next_hop(&self, target: NodeId) -> Option<NodeId> {
        if target == self.id {
            None
        } else if self.links.contains(target) {
            if target < self.id {
                self.links.left
            } else {
                self.links.right
            }
        } else {
            self.links.parent
        }
    }

    /// One time-slot: consume the inbox (link changes first), then run the
    /// LCA check, the grant guard and request generation.
    pub fn step(&mut self, mut inbox: Vec<Message>, ctx: &Ctx, out: &mut Outbox) -> Result<(), ProtocolError> {
        inbox.sort_by_key(|m| !matches!(m.payload, Payload::LinkChange { .. }));
        for m in inbox {
            self.handle(m, ctx, out)?;
        }
        self.lca_wait_check(out);
        self.try_grant(out);
        self.generate_rotation(ctx, out)?;
        self.max_buffer = self.max_buffer.max(self.buffer.len());
        Ok(())
    }

    pub fn handle(&mut self, m: Message, ctx: &Ctx, out: &mut Outbox) -> Result<(), ProtocolError> {
        let from = m.from;
        match m.payload {
            Payload::SplayRequest {
                src,
                dst,
                super_round,
            } => self.handle_splay_request(src, dst, super_round, ctx, out)?,
            Payload::BetaRequest { entry } => self.handle_beta_request(from, entry, out)?,
            Payload::LockRequest { entry } => self.handle_lock_request(from, entry, out)?,
            Payload::LockAck { entry } => self.handle_lock_ack(from, entry, out),
            Payload::BetaAck { entry } => self.handle_beta_ack(from, entry, out),
            Payload::Cancel { entry } => self.handle_cancel(from, entry, out),
            Payload::Shield { entry } => self.handle_shield(from, entry, out),
            Payload::Wake => {
                if self.held_by == Some(from) {
                    self.held_by = None;
                    out.log(self.id, EventKind::Resume, format_args!("woken by={from}"));
                }
            }
            Payload::LinkChange {
                relationship,
                neighbor,
            } => self.handle_link_change(relationship, neighbor, out),
            Payload::BufferChange { entries, completed } => {
                self.handle_buffer_change(from, &entries, completed, out)
            }
            Payload::SplayComplete {
                src,
                dst,
                super_round,
            } => self.handle_splay_complete(src, dst, super_round, out),
        }
        Ok(())
    }

    /// Become the source of a splay toward `dst`.
    pub fn start_splay(&mut self, dst: NodeId, ctx: &Ctx, out: &mut Outbox) -> Result<(), ProtocolError> {
        if dst == self.id {
            return Err(ProtocolError::SelfSplay(dst));
        }
        if self.active_splay.is_some() {
            return Err(ProtocolError::Busy(self.id));
        }
        let super_round = self.super_round;
        self.super_round += 1;
        self.round = 0;
        self.held_by = None;
        self.active_splay = Some(ActiveSplay {
            src: self.id,
            dst,
            super_round,
            role: Role::Source,
            waiting_as_lca: false,
            armed_round: ctx.lockstep_round.unwrap_or(0),
        });
        out.log(self.id, EventKind::SplayIssue, format_args!("dst={dst} sr={super_round}"));
        if let Some(hop) = self.next_hop(dst) {
            out.send(
                self.id,
                hop,
                Payload::SplayRequest {
                    src: self.id,
                    dst,
                    super_round,
                },
            );
        }
        Ok(())
    }

    fn handle_splay_request(
        &mut self,
        src: NodeId,
        dst: NodeId,
        super_round: u64,
        ctx: &Ctx,
        out: &mut Outbox,
    ) -> Result<(), ProtocolError> {
        if dst != self.id {
            if let Some(hop) = self.next_hop(dst) {
                out.send(
                    self.id,
                    hop,
                    Payload::SplayRequest {
                        src,
                        dst,
                        super_round,
                    },
                );
                out.log(self.id, EventKind::SplayForward, format_args!("src={src} dst={dst} to={hop}"));
            }
            return Ok(());
        }
        if self.finished.contains(&(src, super_round)) {
            out.log(self.id, EventKind::Drop, format_args!("splay_request src={src} finished"));
            return Ok(());
        }
        if self.active_splay.is_some() {
            return Err(ProtocolError::Busy(self.id));
        }
        self.round = 0;
        self.held_by = None;
        self.active_splay = Some(ActiveSplay {
            src,
            dst,
            super_round,
            role: Role::Destination,
            waiting_as_lca: false,
            armed_round: ctx.lockstep_round.unwrap_or(0),
        });
        out.log(self.id, EventKind::SplayArrive, format_args!("src={src} sr={super_round}"));
        Ok(())
    }

    fn handle_splay_complete(&mut self, src: NodeId, dst: NodeId, super_round: u64, out: &mut Outbox) {
        self.finished.insert((src, super_round));
        let ours = matches!(&self.active_splay, Some(a) if a.src == src && a.dst == dst && a.super_round == super_round);
        if ours {
            self.cancel_pending(out);
            self.active_splay = None;
            self.wake_shielded(out);
            out.log(self.id, EventKind::SplayComplete, format_args!("src={src} dst={dst} by=peer"));
        }
    }

    /// LCA waiting logic and objective detection.
    pub fn lca_wait_check(&mut self, out: &mut Outbox) {
        let Some(a) = self.active_splay.clone() else {
            return;
        };
        let peer = a.peer();
        if self.is_neighbor(peer) {
            self.cancel_pending(out);
            self.finished.insert((a.src, a.super_round));
            self.active_splay = None;
            self.wake_shielded(out);
            out.completed.push((a.src, a.super_round));
            out.send(
                self.id,
                peer,
                Payload::SplayComplete {
                    src: a.src,
                    dst: a.dst,
                    super_round: a.super_round,
                },
            );
            out.log(self.id, EventKind::SplayComplete, format_args!("src={} dst={}", a.src, a.dst));
            return;
        }
        let lca = self.links.contains(peer);
        if lca != a.waiting_as_lca {
            if let Some(s) = self.active_splay.as_mut() {
                s.waiting_as_lca = lca;
            }
            let kind = if lca { EventKind::Wait } else { EventKind::Resume };
            out.log(self.id, kind, format_args!("peer={peer}"));
        }
        if lca {
            self.cancel_pending(out);
        }
    }

    fn cancel_pending(&mut self, out: &mut Outbox) {
        let Some(p) = self.pending_rotation.take() else {
            return;
        };
        let key = p.key();
        self.buffer.remove_key(&key);
        self.phases.remove(&key);
        self.tombstones.insert(key);
        if self.links.parent == Some(p.level2) {
            out.send(self.id, p.level2, Payload::Cancel { entry: p.clone() });
        }
        out.log(self.id, EventKind::Cancel, format_args!("{key} own"));
    }

    /// Issue a rotation request toward the parent if the splay needs one.
    pub fn generate_rotation(&mut self, ctx: &Ctx, out: &mut Outbox) -> Result<(), ProtocolError> {
        let Some(a) = self.active_splay.as_ref() else {
            return Ok(());
        };
        if self.pending_rotation.is_some() || a.waiting_as_lca || self.is_locked() || self.held_by.is_some() {
            return Ok(());
        }
        if let Some(g) = ctx.lockstep_round {
            if a.armed_round >= g || self.rotated_in_round == Some(g) {
                return Ok(());
            }
        }
        let peer = a.peer();
        let super_round = a.super_round;
        let parent = self.links.parent.ok_or(ProtocolError::RootRequest(self.id))?;
        let entry = BufferEntry::new(super_round, self.round, self.serial, self.id, parent, peer);
        self.serial += 1;
        self.buffer.insert(entry.clone())?;
        self.phases.insert(entry.key(), EntryPhase::Waiting);
        self.pending_rotation = Some(entry.clone());
        self.round_started_at = Some(ctx.now);
        out.log(self.id, EventKind::Request, format_args!("{} to={parent}", entry.key()));
        out.send(self.id, parent, Payload::BetaRequest { entry });
        Ok(())
    }

    fn handle_beta_request(&mut self, from: NodeId, mut entry: BufferEntry, out: &mut Outbox) -> Result<(), ProtocolError> {
        let key = entry.key();
        if self.tombstones.contains(&key) {
            out.log(self.id, EventKind::Drop, format_args!("{key} tombstoned"));
            return Ok(());
        }
        let at_v = entry.level2 == self.id && from == entry.level1;
        let at_w = entry.level3 == Some(self.id) && from == entry.level2;
        if !(at_v || at_w) || !self.is_child(from) {
            out.log(self.id, EventKind::Drop, format_args!("{key} stale from={from}"));
            return Ok(());
        }
        if self.shields_against(&entry) {
            out.log(self.id, EventKind::Cancel, format_args!("{key} shielded"));
            self.shielded.insert(entry.level1);
            if from != entry.level1 {
                out.send(self.id, from, Payload::Cancel { entry: entry.clone() });
            }
            out.send(self.id, entry.level1, Payload::Shield { entry });
            return Ok(());
        }
        let parent = self.links.parent;
        let peer = entry.splay_peer;
        let zig = parent.is_none() || self.links.contains(peer) || parent == Some(peer);
        let phase = if at_v && !zig {
            entry.level3 = parent;
            EntryPhase::Waiting
        } else if let Some(top) = parent {
            entry.lock_top = Some(top);
            EntryPhase::Waiting
        } else {
            entry.top_is_participant = true;
            EntryPhase::TopReady
        };
        self.buffer.insert(entry.clone())?;
        self.phases.insert(key, phase);
        match (at_v && !zig, parent) {
            (true, Some(w)) => {
                out.log(self.id, EventKind::Forward, format_args!("{key} to={w}"));
                out.send(self.id, w, Payload::BetaRequest { entry });
            }
            (false, Some(top)) => {
                out.log(self.id, EventKind::LockRequest, format_args!("{key} to={top}"));
                out.send(self.id, top, Payload::LockRequest { entry });
            }
            _ => {}
        }
        Ok(())
    }

    fn handle_lock_request(&mut self, from: NodeId, entry: BufferEntry, out: &mut Outbox) -> Result<(), ProtocolError> {
        let key = entry.key();
        if self.tombstones.contains(&key) {
            out.log(self.id, EventKind::Drop, format_args!("{key} tombstoned"));
            return Ok(());
        }
        let top_participant = entry.level3.unwrap_or(entry.level2);
        if entry.lock_top != Some(self.id) || from != top_participant || !self.is_child(from) {
            out.log(self.id, EventKind::Drop, format_args!("{key} stale from={from}"));
            return Ok(());
        }
        self.buffer.insert(entry)?;
        self.phases.insert(key, EntryPhase::TopReady);
        Ok(())
    }

    fn handle_lock_ack(&mut self, from: NodeId, entry: BufferEntry, out: &mut Outbox) {
        let key = entry.key();
        let known = self.phases.get(&key) == Some(&EntryPhase::Waiting)
            && entry.above(self.id) == Some(from)
            && self.links.parent == Some(from);
        if !known {
            out.log(self.id, EventKind::Drop, format_args!("{key} ack from={from}"));
            if self.links.parent == Some(from) {
                out.send(self.id, from, Payload::Cancel { entry });
            }
            return;
        }
        self.buffer.insert(entry).ok();
        self.phases.insert(key, EntryPhase::Acked);
    }

    /// Grant guard: entries acked from above go first; otherwise only the
    /// buffer head may be granted, and only by the node topping its chain.
    pub fn try_grant(&mut self, out: &mut Outbox) {
        if self.is_locked() {
            return;
        }
        let acked = self
            .buffer
            .entries()
            .iter()
            .find(|e| self.phases.get(&e.key()) == Some(&EntryPhase::Acked));
        let pick = acked.or_else(|| {
            self.buffer
                .head()
                .filter(|e| self.phases.get(&e.key()) == Some(&EntryPhase::TopReady))
        });
        let Some(e) = pick.cloned() else {
            return;
        };
        let key = e.key();
        if !self.piece_ok(&e) {
            self.purge(&e, out);
            return;
        }
        self.locked_by = Some(key);
        self.phases.insert(key, EntryPhase::Granted);
        if e.level1 == self.id {
            out.log(self.id, EventKind::Commit, format_args!("{key}"));
            out.commits.push(e);
        } else if let Some(below) = e.below(self.id) {
            out.log(self.id, EventKind::Grant, format_args!("{key} to={below}"));
            out.send(self.id, below, Payload::LockAck { entry: e });
        }
    }

    fn handle_beta_ack(&mut self, from: NodeId, entry: BufferEntry, out: &mut Outbox) {
        let key = entry.key();
        if self.locked_by != Some(key) {
            out.log(self.id, EventKind::Drop, format_args!("{key} beta_ack from={from}"));
            return;
        }
        self.release(key, out);
        if entry.level2 == self.id {
            if let Some(w) = entry.level3.filter(|&w| self.is_child(w)) {
                out.send(self.id, w, Payload::BetaAck { entry });
            }
        }
    }

    fn release(&mut self, key: EntryKey, out: &mut Outbox) {
        self.locked_by = None;
        self.buffer.remove_key(&key);
        self.phases.remove(&key);
        self.tombstones.insert(key);
        out.log(self.id, EventKind::Free, format_args!("{key}"));
    }

    fn handle_buffer_change(
        &mut self,
        from: NodeId,
        entries: &[BufferEntry],
        completed: Option<EntryKey>,
        out: &mut Outbox,
    ) {
        if let Some(key) = completed {
            if self.locked_by == Some(key) {
                self.release(key, out);
            }
        }
        let mut merged = 0;
        for e in entries {
            let key = e.key();
            if self.buffer.contains(&key) && !self.tombstones.contains(&key) {
                self.buffer.update(&key, |x| x.merge_from(e));
                merged += 1;
            }
        }
        if !entries.is_empty() {
            out.log(self.id, EventKind::BufferChange, format_args!("from={from} entries={} merged={merged}", entries.len()));
        }
    }

    fn handle_shield(&mut self, from: NodeId, entry: BufferEntry, out: &mut Outbox) {
        let key = entry.key();
        if self.pending_rotation.as_ref().map(|p| p.key()) != Some(key) {
            return;
        }
        self.pending_rotation = None;
        self.buffer.remove_key(&key);
        self.phases.remove(&key);
        self.tombstones.insert(key);
        self.held_by = Some(from);
        out.log(self.id, EventKind::Wait, format_args!("{key} held by={from}"));
    }

    fn wake_shielded(&mut self, out: &mut Outbox) {
        for u in std::mem::take(&mut self.shielded) {
            out.send(self.id, u, Payload::Wake);
        }
    }

    fn handle_cancel(&mut self, from: NodeId, mut entry: BufferEntry, out: &mut Outbox) {
        let key = entry.key();
        let local = self.buffer.remove_key(&key);
        let had = local.is_some();
        if let Some(mut l) = local {
            l.merge_from(&entry);
            entry = l;
        }
        self.phases.remove(&key);
        self.tombstones.insert(key);
        if self.locked_by == Some(key) {
            self.locked_by = None;
        }
        if self.pending_rotation.as_ref().map(|p| p.key()) == Some(key) {
            self.pending_rotation = None;
            out.log(self.id, EventKind::Regenerate, format_args!("{key}"));
        }
        if !had {
            return;
        }
        out.log(self.id, EventKind::Cancel, format_args!("{key} from={from}"));
        let next = if entry.above(self.id) == Some(from) {
            entry.below(self.id).filter(|&b| self.is_child(b))
        } else {
            entry.above(self.id).filter(|&a| self.links.parent == Some(a))
        };
        if let Some(to) = next {
            out.send(self.id, to, Payload::Cancel { entry });
        }
    }

    pub fn handle_link_change(&mut self, relationship: Relationship, neighbor: NodeId, out: &mut Outbox) {
        let slot = match relationship {
            Relationship::Parent => &mut self.links.parent,
            Relationship::Left => &mut self.links.left,
            Relationship::Right => &mut self.links.right,
        };
        if *slot == Some(neighbor) {
            return;
        }
        *slot = Some(neighbor);
        out.log(self.id, EventKind::LinkChange, format_args!("{}={neighbor}", relationship.as_str()));
        self.revalidate(out);
        let own: Vec<BufferEntry> = self
            .buffer
            .entries()
            .iter()
            .filter(|e| matches!(e.hierarchy(self.id), Some(0..=2)))
            .cloned()
            .collect();
        out.send(
            self.id,
            neighbor,
            Payload::BufferChange {
                entries: own,
                completed: None,
            },
        );
    }

    /// Whether the local links still match this node's piece of the chain.
    pub fn piece_ok(&self, e: &BufferEntry) -> bool {
        if e.hierarchy(self.id).is_none() {
            return false;
        }
        let above_ok = match e.above(self.id) {
            Some(a) => self.links.parent == Some(a),
            None if e.top_is_participant && e.top() == self.id => self.links.parent.is_none(),
            None => true,
        };
        let below_ok = e.below(self.id).is_none_or(|b| self.is_child(b));
        above_ok && below_ok
    }

    /// Drop every entry the current links contradict, except the one this
    /// node is locked for.
    pub fn revalidate(&mut self, out: &mut Outbox) {
        self.held_by = None;
        self.wake_shielded(out);
        let broken: Vec<BufferEntry> = self
            .buffer
            .entries()
            .iter()
            .filter(|e| Some(e.key()) != self.locked_by && !self.piece_ok(e))
            .cloned()
            .collect();
        for e in broken {
            self.purge(&e, out);
        }
    }

    fn purge(&mut self, e: &BufferEntry, out: &mut Outbox) {
        let key = e.key();
        self.buffer.remove_key(&key);
        self.phases.remove(&key);
        self.tombstones.insert(key);
        if self.locked_by == Some(key) {
            self.locked_by = None;
        }
        out.log(self.id, EventKind::Cancel, format_args!("{key} stale"));
        if let Some(a) = e.above(self.id).filter(|&a| self.links.parent == Some(a)) {
            out.send(self.id, a, Payload::Cancel { entry: e.clone() });
        }
        if let Some(b) = e.below(self.id).filter(|&b| self.is_child(b)) {
            out.send(self.id, b, Payload::Cancel { entry: e.clone() });
        }
        if e.level1 == self.id && self.pending_rotation.as_ref().map(|p| p.key()) == Some(key) {
            self.pending_rotation = None;
            out.log(self.id, EventKind::Regenerate, format_args!("{key}"));
        }
    }

    /// Bookkeeping at the requester once the engine committed its rotation.
    pub fn complete_own_rotation(&mut self, key: EntryKey, global_round: Option<u64>) {
        self.buffer.remove_key(&key);
        self.phases.remove(&key);
        self.tombstones.insert(key);
        self.locked_by = None;
        self.pending_rotation = None;
        self.round_started_at = None;
        self.round += 1;
        self.rotated_in_round = global_round;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::Tree;

    fn n(x: u32) -> NodeId {
        NodeId(x)
    }

    fn states(t: &Tree) -> BTreeMap<NodeId, NodeState> {
        t.nodes().iter().map(|x| (x.id, NodeState::new(x))).collect()
    }

    #[test]
    fn start_splay_rejects_self() {
        let t = Tree::balanced(7).unwrap();
        let mut s = states(&t);
        let mut out = Outbox::default();
        let err = s.get_mut(&n(1)).unwrap().start_splay(n(1), &Ctx::default(), &mut out);
        assert_eq!(err, Err(ProtocolError::SelfSplay(n(1))));
    }

    #[test]
    fn source_at_lca_waits() {
        // 4 is the root and the LCA of (4, 1)
        let t = Tree::balanced(7).unwrap();
        let mut s = states(&t);
        let mut out = Outbox::default();
        let node = s.get_mut(&n(4)).unwrap();
        node.start_splay(n(1), &Ctx::default(), &mut out).unwrap();
        node.step(vec![], &Ctx::default(), &mut out).unwrap();
        assert!(node.active_splay.as_ref().unwrap().waiting_as_lca);
        assert!(node.pending_rotation.is_none());
    }

    #[test]
    fn generic_source_sends_beta_request_to_parent() {
        let t = Tree::balanced(7).unwrap();
        let mut s = states(&t);
        let mut out = Outbox::default();
        let node = s.get_mut(&n(1)).unwrap();
        node.start_splay(n(7), &Ctx::default(), &mut out).unwrap();
        out.messages.clear();
        node.step(vec![], &Ctx::default(), &mut out).unwrap();
        let m = &out.messages[0];
        assert_eq!(m.to, n(2));
        assert!(matches!(m.payload, Payload::BetaRequest { .. }));
        assert_eq!(node.buffer.len(), 1);
    }

    #[test]
    fn adjacent_pair_completes_without_rotation() {
        let t = Tree::balanced(7).unwrap();
        let mut s = states(&t);
        let mut out = Outbox::default();
        let node = s.get_mut(&n(1)).unwrap();
        node.start_splay(n(2), &Ctx::default(), &mut out).unwrap();
        node.step(vec![], &Ctx::default(), &mut out).unwrap();
        assert!(node.active_splay.is_none());
        assert_eq!(out.completed, vec![(n(1), 0)]);
        assert!(node.pending_rotation.is_none());
    }

    #[test]
    fn v_at_lca_requests_lock_from_parent() {
        // splay(1,3): v=2 is the LCA, so 2 asks 4 for the lock
        let t = Tree::balanced(7).unwrap();
        let mut s = states(&t);
        let e = BufferEntry::new(0, 0, 0, n(1), n(2), n(3));
        let mut out = Outbox::default();
        let v = s.get_mut(&n(2)).unwrap();
        v.handle(
            Message {
                from: n(1),
                to: n(2),
                payload: Payload::BetaRequest { entry: e },
            },
            &Ctx::default(),
            &mut out,
        )
        .unwrap();
        let m = &out.messages[0];
        assert_eq!(m.to, n(4));
        assert!(matches!(&m.payload, Payload::LockRequest { entry } if entry.lock_top == Some(n(4))));
    }

    #[test]
    fn v_below_lca_forwards() {
        let t = Tree::balanced(7).unwrap();
        let mut s = states(&t);
        let e = BufferEntry::new(0, 0, 0, n(1), n(2), n(7));
        let mut out = Outbox::default();
        let v = s.get_mut(&n(2)).unwrap();
        v.handle(
            Message {
                from: n(1),
                to: n(2),
                payload: Payload::BetaRequest { entry: e },
            },
            &Ctx::default(),
            &mut out,
        )
        .unwrap();
        assert!(matches!(&out.messages[0].payload, Payload::BetaRequest { entry } if entry.level3 == Some(n(4))));
        assert_eq!(v.phase(&BufferEntry::new(0, 0, 0, n(1), n(2), n(7)).key()), Some(EntryPhase::Waiting));
    }

    #[test]
    fn top_grants_only_head() {
        let t = Tree::balanced(7).unwrap();
        let mut s = states(&t);
        let root = s.get_mut(&n(4)).unwrap();
        // root tops a request of 2 (child, round 1) and one of 1 (round 0 grandchild)
        let mut a = BufferEntry::new(0, 1, 0, n(2), n(4), n(7));
        a.top_is_participant = true;
        let mut b = BufferEntry::new(0, 0, 0, n(1), n(2), n(7));
        b.level3 = Some(n(4));
        b.top_is_participant = true;
        root.buffer.insert(a.clone()).unwrap();
        root.phases.insert(a.key(), EntryPhase::TopReady);
        root.buffer.insert(b.clone()).unwrap();
        root.phases.insert(b.key(), EntryPhase::Waiting);
        let mut out = Outbox::default();
        root.try_grant(&mut out);
        assert!(!root.is_locked(), "head b is not grantable yet, a must wait");
        root.phases.insert(b.key(), EntryPhase::TopReady);
        root.try_grant(&mut out);
        assert_eq!(root.locked_by, Some(b.key()));
    }

    #[test]
    fn acked_entries_take_precedence() {
        let t = Tree::balanced(7).unwrap();
        let mut s = states(&t);
        let v = s.get_mut(&n(2)).unwrap();
        let mut own = BufferEntry::new(0, 0, 0, n(2), n(4), n(7));
        own.top_is_participant = true;
        let mut child = BufferEntry::new(0, 3, 0, n(1), n(2), n(3));
        child.lock_top = Some(n(4));
        v.buffer.insert(own.clone()).unwrap();
        v.phases.insert(own.key(), EntryPhase::Waiting);
        v.buffer.insert(child.clone()).unwrap();
        v.phases.insert(child.key(), EntryPhase::Acked);
        let mut out = Outbox::default();
        v.try_grant(&mut out);
        assert_eq!(v.locked_by, Some(child.key()));
        assert_eq!(out.messages[0].to, n(1));
    }

    #[test]
    fn link_change_noop_and_purge() {
        let t = Tree::balanced(7).unwrap();
        let mut s = states(&t);
        let x = s.get_mut(&n(1)).unwrap();
        let before = x.clone();
        let mut out = Outbox::default();
        x.handle_link_change(Relationship::Parent, n(2), &mut out);
        assert_eq!(*x, before);
        assert!(out.messages.is_empty());

        let e = BufferEntry::new(0, 0, 0, n(1), n(2), n(7));
        x.buffer.insert(e.clone()).unwrap();
        x.phases.insert(e.key(), EntryPhase::Waiting);
        x.pending_rotation = Some(e.clone());
        x.handle_link_change(Relationship::Parent, n(4), &mut out);
        assert!(x.buffer.is_empty());
        assert!(x.pending_rotation.is_none());
        assert!(x.tombstones.contains(&e.key()));
        assert!(out
            .messages
            .iter()
            .any(|m| m.to == n(4) && matches!(m.payload, Payload::BufferChange { .. })));
    }

    #[test]
    fn next_hop_routes_by_interval() {
        let t = Tree::balanced(7).unwrap();
        let s = states(&t);
        assert_eq!(s[&n(4)].next_hop(n(1)), Some(n(2)));
        assert_eq!(s[&n(2)].next_hop(n(7)), Some(n(4)));
        assert_eq!(s[&n(6)].next_hop(n(7)), Some(n(7)));
        assert_eq!(s[&n(6)].next_hop(n(6)), None);
    }
}
