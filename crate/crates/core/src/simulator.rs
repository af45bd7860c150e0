//! Synchronous time-slot engine.
//!
//! Messages sent in slot `τ` are delivered in `τ+1`. Every node with work
//! runs its handler once per slot, then the engine commits the rotations whose
//! requesters hold all locks (ascending requester id), notifies displaced
//! bystanders, and runs the detectors.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rustc_hash::FxHashMap as HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{RankTracker, RotationRecord};
use crate::buffer::{BufferEntry, EntryKey};
use crate::protocol::{
    Ctx, EntryPhase, Event, Message, NodeState, Outbox, Payload, ProtocolError, Relationship,
    SplayDescriptor,
};
use crate::rotation::{self, RotationKind};
use crate::topology::{NodeId, TopologyError, Tree};
use crate::workload::{self, Request, RequestSet, WorkloadError, WorkloadSpec};

/// Own rounds per loop-detection window.
pub const LOOP_WINDOW: usize = 4;

/// Slots without any commit, while requests are pending, before the
/// progress detector fires.
pub const PROGRESS_CAP: u64 = 9 * 15;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("request {src}->{dst} is invalid: {reason}")]
    BadRequest {
        src: NodeId,
        dst: NodeId,
        reason: &'static str,
    },
    #[error("max_timeslots must be positive")]
    ZeroTimeout,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detectors {
    pub deadlock: bool,
    pub loops: bool,
    pub buffers: bool,
    pub invariants: bool,
    /// Run the scans every `stride` slots; 0 picks 1 for n ≤ 512 and 8 above.
    pub stride: u64,
}

impl Detectors {
    pub fn all() -> Self {
        Detectors {
            deadlock: true,
            loops: true,
            buffers: true,
            invariants: true,
            stride: 0,
        }
    }

    pub fn none() -> Self {
        Detectors {
            deadlock: false,
            loops: false,
            buffers: false,
            invariants: false,
            stride: 0,
        }
    }
}

impl Default for Detectors {
    fn default() -> Self {
        Detectors::all()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LogLevel {
    #[default]
    None,
    Events,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub seed: u64,
    /// `None` uses [`default_max_timeslots`].
    pub max_timeslots: Option<u64>,
    pub workload: WorkloadSpec,
    pub detectors: Detectors,
    pub log_level: LogLevel,
    /// Barrier after each global round; every endpoint rotates at most once per round.
    pub lockstep: bool,
    pub super_rounds: u32,
}

impl SimConfig {
    pub fn new(n: usize, workload: WorkloadSpec, seed: u64) -> Self {
        SimConfig {
            n,
            seed,
            max_timeslots: None,
            workload,
            detectors: Detectors::all(),
            log_level: LogLevel::None,
            lockstep: false,
            super_rounds: 1,
        }
    }
}

fn ceil_log2(x: usize) -> u64 {
    (x.max(1) as f64).log2().ceil() as u64
}

/// `10⁴ + 200·m·⌈log₂ n⌉·⌈log₂(m+1)⌉`.
pub fn default_max_timeslots(n: usize, m: usize) -> u64 {
    10_000 + 200 * m as u64 * ceil_log2(n) * ceil_log2(m + 1)
}

/// Seed of the request batch for super-round `r`.
pub fn batch_seed(seed: u64, r: u32) -> u64 {
    seed.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub slot: u64,
    pub node: Option<NodeId>,
    pub event: String,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLog {
    pub records: Vec<LogRecord>,
}

impl EventLog {
    pub fn push(&mut self, slot: u64, node: Option<NodeId>, event: &str, detail: String) {
        debug_assert!(self.records.last().is_none_or(|r| r.slot <= slot));
        self.records.push(LogRecord {
            slot,
            node,
            event: event.to_string(),
            detail,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `slot,node,event,detail` lines; engine records use `-` as node.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let node = r.node.map_or_else(|| "-".to_string(), |n| n.to_string());
            let _ = writeln!(s, "{},{},{},{}", r.slot, node, r.event, r.detail);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Completed,
    Timeout,
    DetectorFired {
        detector: String,
        slot: u64,
        detail: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopViolation {
    pub slot: u64,
    pub endpoint: NodeId,
    pub peer: NodeId,
    pub window_start_round: usize,
    pub start_distance: usize,
    pub end_distance: usize,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: SimConfig,
    pub requests: RequestSet,
    pub splays: Vec<SplayDescriptor>,
    pub rotations: Vec<RotationRecord>,
    /// Slots from a round's first request to the release of its last lock.
    pub round_lengths: Vec<u64>,
    pub initial_rank_total: f64,
    pub final_tree: Tree,
    pub log: EventLog,
    pub termination: Termination,
    pub timeslots: u64,
    pub global_rounds: u64,
    pub max_buffer_len: usize,
    /// Windowed-progress violations; recorded without stopping the run.
    pub loop_violations: Vec<LoopViolation>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOptions {
    pub max_timeslots: u64,
    pub detectors: Detectors,
    pub log_level: LogLevel,
    pub lockstep: bool,
}

impl SimOptions {
    pub fn new(max_timeslots: u64) -> Self {
        SimOptions {
            max_timeslots,
            detectors: Detectors::all(),
            log_level: LogLevel::None,
            lockstep: false,
        }
    }
}

#[derive(Clone, Debug)]
struct OpenRound {
    requester: NodeId,
    start: u64,
    holders: Vec<NodeId>,
}

#[derive(Clone, Debug)]
struct LoopSample {
    round: usize,
    parent: Option<NodeId>,
    grandparent: Option<NodeId>,
    distance: usize,
}

pub struct Simulator {
    tree: Tree,
    nodes: Vec<NodeState>,
    idx: HashMap<NodeId, usize>,
    inflight: Vec<Message>,
    slot: u64,
    opts: SimOptions,
    batches: VecDeque<Vec<Request>>,
    batch_no: usize,
    queue: Vec<usize>,
    splays: Vec<SplayDescriptor>,
    by_key: HashMap<(NodeId, u64), usize>,
    claimed: BTreeMap<NodeId, usize>,
    live: BTreeSet<usize>,
    ranks: RankTracker,
    initial_rank_total: f64,
    rotations: Vec<RotationRecord>,
    open_rounds: BTreeMap<EntryKey, OpenRound>,
    round_lengths: Vec<u64>,
    global_round: u64,
    global_rounds: u64,
    log: EventLog,
    last_commit: u64,
    loop_samples: HashMap<NodeId, Vec<LoopSample>>,
    rotated_tops: Vec<NodeId>,
    loop_violations: Vec<LoopViolation>,
    termination: Option<Termination>,
    last_completion: u64,
    all_requests: Vec<Request>,
    max_buffer_len: usize,
}

impl Simulator {
    /// Engine over `tree` serving `batches` one after another; each batch's
    /// arrival slots are relative to its release.
    pub fn new(tree: Tree, batches: Vec<Vec<Request>>, opts: SimOptions) -> Result<Self, SimError> {
        if opts.max_timeslots == 0 {
            return Err(SimError::ZeroTimeout);
        }
        for r in batches.iter().flatten() {
            if r.src == r.dst {
                return Err(SimError::BadRequest {
                    src: r.src,
                    dst: r.dst,
                    reason: "source equals destination",
                });
            }
            if !tree.contains(r.src) || !tree.contains(r.dst) {
                return Err(SimError::BadRequest {
                    src: r.src,
                    dst: r.dst,
                    reason: "unknown node",
                });
            }
        }
        let mut ids: Vec<NodeId> = tree.ids().collect();
        ids.sort();
        let nodes: Vec<NodeState> = ids.iter().map(|&id| NodeState::new(tree.get(id).expect("node"))).collect();
        let idx = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let ranks = RankTracker::new(&tree);
        let initial_rank_total = ranks.total();
        let all_requests = batches.iter().flatten().copied().collect();
        Ok(Simulator {
            tree,
            nodes,
            idx,
            inflight: Vec::new(),
            slot: 0,
            opts,
            batches: batches.into(),
            batch_no: 0,
            queue: Vec::new(),
            splays: Vec::new(),
            by_key: HashMap::default(),
            claimed: BTreeMap::new(),
            live: BTreeSet::new(),
            ranks,
            initial_rank_total,
            rotations: Vec::new(),
            open_rounds: BTreeMap::new(),
            round_lengths: Vec::new(),
            global_round: 0,
            global_rounds: 0,
            log: EventLog::default(),
            last_commit: 0,
            loop_samples: HashMap::default(),
            rotated_tops: Vec::new(),
            loop_violations: Vec::new(),
            termination: None,
            last_completion: 0,
            all_requests,
            max_buffer_len: 0,
        })
    }

    pub fn from_config(cfg: &SimConfig) -> Result<Self, SimError> {
        let tree = Tree::balanced(cfg.n)?;
        let mut batches = Vec::new();
        for r in 0..cfg.super_rounds.max(1) {
            let rs = workload::generate(&cfg.workload, cfg.n, batch_seed(cfg.seed, r))?;
            batches.push(rs.requests);
        }
        let m: usize = batches.iter().map(Vec::len).sum();
        let opts = SimOptions {
            max_timeslots: cfg.max_timeslots.unwrap_or_else(|| default_max_timeslots(cfg.n, m)),
            detectors: cfg.detectors,
            log_level: cfg.log_level,
            lockstep: cfg.lockstep,
        };
        Simulator::new(tree, batches, opts)
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeState> {
        self.idx.get(&id).map(|&i| &self.nodes[i])
    }

    /// Test-only fault injection.
    #[doc(hidden)]
    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut NodeState> {
        self.idx.get(&id).map(|&i| &mut self.nodes[i])
    }

    pub fn splays(&self) -> &[SplayDescriptor] {
        &self.splays
    }

    pub fn rotations(&self) -> &[RotationRecord] {
        &self.rotations
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn termination(&self) -> Option<&Termination> {
        self.termination.as_ref()
    }

    pub fn inflight(&self) -> &[Message] {
        &self.inflight
    }

    fn state(&self, id: NodeId) -> &NodeState {
        &self.nodes[self.idx[&id]]
    }

    fn state_mut(&mut self, id: NodeId) -> &mut NodeState {
        let i = self.idx[&id];
        &mut self.nodes[i]
    }

    fn logging(&self) -> bool {
        self.opts.log_level == LogLevel::Events
    }

    fn outbox(&self) -> Outbox {
        if self.logging() {
            Outbox::default()
        } else {
            Outbox::quiet()
        }
    }

    fn engine_log(&mut self, event: &str, detail: std::fmt::Arguments<'_>) {
        if self.logging() {
            self.log.push(self.slot, None, event, detail.to_string());
        }
    }

    fn absorb_events(&mut self, events: Vec<Event>) {
        if self.logging() {
            for e in events {
                self.log.push(self.slot, Some(e.node), e.kind.as_str(), e.detail);
            }
        }
    }

    fn ctx(&self) -> Ctx {
        Ctx {
            now: self.slot,
            lockstep_round: self.opts.lockstep.then_some(self.global_round),
        }
    }

    pub fn is_done(&self) -> bool {
        self.batches.is_empty() && self.queue.is_empty() && self.live.is_empty() && self.claimed.is_empty()
    }

    fn quiescent(&self) -> bool {
        self.inflight.is_empty()
            && self
                .nodes
                .iter()
                .all(|n| n.pending_rotation.is_none() && n.locked_by.is_none())
    }

    fn release_batch(&mut self) {
        if !(self.queue.is_empty() && self.live.is_empty() && self.claimed.is_empty()) {
            return;
        }
        let Some(batch) = self.batches.pop_front() else {
            return;
        };
        let b = self.batch_no;
        self.batch_no += 1;
        for r in batch {
            self.queue.push(self.splays.len());
            self.splays.push(SplayDescriptor::new(r.src, r.dst, b, self.slot + r.arrival));
        }
        self.engine_log("batch", format_args!("index={b} size={}", self.queue.len()));
    }

    fn admit(&mut self, out: &mut Outbox) {
        let ctx = self.ctx();
        let mut keep = Vec::new();
        let queue = std::mem::take(&mut self.queue);
        for j in queue {
            let (src, dst, arrival) = {
                let s = &self.splays[j];
                (s.src, s.dst, s.arrival)
            };
            let free = |id: NodeId| !self.claimed.contains_key(&id) && self.state(id).active_splay.is_none();
            if arrival > self.slot || !free(src) || !free(dst) {
                keep.push(j);
                continue;
            }
            let d = self.tree.distance(src, dst).expect("known nodes");
            let sr = self.state(src).super_round;
            let s = &mut self.splays[j];
            s.issued_at = Some(self.slot);
            s.initial_distance = d;
            s.max_distance = d;
            s.super_round = sr;
            if d == 1 {
                s.completed_at = Some(self.slot);
                self.last_completion = self.slot;
                self.state_mut(src).super_round += 1;
                self.engine_log("complete", format_args!("splay={j} src={src} dst={dst} adjacent"));
                continue;
            }
            self.by_key.insert((src, sr), j);
            self.claimed.insert(src, j);
            self.claimed.insert(dst, j);
            self.live.insert(j);
            let sample = |t: &Tree, x: NodeId| LoopSample {
                round: 0,
                parent: t.parent(x),
                grandparent: t.parent(x).and_then(|p| t.parent(p)),
                distance: d,
            };
            if self.opts.detectors.loops {
                self.loop_samples.insert(src, vec![sample(&self.tree, src)]);
                self.loop_samples.insert(dst, vec![sample(&self.tree, dst)]);
            }
            self.engine_log("admit", format_args!("splay={j} src={src} dst={dst} distance={d}"));
            self.state_mut(src)
                .start_splay(dst, &ctx, out)
                .expect("admission checked the endpoint is idle");
        }
        self.queue = keep;
    }

    fn fire(&mut self, detector: &str, detail: String) {
        if self.termination.is_none() {
            self.engine_log("detector", format_args!("{detector} {detail}"));
            self.termination = Some(Termination::DetectorFired {
                detector: detector.to_string(),
                slot: self.slot,
                detail,
            });
        }
    }

    /// Advance one time-slot.
    pub fn step(&mut self) {
        if self.termination.is_some() {
            return;
        }
        self.release_batch();
        let mut out = self.outbox();
        self.admit(&mut out);
        let ctx = self.ctx();

        let mut inboxes: Vec<Vec<Message>> = vec![Vec::new(); self.nodes.len()];
        for m in std::mem::take(&mut self.inflight) {
            let i = self.idx[&m.to];
            inboxes[i].push(m);
        }
        let mut failure: Option<(NodeId, ProtocolError)> = None;
        for (i, inbox) in inboxes.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            let busy = !inbox.is_empty()
                || node.active_splay.is_some()
                || !node.buffer.is_empty()
                || node.pending_rotation.is_some();
            if !busy {
                continue;
            }
            if let Err(e) = node.step(inbox, &ctx, &mut out) {
                failure.get_or_insert((node.id, e));
            }
            self.max_buffer_len = self.max_buffer_len.max(node.max_buffer);
        }
        let Outbox {
            mut messages,
            mut commits,
            completed,
            events,
            ..
        } = out;
        self.absorb_events(events);
        if let Some((id, e)) = failure {
            let kind = match e {
                ProtocolError::Buffer(_) => "buffer_overflow",
                _ => "protocol",
            };
            self.fire(kind, format!("node {id}: {e}"));
            return;
        }

        commits.sort_by_key(|e| e.level1);
        let committed = !commits.is_empty();
        for e in commits {
            let mut post = self.outbox();
            if let Err(detail) = self.commit(e, &mut post) {
                self.fire("safety", detail);
                return;
            }
            messages.extend(post.messages);
            self.absorb_events(post.events);
        }

        for (src, sr) in completed {
            self.mark_complete(src, sr);
        }
        if committed {
            self.last_commit = self.slot;
            self.track_distances();
        }
        self.inflight = messages;
        self.close_rounds();
        self.release_claims();

        if self.opts.lockstep && self.quiescent() && !self.live.is_empty() {
            self.global_round += 1;
            self.global_rounds += 1;
            self.engine_log("round", format_args!("global={}", { self.global_round }));
        }
        self.run_detectors(committed);
        self.slot += 1;
    }

    fn commit(&mut self, e: BufferEntry, out: &mut Outbox) -> Result<(), String> {
        let key = e.key();
        let (u, v) = (e.level1, e.level2);
        let kind = match e.level3 {
            None => RotationKind::Zig,
            Some(w) if (u < v) == (v < w) => RotationKind::ZigZig,
            Some(_) => RotationKind::ZigZag,
        };
        if self.tree.parent(u) != Some(v) {
            return Err(format!("{key}: {v} is not the parent of {u}"));
        }
        if let Some(w) = e.level3 {
            if self.tree.parent(v) != Some(w) {
                return Err(format!("{key}: {w} is not the parent of {v}"));
            }
        }
        let top = e.level3.unwrap_or(v);
        if self.tree.parent(top) != e.lock_top || (e.lock_top.is_none() && !e.top_is_participant) {
            return Err(format!("{key}: chain top {top} does not match the tree"));
        }
        let holders: Vec<NodeId> = [Some(v), e.level3, e.lock_top].into_iter().flatten().collect();
        for &h in holders.iter().chain([&u]) {
            if self.state(h).locked_by != Some(key) {
                return Err(format!("{key}: node {h} does not hold the lock"));
            }
        }
        let start = self.state(u).round_started_at.unwrap_or(self.slot);
        let effect = rotation::apply(&mut self.tree, u, kind).map_err(|err| format!("{key}: {err}"))?;
        let delta = self.ranks.apply(&self.tree, &effect);
        self.rotated_tops.push(u);
        let splay = self.claimed.get(&u).copied();
        if let Some(j) = splay {
            let s = &mut self.splays[j];
            if s.src == u {
                s.rotations_src += 1;
            } else {
                s.rotations_dst += 1;
            }
            s.dollars += kind.cost();
        }
        self.rotations.push(RotationRecord {
            slot: self.slot,
            requester: u,
            kind,
            cost: kind.cost(),
            delta,
            splay,
        });
        self.engine_log(
            "commit",
            format_args!("{key} kind={} v={v} w={}", kind.as_str(), e.level3.map_or("-".into(), |w| w.to_string())),
        );

        let round = self.opts.lockstep.then_some(self.global_round);
        for &p in &effect.participants {
            let fresh = self.tree.get(p).expect("participant").clone();
            self.state_mut(p).links = fresh;
        }
        self.state_mut(u).complete_own_rotation(key, round);
        for &p in &effect.participants {
            self.state_mut(p).revalidate(out);
        }

        for d in &effect.displaced {
            if effect.participants.contains(&d.node) {
                continue;
            }
            let changes = [
                (Relationship::Parent, d.before.parent, d.after.parent),
                (Relationship::Left, d.before.left, d.after.left),
                (Relationship::Right, d.before.right, d.after.right),
            ];
            for (rel, before, after) in changes {
                if let (true, Some(x)) = (before != after, after) {
                    out.send(
                        x,
                        d.node,
                        Payload::LinkChange {
                            relationship: rel,
                            neighbor: x,
                        },
                    );
                }
            }
        }

        let ack = |out: &mut Outbox, to: NodeId| out.send(u, to, Payload::BetaAck { entry: e.clone() });
        ack(out, v);
        if kind == RotationKind::ZigZag {
            ack(out, e.level3.expect("double rotation"));
        }
        if let Some(z) = e.lock_top {
            out.send(
                u,
                z,
                Payload::BufferChange {
                    entries: Vec::new(),
                    completed: Some(key),
                },
            );
        }
        self.open_rounds.insert(
            key,
            OpenRound {
                requester: u,
                start,
                holders,
            },
        );

        if let Some(samples) = self.loop_samples.get_mut(&u) {
            if let Some(j) = splay {
                let s = &self.splays[j];
                let peer = if s.src == u { s.dst } else { s.src };
                let t = &self.tree;
                let round = samples.last().map_or(0, |x| x.round + 1);
                samples.push(LoopSample {
                    round,
                    parent: t.parent(u),
                    grandparent: t.parent(u).and_then(|p| t.parent(p)),
                    distance: t.distance(u, peer).expect("known nodes"),
                });
                if samples.len() > LOOP_WINDOW {
                    let k = samples.len() - 1 - LOOP_WINDOW;
                    let a = &samples[k];
                    let b = &samples[samples.len() - 1];
                    let stuck = samples[k + 1..].iter().all(|x| {
                        (x.parent == a.parent || x.grandparent == a.grandparent) && x.distance >= a.distance
                    });
                    if stuck {
                        let v = LoopViolation {
                            slot: self.slot,
                            endpoint: u,
                            peer,
                            window_start_round: a.round,
                            start_distance: a.distance,
                            end_distance: b.distance,
                        };
                        samples.drain(..samples.len() - 1);
                        self.engine_log(
                            "detector",
                            format_args!(
                                "loop endpoint {} toward {} stuck at distance {} -> {} from round {}",
                                v.endpoint, v.peer, v.start_distance, v.end_distance, v.window_start_round
                            ),
                        );
                        self.loop_violations.push(v);
                    }
                }
            }
        }
        Ok(())
    }

    fn mark_complete(&mut self, src: NodeId, sr: u64) {
        let Some(&j) = self.by_key.get(&(src, sr)) else {
            return;
        };
        if self.splays[j].completed_at.is_some() {
            return;
        }
        let (s, d) = (self.splays[j].src, self.splays[j].dst);
        let dist = self.tree.distance(s, d).expect("known nodes");
        self.splays[j].completed_at = Some(self.slot);
        self.last_completion = self.slot;
        self.live.remove(&j);
        self.loop_samples.remove(&s);
        self.loop_samples.remove(&d);
        self.engine_log("complete", format_args!("splay={j} src={s} dst={d}"));
        if dist != 1 {
            self.fire("objective", format!("splay {j} marked complete at distance {dist}"));
        }
    }

    /// Distances only change for splays with an endpoint below a rotated chain.
    fn track_distances(&mut self) {
        let tops: Vec<(NodeId, NodeId)> = std::mem::take(&mut self.rotated_tops)
            .into_iter()
            .map(|t| {
                let l = self.tree.get(t).expect("rotated node");
                (l.interval_lo, l.interval_hi)
            })
            .collect();
        for &j in &self.live {
            let s = &self.splays[j];
            let below = |x: NodeId| tops.iter().any(|&(lo, hi)| lo <= x && x <= hi);
            if !below(s.src) && !below(s.dst) {
                continue;
            }
            let d = self.tree.distance(s.src, s.dst).expect("known nodes");
            let s = &mut self.splays[j];
            s.max_distance = s.max_distance.max(d);
        }
    }

    fn close_rounds(&mut self) {
        let slot = self.slot;
        let mut done = Vec::new();
        for (key, r) in self.open_rounds.iter_mut() {
            let nodes = &self.nodes;
            let idx = &self.idx;
            r.holders.retain(|h| nodes[idx[h]].locked_by == Some(*key));
            if r.holders.is_empty() {
                done.push(*key);
            }
        }
        for key in done {
            let r = self.open_rounds.remove(&key).expect("open round");
            self.round_lengths.push(slot - r.start + 1);
            if self.logging() {
                self.log.push(
                    slot,
                    Some(r.requester),
                    "round_closed",
                    format!("{key} length={}", slot - r.start + 1),
                );
            }
        }
    }

    fn release_claims(&mut self) {
        let in_flight: BTreeSet<(NodeId, u64)> = self
            .inflight
            .iter()
            .filter_map(|m| match m.payload {
                Payload::SplayRequest { src, super_round, .. } => Some((src, super_round)),
                _ => None,
            })
            .collect();
        let mut freed = Vec::new();
        for (&id, &j) in &self.claimed {
            let s = &self.splays[j];
            if !s.is_complete() || in_flight.contains(&(s.src, s.super_round)) {
                continue;
            }
            let busy = self.state(id).active_splay.as_ref().is_some_and(|a| a.src == s.src && a.super_round == s.super_round);
            if !busy {
                freed.push(id);
            }
        }
        for id in freed {
            self.claimed.remove(&id);
        }
    }

    fn stride(&self) -> u64 {
        match self.opts.detectors.stride {
            0 if self.nodes.len() > 512 => 8,
            0 => 1,
            s => s,
        }
    }

    fn run_detectors(&mut self, committed: bool) {
        let det = self.opts.detectors;
        if det.invariants && committed {
            if let Err(v) = self.tree.check_invariants() {
                self.fire("invariants", v.to_string());
                return;
            }
        }
        if det.deadlock {
            let pending = self.nodes.iter().any(|n| n.pending_rotation.is_some());
            if pending && self.slot.saturating_sub(self.last_commit) > PROGRESS_CAP {
                self.fire("deadlock", format!("no commit for {PROGRESS_CAP} slots"));
                return;
            }
        }
        if self.slot % self.stride() != 0 {
            return;
        }
        if det.deadlock {
            if let Some(cycle) = detect_deadlock(self) {
                let ids: Vec<String> = cycle.iter().map(|c| c.to_string()).collect();
                self.fire("deadlock", format!("wait-for cycle {}", ids.join(">")));
                return;
            }
        }
        if det.buffers {
            if let Some(p) = detect_buffer_inconsistency(self) {
                self.fire(
                    "buffer_inconsistency",
                    format!("{} and {} disagree on {} vs {}", p.first_node, p.second_node, p.a, p.b),
                );
            }
        }
    }

    pub fn loop_violations(&self) -> &[LoopViolation] {
        &self.loop_violations
    }

    /// Step until completion, timeout or a detector fires.
    pub fn run_to_end(&mut self) -> Termination {
        while self.termination.is_none() {
            if self.is_done() {
                self.termination = Some(Termination::Completed);
                break;
            }
            if self.slot >= self.opts.max_timeslots {
                self.termination = Some(Termination::Timeout);
                self.engine_log("timeout", format_args!("slot={}", { self.slot }));
                break;
            }
            self.step();
        }
        if self.termination == Some(Termination::Completed) {
            self.drain();
        }
        self.termination.clone().expect("set above")
    }

    /// Let releases and cancels in flight settle after the last completion.
    fn drain(&mut self) {
        let cap = self.slot + 64;
        while !self.quiescent() && self.slot < cap {
            let before = self.termination.clone();
            self.termination = None;
            self.step();
            if self.termination.is_none() {
                self.termination = before;
            }
        }
    }

    pub fn into_result(mut self, config: SimConfig) -> RunResult {
        let termination = self.termination.clone().unwrap_or(Termination::Timeout);
        let timeslots = match termination {
            Termination::Completed if !self.splays.is_empty() => self.last_completion + 1,
            Termination::Completed => 0,
            _ => self.slot,
        };
        self.max_buffer_len = self.nodes.iter().map(|n| n.max_buffer).max().unwrap_or(0).max(self.max_buffer_len);
        RunResult {
            config,
            requests: RequestSet::from_requests(self.all_requests),
            splays: self.splays,
            rotations: self.rotations,
            round_lengths: self.round_lengths,
            initial_rank_total: self.initial_rank_total,
            final_tree: self.tree,
            log: self.log,
            termination,
            timeslots,
            global_rounds: self.global_rounds,
            max_buffer_len: self.max_buffer_len,
            loop_violations: self.loop_violations,
        }
    }
}

/// Run a configuration to the end.
pub fn run(config: &SimConfig) -> Result<RunResult, SimError> {
    let mut sim = Simulator::from_config(config)?;
    sim.run_to_end();
    Ok(sim.into_result(config.clone()))
}

/// Best-known copy of a pending entry: upper nodes know more of the chain.
fn chain_of(sim: &Simulator, p: &BufferEntry) -> BufferEntry {
    let key = p.key();
    let mut e = p.clone();
    for id in [Some(p.level2), e.level3] {
        if let Some(c) = id.and_then(|id| sim.node(id)).and_then(|n| n.buffer.get(&key)) {
            e.merge_from(c);
        }
    }
    if let Some(c) = e.level3.and_then(|w| sim.node(w)).and_then(|n| n.buffer.get(&key)) {
        e.merge_from(c);
    }
    e
}

/// Transient facts the scanners read off the wire.
struct Wire {
    live: BTreeSet<EntryKey>,
    acks: BTreeSet<(NodeId, EntryKey)>,
    withdrawn: BTreeSet<EntryKey>,
}

impl Wire {
    fn of(sim: &Simulator) -> Self {
        let live = sim
            .nodes()
            .iter()
            .filter_map(|n| n.pending_rotation.as_ref().map(|p| p.key()))
            .collect();
        let mut acks = BTreeSet::new();
        let mut withdrawn = BTreeSet::new();
        for m in sim.inflight() {
            match &m.payload {
                Payload::LockAck { entry } => {
                    acks.insert((m.to, entry.key()));
                }
                Payload::Cancel { entry } | Payload::Shield { entry } => {
                    withdrawn.insert(entry.key());
                }
                _ => {}
            }
        }
        Wire { live, acks, withdrawn }
    }

    fn relevant(&self, k: &EntryKey) -> bool {
        self.live.contains(k) && !self.withdrawn.contains(k)
    }
}

/// Requester whose entry `node` serves before `key`, if any.
fn blocker(node: &NodeState, key: EntryKey, wire: &Wire) -> Option<NodeId> {
    if let Some(k) = node.locked_by {
        return (k != key).then_some(k.level1);
    }
    let entries: Vec<&BufferEntry> = node.buffer.entries().iter().filter(|e| wire.relevant(&e.key())).collect();
    let acked = |e: &&&BufferEntry| {
        node.phase(&e.key()) == Some(EntryPhase::Acked) || wire.acks.contains(&(node.id, e.key()))
    };
    let first = entries.iter().find(acked).or_else(|| entries.first())?;
    (first.key() != key).then_some(first.level1)
}

/// Wait-for graph over requesters with a live pending rotation: `a` waits
/// for `b` when the next node `a` needs is locked by, or serves first, `b`'s
/// entry.
pub fn wait_for_graph(sim: &Simulator) -> BTreeMap<NodeId, NodeId> {
    let wire = Wire::of(sim);
    let mut edges = BTreeMap::new();
    for n in sim.nodes() {
        let Some(p) = &n.pending_rotation else {
            continue;
        };
        let e = chain_of(sim, p);
        let key = e.key();
        if !wire.relevant(&key) {
            continue;
        }
        let chain: Vec<NodeId> = e.chain().collect();
        let next = chain
            .iter()
            .rev()
            .map(|&id| sim.node(id).expect("chain node"))
            .find(|s| s.phase(&key) != Some(EntryPhase::Granted));
        let Some(next) = next else {
            continue;
        };
        if !next.buffer.contains(&key) {
            continue;
        }
        if let Some(b) = blocker(next, key, &wire) {
            if b != n.id {
                edges.insert(n.id, b);
            }
        }
    }
    edges
}

/// A cycle in the wait-for graph, if any.
pub fn detect_deadlock(sim: &Simulator) -> Option<Vec<NodeId>> {
    find_cycle(&wait_for_graph(sim))
}

pub fn find_cycle(edges: &BTreeMap<NodeId, NodeId>) -> Option<Vec<NodeId>> {
    let mut done: BTreeSet<NodeId> = BTreeSet::new();
    for &start in edges.keys() {
        if done.contains(&start) {
            continue;
        }
        let mut path: Vec<NodeId> = Vec::new();
        let mut on_path: BTreeSet<NodeId> = BTreeSet::new();
        let mut cur = Some(start);
        while let Some(c) = cur {
            if done.contains(&c) {
                break;
            }
            if on_path.contains(&c) {
                let pos = path.iter().position(|&x| x == c).expect("on path");
                return Some(path[pos..].to_vec());
            }
            on_path.insert(c);
            path.push(c);
            cur = edges.get(&c).copied();
        }
        done.extend(path);
    }
    None
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InconsistentPair {
    pub a: EntryKey,
    pub b: EntryKey,
    pub first_node: NodeId,
    pub second_node: NodeId,
}

/// Two live entries stored in opposite relative order by two buffers.
pub fn detect_buffer_inconsistency(sim: &Simulator) -> Option<InconsistentPair> {
    let live: BTreeSet<EntryKey> = sim
        .nodes()
        .iter()
        .filter_map(|n| n.pending_rotation.as_ref().map(|p| p.key()))
        .collect();
    let mut seen: HashMap<(EntryKey, EntryKey), (bool, NodeId)> = HashMap::default();
    for n in sim.nodes() {
        let keys: Vec<EntryKey> = n
            .buffer
            .entries()
            .iter()
            .map(|e| e.key())
            .filter(|k| live.contains(k))
            .collect();
        for i in 0..keys.len() {
            for j in i + 1..keys.len() {
                let (a, b) = (keys[i], keys[j]);
                let (pair, forward) = if a < b { ((a, b), true) } else { ((b, a), false) };
                match seen.get(&pair) {
                    Some(&(f, other)) if f != forward => {
                        return Some(InconsistentPair {
                            a: pair.0,
                            b: pair.1,
                            first_node: other,
                            second_node: n.id,
                        })
                    }
                    Some(_) => {}
                    None => {
                        seen.insert(pair, (forward, n.id));
                    }
                }
            }
        }
    }
    None
}
