//! Potential-function instrumentation and cost accounting.

use std::collections::{BTreeMap, BTreeSet};

use rustc_hash::FxHashMap as HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::SplayDescriptor;
use crate::rotation::{RotationEffect, RotationKind};
use crate::simulator::{RunResult, Termination};
use crate::topology::{NodeId, Tree};
use crate::workload::empirical_entropy;

/// Slack added on the favourable side of every real-valued bound.
pub const EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("node {0} missing from snapshot")]
    UnknownNode(NodeId),
    #[error("rank of node {0} changed although it did not take part in the rotation")]
    OutsideParticipants(NodeId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSnapshot {
    pub sizes: BTreeMap<NodeId, usize>,
    pub ranks: BTreeMap<NodeId, f64>,
    pub total: f64,
}

pub fn rank(size: usize) -> f64 {
    (size as f64).log2()
}

pub fn snapshot_ranks(t: &Tree) -> RankSnapshot {
    let sizes: BTreeMap<NodeId, usize> = t.subtree_sizes().into_iter().collect();
    let ranks: BTreeMap<NodeId, f64> = sizes.iter().map(|(&k, &s)| (k, rank(s))).collect();
    let total = ranks.values().sum();
    RankSnapshot { sizes, ranks, total }
}

/// Right-hand side of the per-rotation potential bound.
pub fn rotation_bound(kind: RotationKind, r_before: f64, r_after: f64) -> f64 {
    let lift = 3.0 * (r_after - r_before);
    if kind.is_double() {
        lift - 2.0
    } else {
        lift
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationDelta {
    pub delta: f64,
    pub r_before: f64,
    pub r_after: f64,
    pub bound: f64,
    pub holds: bool,
}

impl RotationDelta {
    fn new(kind: RotationKind, delta: f64, r_before: f64, r_after: f64) -> Self {
        let bound = rotation_bound(kind, r_before, r_after);
        RotationDelta {
            delta,
            r_before,
            r_after,
            bound,
            holds: delta <= bound + EPS,
        }
    }
}

/// Rank variation between two snapshots bracketing one rotation of `u`.
pub fn rotation_delta(
    before: &RankSnapshot,
    after: &RankSnapshot,
    u: NodeId,
    kind: RotationKind,
    participants: &BTreeSet<NodeId>,
) -> Result<RotationDelta, AnalysisError> {
    for (id, s) in &before.sizes {
        let s2 = after.sizes.get(id).ok_or(AnalysisError::UnknownNode(*id))?;
        if s != s2 && !participants.contains(id) {
            return Err(AnalysisError::OutsideParticipants(*id));
        }
    }
    let r = *before.ranks.get(&u).ok_or(AnalysisError::UnknownNode(u))?;
    let r2 = *after.ranks.get(&u).ok_or(AnalysisError::UnknownNode(u))?;
    Ok(RotationDelta::new(kind, after.total - before.total, r, r2))
}

/// Subtree sizes maintained incrementally across rotations; only the
/// participants' sizes change.
#[derive(Clone, Debug)]
pub struct RankTracker {
    sizes: HashMap<NodeId, usize>,
    total: f64,
}

impl RankTracker {
    pub fn new(t: &Tree) -> Self {
        let sizes = t.subtree_sizes();
        let total = sizes.values().map(|&s| rank(s)).sum();
        RankTracker { sizes, total }
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn size(&self, id: NodeId) -> Option<usize> {
        self.sizes.get(&id).copied()
    }

    /// Update after `effect` has been applied to `t`.
    pub fn apply(&mut self, t: &Tree, effect: &RotationEffect) -> RotationDelta {
        let u = effect.moved_up;
        let r_before = rank(self.sizes[&u]);
        let mut pending: Vec<NodeId> = effect.participants.iter().copied().collect();
        let mut delta = 0.0;
        while !pending.is_empty() {
            let pos = pending
                .iter()
                .position(|&p| {
                    let node = t.get(p).expect("participant");
                    [node.left, node.right]
                        .iter()
                        .flatten()
                        .all(|c| !pending.contains(c))
                })
                .expect("participants form a tree");
            let p = pending.remove(pos);
            let node = t.get(p).expect("participant");
            let s = 1
                + node.left.map_or(0, |c| self.sizes[&c])
                + node.right.map_or(0, |c| self.sizes[&c]);
            let old = self.sizes.insert(p, s).expect("known node");
            delta += rank(s) - rank(old);
        }
        self.total += delta;
        RotationDelta::new(effect.kind, delta, r_before, rank(self.sizes[&u]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationRecord {
    pub slot: u64,
    pub requester: NodeId,
    pub kind: RotationKind,
    pub cost: u64,
    pub delta: RotationDelta,
    pub splay: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplayCost {
    /// Cyber-dollars spent by both endpoints.
    pub p_j: u64,
    pub rotations: u64,
    pub max_distance: usize,
    /// Half the largest observed distance plus two.
    pub bound: f64,
    /// Whether the rotation count stays within `bound`.
    pub within_bound: bool,
}

pub fn splay_cost(desc: &SplayDescriptor) -> SplayCost {
    let bound = desc.max_distance as f64 / 2.0 + 2.0;
    SplayCost {
        p_j: desc.dollars,
        rotations: desc.rotations(),
        max_distance: desc.max_distance,
        bound,
        within_bound: desc.rotations() as f64 <= bound + EPS,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundLengthStats {
    pub count: usize,
    pub mean: f64,
    pub p50: u64,
    pub p95: u64,
    pub max: u64,
    pub histogram: BTreeMap<u64, usize>,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

pub fn round_length_stats(lengths: &[u64]) -> RoundLengthStats {
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let mut histogram = BTreeMap::new();
    for &l in &sorted {
        *histogram.entry(l).or_insert(0) += 1;
    }
    RoundLengthStats {
        count: sorted.len(),
        mean: if sorted.is_empty() {
            0.0
        } else {
            sorted.iter().sum::<u64>() as f64 / sorted.len() as f64
        },
        p50: percentile(&sorted, 0.5),
        p95: percentile(&sorted, 0.95),
        max: sorted.last().copied().unwrap_or(0),
        histogram,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialReport {
    pub initial_total: f64,
    pub final_total: f64,
    /// Final minus initial total rank.
    pub delta: f64,
    /// Sum of per-rotation variations.
    pub sum_delta: f64,
    pub bound_violations: usize,
    pub total_variation_ok: bool,
    pub amortized_identity_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n: usize,
    pub m: usize,
    pub workload: String,
    pub seed: u64,
    pub super_rounds: u32,
    pub lockstep: bool,
    pub termination: String,
    pub partial: bool,
    pub completed_splays: usize,
    pub rotations: u64,
    pub dollars: u64,
    pub rounds: u64,
    pub global_rounds: u64,
    pub timeslots: u64,
    pub rotations_per_m: f64,
    pub rounds_per_m: f64,
    pub timeslots_per_m: f64,
    /// Largest per-splay cost `D = max p_j`.
    pub max_splay_cost: u64,
    pub max_splay_distance: usize,
    pub h_src: f64,
    pub h_dst: f64,
    pub ratio_log_n: f64,
    pub ratio_entropy: f64,
    pub ratio_slots: f64,
    pub round_length: RoundLengthStats,
    pub potential: PotentialReport,
    pub cost_bound_flags: usize,
    pub max_buffer_len: usize,
    pub mean_queueing_delay: f64,
    pub detector: Option<String>,
    /// Windowed-progress violations recorded during the run.
    pub loop_violations: usize,
}

pub fn summarize(run: &RunResult) -> Report {
    let n = run.final_tree.len();
    let m = run.splays.len();
    let mf = m.max(1) as f64;
    let log_n = (n as f64).log2().max(1.0);
    let rotations = run.rotations.len() as u64;
    let dollars: u64 = run.rotations.iter().map(|r| r.cost).sum();
    let rounds: u64 = run.splays.iter().map(|s| s.rotations()).sum();
    let (h_src, h_dst) = empirical_entropy(&run.requests);

    let costs: Vec<SplayCost> = run.splays.iter().filter(|s| s.is_complete()).map(splay_cost).collect();
    let sum_delta: f64 = run.rotations.iter().map(|r| r.delta.delta).sum();
    let final_total = snapshot_ranks(&run.final_tree).total;
    let delta = final_total - run.initial_rank_total;
    let tol = 1e-6 * (rotations.max(1) as f64);
    let sum_p: u64 = run.splays.iter().map(|s| s.dollars).sum();
    let ledger: f64 = run.rotations.iter().map(|r| r.cost as f64 + r.delta.delta).sum();

    let queued: Vec<u64> = run
        .splays
        .iter()
        .filter_map(|s| s.issued_at.map(|i| i.saturating_sub(s.arrival)))
        .collect();

    let (termination, detector) = match &run.termination {
        Termination::Completed => ("completed".to_string(), None),
        Termination::Timeout => ("timeout".to_string(), None),
        Termination::DetectorFired { detector, slot, detail } => (
            "detector_fired".to_string(),
            Some(format!("{detector} at slot {slot}: {detail}")),
        ),
    };

    Report {
        n,
        m,
        workload: run.config.workload.kind.to_string(),
        seed: run.config.seed,
        super_rounds: run.config.super_rounds,
        lockstep: run.config.lockstep,
        partial: !matches!(run.termination, Termination::Completed),
        termination,
        completed_splays: run.splays.iter().filter(|s| s.is_complete()).count(),
        rotations,
        dollars,
        rounds,
        global_rounds: run.global_rounds,
        timeslots: run.timeslots,
        rotations_per_m: rotations as f64 / mf,
        rounds_per_m: rounds as f64 / mf,
        timeslots_per_m: run.timeslots as f64 / mf,
        max_splay_cost: costs.iter().map(|c| c.p_j).max().unwrap_or(0),
        max_splay_distance: run.splays.iter().map(|s| s.max_distance).max().unwrap_or(0),
        h_src,
        h_dst,
        ratio_log_n: rotations as f64 / (mf * log_n),
        ratio_entropy: rotations as f64 / (mf * (h_src + h_dst) + 1.0),
        ratio_slots: run.timeslots as f64 / (mf * log_n * (mf + 1.0).log2()),
        round_length: round_length_stats(&run.round_lengths),
        potential: PotentialReport {
            initial_total: run.initial_rank_total,
            final_total,
            delta,
            sum_delta,
            bound_violations: run.rotations.iter().filter(|r| !r.delta.holds).count(),
            total_variation_ok: (delta - sum_delta).abs() <= tol,
            amortized_identity_ok: (ledger - (sum_p as f64 + delta)).abs() <= tol,
        },
        cost_bound_flags: costs.iter().filter(|c| !c.within_bound).count(),
        max_buffer_len: run.max_buffer_len,
        mean_queueing_delay: if queued.is_empty() {
            0.0
        } else {
            queued.iter().sum::<u64>() as f64 / queued.len() as f64
        },
        detector,
        loop_violations: run.loop_violations.len(),
    }
}
