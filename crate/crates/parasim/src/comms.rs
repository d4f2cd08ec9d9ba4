//! Communicator pool and two-plane messaging.
//!
//! The data plane is a set of eagerly constructed, topology-contiguous rank
//! groups; collectives on a group complete only when every member has posted
//! the same (op, seq), and any divergence surfaces as a `MismatchFault`
//! instead of a silent hang. The control plane carries mode-switch signals
//! and the per-iteration workload synchronization that produces a globally
//! agreed waiting queue.

use crate::deploy::{EngineMode, EngineState};
use crate::request::{Priority, RequestId};
use crate::time::{SimDuration, SimTime};
use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

/// Host memory held by one pre-initialized process group.
pub const HOST_MEM_BYTES_PER_GROUP: u64 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CollectiveOp {
    AllReduce,
    Broadcast,
    Sync,
}

impl fmt::Display for CollectiveOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CollectiveOp::AllReduce => write!(f, "all_reduce"),
            CollectiveOp::Broadcast => write!(f, "broadcast"),
            CollectiveOp::Sync => write!(f, "sync"),
        }
    }
}

/// Collective payload: toy element vectors are reduced by element-wise sum,
/// byte counts are carried for the cost model only.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Elems(Vec<f64>),
    Bytes(u64),
}

#[derive(Debug, Error, PartialEq)]
pub enum CommsError {
    #[error("TP degree {degree} does not divide engine count {engines}")]
    IndivisibleTpDegree { degree: usize, engines: usize },
    #[error("unknown group {0:?}: only enumerated contiguous groups exist")]
    UnknownGroup(Vec<usize>),
    #[error("rank {rank} is not a member of group {group:?}")]
    NotAMember { rank: usize, group: Vec<usize> },
    #[error(
        "collective mismatch in group {group:?}: expected ({expected_op}, seq={expected_seq}), \
         rank {rank} posted ({observed_op}, seq={observed_seq})"
    )]
    MismatchFault {
        group: Vec<usize>,
        expected_op: CollectiveOp,
        expected_seq: u64,
        observed_op: CollectiveOp,
        observed_seq: u64,
        rank: usize,
    },
    #[error("payload shapes diverge within one collective")]
    PayloadShapeMismatch,
    #[error("engine {engine} synced with stale epoch {engine_epoch} (current {sync_epoch})")]
    EpochSkew {
        engine: usize,
        engine_epoch: u64,
        sync_epoch: u64,
    },
}

#[derive(Debug, Clone)]
struct PostedOp {
    op: CollectiveOp,
    payload: Payload,
}

/// Outcome of posting one member's side of a collective.
#[derive(Debug, Clone, PartialEq)]
pub enum PostOutcome {
    /// Other members have not posted yet.
    Waiting,
    /// All members posted; the reduced payload is delivered to every member.
    Complete(Payload),
}

/// A pre-initialized collective channel over an ordered member list.
#[derive(Debug, Clone)]
pub struct GroupHandle {
    members: Vec<usize>,
    seq: u64,
    pending: BTreeMap<usize, PostedOp>,
}

impl GroupHandle {
    fn new(members: Vec<usize>) -> Self {
        GroupHandle {
            members,
            seq: 0,
            pending: BTreeMap::new(),
        }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    /// Sequence number the next collective must carry.
    pub fn next_seq(&self) -> u64 {
        self.seq
    }

    pub fn rank_of(&self, engine_id: usize) -> Option<usize> {
        self.members.iter().position(|&m| m == engine_id)
    }

    /// Posts one member's side of a collective. Completes when every member
    /// has posted a matching (op, seq); any divergence is an eager
    /// `MismatchFault` rather than a hang.
    pub fn post(
        &mut self,
        rank: usize,
        op: CollectiveOp,
        seq: u64,
        payload: Payload,
    ) -> Result<PostOutcome, CommsError> {
        if !self.members.contains(&rank) {
            return Err(CommsError::NotAMember {
                rank,
                group: self.members.clone(),
            });
        }
        let expected_op = self
            .pending
            .values()
            .next()
            .map(|p| p.op)
            .unwrap_or(op);
        if seq != self.seq || op != expected_op || self.pending.contains_key(&rank) {
            return Err(CommsError::MismatchFault {
                group: self.members.clone(),
                expected_op,
                expected_seq: self.seq,
                observed_op: op,
                observed_seq: seq,
                rank,
            });
        }
        self.pending.insert(rank, PostedOp { op, payload });
        if self.pending.len() < self.members.len() {
            return Ok(PostOutcome::Waiting);
        }
        let reduced = self.reduce()?;
        self.pending.clear();
        self.seq += 1;
        Ok(PostOutcome::Complete(reduced))
    }

    fn reduce(&self) -> Result<Payload, CommsError> {
        let mut posts = self.pending.values();
        let first = posts.next().expect("reduce on empty pending");
        match &first.payload {
            Payload::Elems(acc) => {
                let mut acc = acc.clone();
                for post in posts {
                    match &post.payload {
                        Payload::Elems(v) if v.len() == acc.len() => {
                            for (a, b) in acc.iter_mut().zip(v) {
                                *a += b;
                            }
                        }
                        _ => return Err(CommsError::PayloadShapeMismatch),
                    }
                }
                Ok(Payload::Elems(acc))
            }
            Payload::Bytes(n) => {
                let mut max = *n;
                for post in posts {
                    match post.payload {
                        Payload::Bytes(m) => max = max.max(m),
                        _ => return Err(CommsError::PayloadShapeMismatch),
                    }
                }
                Ok(Payload::Bytes(max))
            }
        }
    }
}

/// Enumerates the contiguous aligned rank segments for every supported TP
/// degree: for each p, the N/p segments [k*p, (k+1)*p). No strided or
/// unaligned tuples are ever produced.
pub fn enumerate_tp_groups(
    num_engines: usize,
    degrees: &BTreeSet<usize>,
) -> Result<Vec<Vec<usize>>, CommsError> {
    let mut groups = Vec::new();
    for &p in degrees {
        if p == 0 || num_engines % p != 0 {
            return Err(CommsError::IndivisibleTpDegree {
                degree: p,
                engines: num_engines,
            });
        }
        for k in 0..num_engines / p {
            groups.push((k * p..(k + 1) * p).collect());
        }
    }
    Ok(groups)
}

/// Pool of eagerly initialized group handles, keyed by member ranks.
#[derive(Debug, Clone)]
pub struct GroupPool {
    groups: BTreeMap<Vec<usize>, GroupHandle>,
    init_cost_each: SimDuration,
    host_mem_bytes_each: u64,
    constructed: u64,
}

impl GroupPool {
    pub fn group_keys(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.groups.keys()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Startup cost paid once, before serving begins. Nothing is constructed
    /// at switch time.
    pub fn startup_cost(&self) -> SimDuration {
        SimDuration::from_micros(self.init_cost_each.as_micros() * self.groups.len() as u64)
    }

    pub fn host_mem_bytes(&self) -> u64 {
        self.host_mem_bytes_each * self.groups.len() as u64
    }

    /// Total groups ever constructed; constant after `build_pool`.
    pub fn constructed_count(&self) -> u64 {
        self.constructed
    }

    pub fn get_group(&self, members: &[usize]) -> Result<&GroupHandle, CommsError> {
        self.groups
            .get(members)
            .ok_or_else(|| CommsError::UnknownGroup(members.to_vec()))
    }

    pub fn get_group_mut(&mut self, members: &[usize]) -> Result<&mut GroupHandle, CommsError> {
        self.groups
            .get_mut(members)
            .ok_or_else(|| CommsError::UnknownGroup(members.to_vec()))
    }

    pub fn contains(&self, members: &[usize]) -> bool {
        self.groups.contains_key(members)
    }
}

/// Constructs every handle up front. The per-group init cost and ~2 MB host
/// footprint are reported so startup totals can be contrasted with live
/// switch latency.
pub fn build_pool(groups: Vec<Vec<usize>>, init_cost_each: SimDuration) -> GroupPool {
    let constructed = groups.len() as u64;
    let groups = groups
        .into_iter()
        .map(|members| (members.clone(), GroupHandle::new(members)))
        .collect();
    GroupPool {
        groups,
        init_cost_each,
        host_mem_bytes_each: HOST_MEM_BYTES_PER_GROUP,
        constructed,
    }
}

/// Drives a full all-reduce synchronously: every member's payload is posted
/// at the handle's current sequence number and the element-wise sum is
/// returned (delivered to every member by the caller).
pub fn all_reduce(
    handle: &mut GroupHandle,
    payloads: &[(usize, Payload)],
) -> Result<Payload, CommsError> {
    let seq = handle.next_seq();
    let mut result = None;
    for (rank, payload) in payloads {
        match handle.post(*rank, CollectiveOp::AllReduce, seq, payload.clone())? {
            PostOutcome::Waiting => {}
            PostOutcome::Complete(reduced) => result = Some(reduced),
        }
    }
    result.ok_or_else(|| {
        // Fewer payloads than members were supplied.
        CommsError::MismatchFault {
            group: handle.members().to_vec(),
            expected_op: CollectiveOp::AllReduce,
            expected_seq: seq,
            observed_op: CollectiveOp::AllReduce,
            observed_seq: seq,
            rank: usize::MAX,
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlKind {
    Heartbeat,
    SetTp { degree: usize, group: Vec<usize> },
    ResetTp,
    WorkloadSync { digest: u64 },
}

/// Control-plane message, piggybacked on the per-iteration heartbeat.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMessage {
    pub kind: ControlKind,
    pub epoch: u64,
}

/// One engine's local view of the waiting queue, tagged with its epoch.
#[derive(Debug, Clone)]
pub struct EngineQueue {
    pub engine_id: usize,
    pub epoch: u64,
    pub requests: Vec<WaitEntry>,
}

/// Minimal per-request info the global ordering needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaitEntry {
    pub id: RequestId,
    pub arrival: SimTime,
    pub priority: Priority,
}

/// Globally agreed waiting queue plus its order digest.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncedQueue {
    pub entries: Vec<WaitEntry>,
    pub digest: u64,
}

/// Merges per-engine queues into the globally agreed waiting queue every
/// engine observes. Ordering key: High priority first within the epoch,
/// then (arrival_time, request id).
pub fn sync_workload(epoch: u64, locals: &[EngineQueue]) -> Result<SyncedQueue, CommsError> {
    for q in locals {
        if q.epoch != epoch {
            return Err(CommsError::EpochSkew {
                engine: q.engine_id,
                engine_epoch: q.epoch,
                sync_epoch: epoch,
            });
        }
    }
    let mut entries: Vec<WaitEntry> = locals.iter().flat_map(|q| q.requests.iter().copied()).collect();
    entries.sort_by_key(|e| (e.priority.rank(), e.arrival, e.id));
    let digest = queue_digest(&entries);
    Ok(SyncedQueue { entries, digest })
}

/// FNV-1a over the ordered request ids; equal digests mean bitwise-equal
/// request orderings.
pub fn queue_digest(entries: &[WaitEntry]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for e in entries {
        for byte in e.id.0.to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

/// Acknowledgment of a mode broadcast; all acks of one broadcast carry the
/// same effective epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeAck {
    pub engine_id: usize,
    pub effective_epoch: u64,
}

/// Applies a SetTp/ResetTp message atomically to the addressed engines and
/// collects acknowledgments. SetTp requires a group from the pool; ResetTp
/// on an engine already in DP is a no-op acknowledgment.
pub fn broadcast_mode(
    pool: &GroupPool,
    engines: &mut [EngineState],
    msg: &ControlMessage,
) -> Result<Vec<ModeAck>, CommsError> {
    match &msg.kind {
        ControlKind::SetTp { degree, group } => {
            let handle = pool.get_group(group)?;
            debug_assert_eq!(*degree, handle.members().len());
            let mut acks = Vec::with_capacity(group.len());
            for (rank, &engine_id) in group.iter().enumerate() {
                let engine = engines
                    .iter_mut()
                    .find(|e| e.engine_id == engine_id)
                    .ok_or_else(|| CommsError::NotAMember {
                        rank: engine_id,
                        group: group.clone(),
                    })?;
                engine.current_mode = EngineMode::Tp {
                    group: group.clone(),
                    rank_in_group: rank,
                };
                acks.push(ModeAck {
                    engine_id,
                    effective_epoch: msg.epoch,
                });
            }
            Ok(acks)
        }
        ControlKind::ResetTp => {
            let mut acks = Vec::with_capacity(engines.len());
            for engine in engines.iter_mut() {
                engine.current_mode = EngineMode::Dp;
                acks.push(ModeAck {
                    engine_id: engine.engine_id,
                    effective_epoch: msg.epoch,
                });
            }
            Ok(acks)
        }
        ControlKind::Heartbeat | ControlKind::WorkloadSync { .. } => Ok(Vec::new()),
    }
}

/// One line of the collective event log: `time_ms,group,op,seq,status`.
#[derive(Debug, Clone)]
pub struct CollectiveRecord {
    pub time: SimTime,
    pub group: Vec<usize>,
    pub op: CollectiveOp,
    pub seq: u64,
    pub status: &'static str,
}

pub fn format_group(members: &[usize]) -> String {
    members
        .iter()
        .map(|m| m.to_string())
        .collect::<Vec<_>>()
        .join("+")
}

impl CollectiveRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.time,
            format_group(&self.group),
            self.op,
            self.seq,
            self.status
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn degrees(values: &[usize]) -> BTreeSet<usize> {
        values.iter().copied().collect()
    }

    #[test]
    fn enumerates_contiguous_aligned_groups() {
        // N=4, P={2,4} -> [0,1], [2,3], [0,1,2,3]
        let groups = enumerate_tp_groups(4, &degrees(&[2, 4])).unwrap();
        assert_eq!(
            groups,
            vec![vec![0, 1], vec![2, 3], vec![0, 1, 2, 3]]
        );

        // N=8, P={2,4,8} -> 4 + 2 + 1 = 7 groups
        let groups = enumerate_tp_groups(8, &degrees(&[2, 4, 8])).unwrap();
        assert_eq!(groups.len(), 7);

        // empty degree set -> empty list
        assert!(enumerate_tp_groups(2, &degrees(&[])).unwrap().is_empty());

        assert!(matches!(
            enumerate_tp_groups(4, &degrees(&[3])),
            Err(CommsError::IndivisibleTpDegree { degree: 3, .. })
        ));
    }

    #[test]
    fn pool_contains_exactly_the_enumerated_tuples() {
        let groups = enumerate_tp_groups(4, &degrees(&[2, 4])).unwrap();
        let pool = build_pool(groups, SimDuration::from_ms(500));
        assert!(pool.get_group(&[0, 1]).is_ok());
        assert!(pool.get_group(&[0, 1, 2, 3]).is_ok());
        // unaligned tuple is rejected
        assert!(matches!(
            pool.get_group(&[1, 2]),
            Err(CommsError::UnknownGroup(_))
        ));
        assert_eq!(pool.constructed_count(), 3);
        assert_eq!(pool.startup_cost(), SimDuration::from_ms(1500));
        assert_eq!(pool.host_mem_bytes(), 6_000_000);
    }

    #[test]
    fn pool_cost_reports() {
        // 7 groups at 500 ms each: 3500 ms startup, nothing at switch time
        let groups = enumerate_tp_groups(8, &degrees(&[2, 4, 8])).unwrap();
        let pool = build_pool(groups, SimDuration::from_ms(500));
        assert_eq!(pool.startup_cost(), SimDuration::from_ms(3500));

        let empty = build_pool(Vec::new(), SimDuration::from_ms(500));
        assert_eq!(empty.startup_cost(), SimDuration::ZERO);
        assert!(empty.is_empty());
    }

    #[test]
    fn all_reduce_sums_elementwise() {
        let mut handle = GroupHandle::new(vec![0, 1]);
        let out = all_reduce(
            &mut handle,
            &[
                (0, Payload::Elems(vec![1.0, 2.0])),
                (1, Payload::Elems(vec![10.0, 20.0])),
            ],
        )
        .unwrap();
        assert_eq!(out, Payload::Elems(vec![11.0, 22.0]));

        // 1-member group is the identity
        let mut solo = GroupHandle::new(vec![0]);
        let out = all_reduce(&mut solo, &[(0, Payload::Elems(vec![3.5]))]).unwrap();
        assert_eq!(out, Payload::Elems(vec![3.5]));
    }

    #[test]
    fn diverging_seq_is_a_mismatch_fault() {
        let mut handle = GroupHandle::new(vec![0, 1]);
        // advance group seq to 5
        for _ in 0..5 {
            all_reduce(
                &mut handle,
                &[(0, Payload::Bytes(8)), (1, Payload::Bytes(8))],
            )
            .unwrap();
        }
        handle
            .post(0, CollectiveOp::AllReduce, 5, Payload::Bytes(8))
            .unwrap();
        let err = handle
            .post(1, CollectiveOp::AllReduce, 6, Payload::Bytes(8))
            .unwrap_err();
        assert!(matches!(err, CommsError::MismatchFault { expected_seq: 5, observed_seq: 6, .. }));
    }

    #[test]
    fn sync_workload_orders_globally() {
        use crate::request::RequestId;
        let a = WaitEntry {
            id: RequestId(1),
            arrival: SimTime::from_ms(10),
            priority: Priority::Normal,
        };
        let b = WaitEntry {
            id: RequestId(2),
            arrival: SimTime::from_ms(5),
            priority: Priority::Normal,
        };
        let queues = vec![
            EngineQueue { engine_id: 0, epoch: 3, requests: vec![a] },
            EngineQueue { engine_id: 1, epoch: 3, requests: vec![b] },
        ];
        let synced = sync_workload(3, &queues).unwrap();
        assert_eq!(synced.entries[0].id, RequestId(2));
        assert_eq!(synced.entries[1].id, RequestId(1));

        // identical inputs on four engines give bitwise-equal digests
        let wide: Vec<EngineQueue> = (0..4)
            .map(|e| EngineQueue { engine_id: e, epoch: 3, requests: vec![a, b] })
            .collect();
        let first = sync_workload(3, &wide).unwrap();
        for _ in 0..3 {
            assert_eq!(sync_workload(3, &wide).unwrap().digest, first.digest);
        }

        // stale epoch is a protocol error
        let mut stale = queues;
        stale[1].epoch = 2;
        assert!(matches!(
            sync_workload(3, &stale),
            Err(CommsError::EpochSkew { engine: 1, .. })
        ));
    }

    #[test]
    fn high_priority_sorts_first_within_epoch() {
        let normal = WaitEntry {
            id: RequestId(1),
            arrival: SimTime::from_ms(1),
            priority: Priority::Normal,
        };
        let high = WaitEntry {
            id: RequestId(2),
            arrival: SimTime::from_ms(9),
            priority: Priority::High,
        };
        let queues = vec![EngineQueue { engine_id: 0, epoch: 0, requests: vec![normal, high] }];
        let synced = sync_workload(0, &queues).unwrap();
        assert_eq!(synced.entries[0].id, RequestId(2));
    }

    #[test]
    fn broadcast_mode_applies_atomically() {
        let groups = enumerate_tp_groups(4, &degrees(&[2, 4])).unwrap();
        let pool = build_pool(groups, SimDuration::ZERO);
        let mut engines: Vec<EngineState> = (0..4).map(EngineState::new).collect();

        let msg = ControlMessage {
            kind: ControlKind::SetTp { degree: 2, group: vec![0, 1] },
            epoch: 7,
        };
        let acks = broadcast_mode(&pool, &mut engines, &msg).unwrap();
        assert_eq!(acks.len(), 2);
        assert!(acks.iter().all(|a| a.effective_epoch == 7));
        assert!(matches!(engines[0].current_mode, EngineMode::Tp { .. }));
        assert!(matches!(engines[2].current_mode, EngineMode::Dp));
        assert!(engines[0].check_mode_invariant());
        assert!(engines[1].check_mode_invariant());

        // ResetTp on a DP engine is a no-op acknowledgment
        let reset = ControlMessage { kind: ControlKind::ResetTp, epoch: 8 };
        let acks = broadcast_mode(&pool, &mut engines[2..3], &reset).unwrap();
        assert_eq!(acks.len(), 1);

        // unaligned group is rejected
        let bad = ControlMessage {
            kind: ControlKind::SetTp { degree: 2, group: vec![1, 2] },
            epoch: 9,
        };
        assert!(matches!(
            broadcast_mode(&pool, &mut engines, &bad),
            Err(CommsError::UnknownGroup(_))
        ));
    }
}
