//! KV Cache Adaptor: one physical block pool whose per-request logical token
//! capacity rescales with the TP degree. A block's byte footprint
//! M_block = B_base * D * P_size is fixed at init; under degree p the local
//! hidden slice shrinks to D/p, so the token capacity grows to
//! B(p) = p * B_base and the bytes per block never change. Mode switches are
//! therefore metadata updates: no reallocation, no block copies.

use crate::deploy::DeploymentConfig;
use crate::model::{kv_bytes_per_token, ModelSpec};
use crate::request::RequestId;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub u32);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KvError {
    #[error("out of blocks: need {needed}, {available} free in the eligible partitions")]
    OutOfBlocks { needed: usize, available: usize },
    #[error("request {0} already has an allocation")]
    DoubleAllocate(RequestId),
    #[error("unknown request {0}")]
    UnknownRequest(RequestId),
    #[error("weights ({weight_bytes} B / {degree}-way) exceed usable device memory {usable} B")]
    WeightsExceedMemory {
        weight_bytes: u64,
        degree: usize,
        usable: u64,
    },
}

/// Logical tokens per block under parallelism degree p (Eq. B(p) = p * B_base).
pub fn adapt_block_size(p: usize, b_base: usize) -> usize {
    debug_assert!(p >= 1);
    p * b_base
}

/// Fixed pool of physical KV blocks, partitioned across engines. The free
/// list is kept per engine so DP allocations never scan other partitions.
#[derive(Debug, Clone)]
pub struct BlockPool {
    /// M_block: bytes per physical block, fixed at init.
    block_bytes: u64,
    num_blocks: usize,
    free_by_engine: Vec<BTreeSet<BlockId>>,
    total_free: usize,
    /// Which engine's physical memory hosts each block.
    owner_engine: Vec<usize>,
    realloc_count: u64,
}

impl BlockPool {
    pub fn new(block_bytes: u64, blocks_per_engine: usize, num_engines: usize) -> Self {
        let num_blocks = blocks_per_engine * num_engines;
        let free_by_engine = (0..num_engines)
            .map(|e| {
                ((e * blocks_per_engine) as u32..((e + 1) * blocks_per_engine) as u32)
                    .map(BlockId)
                    .collect()
            })
            .collect();
        let owner_engine = (0..num_blocks).map(|b| b / blocks_per_engine).collect();
        BlockPool {
            block_bytes,
            num_blocks,
            free_by_engine,
            total_free: num_blocks,
            owner_engine,
            realloc_count: 0,
        }
    }

    pub fn block_bytes(&self) -> u64 {
        self.block_bytes
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn free_count(&self) -> usize {
        self.total_free
    }

    /// Stays at zero across any switch sequence; bumping it would mean the
    /// pool was rebuilt.
    pub fn realloc_count(&self) -> u64 {
        self.realloc_count
    }

    pub fn owner(&self, block: BlockId) -> usize {
        self.owner_engine[block.0 as usize]
    }

    fn free_in(&self, engines: &[usize]) -> usize {
        engines.iter().map(|&e| self.free_by_engine[e].len()).sum()
    }

    /// Takes `count` blocks, round-robin across the eligible engines so TP
    /// allocations spread evenly over the pooled partitions.
    fn take(&mut self, count: usize, engines: &[usize]) -> Result<Vec<BlockId>, KvError> {
        let available = self.free_in(engines);
        if available < count {
            return Err(KvError::OutOfBlocks {
                needed: count,
                available,
            });
        }
        let mut taken = Vec::with_capacity(count);
        while taken.len() < count {
            let mut progressed = false;
            for &e in engines {
                if taken.len() == count {
                    break;
                }
                if let Some(&b) = self.free_by_engine[e].iter().next() {
                    self.free_by_engine[e].remove(&b);
                    taken.push(b);
                    progressed = true;
                }
            }
            debug_assert!(progressed);
        }
        self.total_free -= count;
        Ok(taken)
    }

    fn give_back(&mut self, blocks: &[BlockId]) {
        for b in blocks {
            let owner = self.owner_engine[b.0 as usize];
            let inserted = self.free_by_engine[owner].insert(*b);
            debug_assert!(inserted, "double free of block {b:?}");
        }
        self.total_free += blocks.len();
    }
}

/// Per-request logical mapping: ordered block list plus the mode-dependent
/// capacity it is interpreted under.
#[derive(Debug, Clone)]
pub struct LogicalEntry {
    pub block_ids: Vec<BlockId>,
    /// B(p) for this entry's degree.
    pub block_capacity: usize,
    pub tp_degree: usize,
    pub tokens_stored: u64,
    /// H_req = H_base / p, carried for audit; head sharding and B(p) scaling
    /// are two views of the same D/p reduction, so this never feeds sizing.
    pub kv_heads: usize,
    /// Engines whose partitions this entry may draw from.
    pub engines: Vec<usize>,
    pub paused: bool,
}

/// Remap policy at a mode switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemapPolicy {
    /// Hard-preempted DP requests that will resume in their original mode:
    /// entry untouched except the paused flag.
    PreserveResident,
    /// Soft-preempted speculative state that must be rebuilt under the new
    /// degree: capacity and block count re-derived, content recomputed.
    Recompute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RemapReport {
    pub metadata_updates: u64,
    /// Always zero: no migration path exists in this design.
    pub blocks_copied: u64,
    pub tokens_to_recompute: u64,
}

/// Block pool plus logical table, managed together.
#[derive(Debug, Clone)]
pub struct KvCache {
    pool: BlockPool,
    table: BTreeMap<RequestId, LogicalEntry>,
    b_base: usize,
    kv_heads_base: usize,
}

impl KvCache {
    pub fn new(pool: BlockPool, b_base: usize, kv_heads_base: usize) -> Self {
        KvCache {
            pool,
            table: BTreeMap::new(),
            b_base,
            kv_heads_base,
        }
    }

    /// Builds the pool for a deployment: M_block = B_base * D * P_size, and
    /// each engine hosts as many blocks as its post-weights memory affords.
    pub fn for_deployment(
        spec: &ModelSpec,
        cfg: &DeploymentConfig,
        dynamic_mode: bool,
    ) -> Result<Self, KvError> {
        let block_bytes = cfg.b_base as u64 * spec.hidden_dim as u64 * spec.elem_bytes as u64;
        let usable = (cfg.gpu_mem_bytes as f64 * cfg.mem_utilization) as u64;
        let reserve = if dynamic_mode { cfg.reconfig_reserve_bytes } else { 0 };
        let needed = spec.weight_bytes + reserve;
        if needed >= usable {
            return Err(KvError::WeightsExceedMemory {
                weight_bytes: spec.weight_bytes,
                degree: 1,
                usable,
            });
        }
        let kv_budget = usable - needed;
        let bytes_per_block_of_tokens = cfg.b_base as u64 * kv_bytes_per_token(spec);
        let blocks_per_engine = (kv_budget / bytes_per_block_of_tokens) as usize;
        Ok(KvCache::new(
            BlockPool::new(block_bytes, blocks_per_engine, cfg.num_engines),
            cfg.b_base,
            spec.num_kv_heads,
        ))
    }

    pub fn pool(&self) -> &BlockPool {
        &self.pool
    }

    pub fn entry(&self, req: RequestId) -> Option<&LogicalEntry> {
        self.table.get(&req)
    }

    pub fn b_base(&self) -> usize {
        self.b_base
    }

    /// Free blocks an allocation drawing from `engines` could use.
    pub fn free_blocks_for(&self, engines: &[usize]) -> usize {
        self.pool
            .free
            .iter()
            .filter(|b| engines.contains(&self.pool.owner_engine[b.0 as usize]))
            .count()
    }

    /// Allocates ceil(tokens / B(p)) blocks for a request. DP allocations
    /// draw only from the owning engine's partition; TP allocations draw
    /// from all group members' partitions.
    pub fn allocate(
        &mut self,
        req: RequestId,
        tokens_needed: u64,
        p: usize,
        engines: &[usize],
    ) -> Result<Vec<BlockId>, KvError> {
        if self.table.contains_key(&req) {
            return Err(KvError::DoubleAllocate(req));
        }
        let capacity = adapt_block_size(p, self.b_base);
        let needed = (tokens_needed as usize).div_ceil(capacity);
        let blocks = self.pool.take(needed, engines)?;
        self.table.insert(
            req,
            LogicalEntry {
                block_ids: blocks.clone(),
                block_capacity: capacity,
                tp_degree: p,
                tokens_stored: tokens_needed,
                kv_heads: self.kv_heads_base / p,
                engines: engines.to_vec(),
                paused: false,
            },
        );
        Ok(blocks)
    }

    /// Appends n tokens, pulling new blocks whenever the tail block fills.
    pub fn append_tokens(&mut self, req: RequestId, n: u64) -> Result<Vec<BlockId>, KvError> {
        let entry = self.table.get_mut(&req).ok_or(KvError::UnknownRequest(req))?;
        let capacity_now = entry.block_ids.len() as u64 * entry.block_capacity as u64;
        let mut added = Vec::new();
        if entry.tokens_stored + n > capacity_now {
            let deficit = entry.tokens_stored + n - capacity_now;
            let extra = (deficit as usize).div_ceil(entry.block_capacity);
            added = self.pool.take(extra, &entry.engines)?;
            entry.block_ids.extend(added.iter().copied());
        }
        entry.tokens_stored += n;
        Ok(added)
    }

    /// Constant-time metadata remap at a mode switch. Never copies a block.
    pub fn remap_on_switch(
        &mut self,
        req: RequestId,
        new_p: usize,
        policy: RemapPolicy,
        new_engines: &[usize],
    ) -> Result<RemapReport, KvError> {
        let entry = self.table.get_mut(&req).ok_or(KvError::UnknownRequest(req))?;
        match policy {
            RemapPolicy::PreserveResident => {
                entry.paused = true;
                Ok(RemapReport {
                    metadata_updates: 1,
                    blocks_copied: 0,
                    tokens_to_recompute: 0,
                })
            }
            RemapPolicy::Recompute => {
                let empty = entry.tokens_stored == 0 && entry.block_ids.is_empty();
                entry.tp_degree = new_p;
                entry.block_capacity = adapt_block_size(new_p, self.b_base);
                entry.kv_heads = self.kv_heads_base / new_p;
                entry.engines = new_engines.to_vec();
                entry.paused = false;
                let tokens = entry.tokens_stored;
                let wanted = (tokens as usize).div_ceil(entry.block_capacity);
                if wanted < entry.block_ids.len() {
                    let extra = entry.block_ids.split_off(wanted);
                    self.pool.give_back(&extra);
                } else if wanted > entry.block_ids.len() {
                    let deficit = wanted - entry.block_ids.len();
                    let engines = entry.engines.clone();
                    let added = self.pool.take(deficit, &engines)?;
                    let entry = self.table.get_mut(&req).unwrap();
                    entry.block_ids.extend(added);
                }
                Ok(RemapReport {
                    metadata_updates: if empty { 0 } else { 1 },
                    blocks_copied: 0,
                    tokens_to_recompute: if empty { 0 } else { tokens },
                })
            }
        }
    }

    /// Clears the paused flag after a hard-preempted request resumes.
    pub fn resume(&mut self, req: RequestId) -> Result<(), KvError> {
        let entry = self.table.get_mut(&req).ok_or(KvError::UnknownRequest(req))?;
        entry.paused = false;
        Ok(())
    }

    /// Returns all blocks to the free list and drops the table entry.
    pub fn free(&mut self, req: RequestId) -> Result<usize, KvError> {
        let entry = self.table.remove(&req).ok_or(KvError::UnknownRequest(req))?;
        let count = entry.block_ids.len();
        self.pool.give_back(&entry.block_ids);
        Ok(count)
    }

    /// allocated + free == num_blocks with no block in two places.
    pub fn check_conservation(&self) -> bool {
        let mut seen = BTreeSet::new();
        for b in &self.pool.free {
            if !seen.insert(*b) {
                return false;
            }
        }
        for entry in self.table.values() {
            for b in &entry.block_ids {
                if !seen.insert(*b) {
                    return false;
                }
            }
        }
        seen.len() == self.pool.num_blocks
    }

    /// One line per request: `req_id,p,B(p),tokens_stored,block_ids...`
    pub fn dump_state(&self) -> String {
        let mut out = String::new();
        for (req, entry) in &self.table {
            let _ = write!(
                out,
                "{},{},{},{}",
                req, entry.tp_degree, entry.block_capacity, entry.tokens_stored
            );
            for b in &entry.block_ids {
                let _ = write!(out, ",{}", b.0);
            }
            out.push('\n');
        }
        out
    }
}

/// Maximum context length under degree p: per-device free bytes after
/// weights (and the reconfiguration reserve, when dynamic switching is on),
/// pooled across p devices, divided by the per-token KV footprint, floored
/// to a whole number of B(p)-token blocks.
pub fn max_context(
    spec: &ModelSpec,
    cfg: &DeploymentConfig,
    p: usize,
    dynamic_mode: bool,
) -> Result<u64, KvError> {
    let usable = cfg.gpu_mem_bytes as f64 * cfg.mem_utilization;
    let weights_per_device = spec.weight_bytes as f64 / p as f64;
    let reserve = if dynamic_mode {
        cfg.reconfig_reserve_bytes as f64
    } else {
        0.0
    };
    let free_per_device = usable - weights_per_device - reserve;
    if free_per_device <= 0.0 {
        return Err(KvError::WeightsExceedMemory {
            weight_bytes: spec.weight_bytes,
            degree: p,
            usable: usable as u64,
        });
    }
    let tokens = (p as f64 * free_per_device / kv_bytes_per_token(spec) as f64).floor() as u64;
    let block = adapt_block_size(p, cfg.b_base) as u64;
    Ok(tokens - tokens % block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;

    fn small_cache() -> KvCache {
        // 4 engines x 16 blocks, B_base = 4, H_base = 8
        KvCache::new(BlockPool::new(1024, 16, 4), 4, 8)
    }

    #[test]
    fn block_size_scales_with_degree() {
        // Fig-4 illustration values: 4 tokens (DP), 8 (2TP), 16 (4TP)
        assert_eq!(adapt_block_size(1, 4), 4);
        assert_eq!(adapt_block_size(2, 4), 8);
        assert_eq!(adapt_block_size(4, 4), 16);
        assert_eq!(adapt_block_size(1, 16), 16);
        // byte check: B(8) * (D/8) * P == B_base * D * P
        let (b_base, d, p_size) = (16u64, 4096u64, 2u64);
        let bp = adapt_block_size(8, b_base as usize) as u64;
        assert_eq!(bp * (d / 8) * p_size, b_base * d * p_size);
    }

    #[test]
    fn allocate_rounds_up_blocks() {
        let mut kv = small_cache();
        // 9 tokens at B(1)=4 -> 3 blocks
        let blocks = kv.allocate(RequestId(0), 9, 1, &[0]).unwrap();
        assert_eq!(blocks.len(), 3);
        // 9 tokens at B(2)=8 -> 2 blocks
        let blocks = kv.allocate(RequestId(1), 9, 2, &[0, 1]).unwrap();
        assert_eq!(blocks.len(), 2);
        assert!(kv.check_conservation());

        assert_eq!(
            kv.allocate(RequestId(0), 1, 1, &[0]),
            Err(KvError::DoubleAllocate(RequestId(0)))
        );
    }

    #[test]
    fn allocation_respects_engine_partitions() {
        let mut kv = small_cache();
        // engine 1 owns blocks 8..16
        let blocks = kv.allocate(RequestId(0), 4, 1, &[1]).unwrap();
        assert!(blocks.iter().all(|b| kv.pool().owner(*b) == 1));
        // exhausting one engine's partition fails even though others are free
        let err = kv.allocate(RequestId(1), 100, 1, &[1]).unwrap_err();
        assert!(matches!(err, KvError::OutOfBlocks { .. }));
        assert!(kv.check_conservation());
    }

    #[test]
    fn out_of_blocks_is_a_signal_not_a_panic() {
        let mut kv = KvCache::new(BlockPool::new(64, 1, 1), 4, 8);
        let err = kv.allocate(RequestId(7), 100, 1, &[0]).unwrap_err();
        assert!(matches!(err, KvError::OutOfBlocks { needed: 25, .. }));
        // pool untouched
        assert_eq!(kv.pool().free_count(), 1);
    }

    #[test]
    fn append_pulls_blocks_only_at_boundaries() {
        let mut kv = small_cache();
        kv.allocate(RequestId(0), 4, 1, &[0]).unwrap();
        // stored=4, B=4: one more token needs a new block
        let added = kv.append_tokens(RequestId(0), 1).unwrap();
        assert_eq!(added.len(), 1);

        kv.allocate(RequestId(1), 3, 1, &[0]).unwrap();
        // stored=3, B=4: one more token fits
        let added = kv.append_tokens(RequestId(1), 1).unwrap();
        assert!(added.is_empty());

        // stored=0, append 17 at B(2)=8 -> 3 blocks total
        kv.allocate(RequestId(2), 0, 2, &[0, 1]).unwrap();
        kv.append_tokens(RequestId(2), 17).unwrap();
        assert_eq!(kv.entry(RequestId(2)).unwrap().block_ids.len(), 3);
        assert!(kv.check_conservation());
    }

    #[test]
    fn preserve_resident_remap_is_metadata_only() {
        let mut kv = small_cache();
        kv.allocate(RequestId(0), 10, 1, &[0]).unwrap();
        let before = kv.entry(RequestId(0)).unwrap().block_ids.clone();
        let report = kv
            .remap_on_switch(RequestId(0), 1, RemapPolicy::PreserveResident, &[0])
            .unwrap();
        assert_eq!(
            report,
            RemapReport { metadata_updates: 1, blocks_copied: 0, tokens_to_recompute: 0 }
        );
        let entry = kv.entry(RequestId(0)).unwrap();
        assert!(entry.paused);
        assert_eq!(entry.block_ids, before, "block ids must be stable");
    }

    #[test]
    fn recompute_remap_rescales_and_reports_tokens() {
        let mut kv = small_cache();
        kv.allocate(RequestId(0), 40, 1, &[0]).unwrap();
        assert_eq!(kv.entry(RequestId(0)).unwrap().block_ids.len(), 10);
        let report = kv
            .remap_on_switch(RequestId(0), 4, RemapPolicy::Recompute, &[0, 1, 2, 3])
            .unwrap();
        assert_eq!(report.tokens_to_recompute, 40);
        assert_eq!(report.blocks_copied, 0);
        let entry = kv.entry(RequestId(0)).unwrap();
        assert_eq!(entry.block_capacity, 16);
        assert_eq!(entry.block_ids.len(), 3); // ceil(40/16)
        assert_eq!(entry.kv_heads, 2); // 8 / 4
        assert!(kv.check_conservation());

        // switch with nothing stored reports all zeros
        kv.allocate(RequestId(1), 0, 1, &[0]).unwrap();
        let report = kv
            .remap_on_switch(RequestId(1), 2, RemapPolicy::Recompute, &[0, 1])
            .unwrap();
        assert_eq!(report, RemapReport::default());

        let err = kv
            .remap_on_switch(RequestId(9), 2, RemapPolicy::Recompute, &[0, 1])
            .unwrap_err();
        assert_eq!(err, KvError::UnknownRequest(RequestId(9)));
    }

    #[test]
    fn free_restores_everything() {
        let mut kv = small_cache();
        kv.allocate(RequestId(0), 10, 1, &[0]).unwrap();
        assert_eq!(kv.free(RequestId(0)).unwrap(), 3);
        assert_eq!(kv.pool().free_count(), 64);
        assert_eq!(kv.free(RequestId(0)), Err(KvError::UnknownRequest(RequestId(0))));
    }

    #[test]
    fn logical_table_dump_matches_paged_map_example() {
        // Reproduce the request->block table: 0 -> {1,3}, 1 -> {0}, 2 -> {2}
        let mut kv = KvCache::new(BlockPool::new(64, 8, 1), 4, 8);
        kv.allocate(RequestId(1), 3, 1, &[0]).unwrap(); // block 0
        kv.allocate(RequestId(0), 4, 1, &[0]).unwrap(); // block 1
        kv.allocate(RequestId(2), 2, 1, &[0]).unwrap(); // block 2
        kv.append_tokens(RequestId(0), 1).unwrap(); // block 3
        assert_eq!(
            kv.dump_state(),
            "0,1,4,5,1,3\n1,1,4,3,0\n2,1,4,2,2\n"
        );
    }

    #[test]
    fn max_context_formula() {
        use crate::deploy::DeploymentConfig;
        // tiny spec: kv = 2 B/token, mem = 1000 B, weights = 200 B, util = 1.0
        let spec = ModelSpec {
            name: "tiny".into(),
            num_layers: 1,
            hidden_dim: 1,
            num_kv_heads: 1,
            head_dim: 1,
            elem_bytes: 1,
            weight_bytes: 200,
            max_model_len: 1 << 20,
        };
        let cfg = DeploymentConfig {
            num_engines: 1,
            gpu_mem_bytes: 1000,
            mem_utilization: 1.0,
            b_base: 4,
            ..DeploymentConfig::default()
        };
        // free = 800 B, 2 B/token -> 400 tokens, already a multiple of B(1)=4
        assert_eq!(max_context(&spec, &cfg, 1, false).unwrap(), 400);
    }

    #[test]
    fn max_context_errors_when_weights_do_not_fit() {
        let spec = presets::llama70b_like();
        let cfg = DeploymentConfig::default();
        // 140 GB of weights cannot fit one 126.9 GB budget
        assert!(matches!(
            max_context(&spec, &cfg, 1, false),
            Err(KvError::WeightsExceedMemory { .. })
        ));
        assert!(max_context(&spec, &cfg, 2, false).is_ok());
    }

    #[test]
    fn bookkeeping_survives_many_random_requests() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let mut kv = KvCache::new(BlockPool::new(1024, 64, 4), 16, 8);
        let mut live: Vec<RequestId> = Vec::new();
        let mut next_id = 0u64;
        for _ in 0..10_000 {
            if live.is_empty() || rng.gen_bool(0.55) {
                let id = RequestId(next_id);
                next_id += 1;
                let p = [1usize, 2, 4][rng.gen_range(0..3)];
                let engines: Vec<usize> = (0..p).collect();
                let tokens = rng.gen_range(0..200);
                if kv.allocate(id, tokens, p, &engines).is_ok() {
                    live.push(id);
                }
            } else {
                let idx = rng.gen_range(0..live.len());
                let id = live.swap_remove(idx);
                kv.free(id).unwrap();
            }
            debug_assert!(kv.check_conservation());
        }
        for id in live {
            kv.free(id).unwrap();
        }
        assert_eq!(kv.pool().free_count(), kv.pool().num_blocks());
        assert!(kv.check_conservation());
    }
}
