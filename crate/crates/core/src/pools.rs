//! The two tensor pools over one unified physical chunk pool.
//!
//! Released slots stay mapped and are reused best-fit (KV) or best-fit with
//! coalescing over chunk-granular regions (activations). Chunks migrate
//! between the pools only through [`UnifiedPhysicalPool::inflate`] and
//! [`UnifiedPhysicalPool::deflate`], which relabel ownership after a
//! garbage-collection pass over `Available` slots — never touching memory
//! that a live tensor holds.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::vmm::{
    AddressSpace, ChunkId, CostBucket, PoolKind, SlotId, SlotState, VmmError, VmmStats,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ETensorId(pub u64);

/// A live tensor handle: a slot plus how much of it the owner has written.
#[derive(Debug, Clone)]
pub struct ETensor {
    pub id: ETensorId,
    pub slot: SlotId,
    pub kind: PoolKind,
    pub owner_request: Option<u64>,
    pub written_chunks: u32,
}

/// Counts visible to the scheduler: reclaimable chunks per owner.
/// `free_kv`/`free_act` include both unmapped chunks and chunks mapped into
/// `Available` slots of that owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolCounters {
    pub total: u32,
    pub free_kv: u32,
    pub free_act: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransferStats {
    pub inflated_chunks: u64,
    pub deflated_chunks: u64,
    pub inflate_events: u64,
    pub deflate_events: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("insufficient physical chunks: requested {requested}, available {available}")]
    InsufficientChunks { requested: u32, available: u32 },
    #[error("tensor {0:?} not found (double release?)")]
    TensorNotFound(ETensorId),
    #[error(transparent)]
    Vmm(#[from] VmmError),
}

/// All physical chunks plus the per-kind slot pools built on top of them.
#[derive(Debug)]
pub struct UnifiedPhysicalPool {
    space: AddressSpace,
    free_kv: BTreeSet<ChunkId>,
    free_act: BTreeSet<ChunkId>,
    /// Available KV slots keyed by (mapped chunks, base) for best-fit.
    avail_kv: BTreeSet<(u32, u64, SlotId)>,
    avail_kv_mapped: u64,
    /// Available activation regions keyed by (length, base).
    avail_act: BTreeSet<(u32, u64, SlotId)>,
    avail_act_mapped: u64,
    /// Available activation regions by base address, for coalescing.
    act_by_base: BTreeMap<u64, SlotId>,
    tensors: BTreeMap<u64, ETensor>,
    next_tensor: u64,
    owned_kv: u32,
    owned_act: u32,
    pub transfers: TransferStats,
    pub premapped_total: u64,
}

impl UnifiedPhysicalPool {
    pub fn new(
        chunk_bytes: u64,
        map_cost_s: f64,
        unmap_cost_s: f64,
        total_chunks: u32,
        initial_act_chunks: u32,
    ) -> Self {
        assert!(initial_act_chunks <= total_chunks);
        let mut space = AddressSpace::new(chunk_bytes, map_cost_s, unmap_cost_s);
        let kv = space.add_chunks(PoolKind::Kv, total_chunks - initial_act_chunks);
        let act = space.add_chunks(PoolKind::Act, initial_act_chunks);
        Self {
            space,
            free_kv: kv.into_iter().collect(),
            free_act: act.into_iter().collect(),
            avail_kv: BTreeSet::new(),
            avail_kv_mapped: 0,
            avail_act: BTreeSet::new(),
            avail_act_mapped: 0,
            act_by_base: BTreeMap::new(),
            tensors: BTreeMap::new(),
            next_tensor: 0,
            owned_kv: total_chunks - initial_act_chunks,
            owned_act: initial_act_chunks,
            transfers: TransferStats::default(),
            premapped_total: 0,
        }
    }

    pub fn chunk_bytes(&self) -> u64 {
        self.space.chunk_bytes()
    }

    pub fn vmm_stats(&self) -> VmmStats {
        self.space.stats()
    }

    pub fn deferred_len(&self) -> usize {
        self.space.deferred_len()
    }

    pub fn counters(&self) -> PoolCounters {
        PoolCounters {
            total: self.space.total_chunks(),
            free_kv: self.free_kv.len() as u32 + self.avail_kv_mapped as u32,
            free_act: self.free_act.len() as u32 + self.avail_act_mapped as u32,
        }
    }

    pub fn owned_split(&self) -> (u32, u32) {
        (self.owned_kv, self.owned_act)
    }

    pub fn tensor(&self, id: ETensorId) -> Result<&ETensor, PoolError> {
        self.tensors.get(&id.0).ok_or(PoolError::TensorNotFound(id))
    }

    pub fn tensor_mapped_chunks(&self, id: ETensorId) -> Result<u32, PoolError> {
        let t = self.tensor(id)?;
        Ok(self.space.slot(t.slot)?.mapped_chunks())
    }

    /// Snapshot of Available KV slots as (mapped, length, base, id), for
    /// audits and oracle checks.
    pub fn available_kv_slots(&self) -> Vec<(u32, u32, u64, SlotId)> {
        self.avail_kv
            .iter()
            .map(|&(mapped, base, id)| {
                let length = self.space.slot(id).map(|s| s.length_chunks()).unwrap_or(0);
                (mapped, length, base, id)
            })
            .collect()
    }

    pub fn available_act_regions(&self) -> Vec<(u32, u64, SlotId)> {
        self.avail_act.iter().copied().collect()
    }

    /// Smallest Available KV slot with at least `s` mapped chunks and a span
    /// of at least `span` chunks; ties resolve to the lowest base address.
    pub fn best_fit_kv(&self, s: u32, span: u32) -> Option<SlotId> {
        self.avail_kv
            .range((s, 0, SlotId(0))..)
            .find(|(_, _, id)| {
                self.space
                    .slot(*id)
                    .map(|sl| sl.length_chunks() >= span)
                    .unwrap_or(false)
            })
            .map(|&(_, _, id)| id)
    }

    fn kv_available_total(&self) -> u64 {
        self.free_kv.len() as u64 + self.avail_kv_mapped
    }

    fn act_available_total(&self) -> u64 {
        self.free_act.len() as u64 + self.avail_act_mapped
    }

    fn remove_avail_kv(&mut self, key: (u32, u64, SlotId)) {
        let removed = self.avail_kv.remove(&key);
        debug_assert!(removed);
        self.avail_kv_mapped -= key.0 as u64;
    }

    fn insert_avail_kv(&mut self, mapped: u32, base: u64, id: SlotId) {
        self.avail_kv.insert((mapped, base, id));
        self.avail_kv_mapped += mapped as u64;
    }

    fn remove_avail_act(&mut self, key: (u32, u64, SlotId)) {
        let removed = self.avail_act.remove(&key);
        debug_assert!(removed);
        self.avail_act_mapped -= key.0 as u64;
        self.act_by_base.remove(&key.1);
    }

    fn insert_avail_act(&mut self, len: u32, base: u64, id: SlotId) {
        self.avail_act.insert((len, base, id));
        self.avail_act_mapped += len as u64;
        self.act_by_base.insert(base, id);
    }

    /// Maps free KV chunks onto the tail of `slot` until `target` chunks are
    /// mapped, cannibalizing Available KV slots (largest first, overlapped
    /// remap) once the free list runs dry.
    fn fill_kv_slot(&mut self, slot_id: SlotId, target: u32) -> Result<u32, PoolError> {
        let current = self.space.slot(slot_id)?.mapped_chunks();
        if target <= current {
            return Ok(0);
        }
        let need = target - current;
        if need as u64 > self.kv_available_total() {
            return Err(PoolError::InsufficientChunks {
                requested: need,
                available: self.kv_available_total() as u32,
            });
        }
        let mut remaining = need;
        while remaining > 0 {
            if let Some(chunk) = self.free_kv.pop_first() {
                let off = self.space.slot(slot_id)?.mapped_chunks();
                self.space.map_chunk(slot_id, off, chunk, CostBucket::Critical)?;
                remaining -= 1;
                continue;
            }
            let &(mapped, base, victim) = self
                .avail_kv
                .iter()
                .next_back()
                .expect("feasibility checked upfront");
            self.remove_avail_kv((mapped, base, victim));
            let take = remaining.min(mapped);
            let offsets: Vec<u32> = (mapped - take..mapped).collect();
            self.space.remap_overlapped(victim, slot_id, &offsets)?;
            if take == mapped {
                self.space.set_state(victim, SlotState::PendingUnmap)?;
            } else {
                self.insert_avail_kv(mapped - take, base, victim);
            }
            remaining -= take;
        }
        Ok(need)
    }

    /// Acquires a KV tensor with `needed_now` chunks backed immediately and
    /// an address span able to hold `span_chunks`. Reuses the best-fit
    /// Available slot when one exists, trimming any excess mapping back to
    /// the free list so admission accounting stays exact; otherwise reserves
    /// a fresh span and maps on demand.
    pub fn kv_acquire(
        &mut self,
        needed_now: u32,
        span_chunks: u32,
        owner_request: Option<u64>,
    ) -> Result<ETensorId, PoolError> {
        assert!(needed_now >= 1);
        let span = span_chunks.max(needed_now);
        if let Some(slot_id) = self.best_fit_kv(needed_now, span) {
            let slot = self.space.slot(slot_id)?;
            let key = (slot.mapped_chunks(), slot.base(), slot_id);
            self.remove_avail_kv(key);
            if key.0 > needed_now {
                let freed = self.space.unmap_tail(slot_id, key.0 - needed_now)?;
                self.free_kv.extend(freed);
            }
            self.space.set_state(slot_id, SlotState::InUse)?;
            return Ok(self.register_tensor(slot_id, PoolKind::Kv, owner_request, needed_now));
        }
        if needed_now as u64 > self.kv_available_total() {
            return Err(PoolError::InsufficientChunks {
                requested: needed_now,
                available: self.kv_available_total() as u32,
            });
        }
        let slot_id = self.space.reserve_span(span, PoolKind::Kv)?;
        self.space.set_state(slot_id, SlotState::InUse)?;
        self.fill_kv_slot(slot_id, needed_now)?;
        Ok(self.register_tensor(slot_id, PoolKind::Kv, owner_request, needed_now))
    }

    /// Extends a KV tensor's written prefix to `target_chunks`, mapping any
    /// not-yet-mapped tail on demand (a pre-mapped tail costs nothing here).
    pub fn kv_write(&mut self, id: ETensorId, target_chunks: u32) -> Result<u32, PoolError> {
        let slot_id = self.tensor(id)?.slot;
        let newly = self.fill_kv_slot(slot_id, target_chunks)?;
        let t = self.tensors.get_mut(&id.0).unwrap();
        t.written_chunks = t.written_chunks.max(target_chunks);
        Ok(newly)
    }

    /// Merges virtually adjacent Available activation regions. A single
    /// pass in base order resolves arbitrary chains of neighbours.
    fn coalesce_act(&mut self) {
        let entries: Vec<(u64, SlotId)> =
            self.act_by_base.iter().map(|(b, id)| (*b, *id)).collect();
        if entries.len() < 2 {
            return;
        }
        let cb = self.space.chunk_bytes();
        let (mut cur_base, mut cur_id) = entries[0];
        let mut cur_len = self.space.slot(cur_id).unwrap().length_chunks();
        for &(base, id) in &entries[1..] {
            let len = self.space.slot(id).unwrap().length_chunks();
            if cur_base + cur_len as u64 * cb == base {
                self.remove_avail_act((cur_len, cur_base, cur_id));
                self.remove_avail_act((len, base, id));
                self.space.merge_adjacent(cur_id, id).unwrap();
                cur_len += len;
                self.insert_avail_act(cur_len, cur_base, cur_id);
            } else {
                cur_base = base;
                cur_id = id;
                cur_len = len;
            }
        }
    }

    /// Acquires an activation tensor of at least `bytes`, best-fit over the
    /// coalesced free regions; splits an oversized region, or reserves and
    /// maps a fresh span when no region fits.
    pub fn act_acquire(&mut self, bytes: u64, owner_request: Option<u64>) -> Result<ETensorId, PoolError> {
        assert!(bytes >= 1);
        let chunks = bytes.div_ceil(self.space.chunk_bytes()) as u32;
        self.coalesce_act();
        let candidate = self
            .avail_act
            .range((chunks, 0, SlotId(0))..)
            .next()
            .copied();
        if let Some((len, base, slot_id)) = candidate {
            self.remove_avail_act((len, base, slot_id));
            if len > chunks {
                let tail = self.space.split_slot(slot_id, chunks)?;
                let tail_slot = self.space.slot(tail)?;
                self.insert_avail_act(tail_slot.length_chunks(), tail_slot.base(), tail);
            }
            self.space.set_state(slot_id, SlotState::InUse)?;
            return Ok(self.register_tensor(slot_id, PoolKind::Act, owner_request, chunks));
        }
        if chunks as u64 > self.act_available_total() {
            return Err(PoolError::InsufficientChunks {
                requested: chunks,
                available: self.act_available_total() as u32,
            });
        }
        let slot_id = self.space.reserve_span(chunks, PoolKind::Act)?;
        self.space.set_state(slot_id, SlotState::InUse)?;
        let mut remaining = chunks;
        while remaining > 0 {
            if let Some(chunk) = self.free_act.pop_first() {
                let off = self.space.slot(slot_id)?.mapped_chunks();
                self.space.map_chunk(slot_id, off, chunk, CostBucket::Critical)?;
                remaining -= 1;
                continue;
            }
            // harvest the largest available region: split off exactly what
            // is needed and migrate it with an overlapped remap
            let &(len, base, victim) = self
                .avail_act
                .iter()
                .next_back()
                .expect("feasibility checked upfront");
            self.remove_avail_act((len, base, victim));
            let take = remaining.min(len);
            let migrate = if take == len {
                victim
            } else {
                let tail = self.space.split_slot(victim, len - take)?;
                let head = self.space.slot(victim)?;
                self.insert_avail_act(head.length_chunks(), head.base(), victim);
                tail
            };
            let offsets: Vec<u32> = (0..take).collect();
            self.space.remap_overlapped(migrate, slot_id, &offsets)?;
            self.space.set_state(migrate, SlotState::PendingUnmap)?;
            remaining -= take;
        }
        Ok(self.register_tensor(slot_id, PoolKind::Act, owner_request, chunks))
    }

    fn register_tensor(
        &mut self,
        slot: SlotId,
        kind: PoolKind,
        owner_request: Option<u64>,
        written: u32,
    ) -> ETensorId {
        let id = ETensorId(self.next_tensor);
        self.next_tensor += 1;
        self.tensors.insert(
            id.0,
            ETensor {
                id,
                slot,
                kind,
                owner_request,
                written_chunks: written,
            },
        );
        id
    }

    /// Releases a tensor: its slot becomes an Available, still-mapped slot
    /// ready for reuse. Returns the number of chunks made reclaimable.
    pub fn release(&mut self, id: ETensorId) -> Result<u32, PoolError> {
        let t = self
            .tensors
            .remove(&id.0)
            .ok_or(PoolError::TensorNotFound(id))?;
        let slot = self.space.slot(t.slot)?;
        let (mapped, base) = (slot.mapped_chunks(), slot.base());
        self.space.set_state(t.slot, SlotState::Available)?;
        match t.kind {
            PoolKind::Kv => {
                if mapped > 0 {
                    self.insert_avail_kv(mapped, base, t.slot);
                } else {
                    // nothing mapped: retire the empty span immediately
                    self.space.unmap_slot(t.slot)?;
                }
            }
            PoolKind::Act => self.insert_avail_act(mapped, base, t.slot),
        }
        Ok(mapped)
    }

    /// Moves up to `amount` chunks from the activation side to the KV side:
    /// free chunks first, then garbage-collected Available regions (largest
    /// first). Returns the number actually transferred.
    pub fn inflate(&mut self, amount: u32) -> u32 {
        let moved = self.transfer(PoolKind::Act, PoolKind::Kv, amount);
        if moved > 0 {
            self.transfers.inflate_events += 1;
            self.transfers.inflated_chunks += moved as u64;
        }
        moved
    }

    /// Reverse of [`Self::inflate`]: KV chunks relabel to the activation side.
    pub fn deflate(&mut self, amount: u32) -> u32 {
        let moved = self.transfer(PoolKind::Kv, PoolKind::Act, amount);
        if moved > 0 {
            self.transfers.deflate_events += 1;
            self.transfers.deflated_chunks += moved as u64;
        }
        moved
    }

    fn transfer(&mut self, from: PoolKind, to: PoolKind, amount: u32) -> u32 {
        assert!(amount > 0);
        let mut moved = 0u32;
        while moved < amount {
            let chunk = match from {
                PoolKind::Act => self.free_act.pop_first(),
                PoolKind::Kv => self.free_kv.pop_first(),
            };
            let Some(chunk) = chunk else { break };
            self.space.set_chunk_owner(chunk, to);
            match to {
                PoolKind::Kv => self.free_kv.insert(chunk),
                PoolKind::Act => self.free_act.insert(chunk),
            };
            moved += 1;
        }
        while moved < amount {
            let victim = match from {
                PoolKind::Act => self.avail_act.iter().next_back().copied(),
                PoolKind::Kv => self.avail_kv.iter().next_back().copied(),
            };
            let Some((len, base, victim)) = victim else { break };
            match from {
                PoolKind::Act => self.remove_avail_act((len, base, victim)),
                PoolKind::Kv => self.remove_avail_kv((len, base, victim)),
            }
            assert_eq!(
                self.space.slot(victim).map(|s| s.state()),
                Ok(SlotState::Available),
                "ownership transfer may only GC Available slots"
            );
            let freed = self.space.unmap_slot(victim).expect("available slot");
            for chunk in freed {
                if moved < amount {
                    self.space.set_chunk_owner(chunk, to);
                    match to {
                        PoolKind::Kv => self.free_kv.insert(chunk),
                        PoolKind::Act => self.free_act.insert(chunk),
                    };
                    moved += 1;
                } else {
                    // GC overshoot stays with its original owner, unmapped
                    match from {
                        PoolKind::Kv => self.free_kv.insert(chunk),
                        PoolKind::Act => self.free_act.insert(chunk),
                    };
                }
            }
        }
        match (from, to) {
            (PoolKind::Act, PoolKind::Kv) => {
                self.owned_act -= moved;
                self.owned_kv += moved;
            }
            (PoolKind::Kv, PoolKind::Act) => {
                self.owned_kv -= moved;
                self.owned_act += moved;
            }
            _ => unreachable!(),
        }
        moved
    }

    /// Pre-maps the next chunk for sequences whose upcoming token crosses a
    /// chunk boundary, off the critical path. Stops at `budget_chunks`, when
    /// the free KV list runs out, or when total free would drop to
    /// `floor_free_total`.
    pub fn speculative_premap(
        &mut self,
        candidates: &[(ETensorId, u32)],
        budget_chunks: u32,
        floor_free_total: u32,
    ) -> u32 {
        let mut premapped = 0u32;
        for &(id, next_target) in candidates {
            if premapped >= budget_chunks {
                break;
            }
            let Ok(t) = self.tensor(id) else { continue };
            let slot_id = t.slot;
            let Ok(slot) = self.space.slot(slot_id) else { continue };
            if slot.mapped_chunks() >= next_target || next_target > slot.length_chunks() {
                continue;
            }
            let c = self.counters();
            if c.free_kv + c.free_act <= floor_free_total {
                break;
            }
            let Some(chunk) = self.free_kv.pop_first() else { break };
            let off = self.space.slot(slot_id).unwrap().mapped_chunks();
            self.space
                .map_chunk(slot_id, off, chunk, CostBucket::Background)
                .expect("premap target is the mapped tail");
            premapped += 1;
        }
        self.premapped_total += premapped as u64;
        premapped
    }

    pub fn drain_deferred(&mut self, budget: usize) -> usize {
        self.space.drain_deferred(budget)
    }

    /// Full structural audit; used by tests and the engine's checks.
    pub fn verify(&self) -> Result<(), String> {
        self.space.verify()?;
        let mut owner_counts = (0u32, 0u32);
        for i in 0..self.space.total_chunks() {
            match self.space.chunk_owner(ChunkId(i)) {
                PoolKind::Kv => owner_counts.0 += 1,
                PoolKind::Act => owner_counts.1 += 1,
            }
        }
        if owner_counts != (self.owned_kv, self.owned_act) {
            return Err(format!(
                "owner partition drift: registry {:?} vs counters {:?}",
                owner_counts,
                (self.owned_kv, self.owned_act)
            ));
        }
        if self.owned_kv + self.owned_act != self.space.total_chunks() {
            return Err("ownership labels do not partition the registry".into());
        }
        for c in &self.free_kv {
            if !self.space.chunk(*c).mapped_into.is_empty()
                || self.space.chunk_owner(*c) != PoolKind::Kv
            {
                return Err(format!("free_kv entry {c:?} mapped or mislabeled"));
            }
        }
        for c in &self.free_act {
            if !self.space.chunk(*c).mapped_into.is_empty()
                || self.space.chunk_owner(*c) != PoolKind::Act
            {
                return Err(format!("free_act entry {c:?} mapped or mislabeled"));
            }
        }
        let kv_sum: u64 = self.avail_kv.iter().map(|(m, _, _)| *m as u64).sum();
        let act_sum: u64 = self.avail_act.iter().map(|(m, _, _)| *m as u64).sum();
        if kv_sum != self.avail_kv_mapped || act_sum != self.avail_act_mapped {
            return Err("available-slot mapped totals drifted".into());
        }
        for (mapped, _, id) in &self.avail_kv {
            let s = self.space.slot(*id).map_err(|e| e.to_string())?;
            if s.state() != SlotState::Available || s.mapped_chunks() != *mapped {
                return Err(format!("avail_kv key stale for {id:?}"));
            }
        }
        for (len, base, id) in &self.avail_act {
            let s = self.space.slot(*id).map_err(|e| e.to_string())?;
            if s.state() != SlotState::Available
                || s.mapped_chunks() != *len
                || s.length_chunks() != *len
                || s.base() != *base
            {
                return Err(format!("avail_act key stale for {id:?}"));
            }
        }
        // every chunk is either in exactly one free list or mapped somewhere
        let mut mapped_count = 0u32;
        for i in 0..self.space.total_chunks() {
            let id = ChunkId(i);
            let mapped = !self.space.chunk(id).mapped_into.is_empty();
            let in_free = self.free_kv.contains(&id) || self.free_act.contains(&id);
            if mapped == in_free {
                return Err(format!("chunk {id:?} mapped={mapped} in_free={in_free}"));
            }
            if mapped {
                mapped_count += 1;
            }
        }
        if mapped_count + self.free_kv.len() as u32 + self.free_act.len() as u32
            != self.space.total_chunks()
        {
            return Err("chunk conservation failed".into());
        }
        for t in self.tensors.values() {
            let s = self.space.slot(t.slot).map_err(|e| e.to_string())?;
            if s.state() != SlotState::InUse {
                return Err(format!("live tensor {:?} on non-InUse slot", t.id));
            }
            if t.written_chunks > s.length_chunks() {
                return Err(format!("tensor {:?} written beyond span", t.id));
            }
        }
        Ok(())
    }
}
