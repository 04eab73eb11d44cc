//! Emulated GPU virtual-memory layer.
//!
//! Physical memory is a fixed registry of chunks; tensors see contiguous
//! virtual spans (tensor slots) whose per-offset mapping to chunks is
//! mutable at runtime. No real memory is reserved anywhere — the whole
//! layer is mapping metadata plus exact cost accounting, which is all the
//! simulator needs.
//!
//! A chunk may be mapped into two slots at once, but only while an entry
//! for the old slot sits on the deferred-unmap queue: that is how an
//! overlapped remap keeps the new slot immediately usable while the old
//! mapping is torn down off the critical path.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChunkId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotId(pub u32);

/// Which pool a chunk currently belongs to. Every chunk carries exactly one
/// owner label at all times; inflation/deflation relabel without moving data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Kv,
    Act,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    /// Mapped (possibly partially) but not owned by a live tensor; reusable.
    Available,
    /// Owned by a live tensor.
    InUse,
    /// Fully migrated away; waiting for its deferred unmaps to drain.
    PendingUnmap,
}

/// Whether a mapping operation's cost lands on the iteration critical path
/// or in the overlapped/background bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostBucket {
    Critical,
    Background,
}

#[derive(Debug, Clone)]
pub struct PhysicalChunk {
    pub owner: PoolKind,
    /// Slots whose page tables still reference this chunk (<= 2).
    pub mapped_into: Vec<SlotId>,
}

/// A chunk-aligned contiguous virtual span.
#[derive(Debug, Clone)]
pub struct TensorSlot {
    id: SlotId,
    base: u64,
    length_chunks: u32,
    kind: PoolKind,
    state: SlotState,
    mapping: Vec<Option<ChunkId>>,
    mapped: u32,
}

impl TensorSlot {
    pub fn id(&self) -> SlotId {
        self.id
    }
    pub fn base(&self) -> u64 {
        self.base
    }
    pub fn length_chunks(&self) -> u32 {
        self.length_chunks
    }
    pub fn kind(&self) -> PoolKind {
        self.kind
    }
    pub fn state(&self) -> SlotState {
        self.state
    }
    pub fn mapped_chunks(&self) -> u32 {
        self.mapped
    }
    pub fn chunk_at(&self, offset: u32) -> Option<ChunkId> {
        self.mapping.get(offset as usize).copied().flatten()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VmmError {
    #[error("slot {0:?} not found")]
    SlotNotFound(SlotId),
    #[error("offset {offset} out of range for slot of {length} chunks")]
    OffsetOutOfRange { offset: u32, length: u32 },
    #[error("non-contiguous KV write: offset {offset}, mapped prefix {prefix}")]
    NonContiguousKvWrite { offset: u32, prefix: u32 },
    #[error("offset {0} already mapped")]
    AlreadyMapped(u32),
    #[error("chunk {0:?} is busy (already mapped)")]
    ChunkBusy(ChunkId),
    #[error("chunk {chunk:?} not mapped in slot {slot:?} at offset {offset}")]
    ChunkNotMapped {
        slot: SlotId,
        chunk: ChunkId,
        offset: u32,
    },
    #[error("destination slot capacity exceeded")]
    CapacityExceeded,
    #[error("slot {0:?} is in use")]
    SlotInUse(SlotId),
    #[error("virtual address space exhausted")]
    VirtualExhausted,
}

/// Exact operation counters. `critical_ns + background_ns` always equals
/// `map_count * map_cost_ns + unmap_count * unmap_cost_ns`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VmmStats {
    pub map_count: u64,
    pub unmap_count: u64,
    pub critical_ns: u64,
    pub background_ns: u64,
}

impl VmmStats {
    pub fn critical_s(&self) -> f64 {
        self.critical_ns as f64 * 1e-9
    }
    pub fn background_s(&self) -> f64 {
        self.background_ns as f64 * 1e-9
    }
}

#[derive(Debug, Clone, Copy)]
struct Deferred {
    slot: SlotId,
    chunk: ChunkId,
}

/// One virtual address space: all live slots, the chunk registry, and the
/// deferred-unmap queue. Single logical owner; callers serialize access.
#[derive(Debug)]
pub struct AddressSpace {
    chunk_bytes: u64,
    map_cost_ns: u64,
    unmap_cost_ns: u64,
    virtual_ceiling: Option<u64>,
    next_base: u64,
    next_slot: u32,
    slots: BTreeMap<SlotId, TensorSlot>,
    chunks: Vec<PhysicalChunk>,
    deferred: VecDeque<Deferred>,
    stats: VmmStats,
}

impl AddressSpace {
    pub fn new(chunk_bytes: u64, map_cost_s: f64, unmap_cost_s: f64) -> Self {
        assert!(chunk_bytes.is_power_of_two());
        Self {
            chunk_bytes,
            map_cost_ns: (map_cost_s * 1e9).round() as u64,
            unmap_cost_ns: (unmap_cost_s * 1e9).round() as u64,
            virtual_ceiling: None,
            next_base: 0,
            next_slot: 0,
            slots: BTreeMap::new(),
            chunks: Vec::new(),
            deferred: VecDeque::new(),
            stats: VmmStats::default(),
        }
    }

    pub fn with_virtual_ceiling(mut self, ceiling_bytes: u64) -> Self {
        self.virtual_ceiling = Some(ceiling_bytes);
        self
    }

    /// Registers `n` new physical chunks under `owner`; returns their ids.
    pub fn add_chunks(&mut self, owner: PoolKind, n: u32) -> Vec<ChunkId> {
        let start = self.chunks.len() as u32;
        for _ in 0..n {
            self.chunks.push(PhysicalChunk {
                owner,
                mapped_into: Vec::new(),
            });
        }
        (start..start + n).map(ChunkId).collect()
    }

    pub fn chunk_bytes(&self) -> u64 {
        self.chunk_bytes
    }
    pub fn total_chunks(&self) -> u32 {
        self.chunks.len() as u32
    }
    pub fn stats(&self) -> VmmStats {
        self.stats
    }
    pub fn deferred_len(&self) -> usize {
        self.deferred.len()
    }

    pub fn chunk(&self, id: ChunkId) -> &PhysicalChunk {
        &self.chunks[id.0 as usize]
    }

    pub fn chunk_owner(&self, id: ChunkId) -> PoolKind {
        self.chunks[id.0 as usize].owner
    }

    pub fn set_chunk_owner(&mut self, id: ChunkId, owner: PoolKind) {
        self.chunks[id.0 as usize].owner = owner;
    }

    pub fn slot(&self, id: SlotId) -> Result<&TensorSlot, VmmError> {
        self.slots.get(&id).ok_or(VmmError::SlotNotFound(id))
    }

    pub fn slots(&self) -> impl Iterator<Item = &TensorSlot> {
        self.slots.values()
    }

    pub fn set_state(&mut self, id: SlotId, state: SlotState) -> Result<(), VmmError> {
        let slot = self.slots.get_mut(&id).ok_or(VmmError::SlotNotFound(id))?;
        slot.state = state;
        Ok(())
    }

    /// Reserves a fresh non-overlapping chunk-aligned span. Consumes no
    /// physical chunks.
    pub fn reserve_span(&mut self, length_chunks: u32, kind: PoolKind) -> Result<SlotId, VmmError> {
        assert!(length_chunks >= 1);
        let bytes = length_chunks as u64 * self.chunk_bytes;
        if let Some(ceiling) = self.virtual_ceiling {
            if self.next_base + bytes > ceiling {
                return Err(VmmError::VirtualExhausted);
            }
        }
        let id = SlotId(self.next_slot);
        self.next_slot += 1;
        let slot = TensorSlot {
            id,
            base: self.next_base,
            length_chunks,
            kind,
            state: SlotState::Available,
            mapping: vec![None; length_chunks as usize],
            mapped: 0,
        };
        self.next_base += bytes;
        self.slots.insert(id, slot);
        Ok(id)
    }

    fn charge_map(&mut self, bucket: CostBucket) {
        self.stats.map_count += 1;
        match bucket {
            CostBucket::Critical => self.stats.critical_ns += self.map_cost_ns,
            CostBucket::Background => self.stats.background_ns += self.map_cost_ns,
        }
    }

    fn charge_unmap(&mut self, bucket: CostBucket) {
        self.stats.unmap_count += 1;
        match bucket {
            CostBucket::Critical => self.stats.critical_ns += self.unmap_cost_ns,
            CostBucket::Background => self.stats.background_ns += self.unmap_cost_ns,
        }
    }

    /// Maps a free chunk at `offset` of `slot`. KV slots only accept the
    /// first unmapped tail position, preserving logical continuity.
    pub fn map_chunk(
        &mut self,
        slot_id: SlotId,
        offset: u32,
        chunk: ChunkId,
        bucket: CostBucket,
    ) -> Result<(), VmmError> {
        let slot = self
            .slots
            .get(&slot_id)
            .ok_or(VmmError::SlotNotFound(slot_id))?;
        if offset >= slot.length_chunks {
            return Err(VmmError::OffsetOutOfRange {
                offset,
                length: slot.length_chunks,
            });
        }
        if slot.kind == PoolKind::Kv && offset != slot.mapped {
            return Err(VmmError::NonContiguousKvWrite {
                offset,
                prefix: slot.mapped,
            });
        }
        if slot.mapping[offset as usize].is_some() {
            return Err(VmmError::AlreadyMapped(offset));
        }
        if !self.chunks[chunk.0 as usize].mapped_into.is_empty() {
            return Err(VmmError::ChunkBusy(chunk));
        }
        let slot = self.slots.get_mut(&slot_id).unwrap();
        slot.mapping[offset as usize] = Some(chunk);
        slot.mapped += 1;
        self.chunks[chunk.0 as usize].mapped_into.push(slot_id);
        self.charge_map(bucket);
        Ok(())
    }

    /// Moves the chunks at `offsets` of `from` onto the tail of `to`,
    /// keeping the physical pages referenced by both spans until the old
    /// entries drain from the deferred-unmap queue. The new slot is usable
    /// immediately; only the map half of the move is charged here.
    pub fn remap_overlapped(
        &mut self,
        from: SlotId,
        to: SlotId,
        offsets: &[u32],
    ) -> Result<(), VmmError> {
        if offsets.is_empty() {
            return Ok(());
        }
        {
            let from_slot = self.slots.get(&from).ok_or(VmmError::SlotNotFound(from))?;
            let to_slot = self.slots.get(&to).ok_or(VmmError::SlotNotFound(to))?;
            if to_slot.mapped + offsets.len() as u32 > to_slot.length_chunks {
                return Err(VmmError::CapacityExceeded);
            }
            for &off in offsets {
                if off >= from_slot.length_chunks {
                    return Err(VmmError::OffsetOutOfRange {
                        offset: off,
                        length: from_slot.length_chunks,
                    });
                }
                if from_slot.mapping[off as usize].is_none() {
                    return Err(VmmError::ChunkNotMapped {
                        slot: from,
                        chunk: ChunkId(u32::MAX),
                        offset: off,
                    });
                }
            }
        }
        for &off in offsets {
            let from_slot = self.slots.get_mut(&from).unwrap();
            let chunk = from_slot.mapping[off as usize].take().unwrap();
            from_slot.mapped -= 1;
            // a chunk may hold at most two page-table entries; if an older
            // overlapped remap is still pending for it, finish that unmap
            // now (on the critical path) before re-mapping it again
            if self.chunks[chunk.0 as usize].mapped_into.len() == 2 {
                let idx = self
                    .deferred
                    .iter()
                    .position(|d| d.chunk == chunk)
                    .expect("second mapping implies a deferred entry");
                let stale = self.deferred.remove(idx).unwrap();
                self.complete_unmap(stale, CostBucket::Critical);
            }
            let to_slot = self.slots.get_mut(&to).unwrap();
            let tail = to_slot.mapped;
            debug_assert!(to_slot.mapping[tail as usize].is_none());
            to_slot.mapping[tail as usize] = Some(chunk);
            to_slot.mapped += 1;
            self.chunks[chunk.0 as usize].mapped_into.push(to);
            debug_assert!(self.chunks[chunk.0 as usize].mapped_into.len() <= 2);
            self.deferred.push_back(Deferred { slot: from, chunk });
            self.charge_map(CostBucket::Critical);
        }
        Ok(())
    }

    /// Detaches a deferred entry's old mapping and retires its slot once
    /// nothing references it anymore.
    fn complete_unmap(&mut self, entry: Deferred, bucket: CostBucket) {
        let rec = &mut self.chunks[entry.chunk.0 as usize];
        rec.mapped_into.retain(|s| *s != entry.slot);
        self.charge_unmap(bucket);
        let retire = match self.slots.get(&entry.slot) {
            Some(s) => {
                s.state == SlotState::PendingUnmap
                    && s.mapped == 0
                    && !self.deferred.iter().any(|d| d.slot == entry.slot)
            }
            None => false,
        };
        if retire {
            self.slots.remove(&entry.slot);
        }
    }

    /// Processes up to `budget` deferred unmaps, charging their cost to the
    /// background bucket. Fully drained `PendingUnmap` slots are retired.
    pub fn drain_deferred(&mut self, budget: usize) -> usize {
        let mut drained = 0;
        while drained < budget {
            let Some(entry) = self.deferred.pop_front() else {
                break;
            };
            self.complete_unmap(entry, CostBucket::Background);
            drained += 1;
        }
        drained
    }

    /// Finishes any in-flight deferred unmaps that still reference `chunk`
    /// from a slot other than `keep`; the cost lands on the critical path.
    fn settle_foreign_pending(&mut self, chunk: ChunkId, keep: SlotId) {
        while let Some(idx) = self
            .deferred
            .iter()
            .position(|d| d.chunk == chunk && d.slot != keep)
        {
            let entry = self.deferred.remove(idx).unwrap();
            self.complete_unmap(entry, CostBucket::Critical);
        }
    }

    /// Synchronously unmaps everything in `slot` and retires it. Pending
    /// unmaps touching the slot's chunks are settled first, so every chunk
    /// of the slot comes back free.
    pub fn unmap_slot(&mut self, slot_id: SlotId) -> Result<Vec<ChunkId>, VmmError> {
        let slot = self
            .slots
            .get(&slot_id)
            .ok_or(VmmError::SlotNotFound(slot_id))?;
        if slot.state == SlotState::InUse {
            return Err(VmmError::SlotInUse(slot_id));
        }
        let mapped: Vec<ChunkId> = slot.mapping.iter().copied().flatten().collect();
        let mut freed = Vec::with_capacity(mapped.len());
        for chunk in mapped {
            self.settle_foreign_pending(chunk, slot_id);
            let rec = &mut self.chunks[chunk.0 as usize];
            rec.mapped_into.retain(|s| *s != slot_id);
            debug_assert!(rec.mapped_into.is_empty());
            self.charge_unmap(CostBucket::Critical);
            freed.push(chunk);
        }
        // entries naming this slot as a chunk's pending old home
        let mut stale = Vec::new();
        self.deferred.retain(|d| {
            if d.slot == slot_id {
                stale.push(d.chunk);
                false
            } else {
                true
            }
        });
        for chunk in stale {
            let rec = &mut self.chunks[chunk.0 as usize];
            rec.mapped_into.retain(|s| *s != slot_id);
            self.charge_unmap(CostBucket::Critical);
        }
        self.slots.remove(&slot_id);
        Ok(freed)
    }

    /// Unmaps the last `count` chunks of a slot's mapped prefix, returning
    /// them as free. Used to trim excess mapping off a reused slot.
    pub fn unmap_tail(&mut self, slot_id: SlotId, count: u32) -> Result<Vec<ChunkId>, VmmError> {
        let slot = self
            .slots
            .get_mut(&slot_id)
            .ok_or(VmmError::SlotNotFound(slot_id))?;
        assert!(count <= slot.mapped, "cannot trim more than mapped");
        let mut freed = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let off = (slot.mapped - 1) as usize;
            let chunk = slot.mapping[off].take().unwrap();
            slot.mapped -= 1;
            freed.push(chunk);
        }
        for &chunk in &freed {
            self.settle_foreign_pending(chunk, slot_id);
            let rec = &mut self.chunks[chunk.0 as usize];
            rec.mapped_into.retain(|s| *s != slot_id);
            debug_assert!(rec.mapped_into.is_empty());
            self.charge_unmap(CostBucket::Critical);
        }
        Ok(freed)
    }

    /// Splits an `Available` slot into a head of `head_len` chunks (keeps
    /// the original id) and a fresh tail slot; pure metadata, no cost.
    pub fn split_slot(&mut self, slot_id: SlotId, head_len: u32) -> Result<SlotId, VmmError> {
        let slot = self
            .slots
            .get_mut(&slot_id)
            .ok_or(VmmError::SlotNotFound(slot_id))?;
        assert!(head_len >= 1 && head_len < slot.length_chunks);
        let tail_mapping: Vec<Option<ChunkId>> = slot.mapping.split_off(head_len as usize);
        let tail_mapped = tail_mapping.iter().flatten().count() as u32;
        slot.mapped -= tail_mapped;
        let tail_base = slot.base + head_len as u64 * self.chunk_bytes;
        let tail_len = slot.length_chunks - head_len;
        slot.length_chunks = head_len;
        let kind = slot.kind;
        let state = slot.state;
        let tail_id = SlotId(self.next_slot);
        self.next_slot += 1;
        for chunk in tail_mapping.iter().copied().flatten() {
            let rec = &mut self.chunks[chunk.0 as usize];
            for s in rec.mapped_into.iter_mut() {
                if *s == slot_id {
                    *s = tail_id;
                }
            }
        }
        self.slots.insert(
            tail_id,
            TensorSlot {
                id: tail_id,
                base: tail_base,
                length_chunks: tail_len,
                kind,
                state,
                mapping: tail_mapping,
                mapped: tail_mapped,
            },
        );
        Ok(tail_id)
    }

    /// Merges two virtually adjacent `Available` slots of the same kind
    /// into the first; pure metadata, no cost. Returns the surviving id.
    pub fn merge_adjacent(&mut self, first: SlotId, second: SlotId) -> Result<SlotId, VmmError> {
        let (a_base, a_len, a_kind) = {
            let a = self.slots.get(&first).ok_or(VmmError::SlotNotFound(first))?;
            (a.base, a.length_chunks, a.kind)
        };
        let b = self
            .slots
            .get(&second)
            .ok_or(VmmError::SlotNotFound(second))?;
        assert_eq!(a_kind, b.kind);
        assert_eq!(a_base + a_len as u64 * self.chunk_bytes, b.base);
        let b = self.slots.remove(&second).unwrap();
        for chunk in b.mapping.iter().copied().flatten() {
            let rec = &mut self.chunks[chunk.0 as usize];
            for s in rec.mapped_into.iter_mut() {
                if *s == second {
                    *s = first;
                }
            }
        }
        let a = self.slots.get_mut(&first).unwrap();
        a.length_chunks += b.length_chunks;
        a.mapped += b.mapped;
        a.mapping.extend(b.mapping);
        Ok(first)
    }

    /// Structural invariant check used by tests and the simulation engine's
    /// paranoid mode. Returns a description of the first violation found.
    pub fn verify(&self) -> Result<(), String> {
        // no two slots overlap
        let mut spans: Vec<(u64, u64, SlotId)> = self
            .slots
            .values()
            .map(|s| (s.base, s.base + s.length_chunks as u64 * self.chunk_bytes, s.id))
            .collect();
        spans.sort();
        for w in spans.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(format!("slots {:?} and {:?} overlap", w[0].2, w[1].2));
            }
        }
        for s in self.slots.values() {
            if s.base % self.chunk_bytes != 0 {
                return Err(format!("slot {:?} base not chunk-aligned", s.id));
            }
            if s.mapped != s.mapping.iter().flatten().count() as u32 {
                return Err(format!("slot {:?} mapped count drift", s.id));
            }
            if s.kind == PoolKind::Kv && s.state != SlotState::PendingUnmap {
                // prefix-contiguity for live KV slots
                let prefix = s.mapping.iter().take_while(|m| m.is_some()).count() as u32;
                if prefix != s.mapped {
                    return Err(format!("KV slot {:?} mapping has holes", s.id));
                }
            }
        }
        // single pass building the slot-side view of chunk references, then
        // compare against each chunk's mapped_into
        let mut slot_refs: Vec<[Option<SlotId>; 2]> = vec![[None; 2]; self.chunks.len()];
        for s in self.slots.values() {
            for chunk in s.mapping.iter().flatten() {
                let refs = &mut slot_refs[chunk.0 as usize];
                if refs[0].is_none() {
                    refs[0] = Some(s.id);
                } else if refs[1].is_none() {
                    refs[1] = Some(s.id);
                } else {
                    return Err(format!("chunk {chunk:?} referenced by >2 slot mappings"));
                }
            }
        }
        let mut deferred_refs: std::collections::HashSet<(SlotId, ChunkId)> =
            std::collections::HashSet::new();
        let mut deferred_chunks: std::collections::HashSet<ChunkId> =
            std::collections::HashSet::new();
        for d in &self.deferred {
            deferred_refs.insert((d.slot, d.chunk));
            deferred_chunks.insert(d.chunk);
        }
        for (i, c) in self.chunks.iter().enumerate() {
            let id = ChunkId(i as u32);
            if c.mapped_into.len() > 2 {
                return Err(format!("chunk {i} mapped into {} slots", c.mapped_into.len()));
            }
            if c.mapped_into.len() > 1 && !deferred_chunks.contains(&id) {
                return Err(format!("chunk {i} multi-mapped without deferred entry"));
            }
            for slot_id in &c.mapped_into {
                if !slot_refs[i].contains(&Some(*slot_id))
                    && !deferred_refs.contains(&(*slot_id, id))
                {
                    return Err(format!("chunk {i} references slot {slot_id:?} with no mapping"));
                }
            }
        }
        let expect = self.stats.map_count * self.map_cost_ns + self.stats.unmap_count * self.unmap_cost_ns;
        if self.stats.critical_ns + self.stats.background_ns != expect {
            return Err("accounting drift: cost != counts * per-op costs".into());
        }
        Ok(())
    }
}
