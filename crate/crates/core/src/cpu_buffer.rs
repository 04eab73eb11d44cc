//! Host-DRAM elastic KV buffer.
//!
//! The physical buffer has a fixed capacity; a *logical* size (initialized
//! to 1 chunk) gates how much of it admission may use. Latency-violation
//! events scale the logical size: sustained TPOT violations halve it to
//! throttle offload-admitted prefills, sustained TTFT violations double it
//! to absorb queueing. Shrinking never evicts stored data — usage above the
//! logical size merely blocks new offloads until it drains.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BufferError {
    #[error("offload of {requested} chunks exceeds logical space {available}")]
    LogicalSpaceExceeded { requested: u32, available: u32 },
    #[error("request {0} has no KV stored in the buffer")]
    FetchWithoutReservation(u64),
}

#[derive(Debug, Clone)]
pub struct LogicalBuffer {
    capacity_chunks: u32,
    logical_chunks: u32,
    used_chunks: u32,
    alpha: u32,
    stored: BTreeMap<u64, u32>,
    pub offloaded_requests: u64,
    pub offloaded_chunks: u64,
    pub fetched_requests: u64,
    pub fetched_chunks: u64,
}

impl LogicalBuffer {
    pub fn new(capacity_chunks: u32, alpha: u32) -> Self {
        assert!(capacity_chunks >= 1);
        assert!(alpha >= 2);
        Self {
            capacity_chunks,
            logical_chunks: 1,
            used_chunks: 0,
            alpha,
            stored: BTreeMap::new(),
            offloaded_requests: 0,
            offloaded_chunks: 0,
            fetched_requests: 0,
            fetched_chunks: 0,
        }
    }

    pub fn capacity_chunks(&self) -> u32 {
        self.capacity_chunks
    }
    pub fn logical_chunks(&self) -> u32 {
        self.logical_chunks
    }
    pub fn used_chunks(&self) -> u32 {
        self.used_chunks
    }

    /// Space the admission scan may hand out this iteration.
    pub fn available_logical(&self) -> u32 {
        self.logical_chunks.saturating_sub(self.used_chunks)
    }

    /// Parks `kv_chunks` of a request's KV in the buffer.
    pub fn offload(&mut self, request: u64, kv_chunks: u32) -> Result<(), BufferError> {
        let available = self.available_logical();
        if kv_chunks > available {
            return Err(BufferError::LogicalSpaceExceeded {
                requested: kv_chunks,
                available,
            });
        }
        self.used_chunks += kv_chunks;
        self.stored.insert(request, kv_chunks);
        self.offloaded_requests += 1;
        self.offloaded_chunks += kv_chunks as u64;
        Ok(())
    }

    pub fn stored_chunks(&self, request: u64) -> Option<u32> {
        self.stored.get(&request).copied()
    }

    /// Pulls a request's KV back out; returns the transfer size in chunks.
    /// The caller is responsible for having reserved device space first.
    pub fn fetch(&mut self, request: u64) -> Result<u32, BufferError> {
        let chunks = self
            .stored
            .remove(&request)
            .ok_or(BufferError::FetchWithoutReservation(request))?;
        self.used_chunks -= chunks;
        self.fetched_requests += 1;
        self.fetched_chunks += chunks as u64;
        Ok(chunks)
    }

    /// Drops stored KV without a transfer (request finished while offloaded).
    pub fn discard(&mut self, request: u64) -> Result<u32, BufferError> {
        let chunks = self
            .stored
            .remove(&request)
            .ok_or(BufferError::FetchWithoutReservation(request))?;
        self.used_chunks -= chunks;
        Ok(chunks)
    }

    /// Applies one scaling step. TPOT violations win when both fire: the
    /// buffer never grows in an iteration that hurt decode latency.
    pub fn scale(&mut self, e_ttft: bool, e_tpot: bool) -> u32 {
        if e_tpot {
            self.logical_chunks = (self.logical_chunks / self.alpha).max(1);
        } else if e_ttft {
            self.logical_chunks = self
                .logical_chunks
                .saturating_mul(self.alpha)
                .min(self.capacity_chunks);
        }
        self.logical_chunks
    }
}

/// Sliding-window breach counter over recent iterations.
#[derive(Debug, Clone)]
pub struct ViolationDetector {
    window: usize,
    threshold_count: u32,
    slo_ttft: f64,
    slo_tpot: f64,
    recent: VecDeque<(u32, u32)>,
}

impl ViolationDetector {
    pub fn new(window: usize, threshold_count: u32, slo_ttft: f64, slo_tpot: f64) -> Self {
        assert!(window as u32 >= threshold_count && threshold_count >= 1);
        Self {
            window,
            threshold_count,
            slo_ttft,
            slo_tpot,
            recent: VecDeque::new(),
        }
    }

    /// Records one iteration's latency samples and reports whether the
    /// TTFT / TPOT violation events fire: an event is true iff at least
    /// `threshold_count` samples breached within the last `window`
    /// iterations.
    pub fn record_iteration(&mut self, ttfts: &[f64], tpots: &[f64]) -> (bool, bool) {
        let ttft_breaches = ttfts.iter().filter(|t| **t > self.slo_ttft).count() as u32;
        let tpot_breaches = tpots.iter().filter(|t| **t > self.slo_tpot).count() as u32;
        self.recent.push_back((ttft_breaches, tpot_breaches));
        while self.recent.len() > self.window {
            self.recent.pop_front();
        }
        let sums = self
            .recent
            .iter()
            .fold((0u32, 0u32), |acc, it| (acc.0 + it.0, acc.1 + it.1));
        (sums.0 >= self.threshold_count, sums.1 >= self.threshold_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offload_tracks_logical_space() {
        let mut buf = LogicalBuffer::new(64, 2);
        buf.logical_chunks = 20;
        buf.offload(1, 15).unwrap();
        assert_eq!(buf.used_chunks(), 15);
        assert_eq!(buf.available_logical(), 5);
        assert!(matches!(
            buf.offload(2, 6),
            Err(BufferError::LogicalSpaceExceeded { requested: 6, available: 5 })
        ));
    }

    #[test]
    fn fetch_restores_space_and_reports_chunks() {
        let mut buf = LogicalBuffer::new(64, 2);
        buf.logical_chunks = 32;
        buf.offload(7, 15).unwrap();
        let chunks = buf.fetch(7).unwrap();
        assert_eq!(chunks, 15);
        assert_eq!(buf.used_chunks(), 0);
        // round trip restores exact usage
        assert!(matches!(
            buf.fetch(7),
            Err(BufferError::FetchWithoutReservation(7))
        ));
    }

    #[test]
    fn scale_shrinks_on_tpot_with_floor() {
        let mut buf = LogicalBuffer::new(64, 2);
        buf.logical_chunks = 8;
        assert_eq!(buf.scale(false, true), 4);
        buf.logical_chunks = 1;
        assert_eq!(buf.scale(false, true), 1);
    }

    #[test]
    fn scale_grows_on_ttft_capped_at_capacity() {
        let mut buf = LogicalBuffer::new(16, 2);
        buf.logical_chunks = 4;
        assert_eq!(buf.scale(true, false), 8);
        assert_eq!(buf.scale(true, false), 16);
        assert_eq!(buf.scale(true, false), 16);
    }

    #[test]
    fn tpot_takes_priority_and_shrink_never_evicts() {
        let mut buf = LogicalBuffer::new(64, 2);
        buf.logical_chunks = 16;
        buf.offload(1, 10).unwrap();
        assert_eq!(buf.scale(true, true), 8);
        assert_eq!(buf.used_chunks(), 10); // above logical, still stored
        assert_eq!(buf.available_logical(), 0); // new offloads blocked
        assert_eq!(buf.stored_chunks(1), Some(10));
    }

    #[test]
    fn detector_three_breaches_in_window() {
        let mut det = ViolationDetector::new(5, 3, 1.0, 0.1);
        assert_eq!(det.record_iteration(&[], &[]), (false, false));
        det.record_iteration(&[], &[0.2]);
        det.record_iteration(&[], &[0.2]);
        let (e_ttft, e_tpot) = det.record_iteration(&[], &[0.2]);
        assert!(!e_ttft);
        assert!(e_tpot);
    }

    #[test]
    fn detector_two_breaches_stay_quiet_and_window_slides() {
        let mut det = ViolationDetector::new(5, 3, 1.0, 0.1);
        det.record_iteration(&[2.0], &[]);
        let (e_ttft, _) = det.record_iteration(&[2.0], &[]);
        assert!(!e_ttft); // two breaches are below the threshold
        for _ in 0..5 {
            let (e_ttft, _) = det.record_iteration(&[], &[]);
            assert!(!e_ttft);
        }
        // the early breaches have slid out; a fresh pair still stays quiet
        det.record_iteration(&[2.0, 2.0], &[]);
        let (e_ttft, _) = det.record_iteration(&[], &[]);
        assert!(!e_ttft);
    }

    #[test]
    fn detector_counts_samples_not_iterations() {
        let mut det = ViolationDetector::new(5, 3, 1.0, 0.1);
        // one iteration with three breaching samples fires immediately
        let (_, e_tpot) = det.record_iteration(&[], &[0.5, 0.5, 0.5]);
        assert!(e_tpot);
    }
}
