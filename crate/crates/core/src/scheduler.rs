//! Iteration-level admission planning.
//!
//! Each iteration the engine snapshots pool counters and asks for a plan:
//! which requests run, which of them spill KV to the host buffer, and how
//! many chunks must change ownership (the ballooning directive) so that the
//! admitted demands are covered. Planning is pure — it never mutates pools —
//! and every admitted request has its full iteration demand accounted, so
//! execution can reserve everything up front and no admitted request ever
//! waits holding partial resources.
//!
//! The scan is FCFS and stops at the first request that does not fit: the
//! admitted set is always a prefix of the queue.

use serde::Serialize;

use crate::pools::PoolCounters;

#[derive(Debug, Clone)]
pub struct SchedulerConfig {
    /// Reserved headroom in chunks (memory threshold).
    pub headroom_chunks: u32,
    /// Prefer a prefill iteration whenever one can admit a request.
    pub prefill_prioritized: bool,
}

/// Per-request chunk demands for a prefill scan.
#[derive(Debug, Clone, Copy)]
pub struct PrefillRequest {
    pub id: u64,
    /// Device KV chunks needed when admitted on-device.
    pub kv_chunks: u32,
    pub act_chunks: u32,
}

/// Per-request chunk demands for a decode scan. For device-resident
/// sequences `kv_chunks` is just the boundary-crossing growth (usually 0 or
/// 1); for buffered sequences it is the full resident size plus growth.
#[derive(Debug, Clone, Copy)]
pub struct DecodeRequest {
    pub id: u64,
    pub kv_chunks: u32,
    pub act_chunks: u32,
    pub needs_fetch: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

/// The scheduler's output for one iteration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IterationPlan {
    pub batch: Vec<u64>,
    pub offloads: Vec<u64>,
    pub fetches: Vec<u64>,
    /// Signed chunk transfer: > 0 moves act->kv (inflation), < 0 kv->act.
    pub inflation: i64,
    pub m_kv: u32,
    pub m_act: u32,
}

/// `I = M_kv - P_kv` when the KV side is short and the activation side has
/// surplus; `I = P_act - M_act` (negative) in the mirrored case; else 0.
pub fn ballooning_directive(counters: PoolCounters, m_kv: u32, m_act: u32) -> i64 {
    let (p_kv, p_act) = (counters.free_kv as i64, counters.free_act as i64);
    let (m_kv, m_act) = (m_kv as i64, m_act as i64);
    if p_kv < m_kv && p_act > m_act {
        m_kv - p_kv
    } else if p_act < m_act && p_kv > m_kv {
        p_act - m_act
    } else {
        0
    }
}

/// Scans the waiting queue in order. A request is admitted fully on-device
/// when total demand plus headroom fits; failing that it is admitted with
/// its KV offloaded if the activation demand alone fits and the host buffer
/// has logical space; otherwise the scan stops.
pub fn plan_prefill(
    cfg: &SchedulerConfig,
    counters: PoolCounters,
    queue: &[PrefillRequest],
    buffer_space: u32,
) -> IterationPlan {
    let total = counters.total as i64;
    let theta = cfg.headroom_chunks as i64;
    let mut plan = IterationPlan::default();
    let mut p_b = buffer_space;
    for r in queue {
        let (m_kv, m_act) = (plan.m_kv as i64, plan.m_act as i64);
        if total - (m_kv + m_act + r.kv_chunks as i64 + r.act_chunks as i64) >= theta {
            plan.batch.push(r.id);
            plan.m_kv += r.kv_chunks;
            plan.m_act += r.act_chunks;
        } else if total - (m_kv + m_act + r.act_chunks as i64) >= theta && r.kv_chunks <= p_b {
            plan.batch.push(r.id);
            plan.offloads.push(r.id);
            plan.m_act += r.act_chunks;
            p_b -= r.kv_chunks;
        } else {
            break;
        }
    }
    plan.inflation = ballooning_directive(counters, plan.m_kv, plan.m_act);
    plan
}

/// Scans decodable requests in order, admitting while total demand plus
/// headroom fits; buffered requests that are admitted join the fetch set.
pub fn plan_decode(
    cfg: &SchedulerConfig,
    counters: PoolCounters,
    queue: &[DecodeRequest],
) -> IterationPlan {
    let total = counters.total as i64;
    let theta = cfg.headroom_chunks as i64;
    let mut plan = IterationPlan::default();
    for r in queue {
        let (m_kv, m_act) = (plan.m_kv as i64, plan.m_act as i64);
        if total - (m_kv + m_act + r.kv_chunks as i64 + r.act_chunks as i64) >= theta {
            plan.batch.push(r.id);
            if r.needs_fetch {
                plan.fetches.push(r.id);
            }
            plan.m_kv += r.kv_chunks;
            plan.m_act += r.act_chunks;
        } else {
            break;
        }
    }
    plan.inflation = ballooning_directive(counters, plan.m_kv, plan.m_act);
    plan
}

/// Phase policy: run a prefill iteration whenever the prefill plan admits
/// at least one request; otherwise decode. Decode-side pressure is handled
/// by the buffer scaling policy, not by overriding the phase.
pub fn select_phase(prefill_plan: &IterationPlan) -> Phase {
    if !prefill_plan.batch.is_empty() {
        Phase::Prefill
    } else {
        Phase::Decode
    }
}
