//! Run metrics: per-request latencies, aggregates, and time series.

use serde::Serialize;

use crate::scheduler::Phase;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RequestMetrics {
    pub id: u64,
    pub arrival_s: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub ttft_s: f64,
    pub tpot_s: f64,
    pub finish_s: f64,
    pub was_offloaded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StatSummary {
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
    pub max: f64,
}

impl StatSummary {
    /// Deterministic nearest-rank percentiles over the given samples.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self {
                mean: 0.0,
                p50: 0.0,
                p99: 0.0,
                max: 0.0,
            };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let rank = |q: f64| {
            let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
            sorted[idx - 1]
        };
        Self {
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50: rank(0.50),
            p99: rank(0.99),
            max: *sorted.last().unwrap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SloSpec {
    pub ttft_s: f64,
    pub tpot_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SloOutcome {
    pub ttft_s: f64,
    pub tpot_s: f64,
    /// Fraction of requests meeting both targets.
    pub attainment: f64,
}

/// Pool / transfer / buffer counters accumulated over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PoolsSummary {
    pub total_chunks: u32,
    pub inflate_events: u64,
    pub inflated_chunks: u64,
    pub deflate_events: u64,
    pub deflated_chunks: u64,
    pub offloaded_requests: u64,
    pub offloaded_chunks: u64,
    pub fetched_requests: u64,
    pub fetched_chunks: u64,
    pub premapped_chunks: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct VmmSummary {
    pub map_count: u64,
    pub unmap_count: u64,
    pub critical_s: f64,
    pub background_s: f64,
    /// Critical-path mapping time as a fraction of the makespan.
    pub share_of_makespan: f64,
}

/// One sampled point of the memory-utilization time series, taken at each
/// iteration boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub time_s: f64,
    pub phase: Phase,
    pub batch: u32,
    pub kv_used_chunks: u32,
    pub act_used_chunks: u32,
    pub kv_owned_chunks: u32,
    pub act_owned_chunks: u32,
    pub free_chunks: u32,
    pub buffer_logical_chunks: u32,
    pub buffer_used_chunks: u32,
    pub waiting: u32,
    pub running: u32,
}

/// Per-iteration scheduling decision, logged for audit as JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanRecord {
    pub iteration: u64,
    pub time_s: f64,
    pub phase: Phase,
    pub batch: Vec<u64>,
    pub offloads: Vec<u64>,
    pub fetches: Vec<u64>,
    pub inflation: i64,
    pub m_kv: u32,
    pub m_act: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub mode: String,
    pub seed: u64,
    pub iterations: u64,
    pub makespan_s: f64,
    pub requests: Vec<RequestMetrics>,
    pub ttft: StatSummary,
    pub tpot: StatSummary,
    /// All generated tokens divided by the makespan.
    pub output_throughput_tps: f64,
    /// Tokens generated in decode iterations divided by decode time.
    pub decode_throughput_tps: f64,
    pub max_decode_batch: u32,
    pub slo: Option<SloOutcome>,
    pub pools: PoolsSummary,
    pub vmm: VmmSummary,
    pub series: Vec<SeriesPoint>,
}

impl Report {
    pub fn series_csv(&self) -> String {
        let mut out = String::from(
            "time_s,phase,batch,kv_used_chunks,act_used_chunks,kv_owned_chunks,\
             act_owned_chunks,free_chunks,buffer_logical_chunks,buffer_used_chunks,\
             waiting,running\n",
        );
        for p in &self.series {
            let phase = match p.phase {
                Phase::Prefill => "prefill",
                Phase::Decode => "decode",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                p.time_s,
                phase,
                p.batch,
                p.kv_used_chunks,
                p.act_used_chunks,
                p.kv_owned_chunks,
                p.act_owned_chunks,
                p.free_chunks,
                p.buffer_logical_chunks,
                p.buffer_used_chunks,
                p.waiting,
                p.running,
            ));
        }
        out
    }
}
