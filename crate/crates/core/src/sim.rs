//! Deterministic discrete-event serving engine.
//!
//! One iteration = one scheduling decision plus one batched model step.
//! The engine snapshots pool counters, plans admission, executes the plan
//! against the pools / host buffer (reserving everything an admitted
//! request needs before any of it runs), charges cost-model time to the
//! clock, and samples metrics. Elastic mode rebalances chunk ownership and
//! spills prefill KV to the host buffer; static mode fixes the partition at
//! startup, reserves each request's full-lifetime KV at admission, and
//! never transfers or offloads.
//!
//! Decode scans admit zero-demand sequences first (their next chunk is
//! already mapped, often by speculative pre-mapping), then growing ones,
//! then buffered ones awaiting fetch. Since activation chunks return to the
//! pool after every iteration, an admitting iteration always leaves
//! strictly more than the reserved headroom free, so the scan can always
//! admit at least one resident sequence on the next pass.

use std::collections::VecDeque;

use thiserror::Error;

use crate::cpu_buffer::{BufferError, LogicalBuffer, ViolationDetector};
use crate::footprint::{
    DeviceSpec, FootprintError, ModelSpec, act_bytes_per_token, activation_bytes,
    decode_step_latency, kv_bytes_per_token, offload_overlap_delay, prefill_latency,
    transfer_time, weights_bytes,
};
use crate::pools::{ETensorId, PoolError, UnifiedPhysicalPool};
use crate::report::{
    PlanRecord, PoolsSummary, Report, RequestMetrics, SeriesPoint, SloOutcome, SloSpec,
    StatSummary, VmmSummary,
};
use crate::scheduler::{
    DecodeRequest, IterationPlan, Phase, PrefillRequest, SchedulerConfig, plan_decode,
    plan_prefill, select_phase,
};
use crate::workload::{RequestSeed, WorkloadError, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Elastic,
    Static,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Elastic => "elastic",
            Mode::Static => "static",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SchedulerParams {
    /// Reserved headroom θ in chunks; defaults to 2% of the pool.
    pub headroom_chunks: Option<u32>,
    pub prefill_prioritized: bool,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        Self {
            headroom_chunks: None,
            prefill_prioritized: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BufferParams {
    pub capacity_chunks: u32,
    pub alpha: u32,
    pub window: usize,
    pub threshold_count: u32,
}

impl Default for BufferParams {
    fn default() -> Self {
        Self {
            capacity_chunks: 8192,
            alpha: 2,
            window: 5,
            threshold_count: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub model: ModelSpec,
    pub device: DeviceSpec,
    pub scheduler: SchedulerParams,
    pub buffer: BufferParams,
    pub slo: Option<SloSpec>,
    pub mode: Mode,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Footprint(#[from] FootprintError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("reservation completeness breach: {0}")]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error("invariant breach: {0}")]
    InvariantBreach(String),
    #[error("no progress possible: {0}")]
    NoProgress(String),
    #[error("{0}")]
    BadArguments(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReqState {
    Queued,
    Decoding,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Residency {
    Gpu,
    Cpu,
}

#[derive(Debug)]
struct SimRequest {
    arrival: f64,
    input_tokens: u64,
    output_tokens: u64,
    state: ReqState,
    residency: Residency,
    generated: u64,
    first_token: Option<f64>,
    finish: Option<f64>,
    token_times: Vec<f64>,
    kv: Option<ETensorId>,
    was_offloaded: bool,
}

impl SimRequest {
    /// Tokens whose KV must be resident before the next step: the prompt
    /// plus every already-consumed output token.
    fn kv_tokens(&self) -> u64 {
        self.input_tokens + self.generated.saturating_sub(1)
    }

    /// KV tokens at finish; the span must be able to hold this many.
    fn lifetime_kv_tokens(&self) -> u64 {
        self.input_tokens + self.output_tokens - 1
    }
}

struct Engine {
    model: ModelSpec,
    device: DeviceSpec,
    mode: Mode,
    sched: SchedulerConfig,
    slo: Option<SloSpec>,
    pool: UnifiedPhysicalPool,
    buffer: LogicalBuffer,
    detector: Option<ViolationDetector>,
    kv_per_token: u64,
    act_per_token: u64,
    premap_budget_chunks: u32,
    clock: f64,
    requests: Vec<SimRequest>,
    next_arrival: usize,
    arrivals: Vec<RequestSeed>,
    waiting: VecDeque<usize>,
    running: Vec<usize>,
    finished: usize,
    iteration: u64,
    /// Static mode: chunks promised to admitted requests but not yet mapped.
    reserved_unmapped: u64,
    decode_time: f64,
    decode_tokens: u64,
    max_decode_batch: u32,
    plan_log: Vec<PlanRecord>,
    series: Vec<SeriesPoint>,
    seed: u64,
}

const VERIFY_EVERY: u64 = 256;
const MAX_ITERATIONS: u64 = 20_000_000;

fn div_ceil_u64(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

impl Engine {
    fn new(cfg: &SimConfig, workload: &WorkloadSpec) -> Result<Self, SimError> {
        cfg.model.validate()?;
        cfg.device.validate()?;
        let weights = weights_bytes(&cfg.model);
        if weights >= cfg.device.hbm_bytes {
            return Err(FootprintError::ModelDoesNotFit {
                weights,
                hbm: cfg.device.hbm_bytes,
            }
            .into());
        }
        let total_chunks = ((cfg.device.hbm_bytes - weights) / cfg.device.chunk_bytes) as u32;
        if total_chunks == 0 {
            return Err(SimError::BadArguments(
                "no chunks left after weights".into(),
            ));
        }
        // both modes start from the static split: an activation reserve
        // sized for one max-context prefill, the remainder labeled KV
        let act_reserve = div_ceil_u64(
            activation_bytes(&cfg.model, cfg.model.max_context),
            cfg.device.chunk_bytes,
        )
        .min(total_chunks as u64) as u32;
        let pool = UnifiedPhysicalPool::new(
            cfg.device.chunk_bytes,
            cfg.device.map_cost_s,
            cfg.device.unmap_cost_s,
            total_chunks,
            act_reserve,
        );
        let theta = cfg
            .scheduler
            .headroom_chunks
            .unwrap_or(((total_chunks as f64) * 0.02).ceil() as u32);
        if theta >= total_chunks {
            return Err(SimError::BadArguments(format!(
                "headroom {theta} chunks >= pool of {total_chunks}"
            )));
        }
        let arrivals = workload.generate()?;
        let detector = cfg.slo.map(|slo| {
            ViolationDetector::new(
                cfg.buffer.window,
                cfg.buffer.threshold_count,
                slo.ttft_s,
                slo.tpot_s,
            )
        });
        Ok(Self {
            model: cfg.model.clone(),
            device: cfg.device.clone(),
            mode: cfg.mode,
            sched: SchedulerConfig {
                headroom_chunks: theta,
                prefill_prioritized: cfg.scheduler.prefill_prioritized,
            },
            slo: cfg.slo,
            pool,
            buffer: LogicalBuffer::new(cfg.buffer.capacity_chunks, cfg.buffer.alpha),
            detector: if cfg.mode == Mode::Elastic { detector } else { None },
            kv_per_token: kv_bytes_per_token(&cfg.model),
            act_per_token: act_bytes_per_token(&cfg.model),
            premap_budget_chunks: (cfg.device.premap_budget_bytes / cfg.device.chunk_bytes)
                as u32,
            clock: 0.0,
            requests: Vec::with_capacity(arrivals.len()),
            next_arrival: 0,
            arrivals,
            waiting: VecDeque::new(),
            running: Vec::new(),
            finished: 0,
            iteration: 0,
            reserved_unmapped: 0,
            decode_time: 0.0,
            decode_tokens: 0,
            max_decode_batch: 0,
            plan_log: Vec::new(),
            series: Vec::new(),
            seed: workload.seed,
        })
    }

    fn kv_chunks_for_tokens(&self, tokens: u64) -> u32 {
        div_ceil_u64(tokens * self.kv_per_token, self.device.chunk_bytes) as u32
    }

    fn act_chunks_for_tokens(&self, tokens: u64) -> u32 {
        div_ceil_u64(tokens * self.act_per_token, self.device.chunk_bytes) as u32
    }

    fn prompt_chunks(&self, rid: usize) -> u32 {
        self.kv_chunks_for_tokens(self.requests[rid].input_tokens)
    }

    fn lifetime_chunks(&self, rid: usize) -> u32 {
        self.kv_chunks_for_tokens(self.requests[rid].lifetime_kv_tokens())
    }

    fn ingest_arrivals(&mut self) {
        while self.next_arrival < self.arrivals.len()
            && self.arrivals[self.next_arrival].arrival <= self.clock
        {
            let seed = self.arrivals[self.next_arrival];
            self.requests.push(SimRequest {
                arrival: seed.arrival,
                input_tokens: seed.input_tokens,
                output_tokens: seed.output_tokens,
                state: ReqState::Queued,
                residency: Residency::Gpu,
                generated: 0,
                first_token: None,
                finish: None,
                token_times: Vec::new(),
                kv: None,
                was_offloaded: false,
            });
            self.waiting.push_back(self.requests.len() - 1);
            self.next_arrival += 1;
        }
    }

    /// Free chunks the planner may hand out: everything reclaimable, minus
    /// (in static mode) chunks already promised to admitted requests.
    fn plan_capacity(&self) -> u32 {
        let c = self.pool.counters();
        let free = c.free_kv as u64 + c.free_act as u64;
        (free - self.reserved_unmapped.min(free)) as u32
    }

    fn build_prefill_plan(&self) -> IterationPlan {
        let act_chunks = |r: &SimRequest| self.act_chunks_for_tokens(r.input_tokens);
        match self.mode {
            Mode::Elastic => {
                let queue: Vec<PrefillRequest> = self
                    .waiting
                    .iter()
                    .map(|&rid| PrefillRequest {
                        id: rid as u64,
                        kv_chunks: self.prompt_chunks(rid),
                        act_chunks: act_chunks(&self.requests[rid]),
                    })
                    .collect();
                let counters = crate::pools::PoolCounters {
                    total: self.plan_capacity(),
                    ..self.pool.counters()
                };
                plan_prefill(
                    &self.sched,
                    counters,
                    &queue,
                    self.buffer.available_logical(),
                )
            }
            Mode::Static => {
                // admission reserves the full-lifetime KV so decode growth
                // can never run out (no preemption exists to recover from it)
                let c = self.pool.counters();
                let theta = self.sched.headroom_chunks as i64;
                let avail_kv = c.free_kv as i64 - self.reserved_unmapped as i64;
                let avail_act = c.free_act as i64;
                let mut plan = IterationPlan::default();
                for &rid in &self.waiting {
                    let kv = self.lifetime_chunks(rid) as i64;
                    let act = act_chunks(&self.requests[rid]) as i64;
                    if plan.m_kv as i64 + kv + theta <= avail_kv
                        && plan.m_act as i64 + act <= avail_act
                    {
                        plan.batch.push(rid as u64);
                        plan.m_kv += kv as u32;
                        plan.m_act += act as u32;
                    } else {
                        break;
                    }
                }
                plan
            }
        }
    }

    fn build_decode_plan(&self) -> IterationPlan {
        let act = self.act_chunks_for_tokens(1);
        let mut ready = Vec::new(); // next chunk already mapped
        let mut growing = Vec::new();
        let mut fetching = Vec::new();
        for &rid in &self.running {
            let r = &self.requests[rid];
            match r.residency {
                Residency::Gpu => {
                    let target = self.kv_chunks_for_tokens(r.kv_tokens() + 1);
                    let mapped = self
                        .pool
                        .tensor_mapped_chunks(r.kv.expect("resident request has KV"))
                        .expect("live tensor");
                    let growth = target.saturating_sub(mapped);
                    let dr = DecodeRequest {
                        id: rid as u64,
                        kv_chunks: growth,
                        act_chunks: act,
                        needs_fetch: false,
                    };
                    if growth == 0 {
                        ready.push(dr);
                    } else {
                        growing.push(dr);
                    }
                }
                Residency::Cpu => fetching.push(DecodeRequest {
                    id: rid as u64,
                    kv_chunks: self.kv_chunks_for_tokens(r.kv_tokens() + 1),
                    act_chunks: act,
                    needs_fetch: true,
                }),
            }
        }
        let queue: Vec<DecodeRequest> = ready
            .into_iter()
            .chain(growing)
            .chain(fetching)
            .collect();
        match self.mode {
            Mode::Elastic => {
                let counters = crate::pools::PoolCounters {
                    total: self.plan_capacity(),
                    ..self.pool.counters()
                };
                plan_decode(&self.sched, counters, &queue)
            }
            Mode::Static => {
                // KV growth was reserved at admission; only the transient
                // activation demand is checked
                let avail_act = self.pool.counters().free_act;
                let mut plan = IterationPlan::default();
                for r in &queue {
                    if plan.m_act + r.act_chunks <= avail_act {
                        plan.batch.push(r.id);
                        plan.m_kv += r.kv_chunks;
                        plan.m_act += r.act_chunks;
                    } else {
                        break;
                    }
                }
                plan
            }
        }
    }

    fn apply_ballooning(&mut self, inflation: i64) -> Result<(), SimError> {
        if inflation > 0 {
            let moved = self.pool.inflate(inflation as u32);
            if moved as i64 != inflation {
                return Err(SimError::InvariantBreach(format!(
                    "inflation of {inflation} only moved {moved}"
                )));
            }
        } else if inflation < 0 {
            let want = (-inflation) as u32;
            let moved = self.pool.deflate(want);
            if moved != want {
                return Err(SimError::InvariantBreach(format!(
                    "deflation of {want} only moved {moved}"
                )));
            }
        }
        Ok(())
    }

    fn finish_request(&mut self, rid: usize) -> Result<(), SimError> {
        let r = &mut self.requests[rid];
        r.state = ReqState::Finished;
        r.finish = Some(self.clock);
        self.finished += 1;
        if let Some(et) = r.kv.take() {
            self.pool.release(et)?;
        }
        if r.residency == Residency::Cpu {
            self.buffer.discard(rid as u64)?;
        }
        Ok(())
    }

    fn execute_prefill(&mut self, plan: &IterationPlan) -> Result<(f64, Vec<f64>), SimError> {
        let vmm_before = self.pool.vmm_stats().critical_ns;
        self.apply_ballooning(plan.inflation)?;
        let offloads: std::collections::BTreeSet<u64> = plan.offloads.iter().copied().collect();
        let mut act_tensors = Vec::with_capacity(plan.batch.len());
        let mut compute = 0.0f64;
        let mut offload_bytes = 0u64;
        for &id in &plan.batch {
            let rid = id as usize;
            let popped = self.waiting.pop_front();
            if popped != Some(rid) {
                return Err(SimError::InvariantBreach(format!(
                    "admitted batch is not a queue prefix: expected {popped:?}, got {rid}"
                )));
            }
            let input_tokens = self.requests[rid].input_tokens;
            let act_chunks = self.act_chunks_for_tokens(input_tokens);
            act_tensors.push(self.pool.act_acquire(
                act_chunks as u64 * self.device.chunk_bytes,
                Some(id),
            )?);
            let prompt = self.prompt_chunks(rid);
            if offloads.contains(&id) {
                self.buffer.offload(id, prompt)?;
                self.requests[rid].residency = Residency::Cpu;
                self.requests[rid].was_offloaded = true;
                offload_bytes += prompt as u64 * self.device.chunk_bytes;
            } else {
                let lifetime = self.lifetime_chunks(rid);
                let et = self.pool.kv_acquire(prompt, lifetime, Some(id))?;
                self.requests[rid].kv = Some(et);
                if self.mode == Mode::Static {
                    self.reserved_unmapped += (lifetime - prompt) as u64;
                }
            }
            compute += prefill_latency(&self.model, &self.device, input_tokens);
        }
        let exposed = offload_overlap_delay(
            compute,
            transfer_time(&self.device, offload_bytes),
            self.model.n_layers,
        );
        let vmm_delta = (self.pool.vmm_stats().critical_ns - vmm_before) as f64 * 1e-9;
        let mut ttfts = Vec::with_capacity(plan.batch.len());
        let duration = compute + exposed + vmm_delta;
        let clock_end = self.clock + duration;
        for &id in &plan.batch {
            let rid = id as usize;
            let r = &mut self.requests[rid];
            r.generated = 1;
            r.first_token = Some(clock_end);
            r.token_times.push(clock_end);
            r.state = ReqState::Decoding;
            ttfts.push(clock_end - r.arrival);
            self.running.push(rid);
        }
        for et in act_tensors {
            self.pool.release(et)?;
        }
        Ok((duration, ttfts))
    }

    fn execute_decode(&mut self, plan: &IterationPlan) -> Result<(f64, Vec<f64>), SimError> {
        let vmm_before = self.pool.vmm_stats().critical_ns;
        self.apply_ballooning(plan.inflation)?;
        let fetch_set: std::collections::BTreeSet<u64> = plan.fetches.iter().copied().collect();
        let mut fetch_bytes = 0u64;
        for &id in &plan.fetches {
            let rid = id as usize;
            let stored = self.buffer.fetch(id)?;
            fetch_bytes += stored as u64 * self.device.chunk_bytes;
            let lifetime = self.lifetime_chunks(rid);
            let et = self.pool.kv_acquire(stored.max(1), lifetime, Some(id))?;
            self.requests[rid].kv = Some(et);
            self.requests[rid].residency = Residency::Gpu;
        }
        let mut resident_kv_bytes = 0u64;
        let mut act_tensors = Vec::with_capacity(plan.batch.len());
        for &id in &plan.batch {
            let rid = id as usize;
            let r = &self.requests[rid];
            resident_kv_bytes += r.kv_tokens() * self.kv_per_token;
            let target = self.kv_chunks_for_tokens(r.kv_tokens() + 1);
            let et = r.kv.expect("admitted decode request is resident");
            let newly = self.pool.kv_write(et, target)?;
            if self.mode == Mode::Static && !fetch_set.contains(&id) {
                self.reserved_unmapped -= newly as u64;
            }
            act_tensors.push(
                self.pool
                    .act_acquire(self.act_per_token.max(1), Some(id))?,
            );
        }
        let step = decode_step_latency(
            &self.model,
            &self.device,
            plan.batch.len() as u64,
            resident_kv_bytes,
        );
        let exposed = offload_overlap_delay(
            step,
            transfer_time(&self.device, fetch_bytes),
            self.model.n_layers,
        );
        let vmm_delta = (self.pool.vmm_stats().critical_ns - vmm_before) as f64 * 1e-9;
        let duration = step + exposed + vmm_delta;
        let clock_end = self.clock + duration;
        let mut tpots = Vec::with_capacity(plan.batch.len());
        for &id in &plan.batch {
            let r = &mut self.requests[id as usize];
            r.generated += 1;
            r.token_times.push(clock_end);
            tpots.push(duration);
        }
        for et in act_tensors {
            self.pool.release(et)?;
        }
        self.decode_time += duration;
        self.decode_tokens += plan.batch.len() as u64;
        self.max_decode_batch = self.max_decode_batch.max(plan.batch.len() as u32);
        Ok((duration, tpots))
    }

    fn premap_running(&mut self) {
        if self.mode != Mode::Elastic {
            return;
        }
        let mut candidates = Vec::new();
        for &rid in &self.running {
            let r = &self.requests[rid];
            if r.residency != Residency::Gpu || r.state != ReqState::Decoding {
                continue;
            }
            if let Some(et) = r.kv {
                candidates.push((et, self.kv_chunks_for_tokens(r.kv_tokens() + 1)));
            }
        }
        // keep enough slack under the headroom floor for the next
        // iteration's transient activation demand
        let floor = self.sched.headroom_chunks + self.running.len() as u32 + 1;
        self.pool
            .speculative_premap(&candidates, self.premap_budget_chunks, floor);
    }

    fn post_iteration(
        &mut self,
        phase: Phase,
        plan: &IterationPlan,
        duration: f64,
        ttfts: Vec<f64>,
        tpots: Vec<f64>,
    ) -> Result<(), SimError> {
        self.clock += duration;
        // finish bookkeeping happens at the new clock
        let done: Vec<usize> = plan
            .batch
            .iter()
            .map(|&id| id as usize)
            .filter(|&rid| {
                let r = &self.requests[rid];
                r.state == ReqState::Decoding && r.generated == r.output_tokens
            })
            .collect();
        for rid in done {
            self.finish_request(rid)?;
        }
        self.running
            .retain(|&rid| self.requests[rid].state == ReqState::Decoding);
        self.pool.drain_deferred(usize::MAX);
        if phase == Phase::Decode {
            self.premap_running();
        }
        if let Some(det) = self.detector.as_mut() {
            let (e_ttft, e_tpot) = det.record_iteration(&ttfts, &tpots);
            self.buffer.scale(e_ttft, e_tpot);
        }
        let c = self.pool.counters();
        let free = c.free_kv + c.free_act;
        if free < self.sched.headroom_chunks {
            return Err(SimError::InvariantBreach(format!(
                "free chunks {free} fell below headroom {}",
                self.sched.headroom_chunks
            )));
        }
        if self.iteration % VERIFY_EVERY == 0 {
            self.pool
                .verify()
                .map_err(SimError::InvariantBreach)?;
        }
        let (owned_kv, owned_act) = self.pool.owned_split();
        self.series.push(SeriesPoint {
            time_s: self.clock,
            phase,
            batch: plan.batch.len() as u32,
            kv_used_chunks: owned_kv - c.free_kv,
            act_used_chunks: owned_act - c.free_act,
            kv_owned_chunks: owned_kv,
            act_owned_chunks: owned_act,
            free_chunks: free,
            buffer_logical_chunks: self.buffer.logical_chunks(),
            buffer_used_chunks: self.buffer.used_chunks(),
            waiting: self.waiting.len() as u32,
            running: self.running.len() as u32,
        });
        self.plan_log.push(PlanRecord {
            iteration: self.iteration,
            time_s: self.clock,
            phase,
            batch: plan.batch.clone(),
            offloads: plan.offloads.clone(),
            fetches: plan.fetches.clone(),
            inflation: plan.inflation,
            m_kv: plan.m_kv,
            m_act: plan.m_act,
        });
        self.iteration += 1;
        Ok(())
    }

    fn run_to_completion(&mut self) -> Result<(), SimError> {
        let total = self.arrivals.len();
        while self.finished < total {
            if self.iteration >= MAX_ITERATIONS {
                return Err(SimError::NoProgress(format!(
                    "iteration cap {MAX_ITERATIONS} hit with {} unfinished",
                    total - self.finished
                )));
            }
            self.ingest_arrivals();
            if self.waiting.is_empty() && self.running.is_empty() {
                let next = self.arrivals[self.next_arrival].arrival;
                self.clock = self.clock.max(next);
                continue;
            }
            let prefill_plan = if self.sched.prefill_prioritized && !self.waiting.is_empty() {
                self.build_prefill_plan()
            } else {
                IterationPlan::default()
            };
            match select_phase(&prefill_plan) {
                Phase::Prefill => {
                    let (duration, ttfts) = self.execute_prefill(&prefill_plan)?;
                    self.post_iteration(Phase::Prefill, &prefill_plan, duration, ttfts, Vec::new())?;
                }
                Phase::Decode => {
                    let mut plan = self.build_decode_plan();
                    if plan.batch.is_empty() && !self.sched.prefill_prioritized {
                        // decode-first policy falls back to prefill
                        plan = self.build_prefill_plan();
                        if !plan.batch.is_empty() {
                            let (duration, ttfts) = self.execute_prefill(&plan)?;
                            self.post_iteration(Phase::Prefill, &plan, duration, ttfts, Vec::new())?;
                            continue;
                        }
                    }
                    if plan.batch.is_empty() {
                        if self.next_arrival < self.arrivals.len() {
                            // nothing runnable right now; jump to the next arrival
                            self.clock = self.clock.max(self.arrivals[self.next_arrival].arrival);
                            continue;
                        }
                        return Err(SimError::NoProgress(format!(
                            "no admissible work: {} waiting, {} running, free {:?}",
                            self.waiting.len(),
                            self.running.len(),
                            self.pool.counters()
                        )));
                    }
                    let (duration, tpots) = self.execute_decode(&plan)?;
                    self.post_iteration(Phase::Decode, &plan, duration, Vec::new(), tpots)?;
                }
            }
        }
        self.pool.verify().map_err(SimError::InvariantBreach)?;
        Ok(())
    }

    fn into_report(self) -> Report {
        let mut requests = Vec::with_capacity(self.requests.len());
        let mut ttfts = Vec::new();
        let mut tpots = Vec::new();
        let mut total_tokens = 0u64;
        for (rid, r) in self.requests.iter().enumerate() {
            let first = r.first_token.unwrap_or(f64::NAN);
            let finish = r.finish.unwrap_or(f64::NAN);
            let ttft = first - r.arrival;
            let tpot = (finish - first) / (r.generated.saturating_sub(1).max(1)) as f64;
            ttfts.push(ttft);
            tpots.push(tpot);
            total_tokens += r.generated;
            requests.push(RequestMetrics {
                id: rid as u64,
                arrival_s: r.arrival,
                input_tokens: r.input_tokens,
                output_tokens: r.output_tokens,
                ttft_s: ttft,
                tpot_s: tpot,
                finish_s: finish,
                was_offloaded: r.was_offloaded,
            });
        }
        let makespan = self.clock;
        let slo = self.slo.map(|s| {
            let met = requests
                .iter()
                .filter(|r| r.ttft_s <= s.ttft_s && r.tpot_s <= s.tpot_s)
                .count();
            SloOutcome {
                ttft_s: s.ttft_s,
                tpot_s: s.tpot_s,
                attainment: met as f64 / requests.len().max(1) as f64,
            }
        });
        let vmm = self.pool.vmm_stats();
        Report {
            mode: self.mode.as_str().to_string(),
            seed: self.seed,
            iterations: self.iteration,
            makespan_s: makespan,
            ttft: StatSummary::from_samples(&ttfts),
            tpot: StatSummary::from_samples(&tpots),
            output_throughput_tps: if makespan > 0.0 {
                total_tokens as f64 / makespan
            } else {
                0.0
            },
            decode_throughput_tps: if self.decode_time > 0.0 {
                self.decode_tokens as f64 / self.decode_time
            } else {
                0.0
            },
            max_decode_batch: self.max_decode_batch,
            slo,
            pools: PoolsSummary {
                total_chunks: self.pool.counters().total,
                inflate_events: self.pool.transfers.inflate_events,
                inflated_chunks: self.pool.transfers.inflated_chunks,
                deflate_events: self.pool.transfers.deflate_events,
                deflated_chunks: self.pool.transfers.deflated_chunks,
                offloaded_requests: self.buffer.offloaded_requests,
                offloaded_chunks: self.buffer.offloaded_chunks,
                fetched_requests: self.buffer.fetched_requests,
                fetched_chunks: self.buffer.fetched_chunks,
                premapped_chunks: self.pool.premapped_total,
            },
            vmm: VmmSummary {
                map_count: vmm.map_count,
                unmap_count: vmm.unmap_count,
                critical_s: vmm.critical_s(),
                background_s: vmm.background_s(),
                share_of_makespan: if makespan > 0.0 {
                    vmm.critical_s() / makespan
                } else {
                    0.0
                },
            },
            requests,
            series: self.series,
        }
    }
}

/// Runs one full simulation to completion.
pub fn run(cfg: &SimConfig, workload: &WorkloadSpec) -> Result<Report, SimError> {
    let mut engine = Engine::new(cfg, workload)?;
    engine.run_to_completion()?;
    Ok(engine.into_report())
}

/// Like [`run`], but also returns the per-iteration plan log.
pub fn run_with_plans(
    cfg: &SimConfig,
    workload: &WorkloadSpec,
) -> Result<(Report, Vec<PlanRecord>), SimError> {
    let mut engine = Engine::new(cfg, workload)?;
    engine.run_to_completion()?;
    let plans = std::mem::take(&mut engine.plan_log);
    Ok((engine.into_report(), plans))
}

/// Measures per-mode unloaded TTFT/TPOT at a near-zero arrival rate and
/// multiplies them into SLO targets.
pub fn calibrate_slo(
    cfg: &SimConfig,
    input_tokens: u64,
    output_tokens: u64,
    multiplier: f64,
) -> Result<SloSpec, SimError> {
    let mut unloaded = cfg.clone();
    unloaded.slo = None;
    let w = WorkloadSpec::poisson(0.01, input_tokens, output_tokens, 8, 1);
    let report = run(&unloaded, &w)?;
    Ok(SloSpec {
        ttft_s: multiplier * report.ttft.mean,
        tpot_s: multiplier * report.tpot.mean,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RatePoint {
    pub rate: f64,
    pub attainment: f64,
    pub mean_ttft_s: f64,
    pub mean_tpot_s: f64,
    pub output_throughput_tps: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GoodputResult {
    pub slo: SloSpec,
    pub points: Vec<RatePoint>,
    /// Largest grid rate with attainment >= 0.90; 0 when none qualifies.
    pub goodput: f64,
    pub attained: bool,
}

/// Sweeps an ascending rate grid and reports the goodput: the largest rate
/// whose run keeps at least 90% of requests within both SLOs.
pub fn goodput_search(
    cfg: &SimConfig,
    input_tokens: u64,
    output_tokens: u64,
    count: u64,
    seed: u64,
    slo_multiplier: f64,
    rates: &[f64],
) -> Result<GoodputResult, SimError> {
    if rates.is_empty() {
        return Err(SimError::BadArguments("empty rate grid".into()));
    }
    if rates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SimError::BadArguments(
            "rate grid must be strictly ascending".into(),
        ));
    }
    let slo = calibrate_slo(cfg, input_tokens, output_tokens, slo_multiplier)?;
    let mut loaded = cfg.clone();
    loaded.slo = Some(slo);
    let mut points = Vec::with_capacity(rates.len());
    for &rate in rates {
        let w = WorkloadSpec::poisson(rate, input_tokens, output_tokens, count, seed);
        let report = run(&loaded, &w)?;
        points.push(RatePoint {
            rate,
            attainment: report.slo.map(|s| s.attainment).unwrap_or(0.0),
            mean_ttft_s: report.ttft.mean,
            mean_tpot_s: report.tpot.mean,
            output_throughput_tps: report.output_throughput_tps,
        });
    }
    let goodput = points
        .iter()
        .filter(|p| p.attainment >= 0.90)
        .map(|p| p.rate)
        .fold(0.0f64, f64::max);
    Ok(GoodputResult {
        slo,
        points,
        goodput,
        attained: goodput > 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> ModelSpec {
        ModelSpec {
            name: "tiny".into(),
            n_layers: 4,
            hidden: 512,
            n_heads: 8,
            n_kv_heads: 2,
            head_dim: 64,
            n_params: 100_000_000,
            dtype_bytes: 2,
            max_context: 8192,
            act_coeff: 24.0,
        }
    }

    fn small_device() -> DeviceSpec {
        DeviceSpec {
            hbm_bytes: 2_000_000_000,
            mem_bw: 1.0e12,
            compute_rate: 100.0e12,
            xfer_bw: 25.0e9,
            chunk_bytes: 2 << 20,
            map_cost_s: 5.0e-6,
            unmap_cost_s: 1.0e-5,
            premap_budget_bytes: 50 << 20,
        }
    }

    fn cfg(mode: Mode) -> SimConfig {
        SimConfig {
            model: small_model(),
            device: small_device(),
            scheduler: SchedulerParams::default(),
            buffer: BufferParams::default(),
            slo: None,
            mode,
        }
    }

    #[test]
    fn same_seed_gives_identical_reports() {
        let w = WorkloadSpec::poisson(4.0, 256, 128, 30, 42);
        let a = run(&cfg(Mode::Elastic), &w).unwrap();
        let b = run(&cfg(Mode::Elastic), &w).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn all_requests_finish_with_exact_token_counts() {
        let w = WorkloadSpec::poisson(4.0, 256, 64, 25, 7);
        let report = run(&cfg(Mode::Elastic), &w).unwrap();
        assert_eq!(report.requests.len(), 25);
        for r in &report.requests {
            assert!(r.finish_s.is_finite());
            assert!(r.ttft_s > 0.0);
        }
        let expected: u64 = 25 * 64;
        let throughput_tokens = report.output_throughput_tps * report.makespan_s;
        assert!((throughput_tokens - expected as f64).abs() < 1e-6);
    }

    #[test]
    fn clock_is_monotonic_in_series() {
        let w = WorkloadSpec::poisson(2.0, 256, 64, 20, 3);
        let report = run(&cfg(Mode::Elastic), &w).unwrap();
        assert!(report
            .series
            .windows(2)
            .all(|p| p[0].time_s <= p[1].time_s));
    }

    #[test]
    fn static_mode_never_transfers_or_offloads() {
        let w = WorkloadSpec::poisson(4.0, 256, 64, 25, 7);
        let report = run(&cfg(Mode::Static), &w).unwrap();
        assert_eq!(report.pools.inflated_chunks, 0);
        assert_eq!(report.pools.deflated_chunks, 0);
        assert_eq!(report.pools.offloaded_requests, 0);
        assert_eq!(report.pools.fetched_requests, 0);
        assert_eq!(report.pools.premapped_chunks, 0);
        // ownership split constant across the series
        let first = &report.series[0];
        assert!(report
            .series
            .iter()
            .all(|p| p.kv_owned_chunks == first.kv_owned_chunks));
    }

    #[test]
    fn offline_fixed_batch_runs() {
        let w = WorkloadSpec::fixed_batch(512, 128, 8, 0);
        let report = run(&cfg(Mode::Elastic), &w).unwrap();
        assert_eq!(report.requests.len(), 8);
        assert!(report.max_decode_batch >= 1);
    }

    #[test]
    fn infeasible_weights_error() {
        let mut c = cfg(Mode::Elastic);
        c.device.hbm_bytes = 1_000_000;
        let w = WorkloadSpec::fixed_batch(512, 128, 2, 0);
        assert!(matches!(
            run(&c, &w),
            Err(SimError::Footprint(FootprintError::ModelDoesNotFit { .. }))
        ));
    }

    #[test]
    fn goodput_search_needs_ascending_grid() {
        let c = cfg(Mode::Elastic);
        assert!(matches!(
            goodput_search(&c, 256, 64, 10, 1, 25.0, &[2.0, 1.0]),
            Err(SimError::BadArguments(_))
        ));
    }
}
