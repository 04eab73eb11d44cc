//! End-to-end acceptance suite.
//!
//! Each test prints one PASS line on success; a failed assertion fails the
//! test (and the line is absent). Comparative runs use fixed seeds and are
//! fully deterministic, so the asserted margins are stable across reruns.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emsim_core::cpu_buffer::LogicalBuffer;
use emsim_core::footprint::{self, DeviceSpec, ModelSpec};
use emsim_core::pools::{PoolCounters, UnifiedPhysicalPool};
use emsim_core::report::Report;
use emsim_core::scheduler::{self, DecodeRequest, PrefillRequest, SchedulerConfig};
use emsim_core::sim::{self, BufferParams, Mode, SchedulerParams, SimConfig};
use emsim_core::workload::{TraceRecord, WorkloadSpec};

const CHUNK: u64 = 2 << 20;

fn llama_like(max_context: u64, act_coeff: f64) -> ModelSpec {
    ModelSpec {
        name: "llama3-8b".into(),
        n_layers: 32,
        hidden: 4096,
        n_heads: 32,
        n_kv_heads: 8,
        head_dim: 128,
        n_params: 8_000_000_000,
        dtype_bytes: 2,
        max_context,
        act_coeff,
    }
}

fn a100(hbm_bytes: u64) -> DeviceSpec {
    DeviceSpec {
        hbm_bytes,
        mem_bw: 2.0e12,
        compute_rate: 312.0e12,
        xfer_bw: 25.0e9,
        chunk_bytes: CHUNK,
        map_cost_s: 5.0e-6,
        unmap_cost_s: 1.0e-5,
        premap_budget_bytes: 50 << 20,
    }
}

fn sim_cfg(mode: Mode, model: ModelSpec, device: DeviceSpec) -> SimConfig {
    SimConfig {
        model,
        device,
        scheduler: SchedulerParams::default(),
        buffer: BufferParams::default(),
        slo: None,
        mode,
    }
}

/// The shared comparative runs, executed once and asserted by several
/// criteria. Every run in this set must complete without any reservation
/// or invariant failure (criterion 5); an engine error panics here.
struct RunSet {
    elastic_2k: Report,
    static_2k: Report,
    elastic_2k_wall: f64,
    static_2k_wall: f64,
    elastic_128k: Report,
    static_128k: Report,
    comparative_128k_wall: f64,
    buffer_run: Report,
    trace_elastic: Report,
    trace_static: Report,
}

fn mixed_trace() -> Vec<TraceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut t = 0.0;
    (0..40)
        .map(|_| {
            t += rng.gen_range(0.05..1.5);
            TraceRecord {
                arrival_s: t,
                input_tokens: rng.gen_range(256..4096),
                output_tokens: rng.gen_range(64..512),
            }
        })
        .collect()
}

fn runs() -> &'static RunSet {
    static RUNS: OnceLock<RunSet> = OnceLock::new();
    RUNS.get_or_init(|| {
        // online 2K-2K at a rate where the static partition saturates
        let online = WorkloadSpec::poisson(1.0, 2048, 2048, 120, 42);
        let mut elastic = sim_cfg(Mode::Elastic, llama_like(262_144, 24.0), a100(80_000_000_000));
        elastic.slo = Some(sim::calibrate_slo(&elastic, 2048, 2048, 25.0).unwrap());
        let mut stat = elastic.clone();
        stat.mode = Mode::Static;
        stat.slo = Some(sim::calibrate_slo(&stat, 2048, 2048, 25.0).unwrap());
        let t0 = Instant::now();
        let elastic_2k = sim::run(&elastic, &online).unwrap();
        let elastic_2k_wall = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let static_2k = sim::run(&stat, &online).unwrap();
        let static_2k_wall = t0.elapsed().as_secs_f64();

        // offline long-context 128K-8K; the model variant serves at close
        // to its context limit so the static activation reserve is large
        let offline = WorkloadSpec::fixed_batch(131_072, 8_192, 6, 0);
        let long_elastic = sim_cfg(Mode::Elastic, llama_like(327_680, 12.0), a100(85_899_345_920));
        let mut long_static = long_elastic.clone();
        long_static.mode = Mode::Static;
        let t0 = Instant::now();
        let elastic_128k = sim::run(&long_elastic, &offline).unwrap();
        let static_128k = sim::run(&long_static, &offline).unwrap();
        let comparative_128k_wall = t0.elapsed().as_secs_f64();

        // offline burst tuned to exercise the host-buffer path: admission
        // cohorts breach the (tight) TTFT target, the logical buffer ramps,
        // and later cohorts admit overflow prefills through the buffer
        let mut buf_cfg = sim_cfg(Mode::Elastic, llama_like(262_144, 12.0), a100(80_000_000_000));
        buf_cfg.slo = Some(sim::calibrate_slo(&buf_cfg, 28_000, 16, 10.0).unwrap());
        let buffer_run =
            sim::run(&buf_cfg, &WorkloadSpec::fixed_batch(28_000, 16, 64, 0)).unwrap();

        // trace-driven mixed lengths through both modes
        let trace = WorkloadSpec::trace(mixed_trace());
        let trace_cfg = sim_cfg(Mode::Elastic, llama_like(262_144, 24.0), a100(80_000_000_000));
        let mut trace_static_cfg = trace_cfg.clone();
        trace_static_cfg.mode = Mode::Static;
        let trace_elastic = sim::run(&trace_cfg, &trace).unwrap();
        let trace_static = sim::run(&trace_static_cfg, &trace).unwrap();

        RunSet {
            elastic_2k,
            static_2k,
            elastic_2k_wall,
            static_2k_wall,
            elastic_128k,
            static_128k,
            comparative_128k_wall,
            buffer_run,
            trace_elastic,
            trace_static,
        }
    })
}

// ---------------------------------------------------------------------------
// 1. Chunk conservation over randomized operations
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_chunk_conservation() {
    let start = Instant::now();
    let total: u32 = 512;
    let mut pool = UnifiedPhysicalPool::new(CHUNK, 5.0e-6, 1.0e-5, total, 256);
    let mut buffer = LogicalBuffer::new(128, 2);
    buffer.scale(true, false); // open some logical space
    for _ in 0..10 {
        buffer.scale(true, false);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut live_kv = Vec::new();
    let mut live_act = Vec::new();
    let mut offloaded: Vec<u64> = Vec::new();
    let mut next_req = 0u64;
    let ops = 100_000usize;
    for i in 0..ops {
        match rng.gen_range(0..10u32) {
            0 | 1 => {
                let s = rng.gen_range(1..8u32);
                let span = s + rng.gen_range(0..8u32);
                if let Ok(id) = pool.kv_acquire(s, span, None) {
                    live_kv.push(id);
                }
            }
            2 | 3 => {
                let bytes = rng.gen_range(1..8u64) * CHUNK;
                if let Ok(id) = pool.act_acquire(bytes, None) {
                    live_act.push(id);
                }
            }
            4 => {
                if !live_kv.is_empty() {
                    let idx = rng.gen_range(0..live_kv.len());
                    pool.release(live_kv.swap_remove(idx)).unwrap();
                }
            }
            5 => {
                if !live_act.is_empty() {
                    let idx = rng.gen_range(0..live_act.len());
                    pool.release(live_act.swap_remove(idx)).unwrap();
                }
            }
            6 => {
                pool.inflate(rng.gen_range(1..16u32));
            }
            7 => {
                pool.deflate(rng.gen_range(1..16u32));
            }
            8 => {
                let chunks = rng.gen_range(1..32u32);
                if buffer.offload(next_req, chunks).is_ok() {
                    offloaded.push(next_req);
                }
                next_req += 1;
            }
            _ => {
                if !offloaded.is_empty() {
                    let idx = rng.gen_range(0..offloaded.len());
                    buffer.fetch(offloaded.swap_remove(idx)).unwrap();
                } else {
                    pool.drain_deferred(rng.gen_range(0..4));
                }
            }
        }
        // owner labels must partition the registry after every operation
        let (kv, act) = pool.owned_split();
        assert_eq!(kv + act, total, "op {i}: ownership partition broke");
        let c = pool.counters();
        assert_eq!(c.total, total);
        if i % 500 == 0 {
            pool.verify().unwrap();
        }
    }
    pool.drain_deferred(usize::MAX);
    pool.verify().unwrap();
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "conservation suite took {elapsed:?}"
    );
    println!(
        "ACCEPTANCE 1 PASS: {ops} randomized ops conserved {total} chunks and the \
         ownership partition in {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// 2. Best-fit selection vs brute force
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_best_fit_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let instances = 10_000usize;
    for _ in 0..instances {
        let mut pool = UnifiedPhysicalPool::new(CHUNK, 0.0, 0.0, 2048, 0);
        // random Available slot population; small sizes force frequent ties
        let n = rng.gen_range(0..12usize);
        let mut ids = Vec::new();
        for _ in 0..n {
            let mapped = rng.gen_range(1..9u32);
            let span = mapped + rng.gen_range(0..4u32);
            ids.push(pool.kv_acquire(mapped, span, None).unwrap());
        }
        for id in ids {
            pool.release(id).unwrap();
        }
        let s = rng.gen_range(1..10u32);
        let span = s + rng.gen_range(0..4u32);
        let got = pool.best_fit_kv(s, span);
        // brute force: smallest feasible mapped size, lowest base on ties
        let expect = pool
            .available_kv_slots()
            .into_iter()
            .filter(|(mapped, length, _, _)| *mapped >= s && *length >= span)
            .min_by_key(|(mapped, _, base, _)| (*mapped, *base))
            .map(|(_, _, _, id)| id);
        assert_eq!(got, expect, "s={s} span={span}");
    }
    println!(
        "ACCEPTANCE 2 PASS: best-fit matched the brute-force argmin (with tie-break) \
         on {instances} random slot sets"
    );
}

// ---------------------------------------------------------------------------
// 3. Admission planner vs a literal pseudocode interpreter
// ---------------------------------------------------------------------------

/// Line-by-line interpretation of the published scheduling loop, kept
/// deliberately naive and separate from the production planner.
#[allow(clippy::too_many_arguments)]
mod reference {
    pub struct Outcome {
        pub batch: Vec<u64>,
        pub offloads: Vec<u64>,
        pub fetches: Vec<u64>,
        pub inflation: i64,
    }

    fn ballooning(p_kv: i64, p_act: i64, m_kv: i64, m_act: i64) -> i64 {
        if p_kv < m_kv && p_act > m_act {
            m_kv - p_kv
        } else if p_act < m_act && p_kv > m_kv {
            p_act - m_act
        } else {
            0
        }
    }

    pub fn prefill(
        p_t: i64,
        theta: i64,
        p_kv: i64,
        p_act: i64,
        mut p_b: i64,
        queue: &[(u64, i64, i64)], // (id, kv, act)
    ) -> Outcome {
        let mut batch = Vec::new();
        let mut offloads = Vec::new();
        let (mut m_kv, mut m_act) = (0i64, 0i64);
        for &(id, kv_r, act_r) in queue {
            if p_t - (m_kv + m_act + kv_r + act_r) >= theta {
                batch.push(id);
                m_kv += kv_r;
                m_act += act_r;
            } else if p_t - (m_kv + m_act + act_r) >= theta && kv_r <= p_b {
                batch.push(id);
                offloads.push(id);
                m_act += act_r;
                p_b -= kv_r;
            } else {
                break;
            }
        }
        Outcome {
            batch,
            offloads,
            fetches: Vec::new(),
            inflation: ballooning(p_kv, p_act, m_kv, m_act),
        }
    }

    pub fn decode(
        p_t: i64,
        theta: i64,
        p_kv: i64,
        p_act: i64,
        queue: &[(u64, i64, i64, bool)], // (id, kv, act, swapped_out)
    ) -> Outcome {
        let mut batch = Vec::new();
        let mut fetches = Vec::new();
        let (mut m_kv, mut m_act) = (0i64, 0i64);
        for &(id, kv_r, act_r, swapped) in queue {
            if p_t - (m_kv + m_act + kv_r + act_r) >= theta {
                batch.push(id);
                if swapped {
                    fetches.push(id);
                }
                m_kv += kv_r;
                m_act += act_r;
            } else {
                break;
            }
        }
        Outcome {
            batch,
            offloads: Vec::new(),
            fetches,
            inflation: ballooning(p_kv, p_act, m_kv, m_act),
        }
    }
}

#[test]
fn criterion_03_planner_matches_reference_interpreter() {
    // the worked example: three (kv=15, act=20) requests against
    // (P_T=100, theta=10, P_kv=50, P_act=40, P_B=20)
    let cfg = SchedulerConfig {
        headroom_chunks: 10,
        prefill_prioritized: true,
    };
    let counters = PoolCounters {
        total: 100,
        free_kv: 50,
        free_act: 40,
    };
    let q = [
        PrefillRequest { id: 0, kv_chunks: 15, act_chunks: 20 },
        PrefillRequest { id: 1, kv_chunks: 15, act_chunks: 20 },
        PrefillRequest { id: 2, kv_chunks: 15, act_chunks: 20 },
    ];
    let plan = scheduler::plan_prefill(&cfg, counters, &q, 20);
    assert_eq!(plan.batch, vec![0, 1, 2]);
    assert_eq!(plan.offloads, vec![2]);
    assert_eq!(plan.inflation, -20);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let instances = 10_000usize;
    for _ in 0..instances {
        let total = rng.gen_range(1..=64u32);
        let free_kv = rng.gen_range(0..=total);
        let free_act = rng.gen_range(0..=total - free_kv.min(total));
        let theta = rng.gen_range(0..=16u32);
        let p_b = rng.gen_range(0..=32u32);
        let n = rng.gen_range(0..=8usize);
        let cfg = SchedulerConfig {
            headroom_chunks: theta,
            prefill_prioritized: true,
        };
        let counters = PoolCounters {
            total,
            free_kv,
            free_act,
        };
        if rng.gen_bool(0.5) {
            let q: Vec<PrefillRequest> = (0..n)
                .map(|i| PrefillRequest {
                    id: i as u64,
                    kv_chunks: rng.gen_range(0..16),
                    act_chunks: rng.gen_range(0..16),
                })
                .collect();
            let plan = scheduler::plan_prefill(&cfg, counters, &q, p_b);
            let q_ref: Vec<(u64, i64, i64)> = q
                .iter()
                .map(|r| (r.id, r.kv_chunks as i64, r.act_chunks as i64))
                .collect();
            let want = reference::prefill(
                total as i64,
                theta as i64,
                free_kv as i64,
                free_act as i64,
                p_b as i64,
                &q_ref,
            );
            assert_eq!(plan.batch, want.batch);
            assert_eq!(plan.offloads, want.offloads);
            assert_eq!(plan.inflation, want.inflation);
        } else {
            let q: Vec<DecodeRequest> = (0..n)
                .map(|i| DecodeRequest {
                    id: i as u64,
                    kv_chunks: rng.gen_range(0..16),
                    act_chunks: rng.gen_range(0..4),
                    needs_fetch: rng.gen_bool(0.3),
                })
                .collect();
            let plan = scheduler::plan_decode(&cfg, counters, &q);
            let q_ref: Vec<(u64, i64, i64, bool)> = q
                .iter()
                .map(|r| (r.id, r.kv_chunks as i64, r.act_chunks as i64, r.needs_fetch))
                .collect();
            let want = reference::decode(
                total as i64,
                theta as i64,
                free_kv as i64,
                free_act as i64,
                &q_ref,
            );
            assert_eq!(plan.batch, want.batch);
            assert_eq!(plan.fetches, want.fetches);
            assert_eq!(plan.inflation, want.inflation);
        }
    }
    println!(
        "ACCEPTANCE 3 PASS: planner output equals the pseudocode interpreter on \
         {instances} random instances, including the inflation=-20 worked example"
    );
}

// ---------------------------------------------------------------------------
// 4. Buffer scaling bounds and priority
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_buffer_scaling_bounds() {
    // the published shrink example
    let mut buf = LogicalBuffer::new(64, 2);
    buf.scale(true, false); // 2
    buf.scale(true, false); // 4
    buf.scale(true, false); // 8
    assert_eq!(buf.logical_chunks(), 8);
    assert_eq!(buf.scale(false, true), 4);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let steps = 10_000usize;
    let capacity = rng.gen_range(1..512u32);
    let mut buf = LogicalBuffer::new(capacity, 2);
    for _ in 0..steps {
        let e_ttft = rng.gen_bool(0.4);
        let e_tpot = rng.gen_bool(0.4);
        let before = buf.logical_chunks();
        let after = buf.scale(e_ttft, e_tpot);
        assert!(after >= 1 && after <= capacity);
        if e_tpot {
            assert!(after <= before, "TPOT branch must never grow the buffer");
        }
    }
    println!(
        "ACCEPTANCE 4 PASS: 1 <= B_logic <= B_max held over {steps} random events \
         with TPOT priority; (8, alpha=2, TPOT) -> 4"
    );
}

// ---------------------------------------------------------------------------
// 5. No hold-and-wait across all acceptance runs
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_reservation_completeness() {
    // every run in the shared set executes with reservation-completeness
    // checks live inside the engine; any partial grant aborts the run and
    // panics inside runs()
    let r = runs();
    let all = [
        &r.elastic_2k,
        &r.static_2k,
        &r.elastic_128k,
        &r.static_128k,
        &r.buffer_run,
        &r.trace_elastic,
        &r.trace_static,
    ];
    let total_iterations: u64 = all.iter().map(|r| r.iterations).sum();
    for report in all {
        assert!(report.requests.iter().all(|q| q.finish_s.is_finite()));
    }
    // the buffer path must actually have been exercised by the set
    assert!(r.buffer_run.pools.offloaded_requests >= 1);
    assert!(r.buffer_run.pools.fetched_requests >= 1);
    assert_eq!(
        r.buffer_run.pools.offloaded_chunks,
        r.buffer_run.pools.fetched_chunks,
        "offloaded KV must be fetched back in full"
    );
    println!(
        "ACCEPTANCE 5 PASS: reservation completeness held across {} iterations in 7 runs \
         (including {} offloads / {} fetches)",
        total_iterations, r.buffer_run.pools.offloaded_requests, r.buffer_run.pools.fetched_requests
    );
}

// ---------------------------------------------------------------------------
// 6. Transfer overlap is fully hidden in the pipelined regime
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_overlap_correctness() {
    let mut cases = 0usize;
    for layers in [1u64, 2, 4, 8, 32, 80] {
        for compute_ms in [0u64, 1, 5, 20, 100, 1000] {
            for xfer_ms in [0u64, 1, 5, 20, 100, 1000] {
                let compute = compute_ms as f64 * 1e-3;
                let xfer = xfer_ms as f64 * 1e-3;
                let delay = footprint::offload_overlap_delay(compute, xfer, layers);
                let hidden = compute * (layers - 1) as f64 / layers as f64;
                if xfer <= hidden {
                    assert_eq!(delay, 0.0, "L={layers} compute={compute} xfer={xfer}");
                } else {
                    assert!((delay - (xfer - hidden)).abs() < 1e-12);
                }
                cases += 1;
            }
        }
    }
    println!(
        "ACCEPTANCE 6 PASS: exposed transfer delay is zero exactly when \
         xfer <= compute*(L-1)/L over {cases} grid points"
    );
}

// ---------------------------------------------------------------------------
// 7. Directional comparative: TTFT under contention
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_ttft_directional() {
    let r = runs();
    let static_attainment = r.static_2k.slo.unwrap().attainment;
    assert!(
        static_attainment < 0.90,
        "static must be saturated at this rate (attainment {static_attainment})"
    );
    let ratio = r.static_2k.ttft.mean / r.elastic_2k.ttft.mean;
    assert!(
        ratio >= 2.0,
        "elastic TTFT must improve >= 2x, got {ratio:.1}x \
         (elastic {:.3}s, static {:.3}s)",
        r.elastic_2k.ttft.mean,
        r.static_2k.ttft.mean
    );
    assert!(r.elastic_2k_wall < 60.0 && r.static_2k_wall < 60.0);
    println!(
        "ACCEPTANCE 7 PASS: 2K-2K contention: elastic mean TTFT {:.3}s vs static {:.3}s \
         ({ratio:.0}x; static attainment {static_attainment:.2}), walls {:.1}s/{:.1}s",
        r.elastic_2k.ttft.mean, r.static_2k.ttft.mean, r.elastic_2k_wall, r.static_2k_wall
    );
}

// ---------------------------------------------------------------------------
// 8. Directional comparative: long-context batch and decode throughput
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_long_context_directional() {
    let r = runs();
    let batch_ratio = r.elastic_128k.max_decode_batch as f64 / r.static_128k.max_decode_batch as f64;
    let tput_ratio = r.elastic_128k.decode_throughput_tps / r.static_128k.decode_throughput_tps;
    assert!(
        batch_ratio >= 2.0,
        "decode batch ratio {batch_ratio:.2} (elastic {} vs static {})",
        r.elastic_128k.max_decode_batch,
        r.static_128k.max_decode_batch
    );
    assert!(
        tput_ratio >= 1.3,
        "decode throughput ratio {tput_ratio:.2} (elastic {:.1} vs static {:.1} tok/s)",
        r.elastic_128k.decode_throughput_tps,
        r.static_128k.decode_throughput_tps
    );
    assert!(r.comparative_128k_wall < 120.0);
    println!(
        "ACCEPTANCE 8 PASS: 128K-8K offline: max decode batch {}x ({} vs {}), decode \
         throughput {:.2}x ({:.1} vs {:.1} tok/s), wall {:.1}s",
        batch_ratio,
        r.elastic_128k.max_decode_batch,
        r.static_128k.max_decode_batch,
        tput_ratio,
        r.elastic_128k.decode_throughput_tps,
        r.static_128k.decode_throughput_tps,
        r.comparative_128k_wall
    );
}

// ---------------------------------------------------------------------------
// 9. Static-mode purity
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_static_purity() {
    let r = runs();
    for (name, report) in [
        ("2k-2k", &r.static_2k),
        ("128k-8k", &r.static_128k),
        ("trace", &r.trace_static),
    ] {
        assert_eq!(report.pools.inflated_chunks, 0, "{name}: inflation");
        assert_eq!(report.pools.deflated_chunks, 0, "{name}: deflation");
        assert_eq!(report.pools.offloaded_requests, 0, "{name}: offloads");
        assert_eq!(report.pools.fetched_requests, 0, "{name}: fetches");
        let first = &report.series[0];
        assert!(
            report
                .series
                .iter()
                .all(|p| p.kv_owned_chunks == first.kv_owned_chunks
                    && p.act_owned_chunks == first.act_owned_chunks),
            "{name}: ownership split changed during a static run"
        );
    }
    println!(
        "ACCEPTANCE 9 PASS: zero ownership transfers and zero offloads across all \
         static runs (2k-2k, 128k-8k, trace)"
    );
}

// ---------------------------------------------------------------------------
// 10. Determinism: byte-identical reports
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_determinism() {
    let w = WorkloadSpec::poisson(1.0, 2048, 2048, 40, 42);
    let mut cfg = sim_cfg(Mode::Elastic, llama_like(262_144, 24.0), a100(80_000_000_000));
    cfg.slo = Some(sim::calibrate_slo(&cfg, 2048, 2048, 25.0).unwrap());
    let a = serde_json::to_vec(&sim::run(&cfg, &w).unwrap()).unwrap();
    let b = serde_json::to_vec(&sim::run(&cfg, &w).unwrap()).unwrap();
    assert_eq!(a, b, "reports must be byte-identical for a fixed seed");
    // and a different seed actually changes the bytes
    let w2 = WorkloadSpec::poisson(1.0, 2048, 2048, 40, 43);
    let c = serde_json::to_vec(&sim::run(&cfg, &w2).unwrap()).unwrap();
    assert_ne!(a, c);
    println!(
        "ACCEPTANCE 10 PASS: identical (config, seed) reproduced byte-identical \
         {}-byte JSON reports",
        a.len()
    );
}

// ---------------------------------------------------------------------------
// 11. Mapping-cost share stays in the calibration band
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_vmm_overhead_band() {
    let r = runs();
    let share = r.elastic_2k.vmm.share_of_makespan;
    assert!(
        (0.0..=0.10).contains(&share),
        "VMM critical share {share} outside [0, 0.10]"
    );
    println!(
        "ACCEPTANCE 11 PASS: VMM critical-path share {:.4} of makespan in the online \
         2K-2K run (band 0..0.10; {} maps, {} unmaps)",
        share, r.elastic_2k.vmm.map_count, r.elastic_2k.vmm.unmap_count
    );
}

// ---------------------------------------------------------------------------
// supporting directional checks used by the sweep tooling
// ---------------------------------------------------------------------------

#[test]
fn lazy_deflation_stays_idle_without_activation_shortfall() {
    // the 2K-2K contention run grows the KV side heavily but its activation
    // demand is always covered, so no chunk ever travels back
    let r = runs();
    assert!(r.elastic_2k.pools.inflated_chunks > 0);
    assert_eq!(r.elastic_2k.pools.deflated_chunks, 0);
    println!(
        "PASS: contention run inflated {} chunks and never deflated",
        r.elastic_2k.pools.inflated_chunks
    );
}

#[test]
fn offloaded_requests_complete_and_ttft_precedes_fetch() {
    let r = runs();
    let offloaded: Vec<_> = r
        .buffer_run
        .requests
        .iter()
        .filter(|q| q.was_offloaded)
        .collect();
    assert!(!offloaded.is_empty());
    for q in offloaded {
        assert!(q.ttft_s.is_finite() && q.finish_s.is_finite());
        // TTFT was fixed at prefill completion; the fetch happened later
        assert!(q.finish_s > q.arrival_s + q.ttft_s);
    }
    println!("PASS: buffer-path requests finished with TTFT fixed at prefill");
}
