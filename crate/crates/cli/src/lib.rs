//! Experiment configuration, trace ingestion, and the command
//! implementations behind the `emsim` binary.
//!
//! Configs are TOML with one section per component; unknown keys are
//! rejected and every invariant violation is reported as a field-level
//! error. The resolved ("effective") config is written next to each report
//! so a run can be reproduced from its outputs alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, bail};
use serde::{Deserialize, Serialize};

use emsim_core::footprint::{
    self, DEFAULT_CHUNK_BYTES, DEFAULT_PREMAP_BUDGET_BYTES, DeviceSpec, ModelSpec,
};
use emsim_core::report::Report;
use emsim_core::sim::{self, BufferParams, Mode, SchedulerParams, SimConfig};
use emsim_core::workload::{TraceRecord, WorkloadSpec};

pub const DEFAULT_SLO_MULTIPLIER: f64 = 25.0;

fn default_model_name() -> String {
    "model".into()
}
fn default_act_coeff() -> f64 {
    24.0
}
fn default_xfer_bw() -> f64 {
    25.0e9
}
fn default_chunk_bytes() -> u64 {
    DEFAULT_CHUNK_BYTES
}
fn default_map_cost() -> f64 {
    5.0e-6
}
fn default_unmap_cost() -> f64 {
    1.0e-5
}
fn default_premap_budget() -> u64 {
    DEFAULT_PREMAP_BUDGET_BYTES
}
fn default_true() -> bool {
    true
}
fn default_buffer_capacity() -> u32 {
    8192
}
fn default_alpha() -> u32 {
    2
}
fn default_window() -> usize {
    5
}
fn default_threshold() -> u32 {
    3
}
fn default_slo_multiplier() -> f64 {
    DEFAULT_SLO_MULTIPLIER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_model_name")]
    pub name: String,
    pub n_layers: u64,
    pub hidden: u64,
    pub n_heads: u64,
    pub n_kv_heads: u64,
    pub head_dim: u64,
    pub n_params: u64,
    pub dtype_bytes: u64,
    pub max_context: u64,
    #[serde(default = "default_act_coeff")]
    pub act_coeff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub hbm_bytes: u64,
    pub mem_bw: f64,
    pub compute_rate: f64,
    #[serde(default = "default_xfer_bw")]
    pub xfer_bw: f64,
    #[serde(default = "default_chunk_bytes")]
    pub chunk_bytes: u64,
    #[serde(default = "default_map_cost")]
    pub map_cost_s: f64,
    #[serde(default = "default_unmap_cost")]
    pub unmap_cost_s: f64,
    #[serde(default = "default_premap_budget")]
    pub premap_budget_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    /// Reserved headroom in chunks; omitted means 2% of the pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub headroom_chunks: Option<u32>,
    #[serde(default = "default_true")]
    pub prefill_prioritized: bool,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            headroom_chunks: None,
            prefill_prioritized: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferSection {
    #[serde(default = "default_buffer_capacity")]
    pub capacity_chunks: u32,
    #[serde(default = "default_alpha")]
    pub alpha: u32,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_threshold")]
    pub threshold_count: u32,
}

impl Default for BufferSection {
    fn default() -> Self {
        Self {
            capacity_chunks: default_buffer_capacity(),
            alpha: default_alpha(),
            window: default_window(),
            threshold_count: default_threshold(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKindSection {
    Poisson,
    FixedBatch,
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub kind: WorkloadKindSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSection {
    Elastic,
    Static,
}

impl ModeSection {
    pub fn to_mode(self) -> Mode {
        match self {
            ModeSection::Elastic => Mode::Elastic,
            ModeSection::Static => Mode::Static,
        }
    }
}

fn default_mode() -> ModeSection {
    ModeSection::Elastic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_mode")]
    pub mode: ModeSection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_slo_multiplier")]
    pub slo_multiplier: f64,
    pub model: ModelSection,
    pub device: DeviceSection,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub buffer: BufferSection,
    pub workload: WorkloadSection,
}

impl ExperimentConfig {
    pub fn model_spec(&self) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            name: m.name.clone(),
            n_layers: m.n_layers,
            hidden: m.hidden,
            n_heads: m.n_heads,
            n_kv_heads: m.n_kv_heads,
            head_dim: m.head_dim,
            n_params: m.n_params,
            dtype_bytes: m.dtype_bytes,
            max_context: m.max_context,
            act_coeff: m.act_coeff,
        }
    }

    pub fn device_spec(&self) -> DeviceSpec {
        let d = &self.device;
        DeviceSpec {
            hbm_bytes: d.hbm_bytes,
            mem_bw: d.mem_bw,
            compute_rate: d.compute_rate,
            xfer_bw: d.xfer_bw,
            chunk_bytes: d.chunk_bytes,
            map_cost_s: d.map_cost_s,
            unmap_cost_s: d.unmap_cost_s,
            premap_budget_bytes: d.premap_budget_bytes,
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            model: self.model_spec(),
            device: self.device_spec(),
            scheduler: SchedulerParams {
                headroom_chunks: self.scheduler.headroom_chunks,
                prefill_prioritized: self.scheduler.prefill_prioritized,
            },
            buffer: BufferParams {
                capacity_chunks: self.buffer.capacity_chunks,
                alpha: self.buffer.alpha,
                window: self.buffer.window,
                threshold_count: self.buffer.threshold_count,
            },
            slo: None,
            mode: self.mode.to_mode(),
        }
    }

    /// Collects every invariant violation rather than stopping at the first.
    pub fn validate(&self) -> anyhow::Result<()> {
        let mut errs: Vec<String> = Vec::new();
        if let Err(e) = self.model_spec().validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.device_spec().validate() {
            errs.push(e.to_string());
        }
        if self.buffer.capacity_chunks < 1 {
            errs.push("buffer.capacity_chunks must be >= 1".into());
        }
        if self.buffer.alpha < 2 {
            errs.push("buffer.alpha must be >= 2".into());
        }
        if self.buffer.window < self.buffer.threshold_count as usize
            || self.buffer.threshold_count < 1
        {
            errs.push("buffer requires window >= threshold_count >= 1".into());
        }
        if !(self.slo_multiplier > 0.0) {
            errs.push("slo_multiplier must be > 0".into());
        }
        match self.workload.kind {
            WorkloadKindSection::Poisson => {
                if !matches!(self.workload.rate, Some(r) if r > 0.0) {
                    errs.push("workload.rate must be > 0 for poisson".into());
                }
                if self.workload.input_tokens.unwrap_or(0) == 0
                    || self.workload.output_tokens.unwrap_or(0) == 0
                {
                    errs.push("workload.input_tokens/output_tokens must be >= 1".into());
                }
                if self.workload.count.unwrap_or(0) == 0 {
                    errs.push("workload.count must be >= 1".into());
                }
            }
            WorkloadKindSection::FixedBatch => {
                if self.workload.input_tokens.unwrap_or(0) == 0
                    || self.workload.output_tokens.unwrap_or(0) == 0
                {
                    errs.push("workload.input_tokens/output_tokens must be >= 1".into());
                }
                if self.workload.count.unwrap_or(0) == 0 {
                    errs.push("workload.count must be >= 1".into());
                }
            }
            WorkloadKindSection::Trace => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            bail!("invalid config:\n  - {}", errs.join("\n  - "))
        }
    }

    /// Builds the workload, reading a trace file when the config (or the
    /// `--trace` override) calls for one.
    pub fn workload_spec(&self, trace_override: Option<&Path>) -> anyhow::Result<WorkloadSpec> {
        match self.workload.kind {
            WorkloadKindSection::Poisson => Ok(WorkloadSpec::poisson(
                self.workload.rate.unwrap(),
                self.workload.input_tokens.unwrap(),
                self.workload.output_tokens.unwrap(),
                self.workload.count.unwrap(),
                self.seed,
            )),
            WorkloadKindSection::FixedBatch => Ok(WorkloadSpec::fixed_batch(
                self.workload.input_tokens.unwrap(),
                self.workload.output_tokens.unwrap(),
                self.workload.count.unwrap(),
                self.seed,
            )),
            WorkloadKindSection::Trace => {
                let path = trace_override
                    .map(Path::to_path_buf)
                    .or_else(|| self.workload.trace_path.clone())
                    .context("trace workload requires workload.trace_path or --trace")?;
                Ok(WorkloadSpec::trace(ingest_trace(&path)?))
            }
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string_pretty(self).context("serializing effective config")
    }
}

/// Parses and validates an experiment config file.
pub fn parse_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a JSON-lines trace: one record per line with `arrival_s`,
/// `input_tokens` and `output_tokens`. Records arriving out of order are
/// accepted with a warning; the workload sorts them.
pub fn ingest_trace(path: &Path) -> anyhow::Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading trace {}", path.display()))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(line)
            .with_context(|| format!("{}: line {}: malformed record", path.display(), lineno + 1))?;
        if rec.input_tokens == 0 || rec.output_tokens == 0 {
            bail!(
                "{}: line {}: input_tokens and output_tokens must be >= 1",
                path.display(),
                lineno + 1
            );
        }
        if !(rec.arrival_s >= 0.0) {
            bail!("{}: line {}: arrival_s must be >= 0", path.display(), lineno + 1);
        }
        records.push(rec);
    }
    if records.is_empty() {
        bail!("{}: trace contains no records", path.display());
    }
    if records.windows(2).any(|w| w[0].arrival_s > w[1].arrival_s) {
        eprintln!(
            "warning: {}: arrivals not sorted; sorting by arrival time",
            path.display()
        );
    }
    Ok(records)
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn write_outputs(
    out: &Path,
    cfg: &ExperimentConfig,
    report: &Report,
    plans: &[emsim_core::report::PlanRecord],
) -> anyhow::Result<()> {
    fs::write(out, serde_json::to_vec_pretty(report)?)
        .with_context(|| format!("writing {}", out.display()))?;
    fs::write(sidecar(out, "series.csv"), report.series_csv())?;
    let mut jsonl = String::new();
    for p in plans {
        jsonl.push_str(&serde_json::to_string(p)?);
        jsonl.push('\n');
    }
    fs::write(sidecar(out, "plans.jsonl"), jsonl)?;
    fs::write(sidecar(out, "config.toml"), cfg.to_toml()?)?;
    Ok(())
}

/// Resolves the SLO targets for a run: Poisson workloads are calibrated
/// against their own unloaded latencies; other kinds carry no SLO.
fn resolve_slo(cfg: &ExperimentConfig, sim: &SimConfig) -> anyhow::Result<Option<sim::SloTargets>> {
    match cfg.workload.kind {
        WorkloadKindSection::Poisson => {
            let slo = sim::calibrate_slo(
                sim,
                cfg.workload.input_tokens.unwrap(),
                cfg.workload.output_tokens.unwrap(),
                cfg.slo_multiplier,
            )?;
            Ok(Some(slo))
        }
        _ => Ok(None),
    }
}

/// `simulate`: one full run, report + sidecars written under `--out`.
pub fn cmd_simulate(
    cfg: &ExperimentConfig,
    trace: Option<&Path>,
    out: &Path,
) -> anyhow::Result<Report> {
    let mut sim_cfg = cfg.sim_config();
    sim_cfg.slo = resolve_slo(cfg, &sim_cfg)?;
    let workload = cfg.workload_spec(trace)?;
    let (report, plans) = sim::run_with_plans(&sim_cfg, &workload)?;
    write_outputs(out, cfg, &report, &plans)?;
    let mut s = String::new();
    writeln!(s, "mode            {}", report.mode)?;
    writeln!(s, "requests        {}", report.requests.len())?;
    writeln!(s, "makespan        {:.3} s", report.makespan_s)?;
    writeln!(
        s,
        "ttft            mean {:.4} s, p99 {:.4} s",
        report.ttft.mean, report.ttft.p99
    )?;
    writeln!(
        s,
        "tpot            mean {:.5} s, p99 {:.5} s",
        report.tpot.mean, report.tpot.p99
    )?;
    writeln!(s, "throughput      {:.1} tok/s", report.output_throughput_tps)?;
    writeln!(s, "max decode batch {}", report.max_decode_batch)?;
    if let Some(slo) = &report.slo {
        writeln!(s, "slo attainment  {:.3}", slo.attainment)?;
    }
    writeln!(s, "report          {}", out.display())?;
    print!("{s}");
    Ok(report)
}

/// `sweep-rate`: goodput search over an ascending rate grid.
pub fn cmd_sweep_rate(
    cfg: &ExperimentConfig,
    rates: &[f64],
    out: &Path,
) -> anyhow::Result<sim::GoodputResult> {
    if cfg.workload.kind != WorkloadKindSection::Poisson {
        bail!("sweep-rate requires a poisson workload");
    }
    let sim_cfg = cfg.sim_config();
    let result = sim::goodput_search(
        &sim_cfg,
        cfg.workload.input_tokens.unwrap(),
        cfg.workload.output_tokens.unwrap(),
        cfg.workload.count.unwrap(),
        cfg.seed,
        cfg.slo_multiplier,
        rates,
    )?;
    fs::write(out, serde_json::to_vec_pretty(&result)?)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "slo: ttft {:.4} s, tpot {:.5} s (x{})",
        result.slo.ttft_s, result.slo.tpot_s, cfg.slo_multiplier
    );
    println!("{:>8}  {:>10}  {:>10}  {:>10}", "rate", "attainment", "ttft", "tpot");
    for p in &result.points {
        println!(
            "{:>8.3}  {:>10.3}  {:>10.4}  {:>10.5}",
            p.rate, p.attainment, p.mean_ttft_s, p.mean_tpot_s
        );
    }
    if result.attained {
        println!("goodput: {} req/s", result.goodput);
    } else {
        println!("goodput: 0 (no grid rate reached 90% attainment)");
    }
    Ok(result)
}

#[derive(Debug, Serialize)]
pub struct FootprintRow {
    pub context: u64,
    pub weights_frac: f64,
    pub activation_frac: f64,
    pub kv_frac: f64,
}

/// `footprint`: memory-composition shares across a context ladder.
pub fn cmd_footprint(cfg: &ExperimentConfig, out: Option<&Path>) -> anyhow::Result<Vec<FootprintRow>> {
    let model = cfg.model_spec();
    let device = cfg.device_spec();
    let mut contexts: Vec<u64> = [2048u64, 8192, 32_768, 131_072, model.max_context]
        .into_iter()
        .filter(|c| *c <= model.max_context)
        .collect();
    contexts.dedup();
    let mut rows = Vec::new();
    println!(
        "{:>10}  {:>9}  {:>11}  {:>9}",
        "context", "weights", "activation", "kv"
    );
    for context in contexts {
        let c = footprint::composition_report(&model, &device, context, 1)?;
        println!(
            "{:>10}  {:>8.1}%  {:>10.1}%  {:>8.1}%",
            context,
            100.0 * c.weights_frac,
            100.0 * c.activation_frac,
            100.0 * c.kv_frac
        );
        rows.push(FootprintRow {
            context,
            weights_frac: c.weights_frac,
            activation_frac: c.activation_frac,
            kv_frac: c.kv_frac,
        });
    }
    if let Some(out) = out {
        fs::write(out, serde_json::to_vec_pretty(&rows)?)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
pub struct CompareRow {
    pub metric: String,
    pub elastic: f64,
    pub static_: f64,
    pub ratio: f64,
}

#[derive(Debug, Serialize)]
pub struct CompareResult {
    pub rows: Vec<CompareRow>,
}

/// `compare`: the same workload through both modes, normalized.
pub fn cmd_compare(
    cfg: &ExperimentConfig,
    trace: Option<&Path>,
    out: &Path,
) -> anyhow::Result<CompareResult> {
    let workload = cfg.workload_spec(trace)?;
    let mut run_mode = |mode: Mode| -> anyhow::Result<Report> {
        let mut c = cfg.clone();
        c.mode = match mode {
            Mode::Elastic => ModeSection::Elastic,
            Mode::Static => ModeSection::Static,
        };
        let mut sim_cfg = c.sim_config();
        sim_cfg.slo = resolve_slo(&c, &sim_cfg)?;
        Ok(sim::run(&sim_cfg, &workload)?)
    };
    let elastic = run_mode(Mode::Elastic)?;
    let stat = run_mode(Mode::Static)?;
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { f64::INFINITY };
    let rows = vec![
        CompareRow {
            metric: "total_throughput_tps".into(),
            elastic: elastic.output_throughput_tps,
            static_: stat.output_throughput_tps,
            ratio: ratio(elastic.output_throughput_tps, stat.output_throughput_tps),
        },
        CompareRow {
            metric: "decode_throughput_tps".into(),
            elastic: elastic.decode_throughput_tps,
            static_: stat.decode_throughput_tps,
            ratio: ratio(elastic.decode_throughput_tps, stat.decode_throughput_tps),
        },
        CompareRow {
            metric: "max_decode_batch".into(),
            elastic: elastic.max_decode_batch as f64,
            static_: stat.max_decode_batch as f64,
            ratio: ratio(
                elastic.max_decode_batch as f64,
                stat.max_decode_batch as f64,
            ),
        },
    ];
    println!(
        "{:<24}  {:>12}  {:>12}  {:>8}",
        "metric", "elastic", "static", "ratio"
    );
    for r in &rows {
        println!(
            "{:<24}  {:>12.2}  {:>12.2}  {:>7.2}x",
            r.metric, r.elastic, r.static_, r.ratio
        );
    }
    let result = CompareResult { rows };
    fs::write(out, serde_json::to_vec_pretty(&result)?)
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(result)
}

pub fn parse_rates(s: &str) -> anyhow::Result<Vec<f64>> {
    let rates: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad rate {p:?}")))
        .collect::<anyhow::Result<_>>()?;
    if rates.is_empty() {
        bail!("--rates must list at least one rate");
    }
    if rates.windows(2).any(|w| w[0] >= w[1]) {
        bail!("--rates must be strictly ascending");
    }
    Ok(rates)
}
