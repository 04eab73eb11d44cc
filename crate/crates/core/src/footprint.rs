//! Cost model: pure functions mapping model/device parameters and token
//! counts to bytes and seconds.
//!
//! Everything else in the crate (pool sizing, admission demands, iteration
//! latency charging) is expressed in terms of these formulas, so they are
//! deliberately small and auditable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Transformer architecture parameters driving all byte formulas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub n_layers: u64,
    pub hidden: u64,
    pub n_heads: u64,
    pub n_kv_heads: u64,
    pub head_dim: u64,
    pub n_params: u64,
    pub dtype_bytes: u64,
    pub max_context: u64,
    /// Dimensionless multiplier for per-token activation bytes:
    /// one token of activation occupies `act_coeff * hidden * dtype_bytes`.
    pub act_coeff: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), FootprintError> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("hidden", self.hidden),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("dtype_bytes", self.dtype_bytes),
            ("max_context", self.max_context),
        ] {
            if v == 0 {
                errs.push(format!("model.{name} must be > 0"));
            }
        }
        if self.n_kv_heads > self.n_heads {
            errs.push("model.n_kv_heads must be <= model.n_heads".into());
        }
        if !(self.act_coeff > 0.0) {
            errs.push("model.act_coeff must be > 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(FootprintError::InvalidSpec(errs.join("; ")))
        }
    }
}

/// Hardware parameters: capacities, bandwidths and per-chunk mapping costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub hbm_bytes: u64,
    /// Device memory bandwidth, bytes/s.
    pub mem_bw: f64,
    /// Peak compute rate, flop/s.
    pub compute_rate: f64,
    /// Device<->host transfer bandwidth, bytes/s.
    pub xfer_bw: f64,
    pub chunk_bytes: u64,
    /// Seconds to map one physical chunk into a virtual span.
    pub map_cost_s: f64,
    /// Seconds to unmap one physical chunk.
    pub unmap_cost_s: f64,
    /// Per-iteration cap on speculative pre-mapping.
    pub premap_budget_bytes: u64,
}

/// Default speculative pre-mapping budget: 50 MiB.
pub const DEFAULT_PREMAP_BUDGET_BYTES: u64 = 50 << 20;
/// Default physical chunk size: 2 MiB.
pub const DEFAULT_CHUNK_BYTES: u64 = 2 << 20;

impl DeviceSpec {
    pub fn validate(&self) -> Result<(), FootprintError> {
        let mut errs: Vec<String> = Vec::new();
        if self.hbm_bytes == 0 {
            errs.push("device.hbm_bytes must be > 0".into());
        }
        if !(self.mem_bw > 0.0) {
            errs.push("device.mem_bw must be > 0".into());
        }
        if !(self.compute_rate > 0.0) {
            errs.push("device.compute_rate must be > 0".into());
        }
        if !(self.xfer_bw > 0.0) {
            errs.push("device.xfer_bw must be > 0".into());
        }
        if self.chunk_bytes == 0 || !self.chunk_bytes.is_power_of_two() {
            errs.push("device.chunk_bytes must be a power of two".into());
        }
        if !(self.map_cost_s >= 0.0) || !(self.unmap_cost_s >= 0.0) {
            errs.push("device map/unmap costs must be >= 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(FootprintError::InvalidSpec(errs.join("; ")))
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FootprintError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("model does not fit: weights need {weights} B but device has {hbm} B")]
    ModelDoesNotFit { weights: u64, hbm: u64 },
}

/// Bytes of KV cache written per token: key and value across all layers.
pub fn kv_bytes_per_token(m: &ModelSpec) -> u64 {
    2 * m.n_layers * m.n_kv_heads * m.head_dim * m.dtype_bytes
}

/// Per-token activation bytes, rounded to an integer so that
/// [`activation_bytes`] is exactly linear in the token count.
pub fn act_bytes_per_token(m: &ModelSpec) -> u64 {
    (m.act_coeff * (m.hidden * m.dtype_bytes) as f64).round() as u64
}

/// Activation footprint for processing `n_tokens` at once.
pub fn activation_bytes(m: &ModelSpec, n_tokens: u64) -> u64 {
    n_tokens * act_bytes_per_token(m)
}

pub fn weights_bytes(m: &ModelSpec) -> u64 {
    m.n_params * m.dtype_bytes
}

/// Fractions of device memory taken by weights, activations and KV capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Composition {
    pub weights_frac: f64,
    pub activation_frac: f64,
    pub kv_frac: f64,
}

/// Splits device memory into weight / activation / KV shares, with the
/// activation slice sized for `concurrency` simultaneous prefills of
/// `context` tokens and KV taking whatever remains.
pub fn composition_report(
    m: &ModelSpec,
    d: &DeviceSpec,
    context: u64,
    concurrency: u64,
) -> Result<Composition, FootprintError> {
    let w = weights_bytes(m);
    if w >= d.hbm_bytes {
        return Err(FootprintError::ModelDoesNotFit {
            weights: w,
            hbm: d.hbm_bytes,
        });
    }
    let hbm = d.hbm_bytes as f64;
    let act = (activation_bytes(m, context) * concurrency).min(d.hbm_bytes - w);
    let kv = d.hbm_bytes - w - act;
    Ok(Composition {
        weights_frac: w as f64 / hbm,
        activation_frac: act as f64 / hbm,
        kv_frac: kv as f64 / hbm,
    })
}

/// Prefill latency for a prompt of `n_tokens`: a*n^2 + b*n, where the
/// quadratic term models self-attention flops and the linear term the
/// per-token pass over the weights.
pub fn prefill_latency(m: &ModelSpec, d: &DeviceSpec, n_tokens: u64) -> f64 {
    let n = n_tokens as f64;
    let a = 4.0 * (m.n_layers * m.hidden) as f64 / d.compute_rate;
    let b = 2.0 * m.n_params as f64 / d.compute_rate;
    a * n * n + b * n
}

/// One decode iteration over `batch` sequences with `resident_kv_bytes` of
/// KV cache on the device; memory-bound sweep over weights plus KV, with a
/// per-token compute overhead.
pub fn decode_step_latency(m: &ModelSpec, d: &DeviceSpec, batch: u64, resident_kv_bytes: u64) -> f64 {
    let sweep = (weights_bytes(m) + resident_kv_bytes) as f64 / d.mem_bw;
    let per_token = 2.0 * m.n_params as f64 / d.compute_rate;
    sweep + per_token * batch as f64
}

/// Device<->host transfer time.
pub fn transfer_time(d: &DeviceSpec, n_bytes: u64) -> f64 {
    n_bytes as f64 / d.xfer_bw
}

/// Exposed (un-hidden) transfer delay when a transfer of `xfer` seconds is
/// pipelined layer-wise against `compute` seconds of work: the first layer
/// cannot overlap, so only `compute * (n_layers-1)/n_layers` hides transfer.
pub fn offload_overlap_delay(compute: f64, xfer: f64, n_layers: u64) -> f64 {
    debug_assert!(n_layers >= 1);
    let hidden = compute * (n_layers - 1) as f64 / n_layers as f64;
    (xfer - hidden).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn llama8b_like() -> ModelSpec {
        ModelSpec {
            name: "llama3-8b-262k".into(),
            n_layers: 32,
            hidden: 4096,
            n_heads: 32,
            n_kv_heads: 8,
            head_dim: 128,
            n_params: 8_000_000_000,
            dtype_bytes: 2,
            max_context: 262_144,
            act_coeff: 24.0,
        }
    }

    pub(crate) fn a100_like() -> DeviceSpec {
        DeviceSpec {
            hbm_bytes: 80_000_000_000,
            mem_bw: 2.0e12,
            compute_rate: 312.0e12,
            xfer_bw: 25.0e9,
            chunk_bytes: DEFAULT_CHUNK_BYTES,
            map_cost_s: 5.0e-6,
            unmap_cost_s: 1.0e-5,
            premap_budget_bytes: DEFAULT_PREMAP_BUDGET_BYTES,
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    #[test]
    fn kv_bytes_matches_hand_arithmetic() {
        assert_eq!(kv_bytes_per_token(&llama8b_like()), 131_072);
        let mut degenerate = llama8b_like();
        degenerate.n_layers = 1;
        degenerate.n_kv_heads = 1;
        degenerate.head_dim = 1;
        degenerate.dtype_bytes = 1;
        assert_eq!(kv_bytes_per_token(&degenerate), 2);
    }

    #[test]
    fn kv_bytes_linear_in_layers() {
        let m = llama8b_like();
        let mut doubled = m.clone();
        doubled.n_layers *= 2;
        assert_eq!(kv_bytes_per_token(&doubled), 2 * kv_bytes_per_token(&m));
    }

    #[test]
    fn activation_bytes_cases() {
        let m = llama8b_like();
        assert_eq!(activation_bytes(&m, 0), 0);
        assert_eq!(activation_bytes(&m, 2048), 402_653_184);
        // exact additivity
        for (a, b) in [(1u64, 2u64), (137, 4096), (999, 1)] {
            assert_eq!(
                activation_bytes(&m, a + b),
                activation_bytes(&m, a) + activation_bytes(&m, b)
            );
        }
    }

    #[test]
    fn weights_bytes_cases() {
        let m = llama8b_like();
        assert_eq!(weights_bytes(&m), 16_000_000_000);
        let mut zero = m.clone();
        zero.n_params = 0;
        assert_eq!(weights_bytes(&zero), 0);
        let mut half = m.clone();
        half.dtype_bytes = 1;
        assert_eq!(weights_bytes(&half) * 2, weights_bytes(&m));
    }

    #[test]
    fn composition_exact_shares() {
        let m = llama8b_like();
        let d = a100_like();
        let c = composition_report(&m, &d, 2048, 1).unwrap();
        // cross-check against the raw byte formulas summed by hand
        let act = 2048u64 * 24 * 4096 * 2;
        assert!(close(c.weights_frac, 16_000_000_000u64 as f64 / 80e9));
        assert!(close(c.activation_frac, act as f64 / 80e9));
        assert!(close(c.kv_frac, (80_000_000_000 - 16_000_000_000 - act) as f64 / 80e9));
        let sum = c.weights_frac + c.activation_frac + c.kv_frac;
        assert!(sum <= 1.0 + 1e-12);
    }

    #[test]
    fn composition_activation_share_grows_with_context() {
        let m = llama8b_like();
        let d = a100_like();
        let small = composition_report(&m, &d, 2048, 1).unwrap();
        let large = composition_report(&m, &d, 200_000, 1).unwrap();
        assert!(large.activation_frac > small.activation_frac);
        assert!(large.kv_frac < small.kv_frac);
    }

    #[test]
    fn composition_zero_concurrency_and_misfit() {
        let m = llama8b_like();
        let d = a100_like();
        let c = composition_report(&m, &d, 2048, 0).unwrap();
        assert_eq!(c.activation_frac, 0.0);
        let mut tiny = d.clone();
        tiny.hbm_bytes = 1_000_000;
        assert!(matches!(
            composition_report(&m, &tiny, 2048, 1),
            Err(FootprintError::ModelDoesNotFit { .. })
        ));
    }

    #[test]
    fn prefill_latency_polynomial_frozen_values() {
        let m = llama8b_like();
        let d = a100_like();
        // frozen from independent evaluation of a*n^2 + b*n with
        // a = 4*32*4096/312e12, b = 2*8e9/312e12
        assert!(close(prefill_latency(&m, &d, 1), 5.128373169230769e-05));
        assert!(close(prefill_latency(&m, &d, 1024), 0.05427485837784615));
        assert!(close(prefill_latency(&m, &d, 2048), 0.11207379248574359));
        assert!(close(prefill_latency(&m, &d, 4096), 0.2382438878916923));
    }

    #[test]
    fn prefill_latency_strictly_superlinear() {
        let m = llama8b_like();
        let d = a100_like();
        for n in [1u64, 7, 64, 1024, 100_000] {
            assert!(prefill_latency(&m, &d, 2 * n) > 2.0 * prefill_latency(&m, &d, n));
        }
    }

    #[test]
    fn decode_step_latency_base_and_affine() {
        let m = llama8b_like();
        let d = a100_like();
        assert!(close(decode_step_latency(&m, &d, 1, 0), 0.008051282051282051));
        assert!(close(
            decode_step_latency(&m, &d, 4, 10 << 30),
            0.013573837325128206
        ));
        // doubling resident KV adds exactly kv/mem_bw
        let kv = 3_000_000_000u64;
        let delta = decode_step_latency(&m, &d, 8, 2 * kv) - decode_step_latency(&m, &d, 8, kv);
        assert!(close(delta, kv as f64 / d.mem_bw));
    }

    #[test]
    fn decode_batching_amortizes() {
        let m = llama8b_like();
        let d = a100_like();
        let per_req_kv = 536_870_912u64; // 0.5 GiB resident per sequence
        let solo = decode_step_latency(&m, &d, 1, per_req_kv);
        for batch in 2u64..=64 {
            let step = decode_step_latency(&m, &d, batch, batch * per_req_kv);
            // per-output-token latency decreases, total grows sublinearly
            assert!(step / (batch as f64) < solo);
            assert!(step < batch as f64 * solo);
        }
    }

    #[test]
    fn transfer_time_cases() {
        let d = a100_like();
        assert_eq!(transfer_time(&d, 0), 0.0);
        assert!(close(transfer_time(&d, 25_000_000_000), 1.0));
        assert!(close(
            transfer_time(&d, 7_777),
            7.0 * transfer_time(&d, 1_111)
        ));
    }

    #[test]
    fn offload_overlap_delay_cases() {
        // fully hidden: 0.3 < 1.0 * 31/32
        assert_eq!(offload_overlap_delay(1.0, 0.3, 32), 0.0);
        assert_eq!(offload_overlap_delay(5.0, 0.0, 32), 0.0);
        // single stage: nothing overlaps
        assert!(close(offload_overlap_delay(1.0, 0.7, 1), 0.7));
        // partially exposed
        assert!(close(offload_overlap_delay(1.0, 1.5, 2), 1.0));
    }

    #[test]
    fn validate_flags_bad_fields() {
        let mut m = llama8b_like();
        m.n_kv_heads = 64;
        assert!(m.validate().is_err());
        let mut d = a100_like();
        d.chunk_bytes = 3_000_000;
        assert!(d.validate().is_err());
    }
}
