//! Deterministic discrete-event simulator for elastic GPU memory management
//! in LLM serving.
//!
//! The crate models device memory as a unified pool of fixed-size physical
//! chunks mapped into virtualized tensor slots. KV-cache and activation
//! tensors draw from the same pool under ownership labels, and chunks move
//! between the two sides at runtime (inflation/deflation) under an
//! admission scheduler that can also spill KV state to a CPU-side buffer.
//! A static-partition baseline shares the same engine so the two policies
//! can be compared run-for-run.
//!
//! Modules:
//! - [`footprint`]: byte sizing and latency cost model
//! - [`vmm`]: virtual address spaces, chunk mapping, deferred unmaps
//! - [`pools`]: slot pools, best-fit reuse, ownership transfer
//! - [`cpu_buffer`]: host-side KV buffer and SLO-aware scaling
//! - [`scheduler`]: iteration-level admission planning
//! - [`workload`]: arrival generation and traces
//! - [`sim`]: the engine, comparative runs, goodput search
//! - [`report`]: metrics aggregation and output records

pub mod cpu_buffer;
pub mod footprint;
pub mod pools;
pub mod report;
pub mod scheduler;
pub mod sim;
pub mod vmm;
pub mod workload;
