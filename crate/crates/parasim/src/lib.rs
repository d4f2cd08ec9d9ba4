//! Mechanism library and deterministic discrete-event simulator for online
//! DP/TP parallelism switching in LLM serving.
//!
//! The pieces mirror a serving stack that can merge independent data-parallel
//! engines into tensor-parallel groups and split them back while requests are
//! in flight:
//!
//! - [`weights`]: load-once parameter stores with rank-aware zero-copy shard
//!   views, plus a toy-scale numeric check of the column/row partitioning.
//! - [`kvcache`]: a fixed physical block pool whose per-request token
//!   capacity rescales with the TP degree, making switches metadata-only.
//! - [`comms`]: eagerly initialized contiguous rank groups, collectives with
//!   mismatch detection, and the control-plane workload sync.
//! - [`scheduler`]: the per-iteration scheduling protocol and the three mode
//!   switching strategies (sequential, soft preempt, hard preempt).
//! - [`sim`]: the event loop, cost model, and comparison harness.
//! - [`workload`]: seeded bursty trace generation and the trace file format.
//! - [`metrics`]: TTFT/TPOT/ILT/queue/throughput accounting.

pub mod comms;
pub mod deploy;
pub mod kvcache;
pub mod metrics;
pub mod model;
pub mod request;
pub mod scheduler;
pub mod sim;
pub mod time;
pub mod weights;
pub mod workload;

pub use deploy::{validate_deployment, DeploymentConfig};
pub use model::ModelSpec;
pub use request::{ExecMode, Priority, Request, RequestId, RequestState};
pub use time::{SimDuration, SimTime};
