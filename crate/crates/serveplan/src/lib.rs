//! Latency-minimizing configuration planning for multi-instance model serving
//! on multicore CPUs.
//!
//! Serving a model with every core devoted to intra-op parallelism hits
//! diminishing returns; a handful of thinner instances, each with a few
//! threads and a slice of the batch, is frequently faster. This crate picks
//! those splits and lets you rehearse them:
//!
//! * [`profile`] — load or synthesize single-instance latency tables
//!   `L(t, b)` over a grid of thread counts and power-of-two batch sizes.
//! * [`optimizer`] — a two-dimensional knapsack DP over profiled items that
//!   returns the instance mix minimizing expected batch latency for a thread
//!   budget `T` and batch size `B`.
//! * [`estimator`] — an EWMA queue-depth tracker that proposes power-of-two
//!   batch sizes and rate-limits reconfiguration decisions.
//! * [`allocator`] — socket-local, round-robin core assignment producing
//!   immutable pinning plans.
//! * [`interference`] — penalty models (SIMD downclocking, loaded memory
//!   latency) for quantifying the gap between isolated profiles and
//!   concurrent execution.
//! * [`sim`] — a deterministic discrete-event simulator of the serving loop:
//!   batch aggregation, partitioned dispatch, and zero-downtime
//!   active-passive reconfiguration.
//!
//! Latency math is generic over the scalar type; the simulator and the CLI
//! use the `f64` aliases exported at the crate root.

use std::fmt;

pub mod allocator;
pub mod estimator;
pub mod interference;
pub mod optimizer;
pub mod profile;
pub mod sim;

/// Floating-point scalar used for latency arithmetic: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + fmt::Debug + fmt::Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Profile table over `f64` latencies, as used by the simulator and the CLI.
pub type Profile = profile::ProfileTable<f64>;
/// Serving configuration over `f64` latencies.
pub type Configuration = optimizer::Configuration<f64>;
/// Solver memo table over `f64` latencies.
pub type OptTable = optimizer::OptTable<f64>;
/// Configuration cache over `f64` latencies.
pub type ConfigCache = optimizer::ConfigCache<f64>;
/// Batch-size estimator over `f64` queue-depth averages.
pub type BatchEstimator = estimator::BatchEstimator<f64>;
