//! Run reports: a machine-readable summary plus a per-batch timeline.

use serde::Serialize;

use super::{Micros, Phase};
use crate::allocator::{AllocationPlan, InstanceId};
use crate::Configuration;

/// Nearest-rank percentiles over a latency sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_latencies_ms(mut samples: Vec<f64>) -> Self {
        if samples.is_empty() {
            return Self {
                mean_ms: 0.0,
                p50_ms: 0.0,
                p95_ms: 0.0,
                p99_ms: 0.0,
                max_ms: 0.0,
            };
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len();
        let rank = |q: f64| samples[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        Self {
            mean_ms: samples.iter().sum::<f64>() / n as f64,
            p50_ms: rank(0.50),
            p95_ms: rank(0.95),
            p99_ms: rank(0.99),
            max_ms: samples[n - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseChange {
    pub at_ms: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigChange {
    pub at_ms: f64,
    pub config: Configuration,
}

/// One served batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRecord {
    pub dispatched_at: Micros,
    pub completed_at: Micros,
    pub instance: InstanceId,
    pub size: u32,
    pub oldest_arrival: Micros,
    pub phase: Phase,
    pub config: String,
    pub timeout_fired: bool,
}

impl BatchRecord {
    /// End-to-end batch latency: completion minus the oldest member arrival,
    /// so queueing delay is visible.
    pub fn latency_ms(&self) -> f64 {
        (self.completed_at - self.oldest_arrival) as f64 / 1_000.0
    }

    pub fn service_ms(&self) -> f64 {
        (self.completed_at - self.dispatched_at) as f64 / 1_000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub model: String,
    pub topology_cores: usize,
    pub total_requests: usize,
    pub completed_requests: usize,
    pub dropped_requests: usize,
    pub duration_ms: f64,
    pub batches: usize,
    pub timeout_batches: usize,
    pub reconfigurations: usize,
    pub suppressed_decisions: usize,
    pub infeasible_decisions: usize,
    pub final_batch: u32,
    pub request_latency_ms: LatencyStats,
    pub batch_latency_ms: LatencyStats,
    pub phase_log: Vec<PhaseChange>,
    pub config_history: Vec<ConfigChange>,
    /// Core pinning of the serving set when the run ended.
    pub allocation: AllocationPlan,
}

/// Everything a run produced: the summary plus raw logs for the timeline and
/// for assertions in tests.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub summary: RunSummary,
    /// Served batches sorted by completion time.
    pub batches: Vec<BatchRecord>,
    /// Per-request `(arrival, completion)` pairs in arrival order.
    pub requests: Vec<(Micros, Option<Micros>)>,
    /// Dispatch instants, one entry per batch.
    pub dispatch_times: Vec<Micros>,
    /// Queue depth sampled at each dispatch round.
    pub depth_log: Vec<(Micros, u64)>,
}

impl RunReport {
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }

    /// `time_ms,batch_latency_ms,phase,active_config` rows, one per batch,
    /// ordered by completion time. Formatting is fixed so identical runs
    /// produce identical bytes.
    pub fn timeline_csv(&self) -> String {
        let mut out = String::from("time_ms,batch_latency_ms,phase,active_config\n");
        for record in &self.batches {
            out.push_str(&format!(
                "{:.3},{:.3},{},{}\n",
                record.completed_at as f64 / 1_000.0,
                record.latency_ms(),
                record.phase,
                record.config,
            ));
        }
        out
    }
}
