//! Interference penalty models for concurrent instances.
//!
//! Profiles are measured one instance at a time; running many instances on
//! one server slows each of them down. Two mechanisms dominate on server
//! CPUs: frequency reduction when most cores run wide SIMD for sustained
//! periods, and memory access latency rising with aggregate bandwidth load.
//! Both are modeled as multiplicative latency factors, so the gap between
//! the isolated expectation and concurrent execution can be quantified
//! without changing the optimizer.

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optimizer::{objective, Configuration, OptimizeError};
use crate::profile::ProfileTable;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum InterferenceError {
    #[error("invalid downclock model: {0}")]
    InvalidDownclock(String),
    #[error("invalid memory curve: {0}")]
    InvalidCurve(String),
    #[error("malformed curve row: {0}")]
    Parse(#[from] csv::Error),
    #[error("failed to read curve: {0}")]
    Io(#[from] std::io::Error),
}

/// Frequency reduction when a large fraction of cores runs SIMD-heavy code.
///
/// Active whenever the busy-core fraction reaches `activation_threshold`;
/// the latency factor is then `base_freq / loaded_freq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownclockModel<S> {
    pub base_freq_ghz: S,
    pub loaded_freq_ghz: S,
    pub activation_threshold: S,
}

impl<S: Scalar> DownclockModel<S> {
    pub fn new(
        base_freq_ghz: S,
        loaded_freq_ghz: S,
        activation_threshold: S,
    ) -> Result<Self, InterferenceError> {
        if loaded_freq_ghz <= S::zero() || loaded_freq_ghz > base_freq_ghz {
            return Err(InterferenceError::InvalidDownclock(format!(
                "need 0 < loaded <= base, got base={base_freq_ghz} loaded={loaded_freq_ghz}"
            )));
        }
        if activation_threshold < S::zero() || activation_threshold > S::one() {
            return Err(InterferenceError::InvalidDownclock(format!(
                "activation threshold must lie in [0, 1], got {activation_threshold}"
            )));
        }
        Ok(Self {
            base_freq_ghz,
            loaded_freq_ghz,
            activation_threshold,
        })
    }

    pub fn factor(&self, simd_fraction: S) -> S {
        if simd_fraction >= self.activation_threshold {
            self.base_freq_ghz / self.loaded_freq_ghz
        } else {
            S::one()
        }
    }
}

impl<S: Scalar> Default for DownclockModel<S> {
    /// 2.6 GHz nominal dropping to 2.2 GHz under all-core SIMD load, typical
    /// of server parts of the Xeon Gold class.
    fn default() -> Self {
        Self {
            base_freq_ghz: S::from_f64(2.6).unwrap(),
            loaded_freq_ghz: S::from_f64(2.2).unwrap(),
            activation_threshold: S::from_f64(0.5).unwrap(),
        }
    }
}

/// Piecewise-linear access-latency multiplier versus aggregate bandwidth.
///
/// Flat near zero load, rising steeply toward saturation. Queries beyond the
/// last point clamp to the last multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryLatencyCurve<S> {
    points: Vec<(S, S)>,
}

impl<S: Scalar> MemoryLatencyCurve<S> {
    pub fn new(points: Vec<(S, S)>) -> Result<Self, InterferenceError> {
        if points.is_empty() {
            return Err(InterferenceError::InvalidCurve("no points".to_owned()));
        }
        if points[0].0 != S::zero() || points[0].1 != S::one() {
            return Err(InterferenceError::InvalidCurve(
                "curve must start at (0, 1.0)".to_owned(),
            ));
        }
        for pair in points.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(InterferenceError::InvalidCurve(
                    "bandwidths must strictly increase".to_owned(),
                ));
            }
            if pair[1].1 < pair[0].1 {
                return Err(InterferenceError::InvalidCurve(
                    "multipliers must be non-decreasing".to_owned(),
                ));
            }
        }
        Ok(Self { points })
    }

    /// Parses `bandwidth_gbps,latency_multiplier` rows; `#` comments allowed.
    pub fn from_csv_reader(reader: impl Read) -> Result<Self, InterferenceError> {
        #[derive(Deserialize)]
        struct Row {
            bandwidth_gbps: f64,
            latency_multiplier: f64,
        }
        let mut csv = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut points = Vec::new();
        for row in csv.deserialize() {
            let row: Row = row?;
            points.push((
                S::from_f64(row.bandwidth_gbps).unwrap_or_else(S::nan),
                S::from_f64(row.latency_multiplier).unwrap_or_else(S::nan),
            ));
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[(S, S)] {
        &self.points
    }

    pub fn multiplier(&self, bandwidth_gbps: S) -> S {
        let bw = if bandwidth_gbps < S::zero() {
            S::zero()
        } else {
            bandwidth_gbps
        };
        let last = *self.points.last().unwrap();
        if bw >= last.0 {
            return last.1;
        }
        for pair in self.points.windows(2) {
            let (x0, y0) = pair[0];
            let (x1, y1) = pair[1];
            if bw <= x1 {
                let t = (bw - x0) / (x1 - x0);
                return y0 + t * (y1 - y0);
            }
        }
        last.1
    }
}

impl<S: Scalar> Default for MemoryLatencyCurve<S> {
    /// Synthetic-calibrated default: flat through light load, knee past the
    /// mid-40s GB/s, steep toward saturation.
    fn default() -> Self {
        let pts = [
            (0.0, 1.0),
            (10.0, 1.0),
            (20.0, 1.015),
            (30.0, 1.045),
            (40.0, 1.085),
            (50.0, 1.13),
            (60.0, 1.19),
            (70.0, 1.28),
            (80.0, 1.42),
            (90.0, 1.62),
            (100.0, 1.9),
        ];
        Self {
            points: pts
                .iter()
                .map(|&(x, y)| (S::from_f64(x).unwrap(), S::from_f64(y).unwrap()))
                .collect(),
        }
    }
}

/// What an instance sees of its neighbors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterferenceContext<S> {
    /// Instances running concurrently, including the one being penalized.
    pub active_instances: u32,
    /// Memory bandwidth one instance generates, GB/s.
    pub per_instance_bandwidth_gbps: S,
    /// Fraction of cores running SIMD-heavy work.
    pub simd_fraction: S,
}

/// Composable interference model selection.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum InterferenceModel<S> {
    #[default]
    None,
    Downclock(DownclockModel<S>),
    Memory(MemoryLatencyCurve<S>),
    Both(DownclockModel<S>, MemoryLatencyCurve<S>),
}

impl<S: Scalar> InterferenceModel<S> {
    /// Multiplicative latency factor for one instance in `ctx`. A lone
    /// instance is never penalized; otherwise the downclock factor composes
    /// with the memory factor driven by the bandwidth of the *other*
    /// instances.
    pub fn penalty(&self, ctx: &InterferenceContext<S>) -> S {
        if ctx.active_instances <= 1 {
            return S::one();
        }
        let others = S::from_u32(ctx.active_instances - 1).unwrap();
        let neighbor_bw = others * ctx.per_instance_bandwidth_gbps;
        match self {
            Self::None => S::one(),
            Self::Downclock(d) => d.factor(ctx.simd_fraction),
            Self::Memory(m) => m.multiplier(neighbor_bw),
            Self::Both(d, m) => d.factor(ctx.simd_fraction) * m.multiplier(neighbor_bw),
        }
    }
}

/// Expected-versus-adjusted latency for a configuration under a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport<S> {
    pub expected_ms: S,
    pub adjusted_ms: S,
    pub gap_fraction: S,
}

/// Compares the isolated-profile objective against the objective with each
/// instance penalized by the concurrent context it would run in.
pub fn gap_report<S: Scalar>(
    profile: &ProfileTable<S>,
    config: &Configuration<S>,
    model: &InterferenceModel<S>,
    per_instance_bandwidth_gbps: S,
) -> Result<GapReport<S>, OptimizeError> {
    let expected = objective(profile, config)?;
    let total_instances = config.instance_count();
    let busy = S::from_u32(config.thread_sum()).unwrap();
    let budget = S::from_u32(config.total_threads.max(1)).unwrap();
    let simd_fraction = busy / budget;

    let mut adjusted = S::neg_infinity();
    for group in &config.groups {
        let key = crate::profile::ProfileKey::new(
            group.threads_per_instance,
            group.batch_per_instance,
        );
        let latency = profile.lookup(key).ok_or(OptimizeError::UnknownKey {
            threads: key.threads,
            batch: key.batch,
        })?;
        let ctx = InterferenceContext {
            active_instances: total_instances,
            per_instance_bandwidth_gbps,
            simd_fraction,
        };
        let slowed = latency * model.penalty(&ctx);
        if slowed > adjusted {
            adjusted = slowed;
        }
    }

    Ok(GapReport {
        expected_ms: expected,
        adjusted_ms: adjusted,
        gap_fraction: (adjusted - expected) / expected,
    })
}
