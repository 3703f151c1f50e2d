//! Arrival traces: request timestamps loaded from CSV or generated from a
//! rate spec with an optional step change.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use super::Micros;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("failed to read trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed trace row: {0}")]
    Parse(#[from] csv::Error),
    #[error("trace row {row}: timestamps must be sorted and non-negative")]
    Unsorted { row: usize },
    #[error("invalid trace spec: {0}")]
    InvalidSpec(String),
}

/// Sorted request arrival times in simulated microseconds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrivalTrace {
    arrivals: Vec<Micros>,
}

impl ArrivalTrace {
    pub fn from_arrivals(arrivals: Vec<Micros>) -> Result<Self, TraceError> {
        for (row, pair) in arrivals.windows(2).enumerate() {
            if pair[1] < pair[0] {
                return Err(TraceError::Unsorted { row: row + 1 });
            }
        }
        Ok(Self { arrivals })
    }

    /// Parses the `timestamp_ms` CSV format; `#` comments are skipped.
    pub fn from_csv_reader(reader: impl Read) -> Result<Self, TraceError> {
        #[derive(Deserialize)]
        struct Row {
            timestamp_ms: f64,
        }
        let mut csv = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut arrivals = Vec::new();
        for (row, record) in csv.deserialize().enumerate() {
            let record: Row = record?;
            if !record.timestamp_ms.is_finite() || record.timestamp_ms < 0.0 {
                return Err(TraceError::Unsorted { row });
            }
            arrivals.push((record.timestamp_ms * 1_000.0).round() as Micros);
        }
        Self::from_arrivals(arrivals)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        Self::from_csv_reader(File::open(path)?)
    }

    pub fn len(&self) -> usize {
        self.arrivals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrivals.is_empty()
    }

    pub fn arrivals(&self) -> &[Micros] {
        &self.arrivals
    }
}

/// Open-loop arrival generator: a base rate, optionally stepping to a second
/// rate at `step_at_s`. Jitter perturbs each gap by a seeded uniform factor.
#[derive(Debug, Clone)]
pub struct TraceSpec {
    pub rate_per_s: f64,
    pub duration_s: f64,
    pub step_at_s: Option<f64>,
    pub step_rate_per_s: Option<f64>,
    pub jitter: f64,
    pub seed: u64,
}

impl TraceSpec {
    pub fn steady(rate_per_s: f64, duration_s: f64) -> Self {
        Self {
            rate_per_s,
            duration_s,
            step_at_s: None,
            step_rate_per_s: None,
            jitter: 0.0,
            seed: 1,
        }
    }

    pub fn generate(&self) -> Result<ArrivalTrace, TraceError> {
        if !(self.rate_per_s.is_finite() && self.rate_per_s > 0.0) {
            return Err(TraceError::InvalidSpec(format!(
                "rate must be > 0, got {}",
                self.rate_per_s
            )));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(TraceError::InvalidSpec(format!(
                "duration must be > 0, got {}",
                self.duration_s
            )));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(TraceError::InvalidSpec(format!(
                "jitter must lie in [0, 1), got {}",
                self.jitter
            )));
        }
        if self.step_at_s.is_some() != self.step_rate_per_s.is_some() {
            return Err(TraceError::InvalidSpec(
                "step-at and step-rate must be given together".to_owned(),
            ));
        }
        if let (Some(at), Some(rate)) = (self.step_at_s, self.step_rate_per_s) {
            if !(at.is_finite() && at >= 0.0) || !(rate.is_finite() && rate > 0.0) {
                return Err(TraceError::InvalidSpec(
                    "step-at must be >= 0 and step-rate > 0".to_owned(),
                ));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let duration_us = self.duration_s * 1e6;
        let step_at_us = self.step_at_s.map(|s| s * 1e6);
        let mut arrivals = Vec::new();
        let mut t = 0.0f64;
        loop {
            let rate = match step_at_us {
                Some(at) if t >= at => self.step_rate_per_s.unwrap(),
                _ => self.rate_per_s,
            };
            let mut gap = 1e6 / rate;
            if self.jitter > 0.0 {
                let u: f64 = rng.random_range(-1.0..1.0);
                gap *= 1.0 + self.jitter * u;
            }
            t += gap;
            if t >= duration_us {
                break;
            }
            arrivals.push(t.round() as Micros);
        }
        ArrivalTrace::from_arrivals(arrivals)
    }
}
