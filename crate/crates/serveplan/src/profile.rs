//! Single-instance latency profiles: the optimizer's item set.
//!
//! A profile maps `(t, b)` — intra-op threads and batch size — to the
//! measured average latency of one instance serving one batch of that shape.
//! Tables are immutable after construction and cheap to share.

use std::collections::BTreeMap;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

/// A profiled single-instance shape: `threads` intra-op threads serving
/// batches of `batch` items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProfileKey {
    pub threads: u32,
    pub batch: u32,
}

impl ProfileKey {
    pub fn new(threads: u32, batch: u32) -> Self {
        Self { threads, batch }
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("failed to read profile: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed profile row: {0}")]
    Parse(#[from] csv::Error),
    #[error("profile row {row}: threads and batch must be >= 1")]
    BadKey { row: usize },
    #[error("profile row {row}: latency must be finite and > 0, got {value}")]
    BadLatency { row: usize, value: f64 },
    #[error("duplicate profile entry for t={threads} b={batch}")]
    DuplicateKey { threads: u32, batch: u32 },
    #[error("profile has no entries")]
    Empty,
    #[error("invalid synthetic profile: {0}")]
    InvalidSynthesis(String),
    #[error("scale factor must be finite and > 0, got {0}")]
    BadScale(f64),
}

/// Measured average batch latencies `L(t, b)` for single-instance shapes.
///
/// `max_threads` is the largest profiled thread count and `batch_exponent`
/// the exponent of the largest profiled batch; the canonical grid covers
/// `{1..max_threads} x {2^0..2^batch_exponent}`. Partial tables are legal —
/// the solver treats missing cells as unusable items.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable<S> {
    model_id: String,
    entries: BTreeMap<ProfileKey, S>,
    max_threads: u32,
    batch_exponent: u32,
}

impl<S: Scalar> ProfileTable<S> {
    /// Builds a validated table from `(key, latency)` pairs.
    pub fn from_entries<I>(model_id: impl Into<String>, entries: I) -> Result<Self, ProfileError>
    where
        I: IntoIterator<Item = (ProfileKey, S)>,
    {
        let mut map = BTreeMap::new();
        for (row, (key, latency)) in entries.into_iter().enumerate() {
            if key.threads < 1 || key.batch < 1 {
                return Err(ProfileError::BadKey { row });
            }
            let value = latency.to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() || value <= 0.0 {
                return Err(ProfileError::BadLatency { row, value });
            }
            if map.insert(key, latency).is_some() {
                return Err(ProfileError::DuplicateKey {
                    threads: key.threads,
                    batch: key.batch,
                });
            }
        }
        if map.is_empty() {
            return Err(ProfileError::Empty);
        }
        let max_threads = map.keys().map(|k| k.threads).max().unwrap();
        let max_batch = map.keys().map(|k| k.batch).max().unwrap();
        let batch_exponent = max_batch.ilog2();
        Ok(Self {
            model_id: model_id.into(),
            entries: map,
            max_threads,
            batch_exponent,
        })
    }

    /// Loads a profile from a CSV file; the model id is the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProfileError> {
        let path = path.as_ref();
        let model_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".to_owned());
        Self::from_csv_reader(model_id, File::open(path)?)
    }

    /// Parses the `threads,batch,latency_ms` CSV format. Lines starting with
    /// `#` are ignored.
    pub fn from_csv_reader(
        model_id: impl Into<String>,
        reader: impl Read,
    ) -> Result<Self, ProfileError> {
        #[derive(Deserialize)]
        struct Row {
            threads: u32,
            batch: u32,
            latency_ms: f64,
        }

        let mut csv = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut entries = Vec::new();
        for row in csv.deserialize() {
            let row: Row = row?;
            let latency = S::from_f64(row.latency_ms).unwrap_or_else(S::nan);
            entries.push((ProfileKey::new(row.threads, row.batch), latency));
        }
        Self::from_entries(model_id, entries)
    }

    /// Writes the table back out in the CSV input format, keys sorted.
    pub fn write_csv(&self, mut writer: impl Write) -> std::io::Result<()> {
        writeln!(writer, "threads,batch,latency_ms")?;
        for (key, latency) in &self.entries {
            writeln!(writer, "{},{},{}", key.threads, key.batch, latency)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        self.write_csv(File::create(path)?)
    }

    /// Profiled latency for `key`, or `None` when the cell was not measured.
    pub fn lookup(&self, key: ProfileKey) -> Option<S> {
        self.entries.get(&key).copied()
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_threads(&self) -> u32 {
        self.max_threads
    }

    pub fn batch_exponent(&self) -> u32 {
        self.batch_exponent
    }

    pub fn iter(&self) -> impl Iterator<Item = (ProfileKey, S)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    /// True when the table covers the full canonical grid
    /// `{1..max_threads} x {2^0..2^batch_exponent}`.
    pub fn is_canonical_grid(&self) -> bool {
        self.entries.len() as u64 == grid_size(self.max_threads, self.batch_exponent)
            && (1..=self.max_threads).all(|t| {
                (0..=self.batch_exponent).all(|e| self.lookup(ProfileKey::new(t, 1 << e)).is_some())
            })
    }

    /// True when some canonical-grid cells are missing.
    pub fn is_partial(&self) -> bool {
        !self.is_canonical_grid()
    }

    /// A copy with every latency multiplied by `factor` (> 0).
    pub fn scaled(&self, factor: S) -> Result<Self, ProfileError> {
        let f = factor.to_f64().unwrap_or(f64::NAN);
        if !f.is_finite() || f <= 0.0 {
            return Err(ProfileError::BadScale(f));
        }
        Ok(Self {
            model_id: self.model_id.clone(),
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (*k, *v * factor))
                .collect(),
            max_threads: self.max_threads,
            batch_exponent: self.batch_exponent,
        })
    }

    /// Content hash used to invalidate caches when a profile is replaced.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        self.model_id.hash(&mut hasher);
        for (key, latency) in &self.entries {
            key.hash(&mut hasher);
            latency.to_f64().unwrap_or(f64::NAN).to_bits().hash(&mut hasher);
        }
        hasher.finish()
    }
}

/// Number of cells in a canonical profiling grid: `(n + 1) * T` for thread
/// counts `1..=T` and batches `2^0..=2^n`.
pub fn grid_size(max_threads: u32, batch_exponent: u32) -> u64 {
    (batch_exponent as u64 + 1) * max_threads as u64
}

/// Parameters for a synthetic diminishing-returns profile.
///
/// Latency follows `base * b^batch_growth * ((1 - p) + p / t)`, an
/// Amdahl-style curve in the thread count: adding a thread always helps, and
/// each additional thread helps less than the previous one. `jitter` applies
/// a seeded relative perturbation per cell; zero keeps the closed form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticProfile {
    pub model_id: String,
    pub base_latency_ms: f64,
    pub parallel_fraction: f64,
    pub batch_growth: f64,
    pub max_threads: u32,
    pub batch_exponent: u32,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self {
            model_id: "synthetic".to_owned(),
            base_latency_ms: 100.0,
            parallel_fraction: 0.9,
            batch_growth: 1.0,
            max_threads: 16,
            batch_exponent: 4,
            jitter: 0.0,
            seed: 1,
        }
    }
}

impl SyntheticProfile {
    /// Generates the full canonical grid for these parameters.
    pub fn synthesize<S: Scalar>(&self) -> Result<ProfileTable<S>, ProfileError> {
        if !self.base_latency_ms.is_finite() || self.base_latency_ms <= 0.0 {
            return Err(ProfileError::InvalidSynthesis(format!(
                "base latency must be > 0, got {}",
                self.base_latency_ms
            )));
        }
        if !(0.0..=1.0).contains(&self.parallel_fraction) {
            return Err(ProfileError::InvalidSynthesis(format!(
                "parallel fraction must lie in [0, 1], got {}",
                self.parallel_fraction
            )));
        }
        if !self.batch_growth.is_finite() || self.batch_growth <= 0.0 {
            return Err(ProfileError::InvalidSynthesis(format!(
                "batch growth must be > 0, got {}",
                self.batch_growth
            )));
        }
        if self.max_threads < 1 {
            return Err(ProfileError::InvalidSynthesis(
                "max threads must be >= 1".to_owned(),
            ));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(ProfileError::InvalidSynthesis(format!(
                "jitter must lie in [0, 0.5), got {}",
                self.jitter
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let p = self.parallel_fraction;
        let mut entries = Vec::new();
        for t in 1..=self.max_threads {
            for exp in 0..=self.batch_exponent {
                let b = 1u32 << exp;
                let speedup = 1.0 / ((1.0 - p) + p / t as f64);
                let mut latency =
                    self.base_latency_ms * (b as f64).powf(self.batch_growth) / speedup;
                if self.jitter > 0.0 {
                    let u: f64 = rng.random_range(-1.0..1.0);
                    latency *= 1.0 + self.jitter * u;
                }
                let latency = S::from_f64(latency).unwrap_or_else(S::nan);
                entries.push((ProfileKey::new(t, b), latency));
            }
        }
        ProfileTable::from_entries(self.model_id.clone(), entries)
    }
}
