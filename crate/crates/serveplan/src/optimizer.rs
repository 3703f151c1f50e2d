//! Chooses the instance mix minimizing expected batch latency for a thread
//! budget `T` and batch size `B`.
//!
//! The solver treats each profiled shape `(t, b)` as a knapsack item with a
//! two-dimensional weight and the profiled latency as its cost, usable any
//! number of times. A multiset of items describes a set of concurrent
//! instances; because they all start together, the batch finishes when the
//! slowest instance finishes, so the objective is the maximum item latency:
//!
//! `opt[t][b] = min over profiled (t', b') of max(opt[t - t'][b - b'], L(t', b'))`
//!
//! Unprofiled cells never enter a solution. The memo is pseudo-polynomial in
//! `T` and `B` and keeps a backpointer per cell so the chosen configuration
//! can be reconstructed exactly.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::{ProfileKey, ProfileTable};
use crate::Scalar;

/// `instances` identical workers, each with `threads_per_instance` intra-op
/// threads serving `batch_per_instance` items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstanceGroup {
    #[serde(rename = "i")]
    pub instances: u32,
    #[serde(rename = "t")]
    pub threads_per_instance: u32,
    #[serde(rename = "b")]
    pub batch_per_instance: u32,
}

impl InstanceGroup {
    pub fn new(instances: u32, threads_per_instance: u32, batch_per_instance: u32) -> Self {
        Self {
            instances,
            threads_per_instance,
            batch_per_instance,
        }
    }
}

impl fmt::Display for InstanceGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}",
            self.instances, self.threads_per_instance, self.batch_per_instance
        )
    }
}

/// A solved serving configuration: instance groups plus the budget they were
/// solved for and the latency the solver expects.
///
/// Groups are canonical: identical shapes merged, sorted by threads then
/// batch, both descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration<S> {
    #[serde(rename = "model")]
    pub model_id: String,
    #[serde(rename = "T")]
    pub total_threads: u32,
    #[serde(rename = "B")]
    pub total_batch: u32,
    #[serde(rename = "expected_latency_ms")]
    pub expected_latency: S,
    pub groups: Vec<InstanceGroup>,
}

impl<S: Scalar> Configuration<S> {
    pub fn instance_count(&self) -> u32 {
        self.groups.iter().map(|g| g.instances).sum()
    }

    pub fn thread_sum(&self) -> u32 {
        self.groups
            .iter()
            .map(|g| g.instances * g.threads_per_instance)
            .sum()
    }

    pub fn batch_sum(&self) -> u32 {
        self.groups
            .iter()
            .map(|g| g.instances * g.batch_per_instance)
            .sum()
    }

    /// The distinct `(t, b)` shapes in this configuration.
    pub fn shape_set(&self) -> Vec<(u32, u32)> {
        self.groups
            .iter()
            .map(|g| (g.threads_per_instance, g.batch_per_instance))
            .collect()
    }

    /// Compact `i:t:b` rendering, groups joined by `+`.
    pub fn compact(&self) -> String {
        let parts: Vec<String> = self.groups.iter().map(|g| g.to_string()).collect();
        parts.join("+")
    }
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("profile has no entries")]
    EmptyProfile,
    #[error("budget must satisfy T >= 1 and B >= 1, got T={threads} B={batch}")]
    BadBudget { threads: u32, batch: u32 },
    #[error(
        "no combination of profiled shapes serves B={batch} within T={threads} threads"
    )]
    Infeasible { threads: u32, batch: u32 },
    #[error("configuration references unprofiled shape t={threads} b={batch}")]
    UnknownKey { threads: u32, batch: u32 },
}

/// Solver knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SolveOptions {
    /// Require the thread sum to equal `T` exactly instead of allowing idle
    /// threads. Idle threads never hurt the max-latency objective, so the
    /// relaxed form is the default.
    pub strict_threads: bool,
}

impl SolveOptions {
    pub fn strict() -> Self {
        Self {
            strict_threads: true,
        }
    }
}

/// The solver memo: per-cell optimal latency plus the backpointer that
/// reconstructs the configuration.
#[derive(Debug, Clone)]
pub struct OptTable<S> {
    threads: u32,
    batch: u32,
    strict_threads: bool,
    value: Vec<S>,
    instances: Vec<u32>,
    choice: Vec<Option<ProfileKey>>,
}

impl<S: Scalar> OptTable<S> {
    fn idx(&self, t: u32, b: u32) -> usize {
        t as usize * (self.batch as usize + 1) + b as usize
    }

    pub fn threads(&self) -> u32 {
        self.threads
    }

    pub fn batch(&self) -> u32 {
        self.batch
    }

    pub fn strict_threads(&self) -> bool {
        self.strict_threads
    }

    /// Optimal latency for the sub-budget `(t, b)`; infinity when infeasible.
    pub fn value(&self, t: u32, b: u32) -> S {
        self.value[self.idx(t, b)]
    }

    /// Item chosen at `(t, b)`, if the cell is feasible with b > 0.
    pub fn choice(&self, t: u32, b: u32) -> Option<ProfileKey> {
        self.choice[self.idx(t, b)]
    }

    /// Follows backpointers from `(t, b)` and returns the item multiset as
    /// merged instance groups, or `None` when the cell is infeasible.
    pub fn reconstruct(&self, t: u32, b: u32) -> Option<Vec<InstanceGroup>> {
        if !self.value(t, b).is_finite() {
            return None;
        }
        let mut counts: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        let (mut t, mut b) = (t, b);
        while b > 0 {
            let key = self.choice(t, b)?;
            *counts.entry((key.threads, key.batch)).or_insert(0) += 1;
            t -= key.threads;
            b -= key.batch;
        }
        let mut groups: Vec<InstanceGroup> = counts
            .into_iter()
            .map(|((threads, batch), instances)| InstanceGroup::new(instances, threads, batch))
            .collect();
        groups.sort_by(|a, b| {
            b.threads_per_instance
                .cmp(&a.threads_per_instance)
                .then(b.batch_per_instance.cmp(&a.batch_per_instance))
        });
        Some(groups)
    }
}

/// Fills the full `(0..=T) x (0..=B)` memo for `profile`.
pub fn solve_table<S: Scalar>(
    profile: &ProfileTable<S>,
    total_threads: u32,
    total_batch: u32,
    options: SolveOptions,
) -> Result<OptTable<S>, OptimizeError> {
    if profile.is_empty() {
        return Err(OptimizeError::EmptyProfile);
    }
    if total_threads < 1 || total_batch < 1 {
        return Err(OptimizeError::BadBudget {
            threads: total_threads,
            batch: total_batch,
        });
    }

    let items: Vec<(u32, u32, S)> = profile
        .iter()
        .filter(|(key, _)| key.threads <= total_threads && key.batch <= total_batch)
        .map(|(key, latency)| (key.threads, key.batch, latency))
        .collect();

    let bw = total_batch as usize + 1;
    let cells = (total_threads as usize + 1) * bw;
    let mut table = OptTable {
        threads: total_threads,
        batch: total_batch,
        strict_threads: options.strict_threads,
        value: vec![S::infinity(); cells],
        instances: vec![0; cells],
        choice: vec![None; cells],
    };

    // Base row b = 0: zero latency. With strict threads only (0, 0) is a
    // valid terminal; otherwise leftover threads may idle.
    table.value[0] = S::zero();
    if !options.strict_threads {
        for t in 1..=total_threads as usize {
            table.value[t * bw] = S::zero();
        }
    }

    for t in 1..=total_threads {
        for b in 1..=total_batch {
            let cell = t as usize * bw + b as usize;
            let mut best = S::infinity();
            let mut best_instances = u32::MAX;
            let mut best_key: Option<ProfileKey> = None;
            for &(it, ib, latency) in &items {
                if it > t || ib > b {
                    continue;
                }
                let sub = (t - it) as usize * bw + (b - ib) as usize;
                let sub_value = table.value[sub];
                if !sub_value.is_finite() {
                    continue;
                }
                let candidate = if sub_value > latency { sub_value } else { latency };
                let candidate_instances = table.instances[sub] + 1;
                // Ties prefer fewer instances, then larger t', then smaller b'.
                let take = if candidate < best {
                    true
                } else if candidate == best {
                    match best_key {
                        None => true,
                        Some(prev) => {
                            candidate_instances < best_instances
                                || (candidate_instances == best_instances
                                    && (it > prev.threads
                                        || (it == prev.threads && ib < prev.batch)))
                        }
                    }
                } else {
                    false
                };
                if take {
                    best = candidate;
                    best_instances = candidate_instances;
                    best_key = Some(ProfileKey::new(it, ib));
                }
            }
            if best_key.is_some() {
                table.value[cell] = best;
                table.instances[cell] = best_instances;
                table.choice[cell] = best_key;
            }
        }
    }

    Ok(table)
}

/// Returns the configuration realizing `opt[T, B]`.
pub fn solve<S: Scalar>(
    profile: &ProfileTable<S>,
    total_threads: u32,
    total_batch: u32,
    options: SolveOptions,
) -> Result<Configuration<S>, OptimizeError> {
    let table = solve_table(profile, total_threads, total_batch, options)?;
    let groups = table
        .reconstruct(total_threads, total_batch)
        .ok_or(OptimizeError::Infeasible {
            threads: total_threads,
            batch: total_batch,
        })?;
    Ok(Configuration {
        model_id: profile.model_id().to_owned(),
        total_threads,
        total_batch,
        expected_latency: table.value(total_threads, total_batch),
        groups,
    })
}

/// Expected latency of `config` under `profile`: the maximum group latency.
pub fn objective<S: Scalar>(
    profile: &ProfileTable<S>,
    config: &Configuration<S>,
) -> Result<S, OptimizeError> {
    let mut worst = S::neg_infinity();
    for group in &config.groups {
        let key = ProfileKey::new(group.threads_per_instance, group.batch_per_instance);
        let latency = profile.lookup(key).ok_or(OptimizeError::UnknownKey {
            threads: key.threads,
            batch: key.batch,
        })?;
        if latency > worst {
            worst = latency;
        }
    }
    Ok(worst)
}

/// A new table with each cell multiplied by `penalty(key)`.
///
/// Factors must be >= 1; interference only ever slows an instance down.
pub fn apply_penalty<S: Scalar>(
    profile: &ProfileTable<S>,
    mut penalty: impl FnMut(ProfileKey) -> S,
) -> ProfileTable<S> {
    let entries: Vec<(ProfileKey, S)> = profile
        .iter()
        .map(|(key, latency)| {
            let factor = penalty(key);
            debug_assert!(factor >= S::one(), "penalty factor below 1");
            (key, latency * factor)
        })
        .collect();
    ProfileTable::from_entries(profile.model_id().to_owned(), entries)
        .expect("penalized table preserves validity")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    model_id: String,
    threads: u32,
    batch: u32,
    strict_threads: bool,
}

/// Memo of solved configurations keyed by `(model, T, B)`.
///
/// Replacing the profile (detected by fingerprint) drops every entry.
#[derive(Debug, Default)]
pub struct ConfigCache<S> {
    fingerprint: Option<u64>,
    entries: HashMap<CacheKey, Configuration<S>>,
    computed: u64,
}

impl<S: Scalar> ConfigCache<S> {
    pub fn new() -> Self {
        Self {
            fingerprint: None,
            entries: HashMap::new(),
            computed: 0,
        }
    }

    /// Number of solves that actually ran (cache misses).
    pub fn computed_solves(&self) -> u64 {
        self.computed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn solve_cached(
        &mut self,
        profile: &ProfileTable<S>,
        total_threads: u32,
        total_batch: u32,
        options: SolveOptions,
    ) -> Result<Configuration<S>, OptimizeError> {
        let fingerprint = profile.fingerprint();
        if self.fingerprint != Some(fingerprint) {
            self.entries.clear();
            self.fingerprint = Some(fingerprint);
        }
        let key = CacheKey {
            model_id: profile.model_id().to_owned(),
            threads: total_threads,
            batch: total_batch,
            strict_threads: options.strict_threads,
        };
        if let Some(hit) = self.entries.get(&key) {
            return Ok(hit.clone());
        }
        let solved = solve(profile, total_threads, total_batch, options)?;
        self.entries.insert(key, solved.clone());
        self.computed += 1;
        Ok(solved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::SyntheticProfile;

    fn three_item_profile() -> ProfileTable<f64> {
        ProfileTable::from_entries(
            "toy",
            [
                (ProfileKey::new(1, 1), 10.0),
                (ProfileKey::new(2, 1), 6.0),
                (ProfileKey::new(1, 2), 18.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn two_single_thread_instances_beat_alternatives() {
        // Brute check: (2,1)+(?,1) needs 3 threads, (1,2) costs 18; two
        // copies of (1,1) at 10 ms win.
        let config = solve(&three_item_profile(), 2, 2, SolveOptions::default()).unwrap();
        assert_eq!(config.groups, vec![InstanceGroup::new(2, 1, 1)]);
        assert_eq!(config.expected_latency, 10.0);
    }

    #[test]
    fn single_item_forced() {
        let profile =
            ProfileTable::from_entries("one", [(ProfileKey::new(1, 1), 10.0)]).unwrap();
        let config = solve(&profile, 1, 1, SolveOptions::default()).unwrap();
        assert_eq!(config.groups, vec![InstanceGroup::new(1, 1, 1)]);
        assert_eq!(config.expected_latency, 10.0);
    }

    #[test]
    fn infeasible_batch_is_an_error() {
        // Only even batches profiled; B = 3 cannot be composed.
        let profile = ProfileTable::from_entries(
            "even",
            [
                (ProfileKey::new(1, 2), 10.0),
                (ProfileKey::new(2, 4), 16.0),
            ],
        )
        .unwrap();
        assert!(matches!(
            solve(&profile, 4, 3, SolveOptions::default()),
            Err(OptimizeError::Infeasible { threads: 4, batch: 3 })
        ));
    }

    #[test]
    fn strict_threads_requires_exact_cover() {
        // Non-strict may idle a thread; strict must spend both.
        let profile = ProfileTable::from_entries(
            "strict",
            [
                (ProfileKey::new(1, 1), 10.0),
                (ProfileKey::new(2, 1), 9.0),
            ],
        )
        .unwrap();
        let relaxed = solve(&profile, 3, 1, SolveOptions::default()).unwrap();
        assert_eq!(relaxed.groups, vec![InstanceGroup::new(1, 2, 1)]);
        let strict = solve(&profile, 3, 1, SolveOptions::strict());
        assert!(matches!(strict, Err(OptimizeError::Infeasible { .. })));
    }

    #[test]
    fn constraint_sums_hold() {
        let spec = SyntheticProfile {
            max_threads: 8,
            batch_exponent: 3,
            ..SyntheticProfile::default()
        };
        let profile: ProfileTable<f64> = spec.synthesize().unwrap();
        for (t, b) in [(8u32, 8u32), (5, 12), (7, 3), (8, 16)] {
            let config = solve(&profile, t, b, SolveOptions::default()).unwrap();
            assert_eq!(config.batch_sum(), b);
            assert!(config.thread_sum() <= t);
            let strict = solve(&profile, t, b, SolveOptions::strict()).unwrap();
            assert_eq!(strict.batch_sum(), b);
            assert_eq!(strict.thread_sum(), t);
        }
    }

    #[test]
    fn objective_matches_examples() {
        let profile = ProfileTable::from_entries(
            "obj",
            [
                (ProfileKey::new(1, 1), 10.0),
                (ProfileKey::new(2, 4), 30.0),
                (ProfileKey::new(1, 2), 25.0),
            ],
        )
        .unwrap();
        let single = Configuration {
            model_id: "obj".into(),
            total_threads: 2,
            total_batch: 2,
            expected_latency: 10.0,
            groups: vec![InstanceGroup::new(2, 1, 1)],
        };
        assert_eq!(objective(&profile, &single).unwrap(), 10.0);

        let mixed = Configuration {
            model_id: "obj".into(),
            total_threads: 4,
            total_batch: 8,
            expected_latency: 30.0,
            groups: vec![
                InstanceGroup::new(1, 2, 4),
                InstanceGroup::new(2, 1, 2),
            ],
        };
        assert_eq!(objective(&profile, &mixed).unwrap(), 30.0);

        let unknown = Configuration {
            model_id: "obj".into(),
            total_threads: 4,
            total_batch: 4,
            expected_latency: 1.0,
            groups: vec![InstanceGroup::new(1, 4, 4)],
        };
        assert!(matches!(
            objective(&profile, &unknown),
            Err(OptimizeError::UnknownKey { threads: 4, batch: 4 })
        ));
    }

    #[test]
    fn solve_objective_agrees_with_expected_latency() {
        let spec = SyntheticProfile {
            max_threads: 6,
            batch_exponent: 3,
            jitter: 0.25,
            seed: 11,
            ..SyntheticProfile::default()
        };
        let profile: ProfileTable<f64> = spec.synthesize().unwrap();
        for b in 1..=12 {
            if let Ok(config) = solve(&profile, 6, b, SolveOptions::default()) {
                assert_eq!(objective(&profile, &config).unwrap(), config.expected_latency);
            }
        }
    }

    #[test]
    fn identity_penalty_keeps_table() {
        let profile = three_item_profile();
        let same = apply_penalty(&profile, |_| 1.0);
        assert_eq!(profile, same);
        let slowed = apply_penalty(&profile, |_| 1.15);
        assert_eq!(slowed.lookup(ProfileKey::new(2, 1)), Some(6.0 * 1.15));
    }

    #[test]
    fn table_base_cases() {
        let table = solve_table(&three_item_profile(), 3, 3, SolveOptions::default()).unwrap();
        assert_eq!(table.value(0, 0), 0.0);
        assert!(table.value(0, 1).is_infinite());
        assert!(table.value(0, 3).is_infinite());
        assert_eq!(table.value(2, 0), 0.0);
    }

    #[test]
    fn value_never_increases_with_more_items() {
        let small = ProfileTable::from_entries(
            "grow",
            [(ProfileKey::new(1, 1), 10.0), (ProfileKey::new(2, 2), 12.0)],
        )
        .unwrap();
        let large = ProfileTable::from_entries(
            "grow",
            [
                (ProfileKey::new(1, 1), 10.0),
                (ProfileKey::new(2, 2), 12.0),
                (ProfileKey::new(2, 1), 5.0),
                (ProfileKey::new(1, 2), 14.0),
            ],
        )
        .unwrap();
        let a = solve_table(&small, 4, 4, SolveOptions::default()).unwrap();
        let b = solve_table(&large, 4, 4, SolveOptions::default()).unwrap();
        for t in 0..=4 {
            for batch in 0..=4 {
                assert!(b.value(t, batch) <= a.value(t, batch));
            }
        }
    }

    #[test]
    fn cache_hits_skip_recomputation() {
        let profile = three_item_profile();
        let mut cache = ConfigCache::new();
        let first = cache
            .solve_cached(&profile, 2, 2, SolveOptions::default())
            .unwrap();
        let second = cache
            .solve_cached(&profile, 2, 2, SolveOptions::default())
            .unwrap();
        assert_eq!(first, second);
        assert_eq!(cache.computed_solves(), 1);

        // Distinct (T, B) pairs get distinct entries.
        cache
            .solve_cached(&profile, 2, 4, SolveOptions::default())
            .unwrap();
        assert_eq!(cache.computed_solves(), 2);
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn cache_invalidates_on_profile_replacement() {
        let profile = three_item_profile();
        let mut cache = ConfigCache::new();
        cache
            .solve_cached(&profile, 2, 2, SolveOptions::default())
            .unwrap();
        assert_eq!(cache.computed_solves(), 1);

        let replaced = profile.scaled(2.0).unwrap();
        let config = cache
            .solve_cached(&replaced, 2, 2, SolveOptions::default())
            .unwrap();
        assert_eq!(cache.computed_solves(), 2, "replacement must recompute");
        assert_eq!(config.expected_latency, 20.0);
    }

    #[test]
    fn configuration_json_shape() {
        let config = Configuration {
            model_id: "bert".into(),
            total_threads: 16,
            total_batch: 16,
            expected_latency: 42.5,
            groups: vec![InstanceGroup::new(4, 4, 4)],
        };
        let json = serde_json::to_value(&config).unwrap();
        assert_eq!(json["model"], "bert");
        assert_eq!(json["T"], 16);
        assert_eq!(json["B"], 16);
        assert_eq!(json["expected_latency_ms"], 42.5);
        assert_eq!(json["groups"][0]["i"], 4);
        assert_eq!(json["groups"][0]["t"], 4);
        assert_eq!(json["groups"][0]["b"], 4);
        let back: Configuration<f64> = serde_json::from_value(json).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn deterministic_across_runs() {
        let spec = SyntheticProfile {
            max_threads: 8,
            batch_exponent: 4,
            jitter: 0.3,
            seed: 5,
            ..SyntheticProfile::default()
        };
        let profile: ProfileTable<f64> = spec.synthesize().unwrap();
        let a = solve(&profile, 8, 16, SolveOptions::default()).unwrap();
        let b = solve(&profile, 8, 16, SolveOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monotone_in_thread_budget() {
        let spec = SyntheticProfile {
            max_threads: 8,
            batch_exponent: 3,
            jitter: 0.2,
            seed: 3,
            ..SyntheticProfile::default()
        };
        let profile: ProfileTable<f64> = spec.synthesize().unwrap();
        let table = solve_table(&profile, 8, 8, SolveOptions::default()).unwrap();
        for t in 1..8 {
            assert!(table.value(t + 1, 8) <= table.value(t, 8));
        }
    }
}
