//! Shared test fixtures and the brute-force reference solver.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serveplan::profile::{ProfileTable, SyntheticProfile};

/// Exhaustive reference: enumerates every multiset of profiled shapes whose
/// batch sum is exactly `total_batch` and whose thread sum fits the budget
/// (equals it when `strict`), and returns the smallest max-latency.
///
/// Independent of the solver: no memoization, no value pruning, just a
/// depth-first walk over per-item counts.
pub fn enumerate_optimum(
    profile: &ProfileTable<f64>,
    total_threads: u32,
    total_batch: u32,
    strict: bool,
) -> Option<f64> {
    fn dfs(
        items: &[(u32, u32, f64)],
        idx: usize,
        threads_left: u32,
        batch_left: u32,
        current_max: f64,
        strict: bool,
        best: &mut Option<f64>,
    ) {
        if batch_left == 0 {
            if !strict || threads_left == 0 {
                *best = Some(best.map_or(current_max, |b: f64| b.min(current_max)));
            }
            return;
        }
        if idx == items.len() {
            return;
        }
        let (threads, batch, latency) = items[idx];
        let max_count = (threads_left / threads).min(batch_left / batch);
        for count in 0..=max_count {
            let new_max = if count > 0 {
                current_max.max(latency)
            } else {
                current_max
            };
            dfs(
                items,
                idx + 1,
                threads_left - count * threads,
                batch_left - count * batch,
                new_max,
                strict,
                best,
            );
        }
    }

    let items: Vec<(u32, u32, f64)> = profile
        .iter()
        .map(|(key, latency)| (key.threads, key.batch, latency))
        .collect();
    let mut best = None;
    dfs(
        &items,
        0,
        total_threads,
        total_batch,
        f64::NEG_INFINITY,
        strict,
        &mut best,
    );
    best
}

/// Randomized profile for property suites: random curve parameters, random
/// jitter, and a random subset of cells dropped so partial tables are
/// exercised too.
pub fn random_profile(seed: u64, max_threads: u32, max_exponent: u32) -> ProfileTable<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SyntheticProfile {
        model_id: format!("rand-{seed}"),
        base_latency_ms: rng.random_range(5.0..200.0),
        parallel_fraction: rng.random_range(0.0..1.0),
        batch_growth: rng.random_range(0.3..1.3),
        max_threads: rng.random_range(1..=max_threads),
        batch_exponent: rng.random_range(0..=max_exponent),
        jitter: rng.random_range(0.0..0.4),
        seed: rng.random(),
    };
    let full: ProfileTable<f64> = spec.synthesize().unwrap();
    let kept: Vec<_> = full
        .iter()
        .filter(|_| rng.random_bool(0.85))
        .collect();
    if kept.is_empty() {
        return full;
    }
    ProfileTable::from_entries(full.model_id().to_owned(), kept).unwrap()
}
