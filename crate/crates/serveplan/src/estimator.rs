//! Online batch-size estimation from request queue depth.
//!
//! Two levels of smoothing keep the serving system from flip-flopping
//! between configurations: an exponentially weighted moving average of the
//! queue depth is floored to a power of two, and the mode over a ring of
//! recent estimates is the batch size actually proposed. Decisions are
//! rate-limited to one per reconfiguration-timeout window.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::sim::Micros;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("alpha must lie in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error("mode window must be >= 1")]
    BadWindow,
    #[error("batch size must be >= 1")]
    BadBatch,
}

/// Largest power of two <= `x`, clamped to 1 for `x < 2`.
pub fn floor_pow2<S: Scalar>(x: S) -> u32 {
    let x = x.to_f64().unwrap_or(0.0);
    if !x.is_finite() || x < 2.0 {
        return 1;
    }
    let mut p: u32 = 1;
    while p < (1 << 30) && (p as f64) * 2.0 <= x {
        p *= 2;
    }
    p
}

/// EWMA queue-depth tracker with a mode-smoothed power-of-two batch estimate.
#[derive(Debug, Clone)]
pub struct BatchEstimator<S> {
    alpha: S,
    ewma: Option<S>,
    history: VecDeque<u32>,
    window: usize,
    current_batch: u32,
    reconfig_timeout: Micros,
    last_decision: Micros,
}

impl<S: Scalar> BatchEstimator<S> {
    /// `created_at` anchors the first decision window.
    pub fn new(
        alpha: S,
        window: usize,
        current_batch: u32,
        reconfig_timeout: Micros,
        created_at: Micros,
    ) -> Result<Self, EstimatorError> {
        let a = alpha.to_f64().unwrap_or(f64::NAN);
        if !(a > 0.0 && a <= 1.0) {
            return Err(EstimatorError::BadAlpha(a));
        }
        if window < 1 {
            return Err(EstimatorError::BadWindow);
        }
        if current_batch < 1 {
            return Err(EstimatorError::BadBatch);
        }
        Ok(Self {
            alpha,
            ewma: None,
            history: VecDeque::with_capacity(window),
            window,
            current_batch,
            reconfig_timeout,
            last_decision: created_at,
        })
    }

    /// Folds one queue-depth sample into the average and appends the floored
    /// power-of-two estimate to the history ring.
    ///
    /// The first sample seeds the average directly, so the EWMA always stays
    /// within the range of observed depths.
    pub fn observe(&mut self, queue_depth: u64) {
        let sample = S::from_u64(queue_depth).unwrap_or_else(S::zero);
        let next = match self.ewma {
            None => sample,
            Some(prev) => self.alpha * sample + (S::one() - self.alpha) * prev,
        };
        self.ewma = Some(next);
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(floor_pow2(next));
    }

    pub fn ewma(&self) -> Option<S> {
        self.ewma
    }

    pub fn current_batch(&self) -> u32 {
        self.current_batch
    }

    /// Called when a proposed batch size has been acted on.
    pub fn set_current_batch(&mut self, batch: u32) {
        self.current_batch = batch.max(1);
    }

    pub fn history(&self) -> impl Iterator<Item = u32> + '_ {
        self.history.iter().copied()
    }

    /// Mode of the recent estimates, ties broken toward the smaller batch.
    /// `None` until something has been observed.
    pub fn smoothed_batch(&self) -> Option<u32> {
        if self.history.is_empty() {
            return None;
        }
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &estimate in &self.history {
            *counts.entry(estimate).or_insert(0) += 1;
        }
        // Ascending key order means the smallest batch wins ties.
        let mut best = None;
        let mut best_count = 0;
        for (batch, count) in counts {
            if count > best_count {
                best = Some(batch);
                best_count = count;
            }
        }
        best
    }

    /// One decision per timeout window: returns the smoothed batch when the
    /// window has elapsed and the proposal differs from the current batch.
    pub fn should_reconfigure(&mut self, now: Micros) -> Option<u32> {
        self.decide(now, false)
    }

    /// Like [`Self::should_reconfigure`], but when `timeout_pressure` is set
    /// (the dispatcher saw batch timeouts fire too frequently over the
    /// window) the proposal may shrink to the latest raw estimate instead of
    /// waiting for the sticky mode to catch up.
    pub fn decide(&mut self, now: Micros, timeout_pressure: bool) -> Option<u32> {
        if now.saturating_sub(self.last_decision) < self.reconfig_timeout {
            return None;
        }
        self.last_decision = now;
        let mut proposal = self.smoothed_batch()?;
        if timeout_pressure {
            if let Some(ewma) = self.ewma {
                proposal = proposal.min(floor_pow2(ewma));
            }
        }
        (proposal != self.current_batch).then_some(proposal)
    }
}
