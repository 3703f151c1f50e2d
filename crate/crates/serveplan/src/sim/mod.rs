//! Deterministic discrete-event simulation of the serving loop.
//!
//! The simulator drives request arrivals from a trace through batch
//! aggregation, partitioned dispatch to simulated worker instances, and the
//! reconfiguration controller. Service times come from the latency profile:
//! a batch on an instance with `t` threads and slot size `b` costs
//! `pre + L(t, b) * penalty + post`, where the penalty reflects dual-active
//! oversubscription and any configured interference model. Slot size, not
//! occupancy, prices the batch: profiled latency is per batch shape.
//!
//! Time is integer microseconds. The event loop is single-threaded and
//! totally ordered (ties broken by schedule order), so a run is a pure
//! function of its inputs; worker concurrency appears as overlapping
//! service intervals on the shared timeline.
//!
//! Reconfiguration follows one of two routes. When only instance counts
//! change, workers of the existing shapes are added or drained in place.
//! When shapes change, the controller walks the active-passive cycle
//! `BatchEstimation -> PassiveScaleUp -> DualActive -> PassiveScaleDown`:
//! the passive set starts up alongside the serving set (the core budget is
//! deliberately oversubscribed and dual-active batches pay a penalty), the
//! dispatcher switches over once every passive worker is ready, the old set
//! finishes its in-flight batches, and teardown returns the system to
//! estimation. Serving never stops.

mod report;
mod trace;

pub use report::{BatchRecord, ConfigChange, LatencyStats, PhaseChange, RunReport, RunSummary};
pub use trace::{ArrivalTrace, TraceError, TraceSpec};

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::allocator::{AllocError, AllocationPlan, CoreDemand, CoreId, InstanceId, Topology};
use crate::estimator::EstimatorError;
use crate::interference::{InterferenceContext, InterferenceModel};
use crate::optimizer::{OptimizeError, SolveOptions};
use crate::profile::ProfileKey;
use crate::{BatchEstimator, ConfigCache, Configuration, Profile};

/// Simulated time in microseconds.
pub type Micros = u64;

pub fn ms_to_us(ms: f64) -> Micros {
    (ms * 1_000.0).round().max(0.0) as Micros
}

pub fn us_to_ms(us: Micros) -> f64 {
    us as f64 / 1_000.0
}

/// Controller phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    BatchEstimation,
    PassiveScaleUp,
    DualActive,
    PassiveScaleDown,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Phase::BatchEstimation => "batch_estimation",
            Phase::PassiveScaleUp => "passive_scale_up",
            Phase::DualActive => "dual_active",
            Phase::PassiveScaleDown => "passive_scale_down",
        };
        f.write_str(name)
    }
}

/// Worker lifecycle. Only `Active` workers receive new batches; `Draining`
/// workers finish their in-flight batch and stop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Starting,
    Active,
    Draining,
    Stopped,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("initial configuration: {0}")]
    Setup(#[from] OptimizeError),
    #[error("estimator: {0}")]
    Estimator(#[from] EstimatorError),
    #[error("allocation: {0}")]
    Alloc(#[from] AllocError),
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

/// Simulation knobs. Defaults model a serving deployment with a 100 ms
/// aggregation timeout, 2.5 s worker startup, and a 5 s estimator window.
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub initial_batch: u32,
    pub batch_timeout_ms: f64,
    pub startup_delay_ms: f64,
    pub teardown_delay_ms: f64,
    /// Latency factor for batches dispatched while both instance sets are
    /// resident (dual-active oversubscription).
    pub dual_active_penalty: f64,
    pub pre_ms: f64,
    pub post_ms: f64,
    pub alpha: f64,
    pub mode_window: usize,
    pub reconfig_timeout_ms: f64,
    /// Fraction of timeout-fired dispatches over an estimator window that
    /// counts as pressure to shrink the batch.
    pub timeout_trigger_fraction: f64,
    /// Disabled means the estimator still runs but decisions are dropped.
    pub reconfigure: bool,
    pub strict_threads: bool,
    pub interference: InterferenceModel<f64>,
    pub per_instance_bandwidth_gbps: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            initial_batch: 8,
            batch_timeout_ms: 100.0,
            startup_delay_ms: 2_500.0,
            teardown_delay_ms: 2_000.0,
            dual_active_penalty: 2.5,
            pre_ms: 0.0,
            post_ms: 0.0,
            alpha: 0.25,
            mode_window: 8,
            reconfig_timeout_ms: 5_000.0,
            timeout_trigger_fraction: 0.5,
            reconfigure: true,
            strict_threads: false,
            interference: InterferenceModel::None,
            per_instance_bandwidth_gbps: 3.0,
        }
    }
}

#[derive(Debug)]
enum Event {
    Arrival,
    BatchTimeout,
    BatchComplete { instance: InstanceId },
    EstimatorTick,
    InstanceReady { instance: InstanceId },
    TeardownDone,
}

struct Scheduled {
    at: Micros,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest event; ties run in
    // schedule order.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .cmp(&self.at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug)]
struct InFlight {
    requests: Vec<usize>,
    record: usize,
}

#[derive(Debug)]
struct Worker {
    threads: u32,
    slot: u32,
    #[allow(dead_code)]
    cores: Vec<CoreId>,
    lifecycle: Lifecycle,
    in_flight: Option<InFlight>,
}

struct Simulator<'a> {
    profile: &'a Profile,
    topology: &'a Topology,
    opts: SimOptions,
    solve_opts: SolveOptions,
    total_threads: u32,

    clock: Micros,
    events: BinaryHeap<Scheduled>,
    seq: u64,

    arrivals: &'a [Micros],
    cursor: usize,
    pending: VecDeque<usize>,
    completions: Vec<Option<Micros>>,

    workers: BTreeMap<InstanceId, Worker>,
    serving: Vec<InstanceId>,
    incoming: Vec<InstanceId>,
    retiring: Vec<InstanceId>,
    next_instance: InstanceId,
    plan: AllocationPlan,
    incoming_plan: Option<AllocationPlan>,
    retired_plan: Option<AllocationPlan>,
    pending_scale: Vec<(u32, u32, u32)>,

    current_config: Configuration,
    pending_config: Option<Configuration>,
    config_label: String,
    phase: Phase,
    phase_log: Vec<(Micros, Phase)>,
    config_history: Vec<(Micros, Configuration)>,

    estimator: BatchEstimator,
    cache: ConfigCache,
    window_rounds: u64,
    window_timeout_rounds: u64,

    armed_timeout: Option<Micros>,
    batch_timeout_us: Micros,
    startup_us: Micros,
    teardown_us: Micros,
    reconfig_timeout_us: Micros,

    batch_log: Vec<BatchRecord>,
    dispatch_times: Vec<Micros>,
    depth_log: Vec<(Micros, u64)>,
    reconfigurations: usize,
    suppressed: usize,
    infeasible: usize,
}

/// Runs `trace` against `profile` on `topology` and reports what happened.
pub fn run_trace(
    trace: &ArrivalTrace,
    profile: &Profile,
    topology: &Topology,
    options: &SimOptions,
) -> Result<RunReport, SimError> {
    if options.dual_active_penalty < 1.0 {
        return Err(SimError::InvalidOption(
            "dual-active penalty must be >= 1".to_owned(),
        ));
    }
    if options.pre_ms < 0.0 || options.post_ms < 0.0 {
        return Err(SimError::InvalidOption(
            "stage overheads must be >= 0".to_owned(),
        ));
    }

    let total_threads = topology.total_cores() as u32;
    let solve_opts = SolveOptions {
        strict_threads: options.strict_threads,
    };
    let mut cache = ConfigCache::new();
    let initial = cache.solve_cached(profile, total_threads, options.initial_batch, solve_opts)?;
    let estimator = BatchEstimator::new(
        options.alpha,
        options.mode_window,
        options.initial_batch,
        ms_to_us(options.reconfig_timeout_ms),
        0,
    )?;

    let mut sim = Simulator {
        profile,
        topology,
        solve_opts,
        total_threads,
        clock: 0,
        events: BinaryHeap::new(),
        seq: 0,
        arrivals: trace.arrivals(),
        cursor: 0,
        pending: VecDeque::new(),
        completions: vec![None; trace.len()],
        workers: BTreeMap::new(),
        serving: Vec::new(),
        incoming: Vec::new(),
        retiring: Vec::new(),
        next_instance: 0,
        plan: AllocationPlan::empty(topology),
        incoming_plan: None,
        retired_plan: None,
        pending_scale: Vec::new(),
        config_label: initial.compact(),
        current_config: initial.clone(),
        pending_config: None,
        phase: Phase::BatchEstimation,
        phase_log: vec![(0, Phase::BatchEstimation)],
        config_history: vec![(0, initial.clone())],
        estimator,
        cache,
        window_rounds: 0,
        window_timeout_rounds: 0,
        armed_timeout: None,
        batch_timeout_us: ms_to_us(options.batch_timeout_ms),
        startup_us: ms_to_us(options.startup_delay_ms),
        teardown_us: ms_to_us(options.teardown_delay_ms),
        reconfig_timeout_us: ms_to_us(options.reconfig_timeout_ms),
        batch_log: Vec::new(),
        dispatch_times: Vec::new(),
        depth_log: Vec::new(),
        reconfigurations: 0,
        suppressed: 0,
        infeasible: 0,
        opts: options.clone(),
    };

    // The initial set is pre-warmed: live at time zero with no startup cost.
    let demands = sim.demands_for(&initial);
    sim.plan = sim.plan.allocate(topology, &demands)?;
    for demand in &demands {
        let (threads, slot) = sim.shape_of(&initial, demand.instance);
        sim.workers.insert(
            demand.instance,
            Worker {
                threads,
                slot,
                cores: sim.plan.assignment(demand.instance).unwrap().to_vec(),
                lifecycle: Lifecycle::Active,
                in_flight: None,
            },
        );
        sim.serving.push(demand.instance);
    }

    if !trace.is_empty() {
        sim.schedule(trace.arrivals()[0], Event::Arrival);
    }
    sim.schedule(sim.reconfig_timeout_us, Event::EstimatorTick);

    while let Some(scheduled) = sim.events.pop() {
        debug_assert!(scheduled.at >= sim.clock, "clock moved backward");
        sim.clock = scheduled.at;
        sim.handle(scheduled.event);
    }

    Ok(sim.into_report())
}

impl<'a> Simulator<'a> {
    fn schedule(&mut self, at: Micros, event: Event) {
        self.seq += 1;
        self.events.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
    }

    /// Demand list for every instance of `config`, assigning fresh ids.
    fn demands_for(&mut self, config: &Configuration) -> Vec<CoreDemand> {
        let mut demands = Vec::new();
        for group in &config.groups {
            for _ in 0..group.instances {
                let id = self.next_instance;
                self.next_instance += 1;
                demands.push(CoreDemand::new(id, group.threads_per_instance));
            }
        }
        demands
    }

    /// Shape `(t, b)` the given fresh instance id was created for. Ids are
    /// handed out group by group in order.
    fn shape_of(&self, config: &Configuration, id: InstanceId) -> (u32, u32) {
        let first = self.next_instance - config.instance_count();
        let mut offset = id - first;
        for group in &config.groups {
            if offset < group.instances {
                return (group.threads_per_instance, group.batch_per_instance);
            }
            offset -= group.instances;
        }
        unreachable!("instance id outside configuration");
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Arrival => self.on_arrival(),
            Event::BatchTimeout => self.on_batch_timeout(),
            Event::BatchComplete { instance } => self.on_batch_complete(instance),
            Event::EstimatorTick => self.on_estimator_tick(),
            Event::InstanceReady { instance } => self.on_instance_ready(instance),
            Event::TeardownDone => self.on_teardown_done(),
        }
    }

    fn on_arrival(&mut self) {
        let idx = self.cursor;
        self.cursor += 1;
        self.pending.push_back(idx);
        if self.cursor < self.arrivals.len() {
            self.schedule(self.arrivals[self.cursor], Event::Arrival);
        }
        self.try_dispatch();
    }

    fn on_batch_timeout(&mut self) {
        if self.armed_timeout == Some(self.clock) {
            self.armed_timeout = None;
            self.try_dispatch();
        }
    }

    fn on_batch_complete(&mut self, instance: InstanceId) {
        let now = self.clock;
        let worker = self.workers.get_mut(&instance).expect("known worker");
        let in_flight = worker.in_flight.take().expect("completion without batch");
        let draining = worker.lifecycle == Lifecycle::Draining;
        for request in in_flight.requests {
            self.completions[request] = Some(now);
        }
        self.batch_log[in_flight.record].completed_at = now;
        if draining {
            self.stop_worker(instance);
        }
        self.try_dispatch();
    }

    fn on_estimator_tick(&mut self) {
        let now = self.clock;
        // Timeout pressure needs a base rate: a fraction over a handful of
        // drain-tail rounds says nothing about the workload.
        let pressure = self.window_rounds >= self.opts.mode_window as u64
            && self.window_timeout_rounds as f64 / self.window_rounds as f64
                >= self.opts.timeout_trigger_fraction;
        let sampled = self.window_rounds > 0;
        self.window_rounds = 0;
        self.window_timeout_rounds = 0;

        // A window without dispatches carries no new signal.
        if sampled {
            if let Some(target) = self.estimator.decide(now, pressure) {
                if !self.opts.reconfigure || !self.steady() {
                    self.suppressed += 1;
                } else {
                    self.start_reconfigure(target);
                }
            }
        }

        if self.work_outstanding() {
            self.schedule(now + self.reconfig_timeout_us, Event::EstimatorTick);
        }
    }

    fn on_instance_ready(&mut self, instance: InstanceId) {
        let worker = self.workers.get_mut(&instance).expect("known worker");
        debug_assert_eq!(worker.lifecycle, Lifecycle::Starting);
        worker.lifecycle = Lifecycle::Active;
        if self.incoming.contains(&instance) {
            let all_ready = self
                .incoming
                .iter()
                .all(|id| self.workers[id].lifecycle == Lifecycle::Active);
            if all_ready {
                self.enter_dual_active();
            }
        } else {
            // A plain scale-up worker joins the serving set directly.
            self.serving.push(instance);
            self.serving.sort_unstable();
        }
        self.try_dispatch();
    }

    fn on_teardown_done(&mut self) {
        debug_assert_eq!(self.phase, Phase::PassiveScaleDown);
        self.set_phase(Phase::BatchEstimation);
    }

    /// True when no scaling or phase cycle is in progress.
    fn steady(&self) -> bool {
        self.phase == Phase::BatchEstimation
            && self.pending_scale.is_empty()
            && self
                .workers
                .values()
                .all(|w| w.lifecycle == Lifecycle::Active)
    }

    fn work_outstanding(&self) -> bool {
        self.cursor < self.arrivals.len()
            || !self.pending.is_empty()
            || self.workers.values().any(|w| w.in_flight.is_some())
            || self.phase != Phase::BatchEstimation
            || !self.pending_scale.is_empty()
    }

    fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
        self.phase_log.push((self.clock, phase));
    }

    // ---- dispatch ----

    fn try_dispatch(&mut self) {
        let now = self.clock;
        if !self.pending.is_empty() {
            let ids: Vec<InstanceId> = self
                .serving
                .iter()
                .copied()
                .filter(|id| self.workers[id].lifecycle == Lifecycle::Active)
                .collect();
            let all_idle = !ids.is_empty()
                && ids.iter().all(|id| self.workers[id].in_flight.is_none());
            if all_idle {
                let round_size: u32 = ids.iter().map(|id| self.workers[id].slot).sum();
                let oldest = self.arrivals[*self.pending.front().unwrap()];
                let timeout_due = now.saturating_sub(oldest) >= self.batch_timeout_us;
                if self.pending.len() >= round_size as usize {
                    self.dispatch_round(&ids, round_size, false);
                } else if timeout_due {
                    let take = self.pending.len() as u32;
                    self.dispatch_round(&ids, take, true);
                }
            }
        }
        self.rearm_timeout();
    }

    fn rearm_timeout(&mut self) {
        let Some(&oldest_idx) = self.pending.front() else {
            return;
        };
        let target = self.arrivals[oldest_idx] + self.batch_timeout_us;
        // A due-but-undispatchable timeout is retried on the next completion.
        if target > self.clock && self.armed_timeout != Some(target) {
            self.armed_timeout = Some(target);
            self.schedule(target, Event::BatchTimeout);
        }
    }

    /// Slices `take` pending requests across the idle serving workers and
    /// starts their service intervals.
    fn dispatch_round(&mut self, ids: &[InstanceId], take: u32, timeout_fired: bool) {
        let now = self.clock;
        self.depth_log.push((now, self.pending.len() as u64));
        // Estimation happens in the estimation phase only: queue depths seen
        // mid-cycle describe the reconfiguration transient, not the workload.
        if self.phase == Phase::BatchEstimation {
            self.estimator.observe(self.pending.len() as u64);
            self.window_rounds += 1;
            if timeout_fired {
                self.window_timeout_rounds += 1;
            }
        }

        let assignments: Vec<(InstanceId, u32)> = if timeout_fired {
            // Partial batch: the smallest slot that fits takes the whole
            // remainder; otherwise fill the largest slots first.
            let mut avail: Vec<(InstanceId, u32)> =
                ids.iter().map(|&id| (id, self.workers[&id].slot)).collect();
            let mut remaining = take;
            let mut picked = Vec::new();
            while remaining > 0 {
                let fit = avail
                    .iter()
                    .enumerate()
                    .filter(|(_, (_, slot))| *slot >= remaining)
                    .min_by(|a, b| (a.1 .1, a.1 .0).cmp(&(b.1 .1, b.1 .0)))
                    .map(|(pos, _)| pos);
                let pos = match fit {
                    Some(pos) => pos,
                    None => avail
                        .iter()
                        .enumerate()
                        .max_by(|a, b| {
                            (a.1 .1).cmp(&b.1 .1).then(b.1 .0.cmp(&a.1 .0))
                        })
                        .map(|(pos, _)| pos)
                        .expect("round has workers"),
                };
                let (id, slot) = avail.remove(pos);
                let count = slot.min(remaining);
                picked.push((id, count));
                remaining -= count;
            }
            picked
        } else {
            ids.iter().map(|&id| (id, self.workers[&id].slot)).collect()
        };

        for (id, count) in assignments {
            debug_assert!(count <= self.workers[&id].slot, "batch above slot size");
            let requests: Vec<usize> = self.pending.drain(..count as usize).collect();
            let oldest_arrival = self.arrivals[requests[0]];
            let service = self.service_time_us(id);
            let record = BatchRecord {
                dispatched_at: now,
                completed_at: 0,
                instance: id,
                size: count,
                oldest_arrival,
                phase: self.phase,
                config: self.config_label.clone(),
                timeout_fired,
            };
            self.batch_log.push(record);
            let record = self.batch_log.len() - 1;
            let worker = self.workers.get_mut(&id).expect("known worker");
            worker.in_flight = Some(InFlight { requests, record });
            self.dispatch_times.push(now);
            self.schedule(now + service, Event::BatchComplete { instance: id });
        }
    }

    fn service_time_us(&self, instance: InstanceId) -> Micros {
        let worker = &self.workers[&instance];
        let latency = self
            .profile
            .lookup(ProfileKey::new(worker.threads, worker.slot))
            .expect("configured shape is profiled");

        let mut factor = 1.0;
        if self.phase == Phase::DualActive {
            factor *= self.opts.dual_active_penalty;
        }
        if !matches!(self.opts.interference, InterferenceModel::None) {
            let live: Vec<&Worker> = self
                .workers
                .values()
                .filter(|w| matches!(w.lifecycle, Lifecycle::Active | Lifecycle::Draining))
                .collect();
            let busy_threads: u32 = live.iter().map(|w| w.threads).sum();
            let ctx = InterferenceContext {
                active_instances: live.len() as u32,
                per_instance_bandwidth_gbps: self.opts.per_instance_bandwidth_gbps,
                simd_fraction: (busy_threads as f64 / self.total_threads as f64).min(1.0),
            };
            factor *= self.opts.interference.penalty(&ctx);
        }

        let ms = self.opts.pre_ms + latency * factor + self.opts.post_ms;
        ms_to_us(ms).max(1)
    }

    // ---- reconfiguration ----

    fn start_reconfigure(&mut self, target_batch: u32) {
        let new_config = match self.cache.solve_cached(
            self.profile,
            self.total_threads,
            target_batch,
            self.solve_opts,
        ) {
            Ok(config) => config,
            Err(_) => {
                self.infeasible += 1;
                return;
            }
        };
        self.estimator.set_current_batch(target_batch);
        if new_config.groups == self.current_config.groups {
            return;
        }

        self.reconfigurations += 1;
        self.config_history.push((self.clock, new_config.clone()));

        let mut old_shapes = self.current_config.shape_set();
        let mut new_shapes = new_config.shape_set();
        old_shapes.sort_unstable();
        new_shapes.sort_unstable();
        old_shapes.dedup();
        new_shapes.dedup();
        if old_shapes == new_shapes {
            self.plain_scale(new_config);
        } else {
            self.active_passive(new_config);
        }
    }

    /// Instance counts change but shapes stay: add or drain workers in place,
    /// no phase cycle.
    fn plain_scale(&mut self, new_config: Configuration) {
        let counted = |config: &Configuration| -> BTreeMap<(u32, u32), u32> {
            config
                .groups
                .iter()
                .map(|g| ((g.threads_per_instance, g.batch_per_instance), g.instances))
                .collect()
        };
        let old_counts = counted(&self.current_config);
        let new_counts = counted(&new_config);

        for (&shape, &old_n) in &old_counts {
            let new_n = new_counts.get(&shape).copied().unwrap_or(0);
            if new_n < old_n {
                let drop = old_n - new_n;
                // Most recently created workers of the shape go first.
                let victims: Vec<InstanceId> = self
                    .serving
                    .iter()
                    .copied()
                    .filter(|id| {
                        let w = &self.workers[id];
                        (w.threads, w.slot) == shape
                    })
                    .rev()
                    .take(drop as usize)
                    .collect();
                for id in victims {
                    self.serving.retain(|&s| s != id);
                    let worker = self.workers.get_mut(&id).unwrap();
                    if worker.in_flight.is_some() {
                        worker.lifecycle = Lifecycle::Draining;
                    } else {
                        self.stop_worker(id);
                    }
                }
            }
        }
        for (&(threads, slot), &new_n) in &new_counts {
            let old_n = old_counts.get(&(threads, slot)).copied().unwrap_or(0);
            if new_n > old_n {
                self.pending_scale.push((threads, slot, new_n - old_n));
            }
        }

        self.current_config = new_config;
        self.config_label = self.current_config.compact();
        self.try_pending_scale();
    }

    /// Starts as many deferred scale-up workers as free cores allow.
    fn try_pending_scale(&mut self) {
        let now = self.clock;
        let mut queue = std::mem::take(&mut self.pending_scale);
        for entry in &mut queue {
            let (threads, slot) = (entry.0, entry.1);
            while entry.2 > 0 {
                let id = self.next_instance;
                let demand = CoreDemand::new(id, threads);
                match self.plan.allocate(self.topology, &[demand]) {
                    Ok(plan) => {
                        self.plan = plan;
                        self.next_instance += 1;
                        self.workers.insert(
                            id,
                            Worker {
                                threads,
                                slot,
                                cores: self.plan.assignment(id).unwrap().to_vec(),
                                lifecycle: Lifecycle::Starting,
                                in_flight: None,
                            },
                        );
                        self.schedule(now + self.startup_us, Event::InstanceReady { instance: id });
                        entry.2 -= 1;
                    }
                    Err(_) => break,
                }
            }
        }
        self.pending_scale = queue.into_iter().filter(|e| e.2 > 0).collect();
    }

    /// Shapes change: spin up the passive set on an oversubscribed budget,
    /// switch the dispatcher once it is ready, drain the old set.
    fn active_passive(&mut self, new_config: Configuration) {
        let now = self.clock;
        self.set_phase(Phase::PassiveScaleUp);
        let demands = self.demands_for(&new_config);
        let plan = AllocationPlan::empty(self.topology)
            .allocate(self.topology, &demands)
            .expect("passive set fits a fresh core budget");
        for demand in &demands {
            let (threads, slot) = self.shape_of(&new_config, demand.instance);
            self.workers.insert(
                demand.instance,
                Worker {
                    threads,
                    slot,
                    cores: plan.assignment(demand.instance).unwrap().to_vec(),
                    lifecycle: Lifecycle::Starting,
                    in_flight: None,
                },
            );
            self.incoming.push(demand.instance);
            self.schedule(
                now + self.startup_us,
                Event::InstanceReady {
                    instance: demand.instance,
                },
            );
        }
        self.incoming_plan = Some(plan);
        self.pending_config = Some(new_config);
    }

    fn enter_dual_active(&mut self) {
        self.set_phase(Phase::DualActive);
        self.current_config = self.pending_config.take().expect("cycle carries a config");
        self.config_label = self.current_config.compact();

        let old_serving = std::mem::take(&mut self.serving);
        self.serving = std::mem::take(&mut self.incoming);
        self.serving.sort_unstable();
        self.retired_plan = Some(std::mem::replace(
            &mut self.plan,
            self.incoming_plan.take().expect("cycle carries a plan"),
        ));

        self.retiring = old_serving;
        for id in self.retiring.clone() {
            let worker = self.workers.get_mut(&id).unwrap();
            if worker.in_flight.is_some() {
                worker.lifecycle = Lifecycle::Draining;
            } else {
                self.stop_worker(id);
            }
        }
        if self.retiring.is_empty() && self.phase == Phase::DualActive {
            self.enter_scale_down();
        }
        self.try_dispatch();
    }

    fn enter_scale_down(&mut self) {
        self.set_phase(Phase::PassiveScaleDown);
        self.retired_plan = None;
        self.schedule(self.clock + self.teardown_us, Event::TeardownDone);
    }

    fn stop_worker(&mut self, id: InstanceId) {
        let mut worker = self.workers.remove(&id).expect("known worker");
        debug_assert!(worker.in_flight.is_none(), "stop with batch in flight");
        worker.lifecycle = Lifecycle::Stopped;
        drop(worker);

        if let Some(pos) = self.retiring.iter().position(|&r| r == id) {
            self.retiring.remove(pos);
            if let Some(plan) = self.retired_plan.take() {
                self.retired_plan = Some(plan.release(id).expect("retired worker held cores"));
            }
            if self.retiring.is_empty() && self.phase == Phase::DualActive {
                self.enter_scale_down();
            }
        } else {
            self.plan = self.plan.release(id).expect("worker held cores");
            self.try_pending_scale();
        }
    }

    // ---- reporting ----

    fn into_report(self) -> RunReport {
        let mut batches = self.batch_log;
        batches.sort_by_key(|b| (b.completed_at, b.instance));

        let completed: Vec<f64> = self
            .completions
            .iter()
            .enumerate()
            .filter_map(|(idx, completion)| {
                completion.map(|at| (at - self.arrivals[idx]) as f64 / 1_000.0)
            })
            .collect();
        let completed_requests = completed.len();
        let duration_ms = self
            .completions
            .iter()
            .flatten()
            .max()
            .copied()
            .map(us_to_ms)
            .unwrap_or(0.0);

        let summary = RunSummary {
            model: self.profile.model_id().to_owned(),
            topology_cores: self.topology.total_cores(),
            total_requests: self.arrivals.len(),
            completed_requests,
            dropped_requests: self.arrivals.len() - completed_requests,
            duration_ms,
            batches: batches.len(),
            timeout_batches: batches.iter().filter(|b| b.timeout_fired).count(),
            reconfigurations: self.reconfigurations,
            suppressed_decisions: self.suppressed,
            infeasible_decisions: self.infeasible,
            final_batch: self.estimator.current_batch(),
            request_latency_ms: LatencyStats::from_latencies_ms(completed),
            batch_latency_ms: LatencyStats::from_latencies_ms(
                batches.iter().map(BatchRecord::latency_ms).collect(),
            ),
            phase_log: self
                .phase_log
                .iter()
                .map(|&(at, phase)| PhaseChange {
                    at_ms: us_to_ms(at),
                    phase,
                })
                .collect(),
            config_history: self
                .config_history
                .iter()
                .map(|(at, config)| ConfigChange {
                    at_ms: us_to_ms(*at),
                    config: config.clone(),
                })
                .collect(),
            allocation: self.plan.clone(),
        };

        RunReport {
            summary,
            batches,
            requests: self
                .arrivals
                .iter()
                .zip(&self.completions)
                .map(|(&arrival, &completion)| (arrival, completion))
                .collect(),
            dispatch_times: self.dispatch_times,
            depth_log: self.depth_log,
        }
    }
}
