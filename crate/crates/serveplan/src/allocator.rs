//! Socket-local, round-robin core assignment.
//!
//! Plans are immutable values: `allocate` and `release` return a new plan,
//! so replaying an operation log reproduces a plan exactly. A core is never
//! handed to two instances, each instance stays within one socket whenever
//! any socket can hold it, and at most one instance may span sockets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type CoreId = u32;
pub type InstanceId = u32;

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("insufficient cores: requested {requested}, available {available}")]
    InsufficientCores { requested: usize, available: usize },
    #[error("instance {0} would be the second to span sockets")]
    SpanLimitExceeded(InstanceId),
    #[error("instance {0} already has an assignment")]
    DuplicateInstance(InstanceId),
    #[error("instance {0} has no assignment")]
    UnknownInstance(InstanceId),
    #[error("core {0} is not in the topology")]
    UnknownCore(CoreId),
    #[error("core {0} is already assigned")]
    CoreInUse(CoreId),
    #[error("instance {instance}: pinned core list has {pinned} cores for {threads} threads")]
    PinnedCountMismatch {
        instance: InstanceId,
        pinned: usize,
        threads: u32,
    },
}

/// Socket/core layout of the machine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    sockets: Vec<Vec<CoreId>>,
}

impl Topology {
    pub fn new(sockets: Vec<Vec<CoreId>>) -> Result<Self, AllocError> {
        if sockets.is_empty() || sockets.iter().any(|s| s.is_empty()) {
            return Err(AllocError::InvalidTopology(
                "need at least one socket with at least one core".to_owned(),
            ));
        }
        let mut seen = BTreeSet::new();
        for core in sockets.iter().flatten() {
            if !seen.insert(*core) {
                return Err(AllocError::InvalidTopology(format!(
                    "core {core} appears twice"
                )));
            }
        }
        let sockets = sockets
            .into_iter()
            .map(|mut s| {
                s.sort_unstable();
                s
            })
            .collect();
        Ok(Self { sockets })
    }

    /// `sockets` sockets of `cores_per_socket` cores with sequential ids.
    pub fn uniform(sockets: u32, cores_per_socket: u32) -> Result<Self, AllocError> {
        if sockets == 0 || cores_per_socket == 0 {
            return Err(AllocError::InvalidTopology(
                "socket and core counts must be >= 1".to_owned(),
            ));
        }
        let layout = (0..sockets)
            .map(|s| {
                (0..cores_per_socket)
                    .map(|c| s * cores_per_socket + c)
                    .collect()
            })
            .collect();
        Self::new(layout)
    }

    /// Parses the `SxC` shorthand, e.g. `2x8`.
    pub fn parse(spec: &str) -> Result<Self, AllocError> {
        let (s, c) = spec
            .split_once(['x', 'X'])
            .ok_or_else(|| AllocError::InvalidTopology(format!("expected SxC, got {spec:?}")))?;
        let sockets: u32 = s
            .trim()
            .parse()
            .map_err(|_| AllocError::InvalidTopology(format!("bad socket count {s:?}")))?;
        let cores: u32 = c
            .trim()
            .parse()
            .map_err(|_| AllocError::InvalidTopology(format!("bad core count {c:?}")))?;
        Self::uniform(sockets, cores)
    }

    /// Parses a topology file. Two forms are accepted: a one-line
    /// `sockets: [[0..7],[8..15]]` listing (ranges inclusive), or one socket
    /// per line with core ids as `0-7,16` style ranges and singles. Blank
    /// lines and `#` comments are skipped.
    pub fn from_cpulists(text: &str) -> Result<Self, AllocError> {
        if let Some(rest) = text.trim().strip_prefix("sockets:") {
            return Self::from_bracket_list(rest.trim());
        }
        let mut sockets = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cores = Vec::new();
            for part in line.split(',') {
                let part = part.trim();
                if part.is_empty() {
                    continue;
                }
                if let Some((lo, hi)) = part.split_once('-') {
                    let lo: CoreId = lo.trim().parse().map_err(|_| {
                        AllocError::InvalidTopology(format!("bad core range {part:?}"))
                    })?;
                    let hi: CoreId = hi.trim().parse().map_err(|_| {
                        AllocError::InvalidTopology(format!("bad core range {part:?}"))
                    })?;
                    if hi < lo {
                        return Err(AllocError::InvalidTopology(format!(
                            "descending core range {part:?}"
                        )));
                    }
                    cores.extend(lo..=hi);
                } else {
                    cores.push(part.parse().map_err(|_| {
                        AllocError::InvalidTopology(format!("bad core id {part:?}"))
                    })?);
                }
            }
            sockets.push(cores);
        }
        Self::new(sockets)
    }

    fn from_bracket_list(text: &str) -> Result<Self, AllocError> {
        let inner = text
            .strip_prefix('[')
            .and_then(|t| t.strip_suffix(']'))
            .ok_or_else(|| {
                AllocError::InvalidTopology(format!("expected [[..],[..]], got {text:?}"))
            })?;
        let mut sockets = Vec::new();
        for group in inner.split("],") {
            let group = group.trim().trim_start_matches('[').trim_end_matches(']');
            let mut cores = Vec::new();
            for part in group.split(',') {
                let part = part.trim();
                if part.is_empty() {
                    continue;
                }
                if let Some((lo, hi)) = part.split_once("..") {
                    let lo: CoreId = lo.trim().parse().map_err(|_| {
                        AllocError::InvalidTopology(format!("bad core range {part:?}"))
                    })?;
                    let hi: CoreId = hi.trim().parse().map_err(|_| {
                        AllocError::InvalidTopology(format!("bad core range {part:?}"))
                    })?;
                    if hi < lo {
                        return Err(AllocError::InvalidTopology(format!(
                            "descending core range {part:?}"
                        )));
                    }
                    cores.extend(lo..=hi);
                } else {
                    cores.push(part.parse().map_err(|_| {
                        AllocError::InvalidTopology(format!("bad core id {part:?}"))
                    })?);
                }
            }
            sockets.push(cores);
        }
        Self::new(sockets)
    }

    pub fn sockets(&self) -> &[Vec<CoreId>] {
        &self.sockets
    }

    pub fn total_cores(&self) -> usize {
        self.sockets.iter().map(|s| s.len()).sum()
    }

    pub fn socket_of(&self, core: CoreId) -> Option<usize> {
        self.sockets.iter().position(|s| s.contains(&core))
    }
}

/// A demand for one instance: a thread count, or an explicit pinned core
/// list that bypasses round-robin placement (but still checks aliasing).
#[derive(Debug, Clone)]
pub struct CoreDemand {
    pub instance: InstanceId,
    pub threads: u32,
    pub pinned: Option<Vec<CoreId>>,
}

impl CoreDemand {
    pub fn new(instance: InstanceId, threads: u32) -> Self {
        Self {
            instance,
            threads,
            pinned: None,
        }
    }

    pub fn pinned(instance: InstanceId, cores: Vec<CoreId>) -> Self {
        Self {
            instance,
            threads: cores.len() as u32,
            pinned: Some(cores),
        }
    }
}

/// Immutable core assignments plus the free pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AllocationPlan {
    assignments: BTreeMap<InstanceId, Vec<CoreId>>,
    free: BTreeSet<CoreId>,
}

impl AllocationPlan {
    /// A plan with every core of `topology` free.
    pub fn empty(topology: &Topology) -> Self {
        Self {
            assignments: BTreeMap::new(),
            free: topology.sockets.iter().flatten().copied().collect(),
        }
    }

    pub fn assignment(&self, instance: InstanceId) -> Option<&[CoreId]> {
        self.assignments.get(&instance).map(Vec::as_slice)
    }

    pub fn assignments(&self) -> impl Iterator<Item = (InstanceId, &[CoreId])> {
        self.assignments.iter().map(|(id, cores)| (*id, cores.as_slice()))
    }

    pub fn free_cores(&self) -> &BTreeSet<CoreId> {
        &self.free
    }

    pub fn assigned_cores(&self) -> usize {
        self.assignments.values().map(Vec::len).sum()
    }

    /// Instances whose cores touch more than one socket.
    pub fn spanning_instances(&self, topology: &Topology) -> usize {
        self.assignments
            .values()
            .filter(|cores| {
                let mut sockets = cores.iter().filter_map(|c| topology.socket_of(*c));
                match sockets.next() {
                    None => false,
                    Some(first) => sockets.any(|s| s != first),
                }
            })
            .count()
    }

    /// Grants each demand its cores, visiting demands in order and placing
    /// each on the socket with the most free cores (ties to the lowest
    /// socket id). An instance spills across sockets only when no single
    /// socket can hold it, and only one spanning instance may exist.
    pub fn allocate(
        &self,
        topology: &Topology,
        demands: &[CoreDemand],
    ) -> Result<Self, AllocError> {
        let requested: usize = demands.iter().map(|d| d.threads as usize).sum();
        if requested > self.free.len() {
            return Err(AllocError::InsufficientCores {
                requested,
                available: self.free.len(),
            });
        }

        let mut next = self.clone();
        for demand in demands {
            if next.assignments.contains_key(&demand.instance) {
                return Err(AllocError::DuplicateInstance(demand.instance));
            }
            let cores = match &demand.pinned {
                Some(pins) => next.take_pinned(topology, demand, pins)?,
                None => next.take_round_robin(topology, demand)?,
            };
            next.assignments.insert(demand.instance, cores);
        }
        Ok(next)
    }

    fn take_pinned(
        &mut self,
        topology: &Topology,
        demand: &CoreDemand,
        pins: &[CoreId],
    ) -> Result<Vec<CoreId>, AllocError> {
        if pins.len() != demand.threads as usize {
            return Err(AllocError::PinnedCountMismatch {
                instance: demand.instance,
                pinned: pins.len(),
                threads: demand.threads,
            });
        }
        for &core in pins {
            if topology.socket_of(core).is_none() {
                return Err(AllocError::UnknownCore(core));
            }
            if !self.free.contains(&core) {
                return Err(AllocError::CoreInUse(core));
            }
        }
        let mut cores = pins.to_vec();
        cores.sort_unstable();
        cores.dedup();
        if cores.len() != pins.len() {
            return Err(AllocError::CoreInUse(pins[0]));
        }
        for &core in &cores {
            self.free.remove(&core);
        }
        Ok(cores)
    }

    fn take_round_robin(
        &mut self,
        topology: &Topology,
        demand: &CoreDemand,
    ) -> Result<Vec<CoreId>, AllocError> {
        let want = demand.threads as usize;
        if want > self.free.len() {
            return Err(AllocError::InsufficientCores {
                requested: want,
                available: self.free.len(),
            });
        }

        let mut per_socket: Vec<(usize, Vec<CoreId>)> = topology
            .sockets
            .iter()
            .enumerate()
            .map(|(id, cores)| {
                let free: Vec<CoreId> = cores
                    .iter()
                    .copied()
                    .filter(|c| self.free.contains(c))
                    .collect();
                (id, free)
            })
            .collect();

        // Most free cores wins; ties go to the lowest socket id.
        per_socket.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));

        let cores: Vec<CoreId> = if per_socket[0].1.len() >= want {
            per_socket[0].1.iter().copied().take(want).collect()
        } else {
            // No socket fits: spill, largest free remainder first.
            if self.spanning_instances(topology) > 0 {
                return Err(AllocError::SpanLimitExceeded(demand.instance));
            }
            let mut picked = Vec::with_capacity(want);
            for (_, free) in &per_socket {
                for &core in free {
                    if picked.len() == want {
                        break;
                    }
                    picked.push(core);
                }
            }
            picked.sort_unstable();
            picked
        };

        for &core in &cores {
            self.free.remove(&core);
        }
        Ok(cores)
    }

    /// Returns the instance's cores to the free pool.
    pub fn release(&self, instance: InstanceId) -> Result<Self, AllocError> {
        let mut next = self.clone();
        let cores = next
            .assignments
            .remove(&instance)
            .ok_or(AllocError::UnknownInstance(instance))?;
        next.free.extend(cores);
        Ok(next)
    }
}
