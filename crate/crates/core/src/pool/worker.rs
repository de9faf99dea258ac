use std::collections::VecDeque;
use std::fmt;
use std::time::Duration;

use crate::clock::SimTime;
use crate::cluster::SliceId;
use crate::events::SpawnOrigin;
use crate::ids::WorkerId;

use super::{ElasticObject, Invocation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerState {
    Starting,
    Serving,
    Draining,
    Stopped,
    Crashed,
}

impl WorkerState {
    /// Counted towards the pool size and eligible as sentinel.
    pub fn is_live(self) -> bool {
        matches!(self, WorkerState::Starting | WorkerState::Serving)
    }
}

impl fmt::Display for WorkerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkerState::Starting => "starting",
            WorkerState::Serving => "serving",
            WorkerState::Draining => "draining",
            WorkerState::Stopped => "stopped",
            WorkerState::Crashed => "crashed",
        })
    }
}

pub(super) enum Exec {
    Idle,
    AwaitingLock {
        inv: Invocation,
        lock: String,
        since: SimTime,
    },
    Running {
        inv: Invocation,
        lock: Option<String>,
        lock_wait: Option<Duration>,
    },
}

/// Accumulators for the utilization gauges, reset every burst interval.
#[derive(Debug, Clone, Copy)]
pub(super) struct GaugeWindow {
    pub start: SimTime,
    pub accepted: u64,
    pub pending_at_start: usize,
}

pub struct Worker {
    pub(super) uid: WorkerId,
    pub(super) slice: SliceId,
    pub(super) state: WorkerState,
    pub(super) queue: VecDeque<Invocation>,
    pub(super) exec: Exec,
    pub(super) ticket: u64,
    pub(super) object: Box<dyn ElasticObject>,
    pub(super) origin: SpawnOrigin,
    pub(super) spawned_at: SimTime,
    pub(super) serving_at: Option<SimTime>,
    pub(super) first_served_at: Option<SimTime>,
    pub(super) served_count: u64,
    pub(super) window: GaugeWindow,
    pub(super) cpu_util: f64,
    pub(super) mem_util: f64,
    pub(super) snapshot_seen: Option<SimTime>,
}

impl Worker {
    pub(super) fn new(
        uid: WorkerId,
        slice: SliceId,
        object: Box<dyn ElasticObject>,
        origin: SpawnOrigin,
        now: SimTime,
    ) -> Self {
        Self {
            uid,
            slice,
            state: WorkerState::Starting,
            queue: VecDeque::new(),
            exec: Exec::Idle,
            ticket: 0,
            object,
            origin,
            spawned_at: now,
            serving_at: None,
            first_served_at: None,
            served_count: 0,
            window: GaugeWindow {
                start: now,
                accepted: 0,
                pending_at_start: 0,
            },
            cpu_util: 0.0,
            mem_util: 0.0,
            snapshot_seen: None,
        }
    }

    pub fn uid(&self) -> WorkerId {
        self.uid
    }

    pub fn slice(&self) -> SliceId {
        self.slice
    }

    pub fn state(&self) -> WorkerState {
        self.state
    }

    pub fn served_count(&self) -> u64 {
        self.served_count
    }

    pub fn origin(&self) -> SpawnOrigin {
        self.origin
    }

    pub fn spawned_at(&self) -> SimTime {
        self.spawned_at
    }

    pub fn first_served_at(&self) -> Option<SimTime> {
        self.first_served_at
    }

    pub fn cpu_util(&self) -> f64 {
        self.cpu_util
    }

    pub fn mem_util(&self) -> f64 {
        self.mem_util
    }

    /// Time of the last pool snapshot this worker's skeleton received.
    pub fn snapshot_seen(&self) -> Option<SimTime> {
        self.snapshot_seen
    }

    /// Queued plus in-flight invocations.
    pub fn pending(&self) -> usize {
        self.queue.len() + usize::from(!self.is_idle())
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub(super) fn is_idle(&self) -> bool {
        matches!(self.exec, Exec::Idle)
    }

    /// Serving seconds that fall inside the current gauge window.
    pub(super) fn window_span(&self, now: SimTime) -> Duration {
        let from = match self.serving_at {
            Some(s) if s > self.window.start => s,
            Some(_) => self.window.start,
            None => now,
        };
        now.since(from)
    }
}
