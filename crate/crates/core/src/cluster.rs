//! Simulated resource manager.
//!
//! The cluster is a fixed set of homogeneous slices. Each slice hosts at most
//! one worker. Grants are partial: asking for more slices than are free
//! returns whatever is free, lowest slice id first.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::clock::SimTime;
use crate::events::{Event, WatermarkDirection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SliceId(pub u32);

impl fmt::Display for SliceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceState {
    Free,
    Granted,
}

#[derive(Debug, Clone)]
pub struct Slice {
    pub id: SliceId,
    pub cpu_capacity: f64,
    pub mem_capacity: f64,
    pub state: SliceState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub total_slices: u32,
    /// Time from grant to a worker on that slice serving requests.
    pub spawn_delay: Duration,
    pub admin_high_watermark: f64,
    pub admin_low_watermark: f64,
    pub slice_cpu: f64,
    pub slice_mem: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            total_slices: 32,
            spawn_delay: Duration::from_secs(5),
            admin_high_watermark: 0.9,
            admin_low_watermark: 0.1,
            slice_cpu: 1.0,
            slice_mem: 1.0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.total_slices == 0 {
            return Err(ClusterError::InvalidConfig("total_slices must be >= 1".into()));
        }
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.admin_low_watermark) || !in_unit(self.admin_high_watermark) {
            return Err(ClusterError::InvalidConfig(
                "watermarks must lie in [0, 1]".into(),
            ));
        }
        if self.admin_low_watermark > self.admin_high_watermark {
            return Err(ClusterError::InvalidConfig(
                "admin_low_watermark must not exceed admin_high_watermark".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClusterError {
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
    #[error("slice request must ask for at least one slice")]
    EmptyRequest,
    #[error("slice {0} does not exist")]
    UnknownSlice(SliceId),
    #[error("slice {0} is not granted")]
    NotGranted(SliceId),
    #[error("cluster coordinator is gone")]
    Disconnected,
}

#[derive(Debug, Clone)]
pub struct Cluster {
    config: ClusterConfig,
    slices: Vec<Slice>,
    free: BTreeSet<SliceId>,
}

impl Cluster {
    pub fn new(config: ClusterConfig) -> Result<Self, ClusterError> {
        config.validate()?;
        let slices = (0..config.total_slices)
            .map(|i| Slice {
                id: SliceId(i),
                cpu_capacity: config.slice_cpu,
                mem_capacity: config.slice_mem,
                state: SliceState::Free,
            })
            .collect();
        let free = (0..config.total_slices).map(SliceId).collect();
        Ok(Self {
            config,
            slices,
            free,
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    /// Grants `min(n, free)` slices, lowest id first. An exhausted cluster
    /// yields an empty list.
    pub fn request_slices(&mut self, n: usize) -> Result<Vec<SliceId>, ClusterError> {
        if n == 0 {
            return Err(ClusterError::EmptyRequest);
        }
        let granted: Vec<SliceId> = self.free.iter().take(n).copied().collect();
        for id in &granted {
            self.free.remove(id);
            self.slices[id.0 as usize].state = SliceState::Granted;
        }
        Ok(granted)
    }

    pub fn release_slice(&mut self, id: SliceId) -> Result<(), ClusterError> {
        let slice = self
            .slices
            .get_mut(id.0 as usize)
            .ok_or(ClusterError::UnknownSlice(id))?;
        if slice.state != SliceState::Granted {
            return Err(ClusterError::NotGranted(id));
        }
        slice.state = SliceState::Free;
        self.free.insert(id);
        Ok(())
    }

    pub fn slice(&self, id: SliceId) -> Option<&Slice> {
        self.slices.get(id.0 as usize)
    }

    pub fn total(&self) -> usize {
        self.slices.len()
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn granted_count(&self) -> usize {
        self.slices.len() - self.free.len()
    }

    pub fn utilization(&self) -> f64 {
        self.granted_count() as f64 / self.slices.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Band {
    Below,
    Normal,
    Above,
}

/// Edge detector for the administrator watermarks: one notification per
/// crossing, none while utilization stays on the same side.
#[derive(Debug, Clone)]
pub struct WatermarkMonitor {
    high: f64,
    low: f64,
    last: Option<Band>,
}

impl WatermarkMonitor {
    pub fn new(config: &ClusterConfig) -> Self {
        Self {
            high: config.admin_high_watermark,
            low: config.admin_low_watermark,
            last: None,
        }
    }

    fn band(&self, util: f64) -> Band {
        if util > self.high {
            Band::Above
        } else if util < self.low {
            Band::Below
        } else {
            Band::Normal
        }
    }

    /// Feed one utilization sample. The first sample only sets the baseline.
    pub fn observe(&mut self, utilization: f64, t: SimTime) -> Option<Event> {
        let band = self.band(utilization);
        let prev = self.last.replace(band);
        let direction = match (prev, band) {
            (Some(p), Band::Above) if p != Band::Above => WatermarkDirection::Above,
            (Some(p), Band::Below) if p != Band::Below => WatermarkDirection::Below,
            _ => return None,
        };
        Some(Event::ClusterWatermark {
            direction,
            utilization,
            t,
        })
    }
}

enum Request {
    Slices(usize, mpsc::Sender<Result<Vec<SliceId>, ClusterError>>),
    Release(SliceId, mpsc::Sender<Result<(), ClusterError>>),
    Utilization(mpsc::Sender<f64>),
}

/// Message-passing front end: one coordinator thread owns the [`Cluster`]
/// and serializes every mutation. Handles are cheap to clone.
#[derive(Clone)]
pub struct ClusterHandle {
    tx: mpsc::Sender<Request>,
}

/// Owner of the coordinator thread; joining it returns the final cluster.
pub struct ClusterCoordinator {
    handle: ClusterHandle,
    join: thread::JoinHandle<Cluster>,
}

impl ClusterCoordinator {
    pub fn spawn(mut cluster: Cluster) -> Self {
        let (tx, rx) = mpsc::channel::<Request>();
        let join = thread::spawn(move || {
            for req in rx {
                match req {
                    Request::Slices(n, reply) => {
                        let _ = reply.send(cluster.request_slices(n));
                    }
                    Request::Release(id, reply) => {
                        let _ = reply.send(cluster.release_slice(id));
                    }
                    Request::Utilization(reply) => {
                        let _ = reply.send(cluster.utilization());
                    }
                }
            }
            cluster
        });
        Self {
            handle: ClusterHandle { tx },
            join,
        }
    }

    pub fn handle(&self) -> ClusterHandle {
        self.handle.clone()
    }

    /// Stops the coordinator once every outstanding handle is dropped.
    pub fn join(self) -> Cluster {
        drop(self.handle);
        self.join.join().expect("cluster coordinator panicked")
    }
}

impl ClusterHandle {
    fn call<T>(
        &self,
        make: impl FnOnce(mpsc::Sender<T>) -> Request,
    ) -> Result<T, ClusterError> {
        let (tx, rx) = mpsc::channel();
        self.tx
            .send(make(tx))
            .map_err(|_| ClusterError::Disconnected)?;
        rx.recv().map_err(|_| ClusterError::Disconnected)
    }

    pub fn request_slices(&self, n: usize) -> Result<Vec<SliceId>, ClusterError> {
        self.call(|tx| Request::Slices(n, tx))?
    }

    pub fn release_slice(&self, id: SliceId) -> Result<(), ClusterError> {
        self.call(|tx| Request::Release(id, tx))?
    }

    pub fn utilization(&self) -> Result<f64, ClusterError> {
        self.call(Request::Utilization)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cluster(n: u32) -> Cluster {
        Cluster::new(ClusterConfig {
            total_slices: n,
            ..ClusterConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn full_partial_and_empty_grants() {
        let mut c = cluster(10);
        assert_eq!(c.request_slices(5).unwrap().len(), 5);

        let mut c = cluster(3);
        let got = c.request_slices(5).unwrap();
        assert_eq!(got, vec![SliceId(0), SliceId(1), SliceId(2)]);
        assert!(c.request_slices(2).unwrap().is_empty());
        assert_eq!(c.request_slices(0), Err(ClusterError::EmptyRequest));
    }

    #[test]
    fn released_slice_is_granted_again() {
        let mut c = cluster(10);
        let all = c.request_slices(10).unwrap();
        assert_eq!(all[7], SliceId(7));
        c.release_slice(SliceId(7)).unwrap();
        assert_eq!(c.request_slices(1).unwrap(), vec![SliceId(7)]);
    }

    #[test]
    fn double_release_and_unknown_slice_fault() {
        let mut c = cluster(10);
        c.request_slices(10).unwrap();
        c.release_slice(SliceId(7)).unwrap();
        assert_eq!(c.release_slice(SliceId(7)), Err(ClusterError::NotGranted(SliceId(7))));
        assert_eq!(c.release_slice(SliceId(99)), Err(ClusterError::UnknownSlice(SliceId(99))));
    }

    #[test]
    fn grant_all_release_one_then_request_two() {
        let mut c = cluster(6);
        c.request_slices(6).unwrap();
        c.release_slice(SliceId(2)).unwrap();
        // free-count bookkeeping: exactly one slice is free
        let expected_free = 6 - 6 + 1;
        assert_eq!(c.request_slices(2).unwrap().len(), expected_free);
    }

    #[test]
    fn utilization_ratio() {
        let mut c = cluster(8);
        assert_eq!(c.utilization(), 0.0);
        c.request_slices(6).unwrap();
        assert_eq!(c.utilization(), 0.75);
    }

    #[test]
    fn watermark_emits_once_per_crossing() {
        let mut c = cluster(10);
        let cfg = c.config().clone();
        let mut mon = WatermarkMonitor::new(&cfg);
        let mut events = Vec::new();
        // scripted grants: 5, 9, 10 (crosses 0.9), stays at 10, 10, then falls
        let script: [i32; 7] = [5, 4, 1, 0, 0, -10, 0];
        let mut held: Vec<SliceId> = Vec::new();
        for (i, step) in script.iter().enumerate() {
            if *step > 0 {
                held.extend(c.request_slices(*step as usize).unwrap());
            } else {
                for _ in 0..(-step) {
                    c.release_slice(held.pop().unwrap()).unwrap();
                }
            }
            if let Some(e) = mon.observe(c.utilization(), SimTime::from_secs(i as u64)) {
                events.push(e);
            }
        }
        // oracle: above-edge at sample 2 (util 1.0 > 0.9), below-edge at 5 (0.0 < 0.1)
        let dirs: Vec<_> = events
            .iter()
            .map(|e| match e {
                Event::ClusterWatermark { direction, t, .. } => (*direction, t.as_secs_f64()),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(
            dirs,
            vec![(WatermarkDirection::Above, 2.0), (WatermarkDirection::Below, 5.0)]
        );
    }

    #[test]
    fn invalid_watermarks_rejected() {
        let err = Cluster::new(ClusterConfig {
            admin_low_watermark: 0.8,
            admin_high_watermark: 0.5,
            ..ClusterConfig::default()
        })
        .unwrap_err();
        assert!(matches!(err, ClusterError::InvalidConfig(_)));
    }

    #[test]
    fn coordinator_serializes_concurrent_requests() {
        let coord = ClusterCoordinator::spawn(cluster(40));
        let threads: Vec<_> = (0..8)
            .map(|_| {
                let h = coord.handle();
                thread::spawn(move || {
                    let mut mine = Vec::new();
                    for _ in 0..10 {
                        mine.extend(h.request_slices(1).unwrap());
                    }
                    mine
                })
            })
            .collect();
        let mut all: Vec<SliceId> = threads.into_iter().flat_map(|t| t.join().unwrap()).collect();
        assert_eq!(all.len(), 40);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 40, "a slice was granted twice");
        let h = coord.handle();
        assert_eq!(h.utilization().unwrap(), 1.0);
        h.release_slice(SliceId(3)).unwrap();
        drop(h);
        let c = coord.join();
        assert_eq!(c.free_count(), 1);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Request(usize),
        Release(u32),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (1usize..6).prop_map(Op::Request),
            (0u32..14).prop_map(Op::Release),
        ]
    }

    proptest! {
        #[test]
        fn conservation_and_exclusive_grants(ops in proptest::collection::vec(op(), 1..80)) {
            let mut c = cluster(12);
            let mut held: BTreeSet<SliceId> = BTreeSet::new();
            for op in ops {
                match op {
                    Op::Request(n) => {
                        for id in c.request_slices(n).unwrap() {
                            prop_assert!(held.insert(id), "slice {} granted twice", id);
                        }
                    }
                    Op::Release(i) => {
                        let id = SliceId(i);
                        let res = c.release_slice(id);
                        prop_assert_eq!(res.is_ok(), held.remove(&id));
                    }
                }
                prop_assert_eq!(c.granted_count() + c.free_count(), c.total());
                prop_assert_eq!(c.granted_count(), held.len());
            }
        }

        #[test]
        fn identical_sequences_replay_identically(ops in proptest::collection::vec(op(), 1..40)) {
            let run = |ops: &[Op]| {
                let mut c = cluster(12);
                let mut trace = Vec::new();
                for op in ops {
                    match op {
                        Op::Request(n) => trace.push(c.request_slices(*n).unwrap()),
                        Op::Release(i) => { let _ = c.release_slice(SliceId(*i)); }
                    }
                }
                trace
            };
            prop_assert_eq!(run(&ops), run(&ops));
        }
    }
}
