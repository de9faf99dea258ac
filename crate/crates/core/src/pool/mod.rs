//! Elastic object pool runtime.
//!
//! A pool is a set of workers that together present one logical remote
//! object. Each worker is a sequential executor with a FIFO mailbox; the
//! pool itself is driven by the simulation agenda through [`Pool::handle`]
//! and never blocks. Anything that must happen later (a worker finishing
//! boot, an invocation completing, a lock wait expiring) is pushed to the
//! [`Outbox`] as a timed [`PoolEvent`].
//!
//! Invocations take effect when they complete. A crash therefore turns every
//! queued or in-flight invocation into an error reply and none of them has
//! touched shared state.

mod worker;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use thiserror::Error;

use crate::balancer::{MemberLoad, PoolSnapshot};
use crate::clock::SimTime;
use crate::cluster::{Cluster, ClusterError, SliceId};
use crate::events::{Event, EventLog, SpawnOrigin};
use crate::ids::{PoolId, RequestId, WorkerId};
use crate::scaling::{
    evaluate_coarse, evaluate_fine_grained, evaluate_implicit, AdvisorReply, PoolDelta, PoolMetrics,
    ScalingPolicy, WorkerGauge, DEFAULT_BURST_INTERVAL,
};
use crate::store::{Acquire, LockHolder, Store, StoreKey, Value};

pub use worker::{Worker, WorkerState};
use worker::{Exec, GaugeWindow};

#[derive(Debug, Clone, PartialEq)]
pub struct PoolConfig {
    pub name: String,
    pub min_size: usize,
    pub max_size: usize,
    pub burst_interval: Duration,
    pub policy: ScalingPolicy,
    /// Invocations per second one serving worker completes.
    pub service_rate: f64,
}

impl PoolConfig {
    pub fn new(name: impl Into<String>, min_size: usize, max_size: usize) -> Self {
        Self {
            name: name.into(),
            min_size,
            max_size,
            burst_interval: DEFAULT_BURST_INTERVAL,
            policy: ScalingPolicy::default(),
            service_rate: 5.0,
        }
    }

    pub fn with_policy(mut self, policy: ScalingPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn validate(&self) -> Result<(), PoolError> {
        let bad = |m: String| Err(PoolError::InvalidConfig(m));
        if self.name.is_empty() || self.name.contains('$') {
            return bad(format!("pool name {:?} must be non-empty and contain no '$'", self.name));
        }
        if self.min_size < 2 {
            return bad(format!("min_size must be >= 2, got {}", self.min_size));
        }
        if self.max_size < self.min_size {
            return bad(format!(
                "max_size ({}) must be >= min_size ({})",
                self.max_size, self.min_size
            ));
        }
        if self.burst_interval.is_zero() {
            return bad("burst_interval must be positive".into());
        }
        if !(self.service_rate.is_finite() && self.service_rate > 0.0) {
            return bad(format!("service_rate must be positive, got {}", self.service_rate));
        }
        if let ScalingPolicy::CoarseThreshold(th) = &self.policy {
            if th.is_empty() {
                return bad("coarse policy needs at least one threshold".into());
            }
        }
        Ok(())
    }

    pub fn service_time(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.service_rate)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("invalid pool config: {0}")]
    InvalidConfig(String),
    #[error("pool is at max_size")]
    AtMax,
    #[error("pool is at min_size")]
    AtMin,
    #[error("cluster granted no slice")]
    NoCapacity,
    #[error("pool has no live member")]
    PoolDead,
    #[error("unknown worker {0}")]
    UnknownWorker(WorkerId),
    #[error("worker {uid} is {state}")]
    BadState { uid: WorkerId, state: WorkerState },
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invocation {
    pub request_id: RequestId,
    pub method: String,
    pub args: Vec<u8>,
    /// Reply routing: index of the issuing client.
    pub client: u32,
    pub enqueued_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvokeError {
    #[error("worker {0} crashed")]
    WorkerCrashed(WorkerId),
    #[error("timed out waiting for lock {0}")]
    LockTimeout(String),
    #[error("application error: {0}")]
    App(String),
    #[error("no pool member reachable")]
    PoolUnreachable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub request_id: RequestId,
    pub client: u32,
    pub result: Result<Vec<u8>, InvokeError>,
    /// Worker that produced the outcome, if any worker was involved.
    pub worker: Option<WorkerId>,
    pub at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectKind {
    /// The member is not taking work; try the hinted member instead.
    Redirect(Option<WorkerId>),
    /// The member is gone.
    Unreachable,
}

/// A refused invocation, handed back to the stub untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub inv: Invocation,
    pub kind: RejectKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockRequest {
    pub name: String,
    /// `None` waits forever.
    pub timeout: Option<Duration>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecContext {
    pub now: SimTime,
    pub worker: WorkerId,
    /// Time spent waiting for the invocation's lock, if it needed one.
    pub lock_wait: Option<Duration>,
    pub service_time: Duration,
}

/// What an advisor may look at besides its own object state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvisorContext {
    pub now: SimTime,
    pub worker: WorkerId,
    pub live_size: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub service_rate: f64,
    /// Length of the current evaluation window.
    pub window: Duration,
    /// Invocations accepted by the pool during the window.
    pub accepted_in_window: u64,
    /// Queued plus in-flight invocations across the pool right now.
    pub pool_pending: usize,
}

/// Application logic hosted by every pool member.
pub trait ElasticObject {
    /// Lock the invocation must hold while it executes.
    fn lock_for(&self, _inv: &Invocation) -> Option<LockRequest> {
        None
    }

    fn execute(&mut self, store: &mut Store, inv: &Invocation, ctx: &ExecContext) -> Result<Vec<u8>, String>;

    /// Called when the invocation's lock wait expired before a grant.
    fn lock_timed_out(&mut self, _inv: &Invocation, _waited: Duration) {}

    /// Signed pool-size recommendation, polled once per burst interval
    /// under the fine-grained policy.
    fn change_pool_size(&mut self, _ctx: &AdvisorContext, _store: &Store) -> Result<i64, String> {
        Ok(0)
    }
}

pub type ObjectFactory = Box<dyn FnMut(WorkerId, &Store, SimTime) -> Box<dyn ElasticObject>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolEvent {
    WorkerReady { uid: WorkerId, ticket: u64 },
    WorkerStep { uid: WorkerId, ticket: u64 },
    LockDeadline { uid: WorkerId, ticket: u64 },
}

/// Side effects produced while handling one pool call.
#[derive(Debug, Default)]
pub struct Outbox {
    pub scheduled: Vec<(SimTime, PoolId, PoolEvent)>,
    pub replies: Vec<Reply>,
    /// `(request, worker)` for every invocation that ran to completion.
    pub executions: Vec<(RequestId, WorkerId)>,
    /// Lock hand-offs to holders that live in other pools.
    pub foreign_grants: Vec<(String, LockHolder)>,
}

impl Outbox {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Mutable world a pool operates on for one call.
pub struct Env<'a> {
    pub now: SimTime,
    pub cluster: &'a mut Cluster,
    pub store: &'a mut Store,
    pub log: &'a mut EventLog,
    pub out: &'a mut Outbox,
}

/// Lowest uid wins.
pub fn elect(members: &[WorkerId]) -> Result<WorkerId, PoolError> {
    members.iter().copied().min().ok_or(PoolError::PoolDead)
}

pub struct Pool {
    id: PoolId,
    config: PoolConfig,
    workers: BTreeMap<WorkerId, Worker>,
    next_uid: u64,
    sentinel: Option<WorkerId>,
    shortfall: bool,
    factory: ObjectFactory,
    forced_gauges: Option<(f64, f64)>,
    window_start: SimTime,
    window_accepted: u64,
}

impl fmt::Debug for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pool")
            .field("name", &self.config.name)
            .field("sentinel", &self.sentinel)
            .field("live", &self.live_size())
            .field("workers", &self.workers.len())
            .finish()
    }
}

impl Pool {
    /// Requests `min_size` slices and spawns one worker per granted slice.
    /// A partial grant starts a smaller pool with the shortfall flag set.
    pub fn instantiate(
        id: PoolId,
        config: PoolConfig,
        factory: ObjectFactory,
        env: &mut Env<'_>,
    ) -> Result<Pool, PoolError> {
        config.validate()?;
        let slices = env.cluster.request_slices(config.min_size)?;
        let mut pool = Pool {
            id,
            shortfall: slices.len() < config.min_size,
            config,
            workers: BTreeMap::new(),
            next_uid: 1,
            sentinel: None,
            factory,
            forced_gauges: None,
            window_start: env.now,
            window_accepted: 0,
        };
        if slices.is_empty() {
            env.log.record(Event::NoCapacity {
                pool: pool.config.name.clone(),
                t: env.now,
            });
            return Err(PoolError::NoCapacity);
        }
        for slice in slices {
            pool.spawn(slice, SpawnOrigin::Init, env);
        }
        pool.elect_sentinel(env)?;
        Ok(pool)
    }

    pub fn id(&self) -> PoolId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn sentinel(&self) -> Option<WorkerId> {
        self.sentinel
    }

    /// Fewer slices than `min_size` were granted at instantiation.
    pub fn shortfall(&self) -> bool {
        self.shortfall
    }

    pub fn worker(&self, uid: WorkerId) -> Option<&Worker> {
        self.workers.get(&uid)
    }

    /// All workers ever spawned, including stopped and crashed ones.
    pub fn workers(&self) -> impl Iterator<Item = &Worker> {
        self.workers.values()
    }

    /// Starting plus serving members.
    pub fn live_size(&self) -> usize {
        self.workers.values().filter(|w| w.state.is_live()).count()
    }

    pub fn serving(&self) -> Vec<WorkerId> {
        self.in_state(WorkerState::Serving)
    }

    pub fn serving_count(&self) -> usize {
        self.serving().len()
    }

    pub fn total_pending(&self) -> usize {
        self.workers.values().map(Worker::pending).sum()
    }

    fn in_state(&self, state: WorkerState) -> Vec<WorkerId> {
        self.workers
            .values()
            .filter(|w| w.state == state)
            .map(|w| w.uid)
            .collect()
    }

    fn live(&self) -> Vec<WorkerId> {
        self.workers
            .values()
            .filter(|w| w.state.is_live())
            .map(|w| w.uid)
            .collect()
    }

    /// Pins every serving worker's gauges, bypassing the queue-based model.
    pub fn force_gauges(&mut self, gauges: Option<(f64, f64)>) {
        self.forced_gauges = gauges;
    }

    pub fn sentinel_key(&self) -> StoreKey {
        StoreKey::new(self.config.name.clone(), "sentinel").expect("pool names are validated")
    }

    fn holder(&self, uid: WorkerId) -> LockHolder {
        LockHolder::new(self.id, uid)
    }

    fn schedule(&self, env: &mut Env<'_>, at: SimTime, ev: PoolEvent) {
        env.out.scheduled.push((at, self.id, ev));
    }

    fn spawn(&mut self, slice: SliceId, origin: SpawnOrigin, env: &mut Env<'_>) -> WorkerId {
        let uid = WorkerId(self.next_uid);
        self.next_uid += 1;
        let object = (self.factory)(uid, env.store, env.now);
        self.workers
            .insert(uid, Worker::new(uid, slice, object, origin, env.now));
        env.log.record(Event::Spawn {
            pool: self.config.name.clone(),
            uid,
            origin,
            t: env.now,
        });
        let ready = env.now + env.cluster.config().spawn_delay;
        self.schedule(env, ready, PoolEvent::WorkerReady { uid, ticket: 0 });
        uid
    }

    /// Elects the lowest live uid and records it in the store. Logs only
    /// when the sentinel changes.
    pub fn elect_sentinel(&mut self, env: &mut Env<'_>) -> Result<WorkerId, PoolError> {
        let winner = match elect(&self.live()) {
            Ok(w) => w,
            Err(e) => {
                self.sentinel = None;
                return Err(e);
            }
        };
        if self.sentinel != Some(winner) {
            self.sentinel = Some(winner);
            env.store
                .put_value(&self.sentinel_key(), &Value::Int(winner.0 as i64));
            env.log.record(Event::Elect {
                pool: self.config.name.clone(),
                uid: winner,
                t: env.now,
            });
        }
        Ok(winner)
    }

    /// Requests one slice and spawns a worker on it. The provisioning
    /// interval of the new worker starts now.
    pub fn add_worker(&mut self, env: &mut Env<'_>) -> Result<WorkerId, PoolError> {
        if self.live_size() >= self.config.max_size {
            return Err(PoolError::AtMax);
        }
        let Some(&slice) = env.cluster.request_slices(1)?.first() else {
            env.log.record(Event::NoCapacity {
                pool: self.config.name.clone(),
                t: env.now,
            });
            return Err(PoolError::NoCapacity);
        };
        let uid = self.spawn(slice, SpawnOrigin::Scale, env);
        if self.sentinel.is_none() {
            self.elect_sentinel(env)?;
        }
        Ok(uid)
    }

    /// Graceful removal: the worker stops taking new invocations, finishes
    /// what it has queued, then stops and frees its slice. A sentinel victim
    /// hands the role over as soon as it is marked draining.
    pub fn remove_worker(&mut self, uid: WorkerId, env: &mut Env<'_>) -> Result<(), PoolError> {
        let w = self.workers.get(&uid).ok_or(PoolError::UnknownWorker(uid))?;
        if w.state != WorkerState::Serving {
            return Err(PoolError::BadState { uid, state: w.state });
        }
        if self.live_size() <= self.config.min_size {
            return Err(PoolError::AtMin);
        }
        self.workers.get_mut(&uid).expect("checked").state = WorkerState::Draining;
        env.log.record(Event::Drain {
            pool: self.config.name.clone(),
            uid,
            t: env.now,
        });
        if self.sentinel == Some(uid) {
            self.elect_sentinel(env)?;
        }
        self.start_next(uid, env);
        Ok(())
    }

    fn stop(&mut self, uid: WorkerId, env: &mut Env<'_>) {
        let w = self.workers.get_mut(&uid).expect("stop of unknown worker");
        debug_assert!(w.queue.is_empty() && w.is_idle());
        w.state = WorkerState::Stopped;
        w.ticket += 1;
        let slice = w.slice;
        if let Err(e) = env.cluster.release_slice(slice) {
            log::error!("pool={} uid={uid} slice release failed: {e}", self.config.name);
        }
        env.log.record(Event::Stop {
            pool: self.config.name.clone(),
            uid,
            t: env.now,
        });
    }

    /// Kills a worker. Queued and in-flight invocations fail back to their
    /// clients, held locks pass to the next waiter, and a dead sentinel is
    /// replaced immediately.
    pub fn crash(&mut self, uid: WorkerId, env: &mut Env<'_>) -> Result<(), PoolError> {
        let holder = self.holder(uid);
        let w = self.workers.get_mut(&uid).ok_or(PoolError::UnknownWorker(uid))?;
        if matches!(w.state, WorkerState::Stopped | WorkerState::Crashed) {
            return Err(PoolError::BadState { uid, state: w.state });
        }
        w.state = WorkerState::Crashed;
        w.ticket += 1;
        let mut lost: Vec<Invocation> = Vec::new();
        match std::mem::replace(&mut w.exec, Exec::Idle) {
            Exec::Idle => {}
            Exec::AwaitingLock { inv, .. } | Exec::Running { inv, .. } => lost.push(inv),
        }
        lost.extend(w.queue.drain(..));
        let slice = w.slice;
        for inv in lost {
            env.out.replies.push(Reply {
                request_id: inv.request_id,
                client: inv.client,
                result: Err(InvokeError::WorkerCrashed(uid)),
                worker: Some(uid),
                at: env.now,
            });
        }
        if let Err(e) = env.cluster.release_slice(slice) {
            log::error!("pool={} uid={uid} slice release failed: {e}", self.config.name);
        }
        env.log.record(Event::Crash {
            pool: self.config.name.clone(),
            uid,
            t: env.now,
        });
        for (name, next) in env.store.locks_mut().release_all(holder, env.now) {
            self.grant(&name, next, env);
        }
        if self.sentinel == Some(uid) {
            if let Err(e) = self.elect_sentinel(env) {
                log::error!("pool={} {e}", self.config.name);
            }
        }
        Ok(())
    }

    /// Skeleton-side admission of one invocation.
    pub fn accept(&mut self, uid: WorkerId, inv: Invocation, env: &mut Env<'_>) -> Result<(), Rejection> {
        let state = self.workers.get(&uid).map(|w| w.state);
        match state {
            Some(WorkerState::Serving) => {
                let w = self.workers.get_mut(&uid).expect("present");
                w.queue.push_back(inv);
                w.window.accepted += 1;
                self.window_accepted += 1;
                self.start_next(uid, env);
                Ok(())
            }
            Some(WorkerState::Draining | WorkerState::Starting) => {
                let hint = self.serving().into_iter().find(|&m| m != uid);
                Err(Rejection {
                    inv,
                    kind: RejectKind::Redirect(hint),
                })
            }
            _ => Err(Rejection {
                inv,
                kind: RejectKind::Unreachable,
            }),
        }
    }

    /// Member list a stub receives from the sentinel. `None` when the
    /// sentinel cannot answer.
    pub fn members_for_stub(&self) -> Option<Vec<WorkerId>> {
        let s = self.sentinel?;
        (self.workers[&s].state == WorkerState::Serving).then(|| self.serving())
    }

    /// Pool state as collected by the sentinel, or `None` if there is no
    /// sentinel able to collect it.
    pub fn snapshot(&self, now: SimTime) -> Option<PoolSnapshot> {
        let sentinel = self.sentinel?;
        if self.workers[&sentinel].state != WorkerState::Serving {
            return None;
        }
        let members = self
            .workers
            .values()
            .filter(|w| matches!(w.state, WorkerState::Serving | WorkerState::Draining))
            .map(|w| MemberLoad {
                uid: w.uid,
                pending: w.pending(),
                serving: w.state == WorkerState::Serving,
            })
            .collect();
        Some(PoolSnapshot {
            pool: self.config.name.clone(),
            sentinel,
            taken_at: now,
            members,
        })
    }

    /// Marks the snapshot as received by every listed member still alive.
    pub fn deliver_snapshot(&mut self, snap: &PoolSnapshot) -> usize {
        let mut delivered = 0;
        for m in &snap.members {
            if let Some(w) = self.workers.get_mut(&m.uid) {
                if matches!(w.state, WorkerState::Serving | WorkerState::Draining) {
                    w.snapshot_seen = Some(snap.taken_at);
                    delivered += 1;
                }
            }
        }
        delivered
    }

    /// Moves up to `count` invocations from the tail of `from`'s queue to
    /// the tail of `to`'s, keeping their order. Returns the number moved.
    pub fn move_queued(&mut self, from: WorkerId, to: WorkerId, count: usize, env: &mut Env<'_>) -> usize {
        let ok = |w: Option<&Worker>| w.is_some_and(|w| w.state == WorkerState::Serving);
        if from == to || !ok(self.workers.get(&from)) || !ok(self.workers.get(&to)) {
            return 0;
        }
        let src = self.workers.get_mut(&from).expect("checked");
        let n = count.min(src.queue.len());
        let moved: Vec<Invocation> = src.queue.drain(src.queue.len() - n..).collect();
        let dst = self.workers.get_mut(&to).expect("checked");
        dst.queue.extend(moved);
        self.start_next(to, env);
        n
    }

    /// Highest serving uid, avoiding the sentinel while others serve.
    pub fn pick_victim(&self) -> Option<WorkerId> {
        let serving = self.serving();
        serving
            .iter()
            .rev()
            .copied()
            .find(|&u| Some(u) != self.sentinel)
            .or_else(|| serving.last().copied())
    }

    pub fn handle(&mut self, ev: PoolEvent, env: &mut Env<'_>) {
        match ev {
            PoolEvent::WorkerReady { uid, ticket } => {
                let Some(w) = self.workers.get_mut(&uid) else { return };
                if w.ticket != ticket || w.state != WorkerState::Starting {
                    return;
                }
                w.state = WorkerState::Serving;
                w.serving_at = Some(env.now);
                env.log.record(Event::Serving {
                    pool: self.config.name.clone(),
                    uid,
                    t: env.now,
                });
                self.start_next(uid, env);
            }
            PoolEvent::WorkerStep { uid, ticket } => {
                if self.workers.get(&uid).is_some_and(|w| w.ticket == ticket) {
                    self.complete(uid, env);
                }
            }
            PoolEvent::LockDeadline { uid, ticket } => {
                if self.workers.get(&uid).is_some_and(|w| w.ticket == ticket) {
                    self.lock_expired(uid, env);
                }
            }
        }
    }

    /// Starts the next queued invocation if the worker is idle; stops a
    /// draining worker once it has nothing left.
    fn start_next(&mut self, uid: WorkerId, env: &mut Env<'_>) {
        let holder = self.holder(uid);
        loop {
            let w = self.workers.get_mut(&uid).expect("known worker");
            if !w.is_idle() || !matches!(w.state, WorkerState::Serving | WorkerState::Draining) {
                return;
            }
            let Some(inv) = w.queue.pop_front() else {
                if w.state == WorkerState::Draining {
                    self.stop(uid, env);
                }
                return;
            };
            w.ticket += 1;
            if w.first_served_at.is_none() {
                w.first_served_at = Some(env.now);
                env.log.record(Event::FirstServe {
                    pool: self.config.name.clone(),
                    uid,
                    t: env.now,
                });
            }
            let Some(req) = w.object.lock_for(&inv) else {
                self.begin_running(uid, inv, None, None, env);
                return;
            };
            match env.store.locks_mut().acquire(&req.name, holder, env.now, req.timeout) {
                Ok(Acquire::Acquired) => {
                    self.begin_running(uid, inv, Some(req.name), Some(Duration::ZERO), env);
                    return;
                }
                Ok(Acquire::Queued { deadline }) => {
                    let ticket = w.ticket;
                    w.exec = Exec::AwaitingLock {
                        inv,
                        lock: req.name,
                        since: env.now,
                    };
                    if let Some(d) = deadline {
                        self.schedule(env, d, PoolEvent::LockDeadline { uid, ticket });
                    }
                    return;
                }
                Err(e) => {
                    env.out.replies.push(Reply {
                        request_id: inv.request_id,
                        client: inv.client,
                        result: Err(InvokeError::App(e.to_string())),
                        worker: Some(uid),
                        at: env.now,
                    });
                }
            }
        }
    }

    fn begin_running(
        &mut self,
        uid: WorkerId,
        inv: Invocation,
        lock: Option<String>,
        lock_wait: Option<Duration>,
        env: &mut Env<'_>,
    ) {
        let done = env.now + self.config.service_time();
        let w = self.workers.get_mut(&uid).expect("known worker");
        w.exec = Exec::Running { inv, lock, lock_wait };
        let ticket = w.ticket;
        self.schedule(env, done, PoolEvent::WorkerStep { uid, ticket });
    }

    fn complete(&mut self, uid: WorkerId, env: &mut Env<'_>) {
        let service_time = self.config.service_time();
        let w = self.workers.get_mut(&uid).expect("known worker");
        if !matches!(w.exec, Exec::Running { .. }) {
            return;
        }
        let Exec::Running { inv, lock, lock_wait } = std::mem::replace(&mut w.exec, Exec::Idle) else {
            unreachable!()
        };
        let ctx = ExecContext {
            now: env.now,
            worker: uid,
            lock_wait,
            service_time,
        };
        let result = w.object.execute(env.store, &inv, &ctx);
        w.served_count += 1;
        env.out.executions.push((inv.request_id, uid));
        env.out.replies.push(Reply {
            request_id: inv.request_id,
            client: inv.client,
            result: result.map_err(InvokeError::App),
            worker: Some(uid),
            at: env.now,
        });
        if let Some(name) = lock {
            match env.store.locks_mut().release(&name, self.holder(uid), env.now) {
                Ok(Some(next)) => self.grant(&name, next, env),
                Ok(None) => {}
                Err(e) => log::error!("pool={} uid={uid} {e}", self.config.name),
            }
        }
        self.start_next(uid, env);
    }

    fn lock_expired(&mut self, uid: WorkerId, env: &mut Env<'_>) {
        let holder = self.holder(uid);
        let w = self.workers.get_mut(&uid).expect("known worker");
        // the grant may have landed first; then this deadline is moot
        if !matches!(w.exec, Exec::AwaitingLock { .. }) {
            return;
        }
        let Exec::AwaitingLock { inv, lock, since } = std::mem::replace(&mut w.exec, Exec::Idle) else {
            unreachable!()
        };
        env.store.locks_mut().cancel(&lock, holder);
        w.object.lock_timed_out(&inv, env.now.since(since));
        env.out.replies.push(Reply {
            request_id: inv.request_id,
            client: inv.client,
            result: Err(InvokeError::LockTimeout(lock)),
            worker: Some(uid),
            at: env.now,
        });
        self.start_next(uid, env);
    }

    /// A released lock was handed to `next`.
    fn grant(&mut self, name: &str, next: LockHolder, env: &mut Env<'_>) {
        if next.pool != self.id {
            env.out.foreign_grants.push((name.to_owned(), next));
            return;
        }
        let uid = next.worker;
        let waiting = self.workers.get_mut(&uid).and_then(|w| match &w.exec {
            Exec::AwaitingLock { lock, .. } if lock == name => Some(w),
            _ => None,
        });
        let Some(w) = waiting else {
            // not waiting any more: pass it on
            if let Ok(Some(n)) = env.store.locks_mut().release(name, next, env.now) {
                self.grant(name, n, env);
            }
            return;
        };
        let Exec::AwaitingLock { inv, lock, since } = std::mem::replace(&mut w.exec, Exec::Idle) else {
            unreachable!()
        };
        let waited = env.now.since(since);
        self.begin_running(uid, inv, Some(lock), Some(waited), env);
    }

    /// Lock hand-off routed in from another pool's release.
    pub fn receive_grant(&mut self, name: &str, holder: LockHolder, env: &mut Env<'_>) {
        self.grant(name, holder, env);
    }

    /// Per-worker gauges over the current window, serving workers only.
    pub fn metrics(&mut self, now: SimTime) -> PoolMetrics {
        let c = self.config.service_rate;
        let forced = self.forced_gauges;
        let mut gauges = Vec::new();
        for w in self.workers.values_mut().filter(|w| w.state == WorkerState::Serving) {
            let (cpu, mem) = forced.unwrap_or_else(|| {
                let span = w.window_span(now).as_secs_f64();
                let load = (w.window.accepted as f64) + w.window.pending_at_start as f64;
                let cpu = if span > 0.0 { (load / (c * span)).min(1.0) } else { 0.0 };
                let mem = (0.25 + 0.75 * w.pending() as f64 / c).min(1.0);
                (cpu, mem)
            });
            w.cpu_util = cpu;
            w.mem_util = mem;
            gauges.push(WorkerGauge { uid: w.uid, cpu, mem });
        }
        PoolMetrics {
            workers: gauges,
            live_size: self.live_size(),
        }
    }

    /// Starts a new gauge and advisor window.
    pub fn reset_window(&mut self, now: SimTime) {
        self.window_start = now;
        self.window_accepted = 0;
        for w in self.workers.values_mut() {
            let pending = w.pending();
            w.window = GaugeWindow {
                start: now,
                accepted: 0,
                pending_at_start: pending,
            };
        }
    }

    /// Polls the advisor of every serving worker.
    pub fn poll_advisors(&mut self, env: &mut Env<'_>) -> Vec<(WorkerId, AdvisorReply)> {
        let base = AdvisorContext {
            now: env.now,
            worker: WorkerId(0),
            live_size: self.live_size(),
            min_size: self.config.min_size,
            max_size: self.config.max_size,
            service_rate: self.config.service_rate,
            window: env.now.since(self.window_start),
            accepted_in_window: self.window_accepted,
            pool_pending: self.total_pending(),
        };
        let mut replies = Vec::new();
        for w in self.workers.values_mut().filter(|w| w.state == WorkerState::Serving) {
            let ctx = AdvisorContext { worker: w.uid, ..base };
            let reply = w.object.change_pool_size(&ctx, env.store);
            if let Err(message) = &reply {
                env.log.record(Event::AdvisorFault {
                    pool: self.config.name.clone(),
                    uid: w.uid,
                    message: message.clone(),
                    t: env.now,
                });
            }
            replies.push((w.uid, reply));
        }
        replies
    }

    /// One policy evaluation. Closes the current window.
    pub fn evaluate_policy(&mut self, env: &mut Env<'_>) -> PoolDelta {
        let delta = match self.config.policy.clone() {
            ScalingPolicy::ImplicitCpu(th) => evaluate_implicit(&self.metrics(env.now), &th),
            ScalingPolicy::CoarseThreshold(th) => {
                evaluate_coarse(&self.metrics(env.now), &th).unwrap_or(PoolDelta::NONE)
            }
            ScalingPolicy::FineGrained => {
                // gauges are still refreshed for observers, never consulted
                self.metrics(env.now);
                let replies: Vec<AdvisorReply> =
                    self.poll_advisors(env).into_iter().map(|(_, r)| r).collect();
                evaluate_fine_grained(&replies)
            }
            ScalingPolicy::ExternalDecider => PoolDelta::NONE,
        };
        self.reset_window(env.now);
        delta
    }

    /// Structural invariants that must hold between events.
    pub fn check_invariants(&self, cluster: &Cluster) -> Result<(), String> {
        let name = &self.config.name;
        let live = self.live();
        if self.sentinel != live.iter().copied().min() {
            return Err(format!(
                "pool={name} sentinel {:?} is not the lowest live uid {:?}",
                self.sentinel,
                live.first()
            ));
        }
        if live.len() > self.config.max_size {
            return Err(format!("pool={name} live size {} exceeds max_size", live.len()));
        }
        let mut slices = std::collections::BTreeSet::new();
        for w in self.workers.values() {
            if w.uid.0 >= self.next_uid {
                return Err(format!("pool={name} uid {} was never issued", w.uid));
            }
            let terminal = matches!(w.state, WorkerState::Stopped | WorkerState::Crashed);
            if terminal {
                if !w.queue.is_empty() || !w.is_idle() {
                    return Err(format!("pool={name} {} worker {} has pending work", w.state, w.uid));
                }
                continue;
            }
            if !slices.insert(w.slice) {
                return Err(format!("pool={name} slice {} hosts two workers", w.slice.0));
            }
            match cluster.slice(w.slice) {
                Some(s) if s.state == crate::cluster::SliceState::Granted => {}
                _ => return Err(format!("pool={name} worker {} runs on an ungranted slice", w.uid)),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
