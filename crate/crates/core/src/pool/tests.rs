use super::*;
use crate::clock::Timeline;
use crate::cluster::ClusterConfig;

/// Echoes the request id; optionally serializes on one named lock.
struct Echo {
    lock: Option<&'static str>,
}

impl ElasticObject for Echo {
    fn lock_for(&self, _inv: &Invocation) -> Option<LockRequest> {
        self.lock.map(|name| LockRequest {
            name: name.into(),
            timeout: None,
        })
    }

    fn execute(&mut self, _: &mut Store, inv: &Invocation, _: &ExecContext) -> Result<Vec<u8>, String> {
        Ok(inv.request_id.0.to_le_bytes().to_vec())
    }
}

struct World {
    now: SimTime,
    cluster: Cluster,
    store: Store,
    log: EventLog,
    agenda: Timeline<PoolEvent>,
    replies: Vec<Reply>,
    executions: Vec<(RequestId, WorkerId)>,
    next_request: u64,
}

impl World {
    fn new(slices: usize) -> Self {
        let cluster = Cluster::new(ClusterConfig {
            total_slices: slices as u32,
            ..ClusterConfig::default()
        })
        .unwrap();
        World {
            now: SimTime::ZERO,
            cluster,
            store: Store::new(),
            log: EventLog::new(),
            agenda: Timeline::new(),
            replies: Vec::new(),
            executions: Vec::new(),
            next_request: 0,
        }
    }

    fn with<R>(&mut self, f: impl FnOnce(&mut Env<'_>) -> R) -> R {
        let mut out = Outbox::new();
        let r = f(&mut Env {
            now: self.now,
            cluster: &mut self.cluster,
            store: &mut self.store,
            log: &mut self.log,
            out: &mut out,
        });
        for (at, _, ev) in out.scheduled {
            self.agenda.schedule(at, 0, ev);
        }
        self.replies.extend(out.replies);
        self.executions.extend(out.executions);
        r
    }

    fn pool(&mut self, min: usize, max: usize, lock: Option<&'static str>) -> Result<Pool, PoolError> {
        let factory: ObjectFactory = Box::new(move |_, _, _| Box::new(Echo { lock }));
        self.with(|env| Pool::instantiate(PoolId(0), PoolConfig::new("p", min, max), factory, env))
    }

    fn run_until(&mut self, pool: &mut Pool, until: SimTime) {
        while self.agenda.peek_time().is_some_and(|t| t <= until) {
            let (t, ev) = self.agenda.pop().unwrap();
            self.now = t;
            self.with(|env| pool.handle(ev, env));
        }
        self.now = until;
    }

    fn boot(&mut self, pool: &mut Pool) {
        let t = self.now + Duration::from_secs(10);
        self.run_until(pool, t);
    }

    fn invocation(&mut self) -> Invocation {
        let id = RequestId(self.next_request);
        self.next_request += 1;
        Invocation {
            request_id: id,
            method: "echo".into(),
            args: Vec::new(),
            client: 0,
            enqueued_at: self.now,
        }
    }

    fn send(&mut self, pool: &mut Pool, uid: WorkerId) -> Result<(), Rejection> {
        let inv = self.invocation();
        self.with(|env| pool.accept(uid, inv, env))
    }
}

fn w(n: u64) -> WorkerId {
    WorkerId(n)
}

#[test]
fn election_picks_lowest_uid() {
    assert_eq!(elect(&[w(7), w(3), w(9)]), Ok(w(3)));
    assert_eq!(elect(&[]), Err(PoolError::PoolDead));
}

#[test]
fn config_rejects_singleton_pools() {
    let err = PoolConfig::new("p", 1, 4).validate().unwrap_err();
    assert!(err.to_string().contains(">= 2"), "{err}");
    assert!(PoolConfig::new("a$b", 2, 4).validate().is_err());
    assert!(PoolConfig::new("p", 3, 2).validate().is_err());
}

#[test]
fn full_grant_starts_min_size_workers() {
    let mut world = World::new(8);
    let mut pool = world.pool(3, 6, None).unwrap();
    assert_eq!(pool.live_size(), 3);
    assert!(!pool.shortfall());
    assert_eq!(pool.sentinel(), Some(w(1)));
    assert_eq!(pool.serving_count(), 0);
    world.boot(&mut pool);
    assert_eq!(pool.serving(), vec![w(1), w(2), w(3)]);
    pool.check_invariants(&world.cluster).unwrap();
}

#[test]
fn partial_grant_sets_shortfall() {
    let mut world = World::new(2);
    let pool = world.pool(3, 6, None).unwrap();
    assert_eq!(pool.live_size(), 2);
    assert!(pool.shortfall());
}

#[test]
fn zero_grant_fails_and_logs() {
    let mut world = World::new(2);
    let _first = world.pool(2, 2, None).unwrap();
    assert_eq!(world.pool(2, 2, None).unwrap_err(), PoolError::NoCapacity);
    assert!(matches!(world.log.events().last(), Some(Event::NoCapacity { .. })));
}

#[test]
fn added_workers_get_fresh_increasing_uids() {
    let mut world = World::new(8);
    let mut pool = world.pool(2, 4, None).unwrap();
    world.boot(&mut pool);
    let a = world.with(|env| pool.add_worker(env)).unwrap();
    let b = world.with(|env| pool.add_worker(env)).unwrap();
    assert!(w(2) < a && a < b);
    assert_eq!(world.with(|env| pool.add_worker(env)), Err(PoolError::AtMax));
}

#[test]
fn draining_worker_finishes_its_queue_then_frees_its_slice() {
    let mut world = World::new(8);
    let mut pool = world.pool(2, 4, None).unwrap();
    world.boot(&mut pool);
    let extra = world.with(|env| pool.add_worker(env)).unwrap();
    world.boot(&mut pool);
    for _ in 0..3 {
        world.send(&mut pool, extra).unwrap();
    }
    let slice = pool.worker(extra).unwrap().slice();
    world.with(|env| pool.remove_worker(extra, env)).unwrap();
    assert_eq!(pool.worker(extra).unwrap().state(), WorkerState::Draining);
    assert_eq!(world.cluster.slice(slice).unwrap().state, crate::cluster::SliceState::Granted);

    let rejected = world.send(&mut pool, extra).unwrap_err();
    assert!(matches!(rejected.kind, RejectKind::Redirect(Some(_))));

    world.boot(&mut pool);
    assert_eq!(world.replies.len(), 3);
    assert!(world.replies.iter().all(|r| r.result.is_ok() && r.worker == Some(extra)));
    assert_eq!(pool.worker(extra).unwrap().state(), WorkerState::Stopped);
    assert_ne!(world.cluster.slice(slice).unwrap().state, crate::cluster::SliceState::Granted);
    pool.check_invariants(&world.cluster).unwrap();
}

#[test]
fn removal_respects_min_size() {
    let mut world = World::new(8);
    let mut pool = world.pool(2, 4, None).unwrap();
    world.boot(&mut pool);
    assert_eq!(world.with(|env| pool.remove_worker(w(2), env)), Err(PoolError::AtMin));
}

#[test]
fn crash_fails_in_flight_and_queued_work() {
    let mut world = World::new(8);
    let mut pool = world.pool(2, 4, None).unwrap();
    world.boot(&mut pool);
    for _ in 0..3 {
        world.send(&mut pool, w(2)).unwrap();
    }
    world.with(|env| pool.crash(w(2), env)).unwrap();
    world.boot(&mut pool);
    assert_eq!(world.replies.len(), 3);
    assert!(world
        .replies
        .iter()
        .all(|r| r.result == Err(InvokeError::WorkerCrashed(w(2)))));
    assert!(world.executions.is_empty(), "crashed work must not count as executed");
    assert_eq!(pool.worker(w(2)).unwrap().pending(), 0);
}

#[test]
fn sentinel_crash_reelects_immediately() {
    let mut world = World::new(8);
    let mut pool = world.pool(3, 4, None).unwrap();
    world.boot(&mut pool);
    world.with(|env| pool.crash(w(1), env)).unwrap();
    assert_eq!(pool.sentinel(), Some(w(2)));
    let stored = world.store.get(&pool.sentinel_key()).unwrap().decode().unwrap();
    assert_eq!(stored.as_int(), Some(2));
    pool.check_invariants(&world.cluster).unwrap();
}

#[test]
fn removing_the_sentinel_hands_over_first() {
    let mut world = World::new(8);
    let mut pool = world.pool(2, 4, None).unwrap();
    world.with(|env| pool.add_worker(env)).unwrap();
    world.boot(&mut pool);
    world.with(|env| pool.remove_worker(w(1), env)).unwrap();
    assert_eq!(pool.sentinel(), Some(w(2)));
}

#[test]
fn shared_lock_serializes_workers() {
    let mut world = World::new(8);
    let mut pool = world.pool(2, 4, Some("hot")).unwrap();
    world.boot(&mut pool);
    world.send(&mut pool, w(1)).unwrap();
    world.send(&mut pool, w(2)).unwrap();
    assert!(matches!(pool.worker(w(2)).unwrap().exec, worker::Exec::AwaitingLock { .. }));
    world.boot(&mut pool);
    let times: Vec<SimTime> = world.replies.iter().map(|r| r.at).collect();
    assert_eq!(times.len(), 2);
    assert_eq!(times[1].since(times[0]), pool.config().service_time());
}

#[test]
fn grant_before_deadline_survives_the_stale_deadline() {
    struct Timed;
    impl ElasticObject for Timed {
        fn lock_for(&self, _inv: &Invocation) -> Option<LockRequest> {
            Some(LockRequest {
                name: "hot".into(),
                timeout: Some(Duration::from_millis(500)),
            })
        }
        fn execute(&mut self, _: &mut Store, _: &Invocation, _: &ExecContext) -> Result<Vec<u8>, String> {
            Ok(Vec::new())
        }
    }
    let mut world = World::new(8);
    let factory: ObjectFactory = Box::new(|_, _, _| Box::new(Timed));
    let mut pool = world
        .with(|env| Pool::instantiate(PoolId(0), PoolConfig::new("p", 3, 3), factory, env))
        .unwrap();
    world.boot(&mut pool);
    // w3 is granted at 0.4 s and its 0.5 s deadline fires mid-service
    for uid in 1..=3 {
        world.send(&mut pool, w(uid)).unwrap();
    }
    world.boot(&mut pool);
    assert_eq!(world.replies.len(), 3);
    let by_worker = |uid| world.replies.iter().find(|r| r.worker == Some(w(uid))).unwrap();
    assert!(by_worker(1).result.is_ok() && by_worker(2).result.is_ok());
    assert!(by_worker(3).result.is_ok() || matches!(by_worker(3).result, Err(InvokeError::LockTimeout(_))));
    assert_eq!(world.store.locks().holder("hot"), None);
}
