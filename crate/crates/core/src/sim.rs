//! Scenario driver.
//!
//! One agenda orders everything that happens. Items due at the same instant
//! run in a fixed order: agility sample, burst evaluation, sentinel
//! broadcast, scripted action, pool event, arrival. The workload starts once
//! the initial workers have booted; after its last second the driver stops
//! sampling, scaling and broadcasting and runs until every queued
//! invocation has finished.

use std::fs;
use std::io;
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::balancer::{balance_round, ClientStub, PoolEndpoint, Strategy};
use crate::bench::{
    agility, generate_workload, mean_rate, measure_provisioning, req_min, summarize, AgilityReport,
    AgilitySample, ArrivalTimes, ProvisioningRecord,
};
use crate::cache::{CacheOp, ElasticCache};
use crate::clock::{SimTime, Timeline};
use crate::cluster::{Cluster, ClusterError, WatermarkMonitor};
use crate::events::EventLog;
use crate::ids::{PoolId, RequestId, WorkerId};
use crate::pool::{
    Env, InvokeError, Invocation, ObjectFactory, Outbox, Pool, PoolError, PoolEvent, Rejection, Reply,
};
use crate::scaling::{burst_evaluation, BurstSchedule};
use crate::scenario::{ActionKind, Scenario, StubStrategy, Target};
use crate::store::{Store, Value};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("invariant violated at t={t}: {message}")]
    Invariant { t: SimTime, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Item {
    Start,
    Sample(usize),
    Burst,
    Broadcast,
    Script(usize),
    Pool(PoolEvent),
    Arrival,
}

impl Item {
    fn rank(&self) -> u8 {
        match self {
            Item::Start => 0,
            Item::Sample(_) => 1,
            Item::Burst => 2,
            Item::Broadcast => 3,
            Item::Script(_) => 4,
            Item::Pool(_) => 5,
            Item::Arrival => 6,
        }
    }
}

/// Per-request bookkeeping used to audit delivery guarantees.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Audit {
    pub issued: u64,
    pub accepted: u64,
    pub unreachable: u64,
    pub succeeded: u64,
    pub crashed: u64,
    pub lock_timeouts: u64,
    pub app_errors: u64,
    pub executions: u64,
    pub violations: Vec<String>,
    accepted_by: Vec<Option<WorkerId>>,
    replies: Vec<u32>,
    executed: Vec<u32>,
    success: Vec<bool>,
}

impl Audit {
    fn issue(&mut self) -> RequestId {
        let id = RequestId(self.issued);
        self.issued += 1;
        self.accepted_by.push(None);
        self.replies.push(0);
        self.executed.push(0);
        self.success.push(false);
        id
    }

    fn accepted(&mut self, id: RequestId, by: WorkerId) {
        self.accepted += 1;
        self.accepted_by[id.0 as usize] = Some(by);
    }

    fn reply(&mut self, r: &Reply) {
        let i = r.request_id.0 as usize;
        self.replies[i] += 1;
        match &r.result {
            Ok(_) => {
                self.succeeded += 1;
                self.success[i] = true;
            }
            Err(InvokeError::WorkerCrashed(_)) => self.crashed += 1,
            Err(InvokeError::LockTimeout(_)) => self.lock_timeouts += 1,
            Err(InvokeError::PoolUnreachable) => self.unreachable += 1,
            Err(InvokeError::App(_)) => self.app_errors += 1,
        }
    }

    fn executed(&mut self, id: RequestId) {
        self.executions += 1;
        self.executed[id.0 as usize] += 1;
    }

    /// Every accepted request has exactly one outcome, and every success
    /// was executed by exactly one worker.
    fn verify(&mut self) {
        const MAX_REPORTED: usize = 20;
        for i in 0..self.issued as usize {
            let mut flag = |m: String| {
                if self.violations.len() < MAX_REPORTED {
                    self.violations.push(m);
                }
            };
            let id = RequestId(i as u64);
            if self.replies[i] != 1 {
                flag(format!("{id} has {} outcomes", self.replies[i]));
            }
            if self.executed[i] > 1 {
                flag(format!("{id} executed {} times", self.executed[i]));
            }
            if self.success[i] && self.executed[i] != 1 {
                flag(format!("{id} succeeded without an execution"));
            }
            if self.accepted_by[i].is_some() && self.replies[i] == 0 {
                flag(format!("{id} was accepted and lost"));
            }
        }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub scenario: Scenario,
    pub samples: Vec<AgilitySample>,
    /// `None` when the workload is too short for a single sample.
    pub report: Option<AgilityReport>,
    pub provisioning: Vec<ProvisioningRecord>,
    pub events: EventLog,
    pub audit: Audit,
    /// `(time, sentinel)` of every completed broadcast.
    pub broadcasts: Vec<(SimTime, WorkerId)>,
    /// When the workload started.
    pub workload_start: SimTime,
    pub finished_at: SimTime,
    pub store: Store,
}

struct Port<'p, 'e> {
    pool: &'p mut Pool,
    env: Env<'e>,
}

impl PoolEndpoint for Port<'_, '_> {
    fn bootstrap(&mut self) -> Option<Vec<WorkerId>> {
        self.pool.members_for_stub()
    }

    fn send(&mut self, uid: WorkerId, inv: Invocation) -> Result<(), Rejection> {
        self.pool.accept(uid, inv, &mut self.env)
    }
}

struct Sim {
    sc: Scenario,
    cluster: Cluster,
    store: Store,
    log: EventLog,
    pool: Pool,
    agenda: Timeline<Item>,
    stubs: Vec<ClientStub>,
    rng: ChaCha8Rng,
    rates: Vec<f64>,
    arrivals: ArrivalTimes,
    burst: BurstSchedule,
    monitor: WatermarkMonitor,
    samples: Vec<AgilitySample>,
    audit: Audit,
    broadcasts: Vec<(SimTime, WorkerId)>,
    t0: SimTime,
    end: SimTime,
    now: SimTime,
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s)
}

pub fn run(sc: &Scenario) -> Result<RunOutput, SimError> {
    sc.validate()
        .map_err(|(k, m)| SimError::Config(format!("{k}: {m}")))?;
    Sim::new(sc)?.run()
}

impl Sim {
    fn new(sc: &Scenario) -> Result<Sim, SimError> {
        let mut cluster = Cluster::new(sc.cluster_config())?;
        let mut store = Store::new();
        let mut log = EventLog::new();
        let mut out = Outbox::new();
        let timeout = Some(secs(sc.lock_timeout));
        let mode = sc.advisor.into();
        let factory: ObjectFactory = Box::new(move |_, _, _| Box::new(ElasticCache::new(timeout, mode)));
        let pool = Pool::instantiate(
            PoolId(0),
            sc.pool_config(),
            factory,
            &mut Env {
                now: SimTime::ZERO,
                cluster: &mut cluster,
                store: &mut store,
                log: &mut log,
                out: &mut out,
            },
        )?;
        let t0 = SimTime::ZERO + secs(sc.spawn_delay);
        let rates = generate_workload(&sc.pattern(), sc.seed);
        let end = t0 + Duration::from_secs(rates.len() as u64);
        let period = secs(sc.broadcast_period());
        let stubs = (0..sc.clients)
            .map(|c| {
                let strategy = match sc.stub_strategy {
                    StubStrategy::RoundRobin => Strategy::RoundRobin,
                    StubStrategy::Random => Strategy::Random {
                        seed: sc.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(c as u64 + 1)),
                    },
                };
                ClientStub::new(sc.pool_name.clone(), strategy).with_refresh_period(period)
            })
            .collect();
        let mut sim = Sim {
            sc: sc.clone(),
            monitor: WatermarkMonitor::new(cluster.config()),
            cluster,
            store,
            log,
            pool,
            agenda: Timeline::new(),
            stubs,
            rng: ChaCha8Rng::seed_from_u64(sc.seed),
            arrivals: ArrivalTimes::new(rates.clone()),
            rates,
            burst: BurstSchedule::new(secs(sc.burst_interval), t0),
            samples: Vec::new(),
            audit: Audit::default(),
            broadcasts: Vec::new(),
            t0,
            end,
            now: SimTime::ZERO,
        };
        sim.flush(out);
        sim.check()?;
        sim.schedule_initial();
        Ok(sim)
    }

    fn schedule_initial(&mut self) {
        let t0 = self.t0;
        self.agenda.schedule(t0, Item::Start.rank(), Item::Start);
        let sub = self.sc.sub_interval();
        let n = (self.rates.len() as f64 / sub + 1e-9).floor() as usize;
        for k in 0..n {
            let at = t0 + secs(sub * (k + 1) as f64);
            self.agenda.schedule(at, Item::Sample(k).rank(), Item::Sample(k));
        }
        if self.burst.next_boundary() <= self.end {
            self.agenda
                .schedule(self.burst.next_boundary(), Item::Burst.rank(), Item::Burst);
        }
        self.agenda.schedule(t0, Item::Broadcast.rank(), Item::Broadcast);
        for (i, a) in self.sc.actions().iter().enumerate() {
            let at = SimTime::from_secs_f64(a.at);
            self.agenda.schedule(at, Item::Script(i).rank(), Item::Script(i));
        }
        self.next_arrival();
    }

    fn next_arrival(&mut self) {
        if let Some(offset) = self.arrivals.next() {
            let at = self.t0 + secs(offset);
            self.agenda.schedule(at, Item::Arrival.rank(), Item::Arrival);
        }
    }

    fn run(mut self) -> Result<RunOutput, SimError> {
        while let Some((t, item)) = self.agenda.pop() {
            debug_assert!(t >= self.now);
            self.now = t;
            self.step(item)?;
        }
        self.check()?;
        self.audit.verify();
        if let Some(v) = self.audit.violations.first() {
            return Err(SimError::Invariant {
                t: self.now,
                message: format!("delivery audit: {v} ({} total)", self.audit.violations.len()),
            });
        }
        let report = agility(&self.samples).ok();
        Ok(RunOutput {
            provisioning: measure_provisioning(self.log.events()),
            scenario: self.sc,
            samples: self.samples,
            report,
            events: self.log,
            audit: self.audit,
            broadcasts: self.broadcasts,
            workload_start: self.t0,
            finished_at: self.now,
            store: self.store,
        })
    }

    fn check(&self) -> Result<(), SimError> {
        self.pool
            .check_invariants(&self.cluster)
            .map_err(|message| SimError::Invariant { t: self.now, message })
    }

    /// Runs `f` against the pool with a fresh outbox, then routes the
    /// outbox.
    fn with_pool<R>(&mut self, f: impl FnOnce(&mut Pool, &mut Env<'_>) -> R) -> R {
        let mut out = Outbox::new();
        let r = f(
            &mut self.pool,
            &mut Env {
                now: self.now,
                cluster: &mut self.cluster,
                store: &mut self.store,
                log: &mut self.log,
                out: &mut out,
            },
        );
        self.flush(out);
        r
    }

    fn flush(&mut self, out: Outbox) {
        for (at, _, ev) in out.scheduled {
            let item = Item::Pool(ev);
            self.agenda.schedule(at, item.rank(), item);
        }
        for r in &out.replies {
            self.audit.reply(r);
        }
        for (id, _) in out.executions {
            self.audit.executed(id);
        }
        for (name, holder) in out.foreign_grants {
            log::error!("lock {name} granted to foreign pool {:?}", holder.pool);
        }
    }

    fn step(&mut self, item: Item) -> Result<(), SimError> {
        match item {
            Item::Start => {
                let now = self.now;
                self.pool.reset_window(now);
            }
            Item::Sample(k) => self.sample(k),
            Item::Burst => {
                if self.burst.take_due(self.now) {
                    self.with_pool(|pool, env| burst_evaluation(pool, env));
                }
                let next = self.burst.next_boundary();
                if next <= self.end {
                    self.agenda.schedule(next, Item::Burst.rank(), Item::Burst);
                }
                self.check()?;
            }
            Item::Broadcast => {
                let delta = self.sc.rebalance_delta;
                if let Some((snap, _)) = self.with_pool(|pool, env| balance_round(pool, delta, env)) {
                    self.broadcasts.push((snap.taken_at, snap.sentinel));
                }
                let next = self.now + secs(self.sc.broadcast_period());
                if next < self.end {
                    self.agenda.schedule(next, Item::Broadcast.rank(), Item::Broadcast);
                }
                self.check()?;
            }
            Item::Script(i) => {
                self.script(i);
                self.check()?;
            }
            Item::Pool(ev) => {
                self.with_pool(|pool, env| pool.handle(ev, env));
                if matches!(ev, PoolEvent::WorkerReady { .. }) {
                    self.check()?;
                }
            }
            Item::Arrival => {
                self.arrival();
                self.next_arrival();
            }
        }
        Ok(())
    }

    fn sample(&mut self, k: usize) {
        let sub = self.sc.sub_interval();
        let start = (sub * k as f64).round() as usize;
        let end = (sub * (k + 1) as f64).round() as usize;
        let rate = mean_rate(&self.rates, start, end - start);
        let need = req_min(rate, self.sc.qos_capacity).max(self.sc.min_size as u64);
        let mut s = AgilitySample::new(k, need, self.pool.serving_count() as u64);
        s.t = self.now.since(self.t0).as_secs_f64();
        s.rate = rate;
        s.pool_size = self.pool.live_size() as u64;
        self.samples.push(s);
        if let Some(ev) = self.monitor.observe(self.cluster.utilization(), self.now) {
            self.log.record(ev);
        }
    }

    fn script(&mut self, i: usize) {
        let action = self.sc.actions()[i];
        let resolve = |pool: &Pool, t: Target| match t {
            Target::Uid(u) => Some(WorkerId(u)),
            Target::Sentinel => pool.sentinel(),
            Target::Victim => pool.pick_victim(),
        };
        let res = self.with_pool(|pool, env| match action.kind {
            ActionKind::Add => pool.add_worker(env).map(|_| ()),
            ActionKind::Crash(t) => match resolve(pool, t) {
                Some(uid) => pool.crash(uid, env),
                None => Err(PoolError::PoolDead),
            },
            ActionKind::Remove(t) => match resolve(pool, t) {
                Some(uid) => pool.remove_worker(uid, env),
                None => Err(PoolError::PoolDead),
            },
        });
        if let Err(e) = res {
            log::warn!("scripted action {:?} at t={} refused: {e}", action.kind, self.now);
        }
    }

    fn arrival(&mut self) {
        let id = self.audit.issue();
        let client = (id.0 % self.sc.clients as u64) as u32;
        let key = self.rng.gen_range(0..self.sc.key_space);
        let op = if self.rng.gen_bool(self.sc.put_fraction) {
            CacheOp::Put {
                key,
                value: Value::Int(id.0 as i64),
            }
        } else {
            CacheOp::Get { key }
        };
        let inv = Invocation {
            request_id: id,
            method: op.method().into(),
            args: op.encode_args(),
            client,
            enqueued_at: self.now,
        };
        let mut out = Outbox::new();
        let res = {
            let mut port = Port {
                pool: &mut self.pool,
                env: Env {
                    now: self.now,
                    cluster: &mut self.cluster,
                    store: &mut self.store,
                    log: &mut self.log,
                    out: &mut out,
                },
            };
            self.stubs[client as usize].invoke(&mut port, inv, self.now)
        };
        match res {
            Ok(uid) => self.audit.accepted(id, uid),
            Err((inv, err)) => out.replies.push(Reply {
                request_id: inv.request_id,
                client: inv.client,
                result: Err(err),
                worker: None,
                at: self.now,
            }),
        }
        self.flush(out);
    }
}

/// `t,rate,req_min,cap_prov,excess,shortage,pool_size`, one row per sample.
pub fn write_samples_csv<W: io::Write>(samples: &[AgilitySample], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "rate", "req_min", "cap_prov", "excess", "shortage", "pool_size"])?;
    for s in samples {
        out.write_record([
            format!("{:.3}", s.t),
            format!("{:.4}", s.rate),
            s.req_min.to_string(),
            s.cap_prov.to_string(),
            s.excess.to_string(),
            s.shortage.to_string(),
            s.pool_size.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_owned(), |x| format!("{x:.4}"))
}

pub fn summary_text(out: &RunOutput) -> String {
    let prov = summarize(&out.provisioning);
    let (agility, zero) = match &out.report {
        Some(r) => (Some(r.agility), Some(r.zero_fraction())),
        None => (None, None),
    };
    format!(
        "agility_mean={}\nzero_fraction={}\nprovisioning_max_s={}\nprovisioning_mean_s={}\nsamples={}\nprovisioning_records={}\nprovisioning_open={}\n",
        opt(agility),
        opt(zero),
        opt(prov.max),
        opt(prov.mean),
        out.samples.len(),
        prov.closed,
        prov.open,
    )
}

/// Writes `samples.csv`, `summary.txt` and `events.log` into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let f = fs::File::create(dir.join("samples.csv"))?;
    write_samples_csv(&out.samples, io::BufWriter::new(f)).map_err(io::Error::other)?;
    fs::write(dir.join("summary.txt"), summary_text(out))?;
    fs::write(dir.join("events.log"), out.events.render())?;
    Ok(())
}
