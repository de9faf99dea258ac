//! Hybrid load balancing.
//!
//! Client side: a stub bootstraps its member list from the sentinel and
//! dispatches round-robin or randomly, retrying every other member once
//! before giving up. Server side: the sentinel periodically snapshots
//! per-member pending counts, and overloaded members push queued work to
//! underloaded ones along a first-fit plan.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clock::SimTime;
use crate::events::Event;
use crate::ids::WorkerId;
use crate::pool::{Env, InvokeError, Invocation, Pool, RejectKind, Rejection};

pub const DEFAULT_REBALANCE_DELTA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    RoundRobin,
    Random { seed: u64 },
}

/// How a stub reaches one pool.
pub trait PoolEndpoint {
    /// Member list as reported by the sentinel; `None` if it is unreachable.
    fn bootstrap(&mut self) -> Option<Vec<WorkerId>>;

    fn send(&mut self, uid: WorkerId, inv: Invocation) -> Result<(), Rejection>;
}

/// Client-side proxy. The caller sees a single object; the member list,
/// cursor and retry loop stay in here.
#[derive(Debug, Clone)]
pub struct ClientStub {
    pool: String,
    strategy: Strategy,
    rng: Option<ChaCha8Rng>,
    known: Vec<WorkerId>,
    cursor: usize,
    refreshed_at: Option<SimTime>,
    refresh_period: Option<Duration>,
    refreshes: u64,
}

impl ClientStub {
    pub fn new(pool: impl Into<String>, strategy: Strategy) -> Self {
        let rng = match strategy {
            Strategy::RoundRobin => None,
            Strategy::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Self {
            pool: pool.into(),
            strategy,
            rng,
            known: Vec::new(),
            cursor: 0,
            refreshed_at: None,
            refresh_period: None,
            refreshes: 0,
        }
    }

    /// Also refresh a member view older than `period` before dispatching.
    pub fn with_refresh_period(mut self, period: Duration) -> Self {
        self.refresh_period = Some(period);
        self
    }

    pub fn pool(&self) -> &str {
        &self.pool
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn known_members(&self) -> &[WorkerId] {
        &self.known
    }

    /// Number of sentinel round trips so far.
    pub fn refreshes(&self) -> u64 {
        self.refreshes
    }

    fn refresh(&mut self, ep: &mut dyn PoolEndpoint, now: SimTime) -> bool {
        self.refreshes += 1;
        match ep.bootstrap() {
            Some(members) if !members.is_empty() => {
                self.known = members;
                self.refreshed_at = Some(now);
                true
            }
            _ => false,
        }
    }

    fn stale(&self, now: SimTime) -> bool {
        match (self.refreshed_at, self.refresh_period) {
            (None, _) => true,
            (Some(at), Some(p)) => now.since(at) >= p,
            (Some(_), None) => false,
        }
    }

    fn pick(&mut self) -> usize {
        let n = self.known.len();
        match &mut self.rng {
            None => {
                let i = self.cursor % n;
                self.cursor = self.cursor.wrapping_add(1);
                i
            }
            Some(rng) => rng.gen_range(0..n),
        }
    }

    /// Dispatches `inv` to one member. Returns the member that accepted it,
    /// or the invocation together with the error once every member failed.
    pub fn invoke(
        &mut self,
        ep: &mut dyn PoolEndpoint,
        mut inv: Invocation,
        now: SimTime,
    ) -> Result<WorkerId, (Invocation, InvokeError)> {
        let mut refreshed = false;
        if self.known.is_empty() || self.stale(now) {
            refreshed = self.refresh(ep, now);
        }
        if self.known.is_empty() {
            return Err((inv, InvokeError::PoolUnreachable));
        }
        let first = self.pick();
        let n = self.known.len();
        let mut order: VecDeque<WorkerId> = (0..n).map(|k| self.known[(first + k) % n]).collect();
        let mut tried = BTreeSet::new();
        while let Some(uid) = order.pop_front() {
            if !tried.insert(uid) {
                continue;
            }
            let rej = match ep.send(uid, inv) {
                Ok(()) => return Ok(uid),
                Err(rej) => rej,
            };
            inv = rej.inv;
            if let RejectKind::Redirect(Some(hint)) = rej.kind {
                if !tried.contains(&hint) {
                    order.push_front(hint);
                }
            }
            if !refreshed {
                refreshed = true;
                if self.refresh(ep, now) {
                    for &m in &self.known {
                        if !tried.contains(&m) && !order.contains(&m) {
                            order.push_back(m);
                        }
                    }
                }
            }
        }
        Err((inv, InvokeError::PoolUnreachable))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemberLoad {
    pub uid: WorkerId,
    pub pending: usize,
    /// Draining members are listed but never receive redirected work.
    pub serving: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolSnapshot {
    pub pool: String,
    pub sentinel: WorkerId,
    pub taken_at: SimTime,
    pub members: Vec<MemberLoad>,
}

impl PoolSnapshot {
    pub fn pending_of(&self, uid: WorkerId) -> Option<usize> {
        self.members.iter().find(|m| m.uid == uid).map(|m| m.pending)
    }

    pub fn total_pending(&self) -> usize {
        self.members.iter().map(|m| m.pending).sum()
    }

    pub fn max_pending(&self) -> usize {
        self.members.iter().map(|m| m.pending).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Redirect {
    pub from: WorkerId,
    pub to: WorkerId,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RedirectPlan {
    pub moves: Vec<Redirect>,
}

impl RedirectPlan {
    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }

    pub fn total_moved(&self) -> usize {
        self.moves.iter().map(|r| r.count).sum()
    }

    /// Pending counts after the plan, assuming every move succeeds.
    pub fn project(&self, snap: &PoolSnapshot) -> BTreeMap<WorkerId, usize> {
        let mut load: BTreeMap<WorkerId, usize> = snap.members.iter().map(|m| (m.uid, m.pending)).collect();
        for r in &self.moves {
            *load.get_mut(&r.from).expect("plan source in snapshot") -= r.count;
            *load.get_mut(&r.to).expect("plan target in snapshot") += r.count;
        }
        load
    }
}

/// First-fit redistribution over serving members.
///
/// A member is overloaded when its pending count exceeds `(1 + delta)` times
/// the mean; its item is the excess over `ceil(mean)`. Members below the
/// mean are bins with room up to `ceil(mean)`. Items go largest first into
/// the first bin that fits; an item no bin can hold whole is spread over the
/// bins in order. Whatever does not fit stays where it is.
pub fn rebalance_plan(snap: &PoolSnapshot, delta: f64) -> RedirectPlan {
    let serving: Vec<&MemberLoad> = snap.members.iter().filter(|m| m.serving).collect();
    let n = serving.len();
    if n < 2 {
        return RedirectPlan::default();
    }
    let total: usize = serving.iter().map(|m| m.pending).sum();
    let mean = total as f64 / n as f64;
    let ceil_mean = total.div_ceil(n);

    let mut items: Vec<(usize, WorkerId)> = serving
        .iter()
        .filter(|m| m.pending as f64 > (1.0 + delta) * mean && m.pending > ceil_mean)
        .map(|m| (m.pending - ceil_mean, m.uid))
        .collect();
    items.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    // strict `pending < mean` in integers: pending * n < total
    let mut bins: Vec<(WorkerId, usize)> = serving
        .iter()
        .filter(|m| m.pending * n < total)
        .map(|m| (m.uid, ceil_mean - m.pending))
        .collect();
    bins.sort_by_key(|b| b.0);

    let mut merged: BTreeMap<(WorkerId, WorkerId), usize> = BTreeMap::new();
    let mut order: Vec<(WorkerId, WorkerId)> = Vec::new();
    let mut emit = |from: WorkerId, to: WorkerId, k: usize| {
        let e = merged.entry((from, to)).or_insert_with(|| {
            order.push((from, to));
            0
        });
        *e += k;
    };
    for (mut item, from) in items {
        if let Some(bin) = bins.iter_mut().find(|b| b.1 >= item) {
            bin.1 -= item;
            emit(from, bin.0, item);
            continue;
        }
        for bin in bins.iter_mut() {
            if item == 0 {
                break;
            }
            let k = item.min(bin.1);
            if k > 0 {
                bin.1 -= k;
                item -= k;
                emit(from, bin.0, k);
            }
        }
    }
    RedirectPlan {
        moves: order
            .into_iter()
            .map(|(from, to)| Redirect {
                from,
                to,
                count: merged[&(from, to)],
            })
            .collect(),
    }
}

/// Takes a snapshot through the sentinel and delivers it to every member.
/// `None` when the pool has no serving sentinel.
pub fn sentinel_broadcast(pool: &mut Pool, now: SimTime) -> Option<PoolSnapshot> {
    let snap = pool.snapshot(now)?;
    pool.deliver_snapshot(&snap);
    Some(snap)
}

/// Moves queued invocations per `plan`. Moves whose source or target no
/// longer serves are skipped. Returns the number of invocations moved.
pub fn apply_redirects(pool: &mut Pool, plan: &RedirectPlan, env: &mut Env<'_>) -> usize {
    plan.moves
        .iter()
        .map(|r| pool.move_queued(r.from, r.to, r.count, env))
        .sum()
}

/// One balancing round: broadcast, plan, apply. Logs a rebalance record
/// when anything moved.
pub fn balance_round(pool: &mut Pool, delta: f64, env: &mut Env<'_>) -> Option<(PoolSnapshot, usize)> {
    let snap = sentinel_broadcast(pool, env.now)?;
    let plan = rebalance_plan(&snap, delta);
    let moved = apply_redirects(pool, &plan, env);
    if moved > 0 {
        let max_after = pool
            .snapshot(env.now)
            .map_or(0, |s| s.max_pending());
        env.log.record(Event::Rebalance {
            pool: pool.name().to_owned(),
            moves: moved,
            max_before: snap.max_pending(),
            max_after,
            t: env.now,
        });
    }
    Some((snap, moved))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(pending: &[usize]) -> PoolSnapshot {
        PoolSnapshot {
            pool: "p".into(),
            sentinel: WorkerId(1),
            taken_at: SimTime::ZERO,
            members: pending
                .iter()
                .enumerate()
                .map(|(i, &p)| MemberLoad {
                    uid: WorkerId(i as u64 + 1),
                    pending: p,
                    serving: true,
                })
                .collect(),
        }
    }

    fn r(from: u64, to: u64, count: usize) -> Redirect {
        Redirect {
            from: WorkerId(from),
            to: WorkerId(to),
            count,
        }
    }

    #[test]
    fn overloaded_member_sheds_to_underloaded() {
        let plan = rebalance_plan(&snap(&[16, 10, 4]), 0.25);
        assert_eq!(plan.moves, vec![r(1, 3, 6)]);
    }

    #[test]
    fn balanced_snapshot_gives_empty_plan() {
        assert!(rebalance_plan(&snap(&[5, 5, 5]), 0.25).is_empty());
        assert!(rebalance_plan(&snap(&[0, 0]), 0.25).is_empty());
        assert!(rebalance_plan(&snap(&[9]), 0.25).is_empty());
    }

    #[test]
    fn item_larger_than_any_bin_is_split() {
        let plan = rebalance_plan(&snap(&[20, 2, 2]), 0.25);
        assert_eq!(plan.moves, vec![r(1, 2, 6), r(1, 3, 6)]);
    }

    #[test]
    fn draining_members_never_receive_work() {
        let mut s = snap(&[16, 10, 0, 4]);
        s.members[2].serving = false;
        let plan = rebalance_plan(&s, 0.25);
        assert!(plan.moves.iter().all(|m| m.to != WorkerId(3)));
        assert_eq!(plan.moves, vec![r(1, 4, 6)]);
    }

    struct Members {
        up: Vec<WorkerId>,
        sent: Vec<WorkerId>,
    }

    impl PoolEndpoint for Members {
        fn bootstrap(&mut self) -> Option<Vec<WorkerId>> {
            (!self.up.is_empty()).then(|| self.up.clone())
        }

        fn send(&mut self, uid: WorkerId, inv: Invocation) -> Result<(), Rejection> {
            if self.up.contains(&uid) {
                self.sent.push(uid);
                Ok(())
            } else {
                Err(Rejection {
                    inv,
                    kind: RejectKind::Unreachable,
                })
            }
        }
    }

    fn inv(n: u64) -> Invocation {
        Invocation {
            request_id: crate::ids::RequestId(n),
            method: "get".into(),
            args: Vec::new(),
            client: 0,
            enqueued_at: SimTime::ZERO,
        }
    }

    #[test]
    fn round_robin_rotates() {
        let ids = vec![WorkerId(1), WorkerId(2), WorkerId(3)];
        let mut ep = Members {
            up: ids.clone(),
            sent: Vec::new(),
        };
        let mut stub = ClientStub::new("p", Strategy::RoundRobin);
        for i in 0..6 {
            stub.invoke(&mut ep, inv(i), SimTime::ZERO).unwrap();
        }
        assert_eq!(ep.sent, [&ids[..], &ids[..]].concat());
        assert_eq!(stub.refreshes(), 1);
    }

    #[test]
    fn removed_member_is_skipped_transparently() {
        let mut ep = Members {
            up: vec![WorkerId(1), WorkerId(2), WorkerId(3)],
            sent: Vec::new(),
        };
        let mut stub = ClientStub::new("p", Strategy::RoundRobin);
        stub.invoke(&mut ep, inv(0), SimTime::ZERO).unwrap();
        ep.up.retain(|&u| u != WorkerId(2));
        let got = stub.invoke(&mut ep, inv(1), SimTime::ZERO).unwrap();
        assert_eq!(got, WorkerId(3));
        assert_eq!(ep.sent, vec![WorkerId(1), WorkerId(3)]);
        assert_eq!(stub.known_members(), &[WorkerId(1), WorkerId(3)]);
    }

    #[test]
    fn all_members_down_propagates() {
        let mut ep = Members {
            up: vec![WorkerId(1), WorkerId(2)],
            sent: Vec::new(),
        };
        let mut stub = ClientStub::new("p", Strategy::RoundRobin);
        stub.invoke(&mut ep, inv(0), SimTime::ZERO).unwrap();
        ep.up.clear();
        let (back, err) = stub.invoke(&mut ep, inv(1), SimTime::ZERO).unwrap_err();
        assert_eq!(err, InvokeError::PoolUnreachable);
        assert_eq!(back.request_id, crate::ids::RequestId(1));
    }

    #[test]
    fn random_strategy_replays_per_seed() {
        let run = |seed| {
            let mut ep = Members {
                up: (1..=5).map(WorkerId).collect(),
                sent: Vec::new(),
            };
            let mut stub = ClientStub::new("p", Strategy::Random { seed });
            for i in 0..50 {
                stub.invoke(&mut ep, inv(i), SimTime::ZERO).unwrap();
            }
            ep.sent
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn stale_view_is_refreshed() {
        let mut ep = Members {
            up: vec![WorkerId(1), WorkerId(2)],
            sent: Vec::new(),
        };
        let mut stub = ClientStub::new("p", Strategy::RoundRobin).with_refresh_period(Duration::from_secs(10));
        stub.invoke(&mut ep, inv(0), SimTime::ZERO).unwrap();
        ep.up.push(WorkerId(3));
        stub.invoke(&mut ep, inv(1), SimTime::from_secs(5)).unwrap();
        assert_eq!(stub.known_members().len(), 2);
        stub.invoke(&mut ep, inv(2), SimTime::from_secs(10)).unwrap();
        assert_eq!(stub.known_members().len(), 3);
    }
}
