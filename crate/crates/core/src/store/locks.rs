//! Named locks with FIFO hand-off and virtual-time deadlines.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use thiserror::Error;

use crate::clock::SimTime;
use crate::ids::{PoolId, WorkerId};

/// Lock owner: a worker, qualified by its pool since uids are per pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LockHolder {
    pub pool: PoolId,
    pub worker: WorkerId,
}

impl LockHolder {
    pub fn new(pool: PoolId, worker: WorkerId) -> Self {
        Self { pool, worker }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acquire {
    Acquired,
    /// Parked behind the current holder; `deadline` is when the wait fails.
    Queued { deadline: Option<SimTime> },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LockError {
    #[error("lock {name} is already held by this holder")]
    AlreadyHeld { name: String },
    #[error("holder is already waiting on lock {name}")]
    AlreadyWaiting { name: String },
    #[error("lock {name} is not held by the releasing holder")]
    NotHolder { name: String },
}

#[derive(Debug, Clone, Copy)]
struct Waiter {
    holder: LockHolder,
    deadline: Option<SimTime>,
}

#[derive(Debug, Default, Clone)]
struct NamedLock {
    holder: Option<LockHolder>,
    waiters: VecDeque<Waiter>,
}

#[derive(Debug, Default, Clone)]
pub struct LockTable {
    locks: BTreeMap<String, NamedLock>,
}

impl LockTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// `timeout = None` waits forever.
    pub fn acquire(
        &mut self,
        name: &str,
        holder: LockHolder,
        now: SimTime,
        timeout: Option<Duration>,
    ) -> Result<Acquire, LockError> {
        let lock = self.locks.entry(name.to_owned()).or_default();
        match lock.holder {
            None => {
                lock.holder = Some(holder);
                Ok(Acquire::Acquired)
            }
            Some(h) if h == holder => Err(LockError::AlreadyHeld { name: name.into() }),
            Some(_) => {
                if lock.waiters.iter().any(|w| w.holder == holder) {
                    return Err(LockError::AlreadyWaiting { name: name.into() });
                }
                let deadline = timeout.map(|t| now + t);
                lock.waiters.push_back(Waiter { holder, deadline });
                Ok(Acquire::Queued { deadline })
            }
        }
    }

    /// Releases `name` and hands it to the oldest waiter whose deadline has
    /// not passed. Returns the new holder, if any.
    pub fn release(
        &mut self,
        name: &str,
        holder: LockHolder,
        now: SimTime,
    ) -> Result<Option<LockHolder>, LockError> {
        let lock = match self.locks.get_mut(name) {
            Some(l) if l.holder == Some(holder) => l,
            _ => return Err(LockError::NotHolder { name: name.into() }),
        };
        lock.holder = None;
        while let Some(w) = lock.waiters.pop_front() {
            if w.deadline.is_none_or(|d| now <= d) {
                lock.holder = Some(w.holder);
                return Ok(Some(w.holder));
            }
        }
        if lock.waiters.is_empty() {
            self.locks.remove(name);
        }
        Ok(None)
    }

    /// Removes a parked waiter. Returns false if it was not waiting.
    pub fn cancel(&mut self, name: &str, holder: LockHolder) -> bool {
        let Some(lock) = self.locks.get_mut(name) else {
            return false;
        };
        let before = lock.waiters.len();
        lock.waiters.retain(|w| w.holder != holder);
        before != lock.waiters.len()
    }

    /// Drops every waiter whose deadline is strictly before `now`.
    pub fn expire(&mut self, now: SimTime) -> Vec<(String, LockHolder)> {
        let mut expired = Vec::new();
        for (name, lock) in self.locks.iter_mut() {
            lock.waiters.retain(|w| {
                let keep = w.deadline.is_none_or(|d| now <= d);
                if !keep {
                    expired.push((name.clone(), w.holder));
                }
                keep
            });
        }
        expired
    }

    /// Releases everything `holder` owns and withdraws its waits (crash
    /// cleanup). Returns `(lock, new holder)` hand-offs.
    pub fn release_all(&mut self, holder: LockHolder, now: SimTime) -> Vec<(String, LockHolder)> {
        let owned: Vec<String> = self
            .locks
            .iter()
            .filter(|(_, l)| l.holder == Some(holder))
            .map(|(n, _)| n.clone())
            .collect();
        for lock in self.locks.values_mut() {
            lock.waiters.retain(|w| w.holder != holder);
        }
        let mut grants = Vec::new();
        for name in owned {
            if let Ok(Some(next)) = self.release(&name, holder, now) {
                grants.push((name, next));
            }
        }
        grants
    }

    pub fn holder(&self, name: &str) -> Option<LockHolder> {
        self.locks.get(name).and_then(|l| l.holder)
    }

    pub fn waiting(&self, name: &str) -> usize {
        self.locks.get(name).map_or(0, |l| l.waiters.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(uid: u64) -> LockHolder {
        LockHolder::new(PoolId(0), WorkerId(uid))
    }

    fn t(s: u64) -> SimTime {
        SimTime::from_secs(s)
    }

    #[test]
    fn free_lock_is_acquired_immediately() {
        let mut locks = LockTable::new();
        assert_eq!(locks.acquire("C1", w(1), t(0), None), Ok(Acquire::Acquired));
        assert_eq!(locks.holder("C1"), Some(w(1)));
    }

    #[test]
    fn waiter_acquires_on_release() {
        // clock trace: w1 holds from t=0, w2 asks at t=0 with timeout 10,
        // w1 releases at t=3 -> w2 holds at t=3 (3 <= deadline 10)
        let mut locks = LockTable::new();
        locks.acquire("C1", w(1), t(0), None).unwrap();
        let q = locks.acquire("C1", w(2), t(0), Some(Duration::from_secs(10))).unwrap();
        assert_eq!(q, Acquire::Queued { deadline: Some(t(10)) });
        assert_eq!(locks.release("C1", w(1), t(3)), Ok(Some(w(2))));
        assert_eq!(locks.holder("C1"), Some(w(2)));
    }

    #[test]
    fn short_timeout_expires() {
        let mut locks = LockTable::new();
        locks.acquire("C1", w(1), t(0), None).unwrap();
        locks.acquire("C1", w(2), t(0), Some(Duration::from_secs(1))).unwrap();
        assert!(locks.expire(t(1)).is_empty());
        assert_eq!(locks.expire(t(2)), vec![("C1".to_string(), w(2))]);
        // holder releases at t=5: nobody left to hand off to
        assert_eq!(locks.release("C1", w(1), t(5)), Ok(None));
        assert_eq!(locks.holder("C1"), None);
    }

    #[test]
    fn release_skips_expired_waiters() {
        let mut locks = LockTable::new();
        locks.acquire("C1", w(1), t(0), None).unwrap();
        locks.acquire("C1", w(2), t(0), Some(Duration::from_secs(1))).unwrap();
        locks.acquire("C1", w(3), t(0), None).unwrap();
        assert_eq!(locks.release("C1", w(1), t(5)), Ok(Some(w(3))));
    }

    #[test]
    fn fifo_hand_off() {
        let mut locks = LockTable::new();
        locks.acquire("C1", w(1), t(0), None).unwrap();
        for uid in 2..6 {
            locks.acquire("C1", w(uid), t(0), None).unwrap();
        }
        let mut order = Vec::new();
        let mut cur = w(1);
        while let Ok(Some(next)) = locks.release("C1", cur, t(1)) {
            order.push(next.worker.0);
            cur = next;
        }
        assert_eq!(order, vec![2, 3, 4, 5]);
    }

    #[test]
    fn only_holder_may_release() {
        let mut locks = LockTable::new();
        locks.acquire("C1", w(1), t(0), None).unwrap();
        assert!(matches!(locks.release("C1", w(2), t(0)), Err(LockError::NotHolder { .. })));
        assert!(matches!(locks.release("nope", w(1), t(0)), Err(LockError::NotHolder { .. })));
        assert!(matches!(locks.acquire("C1", w(1), t(0), None), Err(LockError::AlreadyHeld { .. })));
    }

    #[test]
    fn crash_cleanup_hands_off_and_withdraws() {
        let mut locks = LockTable::new();
        locks.acquire("a", w(1), t(0), None).unwrap();
        locks.acquire("b", w(2), t(0), None).unwrap();
        locks.acquire("b", w(1), t(0), None).unwrap();
        locks.acquire("a", w(3), t(0), None).unwrap();
        let grants = locks.release_all(w(1), t(1));
        assert_eq!(grants, vec![("a".to_string(), w(3))]);
        assert_eq!(locks.waiting("b"), 0);
    }
}
