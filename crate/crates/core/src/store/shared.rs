//! Thread-safe facade over one [`Store`].
//!
//! Callers on any thread go through a single mutex. Lock waits park on a
//! condvar and are woken by releases or by the virtual clock advancing, so a
//! waiter times out against virtual time, not wall time.

use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use crate::clock::VirtualClock;

use super::{Acquire, LockError, LockHolder, Store, StoreKey, StoredValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockOutcome {
    Acquired,
    TimedOut,
}

#[derive(Debug, Clone)]
pub struct SharedStore {
    inner: Arc<(Mutex<Store>, Condvar)>,
    clock: Arc<VirtualClock>,
}

impl SharedStore {
    pub fn new(clock: Arc<VirtualClock>) -> Self {
        Self {
            inner: Arc::new((Mutex::new(Store::new()), Condvar::new())),
            clock,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Store> {
        self.inner.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn clock(&self) -> &Arc<VirtualClock> {
        &self.clock
    }

    pub fn get(&self, key: &StoreKey) -> Option<StoredValue> {
        self.lock().get(key).cloned()
    }

    pub fn put(&self, key: &StoreKey, bytes: Vec<u8>) -> u64 {
        self.lock().put(key, bytes)
    }

    /// Blocks until `holder` owns `name` or the virtual deadline passes.
    pub fn acquire_lock(
        &self,
        name: &str,
        holder: LockHolder,
        timeout: Option<Duration>,
    ) -> Result<LockOutcome, LockError> {
        let (_, cv) = &*self.inner;
        let mut store = self.lock();
        let deadline = match store
            .locks_mut()
            .acquire(name, holder, self.clock.now(), timeout)?
        {
            Acquire::Acquired => return Ok(LockOutcome::Acquired),
            Acquire::Queued { deadline } => deadline,
        };
        loop {
            if store.locks().holder(name) == Some(holder) {
                return Ok(LockOutcome::Acquired);
            }
            if deadline.is_some_and(|d| self.clock.now() > d) {
                store.locks_mut().cancel(name, holder);
                return Ok(LockOutcome::TimedOut);
            }
            store = cv.wait(store).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn release_lock(&self, name: &str, holder: LockHolder) -> Result<(), LockError> {
        let now = self.clock.now();
        let res = self.lock().locks_mut().release(name, holder, now).map(|_| ());
        self.inner.1.notify_all();
        res
    }

    /// Advances the shared virtual clock and wakes parked lock waiters.
    pub fn advance_clock(&self, d: Duration) {
        // take the mutex so no waiter misses the wake-up between its
        // deadline check and its wait
        let _guard = self.lock();
        self.clock.advance_by(d);
        self.inner.1.notify_all();
    }

    pub fn lock_holder(&self, name: &str) -> Option<LockHolder> {
        self.lock().locks().holder(name)
    }

    pub fn lock_waiters(&self, name: &str) -> usize {
        self.lock().locks().waiting(name)
    }

    /// Runs `f` with exclusive access to the underlying store.
    pub fn with_store<R>(&self, f: impl FnOnce(&mut Store) -> R) -> R {
        f(&mut self.lock())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{PoolId, WorkerId};
    use crate::store::Value;
    use std::thread;

    fn w(uid: u64) -> LockHolder {
        LockHolder::new(PoolId(0), WorkerId(uid))
    }

    fn wait_until(cond: impl Fn() -> bool) {
        while !cond() {
            thread::yield_now();
        }
    }

    #[test]
    fn blocked_waiter_acquires_after_release_at_t_plus_3() {
        let store = SharedStore::new(Arc::new(VirtualClock::new()));
        assert_eq!(store.acquire_lock("C1", w(1), None), Ok(LockOutcome::Acquired));
        let s2 = store.clone();
        let waiter = thread::spawn(move || {
            let r = s2.acquire_lock("C1", w(2), Some(Duration::from_secs(10)));
            (r, s2.clock().now())
        });
        wait_until(|| store.lock_waiters("C1") == 1);
        store.advance_clock(Duration::from_secs(3));
        store.release_lock("C1", w(1)).unwrap();
        let (r, at) = waiter.join().unwrap();
        assert_eq!(r, Ok(LockOutcome::Acquired));
        assert_eq!(at.as_secs_f64(), 3.0);
        assert_eq!(store.lock_holder("C1"), Some(w(2)));
    }

    #[test]
    fn waiter_times_out_on_virtual_clock() {
        let store = SharedStore::new(Arc::new(VirtualClock::new()));
        store.acquire_lock("C1", w(1), None).unwrap();
        let s2 = store.clone();
        let waiter =
            thread::spawn(move || s2.acquire_lock("C1", w(2), Some(Duration::from_secs(1))));
        wait_until(|| store.lock_waiters("C1") == 1);
        for _ in 0..5 {
            store.advance_clock(Duration::from_secs(1));
        }
        assert_eq!(waiter.join().unwrap(), Ok(LockOutcome::TimedOut));
        assert_eq!(store.lock_holder("C1"), Some(w(1)));
        assert_eq!(store.lock_waiters("C1"), 0);
    }

    #[test]
    fn facade_reads_its_own_writes() {
        let store = SharedStore::new(Arc::new(VirtualClock::new()));
        let k = StoreKey::new("C1", "x").unwrap();
        store.put(&k, Value::Int(5).encode());
        assert_eq!(store.get(&k).unwrap().decode().unwrap(), Value::Int(5));
    }
}
