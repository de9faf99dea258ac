//! Example elastic application: a key-value cache over the shared store.
//!
//! Entries live under `ElasticCache$k<n>`. Puts take the entry's write lock
//! with a timeout; gets read without locking. Each member keeps lock
//! metrics for the current burst window, which its advisor turns into a
//! pool-size recommendation.

use std::time::Duration;

use crate::bench::req_min;
use crate::pool::{AdvisorContext, ElasticObject, ExecContext, Invocation, LockRequest};
use crate::store::{Store, StoreKey, Value};

pub const CACHE_CLASS: &str = "ElasticCache";

pub fn entry_key(key: u64) -> StoreKey {
    StoreKey::new(CACHE_CLASS, format!("k{key}")).expect("constant class name")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheOp {
    Get { key: u64 },
    Put { key: u64, value: Value },
}

impl CacheOp {
    pub fn method(&self) -> &'static str {
        match self {
            CacheOp::Get { .. } => "get",
            CacheOp::Put { .. } => "put",
        }
    }

    pub fn encode_args(&self) -> Vec<u8> {
        match self {
            CacheOp::Get { key } => Value::Int(*key as i64).encode(),
            CacheOp::Put { key, value } => Value::List(vec![Value::Int(*key as i64), value.clone()]).encode(),
        }
    }

    pub fn decode(method: &str, args: &[u8]) -> Result<CacheOp, String> {
        let v = Value::decode(args).map_err(|e| e.to_string())?;
        let as_key = |v: &Value| {
            v.as_int()
                .and_then(|k| u64::try_from(k).ok())
                .ok_or_else(|| format!("bad cache key {v:?}"))
        };
        match (method, v) {
            ("get", v) => Ok(CacheOp::Get { key: as_key(&v)? }),
            ("put", Value::List(mut parts)) if parts.len() == 2 => {
                let value = parts.pop().expect("len 2");
                Ok(CacheOp::Put {
                    key: as_key(&parts[0])?,
                    value,
                })
            }
            (m, _) => Err(format!("unsupported cache call {m}")),
        }
    }
}

/// Result bytes of a get: the stored value, or `None` for a missing entry.
pub fn decode_get(reply: &[u8]) -> Result<Option<Value>, String> {
    match Value::decode(reply).map_err(|e| e.to_string())? {
        Value::List(mut v) if v.len() <= 1 => Ok(v.pop()),
        other => Err(format!("malformed get reply {other:?}")),
    }
}

/// Averages over the put attempts of one window. Zero attempts read as an
/// uncontended cache.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CacheMetrics {
    pub avg_lock_acq_failure: f64,
    /// Seconds.
    pub avg_lock_acq_latency: f64,
    /// Seconds; includes the lock wait.
    pub put_latency: f64,
}

/// Recommends two more members unless writers are fighting over locks:
/// either most lock acquisitions fail, or waiting for the lock dominates the
/// cost of a put.
pub fn cache_advisor(m: &CacheMetrics) -> i64 {
    if m.avg_lock_acq_failure > 0.5 || m.avg_lock_acq_latency > 0.5 * m.put_latency {
        0
    } else {
        2
    }
}

impl CacheMetrics {
    pub fn contended(&self) -> bool {
        cache_advisor(self) == 0
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Window {
    attempts: u64,
    failures: u64,
    lock_wait: Duration,
    put_latency: Duration,
}

impl Window {
    fn metrics(&self) -> CacheMetrics {
        if self.attempts == 0 {
            return CacheMetrics::default();
        }
        let n = self.attempts as f64;
        CacheMetrics {
            avg_lock_acq_failure: self.failures as f64 / n,
            avg_lock_acq_latency: self.lock_wait.as_secs_f64() / n,
            put_latency: self.put_latency.as_secs_f64() / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdvisorMode {
    /// Grow by two unless contended; never shrink.
    Contention,
    /// Size the pool for the demand seen in the last window, holding back
    /// growth while contended.
    #[default]
    DemandAware,
}

#[derive(Debug, Clone)]
pub struct ElasticCache {
    put_timeout: Option<Duration>,
    mode: AdvisorMode,
    window: Window,
}

impl ElasticCache {
    pub fn new(put_timeout: Option<Duration>, mode: AdvisorMode) -> Self {
        Self {
            put_timeout,
            mode,
            window: Window::default(),
        }
    }

    pub fn metrics(&self) -> CacheMetrics {
        self.window.metrics()
    }
}

/// Desired size minus live size for the observed arrival rate, within the
/// pool bounds.
pub fn demand_delta(ctx: &AdvisorContext) -> i64 {
    let secs = ctx.window.as_secs_f64();
    if secs <= 0.0 {
        return 0;
    }
    let rate = ctx.accepted_in_window as f64 / secs;
    let want = (req_min(rate, ctx.service_rate) as usize).clamp(ctx.min_size, ctx.max_size);
    want as i64 - ctx.live_size as i64
}

impl ElasticObject for ElasticCache {
    fn lock_for(&self, inv: &Invocation) -> Option<LockRequest> {
        match CacheOp::decode(&inv.method, &inv.args) {
            Ok(CacheOp::Put { key, .. }) => Some(LockRequest {
                name: entry_key(key).render(),
                timeout: self.put_timeout,
            }),
            _ => None,
        }
    }

    fn execute(&mut self, store: &mut Store, inv: &Invocation, ctx: &ExecContext) -> Result<Vec<u8>, String> {
        match CacheOp::decode(&inv.method, &inv.args)? {
            CacheOp::Get { key } => {
                let found = store.get_value(&entry_key(key));
                Ok(Value::List(found.into_iter().collect()).encode())
            }
            CacheOp::Put { key, value } => {
                store.put_value(&entry_key(key), &value);
                let wait = ctx.lock_wait.unwrap_or_default();
                self.window.attempts += 1;
                self.window.lock_wait += wait;
                self.window.put_latency += wait + ctx.service_time;
                Ok(Value::List(Vec::new()).encode())
            }
        }
    }

    fn lock_timed_out(&mut self, _inv: &Invocation, waited: Duration) {
        self.window.attempts += 1;
        self.window.failures += 1;
        self.window.lock_wait += waited;
        self.window.put_latency += waited;
    }

    fn change_pool_size(&mut self, ctx: &AdvisorContext, _store: &Store) -> Result<i64, String> {
        let metrics = std::mem::take(&mut self.window).metrics();
        Ok(match self.mode {
            AdvisorMode::Contention => cache_advisor(&metrics),
            AdvisorMode::DemandAware => {
                let delta = demand_delta(ctx);
                if delta > 0 && metrics.contended() {
                    0
                } else {
                    delta
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimTime;
    use crate::ids::{RequestId, WorkerId};

    fn m(failure: f64, lock: f64, put: f64) -> CacheMetrics {
        CacheMetrics {
            avg_lock_acq_failure: failure,
            avg_lock_acq_latency: lock,
            put_latency: put,
        }
    }

    #[test]
    fn advisor_branches() {
        assert_eq!(cache_advisor(&m(0.6, 0.0, 1.0)), 0);
        assert_eq!(cache_advisor(&m(0.2, 0.8, 1.0)), 0);
        assert_eq!(cache_advisor(&m(0.2, 0.1, 1.0)), 2);
        assert_eq!(cache_advisor(&CacheMetrics::default()), 2);
        // strict comparisons
        assert_eq!(cache_advisor(&m(0.5, 0.5, 1.0)), 2);
    }

    #[test]
    fn ops_round_trip_through_invocation_bytes() {
        for op in [
            CacheOp::Get { key: 3 },
            CacheOp::Put {
                key: 9,
                value: Value::Text("v".into()),
            },
        ] {
            assert_eq!(CacheOp::decode(op.method(), &op.encode_args()), Ok(op));
        }
        assert!(CacheOp::decode("evict", &Value::Int(1).encode()).is_err());
    }

    fn inv(op: CacheOp) -> Invocation {
        Invocation {
            request_id: RequestId(0),
            method: op.method().into(),
            args: op.encode_args(),
            client: 0,
            enqueued_at: SimTime::ZERO,
        }
    }

    fn ctx(lock_wait: Option<Duration>) -> ExecContext {
        ExecContext {
            now: SimTime::ZERO,
            worker: WorkerId(1),
            lock_wait,
            service_time: Duration::from_millis(200),
        }
    }

    #[test]
    fn put_then_get_through_two_members() {
        let mut store = Store::new();
        let mut a = ElasticCache::new(None, AdvisorMode::Contention);
        let mut b = ElasticCache::new(None, AdvisorMode::Contention);
        let put = inv(CacheOp::Put {
            key: 1,
            value: Value::Int(7),
        });
        assert_eq!(a.lock_for(&put).unwrap().name, "ElasticCache$k1");
        a.execute(&mut store, &put, &ctx(Some(Duration::ZERO))).unwrap();
        let got = b.execute(&mut store, &inv(CacheOp::Get { key: 1 }), &ctx(None)).unwrap();
        assert_eq!(decode_get(&got), Ok(Some(Value::Int(7))));
        let miss = b.execute(&mut store, &inv(CacheOp::Get { key: 2 }), &ctx(None)).unwrap();
        assert_eq!(decode_get(&miss), Ok(None));
        assert!(b.lock_for(&inv(CacheOp::Get { key: 1 })).is_none());
        assert_eq!(a.metrics().avg_lock_acq_failure, 0.0);
    }

    #[test]
    fn metrics_average_over_attempts() {
        let mut c = ElasticCache::new(Some(Duration::from_secs(1)), AdvisorMode::Contention);
        let mut store = Store::new();
        let put = inv(CacheOp::Put {
            key: 1,
            value: Value::Int(1),
        });
        c.execute(&mut store, &put, &ctx(Some(Duration::from_millis(600)))).unwrap();
        c.lock_timed_out(&put, Duration::from_secs(1));
        let got = c.metrics();
        assert_eq!(got.avg_lock_acq_failure, 0.5);
        assert!((got.avg_lock_acq_latency - 0.8).abs() < 1e-12);
        assert!((got.put_latency - 0.9).abs() < 1e-12);
        assert!(got.avg_lock_acq_latency <= got.put_latency);
    }

    fn actx(accepted: u64, window_s: u64, live: usize) -> AdvisorContext {
        AdvisorContext {
            now: SimTime::ZERO,
            worker: WorkerId(1),
            live_size: live,
            min_size: 2,
            max_size: 20,
            service_rate: 5.0,
            window: Duration::from_secs(window_s),
            accepted_in_window: accepted,
            pool_pending: 0,
        }
    }

    #[test]
    fn demand_delta_sizes_for_observed_rate() {
        // 30 req/s at 5 per worker needs 6
        assert_eq!(demand_delta(&actx(1800, 60, 4)), 2);
        assert_eq!(demand_delta(&actx(1800, 60, 9)), -3);
        // floored at min_size
        assert_eq!(demand_delta(&actx(0, 60, 3)), -1);
        assert_eq!(demand_delta(&actx(100, 0, 3)), 0);
    }

    #[test]
    fn demand_advisor_holds_growth_under_contention() {
        let mut c = ElasticCache::new(Some(Duration::from_secs(1)), AdvisorMode::DemandAware);
        let put = inv(CacheOp::Put {
            key: 1,
            value: Value::Int(1),
        });
        c.lock_timed_out(&put, Duration::from_secs(1));
        assert_eq!(c.change_pool_size(&actx(1800, 60, 4), &Store::new()), Ok(0));
        // window was reset by the poll
        assert_eq!(c.change_pool_size(&actx(1800, 60, 4), &Store::new()), Ok(2));
        c.lock_timed_out(&put, Duration::from_secs(1));
        // shrinking is never held back
        assert_eq!(c.change_pool_size(&actx(600, 60, 4), &Store::new()), Ok(-2));
    }
}
