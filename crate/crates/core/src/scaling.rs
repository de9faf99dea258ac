//! Scaling policies, evaluated once per burst interval.
//!
//! A policy turns pool metrics (or advisor replies) into a signed delta.
//! Applying the delta is clamped to `[min_size, max_size]` and limited by
//! what the cluster grants.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use thiserror::Error;

use crate::clock::SimTime;
use crate::events::Event;
use crate::ids::WorkerId;
use crate::pool::{Env, Pool, PoolError};

pub const DEFAULT_BURST_INTERVAL: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImplicitThresholds {
    pub incr: f64,
    pub decr: f64,
}

impl Default for ImplicitThresholds {
    fn default() -> Self {
        Self {
            incr: 0.90,
            decr: 0.60,
        }
    }
}

/// Explicit CPU/memory thresholds. Unset thresholds never fire.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CoarseThresholds {
    pub cpu_incr: Option<f64>,
    pub cpu_decr: Option<f64>,
    pub mem_incr: Option<f64>,
    pub mem_decr: Option<f64>,
}

impl CoarseThresholds {
    pub fn is_empty(&self) -> bool {
        self.cpu_incr.is_none()
            && self.cpu_decr.is_none()
            && self.mem_incr.is_none()
            && self.mem_decr.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScalingPolicy {
    ImplicitCpu(ImplicitThresholds),
    CoarseThreshold(CoarseThresholds),
    /// Poll every serving worker's advisor and scale by the rounded mean.
    /// Installing it switches CPU/memory threshold evaluation off.
    FineGrained,
    /// Sizes come from an application-level [`Decider`].
    ExternalDecider,
}

impl Default for ScalingPolicy {
    fn default() -> Self {
        ScalingPolicy::ImplicitCpu(ImplicitThresholds::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaReason {
    Cpu,
    Mem,
    Advisor,
    Decider,
    None,
}

impl fmt::Display for DeltaReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeltaReason::Cpu => "cpu",
            DeltaReason::Mem => "mem",
            DeltaReason::Advisor => "advisor",
            DeltaReason::Decider => "decider",
            DeltaReason::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolDelta {
    pub delta: i64,
    pub reason: DeltaReason,
}

impl PoolDelta {
    pub const NONE: PoolDelta = PoolDelta {
        delta: 0,
        reason: DeltaReason::None,
    };

    pub fn new(delta: i64, reason: DeltaReason) -> Self {
        Self { delta, reason }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkerGauge {
    pub uid: WorkerId,
    pub cpu: f64,
    pub mem: f64,
}

/// Gauges of the serving workers of one pool.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoolMetrics {
    pub workers: Vec<WorkerGauge>,
    pub live_size: usize,
}

impl PoolMetrics {
    pub fn uniform(n: usize, cpu: f64, mem: f64) -> Self {
        Self {
            workers: (0..n as u64)
                .map(|i| WorkerGauge {
                    uid: WorkerId(i + 1),
                    cpu,
                    mem,
                })
                .collect(),
            live_size: n,
        }
    }

    fn mean(&self, f: impl Fn(&WorkerGauge) -> f64) -> f64 {
        if self.workers.is_empty() {
            return 0.0;
        }
        self.workers.iter().map(f).sum::<f64>() / self.workers.len() as f64
    }

    pub fn avg_cpu(&self) -> f64 {
        self.mean(|w| w.cpu)
    }

    pub fn avg_mem(&self) -> f64 {
        self.mean(|w| w.mem)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScalingError {
    #[error("coarse policy has no thresholds set")]
    NoThresholds,
}

pub fn evaluate_implicit(metrics: &PoolMetrics, th: &ImplicitThresholds) -> PoolDelta {
    if metrics.workers.is_empty() {
        return PoolDelta::NONE;
    }
    let cpu = metrics.avg_cpu();
    if cpu > th.incr {
        PoolDelta::new(1, DeltaReason::Cpu)
    } else if cpu < th.decr {
        PoolDelta::new(-1, DeltaReason::Cpu)
    } else {
        PoolDelta::NONE
    }
}

/// Increase triggers are OR-ed, decrease triggers are OR-ed, and an
/// increase wins when both sides fire.
pub fn evaluate_coarse(metrics: &PoolMetrics, th: &CoarseThresholds) -> Result<PoolDelta, ScalingError> {
    if th.is_empty() {
        return Err(ScalingError::NoThresholds);
    }
    if metrics.workers.is_empty() {
        return Ok(PoolDelta::NONE);
    }
    let (cpu, mem) = (metrics.avg_cpu(), metrics.avg_mem());
    let above = |t: Option<f64>, v: f64| t.is_some_and(|t| v > t);
    let below = |t: Option<f64>, v: f64| t.is_some_and(|t| v < t);
    if above(th.cpu_incr, cpu) {
        return Ok(PoolDelta::new(1, DeltaReason::Cpu));
    }
    if above(th.mem_incr, mem) {
        return Ok(PoolDelta::new(1, DeltaReason::Mem));
    }
    if below(th.cpu_decr, cpu) {
        return Ok(PoolDelta::new(-1, DeltaReason::Cpu));
    }
    if below(th.mem_decr, mem) {
        return Ok(PoolDelta::new(-1, DeltaReason::Mem));
    }
    Ok(PoolDelta::NONE)
}

/// Mean of integers, rounded half away from zero, in exact integer
/// arithmetic. Empty input means no change.
pub fn mean_rounded(values: &[i64]) -> i64 {
    if values.is_empty() {
        return 0;
    }
    let n = values.len() as i128;
    let sum: i128 = values.iter().map(|&v| v as i128).sum();
    let magnitude = (2 * sum.abs() + n) / (2 * n);
    (sum.signum() * magnitude) as i64
}

/// One advisor reply; a fault counts as 0.
pub type AdvisorReply = Result<i64, String>;

pub fn evaluate_fine_grained(replies: &[AdvisorReply]) -> PoolDelta {
    let values: Vec<i64> = replies.iter().map(|r| *r.as_ref().unwrap_or(&0)).collect();
    PoolDelta::new(mean_rounded(&values), DeltaReason::Advisor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolObservation {
    pub size: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub metrics: PoolMetrics,
}

/// Application-level scaling: desired sizes for a set of named pools.
pub trait Decider {
    fn monitored(&self) -> Vec<String>;

    fn desired_sizes(
        &mut self,
        observed: &BTreeMap<String, PoolObservation>,
    ) -> Result<BTreeMap<String, usize>, String>;
}

/// Desired size minus current size per pool, with desired clamped to the
/// pool bounds. A decider fault yields no change for any pool.
pub fn evaluate_decider(
    decider: &mut dyn Decider,
    observed: &BTreeMap<String, PoolObservation>,
) -> BTreeMap<String, PoolDelta> {
    let desired = match decider.desired_sizes(observed) {
        Ok(d) => d,
        Err(e) => {
            log::warn!("event=decider_fault message={e:?}");
            return observed.keys().map(|k| (k.clone(), PoolDelta::NONE)).collect();
        }
    };
    observed
        .iter()
        .map(|(name, obs)| {
            let delta = desired.get(name).map_or(0, |&want| {
                want.clamp(obs.min_size, obs.max_size) as i64 - obs.size as i64
            });
            (name.clone(), PoolDelta::new(delta, DeltaReason::Decider))
        })
        .collect()
}

/// Clamp a raw delta so that `current + delta` lies in `[min, max]`.
pub fn clamp_delta(current: usize, delta: i64, min: usize, max: usize) -> i64 {
    let target = (current as i64 + delta).clamp(min as i64, max as i64);
    target - current as i64
}

/// Issues lifecycle calls for one evaluation's delta and returns the change
/// actually achieved. Growth stops at the first refused grant; shrinking
/// removes the youngest serving workers first.
pub fn apply_delta(pool: &mut Pool, env: &mut Env<'_>, delta: i64) -> i64 {
    let cfg = pool.config();
    let wanted = clamp_delta(pool.live_size(), delta, cfg.min_size, cfg.max_size);
    let mut applied = 0;
    if wanted > 0 {
        for _ in 0..wanted {
            match pool.add_worker(env) {
                Ok(_) => applied += 1,
                Err(PoolError::NoCapacity) => break,
                Err(e) => {
                    log::warn!("add_worker refused: {e}");
                    break;
                }
            }
        }
    } else {
        for _ in 0..(-wanted) {
            let Some(victim) = pool.pick_victim() else { break };
            match pool.remove_worker(victim, env) {
                Ok(()) => applied -= 1,
                Err(e) => {
                    log::warn!("remove_worker refused: {e}");
                    break;
                }
            }
        }
    }
    applied
}

/// One burst-boundary decision: evaluate the pool's policy, apply the
/// delta, and log the outcome.
pub fn burst_evaluation(pool: &mut Pool, env: &mut Env<'_>) -> (PoolDelta, i64) {
    let decision = pool.evaluate_policy(env);
    let applied = if decision.delta == 0 {
        0
    } else {
        apply_delta(pool, env, decision.delta)
    };
    env.log.record(Event::Scale {
        pool: pool.name().to_owned(),
        delta: decision.delta,
        applied,
        reason: decision.reason,
        t: env.now,
    });
    (decision, applied)
}

/// Burst-interval bookkeeping. Interval changes apply from the next
/// boundary; each boundary is evaluated at most once.
#[derive(Debug, Clone)]
pub struct BurstSchedule {
    interval: Duration,
    pending: Option<Duration>,
    next: SimTime,
    evaluations: u64,
}

impl BurstSchedule {
    pub fn new(interval: Duration, origin: SimTime) -> Self {
        Self {
            interval,
            pending: None,
            next: origin + interval,
            evaluations: 0,
        }
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    pub fn next_boundary(&self) -> SimTime {
        self.next
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    pub fn set_burst_interval(&mut self, interval: Duration) {
        self.pending = Some(interval);
    }

    /// True exactly once per boundary, when `now` has reached it. The next
    /// boundary is then scheduled with any pending interval change.
    pub fn take_due(&mut self, now: SimTime) -> bool {
        if now < self.next {
            return false;
        }
        if let Some(i) = self.pending.take() {
            self.interval = i;
        }
        self.next = self.next + self.interval;
        self.evaluations += 1;
        true
    }
}
