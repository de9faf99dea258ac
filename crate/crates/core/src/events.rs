//! Structured event records.
//!
//! Every record renders as a single `key=value` line starting with `event=`.
//! The log is kept in memory for post-run analysis (provisioning intervals,
//! audits) and mirrored to the `log` facade.

use std::fmt;

use crate::clock::SimTime;
use crate::ids::WorkerId;
use crate::scaling::DeltaReason;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WatermarkDirection {
    Above,
    Below,
}

impl fmt::Display for WatermarkDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WatermarkDirection::Above => "above",
            WatermarkDirection::Below => "below",
        })
    }
}

/// Why a worker was spawned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpawnOrigin {
    /// Part of the initial instantiation of the pool.
    Init,
    /// Added by a scaling decision.
    Scale,
}

impl fmt::Display for SpawnOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpawnOrigin::Init => "init",
            SpawnOrigin::Scale => "scale",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    ClusterWatermark {
        direction: WatermarkDirection,
        utilization: f64,
        t: SimTime,
    },
    Spawn {
        pool: String,
        uid: WorkerId,
        origin: SpawnOrigin,
        t: SimTime,
    },
    Serving {
        pool: String,
        uid: WorkerId,
        t: SimTime,
    },
    FirstServe {
        pool: String,
        uid: WorkerId,
        t: SimTime,
    },
    Drain {
        pool: String,
        uid: WorkerId,
        t: SimTime,
    },
    Stop {
        pool: String,
        uid: WorkerId,
        t: SimTime,
    },
    Crash {
        pool: String,
        uid: WorkerId,
        t: SimTime,
    },
    Elect {
        pool: String,
        uid: WorkerId,
        t: SimTime,
    },
    NoCapacity {
        pool: String,
        t: SimTime,
    },
    Scale {
        pool: String,
        delta: i64,
        applied: i64,
        reason: DeltaReason,
        t: SimTime,
    },
    Rebalance {
        pool: String,
        moves: usize,
        max_before: usize,
        max_after: usize,
        t: SimTime,
    },
    AdvisorFault {
        pool: String,
        uid: WorkerId,
        message: String,
        t: SimTime,
    },
}

impl Event {
    pub fn time(&self) -> SimTime {
        match self {
            Event::ClusterWatermark { t, .. }
            | Event::Spawn { t, .. }
            | Event::Serving { t, .. }
            | Event::FirstServe { t, .. }
            | Event::Drain { t, .. }
            | Event::Stop { t, .. }
            | Event::Crash { t, .. }
            | Event::Elect { t, .. }
            | Event::NoCapacity { t, .. }
            | Event::Scale { t, .. }
            | Event::Rebalance { t, .. }
            | Event::AdvisorFault { t, .. } => *t,
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::ClusterWatermark {
                direction,
                utilization,
                t,
            } => write!(
                f,
                "event=cluster_watermark direction={direction} utilization={utilization:.4} t={t}"
            ),
            Event::Spawn {
                pool,
                uid,
                origin,
                t,
            } => write!(f, "event=spawn pool={pool} uid={uid} t={t} origin={origin}"),
            Event::Serving { pool, uid, t } => write!(f, "event=serving pool={pool} uid={uid} t={t}"),
            Event::FirstServe { pool, uid, t } => {
                write!(f, "event=first_serve pool={pool} uid={uid} t={t}")
            }
            Event::Drain { pool, uid, t } => write!(f, "event=drain pool={pool} uid={uid} t={t}"),
            Event::Stop { pool, uid, t } => write!(f, "event=stop pool={pool} uid={uid} t={t}"),
            Event::Crash { pool, uid, t } => write!(f, "event=crash pool={pool} uid={uid} t={t}"),
            Event::Elect { pool, uid, t } => write!(f, "event=elect pool={pool} uid={uid} t={t}"),
            Event::NoCapacity { pool, t } => write!(f, "event=no_capacity pool={pool} t={t}"),
            Event::Scale {
                pool,
                delta,
                applied,
                reason,
                t,
            } => write!(
                f,
                "event=scale pool={pool} delta={delta} applied={applied} reason={reason} t={t}"
            ),
            Event::Rebalance {
                pool,
                moves,
                max_before,
                max_after,
                t,
            } => write!(
                f,
                "event=rebalance pool={pool} moves={moves} max_before={max_before} max_after={max_after} t={t}"
            ),
            Event::AdvisorFault {
                pool,
                uid,
                message,
                t,
            } => write!(
                f,
                "event=advisor_fault pool={pool} uid={uid} t={t} message={message:?}"
            ),
        }
    }
}

/// Append-only event log.
#[derive(Debug, Default, Clone)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, event: Event) {
        match &event {
            Event::Scale { .. } | Event::Rebalance { .. } => log::debug!("{event}"),
            Event::AdvisorFault { .. } | Event::NoCapacity { .. } => log::warn!("{event}"),
            _ => log::info!("{event}"),
        }
        self.events.push(event);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_key_value_lines() {
        let e = Event::Scale {
            pool: "cache".into(),
            delta: 2,
            applied: 1,
            reason: DeltaReason::Advisor,
            t: SimTime::from_secs(60),
        };
        assert_eq!(
            e.to_string(),
            "event=scale pool=cache delta=2 applied=1 reason=advisor t=60.000000"
        );
        let w = Event::ClusterWatermark {
            direction: WatermarkDirection::Above,
            utilization: 0.9375,
            t: SimTime::from_secs(1),
        };
        assert_eq!(
            w.to_string(),
            "event=cluster_watermark direction=above utilization=0.9375 t=1.000000"
        );
    }
}
