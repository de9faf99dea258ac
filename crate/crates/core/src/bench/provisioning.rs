use std::collections::BTreeMap;
use std::time::Duration;

use crate::clock::SimTime;
use crate::events::{Event, SpawnOrigin};
use crate::ids::WorkerId;

/// One worker added by a scaling decision, from request to first service.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvisioningRecord {
    pub pool: String,
    pub uid: WorkerId,
    pub requested_at: SimTime,
    /// `None` when the worker never served (an open record).
    pub first_served_at: Option<SimTime>,
}

impl ProvisioningRecord {
    pub fn interval(&self) -> Option<Duration> {
        self.first_served_at.map(|t| t.since(self.requested_at))
    }

    pub fn is_open(&self) -> bool {
        self.first_served_at.is_none()
    }
}

/// Records for every scale-origin spawn in the log, in spawn order.
pub fn measure_provisioning(events: &[Event]) -> Vec<ProvisioningRecord> {
    let mut order = Vec::new();
    let mut records: BTreeMap<(String, WorkerId), ProvisioningRecord> = BTreeMap::new();
    for e in events {
        match e {
            Event::Spawn {
                pool,
                uid,
                origin: SpawnOrigin::Scale,
                t,
            } => {
                order.push((pool.clone(), *uid));
                records.insert(
                    (pool.clone(), *uid),
                    ProvisioningRecord {
                        pool: pool.clone(),
                        uid: *uid,
                        requested_at: *t,
                        first_served_at: None,
                    },
                );
            }
            Event::FirstServe { pool, uid, t } => {
                if let Some(r) = records.get_mut(&(pool.clone(), *uid)) {
                    r.first_served_at.get_or_insert(*t);
                }
            }
            _ => {}
        }
    }
    order
        .into_iter()
        .filter_map(|k| records.remove(&k))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProvisioningSummary {
    pub closed: usize,
    pub open: usize,
    /// Seconds; `None` without closed records.
    pub max: Option<f64>,
    pub mean: Option<f64>,
}

pub fn summarize(records: &[ProvisioningRecord]) -> ProvisioningSummary {
    let closed: Vec<f64> = records
        .iter()
        .filter_map(|r| r.interval())
        .map(|d| d.as_secs_f64())
        .collect();
    ProvisioningSummary {
        closed: closed.len(),
        open: records.len() - closed.len(),
        max: closed.iter().cloned().reduce(f64::max),
        mean: (!closed.is_empty()).then(|| closed.iter().sum::<f64>() / closed.len() as f64),
    }
}
