//! Elasticity benchmark: workloads, the agility metric, provisioning
//! intervals and baseline comparisons.
//!
//! Agility over N sub-intervals is the mean of per-sample excess plus
//! shortage, where excess and shortage compare the provisioned worker count
//! with the minimum count that meets the per-worker QoS capacity.

mod agility;
mod provisioning;
mod workload;

pub use agility::{agility, req_min, weighted_agility, AgilityError, AgilityReport, AgilitySample, AgilityWeights};
pub use provisioning::{measure_provisioning, summarize, ProvisioningRecord, ProvisioningSummary};
pub use workload::{generate_workload, mean_rate, ArrivalTimes, Segment, WorkloadKind, WorkloadPattern};

use crate::scenario::{Baseline, Scenario};
use crate::sim::{run, RunOutput, SimError};

pub fn run_baseline(scenario: &Scenario, baseline: Baseline) -> Result<RunOutput, SimError> {
    run(&scenario.for_baseline(baseline))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub baseline: Baseline,
    pub agility: Option<f64>,
    pub zero_fraction: Option<f64>,
    pub provisioning: ProvisioningSummary,
}

impl ComparisonRow {
    pub fn from_run(baseline: Baseline, out: &RunOutput) -> Self {
        Self {
            baseline,
            agility: out.report.as_ref().map(|r| r.agility),
            zero_fraction: out.report.as_ref().map(|r| r.zero_fraction()),
            provisioning: summarize(&out.provisioning),
        }
    }
}

/// Rows ordered by mean agility, best first.
pub fn sort_rows(rows: &mut [ComparisonRow]) {
    rows.sort_by(|a, b| {
        let key = |r: &ComparisonRow| r.agility.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then(a.baseline.name().cmp(b.baseline.name()))
    });
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "N/A".to_owned(), |x| format!("{x:.4}"));
    let mut s = format!(
        "{:<14} {:>12} {:>14} {:>18} {:>19}\n",
        "baseline", "agility_mean", "zero_fraction", "provisioning_max_s", "provisioning_mean_s"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<14} {:>12} {:>14} {:>18} {:>19}\n",
            r.baseline.name(),
            cell(r.agility),
            cell(r.zero_fraction),
            cell(r.provisioning.max),
            cell(r.provisioning.mean),
        ));
    }
    s
}
