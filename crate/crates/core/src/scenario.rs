//! Scenario files: one flat TOML table.
//!
//! Every key except `seed` has a default, so a minimal scenario is
//! `seed = 1`. Errors carry the line of the offending key when it can be
//! located.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{req_min, WorkloadKind, WorkloadPattern};
use crate::cache::AdvisorMode;
use crate::cluster::ClusterConfig;
use crate::pool::PoolConfig;
use crate::scaling::{CoarseThresholds, ImplicitThresholds, ScalingPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    ImplicitCpu,
    Coarse,
    FineGrained,
    /// Static pool sized for the known peak.
    Overprovision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubStrategy {
    RoundRobin,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvisorKind {
    Demand,
    Contention,
}

impl From<AdvisorKind> for AdvisorMode {
    fn from(k: AdvisorKind) -> Self {
        match k {
            AdvisorKind::Demand => AdvisorMode::DemandAware,
            AdvisorKind::Contention => AdvisorMode::Contention,
        }
    }
}

fn d_total_slices() -> usize {
    32
}
fn d_spawn_delay() -> f64 {
    5.0
}
fn d_high() -> f64 {
    0.9
}
fn d_low() -> f64 {
    0.1
}
fn d_pool_name() -> String {
    "cache".into()
}
fn d_min_size() -> usize {
    2
}
fn d_max_size() -> usize {
    20
}
fn d_burst() -> f64 {
    60.0
}
fn d_policy() -> PolicyKind {
    PolicyKind::ImplicitCpu
}
fn d_incr() -> f64 {
    ImplicitThresholds::default().incr
}
fn d_decr() -> f64 {
    ImplicitThresholds::default().decr
}
fn d_advisor() -> AdvisorKind {
    AdvisorKind::Demand
}
fn d_workload() -> WorkloadKind {
    WorkloadKind::Abrupt
}
fn d_point_a() -> f64 {
    50.0
}
fn d_cycles() -> u32 {
    3
}
fn d_one() -> f64 {
    1.0
}
fn d_qos() -> f64 {
    5.0
}
fn d_clients() -> u32 {
    4
}
fn d_strategy() -> StubStrategy {
    StubStrategy::RoundRobin
}
fn d_delta() -> f64 {
    0.25
}
fn d_put_fraction() -> f64 {
    0.2
}
fn d_key_space() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,

    #[serde(default = "d_total_slices")]
    pub total_slices: usize,
    /// Seconds from slice grant to a serving worker.
    #[serde(default = "d_spawn_delay")]
    pub spawn_delay: f64,
    #[serde(default = "d_high")]
    pub admin_high_watermark: f64,
    #[serde(default = "d_low")]
    pub admin_low_watermark: f64,

    #[serde(default = "d_pool_name")]
    pub pool_name: String,
    #[serde(default = "d_min_size")]
    pub min_size: usize,
    #[serde(default = "d_max_size")]
    pub max_size: usize,
    #[serde(default = "d_burst")]
    pub burst_interval: f64,
    /// Agility sampling period; defaults to the burst interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_interval: Option<f64>,

    #[serde(default = "d_policy")]
    pub policy: PolicyKind,
    #[serde(default = "d_incr")]
    pub incr_threshold: f64,
    #[serde(default = "d_decr")]
    pub decr_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_incr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_decr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_incr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_decr: Option<f64>,
    #[serde(default = "d_advisor")]
    pub advisor: AdvisorKind,

    #[serde(default = "d_workload")]
    pub workload: WorkloadKind,
    #[serde(default = "d_point_a")]
    pub point_a: f64,
    #[serde(default = "d_cycles")]
    pub cycles: u32,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default = "d_one")]
    pub time_scale: f64,
    /// Requests per second one worker serves.
    #[serde(default = "d_qos")]
    pub qos_capacity: f64,

    #[serde(default = "d_clients")]
    pub clients: u32,
    #[serde(default = "d_strategy")]
    pub stub_strategy: StubStrategy,
    #[serde(default = "d_delta")]
    pub rebalance_delta: f64,
    /// Defaults to a sixth of the burst interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub broadcast_period: Option<f64>,

    #[serde(default = "d_put_fraction")]
    pub put_fraction: f64,
    #[serde(default = "d_key_space")]
    pub key_space: u64,
    /// Seconds a put waits for its entry lock.
    #[serde(default = "d_one")]
    pub lock_timeout: f64,

    /// Lifecycle actions, e.g. `"crash 130 sentinel"`, `"remove 200 3"`,
    /// `"add 300"`. Times are absolute virtual seconds.
    #[serde(default)]
    pub script: Vec<String>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Uid(u64),
    Sentinel,
    /// Whatever the pool would pick for scale-down.
    Victim,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionKind {
    Crash(Target),
    Remove(Target),
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedAction {
    pub at: f64,
    pub kind: ActionKind,
}

impl FromStr for ScriptedAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let at = |p: &str| -> Result<f64, String> {
            p.parse::<f64>()
                .ok()
                .filter(|t| t.is_finite() && *t >= 0.0)
                .ok_or_else(|| format!("bad time {p:?} in action {s:?}"))
        };
        let target = |p: Option<&&str>, default: Target| -> Result<Target, String> {
            match p.copied() {
                None => Ok(default),
                Some("sentinel") => Ok(Target::Sentinel),
                Some("victim") => Ok(Target::Victim),
                Some(n) => n
                    .parse()
                    .map(Target::Uid)
                    .map_err(|_| format!("bad target {n:?} in action {s:?}")),
            }
        };
        match parts.as_slice() {
            ["crash", t, rest @ ..] if rest.len() <= 1 => Ok(ScriptedAction {
                at: at(t)?,
                kind: ActionKind::Crash(target(rest.first(), Target::Sentinel)?),
            }),
            ["remove", t, rest @ ..] if rest.len() <= 1 => Ok(ScriptedAction {
                at: at(t)?,
                kind: ActionKind::Remove(target(rest.first(), Target::Victim)?),
            }),
            ["add", t] => Ok(ScriptedAction {
                at: at(t)?,
                kind: ActionKind::Add,
            }),
            _ => Err(format!("unrecognized action {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Overprovision,
    CpuOnly,
    FineGrained,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::Overprovision, Baseline::CpuOnly, Baseline::FineGrained];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Overprovision => "overprovision",
            Baseline::CpuOnly => "cpu_only",
            Baseline::FineGrained => "fine_grained",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s.trim())
            .ok_or_else(|| format!("unknown baseline {s:?} (expected overprovision, cpu_only or fine_grained)"))
    }
}

/// Thresholds installed by the CPU/memory-only baseline when the scenario
/// does not set its own.
pub const CPU_ONLY_DEFAULTS: CoarseThresholds = CoarseThresholds {
    cpu_incr: Some(0.85),
    cpu_decr: Some(0.60),
    mem_incr: Some(0.70),
    mem_decr: None,
};

impl Scenario {
    pub fn new(seed: u64) -> Self {
        Scenario::parse(&format!("seed = {seed}")).expect("defaults are valid")
    }

    pub fn parse(text: &str) -> Result<Scenario, ConfigError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| ConfigError {
            line: e.span().map(|s| line_of_offset(text, s.start)),
            message: e.message().to_owned(),
        })?;
        scenario.validate().map_err(|(key, message)| ConfigError {
            line: line_of_key(text, key),
            message,
        })?;
        Ok(scenario)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Checks value ranges. On failure returns the offending key and a
    /// message.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let err = |k: &'static str, m: String| Err((k, m));
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.total_slices == 0 {
            return err("total_slices", "total_slices must be >= 1".into());
        }
        if !(self.spawn_delay.is_finite() && self.spawn_delay >= 0.0) {
            return err("spawn_delay", format!("spawn_delay must be >= 0, got {}", self.spawn_delay));
        }
        for (k, v) in [
            ("admin_high_watermark", self.admin_high_watermark),
            ("admin_low_watermark", self.admin_low_watermark),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(k, format!("{k} must lie in [0, 1], got {v}"));
            }
        }
        if self.admin_low_watermark > self.admin_high_watermark {
            return err("admin_low_watermark", "admin_low_watermark must not exceed admin_high_watermark".into());
        }
        if self.pool_name.is_empty() || self.pool_name.contains('$') {
            return err("pool_name", "pool_name must be non-empty and contain no '$'".into());
        }
        if self.min_size < 2 {
            return err(
                "min_size",
                format!("min_size must be >= 2 (a pool keeps at least two members), got {}", self.min_size),
            );
        }
        if self.max_size < self.min_size {
            return err("max_size", format!("max_size ({}) must be >= min_size ({})", self.max_size, self.min_size));
        }
        if !positive(self.burst_interval) {
            return err("burst_interval", "burst_interval must be positive".into());
        }
        if self.sub_interval.is_some_and(|s| !positive(s)) {
            return err("sub_interval", "sub_interval must be positive".into());
        }
        if self.broadcast_period.is_some_and(|s| !positive(s)) {
            return err("broadcast_period", "broadcast_period must be positive".into());
        }
        if self.policy == PolicyKind::Coarse && self.coarse_thresholds().is_empty() {
            return err("policy", "policy \"coarse\" needs at least one of cpu_incr, cpu_decr, mem_incr, mem_decr".into());
        }
        if self.decr_threshold > self.incr_threshold {
            return err("decr_threshold", "decr_threshold must not exceed incr_threshold".into());
        }
        self.pattern().validate().map_err(|m| {
            let key = ["point_a", "cycles", "jitter", "time_scale"]
                .into_iter()
                .find(|k| m.starts_with(k))
                .unwrap_or("workload");
            (key, m)
        })?;
        if !positive(self.qos_capacity) {
            return err("qos_capacity", "qos_capacity must be positive".into());
        }
        if self.clients == 0 {
            return err("clients", "clients must be >= 1".into());
        }
        if !(self.rebalance_delta.is_finite() && self.rebalance_delta >= 0.0) {
            return err("rebalance_delta", "rebalance_delta must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.put_fraction) {
            return err("put_fraction", "put_fraction must lie in [0, 1]".into());
        }
        if self.key_space == 0 {
            return err("key_space", "key_space must be >= 1".into());
        }
        if !positive(self.lock_timeout) {
            return err("lock_timeout", "lock_timeout must be positive".into());
        }
        for a in &self.script {
            a.parse::<ScriptedAction>().map_err(|m| ("script", m))?;
        }
        if self.policy == PolicyKind::Overprovision && self.overprovision_size() > self.total_slices {
            return err(
                "total_slices",
                format!(
                    "overprovisioning needs {} slices, cluster has {}",
                    self.overprovision_size(),
                    self.total_slices
                ),
            );
        }
        Ok(())
    }

    pub fn pattern(&self) -> WorkloadPattern {
        WorkloadPattern {
            kind: self.workload,
            point_a: self.point_a,
            cycles: self.cycles,
            jitter: self.jitter,
            time_scale: self.time_scale,
        }
    }

    pub fn coarse_thresholds(&self) -> CoarseThresholds {
        CoarseThresholds {
            cpu_incr: self.cpu_incr,
            cpu_decr: self.cpu_decr,
            mem_incr: self.mem_incr,
            mem_decr: self.mem_decr,
        }
    }

    /// Pool size that covers the peak rate.
    pub fn overprovision_size(&self) -> usize {
        (req_min(self.pattern().peak(), self.qos_capacity) as usize).max(self.min_size)
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            total_slices: self.total_slices as u32,
            spawn_delay: Duration::from_secs_f64(self.spawn_delay),
            admin_high_watermark: self.admin_high_watermark,
            admin_low_watermark: self.admin_low_watermark,
            ..ClusterConfig::default()
        }
    }

    pub fn pool_config(&self) -> PoolConfig {
        let (min, max, policy) = match self.policy {
            PolicyKind::ImplicitCpu => (
                self.min_size,
                self.max_size,
                ScalingPolicy::ImplicitCpu(ImplicitThresholds {
                    incr: self.incr_threshold,
                    decr: self.decr_threshold,
                }),
            ),
            PolicyKind::Coarse => (
                self.min_size,
                self.max_size,
                ScalingPolicy::CoarseThreshold(self.coarse_thresholds()),
            ),
            PolicyKind::FineGrained => (self.min_size, self.max_size, ScalingPolicy::FineGrained),
            PolicyKind::Overprovision => {
                let n = self.overprovision_size();
                (n, n, ScalingPolicy::default())
            }
        };
        PoolConfig {
            name: self.pool_name.clone(),
            min_size: min,
            max_size: max,
            burst_interval: Duration::from_secs_f64(self.burst_interval),
            policy,
            service_rate: self.qos_capacity,
        }
    }

    pub fn sub_interval(&self) -> f64 {
        self.sub_interval.unwrap_or(self.burst_interval)
    }

    pub fn broadcast_period(&self) -> f64 {
        self.broadcast_period.unwrap_or(self.burst_interval / 6.0)
    }

    pub fn actions(&self) -> Vec<ScriptedAction> {
        self.script
            .iter()
            .map(|a| a.parse().expect("validated"))
            .collect()
    }

    /// Copy of this scenario with the baseline's policy installed.
    pub fn for_baseline(&self, b: Baseline) -> Scenario {
        let mut s = self.clone();
        match b {
            Baseline::Overprovision => s.policy = PolicyKind::Overprovision,
            Baseline::CpuOnly => {
                s.policy = PolicyKind::Coarse;
                if s.coarse_thresholds().is_empty() {
                    let d = CPU_ONLY_DEFAULTS;
                    (s.cpu_incr, s.cpu_decr, s.mem_incr, s.mem_decr) = (d.cpu_incr, d.cpu_decr, d.mem_incr, d.mem_decr);
                }
            }
            Baseline::FineGrained => s.policy = PolicyKind::FineGrained,
        }
        s
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line on which `key` is assigned, if it appears in the text.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        l.trim_start()
            .strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}
