//! Piecewise-linear request-rate schedules and an open-loop arrival process.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    /// Gradual rise and fall followed by sharp steps.
    Abrupt,
    /// The same rise/hold/fall/hold shape repeated `cycles` times.
    Cyclic,
}

/// One linear piece of a schedule: the rate moves from `from` to `to`
/// over `[start, end)` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub from: f64,
    pub to: f64,
}

impl Segment {
    pub fn rate_at(&self, t: f64) -> f64 {
        if self.end <= self.start {
            return self.to;
        }
        self.from + (self.to - self.from) * (t - self.start) / (self.end - self.start)
    }
}

// (start min, end min, from %, to %) of the reference rate.
const ABRUPT: [(u32, u32, u32, u32); 10] = [
    (0, 20, 20, 20),
    (20, 60, 20, 100),
    (60, 80, 100, 100),
    (80, 120, 100, 20),
    (120, 140, 20, 20),
    (140, 170, 100, 100),
    (170, 190, 20, 20),
    (190, 210, 60, 60),
    (210, 230, 100, 100),
    (230, 240, 20, 20),
];

// one cycle, as % of point A; the high level is point B = 120 %
const CYCLE: [(u32, u32, u32, u32); 4] = [(0, 20, 36, 120), (20, 30, 120, 120), (30, 50, 120, 36), (50, 60, 36, 36)];
const CYCLE_MINUTES: u32 = 60;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadPattern {
    pub kind: WorkloadKind,
    /// Reference rate in requests per second.
    pub point_a: f64,
    pub cycles: u32,
    /// Relative amplitude of seeded per-second noise; 0 disables it.
    pub jitter: f64,
    /// Stretches the schedule in time; 1 is the reference length.
    pub time_scale: f64,
}

impl WorkloadPattern {
    pub fn abrupt(point_a: f64) -> Self {
        Self {
            kind: WorkloadKind::Abrupt,
            point_a,
            cycles: 1,
            jitter: 0.0,
            time_scale: 1.0,
        }
    }

    pub fn cyclic(point_a: f64, cycles: u32) -> Self {
        Self {
            kind: WorkloadKind::Cyclic,
            point_a,
            cycles,
            jitter: 0.0,
            time_scale: 1.0,
        }
    }

    pub fn point_b(&self) -> f64 {
        self.point_a * (120.0 / 100.0)
    }

    /// Highest scheduled rate.
    pub fn peak(&self) -> f64 {
        match self.kind {
            WorkloadKind::Abrupt => self.point_a,
            WorkloadKind::Cyclic => self.point_b(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.point_a.is_finite() && self.point_a > 0.0) {
            return Err(format!("point_a must be positive, got {}", self.point_a));
        }
        if self.kind == WorkloadKind::Cyclic && self.cycles == 0 {
            return Err("cycles must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(format!("jitter must lie in [0, 1), got {}", self.jitter));
        }
        if !(self.time_scale.is_finite() && self.time_scale >= 0.0) {
            return Err(format!("time_scale must be >= 0, got {}", self.time_scale));
        }
        Ok(())
    }

    pub fn segments(&self) -> Vec<Segment> {
        let minute = 60.0 * self.time_scale;
        let seg = |offset: u32, (s, e, f, t): (u32, u32, u32, u32)| Segment {
            start: (offset + s) as f64 * minute,
            end: (offset + e) as f64 * minute,
            from: self.point_a * (f as f64 / 100.0),
            to: self.point_a * (t as f64 / 100.0),
        };
        match self.kind {
            WorkloadKind::Abrupt => ABRUPT.iter().map(|&p| seg(0, p)).collect(),
            WorkloadKind::Cyclic => (0..self.cycles)
                .flat_map(|c| CYCLE.iter().map(move |&p| (c * CYCLE_MINUTES, p)))
                .map(|(off, p)| seg(off, p))
                .collect(),
        }
    }

    /// Whole seconds covered by the schedule.
    pub fn duration_secs(&self) -> u64 {
        self.segments().last().map_or(0, |s| s.end.round() as u64)
    }

    /// Scheduled rate at `t` seconds; 0 outside the schedule.
    pub fn rate_at(&self, t: f64) -> f64 {
        self.segments()
            .iter()
            .find(|s| s.start <= t && t < s.end)
            .map_or(0.0, |s| s.rate_at(t))
    }

    /// Start and end of every hold at the peak rate, in seconds.
    pub fn peak_plateaus(&self) -> Vec<(f64, f64)> {
        let peak = self.peak();
        self.segments()
            .iter()
            .filter(|s| s.from == peak && s.to == peak)
            .map(|s| (s.start, s.end))
            .collect()
    }
}

/// Per-second rates: entry `i` is the rate over `[i, i + 1)`. Deterministic
/// per seed; with jitter the noise is clamped to `[0, peak]`.
pub fn generate_workload(pattern: &WorkloadPattern, seed: u64) -> Vec<f64> {
    let segments = pattern.segments();
    let n = pattern.duration_secs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let peak = pattern.peak();
    let mut seg = 0;
    (0..n)
        .map(|i| {
            let t = i as f64;
            while seg + 1 < segments.len() && t >= segments[seg].end {
                seg += 1;
            }
            let base = segments[seg].rate_at(t);
            if pattern.jitter > 0.0 {
                let u: f64 = rng.gen_range(-1.0..1.0);
                (base * (1.0 + pattern.jitter * u)).clamp(0.0, peak)
            } else {
                base
            }
        })
        .collect()
}

/// Mean of the per-second rates over `[start, start + len)` seconds.
pub fn mean_rate(rates: &[f64], start: usize, len: usize) -> f64 {
    if len == 0 {
        return 0.0;
    }
    let end = (start + len).min(rates.len());
    let sum: f64 = rates.get(start..end).map_or(0.0, |r| r.iter().sum());
    sum / len as f64
}

/// Arrival instants (seconds) with deterministic spacing: the k-th request
/// arrives when the integrated rate reaches k. Any window whose integrated
/// rate is a whole number therefore sees exactly that many arrivals.
#[derive(Debug, Clone)]
pub struct ArrivalTimes {
    rates: Vec<f64>,
    sec: usize,
    integrated: f64,
    next: f64,
}

impl ArrivalTimes {
    pub fn new(rates: Vec<f64>) -> Self {
        Self {
            rates,
            sec: 0,
            integrated: 0.0,
            next: 0.0,
        }
    }
}

impl Iterator for ArrivalTimes {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        while let Some(&r) = self.rates.get(self.sec) {
            if r > 0.0 && self.next < self.integrated + r {
                let t = self.sec as f64 + (self.next - self.integrated) / r;
                self.next += 1.0;
                return Some(t);
            }
            self.integrated += r;
            self.sec += 1;
        }
        None
    }
}
