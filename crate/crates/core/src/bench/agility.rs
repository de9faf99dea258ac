use thiserror::Error;

/// Workers needed to serve `rate` requests/s at `per_worker` requests/s
/// each. A tiny tolerance keeps exact multiples from rounding up.
pub fn req_min(rate: f64, per_worker: f64) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    (rate / per_worker - 1e-9).ceil().max(0.0) as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgilitySample {
    pub index: usize,
    /// End of the sub-interval, seconds since the workload started.
    pub t: f64,
    /// Mean offered rate over the sub-interval.
    pub rate: f64,
    pub req_min: u64,
    pub cap_prov: u64,
    pub excess: u64,
    pub shortage: u64,
    pub pool_size: u64,
}

impl AgilitySample {
    pub fn new(index: usize, req_min: u64, cap_prov: u64) -> Self {
        Self {
            index,
            t: 0.0,
            rate: 0.0,
            req_min,
            cap_prov,
            excess: cap_prov.saturating_sub(req_min),
            shortage: req_min.saturating_sub(cap_prov),
            pool_size: cap_prov,
        }
    }

    /// Excess plus shortage: this sample's contribution to agility.
    pub fn deviation(&self) -> u64 {
        self.excess + self.shortage
    }
}

/// Relative weight of over- and under-provisioning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgilityWeights {
    pub excess: f64,
    pub shortage: f64,
}

impl Default for AgilityWeights {
    fn default() -> Self {
        Self {
            excess: 1.0,
            shortage: 1.0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AgilityError {
    #[error("agility needs at least one sample")]
    NoSamples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgilityReport {
    pub samples: Vec<AgilitySample>,
    pub excess_sum: u64,
    pub shortage_sum: u64,
    /// Agility is exactly `(excess_sum + shortage_sum) / n`.
    pub n: u64,
    pub agility: f64,
    /// Samples whose deviation is zero.
    pub zero_count: u64,
}

impl AgilityReport {
    pub fn numerator(&self) -> u64 {
        self.excess_sum + self.shortage_sum
    }

    pub fn zero_fraction(&self) -> f64 {
        self.zero_count as f64 / self.n as f64
    }
}

pub fn agility(samples: &[AgilitySample]) -> Result<AgilityReport, AgilityError> {
    if samples.is_empty() {
        return Err(AgilityError::NoSamples);
    }
    let excess_sum = samples.iter().map(|s| s.excess).sum::<u64>();
    let shortage_sum = samples.iter().map(|s| s.shortage).sum::<u64>();
    let n = samples.len() as u64;
    Ok(AgilityReport {
        samples: samples.to_vec(),
        excess_sum,
        shortage_sum,
        n,
        agility: (excess_sum + shortage_sum) as f64 / n as f64,
        zero_count: samples.iter().filter(|s| s.deviation() == 0).count() as u64,
    })
}

pub fn weighted_agility(samples: &[AgilitySample], w: AgilityWeights) -> Result<f64, AgilityError> {
    let r = agility(samples)?;
    Ok((w.excess * r.excess_sum as f64 + w.shortage * r.shortage_sum as f64) / r.n as f64)
}
