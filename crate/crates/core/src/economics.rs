//! Revenue estimation under a pool payout model, and throttle inference
//! from phase-2 load measurements.

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::MinerVerdict;
use crate::telemetry::VisitRecord;

pub const DEFAULT_HASH_RATE_HPS: f64 = 80.0;
pub const DEFAULT_PAYOUT_XMR_PER_MHASH: f64 = 0.00005749;
pub const DEFAULT_XMR_USD: f64 = 225.0;

pub const BUNDLED_CPU_TABLE: &str = include_str!("../data/cpus.csv");

#[derive(Debug, Error)]
pub enum EconomicsError {
    #[error("{0} must be strictly positive")]
    NonPositive(&'static str),
    #[error("{0} must be non-negative")]
    Negative(&'static str),
    #[error("throttle estimate needs an active verdict")]
    InactiveVerdict,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Table(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PayoutModel {
    pub hash_rate_hps: f64,
    pub payout_xmr_per_mhash: f64,
    pub xmr_usd: f64,
}

impl Default for PayoutModel {
    fn default() -> Self {
        PayoutModel {
            hash_rate_hps: DEFAULT_HASH_RATE_HPS,
            payout_xmr_per_mhash: DEFAULT_PAYOUT_XMR_PER_MHASH,
            xmr_usd: DEFAULT_XMR_USD,
        }
    }
}

impl PayoutModel {
    pub fn validate(&self) -> Result<(), EconomicsError> {
        for (name, v) in [
            ("hash_rate_hps", self.hash_rate_hps),
            ("payout_xmr_per_mhash", self.payout_xmr_per_mhash),
            ("xmr_usd", self.xmr_usd),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EconomicsError::NonPositive(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitStats {
    pub site: String,
    pub visits_per_day: f64,
    pub avg_duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevenueEstimate {
    pub core_hours_per_day: f64,
    pub hashes_per_day: f64,
    pub xmr_per_day: f64,
    pub usd_per_day: f64,
}

impl RevenueEstimate {
    /// XMR to one decimal, USD to an integer, as in published tables.
    pub fn display(&self) -> (String, String) {
        (format!("{:.1}", self.xmr_per_day), format!("{:.0}", self.usd_per_day))
    }
}

fn from_core_hours(core_hours: f64, model: &PayoutModel) -> RevenueEstimate {
    let hashes = core_hours * 3600.0 * model.hash_rate_hps;
    let xmr = hashes / 1e6 * model.payout_xmr_per_mhash;
    RevenueEstimate {
        core_hours_per_day: core_hours,
        hashes_per_day: hashes,
        xmr_per_day: xmr,
        usd_per_day: xmr * model.xmr_usd,
    }
}

/// Daily revenue of one site: every visitor-second mines at the model's
/// whole-CPU hash rate.
pub fn estimate_revenue(stats: &VisitStats, model: &PayoutModel) -> Result<RevenueEstimate, EconomicsError> {
    model.validate()?;
    if !(stats.visits_per_day >= 0.0) {
        return Err(EconomicsError::Negative("visits_per_day"));
    }
    if !(stats.avg_duration_s >= 0.0) {
        return Err(EconomicsError::Negative("avg_duration_s"));
    }
    Ok(from_core_hours(stats.visits_per_day * stats.avg_duration_s / 3600.0, model))
}

/// Platform-wide upper bound from total visitor hours per day.
pub fn upper_bound(total_visitor_hours_per_day: f64, model: &PayoutModel) -> Result<RevenueEstimate, EconomicsError> {
    model.validate()?;
    if !(total_visitor_hours_per_day > 0.0) {
        return Err(EconomicsError::NonPositive("total_visitor_hours_per_day"));
    }
    Ok(from_core_hours(total_visitor_hours_per_day, model))
}

/// Reads `site,visits_per_day,avg_duration_s`.
pub fn read_visit_stats<R: Read>(reader: R) -> Result<Vec<VisitStats>, EconomicsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let rows: Result<Vec<VisitStats>, _> = rdr.deserialize().collect();
    Ok(rows?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpuBench {
    pub model: String,
    pub cache_mb: f64,
    pub hps_core: f64,
    pub hps_cpu: f64,
}

/// Reads a benchmark table with columns `model,cache_mb,hps_core,hps_cpu`.
pub fn read_cpu_table<R: Read>(reader: R) -> Result<Vec<CpuBench>, EconomicsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    for row in rdr.deserialize() {
        let row: CpuBench = row?;
        if row.hps_cpu < row.hps_core {
            return Err(EconomicsError::Table(format!("{}: hps_cpu < hps_core", row.model)));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn bundled_cpu_table() -> Vec<CpuBench> {
    read_cpu_table(BUNDLED_CPU_TABLE.as_bytes()).expect("bundled table parses")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThrottleEstimate {
    /// Percent of the whole machine used by the top function.
    pub cpu_consumption_pct: f64,
    pub throttle_est: f64,
    pub oversubscribed: bool,
}

pub fn estimate_throttle(record: &VisitRecord, verdict: &MinerVerdict) -> Result<ThrottleEstimate, EconomicsError> {
    let top = match (verdict.active, &verdict.top) {
        (true, Some(top)) => top,
        _ => return Err(EconomicsError::InactiveVerdict),
    };
    let consumption = top.load_pct / f64::from(record.reported_cores.max(1));
    Ok(ThrottleEstimate {
        cpu_consumption_pct: consumption,
        throttle_est: 1.0 - (consumption / 100.0).clamp(0.0, 1.0),
        oversubscribed: record.worker_count > record.reported_cores,
    })
}

/// Ten 10-point bins `[0,10) .. [90,100]` plus a bucket for consumption above 100 %.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GreedinessHistogram {
    pub bins: [usize; 10],
    pub over_100: usize,
}

/// Decile of a consumption value, or `None` above 100 %.
///
/// The value is rounded to 0.1 points first; finer differences are below
/// what a sampling profiler resolves.
pub fn greediness_bin(pct: f64) -> Option<usize> {
    let pct = (pct * 10.0).round() / 10.0;
    if pct > 100.0 {
        return None;
    }
    Some(((pct.max(0.0) / 10.0).floor() as usize).min(9))
}

pub fn greediness_histogram(estimates: &[ThrottleEstimate]) -> GreedinessHistogram {
    let mut h = GreedinessHistogram::default();
    for e in estimates {
        match greediness_bin(e.cpu_consumption_pct) {
            Some(b) => h.bins[b] += 1,
            None => h.over_100 += 1,
        }
    }
    h
}
