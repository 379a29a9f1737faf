//! Thresholds for every pipeline stage, loadable from a TOML file. Missing
//! keys fall back to the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::economics::PayoutModel;
use crate::similarity::Linkage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrawlSection {
    pub load_timeout_ms: u64,
    pub settle_extra_ms: u64,
    pub phase1_profile_ms: u64,
    pub phase2_profile_ms: u64,
    pub reported_cores: u32,
    pub parallel_sessions: usize,
}

impl Default for CrawlSection {
    fn default() -> Self {
        CrawlSection {
            load_timeout_ms: 30_000,
            settle_extra_ms: 3_000,
            phase1_profile_ms: 5_000,
            phase2_profile_ms: 30_000,
            reported_cores: 4,
            parallel_sessions: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase1Section {
    pub load_threshold_pct: f64,
    pub worker_threshold: u32,
}

impl Default for Phase1Section {
    fn default() -> Self {
        Phase1Section {
            load_threshold_pct: crate::profile::PHASE1_LOAD_THRESHOLD_PCT,
            worker_threshold: crate::profile::PHASE1_WORKER_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase2Section {
    pub load_threshold_pct: f64,
}

impl Default for Phase2Section {
    fn default() -> Self {
        Phase2Section {
            load_threshold_pct: crate::profile::PHASE2_LOAD_THRESHOLD_PCT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FingerprintSection {
    pub min_support_fraction: f64,
}

impl Default for FingerprintSection {
    fn default() -> Self {
        FingerprintSection {
            min_support_fraction: crate::fingerprint::DEFAULT_MIN_SUPPORT_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilaritySection {
    pub ngram: usize,
    pub cut_similarity: f64,
    pub linkage: Linkage,
}

impl Default for SimilaritySection {
    fn default() -> Self {
        SimilaritySection {
            ngram: crate::similarity::DEFAULT_NGRAM,
            cut_similarity: crate::similarity::DEFAULT_CUT_SIMILARITY,
            linkage: Linkage::Average,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub rank_bin_size: u32,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { rank_bin_size: 100_000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub crawl: CrawlSection,
    pub phase1: Phase1Section,
    pub phase2: Phase2Section,
    pub fingerprint: FingerprintSection,
    pub similarity: SimilaritySection,
    pub payout: PayoutModel,
    pub report: ReportSection,
}

impl Config {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.payout.validate()?;
        anyhow::ensure!(cfg.crawl.reported_cores >= 1, "crawl.reported_cores must be >= 1");
        anyhow::ensure!(cfg.crawl.parallel_sessions >= 1, "crawl.parallel_sessions must be >= 1");
        anyhow::ensure!(cfg.report.rank_bin_size >= 1, "report.rank_bin_size must be >= 1");
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(Config::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn partial_override() {
        let cfg = Config::from_toml("[phase2]\nload_threshold_pct = 20.0\n").unwrap();
        assert_eq!(cfg.phase2.load_threshold_pct, 20.0);
        assert_eq!(cfg.phase1.load_threshold_pct, 5.0);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(Config::from_toml("[phase2]\nthreshold = 1\n").is_err());
        assert!(Config::from_toml("[payout]\nxmr_usd = 0.0\nhash_rate_hps = 80.0\npayout_xmr_per_mhash = 1.0\n").is_err());
    }
}
