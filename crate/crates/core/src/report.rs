//! Three-phase pipeline orchestration and distribution tables over the
//! detected sites.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::fingerprint::{self, Fingerprint, FingerprintError};
use crate::profile::{self, MinerVerdict};
use crate::telemetry::VisitRecord;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub suspicious: BTreeSet<String>,
    pub active: BTreeSet<String>,
    pub total: BTreeSet<String>,
    /// Suspicious sites with no usable phase-2 record.
    pub missing_phase2: BTreeSet<String>,
    pub fingerprints: Vec<Fingerprint>,
}

impl PipelineResult {
    pub fn summary(&self) -> String {
        format!(
            "suspicious={} active={} total={} missing_phase2={} fingerprints={}",
            self.suspicious.len(),
            self.active.len(),
            self.total.len(),
            self.missing_phase2.len(),
            self.fingerprints.len()
        )
    }
}

/// Phase 1 over `corpus1`, phase 2 over `corpus2`, then fingerprints from
/// the active miners applied to every record of both corpora.
///
/// A phase-2 record counts only if its site was flagged in phase 1 or has
/// no phase-1 record at all.
pub fn run_pipeline(corpus1: &[VisitRecord], corpus2: &[VisitRecord], cfg: &Config) -> PipelineResult {
    let suspicious: BTreeSet<String> = corpus1
        .par_iter()
        .filter(|r| profile::phase1_flags(r, cfg.phase1.load_threshold_pct, cfg.phase1.worker_threshold).candidate())
        .map(|r| r.site.clone())
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    let phase1_sites: BTreeSet<&str> = corpus1.iter().map(|r| r.site.as_str()).collect();

    let eligible: Vec<&VisitRecord> = corpus2
        .iter()
        .filter(|r| suspicious.contains(&r.site) || !phase1_sites.contains(r.site.as_str()))
        .collect();
    let verdicts: Vec<(VisitRecord, MinerVerdict)> = eligible
        .par_iter()
        .filter_map(|r| match profile::phase2_verdict(r, cfg.phase2.load_threshold_pct) {
            Ok(v) => Some(((*r).clone(), v)),
            Err(e) => {
                tracing::warn!(site = %r.site, "{e}");
                None
            }
        })
        .collect();

    let judged: BTreeSet<&str> = verdicts.iter().map(|(r, _)| r.site.as_str()).collect();
    let missing_phase2: BTreeSet<String> = suspicious
        .iter()
        .filter(|s| !judged.contains(s.as_str()))
        .cloned()
        .collect();
    for site in &missing_phase2 {
        tracing::warn!(%site, "no phase-2 record; site stays suspicious only");
    }

    let active: BTreeSet<String> = verdicts
        .iter()
        .filter(|(_, v)| v.active)
        .map(|(r, _)| r.site.clone())
        .collect();

    let fingerprints = match fingerprint::build_fingerprints(&verdicts, cfg.fingerprint.min_support_fraction) {
        Ok(p) => p,
        Err(FingerprintError::NoMiners) => Vec::new(),
        Err(e) => {
            tracing::warn!("{e}");
            Vec::new()
        }
    };
    let everything: Vec<VisitRecord> = corpus1.iter().chain(corpus2).cloned().collect();
    let total = fingerprint::apply_fingerprints(&everything, &fingerprints, &active);

    PipelineResult {
        suspicious,
        active,
        total,
        missing_phase2,
        fingerprints,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankHistogram {
    pub bin_size: u32,
    /// Bin `k` (from 1) covers ranks `((k-1)*bin, k*bin]`.
    pub bins: BTreeMap<u32, usize>,
    pub unranked: usize,
}

/// Ranks are taken from the first record of each site.
pub fn rank_histogram(sites: &BTreeSet<String>, records: &[VisitRecord], bin_size: u32) -> RankHistogram {
    let bin_size = bin_size.max(1);
    let mut ranks: HashMap<&str, Option<u32>> = HashMap::new();
    for r in records {
        ranks.entry(r.site.as_str()).or_insert(r.rank);
    }
    let mut h = RankHistogram {
        bin_size,
        ..Default::default()
    };
    for site in sites {
        match ranks.get(site.as_str()).copied().flatten() {
            Some(rank) if rank >= 1 => *h.bins.entry((rank - 1) / bin_size + 1).or_insert(0) += 1,
            _ => h.unranked += 1,
        }
    }
    h
}

pub fn write_rank_csv<W: Write>(w: W, h: &RankHistogram) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin", "rank_from", "rank_to", "count"])?;
    for (&k, &n) in &h.bins {
        let from = u64::from(k - 1) * u64::from(h.bin_size) + 1;
        let to = u64::from(k) * u64::from(h.bin_size);
        out.write_record([k.to_string(), from.to_string(), to.to_string(), n.to_string()])?;
    }
    out.write_record(["unranked", "", "", &h.unranked.to_string()])?;
    out.flush()?;
    Ok(())
}

/// Site → values, e.g. country (one value) or categories (several).
pub type Enrichment = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnrichmentTables {
    pub geo: Enrichment,
    pub categories: Enrichment,
}

impl EnrichmentTables {
    /// Enriched sites that do not occur in the corpus.
    pub fn unknown_sites(&self, corpus: &[VisitRecord]) -> BTreeSet<String> {
        let known: BTreeSet<&str> = corpus.iter().map(|r| r.site.as_str()).collect();
        let unknown: BTreeSet<String> = self
            .geo
            .keys()
            .chain(self.categories.keys())
            .filter(|s| !known.contains(s.as_str()))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            tracing::warn!(count = unknown.len(), "enrichment references sites missing from the corpus");
        }
        unknown
    }
}

/// Two-column CSV `site,value`. A site may repeat, and a value may list
/// several entries separated by `;`.
pub fn read_enrichment<R: Read>(reader: R) -> csv::Result<Enrichment> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Enrichment::new();
    for row in rdr.records() {
        let row = row?;
        let (Some(site), Some(value)) = (row.get(0), row.get(1)) else {
            continue;
        };
        let entry = out.entry(site.to_owned()).or_default();
        for v in value.split(';').map(str::trim).filter(|v| !v.is_empty()) {
            if !entry.iter().any(|e| e == v) {
                entry.push(v.to_owned());
            }
        }
    }
    Ok(out)
}

/// Counts per value over `sites`, count descending then value ascending.
/// A site with several values counts once for each.
pub fn tabulate(table: &Enrichment, sites: &BTreeSet<String>) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for site in sites {
        if let Some(values) = table.get(site) {
            let distinct: BTreeSet<&str> = values.iter().map(String::as_str).collect();
            for v in distinct {
                *counts.entry(v).or_insert(0) += 1;
            }
        }
    }
    let mut rows: Vec<(String, usize)> = counts.into_iter().map(|(k, v)| (k.to_owned(), v)).collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    rows
}

pub fn write_table_csv<W: Write>(w: W, header: &str, rows: &[(String, usize)]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([header, "count"])?;
    for (k, n) in rows {
        out.write_record([k.as_str(), &n.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
