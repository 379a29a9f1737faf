//! Static indicators generalized from confirmed miners (script URL, script
//! hash, Wasm code-base hash) and their application to a whole corpus.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::MinerVerdict;
use crate::telemetry::VisitRecord;
use crate::wasm;

pub const DEFAULT_MIN_SUPPORT_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum FingerprintError {
    #[error("no confirmed miners to build fingerprints from")]
    NoMiners,
    #[error("min_support_fraction must be in [0, 1], got {0}")]
    Fraction(f64),
    #[error("fingerprint file line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    ScriptUrl,
    ScriptHash,
    WasmCodebaseHash,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Feature {
    pub kind: FeatureKind,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub kind: FeatureKind,
    pub value: String,
    /// Number of distinct confirmed-miner sites exhibiting the feature.
    pub support: usize,
}

/// `https://host/path?q#frag` → `//host/path?q`. Returns `None` for inline
/// scripts and strings that are not absolute URLs.
pub fn strip_scheme(url: &str) -> Option<String> {
    let (scheme, rest) = url.split_once("://")?;
    if scheme.is_empty() || !scheme.chars().all(|c| c.is_ascii_alphanumeric() || "+-.".contains(c)) {
        return None;
    }
    let rest = rest.split('#').next().unwrap_or(rest);
    if rest.is_empty() {
        return None;
    }
    Some(format!("//{rest}"))
}

/// Features of one confirmed miner. Inactive verdicts yield nothing.
pub fn extract_features(record: &VisitRecord, verdict: &MinerVerdict) -> BTreeSet<Feature> {
    let mut out = BTreeSet::new();
    if !verdict.active {
        return out;
    }
    if let Some(script) = verdict.top.as_ref().and_then(|t| record.script(&t.script_id)) {
        if let Some(url) = strip_scheme(&script.url) {
            out.insert(Feature {
                kind: FeatureKind::ScriptUrl,
                value: url,
            });
        }
        out.insert(Feature {
            kind: FeatureKind::ScriptHash,
            value: script.source_hash.to_hex(),
        });
    }
    if let Ok(digest) = wasm::codebase_hash(&record.wasm_modules) {
        out.insert(Feature {
            kind: FeatureKind::WasmCodebaseHash,
            value: digest.to_hex(),
        });
    }
    out
}

/// Support threshold for `n` miners: `ceil(fraction * n)`, at least 1.
pub fn support_threshold(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    // absorb float noise such as 0.07 * 100 = 7.000000000000001
    ((raw - 1e-9).ceil() as usize).max(1)
}

/// Keeps features seen on at least `ceil(fraction * sites)` distinct
/// confirmed sites. Output is sorted by kind, support (desc) and value.
pub fn build_fingerprints(
    miners: &[(VisitRecord, MinerVerdict)],
    min_support_fraction: f64,
) -> Result<Vec<Fingerprint>, FingerprintError> {
    if !(0.0..=1.0).contains(&min_support_fraction) {
        return Err(FingerprintError::Fraction(min_support_fraction));
    }
    let mut sites = BTreeSet::new();
    let mut support: BTreeMap<Feature, BTreeSet<&str>> = BTreeMap::new();
    for (record, verdict) in miners.iter().filter(|(_, v)| v.active) {
        sites.insert(record.site.as_str());
        for feature in extract_features(record, verdict) {
            support.entry(feature).or_default().insert(record.site.as_str());
        }
    }
    if sites.is_empty() {
        return Err(FingerprintError::NoMiners);
    }
    let threshold = support_threshold(min_support_fraction, sites.len());
    let mut prints: Vec<Fingerprint> = support
        .into_iter()
        .filter(|(_, s)| s.len() >= threshold)
        .map(|(f, s)| Fingerprint {
            kind: f.kind,
            value: f.value,
            support: s.len(),
        })
        .collect();
    prints.sort_by(|a, b| {
        a.kind
            .cmp(&b.kind)
            .then(b.support.cmp(&a.support))
            .then_with(|| a.value.cmp(&b.value))
    });
    Ok(prints)
}

/// Read-only lookup built once from a fingerprint list.
#[derive(Debug, Default)]
pub struct FingerprintIndex {
    urls: HashSet<String>,
    script_hashes: HashSet<String>,
    wasm_hashes: HashSet<String>,
}

impl FingerprintIndex {
    pub fn new(prints: &[Fingerprint]) -> Self {
        let mut idx = FingerprintIndex::default();
        for p in prints {
            let set = match p.kind {
                FeatureKind::ScriptUrl => &mut idx.urls,
                FeatureKind::ScriptHash => &mut idx.script_hashes,
                FeatureKind::WasmCodebaseHash => &mut idx.wasm_hashes,
            };
            set.insert(p.value.clone());
        }
        idx
    }

    pub fn is_empty(&self) -> bool {
        self.urls.is_empty() && self.script_hashes.is_empty() && self.wasm_hashes.is_empty()
    }

    /// Exact match on the scheme-stripped URL; no suffix or filename generalization.
    pub fn matches(&self, record: &VisitRecord) -> bool {
        if self.is_empty() {
            return false;
        }
        let script_hit = record.scripts.iter().any(|s| {
            self.script_hashes.contains(&s.source_hash.to_hex())
                || strip_scheme(&s.url).is_some_and(|u| self.urls.contains(&u))
        });
        script_hit
            || (!self.wasm_hashes.is_empty()
                && wasm::codebase_hash(&record.wasm_modules)
                    .is_ok_and(|d| self.wasm_hashes.contains(&d.to_hex())))
    }
}

/// Sites matching any fingerprint, united with the confirmed set.
pub fn apply_fingerprints(
    corpus: &[VisitRecord],
    prints: &[Fingerprint],
    confirmed: &BTreeSet<String>,
) -> BTreeSet<String> {
    let index = FingerprintIndex::new(prints);
    let matched: Vec<&str> = corpus
        .par_iter()
        .filter(|r| index.matches(r))
        .map(|r| r.site.as_str())
        .collect();
    let mut out = confirmed.clone();
    out.extend(matched.into_iter().map(str::to_owned));
    out
}

pub fn write_fingerprints<W: Write>(mut w: W, prints: &[Fingerprint]) -> Result<(), FingerprintError> {
    for p in prints {
        serde_json::to_writer(&mut w, p).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fingerprints<R: BufRead>(r: R) -> Result<Vec<Fingerprint>, FingerprintError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| FingerprintError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}
