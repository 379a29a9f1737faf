//! Mining identities in WebSocket traffic: CryptoNote wallet addresses
//! (validated by checksum), pool site-keys and pool hostnames.

pub mod base58;
pub mod keccak;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use base58::Base58Error;
pub use keccak::keccak256;

use crate::telemetry::{VisitRecord, WsFrame};

pub const CHECKSUM_LEN: usize = 4;
/// Length window for base58 runs considered as wallet candidates.
pub const WALLET_LEN_MIN: usize = 90;
pub const WALLET_LEN_MAX: usize = 110;
/// Site-keys shorter than this are treated as placeholders.
pub const SITEKEY_MIN_LEN: usize = 8;
const SITEKEY_STOPLIST: &[&str] = &[
    "undefined",
    "null",
    "sitekey",
    "site_key",
    "yoursitekey",
    "your_site_key",
    "your-site-key",
    "public_site_key",
    "anonymous",
];

const SITEKEY_FIELDS: &[&str] = &["site_key", "sitekey", "siteKey", "key"];
const SITEKEY_URL_PARAMS: &[&str] = &["site_key", "sitekey", "key"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Currency {
    XMR,
    ETN,
    BCN,
    ITNS,
    GRF,
    #[serde(rename = "unknown")]
    Unknown,
}

impl fmt::Display for Currency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Currency::XMR => "XMR",
            Currency::ETN => "ETN",
            Currency::BCN => "BCN",
            Currency::ITNS => "ITNS",
            Currency::GRF => "GRF",
            Currency::Unknown => "unknown",
        };
        f.write_str(s)
    }
}

impl FromStr for Currency {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "XMR" => Currency::XMR,
            "ETN" => Currency::ETN,
            "BCN" => Currency::BCN,
            "ITNS" => Currency::ITNS,
            "GRF" => Currency::GRF,
            "UNKNOWN" => Currency::Unknown,
            other => return Err(format!("unknown currency {other:?}")),
        })
    }
}

#[derive(Debug, Error)]
pub enum PrefixTableError {
    #[error("line {0}: expected `prefix_hex = currency`")]
    Syntax(usize),
    #[error("line {0}: bad prefix hex")]
    Hex(usize),
    #[error("line {0}: {1}")]
    Currency(usize, String),
}

/// Maps the network-prefix varint bytes (as hex) at the front of a decoded
/// address to a currency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixTable {
    entries: BTreeMap<Vec<u8>, Currency>,
}

pub const DEFAULT_PREFIX_TABLE: &str = include_str!("../../data/prefixes.conf");

impl Default for PrefixTable {
    fn default() -> Self {
        PrefixTable::parse(DEFAULT_PREFIX_TABLE).expect("bundled prefix table parses")
    }
}

impl PrefixTable {
    pub fn parse(text: &str) -> Result<Self, PrefixTableError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (prefix, currency) = line.split_once('=').ok_or(PrefixTableError::Syntax(i + 1))?;
            let prefix = hex::decode(prefix.trim()).map_err(|_| PrefixTableError::Hex(i + 1))?;
            let currency = currency.parse().map_err(|e| PrefixTableError::Currency(i + 1, e))?;
            entries.insert(prefix, currency);
        }
        Ok(PrefixTable { entries })
    }

    /// Never fails: unrecognised prefixes are `Unknown`.
    pub fn classify(&self, payload: &[u8]) -> Currency {
        let Ok((_, used)) = crate::wasm::decode_leb128(payload, false) else {
            return Currency::Unknown;
        };
        self.entries
            .get(&payload[..used])
            .copied()
            .unwrap_or(Currency::Unknown)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WalletAddress {
    pub currency: Currency,
    pub text: String,
    #[serde(skip)]
    pub payload: Vec<u8>,
    pub checksum_ok: bool,
}

/// Last four payload bytes against Keccak-256 of everything before them.
pub fn checksum_ok(payload: &[u8]) -> bool {
    if payload.len() <= CHECKSUM_LEN {
        return false;
    }
    let (body, check) = payload.split_at(payload.len() - CHECKSUM_LEN);
    keccak256(body)[..CHECKSUM_LEN] == *check
}

/// Block-wise CryptoNote base58 decoding.
pub fn decode_monero_base58(text: &str) -> Result<Vec<u8>, Base58Error> {
    base58::decode(text)
}

pub fn encode_monero_base58(payload: &[u8]) -> String {
    base58::encode(payload)
}

/// Appends the Keccak checksum and encodes; the inverse of a valid parse.
pub fn encode_address(body: &[u8]) -> String {
    let mut payload = body.to_vec();
    payload.extend_from_slice(&keccak256(body)[..CHECKSUM_LEN]);
    base58::encode(&payload)
}

impl WalletAddress {
    pub fn parse(text: &str, prefixes: &PrefixTable) -> Result<Self, Base58Error> {
        let payload = base58::decode(text)?;
        Ok(WalletAddress {
            currency: prefixes.classify(&payload),
            text: text.to_owned(),
            checksum_ok: checksum_ok(&payload),
            payload,
        })
    }
}

pub fn is_nondescript_sitekey(key: &str) -> bool {
    let key = key.trim();
    key.chars().count() < SITEKEY_MIN_LEN
        || SITEKEY_STOPLIST.iter().any(|s| s.eq_ignore_ascii_case(key))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanResult {
    pub wallets: Vec<WalletAddress>,
    pub sitekeys: Vec<String>,
    pub pools: Vec<String>,
}

#[derive(Default)]
struct Collect {
    wallets: BTreeSet<WalletAddress>,
    sitekeys: BTreeSet<String>,
    pools: BTreeSet<String>,
}

impl Collect {
    fn finish(self) -> ScanResult {
        ScanResult {
            wallets: self.wallets.into_iter().collect(),
            sitekeys: self.sitekeys.into_iter().collect(),
            pools: self.pools.into_iter().collect(),
        }
    }

    fn sitekey(&mut self, key: &str) {
        if !is_nondescript_sitekey(key) {
            self.sitekeys.insert(key.trim().to_owned());
        }
    }

    fn url(&mut self, raw: &str, as_pool: bool) {
        let Ok(url) = url::Url::parse(raw) else { return };
        if as_pool {
            if let Some(host) = url.host_str() {
                self.pools.insert(host.to_ascii_lowercase());
            }
        }
        for (k, v) in url.query_pairs() {
            if SITEKEY_URL_PARAMS.contains(&k.as_ref()) {
                self.sitekey(&v);
            }
        }
    }

    fn text(&mut self, text: &str, prefixes: &PrefixTable) {
        for run in text.split(|c: char| !base58::is_base58_char(c)) {
            if !(WALLET_LEN_MIN..=WALLET_LEN_MAX).contains(&run.len()) {
                continue;
            }
            if let Ok(w) = WalletAddress::parse(run, prefixes) {
                if w.checksum_ok {
                    self.wallets.insert(w);
                }
            }
        }
        if let Ok(json) = serde_json::from_str::<Value>(text) {
            self.json(&json, false);
        }
    }

    fn json(&mut self, value: &Value, in_auth: bool) {
        match value {
            Value::Object(map) => {
                let is_auth = in_auth
                    || map.get("type").and_then(Value::as_str) == Some("auth")
                    || map.get("identifier").and_then(Value::as_str) == Some("handshake");
                for (k, v) in map {
                    match (k.as_str(), v) {
                        ("pool", Value::String(p)) => {
                            let host = p.split([':', '/']).next().unwrap_or(p);
                            if !host.is_empty() {
                                self.pools.insert(host.to_ascii_lowercase());
                            }
                        }
                        (field, Value::String(s)) if is_auth && SITEKEY_FIELDS.contains(&field) => {
                            self.sitekey(s)
                        }
                        _ => self.json(v, is_auth),
                    }
                }
            }
            Value::Array(items) => items.iter().for_each(|v| self.json(v, in_auth)),
            _ => {}
        }
    }
}

/// Scans WebSocket frames for wallets, site-keys and pool hostnames.
/// Outputs are sorted and deduplicated, so frame order does not matter.
pub fn scan_frames(frames: &[WsFrame], prefixes: &PrefixTable) -> ScanResult {
    let mut c = Collect::default();
    for frame in frames {
        c.url(&frame.endpoint, true);
        if let Some(text) = frame.payload.as_text() {
            c.text(text, prefixes);
        }
    }
    c.finish()
}

/// Like [`scan_frames`], additionally reading site-key URL parameters of the
/// visit's scripts.
pub fn scan_visit(record: &VisitRecord, prefixes: &PrefixTable) -> ScanResult {
    let mut c = Collect::default();
    for frame in &record.ws_frames {
        c.url(&frame.endpoint, true);
        if let Some(text) = frame.payload.as_text() {
            c.text(text, prefixes);
        }
    }
    for script in &record.scripts {
        c.url(&script.url, false);
    }
    c.finish()
}

/// Bipartite site/identity graph.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IdentityGraph {
    pub sites: BTreeMap<String, BTreeSet<String>>,
    pub identities: BTreeMap<String, BTreeSet<String>>,
}

impl IdentityGraph {
    pub fn edge_count(&self) -> usize {
        self.sites.values().map(BTreeSet::len).sum()
    }

    pub fn site_degree(&self, site: &str) -> usize {
        self.sites.get(site).map_or(0, BTreeSet::len)
    }

    /// Sites that connect two or more identities.
    pub fn bridging_sites(&self) -> Vec<&str> {
        self.sites
            .iter()
            .filter(|(_, ids)| ids.len() >= 2)
            .map(|(s, _)| s.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CountBin {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

pub const IDENTITY_BIN_WIDTH: usize = 5;

/// Deduplicated graph plus the histogram of sites per identity; bin `k`
/// covers `[5k+1, 5k+5]`, up to the bin holding the largest identity.
pub fn group_by_identity<S: AsRef<str>, I: AsRef<str>>(
    observations: &[(S, I)],
) -> (IdentityGraph, Vec<CountBin>) {
    let mut g = IdentityGraph::default();
    for (site, id) in observations {
        let (site, id) = (site.as_ref().to_owned(), id.as_ref().to_owned());
        g.sites.entry(site.clone()).or_default().insert(id.clone());
        g.identities.entry(id).or_default().insert(site);
    }
    let max = g.identities.values().map(BTreeSet::len).max().unwrap_or(0);
    let nbins = max.div_ceil(IDENTITY_BIN_WIDTH);
    let mut bins: Vec<CountBin> = (0..nbins)
        .map(|k| CountBin {
            lo: IDENTITY_BIN_WIDTH * k + 1,
            hi: IDENTITY_BIN_WIDTH * (k + 1),
            count: 0,
        })
        .collect();
    for sites in g.identities.values() {
        bins[(sites.len() - 1) / IDENTITY_BIN_WIDTH].count += 1;
    }
    (g, bins)
}
