//! Visit telemetry data model and the line-delimited archive codec.
//!
//! One [`VisitRecord`] is the complete observation of a single page visit:
//! parsed scripts, Wasm function bodies, the aggregated CPU profile, the
//! WebSocket traffic and the worker count. Records are encoded as one JSON
//! object per line so that corpora can be streamed.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Function name the V8 profiler gives to every sample inside Wasm code.
pub const WASM_FRAME_NAME: &str = "<WASM UNNAMED>";
/// Script id marker used for Wasm frames.
pub const WASM_SCRIPT_ID: &str = "<wasm>";
/// Navigation timeout of the crawler.
pub const LOAD_TIMEOUT_MS: f64 = 30_000.0;
/// Slack allowed on top of [`LOAD_TIMEOUT_MS`] for `load_ms`.
pub const LOAD_GRACE_MS: f64 = 5_000.0;

const FLOAT_SLACK: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("malformed archive line: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("invariant violated at `{path}`: {message}")]
    Invariant { path: String, message: String },
    #[error("archive line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<TelemetryError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TelemetryError {
    fn invariant(path: impl Into<String>, message: impl Into<String>) -> Self {
        TelemetryError::Invariant {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// A 32-byte digest, serialized as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest32(pub [u8; 32]);

impl Digest32 {
    pub fn sha256(data: &[u8]) -> Self {
        Digest32(Sha256::digest(data).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest32({})", self.to_hex())
    }
}

impl FromStr for Digest32 {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Digest32(out))
    }
}

impl Serialize for Digest32 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest32 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(serde::de::Error::custom("digest must be lowercase hex"));
        }
        s.parse().map_err(serde::de::Error::custom)
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

mod hex_bytes_list {
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(items: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(items.len()))?;
        for item in items {
            seq.serialize_element(&hex::encode(item))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<u8>>, D::Error> {
        Vec::<String>::deserialize(d)?
            .into_iter()
            .map(|s| hex::decode(s).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptContext {
    MainPage,
    Worker,
}

/// A script as reported by the debugger's script-parsed notification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptArtifact {
    pub script_id: String,
    /// Absolute URL, or `"inline"`.
    pub url: String,
    pub source_hash: Digest32,
    #[serde(default)]
    pub source: Option<String>,
    pub context: ScriptContext,
}

impl ScriptArtifact {
    /// Builds an artifact and hashes `source`; the source is kept only if `keep_source`.
    pub fn from_source(
        script_id: impl Into<String>,
        url: impl Into<String>,
        source: &str,
        context: ScriptContext,
        keep_source: bool,
    ) -> Self {
        ScriptArtifact {
            script_id: script_id.into(),
            url: url.into(),
            source_hash: Digest32::sha256(source.as_bytes()),
            source: keep_source.then(|| source.to_owned()),
            context,
        }
    }

    pub fn is_inline(&self) -> bool {
        self.url == "inline" || self.url.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WasmArtifact {
    pub origin_script_id: String,
    #[serde(with = "hex_bytes_list")]
    pub function_bodies: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameRef {
    pub function_name: String,
    /// Owning script id, [`WASM_SCRIPT_ID`] for Wasm frames, empty for
    /// engine pseudo-frames such as `(root)`.
    pub script_id: String,
}

impl FrameRef {
    pub fn new(function_name: impl Into<String>, script_id: impl Into<String>) -> Self {
        FrameRef {
            function_name: function_name.into(),
            script_id: script_id.into(),
        }
    }

    pub fn wasm() -> Self {
        FrameRef::new(WASM_FRAME_NAME, WASM_SCRIPT_ID)
    }

    pub fn is_wasm(&self) -> bool {
        self.function_name == WASM_FRAME_NAME || self.script_id == WASM_SCRIPT_ID
    }

    /// `(root)`, `(program)`, `(idle)`, `(garbage collector)` and friends.
    pub fn is_pseudo(&self) -> bool {
        self.script_id.is_empty()
            && self.function_name.starts_with('(')
            && self.function_name.ends_with(')')
    }
}

/// Profiler samples aggregated for one unique call stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackAggregate {
    /// Leaf first.
    pub frames: Vec<FrameRef>,
    pub sample_count: u64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTrace {
    pub duration_ms: f64,
    pub stacks: Vec<StackAggregate>,
}

impl ProfileTrace {
    pub fn total_ms(&self) -> f64 {
        self.stacks.iter().map(|s| s.total_ms).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WsPayload {
    Text(String),
    Binary {
        #[serde(with = "hex_bytes")]
        binary: Vec<u8>,
    },
}

impl WsPayload {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            WsPayload::Text(t) => Some(t),
            WsPayload::Binary { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsFrame {
    pub endpoint: String,
    pub direction: Direction,
    pub payload: WsPayload,
    pub at_ms: f64,
}

/// Complete telemetry of one page visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub site: String,
    pub rank: Option<u32>,
    pub visited_at: DateTime<Utc>,
    pub load_ms: f64,
    pub scripts: Vec<ScriptArtifact>,
    pub wasm_modules: Vec<WasmArtifact>,
    pub profile: Option<ProfileTrace>,
    pub ws_frames: Vec<WsFrame>,
    pub worker_count: u32,
    pub reported_cores: u32,
    /// Set when the visit hit the navigation timeout.
    #[serde(default)]
    pub partial: bool,
    /// Target ids the collector failed to attach to.
    #[serde(default)]
    pub attach_failures: Vec<String>,
}

impl VisitRecord {
    /// An empty record for `site`, mostly useful as a builder seed.
    pub fn new(site: impl Into<String>, visited_at: DateTime<Utc>) -> Self {
        VisitRecord {
            site: site.into(),
            rank: None,
            visited_at,
            load_ms: 0.0,
            scripts: Vec::new(),
            wasm_modules: Vec::new(),
            profile: None,
            ws_frames: Vec::new(),
            worker_count: 0,
            reported_cores: 4,
            partial: false,
            attach_failures: Vec::new(),
        }
    }

    pub fn script(&self, script_id: &str) -> Option<&ScriptArtifact> {
        self.scripts.iter().find(|s| s.script_id == script_id)
    }

    /// Checks every type invariant, naming the offending field path.
    pub fn validate(&self) -> Result<(), TelemetryError> {
        if self.site.is_empty() {
            return Err(TelemetryError::invariant("site", "must be non-empty"));
        }
        if self.rank == Some(0) {
            return Err(TelemetryError::invariant("rank", "must be positive"));
        }
        if self.reported_cores < 1 {
            return Err(TelemetryError::invariant("reported_cores", "must be >= 1"));
        }
        if !(self.load_ms.is_finite() && self.load_ms >= 0.0) {
            return Err(TelemetryError::invariant("load_ms", "must be finite and >= 0"));
        }
        if self.load_ms > LOAD_TIMEOUT_MS + LOAD_GRACE_MS {
            return Err(TelemetryError::invariant(
                "load_ms",
                format!("exceeds crawl timeout ({} ms)", LOAD_TIMEOUT_MS + LOAD_GRACE_MS),
            ));
        }

        let mut ids = HashSet::new();
        for (i, script) in self.scripts.iter().enumerate() {
            if !ids.insert(script.script_id.as_str()) {
                return Err(TelemetryError::invariant(
                    format!("scripts[{i}].script_id"),
                    format!("duplicate id {:?}", script.script_id),
                ));
            }
            if let Some(source) = &script.source {
                if Digest32::sha256(source.as_bytes()) != script.source_hash {
                    return Err(TelemetryError::invariant(
                        format!("scripts[{i}].source_hash"),
                        "does not match digest of source",
                    ));
                }
            }
        }

        for (i, wasm) in self.wasm_modules.iter().enumerate() {
            if wasm.function_bodies.is_empty() {
                return Err(TelemetryError::invariant(
                    format!("wasm_modules[{i}].function_bodies"),
                    "must be non-empty",
                ));
            }
        }

        if let Some(profile) = &self.profile {
            if !(profile.duration_ms.is_finite() && profile.duration_ms > 0.0) {
                return Err(TelemetryError::invariant(
                    "profile.duration_ms",
                    "must be positive",
                ));
            }
            for (i, stack) in profile.stacks.iter().enumerate() {
                let path = format!("profile.stacks[{i}]");
                if stack.frames.is_empty() {
                    return Err(TelemetryError::invariant(
                        format!("{path}.frames"),
                        "must be non-empty",
                    ));
                }
                if !(stack.total_ms.is_finite() && stack.total_ms >= 0.0) {
                    return Err(TelemetryError::invariant(
                        format!("{path}.total_ms"),
                        "must be finite and >= 0",
                    ));
                }
                if (stack.total_ms == 0.0) != (stack.sample_count == 0) {
                    return Err(TelemetryError::invariant(
                        format!("{path}.total_ms"),
                        "must be zero exactly when sample_count is zero",
                    ));
                }
                for (j, frame) in stack.frames.iter().enumerate() {
                    let sid = frame.script_id.as_str();
                    if !sid.is_empty() && sid != WASM_SCRIPT_ID && !ids.contains(sid) {
                        return Err(TelemetryError::invariant(
                            format!("{path}.frames[{j}].script_id"),
                            format!("unknown script {sid:?}"),
                        ));
                    }
                }
            }
            let budget = profile.duration_ms * f64::from(self.reported_cores);
            if profile.total_ms() > budget * (1.0 + FLOAT_SLACK) {
                return Err(TelemetryError::invariant(
                    "profile.stacks",
                    format!(
                        "total time {:.1} ms exceeds duration x cores ({budget:.1} ms)",
                        profile.total_ms()
                    ),
                ));
            }
        }

        for (i, frame) in self.ws_frames.iter().enumerate() {
            if !(frame.at_ms.is_finite() && frame.at_ms >= 0.0) {
                return Err(TelemetryError::invariant(
                    format!("ws_frames[{i}].at_ms"),
                    "must be >= 0",
                ));
            }
        }
        Ok(())
    }
}

/// Wire shape for decoding: integer fields are signed so that negative
/// values surface as invariant errors rather than parse errors.
#[derive(Deserialize)]
struct VisitWire {
    site: String,
    rank: Option<i64>,
    visited_at: DateTime<Utc>,
    load_ms: f64,
    scripts: Vec<ScriptArtifact>,
    wasm_modules: Vec<WasmArtifact>,
    profile: Option<ProfileTrace>,
    ws_frames: Vec<WsFrame>,
    worker_count: i64,
    reported_cores: i64,
    #[serde(default)]
    partial: bool,
    #[serde(default)]
    attach_failures: Vec<String>,
}

fn to_u32(path: &str, value: i64, min: i64) -> Result<u32, TelemetryError> {
    if value < min {
        return Err(TelemetryError::invariant(path, format!("must be >= {min}, got {value}")));
    }
    u32::try_from(value).map_err(|_| TelemetryError::invariant(path, "out of range"))
}

impl TryFrom<VisitWire> for VisitRecord {
    type Error = TelemetryError;

    fn try_from(w: VisitWire) -> Result<Self, Self::Error> {
        let rank = w.rank.map(|r| to_u32("rank", r, 1)).transpose()?;
        Ok(VisitRecord {
            site: w.site,
            rank,
            visited_at: w.visited_at,
            load_ms: w.load_ms,
            scripts: w.scripts,
            wasm_modules: w.wasm_modules,
            profile: w.profile,
            ws_frames: w.ws_frames,
            worker_count: to_u32("worker_count", w.worker_count, 0)?,
            reported_cores: to_u32("reported_cores", w.reported_cores, 1)?,
            partial: w.partial,
            attach_failures: w.attach_failures,
        })
    }
}

/// Encodes one record as a single newline-free archive line.
pub fn encode_visit(record: &VisitRecord) -> Result<Vec<u8>, TelemetryError> {
    record.validate()?;
    Ok(serde_json::to_vec(record)?)
}

/// Decodes and validates one archive line.
pub fn decode_visit(line: &[u8]) -> Result<VisitRecord, TelemetryError> {
    let wire: VisitWire = serde_json::from_slice(line)?;
    let record = VisitRecord::try_from(wire)?;
    record.validate()?;
    Ok(record)
}

/// Streams records from an archive, skipping blank lines.
pub fn read_archive<R: BufRead>(reader: R) -> impl Iterator<Item = Result<VisitRecord, TelemetryError>> {
    reader
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(i, line)| {
            let line = line?;
            decode_visit(line.as_bytes()).map_err(|e| TelemetryError::Line {
                line: i + 1,
                source: Box::new(e),
            })
        })
}

/// Loads an entire archive file into memory.
pub fn load_archive(path: impl AsRef<std::path::Path>) -> Result<Vec<VisitRecord>, TelemetryError> {
    let file = std::fs::File::open(path)?;
    read_archive(std::io::BufReader::new(file)).collect()
}

pub fn write_archive<'a, W: Write>(
    mut writer: W,
    records: impl IntoIterator<Item = &'a VisitRecord>,
) -> Result<(), TelemetryError> {
    for record in records {
        writer.write_all(&encode_visit(record)?)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}
