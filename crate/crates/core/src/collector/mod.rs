//! Drives a browser over the DevTools protocol and turns one page visit
//! into a [`VisitRecord`].
//!
//! Transport is a pair of text channels; [`connect`] bridges them to a
//! WebSocket, and [`mock`] serves a scripted browser over the same pair.

pub mod mock;
pub mod trace;

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use chrono::Utc;
use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::{mpsc, Mutex};
use tokio::time::Instant;
use tokio_tungstenite::tungstenite::Message;

use crate::telemetry::{
    Direction, ScriptArtifact, ScriptContext, TelemetryError, VisitRecord, WasmArtifact, WsFrame, WsPayload,
};

pub const TRACE_CATEGORIES: [&str; 2] = [
    "disabled-by-default-v8.cpu_profiler",
    "disabled-by-default-v8.cpu_profiler.hires",
];

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("cannot connect to {endpoint}: {reason}")]
    Connect { endpoint: String, reason: String },
    #[error("endpoint disconnected")]
    Disconnected,
    #[error("{method} failed: {message}")]
    Protocol { method: String, message: String },
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("invalid url {0:?}")]
    BadUrl(String),
    #[error("collected record is invalid: {0}")]
    Invalid(#[from] TelemetryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrawlConfig {
    pub load_timeout_ms: u64,
    pub settle_extra_ms: u64,
    pub profile_ms: u64,
    pub reported_cores: u32,
    pub parallel_sessions: usize,
    /// Store script sources in the record, not just their hashes.
    pub keep_sources: bool,
    /// Upper bound on any single protocol round trip.
    pub command_timeout_ms: u64,
}

impl Default for CrawlConfig {
    fn default() -> Self {
        CrawlConfig {
            load_timeout_ms: 30_000,
            settle_extra_ms: 3_000,
            profile_ms: 5_000,
            reported_cores: 4,
            parallel_sessions: 1,
            keep_sources: true,
            command_timeout_ms: 10_000,
        }
    }
}

impl CrawlConfig {
    /// Phase 1 profiles for 5 s, phase 2 for 30 s.
    pub fn phase(phase: u8) -> Self {
        CrawlConfig {
            profile_ms: if phase >= 2 { 30_000 } else { 5_000 },
            ..Default::default()
        }
    }

    pub fn from_config(cfg: &crate::config::Config, phase: u8) -> Self {
        CrawlConfig {
            load_timeout_ms: cfg.crawl.load_timeout_ms,
            settle_extra_ms: cfg.crawl.settle_extra_ms,
            profile_ms: if phase >= 2 {
                cfg.crawl.phase2_profile_ms
            } else {
                cfg.crawl.phase1_profile_ms
            },
            reported_cores: cfg.crawl.reported_cores,
            parallel_sessions: cfg.crawl.parallel_sessions,
            ..Default::default()
        }
    }
}

/// Page-world script making `navigator.hardwareConcurrency` read `cores`.
/// Redefining is allowed, so installing it twice is harmless.
pub fn inject_core_override(cores: u32) -> String {
    let cores = cores.max(1);
    format!(
        "(() => {{\n  if (typeof navigator === 'undefined') return;\n  const proto = Object.getPrototypeOf(navigator);\n  Object.defineProperty(proto, 'hardwareConcurrency', {{\n    get: () => {cores},\n    configurable: true,\n    enumerable: true,\n  }});\n}})();\n"
    )
}

/// Text-frame duplex channel to one protocol endpoint.
pub struct Transport {
    pub tx: mpsc::Sender<String>,
    pub rx: mpsc::Receiver<String>,
}

impl Transport {
    /// Two connected ends.
    pub fn pair(buffer: usize) -> (Transport, Transport) {
        let (atx, brx) = mpsc::channel(buffer);
        let (btx, arx) = mpsc::channel(buffer);
        (Transport { tx: atx, rx: arx }, Transport { tx: btx, rx: brx })
    }
}

/// Opens a WebSocket to a DevTools endpoint.
pub async fn connect(endpoint: &str) -> Result<Transport, CollectError> {
    let (ws, _) = tokio_tungstenite::connect_async(endpoint)
        .await
        .map_err(|e| CollectError::Connect {
            endpoint: endpoint.to_owned(),
            reason: e.to_string(),
        })?;
    let (mut sink, mut stream) = ws.split();
    let (ours, theirs) = Transport::pair(1024);
    let Transport { tx: to_us, rx: mut from_us } = theirs;
    tokio::spawn(async move {
        while let Some(text) = from_us.recv().await {
            if sink.send(Message::text(text)).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    tokio::spawn(async move {
        while let Some(Ok(msg)) = stream.next().await {
            match msg {
                Message::Text(t) => {
                    if to_us.send(t.to_string()).await.is_err() {
                        break;
                    }
                }
                Message::Close(_) => break,
                _ => {}
            }
        }
    });
    Ok(ours)
}

#[derive(Debug)]
struct Parsed {
    script_id: String,
    url: String,
    session: Option<String>,
    wasm: bool,
}

struct Session<'a> {
    t: Transport,
    cfg: &'a CrawlConfig,
    next_id: u64,
    nav_at: Option<Instant>,
    load_ms: Option<f64>,
    scripts: Vec<Parsed>,
    ws_urls: HashMap<String, String>,
    frames: Vec<WsFrame>,
    inflight: HashSet<String>,
    workers: Vec<String>,
    unattached: VecDeque<String>,
    attach_failures: Vec<String>,
    trace_events: Vec<Value>,
    tracing_complete: bool,
}

impl<'a> Session<'a> {
    fn new(t: Transport, cfg: &'a CrawlConfig) -> Self {
        Session {
            t,
            cfg,
            next_id: 0,
            nav_at: None,
            load_ms: None,
            scripts: Vec::new(),
            ws_urls: HashMap::new(),
            frames: Vec::new(),
            inflight: HashSet::new(),
            workers: Vec::new(),
            unattached: VecDeque::new(),
            attach_failures: Vec::new(),
            trace_events: Vec::new(),
            tracing_complete: false,
        }
    }

    fn since_nav_ms(&self) -> f64 {
        self.nav_at.map_or(0.0, |t| t.elapsed().as_secs_f64() * 1000.0)
    }

    /// Next message, or `None` once `deadline` passes.
    async fn recv(&mut self, deadline: Instant) -> Result<Option<Value>, CollectError> {
        match tokio::time::timeout_at(deadline, self.t.rx.recv()).await {
            Err(_) => Ok(None),
            Ok(None) => Err(CollectError::Disconnected),
            Ok(Some(text)) => match serde_json::from_str(&text) {
                Ok(v) => Ok(Some(v)),
                Err(e) => {
                    tracing::warn!("unparseable protocol message: {e}");
                    Ok(Some(Value::Null))
                }
            },
        }
    }

    async fn call(&mut self, method: &str, params: Value, session: Option<&str>) -> Result<Value, CollectError> {
        self.next_id += 1;
        let id = self.next_id;
        let mut msg = json!({"id": id, "method": method, "params": params});
        if let Some(s) = session {
            msg["sessionId"] = json!(s);
        }
        self.t
            .tx
            .send(msg.to_string())
            .await
            .map_err(|_| CollectError::Disconnected)?;
        let deadline = Instant::now() + Duration::from_millis(self.cfg.command_timeout_ms);
        loop {
            let Some(msg) = self.recv(deadline).await? else {
                return Err(CollectError::Timeout("a protocol response"));
            };
            if msg["id"].as_u64() == Some(id) {
                if let Some(err) = msg.get("error") {
                    return Err(CollectError::Protocol {
                        method: method.to_owned(),
                        message: err["message"].as_str().unwrap_or("unknown error").to_owned(),
                    });
                }
                return Ok(msg.get("result").cloned().unwrap_or(Value::Null));
            }
            self.handle_event(&msg);
        }
    }

    fn handle_event(&mut self, msg: &Value) {
        let Some(method) = msg["method"].as_str() else { return };
        let p = &msg["params"];
        let session = msg["sessionId"].as_str().map(str::to_owned);
        match method {
            "Page.loadEventFired" if session.is_none() => {
                if self.load_ms.is_none() {
                    self.load_ms = Some(self.since_nav_ms());
                }
            }
            "Debugger.scriptParsed" => {
                let Some(id) = p["scriptId"].as_str() else { return };
                let url = p["url"].as_str().unwrap_or("");
                let wasm = p["scriptLanguage"].as_str() == Some("WebAssembly") || url.starts_with("wasm://");
                if let Some(prev) = self.scripts.iter().find(|s| s.script_id == id) {
                    if prev.url != url {
                        tracing::warn!(script_id = id, "script id reused across targets; keeping the first");
                    }
                    return;
                }
                self.scripts.push(Parsed {
                    script_id: id.to_owned(),
                    url: url.to_owned(),
                    session,
                    wasm,
                });
            }
            "Network.requestWillBeSent" => {
                if let Some(r) = p["requestId"].as_str() {
                    self.inflight.insert(r.to_owned());
                }
            }
            "Network.loadingFinished" | "Network.loadingFailed" => {
                if let Some(r) = p["requestId"].as_str() {
                    self.inflight.remove(r);
                }
            }
            "Network.webSocketCreated" => {
                if let (Some(r), Some(u)) = (p["requestId"].as_str(), p["url"].as_str()) {
                    self.ws_urls.insert(r.to_owned(), u.to_owned());
                }
            }
            "Network.webSocketFrameSent" | "Network.webSocketFrameReceived" => {
                let endpoint = p["requestId"]
                    .as_str()
                    .and_then(|r| self.ws_urls.get(r))
                    .cloned()
                    .unwrap_or_default();
                let data = p["response"]["payloadData"].as_str().unwrap_or("");
                let payload = if p["response"]["opcode"].as_u64() == Some(2) {
                    match base64::engine::general_purpose::STANDARD.decode(data) {
                        Ok(bytes) => WsPayload::Binary { binary: bytes },
                        Err(_) => WsPayload::Text(data.to_owned()),
                    }
                } else {
                    WsPayload::Text(data.to_owned())
                };
                let direction = if method.ends_with("Sent") {
                    Direction::Sent
                } else {
                    Direction::Received
                };
                let at_ms = self.since_nav_ms();
                self.frames.push(WsFrame {
                    endpoint,
                    direction,
                    payload,
                    at_ms,
                });
            }
            "Target.attachedToTarget" => {
                let kind = p["targetInfo"]["type"].as_str().unwrap_or("");
                if !kind.contains("worker") {
                    return;
                }
                if let Some(sid) = p["sessionId"].as_str() {
                    if !self.workers.iter().any(|w| w == sid) {
                        self.workers.push(sid.to_owned());
                        self.unattached.push_back(sid.to_owned());
                    }
                }
            }
            "Tracing.dataCollected" => {
                if let Some(values) = p["value"].as_array() {
                    self.trace_events.extend(values.iter().cloned());
                }
            }
            "Tracing.tracingComplete" => self.tracing_complete = true,
            _ => {}
        }
    }

    /// Handles events until `done` holds or `deadline` passes; returns
    /// whether `done` held.
    async fn pump_until(&mut self, deadline: Instant, done: impl Fn(&Self) -> bool) -> Result<bool, CollectError> {
        loop {
            if done(self) {
                return Ok(true);
            }
            match self.recv(deadline).await? {
                Some(msg) => self.handle_event(&msg),
                None => return Ok(done(self)),
            }
            self.attach_pending().await?;
        }
    }

    async fn attach_pending(&mut self) -> Result<(), CollectError> {
        while let Some(sid) = self.unattached.pop_front() {
            if let Err(e) = self.call("Debugger.enable", json!({}), Some(&sid)).await {
                match e {
                    CollectError::Protocol { message, .. } | CollectError::Connect { reason: message, .. } => {
                        self.attach_failures.push(format!("{sid}: {message}"));
                    }
                    CollectError::Disconnected => return Err(e),
                    other => self.attach_failures.push(format!("{sid}: {other}")),
                }
            }
            if let Err(e) = self.call("Runtime.runIfWaitingForDebugger", json!({}), Some(&sid)).await {
                if matches!(e, CollectError::Disconnected) {
                    return Err(e);
                }
                tracing::warn!(session = %sid, "could not resume worker: {e}");
            }
        }
        Ok(())
    }
}

pub fn site_of(url: &str) -> Result<String, CollectError> {
    let parsed = url::Url::parse(url).map_err(|_| CollectError::BadUrl(url.to_owned()))?;
    parsed
        .host_str()
        .map(str::to_owned)
        .ok_or_else(|| CollectError::BadUrl(url.to_owned()))
}

/// Connects to `endpoint` and visits `url`.
pub async fn visit(url: &str, cfg: &CrawlConfig, endpoint: &str) -> Result<VisitRecord, CollectError> {
    let transport = connect(endpoint).await?;
    visit_with(transport, url, None, cfg).await
}

/// One visit over an established transport.
pub async fn visit_with(
    transport: Transport,
    url: &str,
    rank: Option<u32>,
    cfg: &CrawlConfig,
) -> Result<VisitRecord, CollectError> {
    let site = site_of(url)?;
    let visited_at = Utc::now();
    let mut s = Session::new(transport, cfg);

    s.call("Page.enable", json!({}), None).await?;
    s.call("Network.enable", json!({}), None).await?;
    s.call("Debugger.enable", json!({}), None).await?;
    s.call(
        "Page.addScriptToEvaluateOnNewDocument",
        json!({"source": inject_core_override(cfg.reported_cores)}),
        None,
    )
    .await?;
    s.call(
        "Target.setAutoAttach",
        json!({"autoAttach": true, "waitForDebuggerOnStart": true, "flatten": true}),
        None,
    )
    .await?;

    s.nav_at = Some(Instant::now());
    let nav = s.call("Page.navigate", json!({"url": url}), None).await?;
    if let Some(err) = nav["errorText"].as_str() {
        tracing::warn!(%site, "navigation error: {err}");
    }
    let nav_at = Instant::now();
    let loaded = s
        .pump_until(nav_at + Duration::from_millis(cfg.load_timeout_ms), |s| s.load_ms.is_some())
        .await?;
    let partial = !loaded;
    if partial {
        tracing::warn!(%site, "load event not fired within {} ms", cfg.load_timeout_ms);
    }
    s.pump_until(Instant::now() + Duration::from_millis(cfg.settle_extra_ms), |s| {
        s.inflight.is_empty()
    })
    .await?;
    s.attach_pending().await?;

    s.call(
        "Tracing.start",
        json!({
            "traceConfig": {"includedCategories": TRACE_CATEGORIES, "recordMode": "recordAsMuchAsPossible"},
            "transferMode": "ReportEvents"
        }),
        None,
    )
    .await?;
    let started = Instant::now();
    s.pump_until(started + Duration::from_millis(cfg.profile_ms), |_| false).await?;
    s.call("Tracing.end", json!({}), None).await?;
    let duration_ms = started.elapsed().as_secs_f64() * 1000.0;
    let complete = s
        .pump_until(Instant::now() + Duration::from_millis(cfg.command_timeout_ms), |s| {
            s.tracing_complete
        })
        .await?;
    if !complete {
        return Err(CollectError::Timeout("trace data"));
    }

    let mut record = VisitRecord::new(site, visited_at);
    record.rank = rank;
    record.reported_cores = cfg.reported_cores;
    record.partial = partial;
    record.load_ms = s.load_ms.unwrap_or(cfg.load_timeout_ms as f64).min(cfg.load_timeout_ms as f64);
    record.worker_count = s.workers.len() as u32;

    let parsed = std::mem::take(&mut s.scripts);
    for p in &parsed {
        let res = s
            .call("Debugger.getScriptSource", json!({"scriptId": p.script_id}), p.session.as_deref())
            .await;
        let result = match res {
            Ok(r) => r,
            Err(CollectError::Disconnected) => return Err(CollectError::Disconnected),
            Err(e) => {
                tracing::warn!(script_id = %p.script_id, "no source: {e}");
                Value::Null
            }
        };
        if p.wasm {
            let bytes = result["bytecode"]
                .as_str()
                .and_then(|b| base64::engine::general_purpose::STANDARD.decode(b).ok());
            match bytes.map(|b| crate::wasm::parse_module(&b)) {
                Some(Ok(m)) if !m.function_bodies.is_empty() => record.wasm_modules.push(WasmArtifact {
                    origin_script_id: p.script_id.clone(),
                    function_bodies: m.function_bodies,
                }),
                Some(Err(e)) => tracing::warn!(script_id = %p.script_id, "unparseable wasm: {e}"),
                _ => {}
            }
            continue;
        }
        let context = if p.session.is_some() {
            ScriptContext::Worker
        } else {
            ScriptContext::MainPage
        };
        let url = if p.url.is_empty() { "inline" } else { p.url.as_str() };
        let source = result["scriptSource"].as_str().unwrap_or("");
        record.scripts.push(ScriptArtifact::from_source(
            p.script_id.clone(),
            url,
            source,
            context,
            cfg.keep_sources && !result.is_null(),
        ));
    }

    let known: HashSet<String> = record.scripts.iter().map(|s| s.script_id.clone()).collect();
    record.profile = Some(crate::telemetry::ProfileTrace {
        duration_ms,
        stacks: trace::trace_to_stacks(&s.trace_events, &known),
    });
    record.ws_frames = std::mem::take(&mut s.frames);
    record.attach_failures = std::mem::take(&mut s.attach_failures);
    record.validate()?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrawlTarget {
    pub url: String,
    pub rank: Option<u32>,
}

/// Parses a target list: one `url` or `rank,url` per line, `#` comments.
pub fn parse_targets(text: &str) -> Vec<CrawlTarget> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| match l.split_once(',') {
            Some((r, u)) if r.trim().parse::<u32>().is_ok() => CrawlTarget {
                url: u.trim().to_owned(),
                rank: r.trim().parse().ok(),
            },
            _ => CrawlTarget {
                url: l.to_owned(),
                rank: None,
            },
        })
        .collect()
}

/// Visits every target, one browser session per endpoint, at most
/// `parallel_sessions` sessions at a time. Results come back in target order.
pub async fn crawl(
    targets: Vec<CrawlTarget>,
    endpoints: Vec<String>,
    cfg: CrawlConfig,
) -> Vec<(CrawlTarget, Result<VisitRecord, CollectError>)> {
    let n = targets.len();
    let queue = Arc::new(Mutex::new(targets.into_iter().enumerate().collect::<VecDeque<_>>()));
    let cfg = Arc::new(cfg);
    let sessions = endpoints.len().min(cfg.parallel_sessions.max(1));
    let (tx, mut rx) = mpsc::channel(n.max(1));
    for endpoint in endpoints.into_iter().take(sessions) {
        let queue = Arc::clone(&queue);
        let cfg = Arc::clone(&cfg);
        let tx = tx.clone();
        tokio::spawn(async move {
            loop {
                let Some((i, target)) = queue.lock().await.pop_front() else { break };
                let res = match connect(&endpoint).await {
                    Ok(t) => visit_with(t, &target.url, target.rank, &cfg).await,
                    Err(e) => Err(e),
                };
                if tx.send((i, target, res)).await.is_err() {
                    break;
                }
            }
        });
    }
    drop(tx);
    let mut out = Vec::with_capacity(n);
    while let Some(item) = rx.recv().await {
        out.push(item);
    }
    out.sort_by_key(|(i, _, _)| *i);
    out.into_iter().map(|(_, t, r)| (t, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_script_mentions_value() {
        let s = inject_core_override(4);
        assert!(s.contains("get: () => 4,"));
        assert!(s.contains("hardwareConcurrency"));
        assert_eq!(inject_core_override(0), inject_core_override(1));
    }

    #[test]
    fn targets() {
        let t = parse_targets("# list\n1,https://a.com/\nhttps://b.com/\n\n");
        assert_eq!(
            t,
            vec![
                CrawlTarget { url: "https://a.com/".into(), rank: Some(1) },
                CrawlTarget { url: "https://b.com/".into(), rank: None },
            ]
        );
    }

    #[test]
    fn sites() {
        assert_eq!(site_of("https://www.example.com/x").unwrap(), "www.example.com");
        assert!(site_of("not a url").is_err());
    }
}
