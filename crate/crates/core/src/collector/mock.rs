//! A scripted stand-in for a browser's DevTools endpoint, used to test the
//! collector without a browser. It answers every command, emits the events
//! described by a [`MockScenario`], and logs the commands it received.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use base64::Engine;
use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;

use super::Transport;
use crate::telemetry::{Direction, WASM_FRAME_NAME, WASM_SCRIPT_ID};

#[derive(Debug, Clone, PartialEq)]
pub struct MockScript {
    pub id: String,
    pub url: String,
    pub source: String,
    /// Index into [`MockScenario::workers`], `None` for the main page.
    pub worker: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockWasm {
    pub id: String,
    pub bytes: Vec<u8>,
    pub worker: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MockWorker {
    pub url: String,
    /// `Debugger.enable` on this worker's session fails.
    pub fail_attach: bool,
}

/// One sampled stack: frames leaf first as `(function, script id)`. Use
/// [`WASM_SCRIPT_ID`] for a Wasm leaf and `""` for pseudo frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MockStack {
    pub frames: Vec<(String, String)>,
    pub samples: u32,
    pub total_ms: f64,
}

impl MockStack {
    pub fn new(frames: &[(&str, &str)], samples: u32, total_ms: f64) -> Self {
        MockStack {
            frames: frames.iter().map(|(f, s)| (f.to_string(), s.to_string())).collect(),
            samples,
            total_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockScenario {
    pub scripts: Vec<MockScript>,
    pub wasm: Vec<MockWasm>,
    pub workers: Vec<MockWorker>,
    pub fire_load: bool,
    /// Announce a request that never finishes, keeping the network busy.
    pub hang_request: bool,
    pub ws_endpoint: String,
    pub ws_frames: Vec<(Direction, String)>,
    /// Stacks per profiled thread.
    pub threads: Vec<Vec<MockStack>>,
}

impl Default for MockScenario {
    fn default() -> Self {
        MockScenario {
            scripts: Vec::new(),
            wasm: Vec::new(),
            workers: Vec::new(),
            fire_load: true,
            hang_request: false,
            ws_endpoint: String::new(),
            ws_frames: Vec::new(),
            threads: Vec::new(),
        }
    }
}

/// Commands received, as `(session id, method)` in arrival order.
#[derive(Debug, Clone, Default)]
pub struct MockLog(Arc<Mutex<Vec<(Option<String>, String)>>>);

impl MockLog {
    fn push(&self, session: Option<String>, method: String) {
        self.0.lock().expect("log lock").push((session, method));
    }

    pub fn entries(&self) -> Vec<(Option<String>, String)> {
        self.0.lock().expect("log lock").clone()
    }

    /// Methods sent to the page session.
    pub fn page_methods(&self) -> Vec<String> {
        self.entries().into_iter().filter(|(s, _)| s.is_none()).map(|(_, m)| m).collect()
    }

    pub fn position(&self, session: Option<&str>, method: &str) -> Option<usize> {
        self.entries()
            .iter()
            .position(|(s, m)| s.as_deref() == session && m == method)
    }

    /// The source registered via `Page.addScriptToEvaluateOnNewDocument`.
    pub fn injected(&self) -> Vec<String> {
        self.entries()
            .into_iter()
            .filter_map(|(_, m)| m.strip_prefix("source:").map(str::to_owned))
            .collect()
    }
}

fn worker_session(i: usize) -> String {
    format!("worker-{i}")
}

fn event(method: &str, params: Value, session: Option<&str>) -> String {
    let mut v = json!({"method": method, "params": params});
    if let Some(s) = session {
        v["sessionId"] = json!(s);
    }
    v.to_string()
}

/// `Profile` and `ProfileChunk` events for the scenario's threads.
pub fn trace_events(threads: &[Vec<MockStack>]) -> Vec<Value> {
    let mut out = Vec::new();
    for (t, stacks) in threads.iter().enumerate() {
        let id = format!("0x{:x}", t + 1);
        // trie over root-first frames
        let mut ids: BTreeMap<Vec<(String, String)>, u64> = BTreeMap::new();
        let mut nodes = Vec::new();
        let mut samples = Vec::new();
        let mut deltas = Vec::new();
        let root = vec![("(root)".to_string(), String::new())];
        ids.insert(root.clone(), 1);
        nodes.push(json!({"id": 1, "callFrame": {"functionName": "(root)", "scriptId": 0, "url": ""}}));
        for st in stacks {
            let mut path = root.clone();
            let mut parent = 1;
            for (name, script) in st.frames.iter().rev() {
                if path.len() == 1 && name == "(root)" {
                    continue;
                }
                path.push((name.clone(), script.clone()));
                let next = ids.len() as u64 + 1;
                let node = *ids.entry(path.clone()).or_insert_with(|| {
                    let frame = if script == WASM_SCRIPT_ID {
                        json!({"functionName": WASM_FRAME_NAME, "scriptId": 0, "url": ""})
                    } else {
                        let sid: Value = script.parse::<u64>().map_or_else(|_| json!(script), |n| json!(n));
                        json!({"functionName": name, "scriptId": if script.is_empty() { json!(0) } else { sid }, "url": ""})
                    };
                    nodes.push(json!({"id": next, "parent": parent, "callFrame": frame}));
                    next
                });
                parent = node;
            }
            if st.samples == 0 {
                continue;
            }
            let per_us = st.total_ms * 1000.0 / f64::from(st.samples);
            for _ in 0..st.samples {
                samples.push(parent);
                deltas.push(per_us);
            }
        }
        out.push(json!({"name": "Profile", "ph": "P", "pid": 1, "tid": t + 1, "id": id,
                        "args": {"data": {"startTime": 0}}}));
        out.push(json!({"name": "ProfileChunk", "ph": "P", "pid": 1, "tid": t + 1, "id": id,
                        "args": {"data": {"cpuProfile": {"nodes": nodes, "samples": samples}, "timeDeltas": deltas}}}));
    }
    out
}

/// Serves one protocol session until the client hangs up.
pub async fn serve(scenario: Arc<MockScenario>, mut t: Transport, log: MockLog) {
    while let Some(text) = t.rx.recv().await {
        let Ok(msg) = serde_json::from_str::<Value>(&text) else { continue };
        let id = msg["id"].clone();
        let method = msg["method"].as_str().unwrap_or("").to_owned();
        let session = msg["sessionId"].as_str().map(str::to_owned);
        log.push(session.clone(), method.clone());
        if method == "Page.addScriptToEvaluateOnNewDocument" {
            log.push(None, format!("source:{}", msg["params"]["source"].as_str().unwrap_or("")));
        }
        let worker = session
            .as_deref()
            .and_then(|s| s.strip_prefix("worker-"))
            .and_then(|i| i.parse::<usize>().ok());

        let mut after = Vec::new();
        let reply = match method.as_str() {
            "Debugger.enable" if worker.is_some_and(|w| scenario.workers.get(w).is_some_and(|w| w.fail_attach)) => {
                json!({"id": id, "error": {"code": -32000, "message": "Target closed"}, "sessionId": session})
            }
            "Page.navigate" => {
                after = navigate_events(&scenario);
                json!({"id": id, "result": {"frameId": "main"}})
            }
            "Runtime.runIfWaitingForDebugger" => {
                if let Some(w) = worker {
                    after = parsed_events(&scenario, Some(w));
                }
                json!({"id": id, "result": {}, "sessionId": session})
            }
            "Debugger.getScriptSource" => {
                let sid = msg["params"]["scriptId"].as_str().unwrap_or("");
                if let Some(s) = scenario.scripts.iter().find(|s| s.id == sid) {
                    json!({"id": id, "result": {"scriptSource": s.source}})
                } else if let Some(w) = scenario.wasm.iter().find(|w| w.id == sid) {
                    let b64 = base64::engine::general_purpose::STANDARD.encode(&w.bytes);
                    json!({"id": id, "result": {"scriptSource": "", "bytecode": b64}})
                } else {
                    json!({"id": id, "error": {"code": -32000, "message": "No script for id"}})
                }
            }
            "Tracing.end" => {
                after.push(event("Tracing.dataCollected", json!({"value": trace_events(&scenario.threads)}), None));
                after.push(event("Tracing.tracingComplete", json!({"dataLossOccurred": false}), None));
                json!({"id": id, "result": {}})
            }
            _ => json!({"id": id, "result": {}}),
        };
        if t.tx.send(reply.to_string()).await.is_err() {
            return;
        }
        for e in after {
            if t.tx.send(e).await.is_err() {
                return;
            }
        }
    }
}

fn parsed_events(sc: &MockScenario, worker: Option<usize>) -> Vec<String> {
    let session = worker.map(worker_session);
    let mut out: Vec<String> = sc
        .scripts
        .iter()
        .filter(|s| s.worker == worker)
        .map(|s| event("Debugger.scriptParsed", json!({"scriptId": s.id, "url": s.url}), session.as_deref()))
        .collect();
    out.extend(sc.wasm.iter().filter(|w| w.worker == worker).map(|w| {
        event(
            "Debugger.scriptParsed",
            json!({"scriptId": w.id, "url": format!("wasm://wasm/{}", w.id), "scriptLanguage": "WebAssembly"}),
            session.as_deref(),
        )
    }));
    out
}

fn navigate_events(sc: &MockScenario) -> Vec<String> {
    let mut out = vec![
        event("Network.requestWillBeSent", json!({"requestId": "r1"}), None),
        event("Network.loadingFinished", json!({"requestId": "r1"}), None),
    ];
    if sc.hang_request {
        out.push(event("Network.requestWillBeSent", json!({"requestId": "hang"}), None));
    }
    out.extend(parsed_events(sc, None));
    for (i, w) in sc.workers.iter().enumerate() {
        out.push(event(
            "Target.attachedToTarget",
            json!({"sessionId": worker_session(i),
                   "targetInfo": {"targetId": format!("t{i}"), "type": "worker", "url": w.url},
                   "waitingForDebugger": true}),
            None,
        ));
    }
    if !sc.ws_frames.is_empty() {
        out.push(event(
            "Network.webSocketCreated",
            json!({"requestId": "ws1", "url": sc.ws_endpoint}),
            None,
        ));
        for (dir, text) in &sc.ws_frames {
            let m = match dir {
                Direction::Sent => "Network.webSocketFrameSent",
                Direction::Received => "Network.webSocketFrameReceived",
            };
            out.push(event(
                m,
                json!({"requestId": "ws1", "timestamp": 1.0, "response": {"opcode": 1, "mask": true, "payloadData": text}}),
                None,
            ));
        }
    }
    if sc.fire_load {
        out.push(event("Page.loadEventFired", json!({"timestamp": 1.0}), None));
    }
    out
}

/// In-process mock: returns the client end of a transport.
pub fn spawn_in_memory(scenario: MockScenario) -> (Transport, MockLog, JoinHandle<()>) {
    let (client, server) = Transport::pair(1024);
    let log = MockLog::default();
    let handle = tokio::spawn(serve(Arc::new(scenario), server, log.clone()));
    (client, log, handle)
}

/// A WebSocket listener serving the scenario to every connection.
pub struct MockEndpoint {
    pub addr: SocketAddr,
    pub log: MockLog,
    task: JoinHandle<()>,
}

impl MockEndpoint {
    pub async fn bind(scenario: MockScenario) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let log = MockLog::default();
        let scenario = Arc::new(scenario);
        let task_log = log.clone();
        let task = tokio::spawn(async move {
            while let Ok((tcp, _)) = listener.accept().await {
                let scenario = Arc::clone(&scenario);
                let log = task_log.clone();
                tokio::spawn(async move {
                    let Ok(ws) = tokio_tungstenite::accept_async(tcp).await else { return };
                    let (mut sink, mut stream) = ws.split();
                    let (ours, theirs) = Transport::pair(1024);
                    let Transport { tx: to_mock, rx: mut from_mock } = ours;
                    let mock = tokio::spawn(serve(scenario, theirs, log));
                    let writer = tokio::spawn(async move {
                        while let Some(text) = from_mock.recv().await {
                            if sink.send(Message::text(text)).await.is_err() {
                                break;
                            }
                        }
                    });
                    while let Some(Ok(msg)) = stream.next().await {
                        match msg {
                            Message::Text(t) => {
                                if to_mock.send(t.to_string()).await.is_err() {
                                    break;
                                }
                            }
                            Message::Close(_) => break,
                            _ => {}
                        }
                    }
                    drop(to_mock);
                    let _ = mock.await;
                    writer.abort();
                });
            }
        });
        Ok(MockEndpoint { addr, log, task })
    }

    pub fn url(&self) -> String {
        format!("ws://{}/devtools/page/mock", self.addr)
    }
}

impl Drop for MockEndpoint {
    fn drop(&mut self) {
        self.task.abort();
    }
}
