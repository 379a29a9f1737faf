//! A mock CryptoNote-style mining pool speaking the text-frame WebSocket
//! protocol of browser miners: site-key `auth` or proxy `handshake`, `job`
//! dispatch, `submit` and `hash_accepted`.
//!
//! Message shapes are local to this testbed:
//!
//! ```text
//! -> {"type":"auth","params":{"site_key":"...","type":"anonymous","user":null}}
//! -> {"identifier":"handshake","pool":"...","login":"<wallet>","password":"","userid":"","version":4}
//! <- {"type":"job","params":{"job_id":"...","blob":"<hex>","target":"ffffff00"}}
//! -> {"type":"submit","params":{"job_id":"...","nonce":"<8 hex>","result":"<64 hex>"}}
//! <- {"type":"hash_accepted","params":{"hashes":256}}
//! <- {"type":"error","params":{"error":"..."}}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("target must be exactly 8 hex characters, got {0:?}")]
    BadTarget(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("ledger task is gone")]
    LedgerClosed,
}

/// Hashes credited for one accepted share at `target` (4 bytes as sent on
/// the wire): `2^32 / (LE-u32(target) + 1)`, rounded, at least 1.
pub fn credited_hashes(target: [u8; 4]) -> u64 {
    let t = u64::from(u32::from_le_bytes(target));
    let denom = t + 1;
    let q = (1u64 << 32) / denom;
    let r = (1u64 << 32) % denom;
    let rounded = if 2 * r >= denom { q + 1 } else { q };
    rounded.max(1)
}

pub fn parse_target(hex_target: &str) -> Result<[u8; 4], PoolError> {
    if hex_target.len() != 8 {
        return Err(PoolError::BadTarget(hex_target.to_owned()));
    }
    let mut out = [0u8; 4];
    hex::decode_to_slice(hex_target, &mut out).map_err(|_| PoolError::BadTarget(hex_target.to_owned()))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolJob {
    pub job_id: String,
    pub blob: String,
    pub target: String,
}

impl PoolJob {
    pub fn new(job_id: impl Into<String>, blob: impl Into<String>, target: &str) -> Result<Self, PoolError> {
        parse_target(target)?;
        Ok(PoolJob {
            job_id: job_id.into(),
            blob: blob.into(),
            target: target.to_owned(),
        })
    }

    pub fn credit(&self) -> u64 {
        credited_hashes(parse_target(&self.target).expect("validated at construction"))
    }

    pub fn to_frame(&self) -> String {
        json!({"type": "job", "params": self}).to_string()
    }
}

/// Who a share is credited to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Identity {
    SiteKey(String),
    Wallet(String),
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Identity::SiteKey(k) => write!(f, "sitekey:{k}"),
            Identity::Wallet(w) => write!(f, "wallet:{w}"),
        }
    }
}

/// A parsed client message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientMessage {
    Auth(Identity),
    Submit { job_id: String, nonce: String, result: String },
}

fn is_hex_len(s: &str, n: usize) -> bool {
    s.len() == n && s.bytes().all(|b| b.is_ascii_hexdigit())
}

pub fn parse_client_message(text: &str) -> Result<ClientMessage, String> {
    let v: Value = serde_json::from_str(text).map_err(|e| format!("invalid json: {e}"))?;
    let obj = v.as_object().ok_or("message must be an object")?;
    if obj.get("identifier").and_then(Value::as_str) == Some("handshake") {
        let login = obj
            .get("login")
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty())
            .ok_or("handshake without login")?;
        return Ok(ClientMessage::Auth(Identity::Wallet(login.to_owned())));
    }
    let params = obj.get("params").and_then(Value::as_object);
    let field = |name: &str| params.and_then(|p| p.get(name)).and_then(Value::as_str);
    match obj.get("type").and_then(Value::as_str) {
        Some("auth") => {
            if let Some(key) = field("site_key").filter(|k| !k.is_empty()) {
                Ok(ClientMessage::Auth(Identity::SiteKey(key.to_owned())))
            } else if let Some(login) = field("login").filter(|k| !k.is_empty()) {
                Ok(ClientMessage::Auth(Identity::Wallet(login.to_owned())))
            } else {
                Err("auth without site_key or login".into())
            }
        }
        Some("submit") => {
            let job_id = field("job_id").ok_or("submit without job_id")?;
            let nonce = field("nonce").ok_or("submit without nonce")?;
            let result = field("result").ok_or("submit without result")?;
            if !is_hex_len(nonce, 8) {
                return Err("nonce must be 8 hex characters".into());
            }
            if !is_hex_len(result, 64) {
                return Err("result must be 64 hex characters".into());
            }
            Ok(ClientMessage::Submit {
                job_id: job_id.to_owned(),
                nonce: nonce.to_owned(),
                result: result.to_owned(),
            })
        }
        Some(other) => Err(format!("unsupported message type {other:?}")),
        None => Err("message without type".into()),
    }
}

pub fn error_frame(message: &str) -> String {
    json!({"type": "error", "params": {"error": message}}).to_string()
}

enum LedgerCmd {
    Credit {
        identity: Identity,
        hashes: u64,
        reply: oneshot::Sender<u64>,
    },
    Snapshot(oneshot::Sender<BTreeMap<Identity, u64>>),
}

/// Handle to the single task that owns the credit ledger.
#[derive(Clone)]
pub struct Ledger {
    tx: mpsc::UnboundedSender<LedgerCmd>,
}

impl Ledger {
    pub fn spawn() -> Self {
        let (tx, mut rx) = mpsc::unbounded_channel();
        tokio::spawn(async move {
            let mut credits: BTreeMap<Identity, u64> = BTreeMap::new();
            while let Some(cmd) = rx.recv().await {
                match cmd {
                    LedgerCmd::Credit { identity, hashes, reply } => {
                        let total = credits.entry(identity).or_default();
                        *total += hashes;
                        let _ = reply.send(*total);
                    }
                    LedgerCmd::Snapshot(reply) => {
                        let _ = reply.send(credits.clone());
                    }
                }
            }
        });
        Ledger { tx }
    }

    pub async fn credit(&self, identity: Identity, hashes: u64) -> Result<u64, PoolError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(LedgerCmd::Credit { identity, hashes, reply })
            .map_err(|_| PoolError::LedgerClosed)?;
        rx.await.map_err(|_| PoolError::LedgerClosed)
    }

    pub async fn snapshot(&self) -> Result<BTreeMap<Identity, u64>, PoolError> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(LedgerCmd::Snapshot(reply)).map_err(|_| PoolError::LedgerClosed)?;
        rx.await.map_err(|_| PoolError::LedgerClosed)
    }
}

#[derive(Debug, Clone)]
pub struct PoolConfig {
    /// Hex target sent with every job.
    pub target: String,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig { target: "ffffff00".into() }
    }
}

pub struct PoolHandle {
    pub addr: SocketAddr,
    pub ledger: Ledger,
    task: JoinHandle<()>,
}

impl PoolHandle {
    pub fn url(&self) -> String {
        format!("ws://{}/", self.addr)
    }

    pub async fn credits(&self) -> Result<BTreeMap<Identity, u64>, PoolError> {
        self.ledger.snapshot().await
    }

    pub fn shutdown(self) {
        self.task.abort();
    }
}

impl Drop for PoolHandle {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Binds `listen` and serves pool clients until the handle is dropped.
pub async fn serve_pool(listen: SocketAddr, cfg: PoolConfig) -> Result<PoolHandle, PoolError> {
    parse_target(&cfg.target)?;
    let listener = TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    let ledger = Ledger::spawn();
    let jobs = Arc::new(AtomicU64::new(0));
    let cfg = Arc::new(cfg);
    let accept_ledger = ledger.clone();
    let task = tokio::spawn(async move {
        loop {
            let Ok((stream, peer)) = listener.accept().await else { continue };
            let (ledger, jobs, cfg) = (accept_ledger.clone(), jobs.clone(), cfg.clone());
            tokio::spawn(async move {
                if let Err(e) = handle_client(stream, ledger, jobs, cfg).await {
                    tracing::debug!(%peer, error = %e, "pool client closed");
                }
            });
        }
    });
    Ok(PoolHandle { addr, ledger, task })
}

fn make_job(counter: &AtomicU64, target: &str) -> PoolJob {
    let n = counter.fetch_add(1, Ordering::Relaxed);
    // 76-byte blob, like a CryptoNote hashing blob
    let mut blob = Vec::with_capacity(76);
    let mut seed = Sha256::digest(n.to_le_bytes()).to_vec();
    while blob.len() < 76 {
        blob.extend_from_slice(&seed);
        seed = Sha256::digest(&seed).to_vec();
    }
    blob.truncate(76);
    PoolJob::new(format!("job{n:06}"), hex::encode(blob), target).expect("validated target")
}

async fn handle_client(
    stream: TcpStream,
    ledger: Ledger,
    jobs: Arc<AtomicU64>,
    cfg: Arc<PoolConfig>,
) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let mut ws = tokio_tungstenite::accept_async(stream).await?;
    let mut identity: Option<Identity> = None;
    let mut issued: HashMap<String, PoolJob> = HashMap::new();
    while let Some(msg) = ws.next().await {
        let text = match msg? {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            Message::Binary(_) => {
                ws.send(Message::text(error_frame("binary frames are not supported"))).await?;
                continue;
            }
            _ => continue,
        };
        let reply = match parse_client_message(&text) {
            Err(e) => error_frame(&e),
            Ok(ClientMessage::Auth(id)) => {
                tracing::info!(identity = %id, "miner registered");
                identity = Some(id);
                let job = make_job(&jobs, &cfg.target);
                let frame = job.to_frame();
                issued.insert(job.job_id.clone(), job);
                frame
            }
            Ok(ClientMessage::Submit { job_id, .. }) => match (&identity, issued.get(&job_id)) {
                (None, _) => error_frame("submit before auth"),
                (_, None) => error_frame(&format!("unknown job_id {job_id:?}")),
                (Some(id), Some(job)) => {
                    let total = ledger.credit(id.clone(), job.credit()).await?;
                    json!({"type": "hash_accepted", "params": {"hashes": total}}).to_string()
                }
            },
        };
        ws.send(Message::text(reply)).await?;
    }
    Ok(())
}
