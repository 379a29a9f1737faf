//! Labeled synthetic visits: miners at configurable throttle levels and
//! benign negative controls. Timing is modeled; no hashing happens.

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::telemetry::{
    Direction, FrameRef, ProfileTrace, ScriptArtifact, ScriptContext, StackAggregate, VisitRecord,
    WasmArtifact, WsFrame, WsPayload,
};
use crate::wallet;
use crate::wasm;

pub const DEFAULT_SLEEP_CAP_MS: f64 = 2000.0;
pub const DEFAULT_HASH_MS: f64 = 100.0;
/// Sampling interval implied by the hi-res profiler (14375.3 ms over 73938 samples).
pub const SAMPLE_INTERVAL_MS: f64 = 14375.3 / 73938.0;
/// Throttle grid of the testbed, crossed with both miner variants.
pub const THROTTLE_GRID: [f64; 12] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99];
pub const TESTBED_SITEKEY: &str = "TestbedSiteKey000000000000000001";

// Self-time shares of the hashing loop's JS frames (from a recorded CoinHive stack).
const AKKI_SHARE: f64 = 0.1 / 14378.1;
const WRAPPER_SHARE: f64 = 0.6 / 14378.1;
const LOOP_SHARE: f64 = 1.8 / 14378.1;
const MAIN_THREAD_SHARE: f64 = 0.004;

#[derive(Debug, Error, PartialEq)]
pub enum TestbedError {
    #[error("throttle must be in [0, 1), got {0}")]
    Throttle(f64),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThrottleSpec {
    pub throttle: f64,
    pub sleep_cap_ms: f64,
    pub hash_ms: f64,
}

impl ThrottleSpec {
    pub fn new(throttle: f64, sleep_cap_ms: f64, hash_ms: f64) -> Result<Self, TestbedError> {
        if !(0.0..1.0).contains(&throttle) {
            return Err(TestbedError::Throttle(throttle));
        }
        if !(sleep_cap_ms > 0.0) {
            return Err(TestbedError::NonPositive("sleep_cap_ms"));
        }
        if !(hash_ms > 0.0) {
            return Err(TestbedError::NonPositive("hash_ms"));
        }
        Ok(ThrottleSpec {
            throttle,
            sleep_cap_ms,
            hash_ms,
        })
    }

    /// Throttle with the default 2 s sleep cap and 100 ms per hash.
    pub fn with_throttle(throttle: f64) -> Result<Self, TestbedError> {
        Self::new(throttle, DEFAULT_SLEEP_CAP_MS, DEFAULT_HASH_MS)
    }

    pub fn sleep_ms(&self) -> f64 {
        (self.hash_ms * self.throttle / (1.0 - self.throttle)).min(self.sleep_cap_ms)
    }

    /// Fraction of wall time one worker spends hashing.
    pub fn duty_cycle(&self) -> f64 {
        self.hash_ms / (self.hash_ms + self.sleep_ms())
    }

    /// Modeled load summed over `cores` saturated workers, percent of one core.
    pub fn modeled_load_pct(&self, cores: u32) -> f64 {
        self.duty_cycle() * f64::from(cores) * 100.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinerVariant {
    /// Site-key miner loaded from its vendor CDN.
    Coinhive,
    /// Self-hosted copy that logs into a proxy with a wallet address.
    Cryptoloot,
}

impl MinerVariant {
    pub const ALL: [MinerVariant; 2] = [MinerVariant::Coinhive, MinerVariant::Cryptoloot];

    pub fn name(&self) -> &'static str {
        match self {
            MinerVariant::Coinhive => "coinhive",
            MinerVariant::Cryptoloot => "cryptoloot",
        }
    }

    pub fn script_url(&self) -> &'static str {
        match self {
            MinerVariant::Coinhive => "https://coinhive.testbed.local/lib/coinhive.min.js",
            MinerVariant::Cryptoloot => "https://cdn.cryptoloot.testbed.local/lib/crypta.js",
        }
    }

    pub fn pool_endpoint(&self) -> &'static str {
        match self {
            MinerVariant::Coinhive => "wss://ws001.coinhive.testbed.local/proxy",
            MinerVariant::Cryptoloot => "wss://proxy.cryptoloot.testbed.local/",
        }
    }

    /// Wrapper library source; differs per variant.
    pub fn script_source(&self) -> String {
        let ns = match self {
            MinerVariant::Coinhive => "CoinHive",
            MinerVariant::Cryptoloot => "CRLT",
        };
        format!(
            "var {ns} = {ns} || {{}}; {ns}.CONFIG = {{ LIB_URL: \"{url}\", WEBSOCKET_SHARDS: [[\"{pool}\"]] }};\n\
             {ns}.Anonymous = function (key, opts) {{ this._key = key; this._throttle = opts.throttle; }};\n\
             var CryptonightWASMWrapper = function () {{ this.ctx = Module._cryptonight_create(); }};\n\
             CryptonightWASMWrapper.prototype.hash = function (input, output) {{ Module._akki_hash(this.ctx); }};\n\
             CryptonightWASMWrapper.prototype.workThrottled = function () {{ var start = Date.now(); this.hash(); \
             var wait = Math.min(2000, (Date.now() - start) * this.throttle / (1 - this.throttle)); setTimeout(this.workThrottled.bind(this), wait); }};\n",
            url = self.script_url(),
            pool = self.pool_endpoint(),
        )
    }

    /// Compiled hashing core; the self-hosted copy carries one extra function.
    pub fn wasm_bodies(&self) -> Vec<Vec<u8>> {
        let mut bodies = synth_bodies(0xC0FFEE, 8);
        if *self == MinerVariant::Cryptoloot {
            bodies.extend(synth_bodies(0xBEEF, 1));
        }
        bodies
    }

    /// Wallet this variant logs in with (valid Monero-form address).
    pub fn wallet(&self) -> String {
        let mut body = vec![0x12];
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
        body.extend((0..64).map(|_| rng.gen::<u8>()));
        wallet::encode_address(&body)
    }
}

/// Deterministic function bodies: locals vector, opaque instructions, `end`.
fn synth_bodies(seed: u64, count: usize) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.gen_range(24..96);
            let mut body = vec![0x01, 0x02, 0x7f];
            body.extend((0..len).map(|_| rng.gen::<u8>()));
            body.push(0x0b);
            body
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestbedSpec {
    pub throttle: ThrottleSpec,
    pub variant: MinerVariant,
}

impl TestbedSpec {
    pub fn site(&self) -> String {
        format!(
            "{}-t{:03}.testbed.local",
            self.variant.name(),
            (self.throttle.throttle * 100.0).round() as u32
        )
    }
}

/// The 24 testbed pages: every grid throttle for both variants.
pub fn testbed_specs() -> Vec<TestbedSpec> {
    MinerVariant::ALL
        .iter()
        .flat_map(|&variant| {
            THROTTLE_GRID.iter().map(move |&t| TestbedSpec {
                throttle: ThrottleSpec::with_throttle(t).expect("grid throttles are valid"),
                variant,
            })
        })
        .collect()
}

fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2018, 5, 1, 0, 0, 0).unwrap()
}

fn stack(frames: Vec<FrameRef>, ms: f64) -> StackAggregate {
    let sample_count = if ms > 0.0 {
        ((ms / SAMPLE_INTERVAL_MS).round() as u64).max(1)
    } else {
        0
    };
    StackAggregate {
        frames,
        sample_count,
        total_ms: ms,
    }
}

/// A CoinHive-variant miner visit; see [`synth_miner`].
pub fn synth_visit(spec: &ThrottleSpec, cores: u32, profile_ms: f64) -> VisitRecord {
    synth_miner(
        &TestbedSpec {
            throttle: *spec,
            variant: MinerVariant::Coinhive,
        },
        cores,
        profile_ms,
    )
}

/// A labeled miner visit: `cores` workers each hashing at the entry's duty
/// cycle, Wasm leaf frames under the wrapper's JS, and pool handshake traffic.
pub fn synth_miner(spec: &TestbedSpec, cores: u32, profile_ms: f64) -> VisitRecord {
    let cores = cores.max(1);
    let variant = spec.variant;
    let mut r = VisitRecord::new(spec.site(), epoch());
    r.load_ms = 850.0;
    r.reported_cores = cores;
    r.worker_count = cores;

    let source = variant.script_source();
    let page_snippet = match variant {
        MinerVariant::Coinhive => format!(
            "var miner = new CoinHive.Anonymous('{TESTBED_SITEKEY}', {{throttle: {}}}); miner.start();",
            spec.throttle.throttle
        ),
        MinerVariant::Cryptoloot => format!(
            "var miner = new CRLT.Anonymous('{}', {{throttle: {}}}); miner.start();",
            variant.wallet(),
            spec.throttle.throttle
        ),
    };
    r.scripts.push(ScriptArtifact::from_source("1", "inline", &page_snippet, ScriptContext::MainPage, true));
    r.scripts.push(ScriptArtifact::from_source("2", variant.script_url(), &source, ScriptContext::MainPage, true));

    let bodies = variant.wasm_bodies();
    let busy = spec.throttle.duty_cycle() * profile_ms;
    let mut stacks = Vec::new();
    for w in 0..cores {
        let sid = (10 + w).to_string();
        r.scripts.push(ScriptArtifact::from_source(
            sid.clone(),
            variant.script_url(),
            &source,
            ScriptContext::Worker,
            true,
        ));
        r.wasm_modules.push(WasmArtifact {
            origin_script_id: sid.clone(),
            function_bodies: bodies.clone(),
        });
        let lp = FrameRef::new("CryptonightWASMWrapper.workThrottled", sid.as_str());
        let wrapper = FrameRef::new("CryptonightWASMWrapper.hash", sid.as_str());
        let akki = FrameRef::new("Module._akki_hash", sid.as_str());
        let root = FrameRef::new("(root)", "");
        let (akki_ms, wrapper_ms, loop_ms) = (busy * AKKI_SHARE, busy * WRAPPER_SHARE, busy * LOOP_SHARE);
        let wasm_ms = busy - akki_ms - wrapper_ms - loop_ms;
        stacks.push(stack(
            vec![FrameRef::wasm(), akki.clone(), wrapper.clone(), lp.clone(), root.clone()],
            wasm_ms,
        ));
        stacks.push(stack(vec![akki, wrapper.clone(), lp.clone(), root.clone()], akki_ms));
        stacks.push(stack(vec![wrapper, lp.clone(), root.clone()], wrapper_ms));
        stacks.push(stack(vec![lp, root], loop_ms));
    }
    let spare = profile_ms * f64::from(cores) - busy * f64::from(cores);
    let main_ms = (profile_ms * MAIN_THREAD_SHARE).min(spare);
    if main_ms > 1e-9 {
        stacks.push(stack(vec![FrameRef::new("(program)", "")], main_ms));
    }
    stacks.retain(|s| s.sample_count > 0);
    r.profile = Some(ProfileTrace {
        duration_ms: profile_ms,
        stacks,
    });

    let endpoint = variant.pool_endpoint().to_owned();
    let hello = match variant {
        MinerVariant::Coinhive => json!({
            "type": "auth",
            "params": {"site_key": TESTBED_SITEKEY, "type": "anonymous", "user": null, "goal": 0}
        }),
        MinerVariant::Cryptoloot => json!({
            "identifier": "handshake",
            "pool": "supportxmr.com",
            "login": variant.wallet(),
            "password": "",
            "userid": "",
            "version": 4
        }),
    };
    let target = "ffffff00";
    let job = json!({"type": "job", "params": {"job_id": "job000001", "blob": "07".repeat(76), "target": target}});
    let mut frames = vec![
        (Direction::Sent, hello.to_string(), 1200.0),
        (Direction::Received, job.to_string(), 1260.0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64((spec.throttle.throttle * 1000.0) as u64);
    for i in 1..=3u32 {
        let nonce: u32 = rng.gen();
        let result: [u8; 32] = rng.gen();
        let at = 1260.0 + f64::from(i) * 900.0;
        frames.push((
            Direction::Sent,
            json!({"type": "submit", "params": {"job_id": "job000001", "nonce": format!("{nonce:08x}"), "result": hex::encode(result)}})
                .to_string(),
            at,
        ));
        frames.push((
            Direction::Received,
            json!({"type": "hash_accepted", "params": {"hashes": 256 * i}}).to_string(),
            at + 40.0,
        ));
    }
    r.ws_frames = frames
        .into_iter()
        .map(|(direction, text, at_ms)| WsFrame {
            endpoint: endpoint.clone(),
            direction,
            payload: WsPayload::Text(text),
            at_ms,
        })
        .collect();
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenignKind {
    Idle,
    Burst,
    ManyWorkers,
    WasmCodec,
}

impl BenignKind {
    pub const ALL: [BenignKind; 4] = [
        BenignKind::Idle,
        BenignKind::Burst,
        BenignKind::ManyWorkers,
        BenignKind::WasmCodec,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BenignKind::Idle => "idle",
            BenignKind::Burst => "burst",
            BenignKind::ManyWorkers => "many-workers",
            BenignKind::WasmCodec => "wasm-codec",
        }
    }
}

/// Benign page of the given kind; `index` varies the site name and content.
pub fn synth_benign(kind: BenignKind, profile_ms: f64, index: usize) -> VisitRecord {
    let site = format!("{}-{index:02}.benign.local", kind.name());
    let mut r = VisitRecord::new(site.as_str(), epoch());
    r.load_ms = 1400.0;
    r.reported_cores = 4;
    let app = format!("/* {site} */ function render() {{}} function onScroll() {{}}");
    r.scripts.push(ScriptArtifact::from_source(
        "1",
        format!("https://{site}/static/app.js"),
        &app,
        ScriptContext::MainPage,
        true,
    ));
    let root = FrameRef::new("(root)", "");
    let mut stacks = vec![stack(vec![FrameRef::new("(program)", "")], profile_ms * 0.002)];
    match kind {
        BenignKind::Idle => {
            stacks.push(stack(vec![FrameRef::new("render", "1"), root], profile_ms * 0.001));
        }
        BenignKind::Burst => {
            // one expensive computation right after load
            let burst = (profile_ms * 0.9).min(2000.0);
            stacks.push(stack(vec![FrameRef::new("buildSearchIndex", "1"), root], burst));
        }
        BenignKind::ManyWorkers => {
            r.worker_count = 6;
            for w in 0..6u32 {
                let sid = (10 + w).to_string();
                r.scripts.push(ScriptArtifact::from_source(
                    sid.clone(),
                    format!("https://{site}/static/worker.js"),
                    "onmessage = function processMessage(e) { postMessage(e.data); }",
                    ScriptContext::Worker,
                    true,
                ));
                stacks.push(stack(
                    vec![FrameRef::new("processMessage", sid.as_str()), root.clone()],
                    profile_ms * 0.004,
                ));
            }
        }
        BenignKind::WasmCodec => {
            r.worker_count = 1;
            r.scripts.push(ScriptArtifact::from_source(
                "10",
                format!("https://{site}/static/codec.js"),
                "function decodeFrame(buf) { return Module._decode(buf); }",
                ScriptContext::Worker,
                true,
            ));
            let module = wasm::build::module(&synth_bodies(0xC0DEC + index as u64, 3));
            r.wasm_modules.push(WasmArtifact {
                origin_script_id: "10".into(),
                function_bodies: wasm::parse_module(&module).expect("own module").function_bodies,
            });
            stacks.push(stack(
                vec![FrameRef::wasm(), FrameRef::new("decodeFrame", "10"), root],
                150.0_f64.min(profile_ms * 0.03),
            ));
        }
    }
    stacks.retain(|s| s.sample_count > 0);
    r.profile = Some(ProfileTrace {
        duration_ms: profile_ms,
        stacks,
    });
    r
}

/// Testbed corpus: the 24 miners plus `benign_per_kind` controls of every kind.
pub fn testbed_corpus(cores: u32, profile_ms: f64, benign_per_kind: usize) -> (Vec<VisitRecord>, Vec<VisitRecord>) {
    let miners = testbed_specs()
        .iter()
        .map(|s| synth_miner(s, cores, profile_ms))
        .collect();
    let benign = BenignKind::ALL
        .iter()
        .flat_map(|&k| (0..benign_per_kind).map(move |i| synth_benign(k, profile_ms, i)))
        .collect();
    (miners, benign)
}
