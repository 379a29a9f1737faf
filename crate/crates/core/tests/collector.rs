use std::process::Command;

use cryptojack::collector::mock::{spawn_in_memory, MockEndpoint, MockScenario, MockScript, MockStack, MockWasm, MockWorker};
use cryptojack::collector::{inject_core_override, visit, visit_with, CollectError, CrawlConfig};
use cryptojack::telemetry::{decode_visit, encode_visit, Direction, ScriptContext, WASM_SCRIPT_ID};
use cryptojack::wasm;

fn script(id: &str, url: &str, source: &str, worker: Option<usize>) -> MockScript {
    MockScript {
        id: id.into(),
        url: url.into(),
        source: source.into(),
        worker,
    }
}

fn two_script_scenario() -> MockScenario {
    MockScenario {
        scripts: vec![
            script("11", "https://shop.test/app.js", "function render() {}", None),
            script("12", "", "render();", None),
        ],
        threads: vec![vec![
            MockStack::new(&[("render", "11"), ("(root)", "")], 40, 120.0),
            MockStack::new(&[("(program)", "")], 10, 15.0),
            MockStack::new(&[("(idle)", "")], 100, 4800.0),
        ]],
        ..Default::default()
    }
}

fn miner_scenario(workers: usize) -> MockScenario {
    let mut scripts = vec![
        script("1", "https://miner.test/lib/miner.min.js", "var miner = new Miner('KEY'); miner.start();", None),
    ];
    let mut threads = Vec::new();
    for w in 0..workers {
        let id = format!("{}", 20 + w);
        scripts.push(script(&id, "https://miner.test/lib/worker.js", "self.onmessage = work;", Some(w)));
        threads.push(vec![MockStack::new(
            &[(&"<WASM UNNAMED>".to_string(), WASM_SCRIPT_ID), ("hash", &id), ("work", &id), ("(root)", "")],
            4000,
            4000.0,
        )]);
    }
    MockScenario {
        scripts,
        wasm: vec![MockWasm {
            id: "90".into(),
            bytes: wasm::build::module(&[vec![0x00, 0x0b], vec![0x00, 0x41, 0x01, 0x1a, 0x0b]]),
            worker: Some(0),
        }],
        workers: (0..workers)
            .map(|w| MockWorker {
                url: format!("https://miner.test/lib/worker.js#{w}"),
                fail_attach: false,
            })
            .collect(),
        ws_endpoint: "wss://pool.miner.test/proxy".into(),
        ws_frames: vec![
            (Direction::Sent, r#"{"type":"auth","params":{"site_key":"KEY0000000000000000000000000001"}}"#.into()),
            (Direction::Received, r#"{"type":"authed","params":{"hashes":0}}"#.into()),
        ],
        threads,
        ..Default::default()
    }
}

#[tokio::test(start_paused = true)]
async fn two_scripts_and_a_five_second_trace() {
    let (t, log, _h) = spawn_in_memory(two_script_scenario());
    let rec = visit_with(t, "https://shop.test/", Some(7), &CrawlConfig::default()).await.unwrap();
    assert_eq!(rec.site, "shop.test");
    assert_eq!(rec.rank, Some(7));
    assert_eq!(rec.scripts.len(), 2);
    assert_eq!(rec.scripts[1].url, "inline");
    assert_eq!(rec.profile.as_ref().unwrap().duration_ms, 5000.0);
    assert!(!rec.partial);
    // idle samples are not kept
    let total = rec.profile.as_ref().unwrap().total_ms();
    assert!((total - 135.0).abs() < 1e-6, "{total}");
    assert_eq!(rec.reported_cores, 4);

    let methods = log.page_methods();
    let inject = methods.iter().position(|m| m == "Page.addScriptToEvaluateOnNewDocument").unwrap();
    let nav = methods.iter().position(|m| m == "Page.navigate").unwrap();
    assert!(inject < nav);
    assert_eq!(log.injected(), vec![inject_core_override(4)]);
    let start = methods.iter().position(|m| m == "Tracing.start").unwrap();
    let end = methods.iter().position(|m| m == "Tracing.end").unwrap();
    assert!(nav < start && start < end);

    let back = decode_visit(&encode_visit(&rec).unwrap()).unwrap();
    assert_eq!(back, rec);
}

#[tokio::test(start_paused = true)]
async fn never_loading_page_is_partial_after_timeout_and_settle() {
    let mut sc = two_script_scenario();
    sc.fire_load = false;
    sc.hang_request = true;
    let (t, _log, _h) = spawn_in_memory(sc);
    let started = tokio::time::Instant::now();
    let rec = visit_with(t, "https://slow.test/", None, &CrawlConfig::default()).await.unwrap();
    let elapsed = started.elapsed().as_millis();
    assert!(rec.partial);
    assert_eq!(rec.load_ms, 30_000.0);
    assert_eq!(elapsed, 30_000 + 3_000 + 5_000);
}

#[tokio::test(start_paused = true)]
async fn workers_are_attached_before_profiling() {
    let (t, log, _h) = spawn_in_memory(miner_scenario(4));
    let rec = visit_with(t, "https://miner.test/", None, &CrawlConfig::phase(2)).await.unwrap();
    assert_eq!(rec.worker_count, 4);
    assert!(rec.attach_failures.is_empty());
    let start = log.position(None, "Tracing.start").unwrap();
    for w in 0..4 {
        let s = format!("worker-{w}");
        let enable = log.position(Some(&s), "Debugger.enable").expect("attached");
        let resume = log.position(Some(&s), "Runtime.runIfWaitingForDebugger").expect("resumed");
        assert!(enable < start && resume < start);
    }
    assert_eq!(rec.scripts.len(), 5);
    assert_eq!(rec.scripts.iter().filter(|s| s.context == ScriptContext::Worker).count(), 4);
    assert_eq!(rec.wasm_modules.len(), 1);
    assert_eq!(rec.wasm_modules[0].function_bodies.len(), 2);
    assert_eq!(rec.ws_frames.len(), 2);
    assert_eq!(rec.ws_frames[0].endpoint, "wss://pool.miner.test/proxy");

    let verdict = cryptojack::profile::phase2_default(&rec).unwrap();
    assert!(verdict.active);
    let top = verdict.top.unwrap();
    assert_eq!(top.attributed_function.function_name, "hash");
    assert!((top.load_pct - 4.0 * 4000.0 / 30_000.0 * 100.0).abs() < 1e-6);
}

#[tokio::test(start_paused = true)]
async fn attach_failure_is_recorded_not_fatal() {
    let mut sc = miner_scenario(2);
    sc.workers[1].fail_attach = true;
    let (t, _log, _h) = spawn_in_memory(sc);
    let rec = visit_with(t, "https://miner.test/", None, &CrawlConfig::default()).await.unwrap();
    assert_eq!(rec.worker_count, 2);
    assert_eq!(rec.attach_failures.len(), 1);
    assert!(rec.attach_failures[0].starts_with("worker-1"));
}

#[tokio::test(start_paused = true)]
async fn disconnect_is_an_error() {
    let (t, _log, h) = spawn_in_memory(two_script_scenario());
    h.abort();
    let _ = h.await;
    let err = visit_with(t, "https://shop.test/", None, &CrawlConfig::default()).await.unwrap_err();
    assert!(matches!(err, CollectError::Disconnected), "{err}");
}

#[tokio::test]
async fn unreachable_endpoint_is_a_connection_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let err = visit("https://a.test/", &CrawlConfig::default(), &format!("ws://127.0.0.1:{port}/"))
        .await
        .unwrap_err();
    assert!(matches!(err, CollectError::Connect { .. }), "{err}");
}

#[tokio::test]
async fn websocket_endpoint_and_wall_clock_duration() {
    let ep = MockEndpoint::bind(two_script_scenario()).await.unwrap();
    let cfg = CrawlConfig {
        profile_ms: 400,
        settle_extra_ms: 100,
        ..Default::default()
    };
    let rec = visit("https://shop.test/", &cfg, &ep.url()).await.unwrap();
    let d = rec.profile.as_ref().unwrap().duration_ms;
    assert!((d - 400.0).abs() <= 40.0, "{d}");
    assert_eq!(rec.scripts.len(), 2);
    assert!(ep.log.position(None, "Page.addScriptToEvaluateOnNewDocument").unwrap() < ep.log.position(None, "Page.navigate").unwrap());
    let back = decode_visit(&encode_visit(&rec).unwrap()).unwrap();
    assert_eq!(back, rec);
}

#[tokio::test]
async fn crawl_keeps_target_order() {
    let a = MockEndpoint::bind(two_script_scenario()).await.unwrap();
    let b = MockEndpoint::bind(two_script_scenario()).await.unwrap();
    let cfg = CrawlConfig {
        profile_ms: 50,
        settle_extra_ms: 10,
        parallel_sessions: 2,
        ..Default::default()
    };
    let targets = cryptojack::collector::parse_targets("1,https://one.test/\n2,https://two.test/\n3,https://three.test/\n");
    let out = cryptojack::collector::crawl(targets, vec![a.url(), b.url()], cfg).await;
    let sites: Vec<String> = out.iter().map(|(_, r)| r.as_ref().unwrap().site.clone()).collect();
    assert_eq!(sites, ["one.test", "two.test", "three.test"]);
    assert_eq!(out[2].1.as_ref().unwrap().rank, Some(3));
}

/// Evaluates the override in node against a navigator claiming 4 cores.
fn node_reads(cores: u32) -> Option<String> {
    let harness = format!(
        "class Navigator {{ get hardwareConcurrency() {{ return 4; }} }}\n\
         Object.defineProperty(globalThis, 'navigator', {{ value: new Navigator(), configurable: true }});\n\
         {script}\n{script}\nprocess.stdout.write(String(navigator.hardwareConcurrency));",
        script = inject_core_override(cores)
    );
    let out = Command::new("node").arg("-e").arg(harness).output().ok()?;
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    Some(String::from_utf8(out.stdout).unwrap())
}

#[test]
fn core_override_evaluates_in_a_js_engine() {
    let Some(four) = node_reads(4) else {
        eprintln!("node not available; skipping evaluation");
        return;
    };
    assert_eq!(four, "4");
    assert_eq!(node_reads(1).unwrap(), "1");
    assert_eq!(node_reads(64).unwrap(), "64");
}
