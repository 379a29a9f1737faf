use chrono::{TimeZone, Utc};
use cryptojack::telemetry::{
    Direction, FrameRef, ProfileTrace, ScriptArtifact, ScriptContext, StackAggregate, VisitRecord, WasmArtifact,
    WsFrame, WsPayload,
};

/// The record frozen in `data/golden.ndjson`.
pub fn golden_record() -> VisitRecord {
    let mut r = VisitRecord::new("miner.example", Utc.with_ymd_and_hms(2018, 3, 12, 9, 30, 0).unwrap());
    r.rank = Some(4242);
    r.load_ms = 1834.5;
    r.worker_count = 4;
    r.scripts = vec![
        ScriptArtifact::from_source(
            "17",
            "https://coinhive.com/lib/coinhive.min.js",
            "var CoinHive=CoinHive||{};",
            ScriptContext::MainPage,
            true,
        ),
        ScriptArtifact::from_source("18", "inline", "new CoinHive.Anonymous('KEY').start();", ScriptContext::MainPage, false),
    ];
    r.wasm_modules = vec![WasmArtifact {
        origin_script_id: "17".into(),
        function_bodies: vec![vec![0x00, 0x0b], vec![0x01, 0x01, 0x7f, 0x20, 0x00, 0x0b]],
    }];
    r.profile = Some(ProfileTrace {
        duration_ms: 5000.0,
        stacks: vec![StackAggregate {
            frames: vec![
                FrameRef::wasm(),
                FrameRef::new("Module._akki_hash", "17"),
                FrameRef::new("(root)", ""),
            ],
            sample_count: 73938,
            total_ms: 14375.3,
        }],
    });
    r.ws_frames = vec![
        WsFrame {
            endpoint: "wss://ws001.coinhive.com/proxy".into(),
            direction: Direction::Sent,
            payload: WsPayload::Text(r#"{"type":"auth","params":{"site_key":"KEY"}}"#.into()),
            at_ms: 912.25,
        },
        WsFrame {
            endpoint: "wss://ws001.coinhive.com/proxy".into(),
            direction: Direction::Received,
            payload: WsPayload::Binary { binary: vec![0xde, 0xad] },
            at_ms: 990.0,
        },
    ];
    r
}
