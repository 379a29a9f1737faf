//! One PASS/FAIL line per acceptance criterion. Run with `--nocapture` to
//! see the report; the test fails if any criterion fails.

mod support;

use std::collections::{BTreeMap, BTreeSet};

use chrono::Utc;
use cryptojack::blacklist::{detected_sites, matches, parse_rule, set_stats};
use cryptojack::collector::mock::{spawn_in_memory, MockScenario, MockScript, MockStack, MockWorker};
use cryptojack::collector::{inject_core_override, visit_with, CrawlConfig};
use cryptojack::economics::{estimate_revenue, upper_bound, PayoutModel, VisitStats};
use cryptojack::fingerprint::{apply_fingerprints, build_fingerprints, support_threshold};
use cryptojack::pool::credited_hashes;
use cryptojack::profile::{function_loads, phase2_default, MinerVerdict};
use cryptojack::similarity::{cluster, cosine, similarity_matrix, vectorize, NGramVector};
use cryptojack::telemetry::{decode_visit, encode_visit, FrameRef, ProfileTrace, ScriptArtifact, ScriptContext, StackAggregate, VisitRecord, WASM_SCRIPT_ID};
use cryptojack::testbed::{testbed_corpus, testbed_specs};
use cryptojack::wallet::{keccak::keccak256, PrefixTable, WalletAddress};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha3::{Digest, Keccak256};

struct Report(Vec<(u8, bool, String)>);

impl Report {
    fn check(&mut self, id: u8, ok: bool, detail: String) {
        println!("{} {id:>2}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.0.push((id, ok, detail));
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn c1_worked_example() -> (bool, String) {
    let rec = support::golden::golden_record();
    let top = &function_loads(&rec)[0];
    let ok = (top.machine_pct - 71.9).abs() <= 0.1 && top.attributed_function.function_name == "Module._akki_hash";
    (ok, format!("worked profile load {:.2}% (want 71.9 +/- 0.1)", top.machine_pct))
}

fn c2_testbed_detection() -> (bool, String) {
    let (miners, benign) = testbed_corpus(4, 30_000.0, 5);
    let hit = miners.iter().filter(|m| phase2_default(m).is_ok_and(|v| v.active)).count();
    let fp = benign.iter().filter(|b| phase2_default(b).is_ok_and(|v| v.active)).count();
    (
        miners.len() == 24 && hit == 24 && fp == 0,
        format!("testbed: {hit}/{} miners active, {fp}/{} controls active", miners.len(), benign.len()),
    )
}

fn c3_throttle_floor() -> (bool, String) {
    let min = testbed_specs()
        .iter()
        .map(|s| s.throttle.modeled_load_pct(4))
        .fold(f64::INFINITY, f64::min);
    (min >= 19.0, format!("lowest modeled load on 4 cores {min:.2}% (want >= 19, 20 within 1 point)"))
}

fn c4_revenue() -> (bool, String) {
    let m = PayoutModel::default();
    let ub = upper_bound(13.5e6, &m).unwrap();
    let site = estimate_revenue(
        &VisitStats {
            site: "s".into(),
            visits_per_day: 1.3e6,
            avg_duration_s: 250.0,
        },
        &m,
    )
    .unwrap();
    let small = upper_bound(1550.0, &m).unwrap();
    let ok = rel(ub.xmr_per_day, 223.1) <= 0.005 && rel(site.xmr_per_day, 1.5) <= 0.05 && rel(small.usd_per_day, 5.8) <= 0.02;
    (
        ok,
        format!(
            "upper bound {:.1} XMR/day (223.1 +/- 0.5%), site {:.2} XMR/day (1.5 +/- 5%), 1550 core-hours {:.2} USD (5.8 +/- 2%)",
            ub.xmr_per_day, site.xmr_per_day, small.usd_per_day
        ),
    )
}

fn c5_pool_credit() -> (bool, String) {
    let c = credited_hashes([0xff, 0xff, 0xff, 0x00]);
    (c == 256, format!("share at target ffffff00 credits {c} hashes (want 256)"))
}

fn c6_wallets() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut vectors: Vec<Vec<u8>> = vec![Vec::new(), b"abc".to_vec(), vec![0; 136], vec![1; 137]];
    vectors.extend((0..8).map(|_| (0..rng.gen_range(1..400)).map(|_| rng.gen()).collect()));
    let keccak_ok = vectors.iter().all(|v| keccak256(v) == <[u8; 32]>::from(Keccak256::digest(v)));

    let table = PrefixTable::default();
    let alphabet: Vec<char> = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz".chars().collect();
    let (mut valid, mut mutations, mut survivors) = (0, 0, 0);
    for _ in 0..4 {
        let mut body = vec![0x12u8];
        body.extend((0..64).map(|_| rng.gen::<u8>()));
        let text = base58_monero::encode_check(&body).unwrap();
        if WalletAddress::parse(&text, &table).is_ok_and(|a| a.checksum_ok) {
            valid += 1;
        }
        let chars: Vec<char> = text.chars().collect();
        for pos in 0..chars.len() {
            for _ in 0..3 {
                let mut m = chars.clone();
                while m[pos] == chars[pos] {
                    m[pos] = alphabet[rng.gen_range(0..alphabet.len())];
                }
                let m: String = m.into_iter().collect();
                mutations += 1;
                if WalletAddress::parse(&m, &table).is_ok_and(|a| a.checksum_ok) {
                    survivors += 1;
                }
            }
        }
    }
    (
        keccak_ok && vectors.len() >= 10 && valid == 4 && mutations >= 1000 && survivors == 0,
        format!(
            "keccak agrees on {} vectors: {keccak_ok}; {valid}/4 fixture addresses valid; {survivors}/{mutations} mutations pass checksum",
            vectors.len()
        ),
    )
}

fn miner_site(name: &str, source: &str, active: bool) -> VisitRecord {
    let mut r = VisitRecord::new(name, Utc::now());
    r.scripts.push(ScriptArtifact::from_source("1", format!("https://{name}/m.js"), source, ScriptContext::MainPage, true));
    r.profile = Some(ProfileTrace {
        duration_ms: 30_000.0,
        stacks: vec![StackAggregate {
            frames: vec![FrameRef::new("mine", "1")],
            sample_count: 10,
            total_ms: if active { 20_000.0 } else { 10.0 },
        }],
    });
    r
}

fn c7_fingerprints() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut corpus = Vec::new();
    for i in 0..60 {
        let family = rng.gen_range(0..8);
        let active = rng.gen_bool(0.5);
        corpus.push(miner_site(&format!("s{i}.test"), &format!("family {family}"), active));
    }
    let miners: Vec<(VisitRecord, MinerVerdict)> = corpus
        .iter()
        .map(|r| (r.clone(), phase2_default(r).unwrap()))
        .filter(|(_, v)| v.active)
        .collect();
    let confirmed: BTreeSet<String> = miners.iter().map(|(r, _)| r.site.clone()).collect();
    let active_code: BTreeSet<_> = miners.iter().map(|(r, _)| r.scripts[0].source_hash).collect();
    let planted: BTreeSet<String> = corpus
        .iter()
        .filter(|r| !confirmed.contains(&r.site) && active_code.contains(&r.scripts[0].source_hash))
        .map(|r| r.site.clone())
        .collect();

    let mut superset = true;
    let mut monotone = true;
    let mut prev: Option<Vec<_>> = None;
    for f in [0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0] {
        let prints = build_fingerprints(&miners, f).unwrap();
        superset &= apply_fingerprints(&corpus, &prints, &confirmed).is_superset(&confirmed);
        if let Some(p) = &prev {
            monotone &= prints.iter().all(|x| p.contains(x));
        }
        prev = Some(prints);
    }
    let all = apply_fingerprints(&corpus, &build_fingerprints(&miners, 0.01).unwrap(), &confirmed);
    let flagged = planted.is_subset(&all) && !planted.is_empty();
    let boundary = support_threshold(0.01, 1939) == 20;
    (
        superset && monotone && flagged && boundary,
        format!(
            "superset of confirmed: {superset}; anti-monotone: {monotone}; {} planted inactive copies flagged: {flagged}; 1939 miners -> threshold {}",
            planted.len(),
            support_threshold(0.01, 1939)
        ),
    )
}

fn oracle_cosine(a: &str, b: &str, n: usize) -> f64 {
    let grams = |s: &str| {
        let t: Vec<&str> = s.split_whitespace().collect();
        let mut m: BTreeMap<String, f64> = BTreeMap::new();
        for w in t.windows(n) {
            *m.entry(w.join(" ")).or_default() += 1.0;
        }
        m
    };
    let (x, y) = (grams(a), grams(b));
    if x.is_empty() || y.is_empty() {
        return 0.0;
    }
    let dot: f64 = x.iter().map(|(k, v)| v * y.get(k).unwrap_or(&0.0)).sum();
    dot / (x.values().map(|v| v * v).sum::<f64>().sqrt() * y.values().map(|v| v * v).sum::<f64>().sqrt())
}

fn doc(rng: &mut ChaCha8Rng, vocab: u32, len: usize) -> String {
    (0..len).map(|_| format!("t{}", rng.gen_range(0..vocab))).collect::<Vec<_>>().join(" ")
}

fn c8_similarity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let docs: Vec<String> = (0..10).map(|_| doc(&mut rng, 5, 60)).collect();
    let v: Vec<NGramVector> = docs.iter().map(|d| vectorize(d, 3).unwrap()).collect();
    let m = similarity_matrix(&v).unwrap();
    let mut worst: f64 = 0.0;
    for (a, &i) in m.order.iter().enumerate() {
        for (b, &j) in m.order.iter().enumerate() {
            let want = if i == j { 1.0 } else { oracle_cosine(&docs[i], &docs[j], 3) };
            worst = worst.max((m.values[a][b] - want).abs());
            worst = worst.max((cosine(&v[i], &v[j]).unwrap() - oracle_cosine(&docs[i], &docs[j], 3)).abs());
        }
    }

    let fa = doc(&mut rng, 300, 250);
    let fb = doc(&mut rng, 300, 250);
    let mut fixture = Vec::new();
    for i in 0..10 {
        let base = if i < 5 { &fa } else { &fb };
        let mutated: Vec<String> = base
            .split(' ')
            .map(|t| if rng.gen_bool(0.03) { "zz".to_string() } else { t.to_string() })
            .collect();
        fixture.push(mutated.join(" "));
    }
    for _ in 0..4 {
        fixture.push(doc(&mut rng, 300, 250));
    }
    let fv: Vec<NGramVector> = fixture.iter().map(|d| vectorize(d, 3).unwrap()).collect();
    let major = cluster(&fv, 0.7).unwrap().major_clusters();
    (
        worst < 1e-9 && major == 2,
        format!("max deviation from brute-force oracle {worst:.1e} (want < 1e-9); planted fixture -> {major} major clusters at cut 0.7 (want 2)"),
    )
}

fn c9_blacklist() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let hosts = ["a.test", "coin.a.test", "b.test", "miner.b.test"];
    let paths = ["/m.js", "/lib/coinhive.min.js", "/x/y.js", "/app.js"];
    let rules: Vec<_> = ["||coin.a.test^", "*/coinhive.min.js", "/x/y.js", "app.js|"]
        .iter()
        .map(|r| parse_rule(r).unwrap())
        .collect();
    let mut identities = true;
    for round in 0..50 {
        let corpus: Vec<VisitRecord> = (0..rng.gen_range(1..30))
            .map(|i| {
                let mut r = VisitRecord::new(format!("r{round}-{i}.test"), Utc::now());
                for j in 0..rng.gen_range(0..3) {
                    let url = format!("https://{}{}", hosts[rng.gen_range(0..4)], paths[rng.gen_range(0..4)]);
                    r.scripts.push(ScriptArtifact::from_source(j.to_string(), url, "", ScriptContext::MainPage, false));
                }
                r
            })
            .collect();
        let theirs = detected_sites(&rules[..rng.gen_range(1..=4)], &corpus);
        let ours: BTreeSet<String> = corpus.iter().filter(|_| rng.gen_bool(0.4)).map(|r| r.site.clone()).collect();
        let s = set_stats("l", &ours, &theirs);
        identities &= s.detections == s.both + s.only_they && ours.len() == s.both + s.only_we;
    }
    let example = matches(&parse_rule("*/coinhive.min.js").unwrap(), "//coinhive.com/lib/coinhive.min.js");
    (
        identities && example,
        format!("set identities on 50 random corpora: {identities}; \"*/coinhive.min.js\" matches \"//coinhive.com/lib/coinhive.min.js\": {example}"),
    )
}

fn c10_references() -> (bool, String) {
    // fixture-scale analogues of the large-corpus figures
    let ten = {
        let corpus = vec![
            miner_site("m1.test", "one", true),
            miner_site("m2.test", "two", true),
            miner_site("m3.test", "three", true),
            miner_site("c1.test", "one", false),
            miner_site("c2.test", "three", false),
            miner_site("b1.test", "b1", false),
            miner_site("b2.test", "b2", false),
            miner_site("b3.test", "b3", false),
            miner_site("b4.test", "b4", false),
            miner_site("b5.test", "b5", false),
        ];
        let miners: Vec<_> = corpus
            .iter()
            .map(|r| (r.clone(), phase2_default(r).unwrap()))
            .filter(|(_, v)| v.active)
            .collect();
        let conf: BTreeSet<String> = miners.iter().map(|(r, _)| r.site.clone()).collect();
        apply_fingerprints(&corpus, &build_fingerprints(&miners, 0.01).unwrap(), &conf).len()
    };
    (
        ten == 5,
        format!(
            "large-corpus figures (site counts, cluster and fingerprint counts, country/category tables, wallet totals) are references only; fixture analogue: 10-site corpus -> {ten} sites (want 5)"
        ),
    )
}

async fn c11_collector() -> (bool, String) {
    let workers = 3;
    let mut scripts = vec![MockScript {
        id: "1".into(),
        url: "https://m.test/miner.js".into(),
        source: "startMining()".into(),
        worker: None,
    }];
    let mut threads = Vec::new();
    for w in 0..workers {
        let id = format!("{}", 10 + w);
        scripts.push(MockScript {
            id: id.clone(),
            url: "https://m.test/worker.js".into(),
            source: "onmessage = hash;".into(),
            worker: Some(w),
        });
        threads.push(vec![MockStack::new(&[("<WASM UNNAMED>", WASM_SCRIPT_ID), ("hash", &id), ("(root)", "")], 500, 1000.0)]);
    }
    let scenario = MockScenario {
        scripts,
        workers: (0..workers)
            .map(|w| MockWorker {
                url: format!("https://m.test/worker.js#{w}"),
                fail_attach: false,
            })
            .collect(),
        threads,
        ..Default::default()
    };
    let (t, log, _h) = spawn_in_memory(scenario);
    let Ok(rec) = visit_with(t, "https://m.test/", None, &CrawlConfig::default()).await else {
        return (false, "visit against the mock endpoint failed".into());
    };
    let inject = log.position(None, "Page.addScriptToEvaluateOnNewDocument");
    let nav = log.position(None, "Page.navigate");
    let ordered = matches!((inject, nav), (Some(a), Some(b)) if a < b) && log.injected() == vec![inject_core_override(4)];
    let attached = (0..workers).all(|w| {
        let s = format!("worker-{w}");
        log.position(Some(&s), "Runtime.runIfWaitingForDebugger").is_some()
    }) && rec.worker_count == workers as u32
        && rec.attach_failures.is_empty();
    let round_trip = encode_visit(&rec).ok().and_then(|l| decode_visit(&l).ok()).is_some_and(|b| b == rec);
    (
        ordered && attached && round_trip,
        format!("override before navigation: {ordered}; {workers} workers attached: {attached}; archive round-trip: {round_trip}"),
    )
}

#[tokio::test(start_paused = true)]
async fn acceptance() {
    let mut r = Report(Vec::new());
    let (ok, d) = c1_worked_example();
    r.check(1, ok, d);
    let (ok, d) = c2_testbed_detection();
    r.check(2, ok, d);
    let (ok, d) = c3_throttle_floor();
    r.check(3, ok, d);
    let (ok, d) = c4_revenue();
    r.check(4, ok, d);
    let (ok, d) = c5_pool_credit();
    r.check(5, ok, d);
    let (ok, d) = c6_wallets();
    r.check(6, ok, d);
    let (ok, d) = c7_fingerprints();
    r.check(7, ok, d);
    let (ok, d) = c8_similarity();
    r.check(8, ok, d);
    let (ok, d) = c9_blacklist();
    r.check(9, ok, d);
    let (ok, d) = c10_references();
    r.check(10, ok, d);
    let (ok, d) = c11_collector().await;
    r.check(11, ok, d);

    let failed: Vec<u8> = r.0.iter().filter(|(_, ok, _)| !ok).map(|(id, _, _)| *id).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
