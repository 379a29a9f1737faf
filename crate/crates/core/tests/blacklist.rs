use std::collections::BTreeSet;

use chrono::Utc;
use cryptojack::blacklist::{compare, detected_sites, matches, parse_rule, parse_rules, set_stats, RuleKind};
use cryptojack::telemetry::{ScriptArtifact, ScriptContext, VisitRecord};
use cryptojack::testbed::testbed_corpus;
use proptest::prelude::*;
use regex::Regex;

/// Translates a filter rule into a regex over the lowercased URL.
fn oracle(rule: &str, url: &str) -> bool {
    let url = url.to_ascii_lowercase();
    let (prefix, body, subject) = if let Some(r) = rule.strip_prefix("||") {
        ("^[a-z0-9+.-]+://(?:[^/?#:@]*\\.)?".to_string(), r, url.clone())
    } else if let Some(r) = rule.strip_prefix('|') {
        ("^".to_string(), r, url.clone())
    } else {
        // unanchored rules see the URL without its scheme
        let rel = match url.find("://") {
            Some(i) => url[i + 1..].to_string(),
            None => url.clone(),
        };
        (String::new(), rule, rel)
    };
    let (body, end) = match body.strip_suffix('|') {
        Some(b) => (b, "$"),
        None => (body, ""),
    };
    let mut re = prefix;
    for c in body.to_ascii_lowercase().chars() {
        match c {
            '*' => re.push_str(".*"),
            '^' => re.push_str("(?:[^a-z0-9_.%-]|$)"),
            c => re.push_str(&regex::escape(&c.to_string())),
        }
    }
    re.push_str(end);
    Regex::new(&re).unwrap().is_match(&subject)
}

#[test]
fn wildcard_path_rule() {
    let r = parse_rule("*/coinhive.min.js").unwrap();
    assert_eq!(r.kind, RuleKind::Plain);
    assert!(matches(&r, "//coinhive.com/lib/coinhive.min.js"));
    assert!(matches(&r, "https://coinhive.com/lib/coinhive.min.js"));
    assert!(!matches(&r, "https://coinhive.com/lib/coinhive.js"));
}

#[test]
fn anchors_and_separators() {
    let r = parse_rule("||coinhive.com^").unwrap();
    assert!(matches(&r, "https://coinhive.com/lib/x.js"));
    assert!(matches(&r, "wss://ws1.coinhive.com:443/proxy"));
    assert!(matches(&r, "https://coinhive.com"));
    assert!(!matches(&r, "https://notcoinhive.com/"));
    assert!(!matches(&r, "https://coinhive.com.evil.test/"));
    let r = parse_rule("|https://a.test/x.js|").unwrap();
    assert!(matches(&r, "https://a.test/x.js"));
    assert!(!matches(&r, "https://a.test/x.js?v=1"));
    let r = parse_rule("miner.js|").unwrap();
    assert_eq!(r.kind, RuleKind::RightAnchor);
    assert!(matches(&r, "http://x.test/a/miner.js"));
    assert!(!matches(&r, "http://x.test/a/miner.js.map"));
}

#[test]
fn list_parsing_counts() {
    let text = "! comment\n[Adblock Plus 2.0]\n||coinhive.com^$third-party\nexample.com##.ad\n@@||good.test^\n/min[a-z]+\\.js/\n\n*/deepMiner.js\n";
    let rep = parse_rules(text);
    assert_eq!(rep.rules.len(), 2);
    assert_eq!(rep.comments, 2);
    assert_eq!(rep.cosmetic, 1);
    assert_eq!(rep.exceptions, 1);
    assert_eq!(rep.options_stripped, 1);
    assert_eq!(rep.malformed.len(), 1);
    assert_eq!(rep.malformed[0].0, 6);
    assert_eq!(rep.skipped_with_warning(), 2);
}

#[test]
fn testbed_list_catches_every_miner() {
    let (miners, benign) = testbed_corpus(4, 30_000.0, 3);
    let corpus: Vec<VisitRecord> = miners.iter().chain(&benign).cloned().collect();
    let rules = parse_rules("||coinhive.testbed.local^\n||cryptoloot.testbed.local^\n").rules;
    let ours: BTreeSet<String> = miners.iter().map(|m| m.site.clone()).collect();
    let stats = compare(&ours, &[("testbed".to_string(), rules)], &corpus);
    assert_eq!(stats[0].detections, 24);
    assert_eq!(stats[0].both, 24);
    assert_eq!(stats[0].only_they, 0);
    assert_eq!(stats[0].only_we, 0);
}

fn arb_rule() -> impl Strategy<Value = String> {
    (
        prop_oneof![Just(""), Just("|"), Just("||")],
        proptest::collection::vec(prop_oneof![Just("a"), Just("b"), Just("."), Just("/"), Just("*"), Just("^"), Just("c")], 1..6),
        any::<bool>(),
    )
        .prop_map(|(anchor, body, end)| format!("{anchor}{}{}", body.concat(), if end { "|" } else { "" }))
}

fn arb_url() -> impl Strategy<Value = String> {
    (
        prop_oneof![Just("http"), Just("https"), Just("wss")],
        "[ab]{1,3}(\\.[abc]{1,3}){0,2}",
        "(/[abc.]{0,4}){0,3}(\\?[ab]=[ab])?",
    )
        .prop_map(|(s, h, p)| format!("{s}://{h}{p}"))
}

proptest! {
    #[test]
    fn matcher_agrees_with_regex_oracle(rule in arb_rule(), url in arb_url()) {
        if let Ok(r) = parse_rule(&rule) {
            prop_assert_eq!(matches(&r, &url), oracle(&rule, &url), "rule {} url {}", rule, url);
        }
    }

    #[test]
    fn plain_rules_ignore_the_scheme(rule in arb_rule(), url in arb_url()) {
        if rule.starts_with('|') {
            return Ok(());
        }
        if let Ok(r) = parse_rule(&rule) {
            let rest = &url[url.find("://").unwrap() + 3..];
            let variants: Vec<bool> = ["http://", "https://", "wss://", "//"]
                .iter()
                .map(|s| matches(&r, &format!("{s}{rest}")))
                .collect();
            prop_assert!(variants.iter().all(|&v| v == variants[0]), "{} {:?}", rule, variants);
        }
    }

    #[test]
    fn set_identities_hold(
        urls in proptest::collection::vec(proptest::collection::vec(arb_url(), 0..3), 1..25),
        rules in proptest::collection::vec(arb_rule(), 1..4),
        ours_mask in proptest::collection::vec(any::<bool>(), 25),
    ) {
        let corpus: Vec<VisitRecord> = urls
            .iter()
            .enumerate()
            .map(|(i, us)| {
                let mut r = VisitRecord::new(format!("s{i}.test"), Utc::now());
                for (j, u) in us.iter().enumerate() {
                    r.scripts.push(ScriptArtifact::from_source(j.to_string(), u.clone(), "", ScriptContext::MainPage, false));
                }
                r
            })
            .collect();
        let parsed: Vec<_> = rules.iter().filter_map(|r| parse_rule(r).ok()).collect();
        let theirs = detected_sites(&parsed, &corpus);
        let ours: BTreeSet<String> = corpus
            .iter()
            .zip(&ours_mask)
            .filter(|(_, &m)| m)
            .map(|(r, _)| r.site.clone())
            .collect();
        let s = set_stats("l", &ours, &theirs);
        prop_assert_eq!(s.detections, s.both + s.only_they);
        prop_assert_eq!(ours.len(), s.both + s.only_we);
        prop_assert_eq!(s.both, ours.intersection(&theirs).count());
        // brute-force detection through the oracle
        let want: BTreeSet<String> = corpus
            .iter()
            .filter(|r| r.scripts.iter().any(|sc| rules.iter().any(|ru| parse_rule(ru).is_ok() && oracle(ru, &sc.url))))
            .map(|r| r.site.clone())
            .collect();
        prop_assert_eq!(theirs, want);
    }
}
