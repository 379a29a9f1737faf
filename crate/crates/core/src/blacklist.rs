//! A practical subset of ad-block filter syntax, matched against collected
//! script URLs and WebSocket endpoints.
//!
//! Supported: `||` host anchors, `|` start and end anchors, `*` and `^`.
//! Comments (`!`, `[Adblock ...]`), element hiding (`##`, `#@#`, `#?#`) and
//! exceptions (`@@`) are skipped and counted. `$` options are stripped and
//! the rule is kept with match-only semantics.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::telemetry::VisitRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Plain,
    DomainAnchor,
    LeftAnchor,
    RightAnchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token {
    Char(char),
    Star,
    Sep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterRule {
    pub raw: String,
    pub kind: RuleKind,
    /// Set for `...|` even when the start is anchored too.
    pub end_anchored: bool,
    tokens: Vec<Token>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub rules: Vec<FilterRule>,
    pub comments: usize,
    pub cosmetic: usize,
    pub exceptions: usize,
    pub options_stripped: usize,
    /// `(line number, reason)`
    pub malformed: Vec<(usize, String)>,
}

impl ParseReport {
    pub fn skipped_with_warning(&self) -> usize {
        self.cosmetic + self.exceptions
    }
}

fn tokenize(pattern: &str) -> Vec<Token> {
    let mut out: Vec<Token> = Vec::with_capacity(pattern.len());
    for c in pattern.chars() {
        let t = match c {
            '*' => Token::Star,
            '^' => Token::Sep,
            c => Token::Char(c.to_ascii_lowercase()),
        };
        if t == Token::Star && out.last() == Some(&Token::Star) {
            continue;
        }
        out.push(t);
    }
    out
}

pub fn parse_rule(line: &str) -> Result<FilterRule, String> {
    let raw = line.trim();
    let mut body = raw;
    if let Some(i) = body.rfind('$') {
        body = &body[..i];
    }
    if body.len() > 1 && body.starts_with('/') && body.ends_with('/') {
        return Err("regular-expression rules are not supported".into());
    }
    if body.chars().any(char::is_whitespace) {
        return Err("whitespace inside rule".into());
    }
    let (kind, rest) = if let Some(r) = body.strip_prefix("||") {
        (RuleKind::DomainAnchor, r)
    } else if let Some(r) = body.strip_prefix('|') {
        (RuleKind::LeftAnchor, r)
    } else {
        (RuleKind::Plain, body)
    };
    let (rest, end_anchored) = match rest.strip_suffix('|') {
        Some(r) => (r, true),
        None => (rest, false),
    };
    let kind = if kind == RuleKind::Plain && end_anchored {
        RuleKind::RightAnchor
    } else {
        kind
    };
    if rest.is_empty() || rest.chars().all(|c| c == '*') && kind != RuleKind::DomainAnchor {
        return Err("empty pattern".into());
    }
    if rest.contains('|') {
        return Err("'|' inside pattern".into());
    }
    Ok(FilterRule {
        raw: raw.to_owned(),
        kind,
        end_anchored,
        tokens: tokenize(rest),
    })
}

pub fn parse_rules(text: &str) -> ParseReport {
    let mut report = ParseReport::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('!') || line.starts_with('[') {
            report.comments += 1;
        } else if line.contains("##") || line.contains("#@#") || line.contains("#?#") || line.contains("#$#") {
            report.cosmetic += 1;
        } else if line.starts_with("@@") {
            report.exceptions += 1;
        } else {
            match parse_rule(line) {
                Ok(rule) => {
                    if line.contains('$') {
                        report.options_stripped += 1;
                    }
                    report.rules.push(rule);
                }
                Err(reason) => report.malformed.push((i + 1, reason)),
            }
        }
    }
    if report.skipped_with_warning() > 0 {
        tracing::warn!(
            cosmetic = report.cosmetic,
            exceptions = report.exceptions,
            "skipped element-hiding and exception rules"
        );
    }
    report
}

fn is_separator(c: char) -> bool {
    !(c.is_ascii_alphanumeric() || "_-.%".contains(c))
}

fn match_here(tokens: &[Token], text: &[char], end_anchored: bool) -> bool {
    match tokens.split_first() {
        None => !end_anchored || text.is_empty(),
        Some((Token::Star, rest)) => (0..=text.len()).any(|k| match_here(rest, &text[k..], end_anchored)),
        Some((Token::Sep, rest)) => match text.split_first() {
            None => match_here(rest, text, end_anchored),
            Some((&c, tail)) => is_separator(c) && match_here(rest, tail, end_anchored),
        },
        Some((Token::Char(p), rest)) => match text.split_first() {
            Some((&c, tail)) => c == *p && match_here(rest, tail, end_anchored),
            None => false,
        },
    }
}

/// `https://a/b` and `//a/b` both become `//a/b`.
fn scheme_relative(url: &str) -> &str {
    match url.find("://") {
        Some(i) if url[..i].chars().all(|c| c.is_ascii_alphanumeric() || "+-.".contains(c)) => &url[i + 1..],
        _ => url,
    }
}

/// Byte range of the host in an absolute or scheme-relative URL.
fn host_range(url: &str) -> Option<(usize, usize)> {
    let start = if let Some(i) = url.find("://") {
        i + 3
    } else if url.starts_with("//") {
        2
    } else {
        return None;
    };
    let rest = &url[start..];
    let rest_start = rest.find('@').map_or(0, |i| {
        if rest[..i].contains('/') {
            0
        } else {
            i + 1
        }
    });
    let host = &rest[rest_start..];
    let len = host.find(['/', '?', '#', ':']).unwrap_or(host.len());
    Some((start + rest_start, start + rest_start + len))
}

/// Case-insensitive match of one rule against a URL.
pub fn matches(rule: &FilterRule, url: &str) -> bool {
    let lower = url.to_ascii_lowercase();
    match rule.kind {
        RuleKind::Plain | RuleKind::RightAnchor => {
            let text: Vec<char> = scheme_relative(&lower).chars().collect();
            (0..=text.len()).any(|k| match_here(&rule.tokens, &text[k..], rule.end_anchored))
        }
        RuleKind::LeftAnchor => {
            let text: Vec<char> = lower.chars().collect();
            match_here(&rule.tokens, &text, rule.end_anchored)
        }
        RuleKind::DomainAnchor => {
            let Some((hs, he)) = host_range(&lower) else {
                return false;
            };
            let host = &lower[hs..he];
            std::iter::once(hs)
                .chain(host.match_indices('.').map(|(i, _)| hs + i + 1))
                .filter(|&p| p < he)
                .any(|p| {
                    let text: Vec<char> = lower[p..].chars().collect();
                    match_here(&rule.tokens, &text, rule.end_anchored)
                })
        }
    }
}

pub fn any_match(rules: &[FilterRule], url: &str) -> bool {
    rules.iter().any(|r| matches(r, url))
}

/// URLs of a record that take part in matching: every script URL and every
/// WebSocket endpoint.
pub fn record_urls(record: &VisitRecord) -> BTreeSet<&str> {
    record
        .scripts
        .iter()
        .filter(|s| !s.is_inline())
        .map(|s| s.url.as_str())
        .chain(record.ws_frames.iter().map(|f| f.endpoint.as_str()))
        .collect()
}

pub fn detected_sites(rules: &[FilterRule], corpus: &[VisitRecord]) -> BTreeSet<String> {
    corpus
        .par_iter()
        .filter(|r| record_urls(r).into_iter().any(|u| any_match(rules, u)))
        .map(|r| r.site.clone())
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListStats {
    pub list: String,
    pub detections: usize,
    pub both: usize,
    pub only_they: usize,
    pub only_we: usize,
}

pub fn set_stats(list: &str, ours: &BTreeSet<String>, theirs: &BTreeSet<String>) -> ListStats {
    let both = ours.intersection(theirs).count();
    ListStats {
        list: list.to_owned(),
        detections: theirs.len(),
        both,
        only_they: theirs.len() - both,
        only_we: ours.len() - both,
    }
}

pub fn compare(
    verdict_sites: &BTreeSet<String>,
    lists: &[(String, Vec<FilterRule>)],
    corpus: &[VisitRecord],
) -> Vec<ListStats> {
    lists
        .iter()
        .map(|(name, rules)| set_stats(name, verdict_sites, &detected_sites(rules, corpus)))
        .collect()
}

pub fn write_stats_csv<W: Write>(w: W, stats: &[ListStats]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for s in stats {
        out.serialize(s)?;
    }
    out.flush()?;
    Ok(())
}
