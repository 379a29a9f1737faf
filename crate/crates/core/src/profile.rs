//! Per-function CPU load from aggregated call stacks, phase-1 candidate
//! heuristics and phase-2 active-miner verdicts.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::{FrameRef, VisitRecord};

/// Pseudo-function that receives Wasm time when no JavaScript caller is on the stack.
pub const WASM_ROOT: &str = "wasm-root";

pub const PHASE1_LOAD_THRESHOLD_PCT: f64 = 5.0;
pub const PHASE1_WORKER_THRESHOLD: u32 = 3;
pub const PHASE2_LOAD_THRESHOLD_PCT: f64 = 10.0;
pub const PHASE2_MIN_DURATION_MS: f64 = 30_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("record for {0} has no profile")]
    MissingProfile(String),
}

/// CPU time attributed to one function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionLoad {
    pub attributed_function: FrameRef,
    pub script_id: String,
    pub total_ms: f64,
    /// Percent of one core: `total_ms / duration_ms * 100`. Summed over
    /// workers, so it may reach `reported_cores * 100`.
    pub load_pct: f64,
    /// Percent of the whole (reported) machine: `load_pct / reported_cores`.
    pub machine_pct: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateFlags {
    pub high_load: bool,
    pub uses_wasm: bool,
    pub many_workers: bool,
}

impl CandidateFlags {
    pub fn candidate(&self) -> bool {
        self.high_load || self.uses_wasm || self.many_workers
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerVerdict {
    pub active: bool,
    pub top: Option<FunctionLoad>,
    pub responsible_script_url: Option<String>,
}

impl MinerVerdict {
    pub fn inactive() -> Self {
        MinerVerdict {
            active: false,
            top: None,
            responsible_script_url: None,
        }
    }
}

/// The function a stack's leaf time is charged to, or `None` for engine
/// pseudo-frames like `(idle)` and `(program)`.
fn attribute(frames: &[FrameRef]) -> Option<FrameRef> {
    let leaf = frames.first()?;
    if leaf.is_wasm() {
        let caller = frames[1..]
            .iter()
            .find(|f| !f.is_wasm() && !f.script_id.is_empty() && !f.is_pseudo());
        return Some(caller.cloned().unwrap_or_else(|| FrameRef::new(WASM_ROOT, "")));
    }
    if leaf.is_pseudo() {
        return None;
    }
    Some(leaf.clone())
}

/// Groups frames of the same function across workers: each worker parses
/// its own copy of a script, so frames are keyed by script URL when the
/// script has one and by script id otherwise.
fn function_key(record: &VisitRecord, f: &FrameRef) -> (String, String) {
    let origin = match record.script(&f.script_id) {
        Some(s) if !s.is_inline() => s.url.clone(),
        _ => f.script_id.clone(),
    };
    (f.function_name.clone(), origin)
}

/// Aggregates self time per attributed function, descending by load.
///
/// Wasm leaf time goes to the nearest JavaScript caller. Ties are broken by
/// function name (then script id) ascending.
pub fn function_loads(record: &VisitRecord) -> Vec<FunctionLoad> {
    let Some(profile) = &record.profile else {
        return Vec::new();
    };
    let mut per_fn: HashMap<(String, String), (FrameRef, f64)> = HashMap::new();
    for stack in &profile.stacks {
        if stack.sample_count == 0 {
            continue;
        }
        if let Some(f) = attribute(&stack.frames) {
            let entry = per_fn
                .entry(function_key(record, &f))
                .or_insert_with(|| (f.clone(), 0.0));
            if f < entry.0 {
                entry.0 = f;
            }
            entry.1 += stack.total_ms;
        }
    }
    let cores = f64::from(record.reported_cores.max(1));
    let mut loads: Vec<FunctionLoad> = per_fn
        .into_values()
        .map(|(f, total_ms)| {
            let load_pct = total_ms / profile.duration_ms * 100.0;
            FunctionLoad {
                script_id: f.script_id.clone(),
                attributed_function: f,
                total_ms,
                load_pct,
                machine_pct: load_pct / cores,
            }
        })
        .collect();
    loads.sort_by(|a, b| {
        b.total_ms
            .total_cmp(&a.total_ms)
            .then_with(|| a.attributed_function.cmp(&b.attributed_function))
    });
    loads
}

/// Phase-1 heuristics; `high_load` is false when the record has no profile.
pub fn phase1_flags(record: &VisitRecord, load_threshold_pct: f64, worker_threshold: u32) -> CandidateFlags {
    let high_load = function_loads(record)
        .first()
        .is_some_and(|top| top.load_pct > load_threshold_pct);
    CandidateFlags {
        high_load,
        uses_wasm: !record.wasm_modules.is_empty(),
        many_workers: record.worker_count > worker_threshold,
    }
}

pub fn phase1_default(record: &VisitRecord) -> CandidateFlags {
    phase1_flags(record, PHASE1_LOAD_THRESHOLD_PCT, PHASE1_WORKER_THRESHOLD)
}

/// Phase-2 verdict: active iff the top function's load reaches `threshold_pct`.
pub fn phase2_verdict(record: &VisitRecord, threshold_pct: f64) -> Result<MinerVerdict, AnalysisError> {
    let profile = record
        .profile
        .as_ref()
        .ok_or_else(|| AnalysisError::MissingProfile(record.site.clone()))?;
    if profile.duration_ms < PHASE2_MIN_DURATION_MS {
        tracing::warn!(
            site = %record.site,
            duration_ms = profile.duration_ms,
            "phase-2 verdict on a profile shorter than 30 s"
        );
    }
    let top = function_loads(record).into_iter().next();
    let active = top.as_ref().is_some_and(|t| t.load_pct >= threshold_pct);
    let responsible_script_url = top
        .as_ref()
        .and_then(|t| record.script(&t.script_id))
        .map(|s| s.url.clone());
    Ok(MinerVerdict {
        active,
        top,
        responsible_script_url,
    })
}

pub fn phase2_default(record: &VisitRecord) -> Result<MinerVerdict, AnalysisError> {
    phase2_verdict(record, PHASE2_LOAD_THRESHOLD_PCT)
}
