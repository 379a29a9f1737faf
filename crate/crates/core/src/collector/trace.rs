//! V8 CPU-profiler trace events (`Profile` / `ProfileChunk`) to per-stack
//! aggregates.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde_json::Value;

use crate::telemetry::{FrameRef, StackAggregate, WASM_FRAME_NAME};

#[derive(Debug, Clone)]
struct Node {
    frame: FrameRef,
    parent: Option<u64>,
}

#[derive(Debug, Default)]
struct Thread {
    nodes: HashMap<u64, Node>,
    samples: Vec<(u64, f64)>,
}

fn as_id(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn frame_of(call_frame: &Value, known_scripts: &HashSet<String>) -> FrameRef {
    let name = call_frame["functionName"].as_str().unwrap_or("");
    let url = call_frame["url"].as_str().unwrap_or("");
    let code_type = call_frame["codeType"].as_str().unwrap_or("");
    if name == WASM_FRAME_NAME || url.starts_with("wasm://") || code_type.eq_ignore_ascii_case("wasm") {
        return FrameRef::wasm();
    }
    let name = if name.is_empty() { "(anonymous)" } else { name };
    let script_id = match call_frame.get("scriptId").and_then(as_id) {
        None => String::new(),
        Some(id) if id == "0" || id.is_empty() => String::new(),
        Some(id) if known_scripts.contains(&id) => id,
        Some(id) => {
            tracing::warn!(script_id = %id, function = name, "profile frame references an unknown script");
            String::new()
        }
    };
    FrameRef::new(name, script_id)
}

/// Aggregates every sampled stack. Each sample is charged its own time
/// delta (the interval since the previous sample, clamped at zero). Idle
/// samples and stacks that accumulated no time are dropped.
pub fn trace_to_stacks(events: &[Value], known_scripts: &HashSet<String>) -> Vec<StackAggregate> {
    let mut threads: BTreeMap<(String, String), Thread> = BTreeMap::new();
    for ev in events {
        if ev["name"].as_str() != Some("ProfileChunk") {
            continue;
        }
        let key = (
            ev.get("pid").and_then(as_id).unwrap_or_default(),
            ev.get("id").and_then(as_id).unwrap_or_default(),
        );
        let thread = threads.entry(key).or_default();
        let data = &ev["args"]["data"];
        let profile = &data["cpuProfile"];
        if let Some(nodes) = profile["nodes"].as_array() {
            for n in nodes {
                let Some(id) = n["id"].as_u64() else { continue };
                thread.nodes.insert(
                    id,
                    Node {
                        frame: frame_of(&n["callFrame"], known_scripts),
                        parent: n["parent"].as_u64(),
                    },
                );
            }
        }
        let samples = profile["samples"].as_array().map(Vec::as_slice).unwrap_or(&[]);
        let deltas = data["timeDeltas"].as_array().map(Vec::as_slice).unwrap_or(&[]);
        for (i, s) in samples.iter().enumerate() {
            let Some(node) = s.as_u64() else { continue };
            let delta_us = deltas.get(i).and_then(Value::as_f64).unwrap_or(0.0).max(0.0);
            thread.samples.push((node, delta_us / 1000.0));
        }
    }

    let mut agg: HashMap<Vec<FrameRef>, (u64, f64)> = HashMap::new();
    for thread in threads.values() {
        let mut stacks: HashMap<u64, Option<Vec<FrameRef>>> = HashMap::new();
        for &(node, ms) in &thread.samples {
            let frames = stacks.entry(node).or_insert_with(|| walk(&thread.nodes, node));
            let Some(frames) = frames else { continue };
            if frames[0].function_name == "(idle)" && frames[0].script_id.is_empty() {
                continue;
            }
            let e = agg.entry(frames.clone()).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += ms;
        }
    }
    let mut out: Vec<StackAggregate> = agg
        .into_iter()
        .filter(|(_, (_, ms))| *ms > 0.0)
        .map(|(frames, (sample_count, total_ms))| StackAggregate {
            frames,
            sample_count,
            total_ms,
        })
        .collect();
    out.sort_by(|a, b| a.frames.cmp(&b.frames));
    out
}

/// Leaf-first frame list, `None` for dangling node ids or parent cycles.
fn walk(nodes: &HashMap<u64, Node>, leaf: u64) -> Option<Vec<FrameRef>> {
    let mut frames = Vec::new();
    let mut cur = Some(leaf);
    while let Some(id) = cur {
        let node = nodes.get(&id)?;
        frames.push(node.frame.clone());
        if frames.len() > nodes.len() {
            return None;
        }
        cur = node.parent;
    }
    Some(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn chunk(nodes: Value, samples: Value, deltas: Value) -> Value {
        json!({"name": "ProfileChunk", "ph": "P", "pid": 1, "id": "0x1",
               "args": {"data": {"cpuProfile": {"nodes": nodes, "samples": samples}, "timeDeltas": deltas}}})
    }

    #[test]
    fn aggregates_leaf_first() {
        let known: HashSet<String> = ["5".to_string()].into();
        let ev = chunk(
            json!([
                {"id": 1, "callFrame": {"functionName": "(root)", "scriptId": 0}},
                {"id": 2, "parent": 1, "callFrame": {"functionName": "hash", "scriptId": 5, "url": "https://m/x.js"}},
                {"id": 3, "parent": 2, "callFrame": {"functionName": "<WASM UNNAMED>", "scriptId": 0}},
                {"id": 4, "parent": 1, "callFrame": {"functionName": "(idle)", "scriptId": 0}}
            ]),
            json!([3, 3, 4, 2, 3]),
            json!([1000, 1000, 500, -20, 0]),
        );
        let stacks = trace_to_stacks(&[ev], &known);
        assert_eq!(stacks.len(), 1, "{stacks:?}");
        assert_eq!(stacks[0].frames[0], FrameRef::wasm());
        assert_eq!(stacks[0].frames[1], FrameRef::new("hash", "5"));
        assert_eq!(stacks[0].sample_count, 3);
        assert!((stacks[0].total_ms - 2.0).abs() < 1e-12);
    }

    #[test]
    fn chunks_accumulate_nodes() {
        let a = chunk(json!([{"id": 1, "callFrame": {"functionName": "(root)"}}]), json!([]), json!([]));
        let b = chunk(
            json!([{"id": 2, "parent": 1, "callFrame": {"functionName": "", "scriptId": "9"}}]),
            json!([2]),
            json!([250]),
        );
        let stacks = trace_to_stacks(&[a, b], &HashSet::new());
        assert_eq!(stacks[0].frames, vec![FrameRef::new("(anonymous)", ""), FrameRef::new("(root)", "")]);
    }
}
