//! Browser bindings. Every export takes plain values and returns a JSON
//! string, so the page needs no generated type glue beyond wasm-bindgen's.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use splitreason::perfsim::{
    simulate, simulate_single_model, ExecMode, SegmentedTrace, SimConfig, ThroughputProfile,
};
use splitreason::protocol::{extract_spans, lenient_regions, validate_trace, IllegalReason};
use splitreason::reward::{coverage_reward, total_reward, RewardConfig};
use splitreason::{text, ControlTags};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub large_tokens: u64,
    pub total_seconds: f64,
    pub speedup_vs_large_only: f64,
    pub slowdown_vs_small_only: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepParams {
    pub total_tokens: u64,
    pub spans: u64,
    pub max_fraction: f64,
    pub steps: u32,
    pub pipelined: bool,
    pub overheads: bool,
    pub small_decode: f64,
    pub large_decode: f64,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            total_tokens: 10_000,
            spans: 1,
            max_fraction: 0.2,
            steps: 20,
            pipelined: true,
            overheads: true,
            small_decode: 150.0,
            large_decode: 15.0,
        }
    }
}

/// Offload fraction from 0 to `max_fraction` in `steps` equal steps.
pub fn speedup_sweep(p: &SweepParams) -> Result<Vec<SweepPoint>, String> {
    if p.steps == 0 || !(0.0..=1.0).contains(&p.max_fraction) {
        return Err("steps must be >= 1 and max_fraction in [0, 1]".into());
    }
    if p.total_tokens == 0 || p.spans == 0 {
        return Err("total_tokens and spans must be >= 1".into());
    }
    if !(p.small_decode > 0.0 && p.large_decode > 0.0) {
        return Err("decode rates must be > 0".into());
    }
    let small = ThroughputProfile::constant("small", 30_000.0, p.small_decode);
    let large = ThroughputProfile::constant("large", 2_500.0, p.large_decode);
    let mode = if p.pipelined {
        ExecMode::Pipelined
    } else {
        ExecMode::NonPipelined
    };
    let cfg = if p.overheads {
        SimConfig::default()
    } else {
        SimConfig::overheads_off()
    }
    .with_mode(mode);
    let small_only = simulate_single_model(p.total_tokens, &small).total_seconds;
    let large_only = simulate_single_model(p.total_tokens, &large).total_seconds;
    (0..=p.steps)
        .map(|i| {
            let fraction = p.max_fraction * f64::from(i) / f64::from(p.steps);
            let trace = SegmentedTrace::shorthand(p.total_tokens, fraction, p.spans)
                .map_err(|e| e.to_string())?;
            let r = simulate(&trace, &small, &large, &cfg);
            Ok(SweepPoint {
                fraction,
                large_tokens: trace.large_tokens(),
                total_seconds: r.total_seconds,
                speedup_vs_large_only: large_only / r.total_seconds,
                slowdown_vs_small_only: r.total_seconds / small_only,
            })
        })
        .collect()
}

/// `(coverage, reward)` at `points + 1` evenly spaced coverages.
pub fn coverage_curve(peak: f64, points: u32) -> Result<Vec<(f64, f64)>, String> {
    let points = points.max(1);
    (0..=points)
        .map(|i| {
            let c = f64::from(i) / f64::from(points);
            coverage_reward(c, peak).map(|r| (c, r)).map_err(|e| e.to_string())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Segment {
    pub text: String,
    pub offloaded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inspection {
    pub scaffold_ok: bool,
    pub offload_well_formed: bool,
    pub illegal_reasons: Vec<&'static str>,
    pub spans: Vec<(usize, usize)>,
    pub coverage: f64,
    pub words: usize,
    /// Stripped text cut at region boundaries, for highlighting.
    pub segments: Vec<Segment>,
}

pub fn inspect_trace(trace: &str) -> Inspection {
    let tags = ControlTags::default();
    let v = validate_trace(trace, &tags);
    let (stripped, regions) = lenient_regions(trace, &tags);
    let spans = extract_spans(trace, &tags)
        .map(|s| s.iter().map(|s| s.range()).collect())
        .unwrap_or_else(|_| regions.clone());
    let mut segments = Vec::new();
    let mut at = 0;
    for &(s, e) in &regions {
        if s > at {
            segments.push(Segment {
                text: text::slice_chars(&stripped, at, s).to_string(),
                offloaded: false,
            });
        }
        segments.push(Segment {
            text: text::slice_chars(&stripped, s, e).to_string(),
            offloaded: true,
        });
        at = e;
    }
    let n = text::char_len(&stripped);
    if at < n {
        segments.push(Segment {
            text: text::slice_chars(&stripped, at, n).to_string(),
            offloaded: false,
        });
    }
    Inspection {
        scaffold_ok: v.scaffold_ok,
        offload_well_formed: v.offload_well_formed(),
        illegal_reasons: v.illegal_reasons.iter().map(IllegalReason::as_str).collect(),
        spans,
        coverage: splitreason::reward::completion_coverage(trace, &tags),
        words: text::count_words(&stripped),
        segments,
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_else(|e| format!("{{\"error\":{:?}}}", e.to_string()))
}

fn json_result<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.map(|v| json(&v)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = speedupSweep)]
#[allow(clippy::too_many_arguments)]
pub fn speedup_sweep_js(
    total_tokens: u32,
    spans: u32,
    max_fraction: f64,
    steps: u32,
    pipelined: bool,
    overheads: bool,
    small_decode: f64,
    large_decode: f64,
) -> Result<String, JsValue> {
    json_result(speedup_sweep(&SweepParams {
        total_tokens: u64::from(total_tokens),
        spans: u64::from(spans),
        max_fraction,
        steps,
        pipelined,
        overheads,
        small_decode,
        large_decode,
    }))
}

#[wasm_bindgen(js_name = coverageCurve)]
pub fn coverage_curve_js(peak: f64, points: u32) -> Result<String, JsValue> {
    json_result(coverage_curve(peak, points))
}

#[wasm_bindgen(js_name = scoreCompletion)]
pub fn score_completion_js(completion: &str, gold: &str, peak: f64) -> Result<String, JsValue> {
    let cfg = RewardConfig {
        coverage_peak: peak,
        ..RewardConfig::default()
    };
    json_result(total_reward(completion, gold, &cfg).map_err(|e| e.to_string()))
}

#[wasm_bindgen(js_name = inspectTrace)]
pub fn inspect_trace_js(trace: &str) -> String {
    json(&inspect_trace(trace))
}
