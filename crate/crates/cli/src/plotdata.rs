//! Per-run offload rasters: one row per (run, position bin).

use std::path::Path;

use anyhow::{bail, Result};
use serde::Serialize;
use serde_json::Value;

use splitreason::protocol::{lenient_regions, validate_trace, IllegalReason};
use splitreason::text;
use splitreason::ControlTags;

use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RasterRow {
    pub run_id: String,
    pub bin: usize,
    pub bin_start: f64,
    pub bin_end: f64,
    pub offloaded: u8,
    pub legal: u8,
    pub reason: String,
}

/// Trace text of a run record, an annotation record or a bare `{text}`.
fn trace_text(v: &Value) -> Option<&str> {
    v.pointer("/result/trace/text")
        .or_else(|| v.pointer("/trace/text"))
        .or_else(|| v.get("annotated_text"))
        .or_else(|| v.get("text"))
        .and_then(Value::as_str)
}

fn run_id(v: &Value, line: usize) -> String {
    match v.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => line.to_string(),
    }
}

/// Bin `i` covers stripped characters `[floor(i n / b), floor((i+1) n / b))`
/// and is high when most of its characters lie inside offload regions.
pub fn raster(run: &str, trace: &str, bins: usize, tags: &ControlTags) -> Vec<RasterRow> {
    let v = validate_trace(trace, tags);
    let reasons: Vec<&str> = v
        .illegal_reasons
        .iter()
        .filter(|r| {
            matches!(
                r,
                IllegalReason::UnclosedOffload
                    | IllegalReason::CloseBeforeOpen
                    | IllegalReason::NestedOffload
            )
        })
        .map(IllegalReason::as_str)
        .collect();
    let legal = reasons.is_empty();
    let (stripped, regions) = lenient_regions(trace, tags);
    let n = text::char_len(&stripped);
    (0..bins)
        .map(|i| {
            let lo = i * n / bins;
            let hi = (i + 1) * n / bins;
            let inside: usize = regions
                .iter()
                .map(|&(s, e)| e.min(hi).saturating_sub(s.max(lo)))
                .sum();
            RasterRow {
                run_id: run.to_string(),
                bin: i,
                bin_start: i as f64 / bins as f64,
                bin_end: (i + 1) as f64 / bins as f64,
                offloaded: u8::from(hi > lo && 2 * inside > hi - lo),
                legal: u8::from(legal),
                reason: reasons.join(";"),
            }
        })
        .collect()
}

pub fn cmd_trace_plotdata(path: &Path, bins: usize, tags: &ControlTags) -> Result<Vec<RasterRow>> {
    if bins == 0 {
        bail!("--bins must be >= 1");
    }
    let mut rows = Vec::new();
    for (n, line) in io::read_lines(path)? {
        let v: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => bail!("{}:{n}: {e}", path.display()),
        };
        let Some(trace) = trace_text(&v) else {
            bail!("{}:{n}: record has no trace text", path.display());
        };
        rows.extend(raster(&run_id(&v, n), trace, bins, tags));
    }
    Ok(rows)
}
