use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use splitreason::perfsim::{
    simulate, simulate_single_model, ExecMode, ScenarioFile, SimConfig, SimResult,
};

pub const SMALL_ONLY: &str = "small-only";
pub const LARGE_ONLY: &str = "large-only";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BreakdownRow {
    pub scenario: String,
    pub mode: ExecMode,
    pub small_tokens: u64,
    pub large_tokens: u64,
    pub handoffs: usize,
    pub offload_fraction: f64,
    pub small_decode: f64,
    pub large_decode: f64,
    pub exposed_prefill: f64,
    pub probe_overhead: f64,
    pub residual_handoff: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupRow {
    pub scenario: String,
    pub mode: ExecMode,
    pub total_seconds: f64,
    pub small_only_seconds: f64,
    pub large_only_seconds: f64,
    pub speedup_vs_small_only: f64,
    pub speedup_vs_large_only: f64,
}

#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub breakdown: Vec<BreakdownRow>,
    pub speedup: Vec<SpeedupRow>,
    pub results: Vec<(String, SimResult)>,
}

pub fn cmd_simulate(
    path: &Path,
    fallback: &SimConfig,
    mode: Option<ExecMode>,
) -> Result<SimulateOutput> {
    let (file, base) =
        ScenarioFile::load(path).with_context(|| format!("scenario file {}", path.display()))?;
    let small = file.small_profile.resolve(&base).context("small_profile")?;
    let large = file.large_profile.resolve(&base).context("large_profile")?;
    let sim = file.sim_or(fallback);
    let mut out = SimulateOutput {
        breakdown: Vec::new(),
        speedup: Vec::new(),
        results: Vec::new(),
    };
    for sc in &file.scenarios {
        let trace = sc.trace()?;
        let cfg = sim.clone().with_mode(mode.or(sc.mode).unwrap_or(sim.mode));
        let total = trace.total_tokens();
        let small_only = simulate_single_model(total, &small).total_seconds;
        let large_only = simulate_single_model(total, &large).total_seconds;
        let r = simulate(&trace, &small, &large, &cfg)
            .with_speedup(SMALL_ONLY, small_only)
            .with_speedup(LARGE_ONLY, large_only);
        let b = r.breakdown;
        out.breakdown.push(BreakdownRow {
            scenario: sc.name.clone(),
            mode: cfg.mode,
            small_tokens: trace.small_tokens(),
            large_tokens: trace.large_tokens(),
            handoffs: trace.handoffs(),
            offload_fraction: trace.offload_fraction(),
            small_decode: b.small_decode,
            large_decode: b.large_decode,
            exposed_prefill: b.exposed_prefill,
            probe_overhead: b.probe_overhead,
            residual_handoff: b.residual_handoff,
            total_seconds: r.total_seconds,
        });
        let ratio = |reference: f64| {
            if r.total_seconds > 0.0 {
                reference / r.total_seconds
            } else {
                1.0
            }
        };
        out.speedup.push(SpeedupRow {
            scenario: sc.name.clone(),
            mode: cfg.mode,
            total_seconds: r.total_seconds,
            small_only_seconds: small_only,
            large_only_seconds: large_only,
            speedup_vs_small_only: ratio(small_only),
            speedup_vs_large_only: ratio(large_only),
        });
        out.results.push((sc.name.clone(), r));
    }
    Ok(out)
}

pub fn render_table(rows: &[SpeedupRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.scenario.len())
        .max()
        .unwrap_or(8)
        .max(8);
    let mut s = format!(
        "{:<width$}  {:>13}  {:>10}  {:>9}  {:>9}\n",
        "scenario", "mode", "total_s", "vs_small", "vs_large"
    );
    for r in rows {
        let mode = match r.mode {
            ExecMode::Pipelined => "pipelined",
            ExecMode::NonPipelined => "non-pipelined",
        };
        s.push_str(&format!(
            "{:<width$}  {:>13}  {:>10.2}  {:>9.3}  {:>9.3}\n",
            r.scenario, mode, r.total_seconds, r.speedup_vs_small_only, r.speedup_vs_large_only
        ));
    }
    s
}
