//! Analytical latency model for single-model, non-pipelined and pipelined
//! cooperative decoding, driven by measured throughput profiles.

mod profile;
mod scenario;

pub use profile::{load_profile, RateCurve, ThroughputProfile};
pub use scenario::{ProfileRef, Scenario, ScenarioFile, ScenarioShape};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::GenerationTrace;
use crate::tags::ControlTags;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("reference total must be > 0")]
    ZeroReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Owner {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub owner: Owner,
    pub tokens: u64,
}

impl Segment {
    pub fn small(tokens: u64) -> Self {
        Self {
            owner: Owner::Small,
            tokens,
        }
    }

    pub fn large(tokens: u64) -> Self {
        Self {
            owner: Owner::Large,
            tokens,
        }
    }
}

/// Alternating runs of small- and large-model tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SegmentedTrace {
    segments: Vec<Segment>,
}

impl SegmentedTrace {
    /// Drops empty segments and merges consecutive same-owner segments.
    pub fn new(segments: impl IntoIterator<Item = Segment>) -> Self {
        let mut out: Vec<Segment> = Vec::new();
        for s in segments.into_iter().filter(|s| s.tokens > 0) {
            match out.last_mut() {
                Some(last) if last.owner == s.owner => last.tokens += s.tokens,
                _ => out.push(s),
            }
        }
        Self { segments: out }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    fn tokens_of(&self, owner: Owner) -> u64 {
        self.segments
            .iter()
            .filter(|s| s.owner == owner)
            .map(|s| s.tokens)
            .sum()
    }

    pub fn small_tokens(&self) -> u64 {
        self.tokens_of(Owner::Small)
    }

    pub fn large_tokens(&self) -> u64 {
        self.tokens_of(Owner::Large)
    }

    pub fn total_tokens(&self) -> u64 {
        self.small_tokens() + self.large_tokens()
    }

    pub fn handoffs(&self) -> usize {
        self.segments.len().saturating_sub(1)
    }

    pub fn offload_fraction(&self) -> f64 {
        match self.total_tokens() {
            0 => 0.0,
            t => self.large_tokens() as f64 / t as f64,
        }
    }

    /// `total` tokens with round(total * fraction) large tokens split into
    /// `spans` equal blocks, evenly spaced between equal small gaps.
    /// Remainders go to the earliest blocks and gaps.
    pub fn shorthand(total: u64, fraction: f64, spans: u64) -> Result<Self, SimError> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(SimError::Invalid {
                field: "offload_fraction".into(),
                message: format!("{fraction} outside [0, 1]"),
            });
        }
        let large = (total as f64 * fraction).round() as u64;
        if large == 0 || spans == 0 {
            return Ok(Self::new([Segment::small(total)]));
        }
        let spans = spans.min(large);
        let small = total - large;
        let split = |n: u64, k: u64| (0..k).map(move |i| n / k + u64::from(i < n % k));
        let mut gaps = split(small, spans + 1);
        let mut segs = Vec::new();
        for block in split(large, spans) {
            segs.push(Segment::small(gaps.next().unwrap_or(0)));
            segs.push(Segment::large(block));
        }
        segs.push(Segment::small(gaps.next().unwrap_or(0)));
        Ok(Self::new(segs))
    }

    /// Segments of a recorded run, using per-span token estimates. Small
    /// tokens are apportioned to the gaps between spans by character length.
    pub fn from_generation(trace: &GenerationTrace, tags: &ControlTags) -> Self {
        let stripped_len = crate::text::char_len(&trace.stripped_text(tags));
        let mut gaps = Vec::with_capacity(trace.spans.len() + 1);
        let mut prev = 0usize;
        for s in &trace.spans {
            gaps.push(s.start.saturating_sub(prev));
            prev = s.end;
        }
        gaps.push(stripped_len.saturating_sub(prev));
        let gap_total: usize = gaps.iter().sum();
        let mut small_left = trace.small_tokens;
        let mut segs = Vec::new();
        for (s, g) in trace.spans.iter().zip(&gaps) {
            let share = if gap_total == 0 {
                0
            } else {
                (*g as f64 / gap_total as f64 * trace.small_tokens as f64).round() as u64
            };
            let share = share.min(small_left);
            small_left -= share;
            segs.push(Segment::small(share));
            segs.push(Segment::large(s.token_estimate.max(1)));
        }
        segs.push(Segment::small(small_left));
        Self::new(segs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    #[default]
    Pipelined,
    NonPipelined,
}

fn default_chunk() -> u64 {
    64
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default = "default_chunk")]
    pub chunk_size: u64,
    /// Seconds per controlling check; defaults to one small-model decode step.
    #[serde(default)]
    pub probe_cost_per_chunk: Option<f64>,
    #[serde(default = "default_true")]
    pub include_handoff_residual: bool,
    #[serde(default)]
    pub mode: ExecMode,
    /// Non-pipelined only: every controlling check re-prefills the small
    /// model's whole context instead of just the new chunk.
    #[serde(default)]
    pub check_reprefill_context: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            chunk_size: default_chunk(),
            probe_cost_per_chunk: None,
            include_handoff_residual: true,
            mode: ExecMode::Pipelined,
            check_reprefill_context: false,
        }
    }
}

impl SimConfig {
    /// No probe cost and no handoff residual.
    pub fn overheads_off() -> Self {
        Self {
            probe_cost_per_chunk: Some(0.0),
            include_handoff_residual: false,
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.chunk_size == 0 {
            return Err(SimError::Invalid {
                field: "chunk_size".into(),
                message: "must be >= 1".into(),
            });
        }
        if let Some(c) = self.probe_cost_per_chunk {
            if !c.is_finite() || c < 0.0 {
                return Err(SimError::Invalid {
                    field: "probe_cost_per_chunk".into(),
                    message: format!("{c} must be finite and >= 0"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Breakdown {
    pub small_decode: f64,
    pub large_decode: f64,
    pub exposed_prefill: f64,
    pub probe_overhead: f64,
    pub residual_handoff: f64,
}

impl Breakdown {
    pub fn sum(&self) -> f64 {
        self.small_decode
            + self.large_decode
            + self.exposed_prefill
            + self.probe_overhead
            + self.residual_handoff
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub total_seconds: f64,
    pub breakdown: Breakdown,
    #[serde(default)]
    pub speedup_vs: BTreeMap<String, f64>,
}

impl SimResult {
    fn from_breakdown(b: Breakdown) -> Self {
        Self {
            total_seconds: b.sum(),
            breakdown: b,
            speedup_vs: BTreeMap::new(),
        }
    }

    pub fn with_speedup(mut self, reference: &str, reference_total: f64) -> Self {
        if self.total_seconds > 0.0 {
            self.speedup_vs
                .insert(reference.to_string(), reference_total / self.total_seconds);
        }
        self
    }
}

/// Pure decode time of `total_tokens` on one model, reported as small decode.
pub fn simulate_single_model(total_tokens: u64, profile: &ThroughputProfile) -> SimResult {
    SimResult::from_breakdown(Breakdown {
        small_decode: profile.decode_rate.time_for(0, total_tokens),
        ..Breakdown::default()
    })
}

fn probe_cost(config: &SimConfig, small: &ThroughputProfile, context: u64) -> f64 {
    config
        .probe_cost_per_chunk
        .unwrap_or_else(|| 1.0 / small.decode_rate.rate_at(context as f64))
}

fn chunks(tokens: u64, chunk: u64) -> u64 {
    tokens.div_ceil(chunk)
}

fn decode_terms(
    trace: &SegmentedTrace,
    small: &ThroughputProfile,
    large: &ThroughputProfile,
    config: &SimConfig,
) -> Breakdown {
    let mut b = Breakdown::default();
    let mut pos = 0u64;
    for s in trace.segments() {
        match s.owner {
            Owner::Small => b.small_decode += small.decode_rate.time_for(pos, s.tokens),
            Owner::Large => {
                b.large_decode += large.decode_rate.time_for(pos, s.tokens);
                b.probe_overhead += chunks(s.tokens, config.chunk_size) as f64 * probe_cost(config, small, pos);
            }
        }
        pos += s.tokens;
    }
    b
}

/// Streaming prefill overlaps the other model's decode; only the deficit
/// beyond decode time and the final residual chunk are exposed at each
/// handoff.
pub fn simulate_pipelined(
    trace: &SegmentedTrace,
    small: &ThroughputProfile,
    large: &ThroughputProfile,
    config: &SimConfig,
) -> SimResult {
    let mut b = decode_terms(trace, small, large, config);
    let segs = trace.segments();
    let mut pos = 0u64;
    for (i, s) in segs.iter().enumerate() {
        if i + 1 < segs.len() {
            // The idle model prefills this segment while it is decoded.
            let (decoder, idle) = match s.owner {
                Owner::Small => (small, large),
                Owner::Large => (large, small),
            };
            let decode = decoder.decode_rate.time_for(pos, s.tokens);
            let prefill = idle.prefill_rate.time_for(pos, s.tokens);
            let residual = if config.include_handoff_residual {
                let r = s.tokens.min(config.chunk_size);
                idle.prefill_rate.time_for(pos + s.tokens - r, r)
            } else {
                0.0
            };
            b.residual_handoff += residual;
            b.exposed_prefill += (prefill - decode - residual).max(0.0);
        }
        pos += s.tokens;
    }
    SimResult::from_breakdown(b)
}

/// Prefill runs serially at each handoff: the large model catches up on the
/// preceding small segment, and the small model on the large segment.
pub fn simulate_nonpipelined(
    trace: &SegmentedTrace,
    small: &ThroughputProfile,
    large: &ThroughputProfile,
    config: &SimConfig,
) -> SimResult {
    let mut b = decode_terms(trace, small, large, config);
    let segs = trace.segments();
    let mut pos = 0u64;
    for (i, s) in segs.iter().enumerate() {
        let has_next = i + 1 < segs.len();
        match s.owner {
            Owner::Small if has_next => {
                b.exposed_prefill += large.prefill_rate.time_for(pos, s.tokens);
            }
            Owner::Large if config.check_reprefill_context => {
                let mut done = 0u64;
                while done < s.tokens {
                    done = (done + config.chunk_size).min(s.tokens);
                    b.exposed_prefill += small.prefill_rate.time_for(0, pos + done);
                }
            }
            Owner::Large if has_next => {
                b.exposed_prefill += small.prefill_rate.time_for(pos, s.tokens);
            }
            _ => {}
        }
        pos += s.tokens;
    }
    SimResult::from_breakdown(b)
}

pub fn simulate(
    trace: &SegmentedTrace,
    small: &ThroughputProfile,
    large: &ThroughputProfile,
    config: &SimConfig,
) -> SimResult {
    match config.mode {
        ExecMode::Pipelined => simulate_pipelined(trace, small, large, config),
        ExecMode::NonPipelined => simulate_nonpipelined(trace, small, large, config),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub name: String,
    pub total_seconds: f64,
    pub reference: String,
    pub reference_seconds: f64,
    pub speedup: f64,
}

/// reference.total / result.total for each named result.
pub fn speedup_report(
    results: &[(String, SimResult)],
    reference: (&str, &SimResult),
) -> Result<Vec<SpeedupRow>, SimError> {
    let (ref_name, ref_result) = reference;
    if ref_result.total_seconds.is_nan() || ref_result.total_seconds <= 0.0 {
        return Err(SimError::ZeroReference);
    }
    Ok(results
        .iter()
        .map(|(name, r)| SpeedupRow {
            name: name.clone(),
            total_seconds: r.total_seconds,
            reference: ref_name.to_string(),
            reference_seconds: ref_result.total_seconds,
            speedup: ref_result.total_seconds / r.total_seconds,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference_pair() -> (ThroughputProfile, ThroughputProfile) {
        (
            ThroughputProfile::constant("small", 30_000.0, 150.0),
            ThroughputProfile::constant("large", 2_500.0, 15.0),
        )
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn single_model() {
        let (s, l) = reference_pair();
        assert!(close(simulate_single_model(10_000, &s).total_seconds, 10_000.0 / 150.0));
        assert!(close(simulate_single_model(10_000, &l).total_seconds, 10_000.0 / 15.0));
        assert_eq!(simulate_single_model(0, &s).total_seconds, 0.0);
    }

    #[test]
    fn shorthand_layout() {
        let t = SegmentedTrace::shorthand(10_000, 0.0135, 1).unwrap();
        assert_eq!(
            t.segments(),
            &[Segment::small(4933), Segment::large(135), Segment::small(4932)]
        );
        let t = SegmentedTrace::shorthand(10_000, 0.05, 5).unwrap();
        assert_eq!(t.large_tokens(), 500);
        assert_eq!(t.handoffs(), 10);
        assert_eq!(SegmentedTrace::shorthand(100, 1.0, 3).unwrap().segments(), &[Segment::large(100)]);
        assert_eq!(SegmentedTrace::shorthand(100, 0.0, 3).unwrap().segments(), &[Segment::small(100)]);
        assert!(SegmentedTrace::shorthand(100, 1.5, 3).is_err());
    }

    #[test]
    fn reference_rates_overheads_off() {
        let (s, l) = reference_pair();
        let t = SegmentedTrace::shorthand(10_000, 0.0135, 1).unwrap();
        let r = simulate_pipelined(&t, &s, &l, &SimConfig::overheads_off());
        assert!(close(r.total_seconds, 9865.0 / 150.0 + 135.0 / 15.0));
        let np = simulate_nonpipelined(&t, &s, &l, &SimConfig::overheads_off());
        let serial = 4933.0 / 2500.0 + 135.0 / 30_000.0;
        assert!(close(np.total_seconds - r.total_seconds, serial));
    }

    #[test]
    fn degenerate_equivalences() {
        let (s, l) = reference_pair();
        let cfg = SimConfig::default();
        let small_only = SegmentedTrace::shorthand(5000, 0.0, 4).unwrap();
        assert!(close(
            simulate_pipelined(&small_only, &s, &l, &cfg).total_seconds,
            simulate_single_model(5000, &s).total_seconds
        ));
        assert!(close(
            simulate_nonpipelined(&small_only, &s, &l, &cfg).total_seconds,
            simulate_single_model(5000, &s).total_seconds
        ));
        let large_only = SegmentedTrace::new([Segment::large(5000)]);
        assert!(close(
            simulate_pipelined(&large_only, &s, &l, &SimConfig::overheads_off()).total_seconds,
            simulate_single_model(5000, &l).total_seconds
        ));
        assert!(
            simulate_pipelined(&large_only, &s, &l, &cfg).total_seconds
                >= simulate_single_model(5000, &l).total_seconds
        );
    }

    #[test]
    fn context_dependent_rates() {
        let s = ThroughputProfile {
            model_name: "s".into(),
            prefill_rate: RateCurve::Constant(1000.0),
            decode_rate: RateCurve::Piecewise {
                breakpoints: vec![(0.0, 100.0), (100.0, 50.0)],
            },
        };
        let r = simulate_single_model(200, &s);
        let expected: f64 = (0..200).map(|p| 1.0 / (100.0 - 50.0 * (p.min(100) as f64) / 100.0)).sum();
        assert!(close(r.total_seconds, expected));
    }

    #[test]
    fn speedups() {
        let (s, _) = reference_pair();
        let r = simulate_single_model(100, &s);
        let rows = speedup_report(&[("same".into(), r.clone())], ("ref", &r)).unwrap();
        assert_eq!(rows[0].speedup, 1.0);
        let zero = simulate_single_model(0, &s);
        assert_eq!(speedup_report(&[], ("zero", &zero)), Err(SimError::ZeroReference));
    }

    fn profiles() -> impl Strategy<Value = (ThroughputProfile, ThroughputProfile)> {
        (1.0f64..50_000.0, 1.0f64..500.0, 1.0f64..50_000.0, 1.0f64..500.0).prop_map(|(ps, ds, pl, dl)| {
            (
                ThroughputProfile::constant("s", ps, ds),
                ThroughputProfile::constant("l", pl, dl),
            )
        })
    }

    fn traces() -> impl Strategy<Value = Vec<Segment>> {
        proptest::collection::vec((any::<bool>(), 1u64..3000), 0..8).prop_map(|v| {
            v.into_iter()
                .map(|(large, n)| if large { Segment::large(n) } else { Segment::small(n) })
                .collect()
        })
    }

    fn configs() -> impl Strategy<Value = SimConfig> {
        (1u64..200, proptest::option::of(0.0f64..0.1), any::<bool>(), any::<bool>()).prop_map(
            |(chunk, probe, residual, reprefill)| SimConfig {
                chunk_size: chunk,
                probe_cost_per_chunk: probe,
                include_handoff_residual: residual,
                mode: ExecMode::Pipelined,
                check_reprefill_context: reprefill,
            },
        )
    }

    proptest! {
        #[test]
        fn mode_ordering_and_accounting((s, l) in profiles(), segs in traces(), cfg in configs()) {
            let t = SegmentedTrace::new(segs);
            let p = simulate_pipelined(&t, &s, &l, &cfg);
            let np = simulate_nonpipelined(&t, &s, &l, &cfg);
            prop_assert!(np.total_seconds >= p.total_seconds * (1.0 - 1e-12));
            for r in [&p, &np] {
                prop_assert!(close(r.breakdown.sum(), r.total_seconds));
            }
        }

        #[test]
        fn monotone_in_tokens((s, l) in profiles(), segs in traces(), cfg in configs(), which in any::<prop::sample::Index>(), extra in 1u64..500) {
            let t = SegmentedTrace::new(segs.clone());
            prop_assume!(!t.segments().is_empty());
            let mut bigger = t.segments().to_vec();
            let i = which.index(bigger.len());
            bigger[i].tokens += extra;
            let b = SegmentedTrace::new(bigger);
            for mode in [ExecMode::Pipelined, ExecMode::NonPipelined] {
                let cfg = cfg.clone().with_mode(mode);
                let before = simulate(&t, &s, &l, &cfg).total_seconds;
                let after = simulate(&b, &s, &l, &cfg).total_seconds;
                prop_assert!(after >= before * (1.0 - 1e-12), "{:?}: {} < {}", mode, after, before);
            }
        }

        #[test]
        fn monotone_in_rates((s, l) in profiles(), segs in traces(), cfg in configs(), which in 0usize..4, factor in 1.0f64..4.0) {
            let t = SegmentedTrace::new(segs);
            let (mut s2, mut l2) = (s.clone(), l.clone());
            match which {
                0 => s2.decode_rate = s.decode_rate.scaled(factor),
                1 => s2.prefill_rate = s.prefill_rate.scaled(factor),
                2 => l2.decode_rate = l.decode_rate.scaled(factor),
                _ => l2.prefill_rate = l.prefill_rate.scaled(factor),
            }
            for mode in [ExecMode::Pipelined, ExecMode::NonPipelined] {
                let cfg = cfg.clone().with_mode(mode);
                let before = simulate(&t, &s, &l, &cfg).total_seconds;
                let after = simulate(&t, &s2, &l2, &cfg).total_seconds;
                prop_assert!(after <= before * (1.0 + 1e-12), "{:?}: {} > {}", mode, after, before);
            }
        }
    }
}
