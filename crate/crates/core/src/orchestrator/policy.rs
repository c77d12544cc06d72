use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::protocol::{OffloadSpan, SpanOrigin};

fn default_mean_span() -> u64 {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Policy {
    /// Follow tags emitted by the small model.
    #[default]
    LearnedTags,
    /// Content-blind spans planned up front.
    RandomOffload {
        p: f64,
        seed: u64,
        #[serde(default = "default_mean_span")]
        mean_span_tokens: u64,
    },
    NeverOffload,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad policy {spec:?}: {message}")]
pub struct PolicyParseError {
    pub spec: String,
    pub message: String,
}

impl Policy {
    pub fn validate(&self) -> Result<(), String> {
        if let Policy::RandomOffload {
            p,
            mean_span_tokens,
            ..
        } = self
        {
            if !(0.0..=1.0).contains(p) {
                return Err(format!("p = {p} outside [0, 1]"));
            }
            if *mean_span_tokens == 0 {
                return Err("mean_span_tokens must be >= 1".into());
            }
        }
        Ok(())
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::LearnedTags => f.write_str("learned-tags"),
            Policy::NeverOffload => f.write_str("never-offload"),
            Policy::RandomOffload {
                p,
                seed,
                mean_span_tokens,
            } => write!(f, "random-offload:p={p},seed={seed},mean={mean_span_tokens}"),
        }
    }
}

/// `learned-tags`, `never-offload` or `random-offload:p=0.05,seed=7[,mean=200]`.
impl FromStr for Policy {
    type Err = PolicyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |m: &str| PolicyParseError {
            spec: s.to_string(),
            message: m.to_string(),
        };
        let (name, params) = s.split_once(':').unwrap_or((s, ""));
        let policy = match name.trim() {
            "learned-tags" | "learned" => Policy::LearnedTags,
            "never-offload" | "never" => Policy::NeverOffload,
            "random-offload" | "random" => {
                let (mut p, mut seed, mut mean) = (None, None, default_mean_span());
                for kv in params.split(',').filter(|kv| !kv.trim().is_empty()) {
                    let (k, v) = kv.split_once('=').ok_or_else(|| err("expected key=value"))?;
                    let v = v.trim();
                    match k.trim() {
                        "p" => p = Some(v.parse().map_err(|_| err("p is not a number"))?),
                        "seed" => seed = Some(v.parse().map_err(|_| err("seed is not an integer"))?),
                        "mean" | "mean_span_tokens" => {
                            mean = v.parse().map_err(|_| err("mean is not an integer"))?
                        }
                        other => return Err(err(&format!("unknown parameter {other}"))),
                    }
                }
                Policy::RandomOffload {
                    p: p.ok_or_else(|| err("random-offload needs p"))?,
                    seed: seed.ok_or_else(|| err("random-offload needs an explicit seed"))?,
                    mean_span_tokens: mean,
                }
            }
            other => return Err(err(&format!("unknown policy {other}"))),
        };
        policy.validate().map_err(|m| err(&m))?;
        Ok(policy)
    }
}

/// Plans offload spans over token offsets `[0, total)` as an alternating
/// renewal process with geometric span and gap lengths. Span mean `m`, gap
/// mean `m(1-p)/p`, and the first token lies in a span with probability `p`,
/// so every token is offloaded with probability exactly `p`. When the gap
/// mean would fall below one token it is clamped to 1 and the span mean is
/// raised to keep the ratio.
pub fn random_offload_policy(total: u64, p: f64, seed: u64, mean_span_tokens: u64) -> Vec<OffloadSpan> {
    let p = p.clamp(0.0, 1.0);
    if total == 0 || p == 0.0 {
        return Vec::new();
    }
    if p == 1.0 {
        return vec![planned(0, total)];
    }
    let mut span_mean = mean_span_tokens.max(1) as f64;
    let mut gap_mean = span_mean * (1.0 - p) / p;
    if gap_mean < 1.0 {
        gap_mean = 1.0;
        span_mean = p / (1.0 - p);
    }
    let span_len = Geometric::new(1.0 / span_mean).expect("probability in (0, 1]");
    let gap_len = Geometric::new(1.0 / gap_mean).expect("probability in (0, 1]");
    let mut rng = StdRng::seed_from_u64(seed);
    let mut in_span = rng.random_bool(p);
    let mut pos = 0u64;
    let mut spans = Vec::new();
    while pos < total {
        let len = 1 + if in_span {
            span_len.sample(&mut rng)
        } else {
            gap_len.sample(&mut rng)
        };
        let end = pos.saturating_add(len).min(total);
        if in_span {
            spans.push(planned(pos, end));
        }
        pos = end;
        in_span = !in_span;
    }
    spans
}

fn planned(start: u64, end: u64) -> OffloadSpan {
    let mut s = OffloadSpan::new(start as usize, end as usize, SpanOrigin::RandomPolicy);
    s.token_estimate = end - start;
    s
}

/// Token-weighted fraction of `[0, total)` covered by `spans`.
pub fn planned_fraction(spans: &[OffloadSpan], total: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    spans.iter().map(|s| s.len() as u64).sum::<u64>() as f64 / total as f64
}
