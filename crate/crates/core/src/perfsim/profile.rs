use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SimError;

/// Tokens per second as a function of context length. Piecewise curves
/// interpolate linearly between breakpoints and are flat outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RateCurve {
    Constant(f64),
    Piecewise { breakpoints: Vec<(f64, f64)> },
}

impl RateCurve {
    pub fn validate(&self, field: &str) -> Result<(), SimError> {
        match self {
            RateCurve::Constant(r) => positive(*r, field),
            RateCurve::Piecewise { breakpoints } => {
                if breakpoints.is_empty() {
                    return Err(SimError::Invalid {
                        field: field.into(),
                        message: "no breakpoints".into(),
                    });
                }
                for &(ctx, r) in breakpoints {
                    positive(r, field)?;
                    if !ctx.is_finite() || ctx < 0.0 {
                        return Err(SimError::Invalid {
                            field: field.into(),
                            message: format!("context length {ctx} is not a finite nonnegative number"),
                        });
                    }
                }
                if breakpoints.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(SimError::Invalid {
                        field: field.into(),
                        message: "breakpoints must be strictly increasing".into(),
                    });
                }
                Ok(())
            }
        }
    }

    pub fn rate_at(&self, context: f64) -> f64 {
        match self {
            RateCurve::Constant(r) => *r,
            RateCurve::Piecewise { breakpoints: b } => {
                let first = b[0];
                let last = b[b.len() - 1];
                if context <= first.0 {
                    return first.1;
                }
                if context >= last.0 {
                    return last.1;
                }
                let i = b.partition_point(|&(c, _)| c <= context);
                let (c0, r0) = b[i - 1];
                let (c1, r1) = b[i];
                r0 + (r1 - r0) * (context - c0) / (c1 - c0)
            }
        }
    }

    /// Seconds to process `tokens` tokens starting at context length `from`,
    /// summing each token at its own context length.
    pub fn time_for(&self, from: u64, tokens: u64) -> f64 {
        match self {
            RateCurve::Constant(r) => tokens as f64 / r,
            RateCurve::Piecewise { .. } => (from..from + tokens)
                .map(|p| 1.0 / self.rate_at(p as f64))
                .sum(),
        }
    }

    pub fn scaled(&self, factor: f64) -> RateCurve {
        match self {
            RateCurve::Constant(r) => RateCurve::Constant(r * factor),
            RateCurve::Piecewise { breakpoints } => RateCurve::Piecewise {
                breakpoints: breakpoints.iter().map(|&(c, r)| (c, r * factor)).collect(),
            },
        }
    }
}

fn positive(r: f64, field: &str) -> Result<(), SimError> {
    if r.is_finite() && r > 0.0 {
        Ok(())
    } else {
        Err(SimError::Invalid {
            field: field.into(),
            message: format!("rate {r} must be finite and > 0"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputProfile {
    pub model_name: String,
    pub prefill_rate: RateCurve,
    pub decode_rate: RateCurve,
}

impl ThroughputProfile {
    pub fn constant(name: impl Into<String>, prefill: f64, decode: f64) -> Self {
        Self {
            model_name: name.into(),
            prefill_rate: RateCurve::Constant(prefill),
            decode_rate: RateCurve::Constant(decode),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.prefill_rate.validate("prefill_rate")?;
        self.decode_rate.validate("decode_rate")
    }

    pub fn from_toml_str(s: &str) -> Result<Self, SimError> {
        let p: Self = toml::from_str(s).map_err(|e| SimError::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

pub fn load_profile(path: &Path) -> Result<ThroughputProfile, SimError> {
    let s = std::fs::read_to_string(path)
        .map_err(|e| SimError::Parse(format!("{}: {e}", path.display())))?;
    ThroughputProfile::from_toml_str(&s).map_err(|e| match e {
        SimError::Parse(m) => SimError::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_file() {
        let p = ThroughputProfile::from_toml_str(
            "model_name = \"small\"\nprefill_rate = 30000\ndecode_rate = 150\n",
        )
        .unwrap();
        assert_eq!(p, ThroughputProfile::constant("small", 30000.0, 150.0));
    }

    #[test]
    fn piecewise_interpolation() {
        let p = ThroughputProfile::from_toml_str(
            "model_name = \"m\"\ndecode_rate = 100\n[prefill_rate]\nbreakpoints = [[0, 1000], [1000, 500], [3000, 100]]\n",
        )
        .unwrap();
        let c = &p.prefill_rate;
        assert_eq!(c.rate_at(0.0), 1000.0);
        assert_eq!(c.rate_at(500.0), 750.0);
        assert_eq!(c.rate_at(2000.0), 300.0);
        assert_eq!(c.rate_at(9000.0), 100.0);
        let t = c.time_for(0, 2);
        assert!((t - (1.0 / 1000.0 + 1.0 / 999.5)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_rates() {
        let e = ThroughputProfile::from_toml_str("model_name = \"m\"\nprefill_rate = 0\ndecode_rate = 1\n");
        assert!(matches!(e, Err(SimError::Invalid { ref field, .. }) if field == "prefill_rate"));
        let e = ThroughputProfile::from_toml_str(
            "model_name = \"m\"\ndecode_rate = 1\n[prefill_rate]\nbreakpoints = [[10, 1], [5, 1]]\n",
        );
        assert!(matches!(e, Err(SimError::Invalid { .. })));
        let e = ThroughputProfile::from_toml_str("model_name = \"m\"\ndecode_rate = 1\n");
        match e {
            Err(SimError::Parse(m)) => assert!(m.contains("prefill_rate"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
