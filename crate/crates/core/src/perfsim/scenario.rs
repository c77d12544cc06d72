//! Scenario files: a profile pair, simulator settings and named scenarios.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_profile, ExecMode, Segment, SegmentedTrace, SimConfig, SimError, ThroughputProfile};

/// A profile given inline or as a path relative to the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileRef {
    Path(PathBuf),
    Inline(ThroughputProfile),
}

impl ProfileRef {
    pub fn resolve(&self, base: &Path) -> Result<ThroughputProfile, SimError> {
        match self {
            ProfileRef::Inline(p) => {
                p.validate()?;
                Ok(p.clone())
            }
            ProfileRef::Path(p) => load_profile(&base.join(p)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioShape {
    Segments {
        segments: Vec<Segment>,
    },
    Shorthand {
        total_tokens: u64,
        offload_fraction: f64,
        #[serde(default = "one")]
        spans: u64,
    },
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(flatten)]
    pub shape: ScenarioShape,
    /// Overrides the file-level mode.
    #[serde(default)]
    pub mode: Option<ExecMode>,
}

impl Scenario {
    pub fn trace(&self) -> Result<SegmentedTrace, SimError> {
        let named = |e: SimError| match e {
            SimError::Invalid { field, message } => SimError::Invalid {
                field: format!("scenario {:?}: {field}", self.name),
                message,
            },
            other => other,
        };
        match &self.shape {
            ScenarioShape::Segments { segments } => {
                if segments.iter().any(|s| s.tokens == 0) {
                    return Err(named(SimError::Invalid {
                        field: "segments".into(),
                        message: "token counts must be >= 1".into(),
                    }));
                }
                Ok(SegmentedTrace::new(segments.iter().copied()))
            }
            ScenarioShape::Shorthand {
                total_tokens,
                offload_fraction,
                spans,
            } => SegmentedTrace::shorthand(*total_tokens, *offload_fraction, *spans).map_err(named),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub small_profile: ProfileRef,
    pub large_profile: ProfileRef,
    /// Falls back to the caller's settings when absent.
    #[serde(default)]
    pub sim: Option<SimConfig>,
    #[serde(default, rename = "scenario")]
    pub scenarios: Vec<Scenario>,
}

impl ScenarioFile {
    pub fn from_toml_str(s: &str) -> Result<Self, SimError> {
        let f: Self = toml::from_str(s).map_err(|e| SimError::Parse(e.to_string()))?;
        if let Some(sim) = &f.sim {
            sim.validate()?;
        }
        for sc in &f.scenarios {
            sc.trace()?;
        }
        Ok(f)
    }

    pub fn sim_or(&self, fallback: &SimConfig) -> SimConfig {
        self.sim.clone().unwrap_or_else(|| fallback.clone())
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), SimError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| SimError::Parse(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::from_toml_str(&s)?, base))
    }
}
