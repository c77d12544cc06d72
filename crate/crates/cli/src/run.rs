use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use splitreason::backend::Role;
use splitreason::orchestrator::{
    run_cooperative, GenerationResult, Policy, RunConfig, RunError, RunMode,
};
use splitreason::protocol::CoverageCounting;

use crate::config::LoadedConfig;
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    #[serde(default)]
    pub id: Option<String>,
    pub question: String,
}

/// One persisted run. `config` is the effective configuration, seed
/// included, so a record plus the tool config replays the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub question: String,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<GenerationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Large-model share of decoded tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_offload_fraction: Option<f64>,
    /// Whitespace-word coverage of the trace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub policy: Option<Policy>,
    pub seed: Option<u64>,
    pub mode: Option<RunMode>,
}

/// Effective config for the `index`-th question. Random policies get
/// `seed + index`, so questions in a batch draw independent plans.
pub fn effective_config(base: &RunConfig, overrides: &RunOverrides, index: usize) -> RunConfig {
    let mut cfg = base.clone();
    if let Some(p) = &overrides.policy {
        cfg.policy = p.clone();
    }
    if let Some(m) = overrides.mode {
        cfg.mode = m;
    }
    if let Policy::RandomOffload { seed, .. } = &mut cfg.policy {
        *seed = overrides.seed.unwrap_or(*seed).wrapping_add(index as u64);
    }
    cfg
}

pub fn load_questions(path: &Path) -> Result<Vec<Result<QuestionRecord, String>>> {
    Ok(io::read_lines(path)?
        .into_iter()
        .map(|(n, line)| serde_json::from_str(&line).map_err(|e| format!("line {n}: {e}")))
        .collect())
}

/// Runs one record against fresh sessions.
pub fn run_one(loaded: &LoadedConfig, id: String, question: &str, config: RunConfig) -> RunRecord {
    let mut record = RunRecord {
        id,
        question: question.to_string(),
        config,
        result: None,
        error: None,
        token_offload_fraction: None,
        coverage: None,
    };
    let outcome = (|| -> Result<GenerationResult> {
        let (s, l) = loaded.run_pair()?;
        let mut small = loaded.backend(s, Role::Small)?;
        let mut large = loaded.backend(l, Role::Large)?;
        match run_cooperative(question, small.as_mut(), large.as_mut(), &record.config) {
            Ok(r) => Ok(r),
            Err(e @ RunError::Config(_)) => Err(e.into()),
            Err(e) => {
                record.result = e.partial().cloned();
                Err(e.into())
            }
        }
    })();
    match outcome {
        Ok(r) => {
            let t = &r.trace;
            let decoded = t.small_tokens + t.large_tokens;
            record.token_offload_fraction = Some(if decoded == 0 {
                0.0
            } else {
                t.large_tokens as f64 / decoded as f64
            });
            record.coverage =
                Some(t.coverage(CoverageCounting::WhitespaceWords, &record.config.tags));
            record.result = Some(r);
        }
        Err(e) => record.error = Some(format!("{e:#}")),
    }
    record
}

pub fn cmd_run(
    loaded: &LoadedConfig,
    questions: Vec<Result<QuestionRecord, String>>,
    overrides: &RunOverrides,
    workers: usize,
) -> Result<Vec<RunRecord>> {
    loaded.run_pair()?;
    let base = &loaded.tool.run.config;
    let probe = effective_config(base, overrides, 0);
    probe
        .validate()
        .map_err(anyhow::Error::msg)
        .context("run configuration")?;
    io::parallel_map(&questions, workers, |i, q| {
        let config = effective_config(base, overrides, i);
        match q {
            Ok(q) => {
                let id = q.id.clone().unwrap_or_else(|| (i + 1).to_string());
                run_one(loaded, id, &q.question, config)
            }
            Err(msg) => RunRecord {
                id: (i + 1).to_string(),
                question: String::new(),
                config,
                result: None,
                error: Some(format!("malformed question record: {msg}")),
                token_offload_fraction: None,
                coverage: None,
            },
        }
    })
}

pub fn inline_question(text: &str) -> Result<Vec<Result<QuestionRecord, String>>> {
    if text.is_empty() {
        bail!("--question is empty");
    }
    Ok(vec![Ok(QuestionRecord {
        id: Some("1".into()),
        question: text.to_string(),
    })])
}
