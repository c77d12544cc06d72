use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use splitreason::reward::{total_reward, RewardBreakdown, RewardConfig};

use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub completion: String,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RewardLine {
    Scored(RewardBreakdown),
    Failed { line: usize, error: String },
}

pub fn score_line(n: usize, line: &str, config: &RewardConfig) -> RewardLine {
    let rec: CompletionRecord = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            return RewardLine::Failed {
                line: n,
                error: e.to_string(),
            }
        }
    };
    match total_reward(&rec.completion, &rec.gold, config) {
        Ok(b) => RewardLine::Scored(b),
        Err(e) => RewardLine::Failed {
            line: n,
            error: e.to_string(),
        },
    }
}

pub fn cmd_reward(path: &Path, config: &RewardConfig, workers: usize) -> Result<Vec<RewardLine>> {
    config.validate()?;
    let lines = io::read_lines(path)?;
    io::parallel_map(&lines, workers, |_, (n, l)| score_line(*n, l, config))
}
