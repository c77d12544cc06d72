//! Scalar training reward: accuracy, format and tag-count components.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{lenient_regions, scan_text, validate_trace, word_fraction, TagKind};
use crate::tags::ControlTags;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("coverage {0} outside [0, 1]")]
    CoverageDomain(f64),
    #[error("coverage peak {0} must lie strictly between 0 and 1")]
    BadPeak(f64),
    #[error("weights must be finite, nonnegative and not all zero")]
    BadWeights,
    #[error("mismatch penalty must be finite and nonnegative")]
    BadPenalty,
    #[error("essential tag list is empty")]
    NoEssentialTags,
}

fn default_peak() -> f64 {
    0.4
}

fn default_weights() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

fn default_penalty() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    #[serde(default = "default_peak")]
    pub coverage_peak: f64,
    /// Accuracy, format, tag-count.
    #[serde(default = "default_weights")]
    pub weights: [f64; 3],
    /// Defaults to the scaffold tags of `tags`.
    #[serde(default)]
    pub essential_tags: Option<Vec<String>>,
    #[serde(default = "default_penalty")]
    pub mismatch_penalty: f64,
    #[serde(default)]
    pub tags: ControlTags,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            coverage_peak: default_peak(),
            weights: default_weights(),
            essential_tags: None,
            mismatch_penalty: default_penalty(),
            tags: ControlTags::default(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.coverage_peak > 0.0 && self.coverage_peak < 1.0) {
            return Err(RewardError::BadPeak(self.coverage_peak));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.weights.iter().all(|w| *w == 0.0)
        {
            return Err(RewardError::BadWeights);
        }
        if !self.mismatch_penalty.is_finite() || self.mismatch_penalty < 0.0 {
            return Err(RewardError::BadPenalty);
        }
        if self.essential_tags.as_ref().is_some_and(Vec::is_empty) {
            return Err(RewardError::NoEssentialTags);
        }
        Ok(())
    }

    pub fn essential(&self) -> Vec<String> {
        match &self.essential_tags {
            Some(t) => t.clone(),
            None => self.tags.scaffold().iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub accuracy: f64,
    pub format: f64,
    pub tag_count: f64,
    pub coverage_term: f64,
    pub coverage: f64,
    pub total: f64,
}

/// Trims, collapses whitespace runs and strips one `\boxed{...}` wrapper.
pub fn normalize_answer(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    match collapsed
        .strip_prefix("\\boxed{")
        .and_then(|r| r.strip_suffix('}'))
    {
        Some(inner) if braces_balanced(inner) => inner.split_whitespace().collect::<Vec<_>>().join(" "),
        _ => collapsed,
    }
}

fn braces_balanced(s: &str) -> bool {
    let mut depth = 0i64;
    for c in s.chars() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

/// Content of the first answer block.
pub fn answer_block<'a>(completion: &'a str, tags: &ControlTags) -> Option<&'a str> {
    let start = completion.find(&tags.answer_open)? + tags.answer_open.len();
    let len = completion[start..].find(&tags.answer_close)?;
    Some(&completion[start..start + len])
}

/// Argument of the last `\boxed{...}` with balanced braces.
pub fn last_boxed(completion: &str) -> Option<&str> {
    let at = completion.rfind("\\boxed{")?;
    let body = &completion[at + "\\boxed{".len()..];
    let mut depth = 1usize;
    for (i, c) in body.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&body[..i]);
                }
            }
            _ => {}
        }
    }
    None
}

pub fn accuracy_reward(completion: &str, gold: &str, tags: &ControlTags) -> f64 {
    let candidate = answer_block(completion, tags).or_else(|| last_boxed(completion));
    match candidate {
        Some(a) if normalize_answer(a) == normalize_answer(gold) => 1.0,
        _ => 0.0,
    }
}

pub fn format_reward(completion: &str, tags: &ControlTags) -> f64 {
    let v = validate_trace(completion, tags);
    // Zero offload tags only count as balanced inside a correct scaffold.
    let has_tags = !scan_text(completion, tags).is_empty();
    let nesting = v.offload_well_formed() && (has_tags || v.scaffold_ok);
    f64::from(u8::from(v.scaffold_ok)) + f64::from(u8::from(nesting))
}

pub fn coverage_reward(c: f64, peak: f64) -> Result<f64, RewardError> {
    if !(peak > 0.0 && peak < 1.0) {
        return Err(RewardError::BadPeak(peak));
    }
    if !(0.0..=1.0).contains(&c) {
        return Err(RewardError::CoverageDomain(c));
    }
    Ok(if c <= peak {
        c / peak
    } else {
        1.0 - 2.0 * (c - peak) / (1.0 - peak)
    })
}

/// Word fraction inside offload regions, tolerating malformed tags.
pub fn completion_coverage(completion: &str, tags: &ControlTags) -> f64 {
    let (stripped, regions) = lenient_regions(completion, tags);
    word_fraction(&stripped, &regions)
}

/// Returns (tag-count component, coverage term, coverage).
fn tag_count_parts(completion: &str, config: &RewardConfig) -> Result<(f64, f64, f64), RewardError> {
    let essential = config.essential();
    let credit = 1.0 / essential.len() as f64;
    let presence: f64 = essential
        .iter()
        .filter(|t| !t.is_empty() && completion.contains(t.as_str()))
        .map(|_| credit)
        .sum();
    let coverage = completion_coverage(completion, &config.tags);
    let term = coverage_reward(coverage, config.coverage_peak)?;
    let (mut opens, mut closes) = (0usize, 0usize);
    for ev in scan_text(completion, &config.tags) {
        match ev.kind {
            TagKind::Open => opens += 1,
            TagKind::Close => closes += 1,
        }
    }
    let penalty = if opens == closes { 0.0 } else { config.mismatch_penalty };
    Ok((presence + term - penalty, term, coverage))
}

pub fn tag_count_reward(completion: &str, config: &RewardConfig) -> Result<f64, RewardError> {
    config.validate()?;
    tag_count_parts(completion, config).map(|(r, _, _)| r)
}

pub fn total_reward(
    completion: &str,
    gold: &str,
    config: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    config.validate()?;
    let accuracy = accuracy_reward(completion, gold, &config.tags);
    let format = format_reward(completion, &config.tags);
    let (tag_count, coverage_term, coverage) = tag_count_parts(completion, config)?;
    let [wa, wf, wt] = config.weights;
    Ok(RewardBreakdown {
        accuracy,
        format,
        tag_count,
        coverage_term,
        coverage,
        total: wa * accuracy + wf * format + wt * tag_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t() -> ControlTags {
        ControlTags::default()
    }

    #[test]
    fn coverage_reward_points() {
        assert_eq!(coverage_reward(0.0, 0.4).unwrap(), 0.0);
        assert_eq!(coverage_reward(0.4, 0.4).unwrap(), 1.0);
        assert_eq!(coverage_reward(1.0, 0.4).unwrap(), -1.0);
        assert!((coverage_reward(0.2, 0.4).unwrap() - 0.5).abs() < 1e-12);
        assert!(coverage_reward(0.7, 0.4).unwrap().abs() < 1e-12);
        assert!(coverage_reward(1.01, 0.4).is_err());
        assert!(coverage_reward(-0.01, 0.4).is_err());
        assert!(coverage_reward(f64::NAN, 0.4).is_err());
    }

    #[test]
    fn accuracy() {
        assert_eq!(accuracy_reward("<answer>42</answer>", "42", &t()), 1.0);
        assert_eq!(accuracy_reward("<answer> 42 </answer>", "42", &t()), 1.0);
        assert_eq!(accuracy_reward("<answer>\\boxed{42}</answer>", "42", &t()), 1.0);
        assert_eq!(accuracy_reward("so \\boxed{4{2}} and \\boxed{7}", "7", &t()), 1.0);
        assert_eq!(accuracy_reward("no answer", "42", &t()), 0.0);
        assert_eq!(accuracy_reward("<answer>41</answer>", "42", &t()), 0.0);
        assert_eq!(normalize_answer("  a \n\t b "), "a b");
        assert_eq!(normalize_answer("\\boxed{ x + 1 }"), "x + 1");
        assert_eq!(normalize_answer("\\boxed{a} + \\boxed{b}"), "\\boxed{a} + \\boxed{b}");
    }

    #[test]
    fn format() {
        let full = "<think>a <bigmodel>b</bigmodel> c</think><answer>1</answer>";
        assert_eq!(format_reward(full, &t()), 2.0);
        let unclosed = "<think>a <bigmodel>b c</think><answer>1</answer>";
        assert_eq!(format_reward(unclosed, &t()), 1.0);
        let no_close_think = "<think>a <bigmodel>b</bigmodel><answer>1</answer>";
        assert_eq!(format_reward(no_close_think, &t()), 1.0);
        assert_eq!(format_reward("<think>a</think><answer>1</answer>", &t()), 2.0);
        assert_eq!(format_reward("", &t()), 0.0);
        assert_eq!(format_reward("the answer is 4", &t()), 0.0);
        assert_eq!(format_reward("<think>a <bigmodel>b</bigmodel>", &t()), 1.0);
    }

    #[test]
    fn tag_count() {
        let cfg = RewardConfig::default();
        // 10 words, 4 inside the region.
        let c = "<think>a b c <bigmodel>x x x x</bigmodel> d e</think> <answer>1</answer>";
        assert!((completion_coverage(c, &cfg.tags) - 0.4).abs() < 1e-12);
        assert!((tag_count_reward(c, &cfg).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(tag_count_reward("<think>x</think>", &cfg).unwrap(), 0.5);
        let mismatched = "<bigmodel>a</bigmodel><bigmodel>b";
        let balanced = "<bigmodel>a</bigmodel><bigmodel>b</bigmodel>";
        let d = tag_count_reward(balanced, &cfg).unwrap() - tag_count_reward(mismatched, &cfg).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn totals() {
        let cfg = RewardConfig::default();
        let c = "<think>a b c <bigmodel>x x x x</bigmodel> d e</think> <answer>42</answer>";
        let b = total_reward(c, "42", &cfg).unwrap();
        assert_eq!((b.accuracy, b.format), (1.0, 2.0));
        assert!((b.total - 5.0).abs() < 1e-12);
        let e = total_reward("", "42", &cfg).unwrap();
        assert_eq!((e.accuracy, e.format, e.tag_count, e.total), (0.0, 0.0, 0.0, 0.0));
        let s = total_reward("<think>w</think><answer>42</answer>", "42", &cfg).unwrap();
        assert_eq!((s.accuracy, s.format, s.tag_count, s.total), (1.0, 2.0, 1.0, 4.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = RewardConfig::default();
        cfg.coverage_peak = 1.0;
        assert!(cfg.validate().is_err());
        cfg = RewardConfig { weights: [0.0; 3], ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg = RewardConfig { essential_tags: Some(vec![]), ..Default::default() };
        assert!(cfg.validate().is_err());
        let parsed: RewardConfig = toml::from_str("coverage_peak = 0.3").unwrap();
        assert_eq!(parsed.coverage_peak, 0.3);
        assert_eq!(parsed.weights, [1.0; 3]);
    }

    proptest! {
        #[test]
        fn coverage_reward_shape(a in 0.0f64..=1.0, b in 0.0f64..=1.0, peak in 0.05f64..0.95) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let rl = coverage_reward(lo, peak).unwrap();
            let rh = coverage_reward(hi, peak).unwrap();
            prop_assert!((-1.0..=1.0).contains(&rl));
            prop_assert!(rl <= 1.0 && coverage_reward(peak, peak).unwrap() == 1.0);
            if hi <= peak {
                prop_assert!(rl >= 0.0 && rl <= rh);
            }
            if lo >= peak && hi > lo {
                prop_assert!(rh < rl);
            }
        }

        #[test]
        fn unmatched_open_never_helps(words in proptest::collection::vec("[a-z]{1,4}", 0..20), at in 0usize..20) {
            let cfg = RewardConfig::default();
            let at = at.min(words.len());
            let base = words.join(" ");
            let mut with_open = words.clone();
            with_open.insert(at, "<bigmodel>".into());
            let with_open = with_open.join(" ");
            let r0 = tag_count_reward(&base, &cfg).unwrap();
            let r1 = tag_count_reward(&with_open, &cfg).unwrap();
            // The unclosed region may raise coverage by at most 1 in reward; the
            // mismatch penalty of 1 offsets it.
            prop_assert!(r1 <= r0 + 1e-12, "{} > {}", r1, r0);
        }

        #[test]
        fn total_bounds(text in "[a-z <>/bigmodelthinkanswer]{0,80}") {
            let cfg = RewardConfig::default();
            let b = total_reward(&text, "x", &cfg).unwrap();
            prop_assert!(b.total >= -2.0 - 1e-12 && b.total <= 5.0 + 1e-12);
            prop_assert_eq!(b.clone(), total_reward(&text, "x", &cfg).unwrap());
        }
    }
}
