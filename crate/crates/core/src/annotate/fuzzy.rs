//! Approximate substring location by normalized edit distance.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    None,
    WhitespaceFold,
}

fn default_threshold() -> f64 {
    0.85
}

fn default_stride() -> usize {
    1
}

fn default_max_fraction() -> f64 {
    0.25
}

fn default_slack() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    #[serde(default = "default_threshold")]
    pub similarity_threshold: f64,
    /// Distance between candidate window starts, in characters.
    #[serde(default = "default_stride")]
    pub window_stride: usize,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_max_fraction")]
    pub max_total_fraction: f64,
    /// Candidate window lengths lie within this relative distance of the
    /// snippet length.
    #[serde(default = "default_slack")]
    pub length_slack: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            similarity_threshold: default_threshold(),
            window_stride: default_stride(),
            normalization: Normalization::None,
            max_total_fraction: default_max_fraction(),
            length_slack: default_slack(),
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold <= 1.0) {
            return Err(format!(
                "similarity_threshold {} outside (0, 1]",
                self.similarity_threshold
            ));
        }
        if self.window_stride == 0 {
            return Err("window_stride must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.max_total_fraction) {
            return Err(format!(
                "max_total_fraction {} outside [0, 1]",
                self.max_total_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.length_slack) {
            return Err(format!("length_slack {} outside [0, 1)", self.length_slack));
        }
        Ok(())
    }

    /// Inclusive window-length bounds for a snippet of `m` characters.
    pub fn window_lengths(&self, m: usize) -> (usize, usize) {
        // Rounded to 1e-9 so that e.g. 0.8 * 10 is exactly 8.
        let lo = ((m as f64 * (1.0 - self.length_slack)) - 1e-9).ceil().max(1.0) as usize;
        let hi = ((m as f64 * (1.0 + self.length_slack)) + 1e-9).floor() as usize;
        (lo, hi.max(lo))
    }
}

/// A located window in original-trace character offsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuzzyMatch {
    pub start: usize,
    pub end: usize,
    pub similarity: f64,
}

/// Text after normalization, with each normalized character mapped back to
/// the original character range it stands for.
struct Normalized {
    chars: Vec<char>,
    orig_start: Vec<usize>,
    orig_end: Vec<usize>,
}

fn normalize(text: &str, mode: Normalization, trim: bool) -> Normalized {
    let mut out = Normalized {
        chars: Vec::new(),
        orig_start: Vec::new(),
        orig_end: Vec::new(),
    };
    match mode {
        Normalization::None => {
            for (i, c) in text.chars().enumerate() {
                out.chars.push(c);
                out.orig_start.push(i);
                out.orig_end.push(i + 1);
            }
        }
        Normalization::WhitespaceFold => {
            for (i, c) in text.chars().enumerate() {
                if c.is_whitespace() {
                    if out.chars.last() == Some(&' ') {
                        *out.orig_end.last_mut().expect("nonempty") = i + 1;
                        continue;
                    }
                    out.chars.push(' ');
                } else {
                    out.chars.push(c);
                }
                out.orig_start.push(i);
                out.orig_end.push(i + 1);
            }
            if trim {
                while out.chars.last() == Some(&' ') {
                    out.chars.pop();
                    out.orig_start.pop();
                    out.orig_end.pop();
                }
                if out.chars.first() == Some(&' ') {
                    out.chars.remove(0);
                    out.orig_start.remove(0);
                    out.orig_end.remove(0);
                }
            }
        }
    }
    out
}

/// Best window found so far: ordered by distance ratio, then start, then
/// length.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    start: usize,
    len: usize,
    dist: usize,
    denom: usize,
}

impl Candidate {
    fn better_than(&self, other: &Candidate) -> bool {
        let lhs = self.dist * other.denom;
        let rhs = other.dist * self.denom;
        (lhs, self.start, self.len) < (rhs, other.start, other.len)
    }

    fn similarity(&self) -> f64 {
        1.0 - self.dist as f64 / self.denom as f64
    }
}

/// Edit distances between `pattern` and every prefix of `text[start..]`
/// with length in `lo..=hi`, from a single DP sweep over the text rows.
#[allow(clippy::too_many_arguments)]
fn scan_start(
    text: &[char],
    pattern: &[char],
    start: usize,
    lo: usize,
    hi: usize,
    prev: &mut Vec<usize>,
    cur: &mut Vec<usize>,
    best: &mut Option<Candidate>,
) {
    let m = pattern.len();
    let max_len = hi.min(text.len() - start);
    if max_len < lo {
        return;
    }
    prev.clear();
    prev.extend(0..=m);
    cur.clear();
    cur.resize(m + 1, 0);
    for i in 1..=max_len {
        let tc = text[start + i - 1];
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(tc != pattern[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(prev, cur);
        if i >= lo {
            let cand = Candidate {
                start,
                len: i,
                dist: prev[m],
                denom: m.max(i),
            };
            if best.as_ref().is_none_or(|b| cand.better_than(b)) {
                *best = Some(cand);
            }
        }
    }
}

fn find_exact(text: &[char], pattern: &[char]) -> Option<usize> {
    if pattern.is_empty() || pattern.len() > text.len() {
        return None;
    }
    text.windows(pattern.len()).position(|w| w == pattern)
}

/// Locates `snippet` in `trace`. Returns the window maximizing
/// `1 - edit_distance / max(len)` over windows whose length is within the
/// configured slack of the snippet length, if it reaches the threshold.
/// Ties go to the earliest start, then the shortest window.
pub fn fuzzy_match(trace: &str, snippet: &str, config: &MatchConfig) -> Option<FuzzyMatch> {
    let t = normalize(trace, config.normalization, false);
    let p = normalize(snippet, config.normalization, true);
    if p.chars.is_empty() || t.chars.is_empty() {
        return None;
    }
    let m = p.chars.len();
    let best = if let Some(at) = find_exact(&t.chars, &p.chars) {
        Candidate {
            start: at,
            len: m,
            dist: 0,
            denom: m,
        }
    } else {
        let (lo, hi) = config.window_lengths(m);
        if lo > t.chars.len() {
            return None;
        }
        let stride = config.window_stride.max(1);
        let (mut prev, mut cur) = (Vec::new(), Vec::new());
        let mut best = None;
        let last_start = t.chars.len() - lo;
        for s in (0..=last_start).step_by(stride) {
            scan_start(&t.chars, &p.chars, s, lo, hi, &mut prev, &mut cur, &mut best);
        }
        if stride > 1 {
            if let Some(b) = best {
                let from = b.start.saturating_sub(stride - 1);
                let to = (b.start + stride - 1).min(last_start);
                for s in from..=to {
                    scan_start(&t.chars, &p.chars, s, lo, hi, &mut prev, &mut cur, &mut best);
                }
            }
        }
        best?
    };
    let similarity = best.similarity();
    if similarity < config.similarity_threshold {
        return None;
    }
    Some(FuzzyMatch {
        start: t.orig_start[best.start],
        end: t.orig_end[best.start + best.len - 1],
        similarity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lev(a: &[char], b: &[char]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + c);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn window_bounds() {
        let c = MatchConfig::default();
        assert_eq!(c.window_lengths(10), (8, 12));
        assert_eq!(c.window_lengths(1), (1, 1));
        assert_eq!(c.window_lengths(7), (6, 8));
    }

    #[test]
    fn exact_substring() {
        let c = MatchConfig::default();
        let m = fuzzy_match("abc def ghi def", "def", &c).unwrap();
        assert_eq!((m.start, m.end, m.similarity), (4, 7, 1.0));
    }

    #[test]
    fn one_substitution() {
        let region: String = (0..100).map(|i| (b'a' + (i * 7 % 26) as u8) as char).collect();
        let trace = format!("{}{}{}", "x".repeat(50), region, "y".repeat(50));
        let mut snippet: Vec<char> = region.chars().collect();
        snippet[40] = '#';
        let snippet: String = snippet.into_iter().collect();
        let m = fuzzy_match(&trace, &snippet, &MatchConfig::default()).unwrap();
        assert_eq!((m.start, m.end), (50, 150));
        assert!(m.similarity >= 0.99);
        let t: Vec<char> = trace.chars().collect();
        let p: Vec<char> = snippet.chars().collect();
        assert_eq!(lev(&t[50..150], &p), 1);
    }

    #[test]
    fn absent_snippet() {
        assert!(fuzzy_match("aaaaaaaaaaaaaaaaaaaa", "zzzzzz", &MatchConfig::default()).is_none());
        assert!(fuzzy_match("abc", "", &MatchConfig::default()).is_none());
        assert!(fuzzy_match("ab", "abcdefgh", &MatchConfig::default()).is_none());
    }

    #[test]
    fn whitespace_fold_maps_offsets_back() {
        let c = MatchConfig {
            normalization: Normalization::WhitespaceFold,
            ..MatchConfig::default()
        };
        let trace = "intro   the  quick\n\nbrown fox jumps";
        let m = fuzzy_match(trace, " the quick brown ", &c).unwrap();
        assert_eq!(m.similarity, 1.0);
        assert_eq!(&trace[m.start..m.end], "the  quick\n\nbrown");
    }

    #[test]
    fn stride_refinement_finds_exact_region() {
        let c = MatchConfig {
            window_stride: 7,
            ..MatchConfig::default()
        };
        let trace = "lorem ipsum dolor sit amet, consectetur adipiscing elit";
        let m = fuzzy_match(trace, "dolor slt amet", &c).unwrap();
        assert_eq!(&trace[m.start..m.end], "dolor sit amet");
    }
}
