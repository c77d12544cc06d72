//! Character-offset helpers. All public offsets in this crate count Unicode
//! scalar values, not bytes.

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Byte index of the `char_offset`-th character (or `text.len()` past the end).
pub fn byte_index(text: &str, char_offset: usize) -> usize {
    text.char_indices()
        .nth(char_offset)
        .map_or(text.len(), |(b, _)| b)
}

pub fn slice_chars(text: &str, start: usize, end: usize) -> &str {
    let b0 = byte_index(text, start);
    let b1 = b0 + byte_index(&text[b0..], end.saturating_sub(start));
    &text[b0..b1]
}

/// Character offsets at which whitespace-separated words begin.
pub fn word_starts(text: &str) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut prev_ws = true;
    for (i, c) in text.chars().enumerate() {
        let ws = c.is_whitespace();
        if !ws && prev_ws {
            starts.push(i);
        }
        prev_ws = ws;
    }
    starts
}

pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Number of words whose first character falls inside one of the
/// half-open character ranges. A word straddling a boundary is counted on
/// the side where it starts, so inside + outside always equals the total.
pub fn words_starting_in(text: &str, ranges: &[(usize, usize)]) -> usize {
    word_starts(text)
        .into_iter()
        .filter(|&w| ranges.iter().any(|&(s, e)| s <= w && w < e))
        .count()
}

/// Collapses whitespace runs to a single space and trims both ends.
pub fn fold_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
