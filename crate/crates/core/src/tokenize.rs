//! Rule-based word tokenizer used for post-length statistics.
//!
//! | step | rule |
//! |------|------|
//! | 1 | split on Unicode whitespace |
//! | 2 | every leading punctuation character of a chunk is its own token |
//! | 3 | every trailing punctuation character of a chunk is its own token |
//! | 4 | the remaining interior (letters, digits, inner punctuation) is one token |
//!
//! Punctuation means the Unicode general categories `P*` (Pc, Pd, Ps, Pe, Pi,
//! Pf, Po). Symbols such as `$` or `+` are not punctuation.

use unicode_general_category::{get_general_category, GeneralCategory};

pub fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Splits `text` into word tokens following the rule table above.
pub fn word_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        let mut end = chunk.len();
        let mut trailing = Vec::new();
        for (i, c) in chunk.char_indices() {
            if !is_punctuation(c) {
                break;
            }
            out.push(&chunk[i..i + c.len_utf8()]);
            start = i + c.len_utf8();
        }
        while end > start {
            let (i, c) = chunk[start..end]
                .char_indices()
                .next_back()
                .map(|(i, c)| (start + i, c))
                .expect("non-empty slice");
            if !is_punctuation(c) {
                break;
            }
            trailing.push(&chunk[i..end]);
            end = i;
        }
        if end > start {
            out.push(&chunk[start..end]);
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

pub fn word_token_count(text: &str) -> usize {
    word_tokens(text).len()
}
