//! Sentence segmentation, normalization and fuzzy sentence matching.
//!
//! Every module that reasons about sentence-level locations (pipeline ground
//! truth, localization scoring, the annotation server's highlights) goes
//! through these functions so that all of them agree on one segmentation.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::TextError;

/// Abbreviations whose trailing period never ends a sentence.
pub const ABBREVIATIONS: &[&str] = &["mr.", "mrs.", "dr.", "st.", "e.g.", "i.e.", "vs."];

/// Quoted spans at least this many characters long do not suppress splitting.
pub const MAX_PROTECTED_QUOTE_CHARS: usize = 300;

/// Token-level Jaccard similarity at or above which two sentences match.
pub const JACCARD_MATCH_THRESHOLD: f64 = 0.8;

/// One sentence of a segmented text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub index: usize,
    pub normalized: String,
}

/// Number of whitespace-separated tokens in `text`.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Collapse every run of whitespace into a single space and trim.
pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fold_char(c: char) -> Option<&'static str> {
    Some(match c {
        '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}' | '\u{2032}' => "'",
        '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{2033}' | '\u{00AB}' | '\u{00BB}' => "\"",
        '\u{2010}' | '\u{2011}' | '\u{2012}' | '\u{2013}' | '\u{2014}' | '\u{2015}' | '\u{2212}' => "-",
        '\u{2026}' => "...",
        '\u{00A0}' | '\u{2007}' | '\u{202F}' => " ",
        _ => return None,
    })
}

/// Map typographic quotes, dashes and ellipses to their ASCII forms.
pub fn fold_unicode(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match fold_char(c) {
            Some(s) => out.push_str(s),
            None => out.push(c),
        }
    }
    out
}

fn is_leading_noise(c: char) -> bool {
    matches!(c, '"' | '\'' | '`' | '(' | '[' | '{') || c.is_whitespace()
}

fn is_trailing_noise(c: char) -> bool {
    matches!(c, '"' | '\'' | '`' | ')' | ']' | '}' | '.' | '!' | '?' | ',' | ';' | ':') || c.is_whitespace()
}

/// Canonical comparison form of a sentence.
///
/// Lowercases, folds unicode punctuation to ASCII, collapses whitespace and
/// strips surrounding quotes, brackets and terminal punctuation. The result may
/// be empty; callers decide what that means.
pub fn normalize_sentence(text: &str) -> String {
    let folded = fold_unicode(text).to_lowercase();
    let collapsed = collapse_whitespace(&folded);
    collapsed.trim_start_matches(is_leading_noise).trim_end_matches(is_trailing_noise).to_string()
}

/// Comparison tokens of a normalized string: whitespace-separated words with
/// punctuation trimmed from their edges.
pub fn match_tokens(normalized: &str) -> Vec<&str> {
    normalized.split(' ').map(|t| t.trim_matches(|c: char| !c.is_alphanumeric())).filter(|t| !t.is_empty()).collect()
}

/// Token-level Jaccard similarity of two normalized strings.
pub fn token_jaccard(a: &str, b: &str) -> f64 {
    let ta: BTreeSet<&str> = match_tokens(a).into_iter().collect();
    let tb: BTreeSet<&str> = match_tokens(b).into_iter().collect();
    if ta.is_empty() && tb.is_empty() {
        return 0.0;
    }
    let inter = ta.intersection(&tb).count();
    let union = ta.union(&tb).count();
    inter as f64 / union as f64
}

/// Whether the tokens of `inner` occur contiguously in those of `outer`.
fn contains_tokens(outer: &str, inner: &str) -> bool {
    let outer = match_tokens(outer);
    let inner = match_tokens(inner);
    !inner.is_empty() && outer.windows(inner.len()).any(|w| w == inner.as_slice())
}

/// True when `predicted` matches at least one of the `gold` sentences.
///
/// A match is normalized containment in either direction (aligned to token
/// boundaries) or a token Jaccard similarity of at least
/// [`JACCARD_MATCH_THRESHOLD`].
pub fn match_sentence<S: AsRef<str>>(predicted: &str, gold: &[S]) -> bool {
    let p = normalize_sentence(predicted);
    if p.is_empty() {
        return false;
    }
    gold.iter().any(|g| {
        let g = normalize_sentence(g.as_ref());
        !g.is_empty()
            && (contains_tokens(&p, &g) || contains_tokens(&g, &p) || token_jaccard(&p, &g) >= JACCARD_MATCH_THRESHOLD)
    })
}

/// True when any of `predicted` matches any of `gold`.
pub fn any_match<P: AsRef<str>, G: AsRef<str>>(predicted: &[P], gold: &[G]) -> bool {
    !gold.is_empty() && predicted.iter().any(|p| match_sentence(p.as_ref(), gold))
}

fn is_opening_quote(c: char) -> bool {
    matches!(c, '"' | '\u{201C}' | '\'' | '\u{2018}')
}

fn is_closing_mark(c: char) -> bool {
    matches!(c, '"' | '\u{201D}' | '\'' | '\u{2019}' | ')' | ']')
}

/// Byte ranges of double-quoted spans short enough to suppress splitting.
fn protected_quote_spans(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        let closer = match c {
            '"' => Some('"'),
            '\u{201C}' => Some('\u{201D}'),
            _ => None,
        };
        if let Some(closer) = closer {
            if let Some(rel) = chars[i + 1..].iter().position(|&(_, d)| d == closer) {
                let j = i + 1 + rel;
                if j - i < MAX_PROTECTED_QUOTE_CHARS {
                    spans.push((start, chars[j].0));
                }
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    spans
}

fn ends_with_abbreviation(text: &str, dot_pos: usize) -> bool {
    let head = &text[..=dot_pos];
    let token = head
        .rsplit(char::is_whitespace)
        .next()
        .unwrap_or("")
        .trim_start_matches(|c: char| is_opening_quote(c) || c == '(' || c == '[')
        .to_lowercase();
    ABBREVIATIONS.contains(&token.as_str())
}

/// Byte offsets at which a new sentence starts (excluding 0).
fn boundary_offsets(text: &str) -> Vec<usize> {
    let protected = protected_quote_spans(text);
    let inside = |pos: usize| protected.iter().any(|&(s, e)| pos > s && pos < e);
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut cuts = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c == '\n' {
            // Blank line: paragraph break.
            let mut j = i + 1;
            let mut newlines = 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                if chars[j].1 == '\n' {
                    newlines += 1;
                }
                j += 1;
            }
            if newlines >= 2 && j < chars.len() && !inside(pos) {
                cuts.push(chars[j].0);
            }
            i = j;
            continue;
        }
        if !matches!(c, '.' | '!' | '?') {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < chars.len() && matches!(chars[j].1, '.' | '!' | '?') {
            j += 1;
        }
        let single_period = c == '.' && j == i + 1;
        while j < chars.len() && is_closing_mark(chars[j].1) {
            j += 1;
        }
        let ws_start = j;
        while j < chars.len() && chars[j].1.is_whitespace() {
            j += 1;
        }
        let had_ws = j > ws_start;
        let paragraph = chars[ws_start..j].iter().filter(|&&(_, d)| d == '\n').count() >= 2;
        let next_ok = j < chars.len() && {
            let n = chars[j].1;
            n.is_uppercase() || is_opening_quote(n)
        };
        let abbreviation = single_period && ends_with_abbreviation(text, pos);
        let paragraph = paragraph && j < chars.len();
        if ((had_ws && next_ok && !abbreviation) || paragraph) && !inside(chars[ws_start - 1].0) {
            cuts.push(chars[j].0);
        }
        i = j.max(i + 1);
    }
    cuts.dedup();
    cuts
}

/// Split `text` into sentences in document order.
///
/// Sentences end at `.`, `!` or `?` (plus any closing quotes) followed by
/// whitespace and an uppercase letter or opening quote, and at blank-line
/// paragraph breaks. Periods of [`ABBREVIATIONS`] never end a sentence and
/// nothing splits inside a double-quoted span shorter than
/// [`MAX_PROTECTED_QUOTE_CHARS`] characters.
pub fn segment_sentences(text: &str) -> Result<Vec<Sentence>, TextError> {
    if text.trim().is_empty() {
        return Err(TextError::EmptyInput);
    }
    let mut pieces: Vec<String> = Vec::new();
    let mut start = 0;
    let mut cuts = boundary_offsets(text);
    cuts.push(text.len());
    for cut in cuts {
        let piece = text[start..cut].trim();
        start = cut;
        if piece.is_empty() {
            continue;
        }
        if normalize_sentence(piece).is_empty() {
            // Punctuation-only fragment: glue onto its neighbour.
            match pieces.last_mut() {
                Some(prev) => {
                    prev.push(' ');
                    prev.push_str(piece);
                }
                None => pieces.push(piece.to_string()),
            }
            continue;
        }
        if let Some(prev) = pieces.last_mut() {
            if normalize_sentence(prev).is_empty() {
                prev.push(' ');
                prev.push_str(piece);
                continue;
            }
        }
        pieces.push(piece.to_string());
    }
    let sentences: Vec<Sentence> = pieces
        .into_iter()
        .enumerate()
        .map(|(index, text)| Sentence { normalized: normalize_sentence(&text), text, index })
        .collect();
    if sentences.iter().all(|s| s.normalized.is_empty()) {
        return Err(TextError::EmptyInput);
    }
    Ok(sentences)
}

/// Indices of the sentences in `sentences` matched by any of `lines`.
pub fn locate_lines<S: AsRef<str>>(sentences: &[Sentence], lines: &[S]) -> Vec<usize> {
    sentences
        .iter()
        .filter(|s| lines.iter().any(|l| match_sentence(&s.text, std::slice::from_ref(l))))
        .map(|s| s.index)
        .collect()
}
