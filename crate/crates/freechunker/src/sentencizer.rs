//! Rule-based sentence splitting and deterministic token counting.
//!
//! Sentences are the atomic units of the whole pipeline, so the splitter is
//! deliberately boring: terminal punctuation with a fixed abbreviation list,
//! no learned models, no locale tables.

use serde::{Deserialize, Serialize};

/// Default abbreviations (lowercase, no trailing period). A period ending one
/// of these never terminates a sentence.
pub const DEFAULT_ABBREVIATIONS: &[&str] = &[
    "dr", "mr", "mrs", "ms", "prof", "sr", "jr", "st", "vs", "etc", "e.g", "i.e", "cf", "al",
    "fig", "eq", "eqs", "no", "inc", "ltd", "co", "corp", "dept", "est", "approx", "jan", "feb",
    "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec", "u.s", "u.k", "d.c",
    "ph.d", "a.m", "p.m",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    /// 0-based ordinal within the document.
    pub index: usize,
    pub text: String,
    /// Byte offsets (start, end) into the source text.
    pub byte_span: (usize, usize),
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub sentences: Vec<Sentence>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let sentences = split_sentences(&text);
        Document {
            id: id.into(),
            text,
            sentences,
        }
    }

    pub fn sentence_count(&self) -> usize {
        self.sentences.len()
    }
}

pub fn split_sentences(text: &str) -> Vec<Sentence> {
    split_sentences_with(text, DEFAULT_ABBREVIATIONS)
}

/// Closing quotes/brackets that stay attached to the sentence they end.
fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | '\u{201d}' | '\u{2019}' | '\u{00bb}' | ')' | ']' | '}')
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

pub fn split_sentences_with(text: &str, abbreviations: &[&str]) -> Vec<Sentence> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut sentences: Vec<Sentence> = Vec::new();
    let mut start: Option<usize> = None;

    let mut i = 0usize;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if start.is_none() {
            if !c.is_whitespace() {
                start = Some(pos);
            }
            i += 1;
            continue;
        }
        if !is_terminal(c) {
            i += 1;
            continue;
        }
        if c == '.' && (is_decimal_point(&chars, i) || is_abbreviation(&chars, i, abbreviations)) {
            i += 1;
            continue;
        }
        // Swallow a run of terminals ("...", "?!") and trailing closers.
        let mut j = i + 1;
        while j < chars.len() && is_terminal(chars[j].1) {
            j += 1;
        }
        while j < chars.len() && is_closer(chars[j].1) {
            j += 1;
        }
        // Only split when followed by whitespace or end of text; this keeps
        // things like "example.com/path" intact.
        let at_end = j >= chars.len();
        if at_end || chars[j].1.is_whitespace() {
            let end = if at_end {
                text.len()
            } else {
                chars[j].0
            };
            push_sentence(&mut sentences, text, start.take().unwrap(), end);
            i = j;
        } else {
            i = j;
        }
    }
    if let Some(s) = start {
        // Trailing run without terminal punctuation: one sentence, trailing
        // whitespace excluded from the span.
        let end = text[s..]
            .char_indices()
            .rev()
            .find(|(_, c)| !c.is_whitespace())
            .map(|(off, c)| s + off + c.len_utf8())
            .unwrap_or(s);
        if end > s {
            push_sentence(&mut sentences, text, s, end);
        }
    }
    sentences
}

fn push_sentence(sentences: &mut Vec<Sentence>, text: &str, start: usize, end: usize) {
    let slice = &text[start..end];
    sentences.push(Sentence {
        index: sentences.len(),
        text: slice.to_string(),
        byte_span: (start, end),
        token_count: count_tokens(slice),
    });
}

/// Period between two ASCII digits ("3.14").
fn is_decimal_point(chars: &[(usize, char)], i: usize) -> bool {
    i > 0
        && i + 1 < chars.len()
        && chars[i - 1].1.is_ascii_digit()
        && chars[i + 1].1.is_ascii_digit()
}

/// The word immediately before this period, read back over alphanumerics and
/// interior periods ("e.g" for the final period of "e.g.").
fn is_abbreviation(chars: &[(usize, char)], i: usize, abbreviations: &[&str]) -> bool {
    let mut k = i;
    while k > 0 {
        let prev = chars[k - 1].1;
        if prev.is_alphanumeric() || prev == '.' {
            k -= 1;
        } else {
            break;
        }
    }
    if k == i {
        return false;
    }
    let word: String = chars[k..i]
        .iter()
        .map(|&(_, c)| c)
        .collect::<String>()
        .trim_matches('.')
        .to_lowercase();
    if word.is_empty() {
        return false;
    }
    // Single letters are treated as initials ("J. Smith").
    if word.chars().count() == 1 && word.chars().next().unwrap().is_alphabetic() {
        return true;
    }
    abbreviations.iter().any(|&a| a == word)
}

/// Maximal alphanumeric runs and standalone punctuation characters each count
/// as one token; whitespace separates and counts as nothing.
pub fn count_tokens(text: &str) -> usize {
    let mut count = 0usize;
    let mut in_word = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if !in_word {
                count += 1;
                in_word = true;
            }
        } else {
            in_word = false;
            if !c.is_whitespace() {
                count += 1;
            }
        }
    }
    count
}
