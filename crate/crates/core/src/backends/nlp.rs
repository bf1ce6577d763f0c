//! Tokenization, sentence segmentation and name recognition backends.

use std::collections::BTreeSet;

use super::BackendError;

/// Byte range of one token inside the text it was produced from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

/// Reference tokenizer used for length statistics, truncation and encoders.
pub trait Tokenizer: Send + Sync {
    fn tokenizer_id(&self) -> &str;

    fn tokenize(&self, text: &str) -> Vec<TokenSpan>;

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }

    /// Prefix of `text` holding at most `max_tokens` tokens.
    fn truncate<'a>(&self, text: &'a str, max_tokens: usize) -> &'a str {
        let tokens = self.tokenize(text);
        if tokens.len() <= max_tokens {
            return text;
        }
        if max_tokens == 0 {
            return "";
        }
        &text[..tokens[max_tokens - 1].end]
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF | 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0xAC00..=0xD7AF)
}

/// Word runs, single CJK characters and single punctuation marks.
#[derive(Debug, Clone, Default)]
pub struct SimpleTokenizer;

impl SimpleTokenizer {
    pub const ID: &'static str = "simple-v1";
}

impl Tokenizer for SimpleTokenizer {
    fn tokenizer_id(&self) -> &str {
        Self::ID
    }

    fn tokenize(&self, text: &str) -> Vec<TokenSpan> {
        let mut out = Vec::new();
        let mut word_start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            let word_char = (c.is_alphanumeric() && !is_cjk(c)) || c == '_' || c == '\'' || c == '’';
            if word_char {
                if word_start.is_none() {
                    word_start = Some(i);
                }
                continue;
            }
            if let Some(s) = word_start.take() {
                out.push(TokenSpan { start: s, end: i });
            }
            if !c.is_whitespace() {
                out.push(TokenSpan { start: i, end: i + c.len_utf8() });
            }
        }
        if let Some(s) = word_start {
            out.push(TokenSpan { start: s, end: text.len() });
        }
        out
    }
}

/// Splits raw text into sentences.
pub trait Segmenter: Send + Sync {
    fn version(&self) -> &str;
    fn segment(&self, text: &str) -> Result<Vec<String>, BackendError>;
}

/// Punctuation-driven sentence splitter for English and Chinese prose.
#[derive(Debug, Clone, Default)]
pub struct RuleSegmenter;

impl RuleSegmenter {
    pub const VERSION: &'static str = "rule-segmenter-v1";
}

const CLOSERS: &[char] = &['"', '\'', '”', '’', '」', '』', ')', '）'];

impl Segmenter for RuleSegmenter {
    fn version(&self) -> &str {
        Self::VERSION
    }

    fn segment(&self, text: &str) -> Result<Vec<String>, BackendError> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut sentences = Vec::new();
        let mut start = 0usize;
        let mut i = 0usize;
        while i < chars.len() {
            let (_, c) = chars[i];
            let paragraph_break = c == '\n' && chars.get(i + 1).map(|&(_, n)| n == '\n').unwrap_or(false);
            let terminal = matches!(c, '.' | '!' | '?' | '。' | '！' | '？' | '…');
            if terminal || paragraph_break {
                let mut j = i + 1;
                while j < chars.len() && (CLOSERS.contains(&chars[j].1) || matches!(chars[j].1, '.' | '!' | '?' | '…')) {
                    j += 1;
                }
                let wide = matches!(c, '。' | '！' | '？');
                let at_boundary = j >= chars.len() || chars[j].1.is_whitespace() || wide || paragraph_break;
                if at_boundary {
                    let end = chars.get(j).map(|&(b, _)| b).unwrap_or(text.len());
                    push_trimmed(&mut sentences, &text[start..end]);
                    start = end;
                    i = j;
                    continue;
                }
            }
            i += 1;
        }
        push_trimmed(&mut sentences, &text[start..]);
        Ok(sentences)
    }
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let t = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if !t.is_empty() {
        out.push(t);
    }
}

/// Recognizes character names in text.
pub trait NerBackend: Send + Sync {
    fn version(&self) -> &str;
    /// Distinct surface names found in `text`, in order of first appearance.
    fn recognize(&self, text: &str) -> Vec<String>;
}

/// Dictionary matcher over a fixed list of surface forms.
#[derive(Debug, Clone)]
pub struct GazetteerNer {
    surfaces: Vec<String>,
}

impl GazetteerNer {
    pub fn new<I, S>(surfaces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut surfaces: Vec<String> = surfaces
            .into_iter()
            .map(Into::into)
            .filter(|s: &String| !s.is_empty())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        // longest first so "Edmond Dantès" wins over "Edmond"
        surfaces.sort_by(|a, b| b.chars().count().cmp(&a.chars().count()).then(a.cmp(b)));
        Self { surfaces }
    }
}

fn is_word_char(c: Option<char>) -> bool {
    c.map(|c| c.is_alphanumeric() && !is_cjk(c)).unwrap_or(false)
}

/// Finds whole-word occurrences of `needle` in `hay`.
pub(crate) fn find_word(hay: &str, needle: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(pos) = hay[from..].find(needle) {
        let at = from + pos;
        let before = hay[..at].chars().next_back();
        let after = hay[at + needle.len()..].chars().next();
        let first = needle.chars().next();
        let last = needle.chars().next_back();
        let left_ok = !(is_word_char(first) && is_word_char(before));
        let right_ok = !(is_word_char(last) && is_word_char(after));
        if left_ok && right_ok {
            return Some(at);
        }
        from = at + needle.chars().next().map(char::len_utf8).unwrap_or(1);
    }
    None
}

impl NerBackend for GazetteerNer {
    fn version(&self) -> &str {
        "gazetteer-v1"
    }

    fn recognize(&self, text: &str) -> Vec<String> {
        let mut claimed: Vec<(usize, usize)> = Vec::new();
        let mut found: Vec<(usize, String)> = Vec::new();
        for s in &self.surfaces {
            let mut from = 0;
            while let Some(rel) = find_word(&text[from..], s) {
                let at = from + rel;
                let end = at + s.len();
                if !claimed.iter().any(|&(a, b)| at < b && a < end) {
                    claimed.push((at, end));
                    if !found.iter().any(|(_, n)| n == s) {
                        found.push((at, s.clone()));
                    }
                }
                from = end;
            }
        }
        found.sort_by_key(|(at, _)| *at);
        found.into_iter().map(|(_, n)| n).collect()
    }
}

/// Heuristic recognizer: runs of capitalized words that do not open a sentence.
#[derive(Debug, Clone, Default)]
pub struct CapitalizedNer;

const NON_NAMES: &[&str] = &[
    "I", "The", "A", "An", "He", "She", "It", "They", "We", "You", "His", "Her", "Their", "This", "That",
    "But", "And", "Then", "When", "Mr", "Mrs", "Sir", "Madame", "Monsieur",
];

impl NerBackend for CapitalizedNer {
    fn version(&self) -> &str {
        "capitalized-v1"
    }

    fn recognize(&self, text: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut run: Vec<&str> = Vec::new();
        let mut sentence_start = true;
        let flush = |run: &mut Vec<&str>, out: &mut Vec<String>| {
            if !run.is_empty() {
                let name = run.join(" ");
                if !out.contains(&name) {
                    out.push(name);
                }
                run.clear();
            }
        };
        for raw in text.split_whitespace() {
            let word = raw.trim_matches(|c: char| !c.is_alphanumeric());
            let ends_sentence = raw.ends_with(['.', '!', '?']);
            let capitalized = word.chars().next().map(char::is_uppercase).unwrap_or(false);
            if capitalized && !sentence_start && !NON_NAMES.contains(&word) {
                run.push(word);
            } else {
                flush(&mut run, &mut out);
            }
            if raw != word && !raw.ends_with(word) {
                flush(&mut run, &mut out);
            }
            sentence_start = ends_sentence;
        }
        flush(&mut run, &mut out);
        out
    }
}
