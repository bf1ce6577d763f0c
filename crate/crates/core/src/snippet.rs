//! Target snippets and their 60 back-to-front candidate windows.
//!
//! For a central sentence `i` and a sampled gap sentence `j` (10 to 20
//! sentences before `i`), candidate `k` covers sentences
//! `[j - (k+1)*w_c + 1, j - k*w_c]`, so candidate 0 ends at `j` and
//! candidate 59 starts at `j - 60*w_c + 1`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Corpus, SynopsisCorpus};
use crate::labeling::EventAlignment;

pub const NUM_CANDIDATES: usize = 60;
/// Closest allowed gap sentence, in sentences before the central sentence.
pub const GAP_MIN: usize = 10;
/// Farthest allowed gap sentence.
pub const GAP_MAX: usize = 20;
pub const DEFAULT_TARGET_LEN: usize = 7;
/// Target length for the long-sentence configuration.
pub const LONG_TARGET_LEN: usize = 10;
pub const DEFAULT_CANDIDATE_LEN: usize = 6;
pub const LONG_CANDIDATE_LEN: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SnippetError {
    #[error("corpus has no main characters")]
    NoMainCharacters,
    #[error("central sentence {central_id} needs {needed} sentences of history")]
    InsufficientHistory { central_id: usize, needed: usize },
    #[error("span {start}..={end} falls outside a corpus of {len} sentences")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("invalid window: {0}")]
    InvalidWindow(String),
}

/// Inclusive sentence-id range; serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
}

impl From<(usize, usize)> for SentenceSpan {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

impl From<SentenceSpan> for (usize, usize) {
    fn from(s: SentenceSpan) -> Self {
        (s.start, s.end)
    }
}

impl SentenceSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &SentenceSpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnippetKind {
    Target,
    Candidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub book_id: String,
    pub span: SentenceSpan,
    pub text: String,
    pub kind: SnippetKind,
    pub central_id: Option<usize>,
    pub cand_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetInstance {
    pub uid: String,
    pub target: Snippet,
    pub candidates: Vec<Snippet>,
    pub gap_j: usize,
    pub labels: Option<Vec<u8>>,
    pub event_name: Option<String>,
    pub chapter_context: Option<String>,
}

impl TargetInstance {
    /// Gold candidate indices, when labeled.
    pub fn gold(&self) -> Option<BTreeSet<usize>> {
        self.labels.as_ref().map(|l| l.iter().enumerate().filter(|(_, &y)| y == 1).map(|(k, _)| k).collect())
    }

    pub fn candidate_texts(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.text.as_str()).collect()
    }

    /// Target text with an `Event: {name}` line prepended when an event is set
    /// and `with_event` is true.
    pub fn target_text(&self, with_event: bool) -> String {
        match (&self.event_name, with_event) {
            (Some(name), true) => format!("Event: {name}\n{}", self.target.text),
            _ => self.target.text.clone(),
        }
    }
}

/// Sentences before and after the central sentence. Even lengths put the
/// extra sentence before.
pub fn target_extent(w: usize) -> (usize, usize) {
    (w / 2, (w - 1) / 2)
}

/// Candidate `k`'s span for gap sentence `gap_j`.
pub fn candidate_span(gap_j: usize, k: usize, w_c: usize) -> SentenceSpan {
    SentenceSpan::new(gap_j + 1 - (k + 1) * w_c, gap_j - k * w_c)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CentralSelection {
    pub ids: Vec<usize>,
    /// Fewer non-overlapping central sentences exist than the budget asks for.
    pub budget_exceeded: bool,
    /// Non-overlapping candidates before stratified sampling.
    pub supply: usize,
}

/// Greedy earliest-end scan over fixed-width windows: keeps a sentence when
/// its window starts after the last kept window ends.
pub fn non_overlapping_centrals(eligible: &[usize], w: usize) -> Vec<usize> {
    let (before, after) = target_extent(w);
    let mut sorted = eligible.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut kept = Vec::new();
    let mut last_end: Option<usize> = None;
    for id in sorted {
        let start = id.saturating_sub(before);
        if last_end.map_or(true, |e| start > e) {
            kept.push(id);
            last_end = Some(id + after);
        }
    }
    kept
}

/// Picks central sentences mentioning a main character whose targets do not
/// overlap, then draws one per equal-width stratum of the book.
pub fn select_central_sentences(
    corpus: &Corpus,
    w: usize,
    sample_budget: usize,
    seed: u64,
) -> Result<CentralSelection, SnippetError> {
    if w == 0 {
        return Err(SnippetError::InvalidWindow("w must be at least 1".into()));
    }
    if corpus.main_characters.is_empty() {
        return Err(SnippetError::NoMainCharacters);
    }
    let eligible: Vec<usize> = corpus
        .sentences
        .iter()
        .filter(|s| s.char_mentions.iter().any(|c| corpus.main_characters.contains(c)))
        .map(|s| s.sentence_id)
        .collect();
    let retained = non_overlapping_centrals(&eligible, w);
    let supply = retained.len();
    if supply < sample_budget {
        return Ok(CentralSelection { ids: retained, budget_exceeded: true, supply });
    }
    Ok(CentralSelection { ids: stratified_sample(&retained, corpus.len(), sample_budget, seed), budget_exceeded: false, supply })
}

/// One uniform draw per non-empty stratum `[s*n/b, (s+1)*n/b)`.
pub fn stratified_sample(sorted_ids: &[usize], n: usize, budget: usize, seed: u64) -> Vec<usize> {
    if budget == 0 || n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(budget);
    for s in 0..budget {
        let lo = s * n / budget;
        let hi = (s + 1) * n / budget;
        let a = sorted_ids.partition_point(|&x| x < lo);
        let b = sorted_ids.partition_point(|&x| x < hi);
        if a < b {
            out.push(sorted_ids[rng.gen_range(a..b)]);
        }
    }
    out
}

/// Seed for one instance's gap draw, derived from the book, central sentence
/// and run seed.
pub fn instance_seed(book_id: &str, central_id: usize, seed: u64) -> u64 {
    let digest = Sha256::digest(format!("{book_id}\u{1f}{central_id}\u{1f}{seed}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// History required before `central_id` for the farthest gap.
pub fn required_history(w_c: usize) -> usize {
    GAP_MAX + NUM_CANDIDATES * w_c - 1
}

pub fn build_target_instance(
    corpus: &Corpus,
    central_id: usize,
    w: usize,
    w_c: usize,
    seed: u64,
) -> Result<TargetInstance, SnippetError> {
    check_window(corpus, central_id, w, w_c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(&corpus.book_id, central_id, seed));
    let gap_j = rng.gen_range(central_id - GAP_MAX..=central_id - GAP_MIN);
    build_target_instance_at(corpus, central_id, w, w_c, gap_j)
}

fn check_window(corpus: &Corpus, central_id: usize, w: usize, w_c: usize) -> Result<(), SnippetError> {
    if w == 0 || w_c == 0 {
        return Err(SnippetError::InvalidWindow("w and w_c must be at least 1".into()));
    }
    let (before, after) = target_extent(w);
    if before >= GAP_MIN {
        return Err(SnippetError::InvalidWindow(format!("target length {w} reaches into the candidate gap")));
    }
    let needed = required_history(w_c);
    if central_id < needed {
        return Err(SnippetError::InsufficientHistory { central_id, needed });
    }
    if central_id + after >= corpus.len() {
        return Err(SnippetError::SpanOutOfRange { start: central_id - before, end: central_id + after, len: corpus.len() });
    }
    Ok(())
}

/// Builds an instance with a fixed gap sentence.
pub fn build_target_instance_at(
    corpus: &Corpus,
    central_id: usize,
    w: usize,
    w_c: usize,
    gap_j: usize,
) -> Result<TargetInstance, SnippetError> {
    check_window(corpus, central_id, w, w_c)?;
    if gap_j + GAP_MAX < central_id || gap_j + GAP_MIN > central_id {
        return Err(SnippetError::InvalidWindow(format!("gap sentence {gap_j} outside [{}, {}]", central_id - GAP_MAX, central_id - GAP_MIN)));
    }
    let (before, after) = target_extent(w);
    let span = SentenceSpan::new(central_id - before, central_id + after);
    let target = Snippet {
        book_id: corpus.book_id.clone(),
        span,
        text: corpus.text_of(span.start, span.end),
        kind: SnippetKind::Target,
        central_id: Some(central_id),
        cand_index: None,
    };
    let candidates = (0..NUM_CANDIDATES)
        .map(|k| {
            let span = candidate_span(gap_j, k, w_c);
            Snippet {
                book_id: corpus.book_id.clone(),
                span,
                text: corpus.text_of(span.start, span.end),
                kind: SnippetKind::Candidate,
                central_id: None,
                cand_index: Some(k),
            }
        })
        .collect();
    Ok(TargetInstance {
        uid: format!("{}:{central_id}", corpus.book_id),
        target,
        candidates,
        gap_j,
        labels: None,
        event_name: None,
        chapter_context: None,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildOutcome {
    pub instances: Vec<TargetInstance>,
    /// Central sentences skipped for lack of history or room at the end.
    pub skipped: Vec<usize>,
}

/// Builds instances for every central sentence, skipping those without
/// enough history.
pub fn build_book_instances(corpus: &Corpus, centrals: &[usize], w: usize, w_c: usize, seed: u64) -> BuildOutcome {
    let mut out = BuildOutcome::default();
    for &c in centrals {
        match build_target_instance(corpus, c, w, w_c, seed) {
            Ok(inst) => out.instances.push(inst),
            Err(e) => {
                log::debug!("skipping central sentence {c}: {e}");
                out.skipped.push(c);
            }
        }
    }
    out
}

/// One instance per (event, body-mapped paragraph); candidates are the 60
/// preceding global paragraphs, nearest first.
pub fn build_tv_instances(synopsis: &SynopsisCorpus, alignment: &EventAlignment) -> BuildOutcome {
    let mut out = BuildOutcome::default();
    for (event_idx, ev) in alignment.events.iter().enumerate() {
        for (g, _) in ev.body_targets() {
            if g < NUM_CANDIDATES {
                out.skipped.push(g);
                continue;
            }
            let para = |i: usize| synopsis.paragraph(i).unwrap_or_default().to_string();
            let target = Snippet {
                book_id: synopsis.production_id.clone(),
                span: SentenceSpan::new(g, g),
                text: para(g),
                kind: SnippetKind::Target,
                central_id: Some(g),
                cand_index: None,
            };
            let candidates = (0..NUM_CANDIDATES)
                .map(|k| {
                    let p = g - 1 - k;
                    Snippet {
                        book_id: synopsis.production_id.clone(),
                        span: SentenceSpan::new(p, p),
                        text: para(p),
                        kind: SnippetKind::Candidate,
                        central_id: None,
                        cand_index: Some(k),
                    }
                })
                .collect();
            out.instances.push(TargetInstance {
                uid: format!("{}:{g}@{event_idx}", synopsis.production_id),
                target,
                candidates,
                gap_j: g - 1,
                labels: None,
                event_name: Some(ev.event_name.clone()),
                chapter_context: None,
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// JSONL

#[derive(Serialize, Deserialize)]
struct TargetRow {
    span: SentenceSpan,
    central_id: Option<usize>,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct CandidateRow {
    k: usize,
    span: SentenceSpan,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct InstanceRow {
    uid: String,
    book_id: String,
    target: TargetRow,
    gap_j: usize,
    candidates: Vec<CandidateRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    event_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chapter_context: Option<String>,
}

#[derive(Debug, Error)]
pub enum InstanceIoError {
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TargetInstance {
    pub fn to_json_line(&self) -> serde_json::Result<String> {
        let row = InstanceRow {
            uid: self.uid.clone(),
            book_id: self.target.book_id.clone(),
            target: TargetRow { span: self.target.span, central_id: self.target.central_id, text: self.target.text.clone() },
            gap_j: self.gap_j,
            candidates: self
                .candidates
                .iter()
                .enumerate()
                .map(|(k, c)| CandidateRow { k, span: c.span, text: c.text.clone() })
                .collect(),
            labels: self.labels.clone(),
            event_name: self.event_name.clone(),
            chapter_context: self.chapter_context.clone(),
        };
        serde_json::to_string(&row)
    }

    pub fn from_json_line(line: &str) -> Result<Self, String> {
        let row: InstanceRow = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if row.candidates.len() != NUM_CANDIDATES {
            return Err(format!("expected {NUM_CANDIDATES} candidates, found {}", row.candidates.len()));
        }
        if let Some(l) = &row.labels {
            if l.len() != NUM_CANDIDATES || l.iter().any(|&y| y > 1) {
                return Err("labels must be 60 values in {0,1}".into());
            }
        }
        let mut candidates = Vec::with_capacity(NUM_CANDIDATES);
        for (i, c) in row.candidates.into_iter().enumerate() {
            if c.k != i {
                return Err(format!("candidate {i} carries k={}", c.k));
            }
            candidates.push(Snippet {
                book_id: row.book_id.clone(),
                span: c.span,
                text: c.text,
                kind: SnippetKind::Candidate,
                central_id: None,
                cand_index: Some(c.k),
            });
        }
        Ok(Self {
            uid: row.uid,
            target: Snippet {
                book_id: row.book_id,
                span: row.target.span,
                text: row.target.text,
                kind: SnippetKind::Target,
                central_id: row.target.central_id,
                cand_index: None,
            },
            candidates,
            gap_j: row.gap_j,
            labels: row.labels,
            event_name: row.event_name,
            chapter_context: row.chapter_context,
        })
    }
}

pub fn write_instances(path: &Path, instances: &[TargetInstance]) -> Result<(), InstanceIoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for inst in instances {
        w.write_all(inst.to_json_line()?.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_instances(path: &Path) -> Result<Vec<TargetInstance>, InstanceIoError> {
    let mut out = Vec::new();
    for (n, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(TargetInstance::from_json_line(line).map_err(|message| InstanceIoError::Invalid { line: n + 1, message })?);
    }
    Ok(out)
}
