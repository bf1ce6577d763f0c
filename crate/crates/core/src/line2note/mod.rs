//! Line2Note: learning snippet embeddings from reader notes.
//!
//! A note attaches to a word span of a book. The span padded with context
//! is a *line*. Lines and notes are pooled with a span-masked attention,
//! and a pair head scores whether a note belongs to a line. Two note-line
//! pairs whose spans overlap by more than 0.8 are positives for each other.

mod model;

pub use model::{
    acc_hit1_from_scores, AttentionPooler, EpochLog, EvalScores, L2nConfig, Line2NoteModel, PairScorer, PoolerMode,
    TrainOutcome, EPS,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendError;

pub const DEFAULT_BATCH_SIZE: usize = 20;
pub const DEFAULT_EVAL_BATCH_SIZE: usize = 12;
pub const DEFAULT_MIN_LINE_LEN: usize = 64;
pub const DEFAULT_MAX_LINE_TOKENS: usize = 256;
pub const POSITIVE_OVERLAP: f64 = 0.8;
pub const LR_GRID: [f64; 5] = [3e-5, 2e-5, 1e-5, 5e-6, 1e-6];

#[derive(Debug, Error)]
pub enum L2nError {
    #[error("span ({s}, {e}) out of range for text of {len} words")]
    SpanOutOfRange { s: usize, e: usize, len: usize },
    #[error("unknown book {0:?}")]
    UnknownBook(String),
    #[error("pool of {have} pairs is smaller than batch size {need}")]
    PoolTooSmall { have: usize, need: usize },
    #[error("note has no tokens")]
    EmptyNote,
    #[error("span has no tokens inside the encoded line")]
    EmptySpan,
    #[error("vector lengths differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One raw note: text plus the inclusive word span it attaches to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub book_id: String,
    pub note: String,
    pub s: usize,
    pub e: usize,
}

pub fn load_notes(path: &Path) -> Result<Vec<NoteRecord>, L2nError> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| L2nError::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteLinePair {
    pub book_id: String,
    pub note_text: String,
    /// Note length in words.
    pub note_len: usize,
    pub span: (usize, usize),
    pub line_span: (usize, usize),
    pub line_text: String,
    /// Byte range of the span inside `line_text`.
    pub span_bytes: (usize, usize),
}

/// Pads a note's span with surrounding words up to `min_line_len`, half on
/// each side with the odd word on the left; at a text boundary the rest
/// goes to the other side.
pub fn build_line(note: &NoteRecord, words: &[String], min_line_len: usize) -> Result<NoteLinePair, L2nError> {
    let (s, e) = (note.s, note.e);
    if s > e || e >= words.len() {
        return Err(L2nError::SpanOutOfRange { s, e, len: words.len() });
    }
    let len = e - s + 1;
    let want = min_line_len.min(words.len());
    let (mut ls, mut le) = (s, e);
    if len < want {
        let need = want - len;
        let mut left = need.div_ceil(2).min(s);
        let right = (need - left).min(words.len() - 1 - e);
        left = (need - right).min(s);
        ls = s - left;
        le = e + right;
    }
    let mut line_text = String::new();
    let mut span_bytes = (0, 0);
    for (i, w) in words[ls..=le].iter().enumerate() {
        if i > 0 {
            line_text.push(' ');
        }
        if ls + i == s {
            span_bytes.0 = line_text.len();
        }
        line_text.push_str(w);
        if ls + i == e {
            span_bytes.1 = line_text.len();
        }
    }
    Ok(NoteLinePair {
        book_id: note.book_id.clone(),
        note_text: note.note.clone(),
        note_len: note.note.split_whitespace().count(),
        span: (s, e),
        line_span: (ls, le),
        line_text,
        span_bytes,
    })
}

/// Builds lines for every note whose book is known.
pub fn mine_pairs(
    notes: &[NoteRecord],
    books: &BTreeMap<String, Vec<String>>,
    min_line_len: usize,
) -> Result<Vec<NoteLinePair>, L2nError> {
    notes
        .iter()
        .map(|n| {
            let words = books.get(&n.book_id).ok_or_else(|| L2nError::UnknownBook(n.book_id.clone()))?;
            build_line(n, words, min_line_len)
        })
        .collect()
}

/// Intersection length over the shorter span's length, inclusive indices.
pub fn overlap_rate(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if hi < lo {
        return 0.0;
    }
    let shorter = (a.1 - a.0 + 1).min(b.1 - b.0 + 1);
    (hi - lo + 1) as f64 / shorter as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoteBatch {
    pub pairs: Vec<NoteLinePair>,
    /// `positives[i][j]`: note j is a positive for line i.
    pub positives: Vec<Vec<bool>>,
    pub overlap: Vec<Vec<f64>>,
}

impl NoteBatch {
    pub fn new(pairs: Vec<NoteLinePair>) -> Self {
        let overlap: Vec<Vec<f64>> =
            pairs.iter().map(|a| pairs.iter().map(|b| overlap_rate(a.span, b.span)).collect()).collect();
        let positives = overlap.iter().map(|row| row.iter().map(|&o| o > POSITIVE_OVERLAP).collect()).collect();
        Self { pairs, positives, overlap }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Samples `size` pairs of one book's pool without replacement.
pub fn build_batch(pool: &[NoteLinePair], size: usize, seed: u64) -> Result<NoteBatch, L2nError> {
    if pool.len() < size {
        return Err(L2nError::PoolTooSmall { have: pool.len(), need: size });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(NoteBatch::new(pool.choose_multiple(&mut rng, size).cloned().collect()))
}

pub fn group_by_book(pairs: &[NoteLinePair]) -> BTreeMap<String, Vec<NoteLinePair>> {
    let mut out: BTreeMap<String, Vec<NoteLinePair>> = BTreeMap::new();
    for p in pairs {
        out.entry(p.book_id.clone()).or_default().push(p.clone());
    }
    out
}

/// One epoch of same-book batches: each book's pairs are shuffled and cut
/// into full batches (remainders dropped), then batch order is shuffled.
pub fn epoch_batches(pools: &BTreeMap<String, Vec<NoteLinePair>>, size: usize, rng: &mut ChaCha8Rng) -> Vec<NoteBatch> {
    let mut batches = Vec::new();
    for pool in pools.values() {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(rng);
        for chunk in idx.chunks_exact(size) {
            batches.push(NoteBatch::new(chunk.iter().map(|&i| pool[i].clone()).collect()));
        }
    }
    batches.shuffle(rng);
    batches
}

/// Splits pairs by book into train and held-out parts, holding out every
/// `every`-th book in sorted order.
pub fn split_books(pairs: &[NoteLinePair], every: usize) -> (Vec<NoteLinePair>, Vec<NoteLinePair>) {
    let books: Vec<String> = group_by_book(pairs).into_keys().collect();
    let held: std::collections::BTreeSet<&String> = books.iter().skip(every - 1).step_by(every).collect();
    pairs.iter().cloned().partition(|p| !held.contains(&p.book_id))
}
