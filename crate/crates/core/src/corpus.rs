//! Canonical sentence-indexed corpora for books and episode synopses.
//!
//! Corpus files are JSONL with one `{id, text, chars}` object per sentence
//! plus a sidecar manifest. Synopsis dumps are JSONL with `kind: "episode"`
//! and `kind: "event"` records.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, NerBackend, Segmenter, Tokenizer};

/// Mention-sentence count a name must exceed to become a main character.
pub const DEFAULT_MAIN_CHARACTER_MIN_COUNT: usize = 100;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("raw text is empty")]
    EmptyText,
    #[error("segmenter failed after sentence {sentence_offset}: {source}")]
    SegmenterFailure { sentence_offset: usize, source: BackendError },
    #[error("surface form {surface:?} belongs to both {first:?} and {second:?}")]
    AliasConflict { surface: String, first: String, second: String },
    #[error("line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error("event {event:?} refers to unknown episode {anchor:?}")]
    UnknownEpisodeAnchor { event: String, anchor: String },
    #[error("sentence ids are not contiguous at line {line}: expected {expected}, found {found}")]
    NonContiguousIds { line: usize, expected: usize, found: usize },
    #[error("sentence-id bijection violated: {0}")]
    NotABijection(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Zh,
    En,
}

/// Canonical character name → surface forms. Canonical names count as their
/// own surface form.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AliasTable {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl AliasTable {
    pub fn new(entries: BTreeMap<String, BTreeSet<String>>) -> Result<Self, CorpusError> {
        let table = Self { entries };
        table.validate()?;
        Ok(table)
    }

    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = (&'a str, &'a [&'a str])>,
    {
        let entries = pairs
            .into_iter()
            .map(|(c, s)| (c.to_string(), s.iter().map(|x| x.to_string()).collect()))
            .collect();
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let entries: BTreeMap<String, BTreeSet<String>> = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::new(entries)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for (canon, surfaces) in &self.entries {
            for s in std::iter::once(canon).chain(surfaces) {
                if let Some(prev) = owner.insert(s.as_str(), canon.as_str()) {
                    if prev != canon {
                        return Err(CorpusError::AliasConflict {
                            surface: s.clone(),
                            first: prev.to_string(),
                            second: canon.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn canonical_names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Canonical name for an exact surface form.
    pub fn canonical_of(&self, surface: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(c, s)| c.as_str() == surface || s.contains(surface))
            .map(|(c, _)| c.as_str())
    }

    /// Maps a recognized name to its canonical form, or keeps it unchanged.
    pub fn canonicalize(&self, name: &str) -> String {
        self.canonical_of(name).unwrap_or(name).to_string()
    }

    /// Every surface form including canonical names.
    pub fn all_surfaces(&self) -> Vec<String> {
        self.entries
            .iter()
            .flat_map(|(c, s)| std::iter::once(c.clone()).chain(s.iter().cloned()))
            .collect()
    }

    pub fn surfaces_of(&self, canonical: &str) -> Vec<String> {
        match self.entries.get(canonical) {
            Some(s) => std::iter::once(canonical.to_string()).chain(s.iter().cloned()).collect(),
            None => vec![canonical.to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub sentence_id: usize,
    pub text: String,
    pub char_mentions: BTreeSet<String>,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub book_id: String,
    pub language: Language,
    pub segmenter_version: String,
    pub ner_version: String,
    pub tokenizer_id: String,
    pub main_character_min_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub book_id: String,
    pub language: Language,
    pub sentences: Vec<SentenceRecord>,
    pub main_characters: BTreeSet<String>,
    pub alias_table: AliasTable,
    pub manifest: CorpusManifest,
}

#[derive(Serialize, Deserialize)]
struct SentenceRow {
    id: usize,
    text: String,
    chars: Vec<String>,
}

/// Knobs for [`ingest_book`].
pub struct IngestOptions<'a> {
    pub tokenizer: &'a dyn Tokenizer,
    pub main_character_min_count: usize,
}

/// Segments, annotates and indexes a raw book.
pub fn ingest_book(
    raw_text: &str,
    book_id: &str,
    language: Language,
    segmenter: &dyn Segmenter,
    ner: &dyn NerBackend,
    alias_table: Option<&AliasTable>,
    opts: &IngestOptions<'_>,
) -> Result<Corpus, CorpusError> {
    if raw_text.trim().is_empty() {
        return Err(CorpusError::EmptyText);
    }
    let mut texts = Vec::new();
    for block in raw_text.split("\n\n") {
        if block.trim().is_empty() {
            continue;
        }
        let part = segmenter
            .segment(block)
            .map_err(|source| CorpusError::SegmenterFailure { sentence_offset: texts.len(), source })?;
        texts.extend(part);
    }
    let alias = alias_table.cloned().unwrap_or_default();
    let sentences = texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| {
            let names = ner.recognize(&text);
            let char_mentions = if alias_table.is_some() {
                names.iter().filter_map(|n| alias.canonical_of(n)).map(str::to_string).collect()
            } else {
                names.into_iter().collect()
            };
            SentenceRecord { sentence_id: i, token_count: opts.tokenizer.count(&text), text, char_mentions }
        })
        .collect::<Vec<_>>();
    let manifest = CorpusManifest {
        book_id: book_id.to_string(),
        language,
        segmenter_version: segmenter.version().to_string(),
        ner_version: ner.version().to_string(),
        tokenizer_id: opts.tokenizer.tokenizer_id().to_string(),
        main_character_min_count: opts.main_character_min_count,
    };
    let main_characters = main_characters(&sentences, opts.main_character_min_count);
    Ok(Corpus { book_id: book_id.to_string(), language, sentences, main_characters, alias_table: alias, manifest })
}

/// Names mentioned in more than `min_count` distinct sentences.
pub fn main_characters(sentences: &[SentenceRecord], min_count: usize) -> BTreeSet<String> {
    mention_counts(sentences).into_iter().filter(|&(_, n)| n > min_count).map(|(name, _)| name).collect()
}

pub fn mention_counts(sentences: &[SentenceRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in sentences {
        for name in &s.char_mentions {
            *counts.entry(name.clone()).or_insert(0) += 1;
        }
    }
    counts
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn text_of(&self, start: usize, end: usize) -> String {
        self.sentences[start..=end].iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn with_min_count(mut self, min_count: usize) -> Self {
        self.main_characters = main_characters(&self.sentences, min_count);
        self.manifest.main_character_min_count = min_count;
        self
    }

    /// Writes `{stem}.jsonl` and `{stem}.manifest.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join(format!("{stem}.jsonl")))?);
        for s in &self.sentences {
            let row = SentenceRow { id: s.sentence_id, text: s.text.clone(), chars: s.char_mentions.iter().cloned().collect() };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        fs::write(dir.join(format!("{stem}.manifest.json")), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path, stem: &str, tokenizer: &dyn Tokenizer, alias_table: AliasTable) -> Result<Self, CorpusError> {
        let manifest: CorpusManifest =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.manifest.json")))?)?;
        if manifest.tokenizer_id != tokenizer.tokenizer_id() {
            log::warn!(
                "corpus {} was built with tokenizer {}, reading with {}",
                manifest.book_id,
                manifest.tokenizer_id,
                tokenizer.tokenizer_id()
            );
        }
        let file = fs::File::open(dir.join(format!("{stem}.jsonl")))?;
        let mut sentences = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: SentenceRow = serde_json::from_str(&line)
                .map_err(|e| CorpusError::SchemaViolation { line: n + 1, message: e.to_string() })?;
            if row.id != sentences.len() {
                return Err(CorpusError::NonContiguousIds { line: n + 1, expected: sentences.len(), found: row.id });
            }
            sentences.push(SentenceRecord {
                sentence_id: row.id,
                token_count: tokenizer.count(&row.text),
                text: row.text,
                char_mentions: row.chars.into_iter().collect(),
            });
        }
        let main_characters = main_characters(&sentences, manifest.main_character_min_count);
        Ok(Self {
            book_id: manifest.book_id.clone(),
            language: manifest.language,
            sentences,
            main_characters,
            alias_table,
            manifest,
        })
    }
}

/// Sentence-id bijection between two pre-aligned translations of one book.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SentenceBijection {
    forward: BTreeMap<usize, usize>,
    backward: BTreeMap<usize, usize>,
}

impl SentenceBijection {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, CorpusError> {
        let mut b = Self::default();
        for (l, r) in pairs {
            if b.forward.insert(l, r).is_some() || b.backward.insert(r, l).is_some() {
                return Err(CorpusError::NotABijection(format!("pair ({l}, {r}) repeats an endpoint")));
            }
        }
        Ok(b)
    }

    /// Reads JSONL lines of `{"left": id, "right": id}`.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        #[derive(Deserialize)]
        struct Pair {
            left: usize,
            right: usize,
        }
        let mut pairs = Vec::new();
        for (n, line) in fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let p: Pair = serde_json::from_str(line)
                .map_err(|e| CorpusError::SchemaViolation { line: n + 1, message: e.to_string() })?;
            pairs.push((p.left, p.right));
        }
        Self::from_pairs(pairs)
    }

    pub fn to_right(&self, left: usize) -> Option<usize> {
        self.forward.get(&left).copied()
    }

    pub fn to_left(&self, right: usize) -> Option<usize> {
        self.backward.get(&right).copied()
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Synopses

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub paragraphs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchoredParagraph {
    pub text: String,
    pub episode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPage {
    pub event_name: String,
    pub prelude_paragraphs: Vec<AnchoredParagraph>,
    pub body_paragraphs: Vec<AnchoredParagraph>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynopsisCorpus {
    pub production_id: String,
    pub episodes: Vec<Episode>,
    pub events: Vec<EventPage>,
    episode_offsets: Vec<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum DumpRecord {
    Episode {
        episode_id: String,
        #[serde(default)]
        air_order: Option<i64>,
        paragraphs: Vec<String>,
    },
    Event {
        event_name: String,
        #[serde(default)]
        prelude: Vec<AnchoredParagraph>,
        body: Vec<AnchoredParagraph>,
    },
}

impl SynopsisCorpus {
    pub fn new(production_id: &str, episodes: Vec<Episode>, events: Vec<EventPage>) -> Result<Self, CorpusError> {
        let ids: BTreeSet<&str> = episodes.iter().map(|e| e.episode_id.as_str()).collect();
        for ev in &events {
            for p in ev.prelude_paragraphs.iter().chain(&ev.body_paragraphs) {
                if !ids.contains(p.episode.as_str()) {
                    return Err(CorpusError::UnknownEpisodeAnchor {
                        event: ev.event_name.clone(),
                        anchor: p.episode.clone(),
                    });
                }
            }
        }
        let mut episode_offsets = Vec::with_capacity(episodes.len());
        let mut acc = 0;
        for e in &episodes {
            episode_offsets.push(acc);
            acc += e.paragraphs.len();
        }
        Ok(Self { production_id: production_id.to_string(), episodes, events, episode_offsets })
    }

    /// Total paragraph count across all episodes.
    pub fn len(&self) -> usize {
        self.episodes.iter().map(|e| e.paragraphs.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Paragraph text by global index.
    pub fn paragraph(&self, global: usize) -> Option<&str> {
        let ep = self.episode_offsets.partition_point(|&o| o <= global).checked_sub(1)?;
        self.episodes[ep].paragraphs.get(global - self.episode_offsets[ep]).map(String::as_str)
    }

    /// Global index range of an episode's paragraphs.
    pub fn episode_range(&self, episode_id: &str) -> Option<std::ops::Range<usize>> {
        let i = self.episodes.iter().position(|e| e.episode_id == episode_id)?;
        let start = self.episode_offsets[i];
        Some(start..start + self.episodes[i].paragraphs.len())
    }

    pub fn global_paragraphs(&self) -> impl Iterator<Item = &str> {
        self.episodes.iter().flat_map(|e| e.paragraphs.iter().map(String::as_str))
    }
}

/// Parses a synopsis dump. Episodes sort by `air_order` when present,
/// otherwise they keep file order.
pub fn ingest_synopses(dump: &str, production_id: &str) -> Result<SynopsisCorpus, CorpusError> {
    let mut episodes: Vec<(i64, usize, Episode)> = Vec::new();
    let mut events = Vec::new();
    for (n, line) in dump.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DumpRecord = serde_json::from_str(line)
            .map_err(|e| CorpusError::SchemaViolation { line: n + 1, message: e.to_string() })?;
        match rec {
            DumpRecord::Episode { episode_id, air_order, paragraphs } => {
                let pos = episodes.len();
                episodes.push((air_order.unwrap_or(pos as i64), pos, Episode { episode_id, paragraphs }));
            }
            DumpRecord::Event { event_name, prelude, body } => {
                events.push(EventPage { event_name, prelude_paragraphs: prelude, body_paragraphs: body });
            }
        }
    }
    episodes.sort_by_key(|(order, pos, _)| (*order, *pos));
    SynopsisCorpus::new(production_id, episodes.into_iter().map(|(_, _, e)| e).collect(), events)
}

pub fn load_synopses(path: &Path, production_id: &str) -> Result<SynopsisCorpus, CorpusError> {
    ingest_synopses(&fs::read_to_string(path)?, production_id)
}
