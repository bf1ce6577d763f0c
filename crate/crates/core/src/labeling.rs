//! Gold recap labels.
//!
//! Books: three YES/NO votes per (target, candidate) pair, majority wins.
//! TV productions: event-page paragraphs are aligned to episode paragraphs,
//! and earlier members of an event thread become recaps of later ones.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{cosine, BackendError, EmbeddingBackend};
use crate::corpus::SynopsisCorpus;
use crate::snippet::{TargetInstance, NUM_CANDIDATES};

pub const RATERS_PER_ITEM: usize = 3;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("incomplete annotation coverage for {} pairs, first: {:?}", missing.len(), missing.first())]
    IncompleteCoverage { missing: Vec<MissingPair> },
    #[error("no annotation records")]
    Empty,
    #[error("items carry different rater counts ({0} and {1})")]
    UnequalRaterCounts(usize, usize),
    #[error("kappa needs at least 2 raters per item, got {0}")]
    TooFewRaters(usize),
    #[error("episode {0:?} has no paragraphs")]
    EmptyEpisode(String),
    #[error("target {0:?} is not a body-mapped paragraph of its event")]
    TargetNotInAlignment(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingPair {
    pub target_uid: String,
    pub cand_index: usize,
    pub found: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    #[serde(alias = "definitely_is", alias = "DEFINITELY_IS")]
    DefinitelyIs,
    #[serde(alias = "presumably_is", alias = "PRESUMABLY_IS")]
    PresumablyIs,
    #[serde(alias = "is_not", alias = "IS_NOT")]
    IsNot,
}

impl Choice {
    /// Both affirmative choices count as YES.
    pub fn is_yes(self) -> bool {
        !matches!(self, Choice::IsNot)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub target_uid: String,
    pub cand_index: usize,
    pub annotator_id: String,
    pub choice: Choice,
}

/// Reads annotation records from `.csv` (with header) or JSONL.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, LabelError> {
    let is_csv = path.extension().map(|e| e.eq_ignore_ascii_case("csv")).unwrap_or(false);
    if is_csv {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| LabelError::Parse { line: 0, message: e.to_string() })?;
        rdr.deserialize()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| LabelError::Parse { line: i + 2, message: e.to_string() }))
            .collect()
    } else {
        fs::read_to_string(path)?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| LabelError::Parse { line: i + 1, message: e.to_string() }))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregatedLabels {
    /// Targets with at least one recap.
    pub labels: BTreeMap<String, Vec<u8>>,
    /// Targets whose 60 labels were all 0.
    pub removed: Vec<String>,
}

fn group_items(records: &[AnnotationRecord]) -> BTreeMap<(&str, usize), Vec<Choice>> {
    let mut items: BTreeMap<(&str, usize), Vec<Choice>> = BTreeMap::new();
    for r in records {
        items.entry((r.target_uid.as_str(), r.cand_index)).or_default().push(r.choice);
    }
    items
}

/// Majority vote over YES/NO per pair; all-negative targets are dropped.
pub fn aggregate_annotations(records: &[AnnotationRecord]) -> Result<AggregatedLabels, LabelError> {
    let items = group_items(records);
    let targets: BTreeSet<&str> = items.keys().map(|(t, _)| *t).collect();
    let mut missing = Vec::new();
    for &t in &targets {
        for k in 0..NUM_CANDIDATES {
            let found = items.get(&(t, k)).map_or(0, Vec::len);
            if found != RATERS_PER_ITEM {
                missing.push(MissingPair { target_uid: t.to_string(), cand_index: k, found });
            }
        }
    }
    if let Some(((t, k), v)) = items.iter().find(|((_, k), _)| *k >= NUM_CANDIDATES) {
        missing.push(MissingPair { target_uid: t.to_string(), cand_index: *k, found: v.len() });
    }
    if !missing.is_empty() {
        return Err(LabelError::IncompleteCoverage { missing });
    }
    let mut out = AggregatedLabels::default();
    for t in targets {
        let labels: Vec<u8> = (0..NUM_CANDIDATES)
            .map(|k| {
                let votes = &items[&(t, k)];
                let yes = votes.iter().filter(|c| c.is_yes()).count();
                (2 * yes > votes.len()) as u8
            })
            .collect();
        if labels.iter().any(|&y| y == 1) {
            out.labels.insert(t.to_string(), labels);
        } else {
            out.removed.push(t.to_string());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub kappa: f64,
    pub items: usize,
    pub raters_per_item: usize,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
    /// Every vote fell in one category, so chance agreement is 1.
    pub degenerate: bool,
}

/// Fleiss' kappa over items given as per-category vote counts.
pub fn fleiss_kappa_counts(items: &[Vec<usize>]) -> Result<KappaReport, LabelError> {
    let first = items.first().ok_or(LabelError::Empty)?;
    let n: usize = first.iter().sum();
    let categories = first.len();
    for it in items {
        let m: usize = it.iter().sum();
        if m != n || it.len() != categories {
            return Err(LabelError::UnequalRaterCounts(n, m));
        }
    }
    if n < 2 {
        return Err(LabelError::TooFewRaters(n));
    }
    // Kappa = (A/B - C/D) / (1 - C/D) with integer A, B, C, D, so the
    // result is rounded once.
    let big_n = items.len() as i128;
    let ni = n as i128;
    let a: i128 = items.iter().map(|it| it.iter().map(|&c| (c * c) as i128).sum::<i128>() - ni).sum();
    let b = big_n * ni * (ni - 1);
    let c: i128 = (0..categories)
        .map(|j| {
            let t: i128 = items.iter().map(|it| it[j] as i128).sum();
            t * t
        })
        .sum();
    let d = (big_n * ni) * (big_n * ni);
    let observed = a as f64 / b as f64;
    let expected = c as f64 / d as f64;
    if c == d {
        let kappa = if a == b { 1.0 } else { 0.0 };
        if kappa != 1.0 {
            log::warn!("degenerate vote distribution; kappa defined as 0");
        }
        return Ok(KappaReport { kappa, items: items.len(), raters_per_item: n, observed_agreement: observed, expected_agreement: expected, degenerate: true });
    }
    Ok(KappaReport {
        kappa: (a * d - c * b) as f64 / (b * (d - c)) as f64,
        items: items.len(),
        raters_per_item: n,
        observed_agreement: observed,
        expected_agreement: expected,
        degenerate: false,
    })
}

/// Fleiss' kappa over (target, candidate) items after YES/NO mapping.
pub fn fleiss_kappa(records: &[AnnotationRecord]) -> Result<KappaReport, LabelError> {
    let counts: Vec<Vec<usize>> = group_items(records)
        .values()
        .map(|votes| {
            let yes = votes.iter().filter(|c| c.is_yes()).count();
            vec![yes, votes.len() - yes]
        })
        .collect();
    fleiss_kappa_counts(&counts)
}

// ---------------------------------------------------------------------------
// Event alignment

/// Applies the consecutive-top-k rule to paragraph indices in rank order:
/// top-3 when top-1/top-2 are adjacent and the three form a run, top-2 when
/// only top-1/top-2 are adjacent, top-1 otherwise. Output is ascending.
pub fn consecutive_top_k(ranked: &[usize]) -> Vec<usize> {
    match ranked {
        [] => Vec::new(),
        [a] => vec![*a],
        [a, b, rest @ ..] => {
            if a.abs_diff(*b) != 1 {
                return vec![*a];
            }
            if let Some(c) = rest.first() {
                let mut three = vec![*a, *b, *c];
                three.sort_unstable();
                if three[1] == three[0] + 1 && three[2] == three[1] + 1 {
                    return three;
                }
            }
            let mut two = vec![*a, *b];
            two.sort_unstable();
            two
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParagraphMapping {
    /// Position within the prelude or body list.
    pub position: usize,
    pub episode: String,
    /// Mapped global paragraph indices (consecutive, 1 to 3 entries; empty when unmapped).
    pub mapped: Vec<usize>,
    pub top_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMapping {
    pub event_name: String,
    pub prelude: Vec<ParagraphMapping>,
    pub body: Vec<ParagraphMapping>,
}

impl EventMapping {
    /// Body-mapped paragraphs with the earliest body position mapping to each,
    /// ordered by that position.
    pub fn body_targets(&self) -> Vec<(usize, usize)> {
        let mut first: BTreeMap<usize, usize> = BTreeMap::new();
        for m in &self.body {
            for &g in &m.mapped {
                first.entry(g).or_insert(m.position);
            }
        }
        let mut v: Vec<(usize, usize)> = first.into_iter().collect();
        v.sort_by_key(|&(g, pos)| (pos, g));
        v
    }

    pub fn prelude_paragraphs(&self) -> BTreeSet<usize> {
        self.prelude.iter().flat_map(|m| m.mapped.iter().copied()).collect()
    }

    /// Earliest body position that maps to `global`.
    pub fn body_position(&self, global: usize) -> Option<usize> {
        self.body.iter().filter(|m| m.mapped.contains(&global)).map(|m| m.position).min()
    }

    /// Paragraphs that are recaps for a target paragraph of this event.
    pub fn recaps_of(&self, target: usize) -> Option<BTreeSet<usize>> {
        let pos = self.body_position(target)?;
        let mut out = self.prelude_paragraphs();
        for m in self.body.iter().filter(|m| m.position < pos) {
            out.extend(m.mapped.iter().copied());
        }
        out.remove(&target);
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnmappedParagraph {
    pub event_name: String,
    pub section: String,
    pub position: usize,
    pub top_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventAlignment {
    pub events: Vec<EventMapping>,
    pub unmapped: Vec<UnmappedParagraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub events: usize,
    pub event_paragraphs: usize,
    pub mapped_paragraphs: usize,
    pub mapping_rate: f64,
    pub targets: usize,
    pub unmapped: Vec<UnmappedParagraph>,
}

impl EventAlignment {
    pub fn report(&self) -> AlignmentReport {
        let total: usize = self.events.iter().map(|e| e.prelude.len() + e.body.len()).sum();
        let mapped = total - self.unmapped.len();
        AlignmentReport {
            events: self.events.len(),
            event_paragraphs: total,
            mapped_paragraphs: mapped,
            mapping_rate: if total == 0 { 0.0 } else { mapped as f64 / total as f64 },
            targets: self.events.iter().map(|e| e.body_targets().len()).sum(),
            unmapped: self.unmapped.clone(),
        }
    }
}

/// Maps every event paragraph onto paragraphs of its anchored episode by
/// cosine similarity. With `min_similarity`, paragraphs whose best score is
/// lower stay unmapped.
pub fn align_events(
    synopsis: &SynopsisCorpus,
    embedder: &dyn EmbeddingBackend,
    min_similarity: Option<f64>,
) -> Result<EventAlignment, LabelError> {
    let mut episode_vecs: HashMap<&str, Vec<(usize, Vec<f64>)>> = HashMap::new();
    for ep in &synopsis.episodes {
        let range = synopsis.episode_range(&ep.episode_id).expect("episode exists");
        let vecs = ep
            .paragraphs
            .iter()
            .zip(range)
            .map(|(p, g)| embedder.embed_one(p).map(|v| (g, v)))
            .collect::<Result<Vec<_>, _>>()?;
        episode_vecs.insert(ep.episode_id.as_str(), vecs);
    }
    let mut events = Vec::with_capacity(synopsis.events.len());
    let mut unmapped = Vec::new();
    for ev in &synopsis.events {
        let mut map_section = |paras: &[crate::corpus::AnchoredParagraph], section: &str| -> Result<Vec<ParagraphMapping>, LabelError> {
            let mut out = Vec::with_capacity(paras.len());
            for (position, p) in paras.iter().enumerate() {
                let cands = episode_vecs.get(p.episode.as_str()).filter(|v| !v.is_empty());
                let cands = cands.ok_or_else(|| LabelError::EmptyEpisode(p.episode.clone()))?;
                let q = embedder.embed_one(&p.text)?;
                let mut scored: Vec<(usize, f64)> = cands.iter().map(|(g, v)| (*g, cosine(&q, v))).collect();
                scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let top_score = scored[0].1;
                let mapped = if min_similarity.map_or(true, |m| top_score >= m) {
                    let ranked: Vec<usize> = scored.iter().take(3).map(|(g, _)| *g).collect();
                    consecutive_top_k(&ranked)
                } else {
                    unmapped.push(UnmappedParagraph { event_name: ev.event_name.clone(), section: section.into(), position, top_score });
                    Vec::new()
                };
                out.push(ParagraphMapping { position, episode: p.episode.clone(), mapped, top_score });
            }
            Ok(out)
        };
        let prelude = map_section(&ev.prelude_paragraphs, "prelude")?;
        let body = map_section(&ev.body_paragraphs, "body")?;
        events.push(EventMapping { event_name: ev.event_name.clone(), prelude, body });
    }
    Ok(EventAlignment { events, unmapped })
}

fn event_index_from_uid(uid: &str) -> Option<usize> {
    uid.rsplit_once('@').and_then(|(_, i)| i.parse().ok())
}

/// Labels TV instances: candidate = 1 iff its paragraph is mapped from the
/// same event's prelude or from a body position before the target's.
pub fn derive_tv_labels(alignment: &EventAlignment, instances: &mut [TargetInstance]) -> Result<(), LabelError> {
    for inst in instances.iter_mut() {
        let target = inst.target.span.start;
        let event = event_index_from_uid(&inst.uid)
            .and_then(|i| alignment.events.get(i))
            .filter(|e| Some(&e.event_name) == inst.event_name.as_ref())
            .or_else(|| {
                alignment
                    .events
                    .iter()
                    .find(|e| Some(&e.event_name) == inst.event_name.as_ref() && e.body_position(target).is_some())
            });
        let recaps = event
            .and_then(|e| e.recaps_of(target))
            .ok_or_else(|| LabelError::TargetNotInAlignment(inst.uid.clone()))?;
        inst.labels = Some(inst.candidates.iter().map(|c| recaps.contains(&c.span.start) as u8).collect());
    }
    Ok(())
}

/// Drops instances without any positive label; returns the removed uids.
pub fn retain_with_recaps(instances: &mut Vec<TargetInstance>) -> Vec<String> {
    let mut removed = Vec::new();
    instances.retain(|i| {
        let keep = i.labels.as_ref().map_or(false, |l| l.contains(&1));
        if !keep {
            removed.push(i.uid.clone());
        }
        keep
    });
    removed
}
