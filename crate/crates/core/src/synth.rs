//! Synthetic fixtures with known ground truth: numbered books, a planted
//! recap benchmark with closed-form baseline expectations, synopsis dumps
//! with planted event threads, and note corpora with planted keywords.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::corpus::{AliasTable, Corpus, CorpusManifest, Language, SentenceRecord};
use crate::line2note::NoteRecord;
use crate::snippet::{SentenceSpan, Snippet, SnippetKind, TargetInstance, NUM_CANDIDATES};

/// A book of `n` sentences `"Sentence {i}."` with no character mentions.
pub fn numbered_book(book_id: &str, n: usize) -> Corpus {
    let sentences = (0..n)
        .map(|i| SentenceRecord { sentence_id: i, text: format!("Sentence {i}."), char_mentions: BTreeSet::new(), token_count: 3 })
        .collect();
    Corpus {
        book_id: book_id.to_string(),
        language: Language::En,
        sentences,
        main_characters: BTreeSet::new(),
        alias_table: AliasTable::default(),
        manifest: CorpusManifest {
            book_id: book_id.to_string(),
            language: Language::En,
            segmenter_version: "synthetic".into(),
            ner_version: "synthetic".into(),
            tokenizer_id: "simple-v1".into(),
            main_character_min_count: 0,
        },
    }
}

const FILLER: &[&str] = &[
    "river", "stone", "lantern", "market", "winter", "bridge", "letter", "harbor", "garden", "tower", "candle", "road",
    "window", "silver", "meadow", "storm", "cellar", "orchard", "anchor", "mirror", "valley", "forest", "feather", "wheel",
    "copper", "blanket", "kettle", "ladder", "saddle", "thread", "basket", "pillar", "marble", "cloak", "shovel", "barrel",
];

fn filler_words(rng: &mut ChaCha8Rng, n: usize) -> Vec<&'static str> {
    (0..n).map(|_| *FILLER.choose(rng).expect("non-empty")).collect()
}

/// Raw text of `n` sentences where "Zed" appears in exactly `zed` sentences
/// and "Quo" in exactly `quo`, at seeded positions.
pub fn zed_quo_book(n: usize, zed: usize, quo: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<usize> = (0..n).collect();
    let zed_ids: BTreeSet<usize> = ids.choose_multiple(&mut rng, zed.min(n)).copied().collect();
    let quo_ids: BTreeSet<usize> = ids.choose_multiple(&mut rng, quo.min(n)).copied().collect();
    let mut out = String::new();
    for i in 0..n {
        let mut words = filler_words(&mut rng, 5);
        if zed_ids.contains(&i) {
            words.insert(1, "Zed");
        }
        if quo_ids.contains(&i) {
            words.insert(2, "Quo");
        }
        words[0] = "the";
        out.push_str(&words.join(" "));
        out.push_str(". ");
        if i % 40 == 39 {
            out.push_str("\n\n");
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Planted recap benchmark

/// Per-distance recap probability: high for the nearest candidates, a small
/// floor elsewhere.
pub fn near_biased_rates() -> Vec<f64> {
    (0..NUM_CANDIDATES).map(|k| 0.02 + 0.3 * (-(k as f64) / 6.0).exp()).collect()
}

#[derive(Debug, Clone)]
pub struct PlantedConfig {
    pub targets: usize,
    /// Independent recap probability per cand_index.
    pub rates: Vec<f64>,
    /// Probability a non-recap candidate mentions the target's character.
    pub distractor_mention_rate: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self { targets: 50, rates: near_biased_rates(), distractor_mention_rate: 0.3 }
    }
}

/// Generates labeled instances. Gold sets are i.i.d. Bernoulli per
/// cand_index conditioned on being non-empty. Recaps carry the target's
/// keyword; every text is filler otherwise.
pub fn planted_benchmark(cfg: &PlantedConfig, seed: u64) -> Vec<TargetInstance> {
    assert_eq!(cfg.rates.len(), NUM_CANDIDATES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let book = format!("planted{seed}");
    (0..cfg.targets)
        .map(|t| {
            let labels: Vec<u8> = loop {
                let l: Vec<u8> = cfg.rates.iter().map(|&p| rng.gen_bool(p) as u8).collect();
                if l.contains(&1) {
                    break l;
                }
            };
            let keyword = format!("clue{t}x{seed}");
            let hero = if t % 2 == 0 { "Zed" } else { "Quo" };
            let other = if t % 2 == 0 { "Quo" } else { "Zed" };
            let mut target_words = filler_words(&mut rng, 10);
            target_words.insert(3, &keyword);
            target_words.insert(0, hero);
            let central = 400;
            let gap_j = 385;
            let target = Snippet {
                book_id: book.clone(),
                span: SentenceSpan::new(central - 3, central + 3),
                text: target_words.join(" "),
                kind: SnippetKind::Target,
                central_id: Some(central),
                cand_index: None,
            };
            let candidates = (0..NUM_CANDIDATES)
                .map(|k| {
                    let mut words = filler_words(&mut rng, 10);
                    if labels[k] == 1 {
                        let pos = rng.gen_range(0..words.len());
                        words.insert(pos, &keyword);
                        words.insert(0, hero);
                    } else if rng.gen_bool(cfg.distractor_mention_rate) {
                        words.insert(0, hero);
                    } else {
                        words.insert(0, other);
                    }
                    Snippet {
                        book_id: book.clone(),
                        span: crate::snippet::candidate_span(gap_j, k, 6),
                        text: words.join(" "),
                        kind: SnippetKind::Candidate,
                        central_id: None,
                        cand_index: Some(k),
                    }
                })
                .collect();
            TargetInstance {
                uid: format!("{book}:{t}"),
                target,
                candidates,
                gap_j,
                labels: Some(labels),
                event_name: None,
                chapter_context: None,
            }
        })
        .collect()
}

/// Distribution of the number of successes among independent Bernoulli trials.
pub fn poisson_binomial(rates: &[f64]) -> Vec<f64> {
    let mut dist = vec![1.0];
    for &p in rates {
        let mut next = vec![0.0; dist.len() + 1];
        for (n, &q) in dist.iter().enumerate() {
            next[n] += q * (1.0 - p);
            next[n + 1] += q * p;
        }
        dist = next;
    }
    dist
}

/// Expected (R@5, P@5) ×100 of the Closest-5 baseline on the planted
/// generator, conditioned on a non-empty gold set.
pub fn closest5_expectation(rates: &[f64]) -> (f64, f64) {
    let nonempty = 1.0 - rates.iter().map(|p| 1.0 - p).product::<f64>();
    let precision = rates[..5].iter().sum::<f64>() / 5.0 / nonempty;
    // E[1{k in G} / |G|] = p_k * E[1 / (1 + others)]
    let recall = (0..5)
        .map(|k| {
            let others: Vec<f64> = rates.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, &p)| p).collect();
            let inv: f64 = poisson_binomial(&others).iter().enumerate().map(|(n, q)| q / (n as f64 + 1.0)).sum();
            rates[k] * inv
        })
        .sum::<f64>()
        / nonempty;
    (100.0 * recall, 100.0 * precision)
}

// ---------------------------------------------------------------------------
// Synopsis dumps

#[derive(Debug, Clone)]
pub struct PlantedThread {
    pub event_name: String,
    pub prelude: Vec<usize>,
    pub body: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PlantedSynopsis {
    /// JSONL dump accepted by `ingest_synopses`.
    pub dump: String,
    pub threads: Vec<PlantedThread>,
    pub paragraphs: usize,
}

/// Paragraph text. Each paragraph has its own words plus a parity tag
/// repeated often enough to outweigh shared filler, so the most similar
/// other paragraph is never an adjacent one.
fn synopsis_paragraph(g: usize, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<String> = (0..6).map(|i| format!("p{g}w{i}")).collect();
    words.extend(filler_words(rng, 4).into_iter().map(String::from));
    words.extend(std::iter::repeat(format!("parity{}", g % 2)).take(4));
    words.join(" ")
}

/// `episodes` episodes of `per_episode` paragraphs and `events` threads.
/// Event paragraphs copy their episode paragraph verbatim, so the alignment
/// is the identity. Some threads share paragraphs.
pub fn planted_synopsis(episodes: usize, per_episode: usize, events: usize, seed: u64) -> PlantedSynopsis {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = episodes * per_episode;
    let texts: Vec<String> = (0..total).map(|g| synopsis_paragraph(g, &mut rng)).collect();
    let episode_of = |g: usize| format!("s01e{:02}", g / per_episode + 1);
    let mut lines = Vec::new();
    for e in 0..episodes {
        let paras = &texts[e * per_episode..(e + 1) * per_episode];
        lines.push(json!({"kind": "episode", "episode_id": format!("s01e{:02}", e + 1), "air_order": e, "paragraphs": paras}));
    }
    // reverse file order of episodes is fixed by air_order
    lines.reverse();
    let mut threads = Vec::new();
    let pool: Vec<usize> = (0..total).collect();
    for ev in 0..events {
        let len = rng.gen_range(3..=6);
        let mut chosen: Vec<usize> = pool.choose_multiple(&mut rng, len + 2).copied().collect();
        chosen.sort_unstable();
        // the first one or two paragraphs of the thread form the prelude
        let n_prelude = rng.gen_range(0..=2);
        let prelude: Vec<usize> = chosen[..n_prelude].to_vec();
        let mut body: Vec<usize> = chosen[n_prelude..].to_vec();
        body.truncate(len);
        if ev % 3 == 2 {
            // shuffle one pair so body order is not always global order
            body.swap(0, 1);
        }
        let anchored = |ids: &[usize]| -> Vec<serde_json::Value> {
            ids.iter().map(|&g| json!({"text": texts[g], "episode": episode_of(g)})).collect()
        };
        lines.push(json!({"kind": "event", "event_name": format!("Event {ev}"), "prelude": anchored(&prelude), "body": anchored(&body)}));
        threads.push(PlantedThread { event_name: format!("Event {ev}"), prelude, body });
    }
    let dump = lines.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("\n") + "\n";
    PlantedSynopsis { dump, threads, paragraphs: total }
}

// ---------------------------------------------------------------------------
// Note corpora

#[derive(Debug, Clone)]
pub struct PlantedNotes {
    /// Word sequence per book.
    pub books: BTreeMap<String, Vec<String>>,
    pub notes: Vec<NoteRecord>,
}

/// `n_pairs` notes over `n_books` books. Notes attached to the same anchor
/// span overlap by more than 0.8 and all contain the anchor's keyword, which
/// also sits inside the span. Distinct anchors in a book never overlap and
/// never share a keyword. Keywords come from one pool shared by all books.
pub fn planted_notes(n_pairs: usize, n_books: usize, keyword_pool: usize, seed: u64) -> PlantedNotes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_book = n_pairs.div_ceil(n_books);
    let mut books = BTreeMap::new();
    let mut notes = Vec::with_capacity(n_pairs);
    let span_len = 8;
    let stride = 20;
    for b in 0..n_books {
        let book_id = format!("notes{b}");
        let mut n_here = per_book.min(n_pairs - notes.len());
        let mut anchors = Vec::new();
        while n_here > 0 {
            let k = rng.gen_range(1..=3).min(n_here);
            anchors.push(k);
            n_here -= k;
        }
        assert!(anchors.len() <= keyword_pool, "keyword pool too small for one book");
        let keywords: Vec<usize> = (0..keyword_pool).collect::<Vec<_>>().choose_multiple(&mut rng, anchors.len()).copied().collect();
        let mut words: Vec<String> = filler_words(&mut rng, stride * anchors.len() + stride).into_iter().map(String::from).collect();
        for (a, (&count, &kw)) in anchors.iter().zip(&keywords).enumerate() {
            let start = stride * a + 6;
            let keyword = format!("kw{kw}");
            words[start + 2] = keyword.clone();
            for _ in 0..count {
                let shift = rng.gen_range(0..=1);
                let s = start + shift;
                let e = s + span_len - 1;
                let mut note_words = filler_words(&mut rng, 5);
                note_words.insert(rng.gen_range(0..=5), &keyword);
                notes.push(NoteRecord { book_id: book_id.clone(), note: note_words.join(" "), s, e });
            }
        }
        books.insert(book_id, words);
    }
    PlantedNotes { books, notes }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_binomial_matches_binomial() {
        let d = poisson_binomial(&[0.5; 4]);
        let want = [1.0, 4.0, 6.0, 4.0, 1.0].map(|c| c / 16.0);
        for (a, b) in d.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn closest5_expectation_degenerate_cases() {
        // only candidate 0 can be gold → R@5 = 100, P@5 = 20
        let mut rates = vec![0.0; NUM_CANDIDATES];
        rates[0] = 0.4;
        let (r, p) = closest5_expectation(&rates);
        assert!((r - 100.0).abs() < 1e-9 && (p - 20.0).abs() < 1e-9);
        // gold always exactly {0..4} → both 100
        let mut rates = vec![0.0; NUM_CANDIDATES];
        rates[..5].fill(1.0);
        let (r, p) = closest5_expectation(&rates);
        assert!((r - 100.0).abs() < 1e-9 && (p - 100.0).abs() < 1e-9);
    }

    #[test]
    fn planted_benchmark_is_deterministic_and_labeled() {
        let cfg = PlantedConfig::default();
        let a = planted_benchmark(&cfg, 3);
        let b = planted_benchmark(&cfg, 3);
        assert_eq!(a, b);
        assert!(a.iter().all(|i| i.gold().is_some_and(|g| !g.is_empty())));
    }

    #[test]
    fn zed_quo_counts() {
        let text = zed_quo_book(500, 120, 40, 1);
        let sentences: Vec<&str> = text.split(". ").collect();
        assert_eq!(sentences.iter().filter(|s| s.contains("Zed")).count(), 120);
        assert_eq!(sentences.iter().filter(|s| s.contains("Quo")).count(), 40);
    }
}
