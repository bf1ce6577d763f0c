//! Candidate scoring and recap selection.
//!
//! Every ranker produces 60 scores (higher means more recap-like, `-inf`
//! for inadmissible candidates) and a selection ordered by score, then by
//! proximity.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{cosine, encode, BackendError, EmbeddingBackend, NerBackend};
use crate::corpus::AliasTable;
use crate::snippet::{TargetInstance, NUM_CANDIDATES};

pub const AT_K: usize = 5;

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("free_threshold selection needs a threshold")]
    MissingThreshold,
    #[error("expected {NUM_CANDIDATES} scores, got {0}")]
    ScoreCount(usize),
    #[error("no admissible candidates")]
    EmptyAdmissible,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    Top5,
    FreeThreshold,
    Closest5,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionFlags {
    /// Char-Filter admitted nothing (or the target had no names) so all 60 were kept.
    #[serde(default)]
    pub filter_fallback: bool,
    /// Fewer than 5 finite-scored candidates were available.
    #[serde(default)]
    pub shortfall: bool,
    /// Selected indices added only to fill a top-5 list.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pads: Vec<usize>,
    /// The model response could not be parsed.
    #[serde(default)]
    pub unparseable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedPrediction {
    pub target_uid: String,
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
    pub policy: SelectionPolicy,
    pub flags: PredictionFlags,
}

impl RankedPrediction {
    /// Selection minus pads, for free-mode metrics.
    pub fn free_selection(&self) -> BTreeSet<usize> {
        self.selected.iter().copied().filter(|k| !self.flags.pads.contains(k)).collect()
    }
}

/// Candidate order: score descending, then nearest first.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Applies a selection policy. `-inf` and NaN scores are never selected.
pub fn select(scores: &[f64], policy: SelectionPolicy, threshold: Option<f64>) -> Result<Vec<usize>, RankingError> {
    let finite = |k: &usize| scores[*k] > f64::NEG_INFINITY;
    Ok(match policy {
        SelectionPolicy::Closest5 => (0..AT_K.min(scores.len())).collect(),
        SelectionPolicy::Top5 => rank_order(scores).into_iter().filter(finite).take(AT_K).collect(),
        SelectionPolicy::FreeThreshold => {
            let t = threshold.ok_or(RankingError::MissingThreshold)?;
            rank_order(scores).into_iter().filter(finite).filter(|&k| scores[k] >= t).collect()
        }
    })
}

/// Wraps scores into a prediction, flagging top-5 shortfalls.
pub fn predict(uid: &str, scores: Vec<f64>, policy: SelectionPolicy, threshold: Option<f64>) -> Result<RankedPrediction, RankingError> {
    if scores.len() != NUM_CANDIDATES {
        return Err(RankingError::ScoreCount(scores.len()));
    }
    let selected = select(&scores, policy, threshold)?;
    let flags = PredictionFlags { shortfall: policy == SelectionPolicy::Top5 && selected.len() < AT_K, ..Default::default() };
    Ok(RankedPrediction { target_uid: uid.to_string(), scores, selected, policy, flags })
}

/// The `k` nearest candidates, scored by `-cand_index`.
pub fn closest_k(instance: &TargetInstance, k: usize) -> RankedPrediction {
    let k = k.min(NUM_CANDIDATES);
    RankedPrediction {
        target_uid: instance.uid.clone(),
        scores: (0..NUM_CANDIDATES).map(|i| -(i as f64)).collect(),
        selected: (0..k).collect(),
        policy: SelectionPolicy::Closest5,
        flags: PredictionFlags::default(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharFilterResult {
    pub admissible: BTreeSet<usize>,
    /// Candidates sharing a name with the target, before any fallback.
    pub matched: BTreeSet<usize>,
    pub target_names: BTreeSet<String>,
    pub fallback: bool,
}

fn names_in(text: &str, ner: &dyn NerBackend, alias: &AliasTable) -> BTreeSet<String> {
    ner.recognize(text).iter().map(|n| alias.canonicalize(n)).collect()
}

/// Admits candidates that mention a character recognized in the target,
/// comparing canonical names. Falls back to all 60 when nothing matches.
pub fn char_filter(instance: &TargetInstance, ner: &dyn NerBackend, alias: &AliasTable) -> CharFilterResult {
    let target_names = names_in(&instance.target.text, ner, alias);
    let matched: BTreeSet<usize> = if target_names.is_empty() {
        BTreeSet::new()
    } else {
        instance
            .candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| !names_in(&c.text, ner, alias).is_disjoint(&target_names))
            .map(|(k, _)| k)
            .collect()
    };
    let fallback = matched.is_empty();
    let admissible = if fallback { (0..instance.candidates.len()).collect() } else { matched.clone() };
    CharFilterResult { admissible, matched, target_names, fallback }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankOptions {
    pub policy: SelectionPolicy,
    pub threshold: Option<f64>,
    /// Prefix TV targets with their event name.
    pub with_event: bool,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self { policy: SelectionPolicy::Top5, threshold: None, with_event: true }
    }
}

/// Cosine between the target and each admissible candidate; `-inf` for the rest.
pub fn embedding_scores(
    instance: &TargetInstance,
    backend: &dyn EmbeddingBackend,
    admissible: &BTreeSet<usize>,
    with_event: bool,
) -> Result<Vec<f64>, RankingError> {
    if admissible.is_empty() {
        return Err(RankingError::EmptyAdmissible);
    }
    let ks: Vec<usize> = admissible.iter().copied().filter(|&k| k < instance.candidates.len()).collect();
    let mut texts = vec![instance.target_text(with_event)];
    texts.extend(ks.iter().map(|&k| instance.candidates[k].text.clone()));
    let vecs = encode(backend, &texts)?;
    let mut scores = vec![f64::NEG_INFINITY; instance.candidates.len()];
    for (row, &k) in vecs[1..].iter().zip(&ks) {
        scores[k] = cosine(&vecs[0], row);
    }
    Ok(scores)
}

pub fn rank_by_embedding(
    instance: &TargetInstance,
    backend: &dyn EmbeddingBackend,
    admissible: &BTreeSet<usize>,
    opts: &RankOptions,
) -> Result<RankedPrediction, RankingError> {
    let scores = embedding_scores(instance, backend, admissible, opts.with_event)?;
    predict(&instance.uid, scores, opts.policy, opts.threshold)
}

pub fn all_candidates() -> BTreeSet<usize> {
    (0..NUM_CANDIDATES).collect()
}

// ---------------------------------------------------------------------------
// JSONL

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    target_uid: String,
    policy: SelectionPolicy,
    /// `null` encodes an inadmissible (`-inf`) candidate.
    scores: Vec<Option<f64>>,
    selected: Vec<usize>,
    flags: PredictionFlags,
}

impl RankedPrediction {
    pub fn to_json_line(&self) -> String {
        let row = PredictionRow {
            target_uid: self.target_uid.clone(),
            policy: self.policy,
            scores: self.scores.iter().map(|&s| s.is_finite().then_some(s)).collect(),
            selected: self.selected.clone(),
            flags: self.flags.clone(),
        };
        serde_json::to_string(&row).expect("prediction rows serialize")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        let row: PredictionRow = serde_json::from_str(line)?;
        Ok(Self {
            target_uid: row.target_uid,
            scores: row.scores.into_iter().map(|s| s.unwrap_or(f64::NEG_INFINITY)).collect(),
            selected: row.selected,
            policy: row.policy,
            flags: row.flags,
        })
    }
}

pub fn write_predictions(path: &Path, preds: &[RankedPrediction]) -> Result<(), RankingError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in preds {
        writeln!(w, "{}", p.to_json_line())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<RankedPrediction>, RankingError> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| RankedPrediction::from_json_line(l).map_err(|e| RankingError::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{GazetteerNer, HashBagEmbedder};
    use crate::synth;
    use proptest::prelude::*;

    fn instance() -> TargetInstance {
        synth::planted_benchmark(&synth::PlantedConfig { targets: 1, ..Default::default() }, 1).remove(0)
    }

    #[test]
    fn equal_scores_pick_nearest() {
        assert_eq!(select(&[0.3; 60], SelectionPolicy::Top5, None).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn threshold_above_max_selects_nothing() {
        let s: Vec<f64> = (0..60).map(|k| k as f64 / 100.0).collect();
        assert!(select(&s, SelectionPolicy::FreeThreshold, Some(1.0)).unwrap().is_empty());
        assert!(matches!(select(&s, SelectionPolicy::FreeThreshold, None), Err(RankingError::MissingThreshold)));
    }

    #[test]
    fn closest_k_bounds() {
        let inst = instance();
        assert_eq!(closest_k(&inst, 5).selected, vec![0, 1, 2, 3, 4]);
        assert_eq!(closest_k(&inst, 60).selected, (0..60).collect::<Vec<_>>());
    }

    #[test]
    fn neg_inf_never_selected_and_shortfall_flagged() {
        let mut s = vec![f64::NEG_INFINITY; 60];
        s[7] = 0.1;
        s[3] = 0.2;
        let p = predict("u", s, SelectionPolicy::Top5, None).unwrap();
        assert_eq!(p.selected, vec![3, 7]);
        assert!(p.flags.shortfall);
    }

    #[test]
    fn self_similar_candidate_ranks_first() {
        let mut inst = instance();
        inst.candidates[33].text = inst.target.text.clone();
        let p = rank_by_embedding(&inst, &HashBagEmbedder::new(64), &all_candidates(), &RankOptions::default()).unwrap();
        assert_eq!(p.selected[0], 33);
        assert!((p.scores[33] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn char_filter_sets_and_fallback() {
        let mut inst = instance();
        inst.target.text = "Zed looks at the sea".into();
        for (k, c) in inst.candidates.iter_mut().enumerate() {
            c.text = if k == 0 || k == 4 { "Zed ran".into() } else { "Quo ran".into() };
        }
        let ner = GazetteerNer::new(["Zed", "Quo"]);
        let r = char_filter(&inst, &ner, &AliasTable::default());
        assert_eq!(r.admissible, BTreeSet::from([0, 4]));
        assert!(!r.fallback);
        inst.target.text = "nobody here".into();
        let r = char_filter(&inst, &ner, &AliasTable::default());
        assert_eq!(r.admissible.len(), 60);
        assert!(r.fallback);
    }

    #[test]
    fn alias_makes_other_name_admissible() {
        let mut inst = instance();
        inst.target.text = "Dantès returned".into();
        for c in inst.candidates.iter_mut() {
            c.text = "the sea".into();
        }
        inst.candidates[12].text = "Busoni spoke softly".into();
        inst.candidates[20].text = "Dantès wrote".into();
        let alias = AliasTable::from_pairs([("Dantès", &["Busoni"][..])]).unwrap();
        let ner = GazetteerNer::new(alias.all_surfaces());
        assert_eq!(char_filter(&inst, &ner, &alias).admissible, BTreeSet::from([12, 20]));
        assert_eq!(char_filter(&inst, &ner, &AliasTable::default()).admissible, BTreeSet::from([20]));
    }

    #[test]
    fn planted_ranking_equals_brute_force_cosine() {
        let backend = HashBagEmbedder::new(128);
        for inst in synth::planted_benchmark(&synth::PlantedConfig { targets: 5, ..Default::default() }, 2) {
            let p = rank_by_embedding(&inst, &backend, &all_candidates(), &RankOptions::default()).unwrap();
            let t = backend.embed_one(&inst.target.text).unwrap();
            let mut oracle: Vec<(f64, usize)> =
                inst.candidates.iter().enumerate().map(|(k, c)| (cosine(&t, &backend.embed_one(&c.text).unwrap()), k)).collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = oracle.iter().take(5).map(|x| x.1).collect();
            assert_eq!(p.selected, want);
        }
    }

    #[test]
    fn json_round_trip_with_neg_inf() {
        let mut s = vec![0.5; 60];
        s[2] = f64::NEG_INFINITY;
        let p = predict("x", s, SelectionPolicy::Top5, None).unwrap();
        let line = p.to_json_line();
        assert!(line.contains("null"));
        assert_eq!(RankedPrediction::from_json_line(&line).unwrap(), p);
    }

    proptest! {
        #[test]
        fn selection_matches_sort_oracle(scores in proptest::collection::vec(-5i32..5, 60), t in -5i32..5) {
            let s: Vec<f64> = scores.iter().map(|&x| x as f64 / 2.0).collect();
            let mut oracle: Vec<usize> = (0..60).collect();
            oracle.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
            prop_assert_eq!(select(&s, SelectionPolicy::Top5, None).unwrap(), oracle[..5].to_vec());
            let free: Vec<usize> = oracle.iter().copied().filter(|&k| s[k] >= t as f64).collect();
            prop_assert_eq!(select(&s, SelectionPolicy::FreeThreshold, Some(t as f64)).unwrap(), free);
        }

        #[test]
        fn positive_scaling_keeps_selection(scores in proptest::collection::vec(-100.0f64..100.0, 60), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = scores.iter().map(|x| x * c).collect();
            prop_assert_eq!(select(&scores, SelectionPolicy::Top5, None).unwrap(), select(&scaled, SelectionPolicy::Top5, None).unwrap());
        }

        #[test]
        fn filter_then_rank_equals_rank_then_delete(mask in proptest::collection::vec(any::<bool>(), 60)) {
            let inst = instance();
            let admissible: BTreeSet<usize> = (0..60).filter(|&k| mask[k]).collect();
            prop_assume!(!admissible.is_empty());
            let backend = HashBagEmbedder::new(64);
            let full = embedding_scores(&inst, &backend, &all_candidates(), true).unwrap();
            let part = embedding_scores(&inst, &backend, &admissible, true).unwrap();
            for k in 0..60 {
                if admissible.contains(&k) {
                    prop_assert_eq!(part[k], full[k]);
                } else {
                    prop_assert_eq!(part[k], f64::NEG_INFINITY);
                }
            }
        }

        #[test]
        fn adding_aliases_never_shrinks_matches(extra in 0usize..3) {
            let mut inst = instance();
            inst.target.text = "Dantès and Zed".into();
            let names = ["Busoni", "Wilmore", "Sinbad"];
            for (k, c) in inst.candidates.iter_mut().enumerate() {
                c.text = format!("{} was there", names[k % 3]);
            }
            let base = AliasTable::from_pairs([("Dantès", &[][..])]).unwrap();
            let more = AliasTable::from_pairs([("Dantès", &names[..extra])]).unwrap();
            let ner = GazetteerNer::new(["Dantès", "Zed", "Busoni", "Wilmore", "Sinbad"]);
            let a = char_filter(&inst, &ner, &base).matched;
            let b = char_filter(&inst, &ner, &more).matched;
            prop_assert!(a.is_subset(&b));
            prop_assert!(b.iter().all(|&k| k < 60));
        }
    }
}
