//! Metrics: macro R@5/P@5/F1@5, micro free-selection R/P/F1, the
//! Select-All baseline, distance-banded @5 metrics and the recap distance
//! histogram. Rates are reported ×100.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranking::{predict, RankedPrediction, SelectionPolicy};
use crate::snippet::{TargetInstance, NUM_CANDIDATES};

pub const DEFAULT_BANDS: [usize; 3] = [20, 40, 60];
/// Width of one histogram bucket in candidate positions.
pub const HISTOGRAM_BUCKET: usize = 20;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prediction for target {0:?}")]
    MissingPrediction(String),
    #[error("target {0:?} has no gold recap")]
    NoGold(String),
    #[error("band {0} is larger than {NUM_CANDIDATES}")]
    BandLargerThan60(usize),
    #[error("band must be positive")]
    EmptyBand,
    #[error("ranker failed on {uid:?}: {message}")]
    Ranker { uid: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Harmonic mean of two rates; 0 when both are 0.
pub fn f1(recall: f64, precision: f64) -> f64 {
    if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    }
}

/// Free-mode F1 of Select-All when precision (×100) equals the positive rate.
pub fn select_all_f1(precision: f64) -> f64 {
    2.0 * precision / (1.0 + precision / 100.0)
}

/// Rounds to the two decimals used in reports.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct At5Metrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub targets: usize,
    /// Targets with fewer than 5 selections.
    pub shortfall_targets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeMetrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Nothing was selected anywhere; precision reported as 0.
    pub precision_undefined: bool,
}

fn gold_of(inst: &TargetInstance) -> Result<BTreeSet<usize>, EvalError> {
    match inst.gold() {
        Some(g) if !g.is_empty() => Ok(g),
        _ => Err(EvalError::NoGold(inst.uid.clone())),
    }
}

fn index_predictions(preds: &[RankedPrediction]) -> BTreeMap<&str, &RankedPrediction> {
    preds.iter().map(|p| (p.target_uid.as_str(), p)).collect()
}

/// Sum in ascending order so the result is independent of target order.
fn ordered_mean(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-target (R@5, P@5) as fractions.
pub fn per_target_at5(selected: &BTreeSet<usize>, gold: &BTreeSet<usize>) -> (f64, f64) {
    let hit = selected.intersection(gold).count() as f64;
    let r = hit / gold.len() as f64;
    let p = if selected.is_empty() { 0.0 } else { hit / selected.len() as f64 };
    (r, p)
}

/// Macro R@5 and P@5 over targets, F1 from the two averages.
pub fn at5_metrics(preds: &[RankedPrediction], instances: &[TargetInstance]) -> Result<At5Metrics, EvalError> {
    at5_with_gold(preds, instances.iter().map(|i| gold_of(i).map(|g| (i.uid.as_str(), g))))
}

fn at5_with_gold<'a>(
    preds: &[RankedPrediction],
    golds: impl Iterator<Item = Result<(&'a str, BTreeSet<usize>), EvalError>>,
) -> Result<At5Metrics, EvalError> {
    let by_uid = index_predictions(preds);
    let (mut rs, mut ps) = (Vec::new(), Vec::new());
    let mut shortfall = 0;
    for g in golds {
        let (uid, gold) = g?;
        let pred = by_uid.get(uid).ok_or_else(|| EvalError::MissingPrediction(uid.to_string()))?;
        let selected: BTreeSet<usize> = pred.selected.iter().copied().collect();
        shortfall += (selected.len() < crate::ranking::AT_K) as usize;
        let (r, p) = per_target_at5(&selected, &gold);
        rs.push(r);
        ps.push(p);
    }
    let targets = rs.len();
    let recall = 100.0 * ordered_mean(rs);
    let precision = 100.0 * ordered_mean(ps);
    Ok(At5Metrics { recall, precision, f1: f1(recall, precision), targets, shortfall_targets: shortfall })
}

/// Micro-averaged free-selection metrics; pads are not counted as selections.
pub fn free_metrics(preds: &[RankedPrediction], instances: &[TargetInstance]) -> Result<FreeMetrics, EvalError> {
    let by_uid = index_predictions(preds);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for inst in instances {
        let gold = gold_of(inst)?;
        let pred = by_uid.get(inst.uid.as_str()).ok_or_else(|| EvalError::MissingPrediction(inst.uid.clone()))?;
        let sel = pred.free_selection();
        let hit = sel.intersection(&gold).count();
        tp += hit;
        fp += sel.len() - hit;
        fn_ += gold.len() - hit;
    }
    let recall = if tp + fn_ == 0 { 0.0 } else { 100.0 * tp as f64 / (tp + fn_) as f64 };
    let precision_undefined = tp + fp == 0;
    if precision_undefined {
        log::warn!("no candidate selected in free mode; precision reported as 0");
    }
    let precision = if precision_undefined { 0.0 } else { 100.0 * tp as f64 / (tp + fp) as f64 };
    Ok(FreeMetrics { recall, precision, f1: f1(recall, precision), tp, fp, fn_, precision_undefined })
}

/// Selects every candidate of every target.
pub fn select_all_baseline(instances: &[TargetInstance]) -> Vec<RankedPrediction> {
    instances
        .iter()
        .map(|i| predict(&i.uid, vec![0.0; NUM_CANDIDATES], SelectionPolicy::FreeThreshold, Some(0.0)).expect("60 scores"))
        .collect()
}

/// Re-selects a prediction with candidates at or beyond `band` removed.
/// Closest-5 keeps its selection when the band holds at least 5 candidates.
pub fn restrict_to_band(pred: &RankedPrediction, band: usize) -> RankedPrediction {
    let scores: Vec<f64> = pred.scores.iter().enumerate().map(|(k, &s)| if k < band { s } else { f64::NEG_INFINITY }).collect();
    match pred.policy {
        SelectionPolicy::Closest5 => {
            let mut p = pred.clone();
            p.scores = scores;
            p.selected.retain(|&k| k < band);
            p
        }
        _ => {
            let mut p = predict(&pred.target_uid, scores, SelectionPolicy::Top5, None).expect("60 scores");
            p.flags.filter_fallback = pred.flags.filter_fallback;
            p
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandMetrics {
    pub band: usize,
    pub metrics: At5Metrics,
    /// Targets without any gold recap inside the band, left out of the band's averages.
    pub skipped_targets: usize,
}

/// @5 metrics when only the nearest `band` candidates exist. `rank` is
/// called once per (target, band) and should return a prediction over the
/// restricted candidates.
pub fn distance_banded<F>(instances: &[TargetInstance], bands: &[usize], mut rank: F) -> Result<Vec<BandMetrics>, EvalError>
where
    F: FnMut(&TargetInstance, usize) -> Result<RankedPrediction, EvalError>,
{
    let mut out = Vec::with_capacity(bands.len());
    for &band in bands {
        if band > NUM_CANDIDATES {
            return Err(EvalError::BandLargerThan60(band));
        }
        if band == 0 {
            return Err(EvalError::EmptyBand);
        }
        let mut preds = Vec::new();
        let mut golds = Vec::new();
        let mut skipped = 0;
        for inst in instances {
            let gold: BTreeSet<usize> = gold_of(inst)?.into_iter().filter(|&k| k < band).collect();
            if gold.is_empty() {
                skipped += 1;
                continue;
            }
            preds.push(rank(inst, band)?);
            golds.push((inst.uid.as_str(), gold));
        }
        let metrics = at5_with_gold(&preds, golds.into_iter().map(Ok))?;
        out.push(BandMetrics { band, metrics, skipped_targets: skipped });
    }
    Ok(out)
}

/// Banded metrics for fixed score vectors: each prediction is restricted
/// and re-selected per band.
pub fn distance_banded_from(preds: &[RankedPrediction], instances: &[TargetInstance], bands: &[usize]) -> Result<Vec<BandMetrics>, EvalError> {
    let by_uid = index_predictions(preds);
    distance_banded(instances, bands, |inst, band| {
        let p = by_uid.get(inst.uid.as_str()).ok_or_else(|| EvalError::MissingPrediction(inst.uid.clone()))?;
        Ok(if band == NUM_CANDIDATES { (*p).clone() } else { restrict_to_band(p, band) })
    })
}

/// Share of gold recaps falling in each 20-candidate distance bucket.
pub fn distance_histogram(instances: &[TargetInstance]) -> Vec<f64> {
    let buckets = NUM_CANDIDATES.div_ceil(HISTOGRAM_BUCKET);
    let mut counts = vec![0usize; buckets];
    for inst in instances {
        for k in inst.gold().unwrap_or_default() {
            counts[k / HISTOGRAM_BUCKET] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subset: String,
    pub method: String,
    pub config_hash: String,
    pub targets: usize,
    pub positives: usize,
    pub at5: At5Metrics,
    pub free: Option<FreeMetrics>,
    pub bands: Vec<BandMetrics>,
    pub histogram: Vec<f64>,
    pub filter_fallbacks: usize,
    pub padded_targets: usize,
    pub unparseable_responses: usize,
}

impl EvalReport {
    /// Full report: @5, free mode when `free` predictions are given, bands
    /// from the @5 predictions' scores, and the gold histogram.
    pub fn build(
        subset: &str,
        method: &str,
        config_hash: &str,
        preds: &[RankedPrediction],
        free: Option<&[RankedPrediction]>,
        instances: &[TargetInstance],
        bands: &[usize],
    ) -> Result<Self, EvalError> {
        let at5 = at5_metrics(preds, instances)?;
        let free = free.map(|f| free_metrics(f, instances)).transpose()?;
        let bands = distance_banded_from(preds, instances, bands)?;
        Ok(Self {
            subset: subset.to_string(),
            method: method.to_string(),
            config_hash: config_hash.to_string(),
            targets: instances.len(),
            positives: instances.iter().map(|i| i.gold().map_or(0, |g| g.len())).sum(),
            at5,
            free,
            bands,
            histogram: distance_histogram(instances),
            filter_fallbacks: preds.iter().filter(|p| p.flags.filter_fallback).count(),
            padded_targets: preds.iter().filter(|p| !p.flags.pads.is_empty()).count(),
            unparseable_responses: preds.iter().filter(|p| p.flags.unparseable).count(),
        })
    }

    /// One-line summary with two decimals.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} {}: R@5 {:.2} P@5 {:.2} F1@5 {:.2} ({} targets)",
            self.subset, self.method, self.at5.recall, self.at5.precision, self.at5.f1, self.targets
        );
        if let Some(f) = &self.free {
            let _ = write!(s, " | free R {:.2} P {:.2} F1 {:.2}", f.recall, f.precision, f.f1);
        }
        s
    }

    /// Plot data: histogram buckets and band curves.
    pub fn plot_csv(&self) -> String {
        let mut s = String::from("series,x,value\n");
        for (i, v) in self.histogram.iter().enumerate() {
            let lo = i * HISTOGRAM_BUCKET;
            let _ = writeln!(s, "histogram,{}-{},{v:.6}", lo, lo + HISTOGRAM_BUCKET - 1);
        }
        for b in &self.bands {
            let _ = writeln!(s, "band_recall,{},{:.4}", b.band, b.metrics.recall);
            let _ = writeln!(s, "band_precision,{},{:.4}", b.band, b.metrics.precision);
            let _ = writeln!(s, "band_f1,{},{:.4}", b.band, b.metrics.f1);
        }
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), EvalError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.report.json")), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join(format!("{stem}.plot.csv")), self.plot_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::{closest_k, PredictionFlags};
    use crate::synth;
    use proptest::prelude::*;

    fn labeled(gold: &[usize], uid: &str) -> TargetInstance {
        let mut inst = synth::planted_benchmark(&synth::PlantedConfig { targets: 1, ..Default::default() }, 0).remove(0);
        inst.uid = uid.to_string();
        inst.labels = Some((0..60).map(|k| gold.contains(&k) as u8).collect());
        inst
    }

    fn chosen(uid: &str, sel: &[usize]) -> RankedPrediction {
        RankedPrediction {
            target_uid: uid.into(),
            scores: vec![0.0; 60],
            selected: sel.to_vec(),
            policy: SelectionPolicy::Top5,
            flags: PredictionFlags::default(),
        }
    }

    #[test]
    fn at5_definition_case() {
        let m = at5_metrics(&[chosen("t", &[1, 2, 40, 41, 42])], &[labeled(&[1, 2, 3], "t")]).unwrap();
        assert!((m.recall - 200.0 / 3.0).abs() < 1e-12);
        assert!((m.precision - 40.0).abs() < 1e-12);
    }

    #[test]
    fn published_pairs_reproduce_f1() {
        assert!((round2(f1(33.36, 67.49)) - 44.66).abs() <= 0.02);
        assert!((round2(f1(43.65, 54.00)) - 48.28).abs() <= 0.02);
    }

    #[test]
    fn select_all_on_nddp_rate() {
        assert!((select_all_f1(9.39) - 17.17).abs() <= 0.02);
    }

    #[test]
    fn select_all_matches_closed_form() {
        let insts = synth::planted_benchmark(&synth::PlantedConfig::default(), 5);
        let pos: usize = insts.iter().map(|i| i.gold().unwrap().len()).sum();
        let p = 100.0 * pos as f64 / (60 * insts.len()) as f64;
        let m = free_metrics(&select_all_baseline(&insts), &insts).unwrap();
        assert_eq!(m.recall, 100.0);
        assert!((m.precision - p).abs() < 1e-12);
        assert!((m.f1 - select_all_f1(m.precision)).abs() < 1e-9);
    }

    #[test]
    fn empty_free_selection_flags_precision() {
        let insts = vec![labeled(&[3], "a")];
        let m = free_metrics(&[chosen("a", &[])], &insts).unwrap();
        assert_eq!((m.recall, m.precision, m.f1), (0.0, 0.0, 0.0));
        assert!(m.precision_undefined);
    }

    #[test]
    fn pads_excluded_from_free_mode() {
        let insts = vec![labeled(&[3], "a")];
        let mut p = chosen("a", &[3, 0, 1]);
        p.flags.pads = vec![0, 1];
        let m = free_metrics(&[p], &insts).unwrap();
        assert_eq!(m.precision, 100.0);
    }

    #[test]
    fn missing_prediction_is_an_error() {
        assert!(matches!(at5_metrics(&[], &[labeled(&[1], "x")]), Err(EvalError::MissingPrediction(_))));
    }

    #[test]
    fn histogram_cases() {
        assert_eq!(distance_histogram(&[labeled(&[0], "a")]), vec![1.0, 0.0, 0.0]);
        let h = distance_histogram(&[labeled(&[5, 25, 45], "a")]);
        assert!(h.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn band_60_equals_unrestricted_and_band_errors() {
        let insts = synth::planted_benchmark(&synth::PlantedConfig::default(), 8);
        let preds: Vec<_> = insts.iter().map(|i| closest_k(i, 5)).collect();
        let full = at5_metrics(&preds, &insts).unwrap();
        let bands = distance_banded_from(&preds, &insts, &[60]).unwrap();
        assert_eq!(bands[0].metrics, full);
        assert!(matches!(distance_banded_from(&preds, &insts, &[61]), Err(EvalError::BandLargerThan60(61))));
    }

    #[test]
    fn near_gold_band_20_recall_at_least_band_60() {
        // gold only in the nearest 20; an imperfect scorer prefers far candidates sometimes
        let insts: Vec<_> = (0..20).map(|t| labeled(&[t % 20, (t * 7) % 20], &format!("t{t}"))).collect();
        let preds: Vec<_> = insts
            .iter()
            .map(|i| {
                let scores: Vec<f64> = (0..60).map(|k| if i.labels.as_ref().unwrap()[k] == 1 { 0.5 } else { ((k * 37) % 11) as f64 / 10.0 }).collect();
                predict(&i.uid, scores, SelectionPolicy::Top5, None).unwrap()
            })
            .collect();
        let b = distance_banded_from(&preds, &insts, &[20, 60]).unwrap();
        assert!(b[0].metrics.recall >= b[1].metrics.recall);
    }

    proptest! {
        #[test]
        fn at5_bounds_and_order_invariance(seed in 0u64..50, rot in 0usize..20) {
            let insts = synth::planted_benchmark(&synth::PlantedConfig { targets: 20, ..Default::default() }, seed);
            let preds: Vec<_> = insts.iter().map(|i| {
                let scores: Vec<f64> = (0..60).map(|k| ((k as u64 * 31 + seed) % 17) as f64).collect();
                predict(&i.uid, scores, SelectionPolicy::Top5, None).unwrap()
            }).collect();
            let m = at5_metrics(&preds, &insts).unwrap();
            prop_assert!((0.0..=100.0).contains(&m.recall) && (0.0..=100.0).contains(&m.precision));
            prop_assert!(m.f1 >= m.recall.min(m.precision) - 1e-12 && m.f1 <= m.recall.max(m.precision) + 1e-12);
            let mut rotated = insts.clone();
            rotated.rotate_left(rot);
            prop_assert_eq!(at5_metrics(&preds, &rotated).unwrap(), m);
        }

        #[test]
        fn f1_equals_common_value(x in 0.0f64..100.0) {
            prop_assert!((f1(x, x) - x).abs() < 1e-12);
        }

        #[test]
        fn duplicate_selections_count_once(k in 0usize..60) {
            let insts = vec![labeled(&[k], "a")];
            let a = at5_metrics(&[chosen("a", &[k])], &insts).unwrap();
            let b = at5_metrics(&[chosen("a", &[k, k, k])], &insts).unwrap();
            prop_assert_eq!(a.recall, b.recall);
            prop_assert_eq!(a.precision, b.precision);
        }
    }
}
