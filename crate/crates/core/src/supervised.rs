//! Supervised pair classification with class-imbalance weighting.
//!
//! Training pairs come from every labeled subset except the held-out one.
//! The loss is cross-entropy with per-class weights
//! `w_y = 2 (1/n_y)^a / sum_y' (1/n_y')^a`, normalized by the batch's total
//! weight so that `a = 0` is plain mean cross-entropy.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{EncodedText, OptimizerConfig, Param, TokenEncoder};
use crate::ranking::{predict, RankedPrediction, RankingError, SelectionPolicy};
use crate::snippet::TargetInstance;

#[derive(Debug, Error)]
pub enum SupervisedError {
    #[error("class counts must be positive (n0={0}, n1={1})")]
    ZeroClassCount(f64, f64),
    #[error("unknown subset {0:?}")]
    UnknownSubset(String),
    #[error("need at least two subsets, got {0}")]
    TooFewSubsets(usize),
    #[error("training pairs contain a single class")]
    SingleClassTrainSet,
    #[error("instance {0:?} has no labels")]
    Unlabeled(String),
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExample {
    pub target_uid: String,
    pub cand_index: usize,
    pub target_text: String,
    pub candidate_text: String,
    pub label: u8,
    pub subset: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSubset {
    pub id: String,
    pub instances: Vec<TargetInstance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub n0: f64,
    pub n1: f64,
    pub alpha: f64,
    pub weight_0: f64,
    pub weight_1: f64,
}

impl ClassWeights {
    pub fn of(&self, label: u8) -> f64 {
        if label == 1 {
            self.weight_1
        } else {
            self.weight_0
        }
    }
}

/// Counts may be fractional (rates work as well as counts).
pub fn class_weights(n0: f64, n1: f64, alpha: f64) -> Result<ClassWeights, SupervisedError> {
    if !(n0 > 0.0 && n1 > 0.0) {
        return Err(SupervisedError::ZeroClassCount(n0, n1));
    }
    let (a, b) = ((1.0 / n0).powf(alpha), (1.0 / n1).powf(alpha));
    Ok(ClassWeights { n0, n1, alpha, weight_0: 2.0 * a / (a + b), weight_1: 2.0 * b / (a + b) })
}

/// Default exponent: 0 for plain encoders, 1 for similarity-pretrained ones.
pub fn default_alpha(similarity_pretrained: bool) -> f64 {
    if similarity_pretrained {
        1.0
    } else {
        0.0
    }
}

pub fn pair_examples(subset: &LabeledSubset, with_event: bool) -> Result<Vec<PairExample>, SupervisedError> {
    let mut out = Vec::new();
    for inst in &subset.instances {
        let labels = inst.labels.as_ref().ok_or_else(|| SupervisedError::Unlabeled(inst.uid.clone()))?;
        let target_text = inst.target_text(with_event);
        for (k, c) in inst.candidates.iter().enumerate() {
            out.push(PairExample {
                target_uid: inst.uid.clone(),
                cand_index: k,
                target_text: target_text.clone(),
                candidate_text: c.text.clone(),
                label: labels[k],
                subset: subset.id.clone(),
            });
        }
    }
    Ok(out)
}

/// Training pairs from every subset except `held_out`, plus the held-out instances.
pub fn build_splits(
    subsets: &[LabeledSubset],
    held_out: &str,
    with_event: bool,
) -> Result<(Vec<PairExample>, Vec<TargetInstance>), SupervisedError> {
    if subsets.len() < 2 {
        return Err(SupervisedError::TooFewSubsets(subsets.len()));
    }
    let eval = subsets.iter().find(|s| s.id == held_out).ok_or_else(|| SupervisedError::UnknownSubset(held_out.to_string()))?;
    let mut train = Vec::new();
    for s in subsets.iter().filter(|s| s.id != held_out) {
        train.extend(pair_examples(s, with_event)?);
    }
    Ok((train, eval.instances.clone()))
}

pub fn write_pairs(path: &Path, pairs: &[PairExample]) -> Result<(), SupervisedError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        let row = serde_json::json!({"target_text": p.target_text, "candidate_text": p.candidate_text, "label": p.label, "subset": p.subset});
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Every pair once per epoch, shuffled; the loss carries class weights.
    Standard,
    /// Pairs drawn with replacement with probability proportional to their
    /// class weight; the loss is unweighted.
    WeightedOversample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Weighted,
    /// Plain mean cross-entropy, ignoring class weights.
    Unweighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedConfig {
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup: f64,
    pub max_length: usize,
    pub sampler: Sampler,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            lr: 2e-5,
            epochs: 10,
            batch_size: 32,
            warmup: 0.1,
            max_length: 256,
            sampler: Sampler::Standard,
            loss: LossKind::Weighted,
            seed: 0,
        }
    }
}

/// Weighted mean cross-entropy over two-class logits and its gradient.
pub fn weighted_ce(logits: &[[f64; 2]], labels: &[u8], weights: &ClassWeights) -> (f64, Vec<[f64; 2]>) {
    let w: Vec<f64> = labels.iter().map(|&y| weights.of(y)).collect();
    let total: f64 = w.iter().sum();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for ((z, &y), &wi) in logits.iter().zip(labels).zip(&w) {
        let (ce, p) = ce_one(z, y);
        loss += wi * ce;
        let scale = wi / total;
        grads.push([scale * (p[0] - (y == 0) as u8 as f64), scale * (p[1] - (y == 1) as u8 as f64)]);
    }
    (loss / total, grads)
}

/// Plain mean cross-entropy.
pub fn unweighted_ce(logits: &[[f64; 2]], labels: &[u8]) -> (f64, Vec<[f64; 2]>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        let (ce, p) = ce_one(z, y);
        loss += ce;
        let scale = 1.0 / n;
        grads.push([scale * (p[0] - (y == 0) as u8 as f64), scale * (p[1] - (y == 1) as u8 as f64)]);
    }
    (loss / n, grads)
}

fn ce_one(z: &[f64; 2], y: u8) -> (f64, [f64; 2]) {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    let p = [(z[0] - lse).exp(), (z[1] - lse).exp()];
    (lse - z[y as usize], p)
}

/// Target and candidate encoded as two segments of one input.
struct PairInput {
    target: EncodedText,
    candidate: EncodedText,
}

struct PairForward {
    xt: Vec<Vec<f64>>,
    xc: Vec<Vec<f64>>,
    mt: Vec<f64>,
    mc: Vec<f64>,
    h: Vec<f64>,
}

/// Cross-encoder style pair classifier over a token encoder. The sequence
/// representation is `[mean over all tokens ; target mean * candidate mean]`
/// and a linear head maps it to two logits.
#[derive(Debug, Clone)]
pub struct PairClassifier<E> {
    pub encoder: E,
    /// Row-major 2 × 2d.
    pub w: Param,
    pub b: Param,
    pub config: SupervisedConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedEpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    /// Every batch loss, in order.
    pub batch_losses: Vec<f64>,
}

fn mean_rows(x: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for row in x {
        for (a, v) in m.iter_mut().zip(row) {
            *a += v;
        }
    }
    let n = x.len().max(1) as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

impl<E: TokenEncoder + Clone> PairClassifier<E> {
    pub fn new(encoder: E, config: SupervisedConfig) -> Self {
        let d = encoder.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc1a5);
        let w = Param::new((0..4 * d).map(|_| rng.gen_range(-0.01..0.01)).collect());
        Self { encoder, w, b: Param::zeros(2), config }
    }

    fn input(&self, target: &str, candidate: &str) -> PairInput {
        let half = (self.config.max_length.saturating_sub(1) / 2).max(1);
        let mut target = self.encoder.encode_text(target);
        let mut candidate = self.encoder.encode_text(candidate);
        for enc in [&mut target, &mut candidate] {
            enc.tokens.truncate(half);
            enc.ids.truncate(half);
        }
        PairInput { target, candidate }
    }

    fn forward(&self, inp: &PairInput) -> PairForward {
        let d = self.encoder.dim();
        let xt = self.encoder.forward(&inp.target);
        let xc = self.encoder.forward(&inp.candidate);
        let mt = mean_rows(&xt, d);
        let mc = mean_rows(&xc, d);
        let n = (xt.len() + xc.len()).max(1) as f64;
        let mut h: Vec<f64> = (0..d).map(|k| (mt[k] * xt.len() as f64 + mc[k] * xc.len() as f64) / n).collect();
        h.extend((0..d).map(|k| mt[k] * mc[k]));
        PairForward { xt, xc, mt, mc, h }
    }

    fn logits(&self, h: &[f64]) -> [f64; 2] {
        let dh = h.len();
        let row = |c: usize| self.w.value[c * dh..(c + 1) * dh].iter().zip(h).map(|(a, b)| a * b).sum::<f64>() + self.b.value[c];
        [row(0), row(1)]
    }

    /// Probability that the candidate is a recap of the target.
    pub fn prob(&self, target: &str, candidate: &str) -> f64 {
        let z = self.logits(&self.forward(&self.input(target, candidate)).h);
        ce_one(&z, 1).1[1]
    }

    fn backward(&mut self, inp: &PairInput, f: &PairForward, dz: [f64; 2]) {
        let d = self.encoder.dim();
        let dh_len = 2 * d;
        if self.w.grad.len() != self.w.len() {
            self.w.zero_grad();
            self.b.zero_grad();
        }
        let mut dh = vec![0.0; dh_len];
        for c in 0..2 {
            self.b.grad[c] += dz[c];
            for k in 0..dh_len {
                self.w.grad[c * dh_len + k] += dz[c] * f.h[k];
                dh[k] += dz[c] * self.w.value[c * dh_len + k];
            }
        }
        let n = (f.xt.len() + f.xc.len()).max(1) as f64;
        let (nt, nc) = (f.xt.len().max(1) as f64, f.xc.len().max(1) as f64);
        let gt: Vec<Vec<f64>> = f.xt.iter().map(|_| (0..d).map(|k| dh[k] / n + dh[d + k] * f.mc[k] / nt).collect()).collect();
        let gc: Vec<Vec<f64>> = f.xc.iter().map(|_| (0..d).map(|k| dh[k] / n + dh[d + k] * f.mt[k] / nc).collect()).collect();
        self.encoder.backward(&inp.target, &gt);
        self.encoder.backward(&inp.candidate, &gc);
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = ((self.config.warmup * total as f64).ceil() as usize).max(1);
        if step < warm {
            self.config.lr * (step + 1) as f64 / warm as f64
        } else {
            self.config.lr * (total - step) as f64 / (total - warm).max(1) as f64
        }
    }

    /// Trains on the pairs; the model is updated in place.
    pub fn train(&mut self, pairs: &[PairExample]) -> Result<Vec<SupervisedEpochLog>, SupervisedError> {
        let labels: BTreeSet<u8> = pairs.iter().map(|p| p.label).collect();
        if labels.len() < 2 {
            return Err(SupervisedError::SingleClassTrainSet);
        }
        let n1 = pairs.iter().filter(|p| p.label == 1).count() as f64;
        let n0 = pairs.len() as f64 - n1;
        let weights = class_weights(n0, n1, self.config.alpha)?;
        let inputs: Vec<PairInput> = pairs.iter().map(|p| self.input(&p.target_text, &p.candidate_text)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let bs = self.config.batch_size.max(1);
        let total_steps = self.config.epochs * pairs.len().div_ceil(bs);
        let mut step = 0usize;
        let mut logs = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let order: Vec<usize> = match self.config.sampler {
                Sampler::Standard => {
                    let mut o: Vec<usize> = (0..pairs.len()).collect();
                    o.shuffle(&mut rng);
                    o
                }
                Sampler::WeightedOversample => {
                    let dist = WeightedIndex::new(pairs.iter().map(|p| weights.of(p.label))).expect("positive weights");
                    (0..pairs.len()).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            let mut batch_losses = Vec::new();
            for batch in order.chunks(bs) {
                let fwd: Vec<PairForward> = batch.iter().map(|&i| self.forward(&inputs[i])).collect();
                let logits: Vec<[f64; 2]> = fwd.iter().map(|f| self.logits(&f.h)).collect();
                let ys: Vec<u8> = batch.iter().map(|&i| pairs[i].label).collect();
                correct += logits.iter().zip(&ys).filter(|(z, &y)| ((z[1] > z[0]) as u8) == y).count();
                let (loss, dz) = match (self.config.loss, self.config.sampler) {
                    (LossKind::Unweighted, _) | (_, Sampler::WeightedOversample) => unweighted_ce(&logits, &ys),
                    (LossKind::Weighted, Sampler::Standard) => weighted_ce(&logits, &ys, &weights),
                };
                batch_losses.push(loss);
                loss_sum += loss;
                self.encoder.zero_grad();
                self.w.zero_grad();
                self.b.zero_grad();
                for ((&i, f), g) in batch.iter().zip(&fwd).zip(&dz) {
                    self.backward(&inputs[i], f, *g);
                }
                let opt = OptimizerConfig::adam(self.lr_at(step, total_steps));
                step += 1;
                self.encoder.step(&opt, step as u64);
                self.w.step(&opt, step as u64);
                self.b.step(&opt, step as u64);
            }
            let mean_loss = loss_sum / batch_losses.len().max(1) as f64;
            log::info!("supervised epoch {epoch}: loss {mean_loss:.4}");
            logs.push(SupervisedEpochLog { epoch, mean_loss, train_accuracy: correct as f64 / order.len() as f64, batch_losses });
        }
        Ok(logs)
    }

    pub fn accuracy(&self, pairs: &[PairExample]) -> f64 {
        let ok = pairs.iter().filter(|p| ((self.prob(&p.target_text, &p.candidate_text) > 0.5) as u8) == p.label).count();
        ok as f64 / pairs.len().max(1) as f64
    }

    /// Positive-class probabilities as ranking scores.
    pub fn score_pairs(
        &self,
        instance: &TargetInstance,
        with_event: bool,
        policy: SelectionPolicy,
        threshold: Option<f64>,
    ) -> Result<RankedPrediction, SupervisedError> {
        let t = instance.target_text(with_event);
        let scores = instance.candidates.iter().map(|c| self.prob(&t, &c.text)).collect();
        Ok(predict(&instance.uid, scores, policy, threshold)?)
    }
}
